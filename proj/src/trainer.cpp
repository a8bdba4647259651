#include "mtv/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

namespace mtv {

std::uint64_t episode_seed(SeedStream stream, std::uint64_t run_seed, std::uint64_t index) {
  if (index > 0xFFFFFFFFull) throw ConfigError("episode index exceeds 32 bits");
  return (std::uint64_t(stream) << 56) | ((run_seed & 0xFFFFFFull) << 32) | index;
}

SeedStream stream_of(std::uint64_t episode_seed) { return SeedStream(episode_seed >> 56); }

TaskMixture TaskMixture::standard(const TaskUniverse& universe) {
  TaskMixture m;
  m.universe = universe;
  auto ids = [](int n) {
    std::vector<int> v(n);
    for (int i = 0; i < n; ++i) v[i] = i;
    return v;
  };
  m.entries = {{TaskKind::token_bijection, ids(8), 0.5},
               {TaskKind::key_value_lookup, ids(8), 0.25},
               {TaskKind::two_way_one_shot_class, ids(4), 0.1},
               {TaskKind::soft_token_class, ids(4), 0.15}};
  return m;
}

void TaskMixture::validate() const {
  if (entries.empty()) throw ConfigError("task mixture is empty");
  double total = 0;
  for (const auto& e : entries) {
    if (e.task_ids.empty()) throw ConfigError("mixture entry " + to_string(e.kind) + " has no task ids");
    if (!(e.weight >= 0)) throw ConfigError("mixture weights must be >= 0");
    total += e.weight;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("mixture weights sum to " + std::to_string(total) + ", not 1");
  if (min_shots < 0 || max_shots < min_shots) throw ConfigError("invalid shot range");
  universe.validate();
}

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0)) throw ConfigError("lr must be > 0");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  if (grad_clip < 0) throw ConfigError("grad_clip must be >= 0");
}

template <class Scalar>
Model<Scalar> init_model(const ModelConfig& config, std::uint64_t seed) {
  Weights<Scalar> w = Weights<Scalar>::zeros(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for_each_tensor(w, [&](const std::string& name, auto& t) {
    const bool gain = name.ends_with("_gain");
    const bool bias = name.ends_with("_bias") || name.ends_with(".b1") || name.ends_with(".b2");
    if (gain)
      t.setOnes();
    else if (!bias)
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = Scalar(normal(rng));
  });
  return Model<Scalar>(config, std::move(w));
}

namespace {

template <class Scalar>
using View = Eigen::Map<Matrix<Scalar>>;

template <class Scalar>
std::vector<std::pair<std::string, View<Scalar>>> tensor_views(Weights<Scalar>& w) {
  std::vector<std::pair<std::string, View<Scalar>>> out;
  for_each_tensor(w, [&](const std::string& name, auto& t) { out.emplace_back(name, View<Scalar>(t.data(), t.rows(), t.cols())); });
  return out;
}

template <class Scalar>
void ln_forward(const Matrix<Scalar>& x, const Vector<Scalar>& g, const Vector<Scalar>& b, Matrix<Scalar>& xhat,
                Vector<Scalar>& rstd, Matrix<Scalar>& out) {
  const Scalar eps = Scalar(kLayerNormEps);
  xhat.resize(x.rows(), x.cols());
  rstd.resize(x.rows());
  out.resize(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.row(r).mean();
    const Scalar var = (x.row(r).array() - mean).square().mean();
    rstd[r] = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mean) * rstd[r];
    out.row(r) = (xhat.row(r).array() * g.transpose().array() + b.transpose().array()).matrix();
  }
}

template <class Scalar>
Matrix<Scalar> ln_backward(const Matrix<Scalar>& dy, const Matrix<Scalar>& xhat, const Vector<Scalar>& rstd,
                           const Vector<Scalar>& g, Vector<Scalar>& dg, Vector<Scalar>& db) {
  dg += (dy.array() * xhat.array()).colwise().sum().transpose().matrix();
  db += dy.colwise().sum().transpose();
  Matrix<Scalar> dxhat = dy.array().rowwise() * g.transpose().array();
  Matrix<Scalar> dx(dy.rows(), dy.cols());
  const Scalar n = Scalar(dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const Scalar m1 = dxhat.row(r).sum() / n;
    const Scalar m2 = dxhat.row(r).dot(xhat.row(r)) / n;
    dx.row(r) = rstd[r] * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
  }
  return dx;
}

template <class Scalar>
Scalar gelu(Scalar x) {
  const Scalar c = Scalar(std::sqrt(2.0 / std::numbers::pi));
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(c * (x + Scalar(0.044715) * x * x * x)));
}

template <class Scalar>
Scalar gelu_grad(Scalar x) {
  const Scalar c = Scalar(std::sqrt(2.0 / std::numbers::pi));
  const Scalar t = std::tanh(c * (x + Scalar(0.044715) * x * x * x));
  return Scalar(0.5) * (Scalar(1) + t) +
         Scalar(0.5) * x * (Scalar(1) - t * t) * c * (Scalar(1) + Scalar(3 * 0.044715) * x * x);
}

template <class Scalar>
struct LayerCache {
  Matrix<Scalar> xhat1, h1, q, k, v, z, xhat2, h2, u, a;
  Vector<Scalar> rstd1, rstd2;
  std::vector<Matrix<Scalar>> probs;  // [seq * H + head]
};

struct BatchLayout {
  std::vector<Eigen::Index> offset, length;
  Eigen::Index rows = 0;
};

template <class Scalar>
double loss_impl(const ModelConfig& cfg, const Weights<Scalar>& w, const std::vector<TrainingSequence>& batch,
                 Weights<Scalar>* grad) {
  if (batch.empty()) throw ConfigError("empty training batch");
  const Eigen::Index d = cfg.embed_dim, dh = cfg.head_dim();
  const int H = cfg.n_heads;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));

  BatchLayout lay;
  for (const auto& s : batch) {
    if (s.targets.size() != s.input.size()) throw ShapeError("targets/tokens length mismatch");
    if (s.input.size() > std::size_t(cfg.max_context)) throw ContextOverflow(s.input.size(), cfg.max_context);
    lay.offset.push_back(lay.rows);
    lay.length.push_back(Eigen::Index(s.input.size()));
    lay.rows += Eigen::Index(s.input.size());
  }
  const Eigen::Index R = lay.rows;

  // Embedding.
  Matrix<Scalar> x(R, d);
  std::vector<bool> soft_row(R, false);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto& in = batch[s].input;
    for (Eigen::Index p = 0; p < lay.length[s]; ++p) {
      const int tok = in.tokens[p];
      if (tok < 0 || tok >= cfg.vocab_size) throw ShapeError("token outside vocabulary");
      x.row(lay.offset[s] + p) = w.token_embedding.row(tok) + w.position_embedding.row(p);
    }
    for (const auto& seg : in.soft) {
      if (seg.embeddings.cols() != d) throw ShapeError("soft token dimension mismatch");
      for (Eigen::Index r = 0; r < seg.embeddings.rows(); ++r) {
        const Eigen::Index p = Eigen::Index(seg.position) + r;
        x.row(lay.offset[s] + p) = seg.embeddings.row(r).template cast<Scalar>() + w.position_embedding.row(p);
        soft_row[lay.offset[s] + p] = true;
      }
    }
  }

  std::vector<LayerCache<Scalar>> caches(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& L = w.layers[l];
    auto& c = caches[l];
    ln_forward(x, L.ln1_gain, L.ln1_bias, c.xhat1, c.rstd1, c.h1);
    c.q.noalias() = c.h1 * L.wq;
    c.k.noalias() = c.h1 * L.wk;
    c.v.noalias() = c.h1 * L.wv;
    c.z.setZero(R, d);
    c.probs.resize(batch.size() * H);
    for (std::size_t s = 0; s < batch.size(); ++s) {
      const Eigen::Index o = lay.offset[s], n = lay.length[s];
      for (int m = 0; m < H; ++m) {
        Matrix<Scalar> sc = c.q.block(o, m * dh, n, dh) * c.k.block(o, m * dh, n, dh).transpose();
        sc *= scale;
        for (Eigen::Index i = 0; i < n; ++i) {
          auto row = sc.row(i);
          const Scalar mx = row.head(i + 1).maxCoeff();
          row.head(i + 1) = (row.head(i + 1).array() - mx).exp();
          row.head(i + 1) /= row.head(i + 1).sum();
          if (i + 1 < n) row.tail(n - i - 1).setZero();
        }
        c.z.block(o, m * dh, n, dh).noalias() = sc * c.v.block(o, m * dh, n, dh);
        c.probs[s * H + m] = std::move(sc);
      }
    }
    x.noalias() += c.z * L.wo;
    ln_forward(x, L.ln2_gain, L.ln2_bias, c.xhat2, c.rstd2, c.h2);
    c.u.noalias() = c.h2 * L.w1;
    c.u.rowwise() += L.b1.transpose();
    if (cfg.activation == Activation::relu)
      c.a = c.u.cwiseMax(Scalar(0));
    else
      c.a = c.u.unaryExpr([](Scalar t) { return gelu(t); });
    x.noalias() += c.a * L.w2;
    x.rowwise() += L.b2.transpose();
  }
  Matrix<Scalar> xhatf, hf;
  Vector<Scalar> rstdf;
  ln_forward(x, w.lnf_gain, w.lnf_bias, xhatf, rstdf, hf);

  // Only answer rows need logits.
  std::vector<Eigen::Index> rows;
  std::vector<int> targets;
  for (std::size_t s = 0; s < batch.size(); ++s)
    for (Eigen::Index p = 0; p < lay.length[s]; ++p)
      if (batch[s].targets[p] >= 0) {
        if (batch[s].targets[p] >= cfg.vocab_size) throw ShapeError("target outside vocabulary");
        rows.push_back(lay.offset[s] + p);
        targets.push_back(batch[s].targets[p]);
      }
  if (rows.empty()) throw ConfigError("training batch has no answer positions");
  const Eigen::Index A = Eigen::Index(rows.size());
  Matrix<Scalar> hsel(A, d);
  for (Eigen::Index i = 0; i < A; ++i) hsel.row(i) = hf.row(rows[i]);
  Matrix<Scalar> logits = hsel * w.unembedding;

  double loss = 0;
  Matrix<Scalar> dlogits(A, cfg.vocab_size);
  for (Eigen::Index i = 0; i < A; ++i) {
    const Scalar mx = logits.row(i).maxCoeff();
    const auto e = (logits.row(i).array() - mx).exp();
    const Scalar sum = e.sum();
    loss += double(std::log(sum) + mx - logits(i, targets[i]));
    dlogits.row(i) = e / sum;
    dlogits(i, targets[i]) -= Scalar(1);
  }
  loss /= double(A);
  if (!grad) return loss;
  dlogits /= Scalar(A);

  Weights<Scalar>& g = *grad;
  g = Weights<Scalar>::zeros(cfg);
  g.unembedding.noalias() = hsel.transpose() * dlogits;
  Matrix<Scalar> dhf = Matrix<Scalar>::Zero(R, d);
  const Matrix<Scalar> dhsel = dlogits * w.unembedding.transpose();
  for (Eigen::Index i = 0; i < A; ++i) dhf.row(rows[i]) = dhsel.row(i);
  Matrix<Scalar> dx = ln_backward(dhf, xhatf, rstdf, w.lnf_gain, g.lnf_gain, g.lnf_bias);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& L = w.layers[l];
    auto& G = g.layers[l];
    const auto& c = caches[l];
    // MLP
    G.w2.noalias() = c.a.transpose() * dx;
    G.b2 = dx.colwise().sum().transpose();
    Matrix<Scalar> du = dx * L.w2.transpose();
    if (cfg.activation == Activation::relu)
      du = du.cwiseProduct((c.u.array() > Scalar(0)).template cast<Scalar>().matrix());
    else
      du = du.cwiseProduct(c.u.unaryExpr([](Scalar t) { return gelu_grad(t); }));
    G.w1.noalias() = c.h2.transpose() * du;
    G.b1 = du.colwise().sum().transpose();
    const Matrix<Scalar> dh2 = du * L.w1.transpose();
    dx += ln_backward(dh2, c.xhat2, c.rstd2, L.ln2_gain, G.ln2_gain, G.ln2_bias);
    // Attention
    G.wo.noalias() = c.z.transpose() * dx;
    const Matrix<Scalar> dz = dx * L.wo.transpose();
    Matrix<Scalar> dq = Matrix<Scalar>::Zero(R, d), dk = Matrix<Scalar>::Zero(R, d), dv = Matrix<Scalar>::Zero(R, d);
    for (std::size_t s = 0; s < batch.size(); ++s) {
      const Eigen::Index o = lay.offset[s], n = lay.length[s];
      for (int m = 0; m < H; ++m) {
        const Matrix<Scalar>& P = c.probs[s * H + m];
        const auto dzm = dz.block(o, m * dh, n, dh);
        const Matrix<Scalar> dP = dzm * c.v.block(o, m * dh, n, dh).transpose();
        dv.block(o, m * dh, n, dh).noalias() = P.transpose() * dzm;
        Matrix<Scalar> dS = P.cwiseProduct(dP);
        const Vector<Scalar> rowdot = dS.rowwise().sum();
        dS -= P.cwiseProduct(rowdot.replicate(1, n));
        dS *= scale;
        dq.block(o, m * dh, n, dh).noalias() = dS * c.k.block(o, m * dh, n, dh);
        dk.block(o, m * dh, n, dh).noalias() = dS.transpose() * c.q.block(o, m * dh, n, dh);
      }
    }
    G.wq.noalias() = c.h1.transpose() * dq;
    G.wk.noalias() = c.h1.transpose() * dk;
    G.wv.noalias() = c.h1.transpose() * dv;
    Matrix<Scalar> dh1 = dq * L.wq.transpose();
    dh1.noalias() += dk * L.wk.transpose();
    dh1.noalias() += dv * L.wv.transpose();
    dx += ln_backward(dh1, c.xhat1, c.rstd1, L.ln1_gain, G.ln1_gain, G.ln1_bias);
  }

  for (std::size_t s = 0; s < batch.size(); ++s)
    for (Eigen::Index p = 0; p < lay.length[s]; ++p) {
      const Eigen::Index r = lay.offset[s] + p;
      g.position_embedding.row(p) += dx.row(r);
      if (!soft_row[r]) g.token_embedding.row(batch[s].input.tokens[p]) += dx.row(r);
    }
  return loss;
}

}  // namespace

template <class Scalar>
double loss_and_grad(const Model<Scalar>& model, const std::vector<TrainingSequence>& batch, Weights<Scalar>* grad) {
  return loss_impl(model.config(), model.weights(), batch, grad);
}

std::vector<TrainingSequence> sample_batch(const TaskMixture& mixture, int batch_size, int max_context,
                                           std::uint64_t seed, std::uint64_t step) {
  std::seed_seq seq{seed, step, std::uint64_t(0xBA7C4)};
  std::mt19937_64 rng(seq);
  std::vector<double> weights;
  for (const auto& e : mixture.entries) weights.push_back(e.weight);
  std::discrete_distribution<int> pick_entry(weights.begin(), weights.end());
  std::uniform_int_distribution<int> pick_shots(mixture.min_shots, mixture.max_shots);

  std::vector<TrainingSequence> out;
  out.reserve(batch_size);
  for (int b = 0; b < batch_size; ++b) {
    const auto& entry = mixture.entries[pick_entry(rng)];
    std::uniform_int_distribution<std::size_t> pick_task(0, entry.task_ids.size() - 1);
    const TaskSpec spec = make_task(entry.kind, entry.task_ids[pick_task(rng)], mixture.universe);
    const std::uint64_t eseed = episode_seed(SeedStream::train, seed, step * std::uint64_t(batch_size) + b);
    for (int n = pick_shots(rng);; --n) {
      if (n < 0) throw ConfigError("no shot count of " + spec.name() + " fits the context");
      try {
        const Episode e = sample_episode(spec, n, eseed);
        out.push_back(render_for_training(e, PromptLayout{spec.sep, spec.eos, spec.image, max_context}));
        break;
      } catch (const ConfigError&) {
      } catch (const ContextOverflow&) {
      }
    }
  }
  return out;
}

template <class Scalar>
double icl_accuracy(const Model<Scalar>& model, const TaskSpec& task, int n_shots, int episodes, std::uint64_t seed) {
  int correct = 0;
  for (int i = 0; i < episodes; ++i) {
    const Episode e = sample_episode(task, n_shots, episode_seed(SeedStream::eval, seed, std::uint64_t(i)));
    const auto in = render_episode(e, PromptLayout{task.sep, task.eos, task.image, model.config().max_context});
    correct += generate(model, in, int(e.gold.size())) == e.gold;
  }
  return episodes > 0 ? double(correct) / episodes : 0.0;
}

template <class Scalar>
TrainResult<Scalar> train(const Model<Scalar>& model, const TaskMixture& mixture, const TrainConfig& cfg,
                          const TrainCallback& on_record) {
  cfg.validate();
  mixture.validate();
  const ModelConfig mc = model.config();
  Weights<Scalar> w = model.weights();
  Weights<Scalar> g = Weights<Scalar>::zeros(mc);
  auto params = tensor_views(w);
  std::vector<AdamState<Scalar>> adam;
  for (const auto& [name, t] : params) adam.emplace_back(t.rows(), t.cols(), AdamHyper{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps});

  std::vector<LossRecord> log;
  for (int step = 0; step < cfg.steps; ++step) {
    const auto batch = sample_batch(mixture, cfg.batch_size, mc.max_context, cfg.seed, std::uint64_t(step));
    const double loss = loss_impl(mc, w, batch, &g);
    if (!std::isfinite(loss)) throw NumericError("training diverged at step " + std::to_string(step));
    auto grads = tensor_views(g);
    double norm2 = 0;
    for (const auto& [name, t] : grads) norm2 += double(t.squaredNorm());
    if (!std::isfinite(norm2)) throw NumericError("non-finite gradient at step " + std::to_string(step));
    const double norm = std::sqrt(norm2);
    if (cfg.grad_clip > 0 && norm > cfg.grad_clip)
      for (auto& [name, t] : grads) t *= Scalar(cfg.grad_clip / norm);
    const double lr_scale = cfg.warmup_steps > 0 ? std::min(1.0, double(step + 1) / cfg.warmup_steps) : 1.0;
    for (std::size_t i = 0; i < params.size(); ++i) adam_update(adam[i], params[i].second, grads[i].second, lr_scale);

    LossRecord rec{step, loss, -1};
    if (cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps)) {
      const Model<Scalar> snapshot(mc, w);
      const auto& first = mixture.entries.front();
      const TaskSpec spec = make_task(first.kind, first.task_ids.front(), mixture.universe);
      rec.eval_acc = icl_accuracy(snapshot, spec, cfg.eval_shots, cfg.eval_episodes, cfg.seed);
    }
    log.push_back(rec);
    if (on_record) on_record(rec);
  }
  return {Model<Scalar>(mc, std::move(w)), std::move(log)};
}

GradCheckReport grad_check(const Model<double>& model, const std::vector<TrainingSequence>& batch, double epsilon) {
  const ModelConfig cfg = model.config();
  Weights<double> analytic = Weights<double>::zeros(cfg);
  loss_impl(cfg, model.weights(), batch, &analytic);
  Weights<double> w = model.weights();
  auto params = tensor_views(w);
  auto grads = tensor_views(analytic);
  GradCheckReport report;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].second;
    double diff = 0, scale = 0;
    for (Eigen::Index k = 0; k < t.size(); ++k) {
      const double saved = t.data()[k];
      t.data()[k] = saved + epsilon;
      const double up = loss_impl<double>(cfg, w, batch, nullptr);
      t.data()[k] = saved - epsilon;
      const double down = loss_impl<double>(cfg, w, batch, nullptr);
      t.data()[k] = saved;
      const double numeric = (up - down) / (2 * epsilon);
      const double a = grads[i].second.data()[k];
      diff = std::max(diff, std::abs(a - numeric));
      scale = std::max({scale, std::abs(a), std::abs(numeric)});
    }
    const double err = scale > 0 ? diff / scale : 0.0;
    report.per_tensor.emplace_back(params[i].first, err);
    if (err >= report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_tensor = params[i].first;
    }
  }
  return report;
}

void write_loss_log(const std::filesystem::path& path, const std::vector<LossRecord>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("io", "cannot open " + path.string());
  out << "step,loss,eval_acc\n";
  char buf[96];
  for (const auto& r : log) {
    if (r.eval_acc >= 0)
      std::snprintf(buf, sizeof buf, "%d,%.9g,%.6f\n", r.step, r.loss, r.eval_acc);
    else
      std::snprintf(buf, sizeof buf, "%d,%.9g,\n", r.step, r.loss);
    out << buf;
  }
}

#define MTV_INSTANTIATE(S)                                                                                 \
  template Model<S> init_model<S>(const ModelConfig&, std::uint64_t);                                     \
  template double loss_and_grad<S>(const Model<S>&, const std::vector<TrainingSequence>&, Weights<S>*);   \
  template TrainResult<S> train<S>(const Model<S>&, const TaskMixture&, const TrainConfig&,               \
                                   const TrainCallback&);                                                  \
  template double icl_accuracy<S>(const Model<S>&, const TaskSpec&, int, int, std::uint64_t);

MTV_INSTANTIATE(float)
MTV_INSTANTIATE(double)
#undef MTV_INSTANTIATE

}  // namespace mtv
