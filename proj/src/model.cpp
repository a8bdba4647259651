#include "mtv/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace mtv {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("invalid model config: " + m); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (n_heads < 1) fail("n_heads must be >= 1");
  if (embed_dim < 1) fail("embed_dim must be >= 1");
  if (embed_dim % n_heads != 0)
    fail("embed_dim " + std::to_string(embed_dim) + " not divisible by n_heads " + std::to_string(n_heads));
  if (vocab_size < 1) fail("vocab_size must be >= 1");
  if (max_context < 1) fail("max_context must be >= 1");
  if (mlp_hidden < 1) fail("mlp_hidden must be >= 1");
  if (activation != Activation::relu && activation != Activation::gelu_tanh) fail("unknown activation tag");
  if (positional != PositionalEncoding::learned_absolute) fail("unknown positional encoding tag");
}

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "gelu-tanh"; }

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "gelu-tanh" || s == "gelu") return Activation::gelu_tanh;
  throw ConfigError("unknown activation '" + s + "'");
}

std::string to_string(PatchScope s) {
  switch (s) {
    case PatchScope::last_prompt_token: return "last-prompt-token";
    case PatchScope::every_step: return "every-step";
    case PatchScope::all_positions: return "all-positions";
  }
  return "?";
}

PatchScope patch_scope_from_string(const std::string& s) {
  if (s == "last-prompt-token") return PatchScope::last_prompt_token;
  if (s == "every-step") return PatchScope::every_step;
  if (s == "all-positions") return PatchScope::all_positions;
  throw ConfigError("unknown patch scope '" + s + "'");
}

bool ModelInput::operator==(const ModelInput& o) const {
  if (tokens != o.tokens || soft.size() != o.soft.size()) return false;
  for (std::size_t i = 0; i < soft.size(); ++i) {
    if (soft[i].position != o.soft[i].position) return false;
    if (soft[i].embeddings.rows() != o.soft[i].embeddings.rows() ||
        soft[i].embeddings.cols() != o.soft[i].embeddings.cols())
      return false;
    if (soft[i].embeddings != o.soft[i].embeddings) return false;
  }
  return true;
}

bool CaptureSpec::wants(const HeadLocation& l) const {
  return all_ || std::find(locs_.begin(), locs_.end(), l) != locs_.end();
}

template <class Scalar>
Weights<Scalar> Weights<Scalar>::zeros(const ModelConfig& cfg) {
  cfg.validate();
  const Eigen::Index d = cfg.embed_dim, V = cfg.vocab_size, C = cfg.max_context, hid = cfg.mlp_hidden;
  Weights w;
  w.token_embedding = Matrix<Scalar>::Zero(V, d);
  w.position_embedding = Matrix<Scalar>::Zero(C, d);
  w.layers.resize(cfg.n_layers);
  for (auto& L : w.layers) {
    L.ln1_gain = Vector<Scalar>::Zero(d);
    L.ln1_bias = Vector<Scalar>::Zero(d);
    L.wq = Matrix<Scalar>::Zero(d, d);
    L.wk = Matrix<Scalar>::Zero(d, d);
    L.wv = Matrix<Scalar>::Zero(d, d);
    L.wo = Matrix<Scalar>::Zero(d, d);
    L.ln2_gain = Vector<Scalar>::Zero(d);
    L.ln2_bias = Vector<Scalar>::Zero(d);
    L.w1 = Matrix<Scalar>::Zero(d, hid);
    L.b1 = Vector<Scalar>::Zero(hid);
    L.w2 = Matrix<Scalar>::Zero(hid, d);
    L.b2 = Vector<Scalar>::Zero(d);
  }
  w.lnf_gain = Vector<Scalar>::Zero(d);
  w.lnf_bias = Vector<Scalar>::Zero(d);
  w.unembedding = Matrix<Scalar>::Zero(d, V);
  return w;
}

template <class Scalar>
Model<Scalar>::Model(ModelConfig config, Weights<Scalar> weights)
    : config_(config), weights_(std::move(weights)) {
  config_.validate();
  if (weights_.layers.size() != std::size_t(config_.n_layers))
    throw ShapeError("weights have " + std::to_string(weights_.layers.size()) + " layers, config says " +
                     std::to_string(config_.n_layers));
  const auto expected = Weights<Scalar>::zeros(config_);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
  for_each_tensor(expected, [&](const std::string&, const auto& t) { shapes.emplace_back(t.rows(), t.cols()); });
  std::size_t i = 0;
  for_each_tensor(weights_, [&](const std::string& name, const auto& t) {
    if (t.rows() != shapes[i].first || t.cols() != shapes[i].second)
      throw ShapeError("tensor " + name + " has shape " + std::to_string(t.rows()) + "x" +
                       std::to_string(t.cols()) + ", expected " + std::to_string(shapes[i].first) + "x" +
                       std::to_string(shapes[i].second));
    if (!t.allFinite()) throw NumericError("tensor " + name + " contains non-finite values");
    ++i;
  });
  const auto body = serialize_weights(config_, weights_);
  char buf[64];
  std::snprintf(buf, sizeof buf, "L%dH%dd%dV%dC%d-%08x", config_.n_layers, config_.n_heads, config_.embed_dim,
                config_.vocab_size, config_.max_context, crc32_of(body.data(), body.size()));
  fingerprint_ = buf;
}

template <class Scalar>
void validate_input(const Model<Scalar>& model, const ModelInput& input) {
  const auto& cfg = model.config();
  if (input.tokens.empty()) throw ShapeError("empty model input");
  if (input.size() > std::size_t(cfg.max_context)) throw ContextOverflow(input.size(), cfg.max_context);
  for (int t : input.tokens)
    if (t < 0 || t >= cfg.vocab_size)
      throw ShapeError("token id " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(cfg.vocab_size));
  std::vector<bool> covered(input.size(), false);
  for (const auto& seg : input.soft) {
    if (seg.embeddings.cols() != cfg.embed_dim)
      throw ShapeError("soft token dimension " + std::to_string(seg.embeddings.cols()) + " != embed_dim " +
                       std::to_string(cfg.embed_dim));
    if (seg.position + std::size_t(seg.embeddings.rows()) > input.size())
      throw ShapeError("soft segment extends past the end of the input");
    for (Eigen::Index r = 0; r < seg.embeddings.rows(); ++r) {
      if (covered[seg.position + r]) throw ShapeError("overlapping soft segments");
      covered[seg.position + r] = true;
    }
    if (!seg.embeddings.allFinite()) throw NumericError("non-finite soft token embedding");
  }
}

namespace {

template <class Scalar>
Scalar gelu_tanh(Scalar x) {
  const Scalar c = Scalar(std::sqrt(2.0 / std::numbers::pi));
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(c * (x + Scalar(0.044715) * x * x * x)));
}

template <class Scalar>
struct KvCache {
  std::vector<Matrix<Scalar>> keys, values;

  explicit KvCache(const ModelConfig& cfg) {
    keys.assign(cfg.n_layers, Matrix<Scalar>(cfg.max_context, cfg.embed_dim));
    values.assign(cfg.n_layers, Matrix<Scalar>(cfg.max_context, cfg.embed_dim));
  }
};

// Which absolute positions receive the patch.
struct PatchWindow {
  PatchScope scope = PatchScope::every_step;
  Eigen::Index first = 0;  // final prompt position

  bool governs(Eigen::Index pos) const {
    switch (scope) {
      case PatchScope::last_prompt_token: return pos == first;
      case PatchScope::every_step: return pos >= first;
      case PatchScope::all_positions: return true;
    }
    return false;
  }
};

template <class Scalar>
struct Step {
  const Model<Scalar>& model;
  const ModelInput& input;
  const PatchSet<Scalar>* patch = nullptr;
  PatchWindow window;
  const CaptureSpec* capture = nullptr;
  std::map<HeadLocation, Vector<Scalar>>* captures = nullptr;
};

template <class Scalar>
Matrix<Scalar> embed_rows(const Model<Scalar>& model, const ModelInput& input, Eigen::Index start,
                          Eigen::Index count) {
  const auto& w = model.weights();
  Matrix<Scalar> x(count, model.config().embed_dim);
  for (Eigen::Index i = 0; i < count; ++i) x.row(i) = w.token_embedding.row(input.tokens[start + i]);
  for (const auto& seg : input.soft) {
    for (Eigen::Index r = 0; r < seg.embeddings.rows(); ++r) {
      const Eigen::Index pos = Eigen::Index(seg.position) + r;
      if (pos >= start && pos < start + count) x.row(pos - start) = seg.embeddings.row(r).template cast<Scalar>();
    }
  }
  x += w.position_embedding.middleRows(start, count);
  return x;
}

// Processes positions [start, start+count) against the cache and returns the
// final hidden states (after the final layer norm) of those rows.
template <class Scalar>
Matrix<Scalar> run_block(const Step<Scalar>& st, KvCache<Scalar>& cache, Eigen::Index start, Eigen::Index count) {
  const auto& cfg = st.model.config();
  const auto& w = st.model.weights();
  const int H = cfg.n_heads;
  const Eigen::Index dh = cfg.head_dim();
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
  const Scalar eps = Scalar(kLayerNormEps);
  const Eigen::Index total = start + count;
  const bool has_final = total == Eigen::Index(st.input.size());

  Matrix<Scalar> x = embed_rows(st.model, st.input, start, count);
  Matrix<Scalar> h, q, z(count, cfg.embed_dim), scores;

  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& L = w.layers[l];
    layer_norm_rows<Scalar>(x, L.ln1_gain, L.ln1_bias, eps, h);
    q.noalias() = h * L.wq;
    cache.keys[l].middleRows(start, count).noalias() = h * L.wk;
    cache.values[l].middleRows(start, count).noalias() = h * L.wv;
    for (int m = 0; m < H; ++m) {
      const auto keys = cache.keys[l].block(0, m * dh, total, dh);
      const auto vals = cache.values[l].block(0, m * dh, total, dh);
      scores.noalias() = q.middleCols(m * dh, dh) * keys.transpose();
      scores *= scale;
      for (Eigen::Index i = 0; i < count; ++i) {
        const Eigen::Index visible = start + i + 1;
        auto row = scores.row(i);
        const Scalar mx = row.head(visible).maxCoeff();
        row.head(visible) = (row.head(visible).array() - mx).exp();
        row.head(visible) /= row.head(visible).sum();
        if (visible < total) row.tail(total - visible).setZero();
      }
      z.middleCols(m * dh, dh).noalias() = scores * vals;

      const HeadLocation loc{l, m};
      if (has_final && st.capture && st.capture->wants(loc))
        (*st.captures)[loc] = z.row(count - 1).segment(m * dh, dh).transpose();
      if (st.patch) {
        auto it = st.patch->values.find(loc);
        if (it != st.patch->values.end()) {
          for (Eigen::Index i = 0; i < count; ++i)
            if (st.window.governs(start + i)) z.row(i).segment(m * dh, dh) = it->second.transpose();
        }
      }
    }
    x.noalias() += z * L.wo;

    layer_norm_rows<Scalar>(x, L.ln2_gain, L.ln2_bias, eps, h);
    Matrix<Scalar> u = h * L.w1;
    u.rowwise() += L.b1.transpose();
    if (cfg.activation == Activation::relu)
      u = u.cwiseMax(Scalar(0));
    else
      u = u.unaryExpr([](Scalar v) { return gelu_tanh(v); });
    x.noalias() += u * L.w2;
    x.rowwise() += L.b2.transpose();
  }
  layer_norm_rows<Scalar>(x, w.lnf_gain, w.lnf_bias, eps, h);
  return h;
}

template <class Scalar>
void check_patch(const Model<Scalar>& model, const PatchSet<Scalar>& patch) {
  const auto& cfg = model.config();
  for (const auto& [loc, vec] : patch.values) {
    if (loc.layer < 0 || loc.layer >= cfg.n_layers || loc.head < 0 || loc.head >= cfg.n_heads)
      throw ShapeError("patch location (" + std::to_string(loc.layer) + "," + std::to_string(loc.head) +
                       ") outside the model");
    if (vec.size() != cfg.head_dim())
      throw ShapeError("patch vector length " + std::to_string(vec.size()) + " != head_dim " +
                       std::to_string(cfg.head_dim()));
    require_finite(vec, "patch vector");
  }
}

template <class Scalar>
ForwardResult<Scalar> forward_impl(const Model<Scalar>& model, const ModelInput& input,
                                   const PatchSet<Scalar>* patch, const CaptureSpec& capture,
                                   std::size_t prompt_length) {
  validate_input(model, input);
  if (prompt_length > input.size()) throw ShapeError("prompt_length exceeds input length");
  if (patch) check_patch(model, *patch);
  KvCache<Scalar> cache(model.config());
  ForwardResult<Scalar> out;
  const Eigen::Index n = Eigen::Index(input.size());
  Step<Scalar> st{model, input, patch && !patch->empty() ? patch : nullptr,
                  PatchWindow{patch ? patch->scope : PatchScope::every_step,
                              prompt_length == 0 ? n - 1 : Eigen::Index(prompt_length) - 1}, &capture, &out.captures};
  const Matrix<Scalar> hidden = run_block(st, cache, 0, n);
  out.logits.noalias() = hidden * model.weights().unembedding;
  return out;
}

template <class Scalar>
int argmax_row(const Matrix<Scalar>& m, Eigen::Index row) {
  Eigen::Index idx = 0;
  m.row(row).maxCoeff(&idx);
  return int(idx);
}

}  // namespace

template <class Scalar>
ForwardResult<Scalar> forward(const Model<Scalar>& model, const ModelInput& input, const CaptureSpec& capture) {
  return forward_impl<Scalar>(model, input, nullptr, capture, 0);
}

template <class Scalar>
ForwardResult<Scalar> forward_patched(const Model<Scalar>& model, const ModelInput& input,
                                      const PatchSet<Scalar>& patch, const CaptureSpec& capture,
                                      std::size_t prompt_length) {
  return forward_impl<Scalar>(model, input, &patch, capture, prompt_length);
}

template <class Scalar>
std::vector<int> generate(const Model<Scalar>& model, const ModelInput& input, int max_new_tokens,
                          const PatchSet<Scalar>* patch, GenerateOptions opts) {
  validate_input(model, input);
  if (patch) check_patch(model, *patch);
  if (max_new_tokens < 0) throw ShapeError("max_new_tokens must be >= 0");
  std::vector<int> out;
  if (max_new_tokens == 0) return out;

  const Eigen::Index prompt = Eigen::Index(input.size());
  const Eigen::Index C = model.config().max_context;
  const Eigen::Index budget = std::min<Eigen::Index>(max_new_tokens, C - prompt);
  if (budget <= 0) throw TruncatedOutput(out, std::size_t(max_new_tokens));

  ModelInput seq = input;
  const PatchSet<Scalar>* active = patch && !patch->empty() ? patch : nullptr;
  const PatchWindow window{patch ? patch->scope : PatchScope::every_step, prompt - 1};
  const auto& unembed = model.weights().unembedding;

  if (opts.use_cache) {
    KvCache<Scalar> cache(model.config());
    Step<Scalar> st{model, seq, active, window, nullptr, nullptr};
    Matrix<Scalar> hidden = run_block(st, cache, 0, prompt);
    Matrix<Scalar> logits = hidden.bottomRows(1) * unembed;
    out.push_back(argmax_row(logits, 0));
    while (Eigen::Index(out.size()) < budget) {
      seq.tokens.push_back(out.back());
      Step<Scalar> s2{model, seq, active, window, nullptr, nullptr};
      hidden = run_block(s2, cache, Eigen::Index(seq.size()) - 1, 1);
      logits.noalias() = hidden * unembed;
      out.push_back(argmax_row(logits, 0));
    }
  } else {
    while (Eigen::Index(out.size()) < budget) {
      KvCache<Scalar> cache(model.config());
      Step<Scalar> st{model, seq, active, window, nullptr, nullptr};
      const Matrix<Scalar> hidden = run_block(st, cache, 0, Eigen::Index(seq.size()));
      const Matrix<Scalar> logits = hidden.bottomRows(1) * unembed;
      out.push_back(argmax_row(logits, 0));
      seq.tokens.push_back(out.back());
    }
  }
  if (Eigen::Index(out.size()) < max_new_tokens) throw TruncatedOutput(out, std::size_t(max_new_tokens));
  return out;
}

#define MTV_INSTANTIATE(S)                                                                                 \
  template struct Weights<S>;                                                                              \
  template class Model<S>;                                                                                 \
  template void validate_input<S>(const Model<S>&, const ModelInput&);                                    \
  template ForwardResult<S> forward<S>(const Model<S>&, const ModelInput&, const CaptureSpec&);           \
  template ForwardResult<S> forward_patched<S>(const Model<S>&, const ModelInput&, const PatchSet<S>&,    \
                                               const CaptureSpec&, std::size_t);                           \
  template std::vector<int> generate<S>(const Model<S>&, const ModelInput&, int, const PatchSet<S>*,      \
                                        GenerateOptions);

MTV_INSTANTIATE(float)
MTV_INSTANTIATE(double)
#undef MTV_INSTANTIATE

}  // namespace mtv
