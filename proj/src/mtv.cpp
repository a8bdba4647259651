#include "mtv/mtv.hpp"

#include <algorithm>
#include <random>
#include <thread>

namespace mtv {

template <class Scalar>
MeanActivations compute_mean_activations(const Model<Scalar>& model, const std::vector<Episode>& episodes,
                                         const PromptLayout& layout) {
  if (episodes.empty()) throw ConfigError("compute_mean_activations needs at least one episode");
  const auto& cfg = model.config();
  MeanActivations out;
  out.n_layers = cfg.n_layers;
  out.n_heads = cfg.n_heads;
  out.values = Matrix<double>::Zero(cfg.n_locations(), cfg.head_dim());
  out.task = episodes.front().task;
  out.N = episodes.front().n_shots();
  out.model_fingerprint = model.fingerprint();

  PromptLayout checked = layout;
  checked.max_context = cfg.max_context;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    ModelInput input;
    try {
      input = render_episode(episodes[i], checked);
    } catch (const ContextOverflow& e) {
      throw ContextOverflow(e.required, e.available, "episode " + std::to_string(i));
    }
    const auto res = forward(model, input, CaptureSpec::all());
    for (const auto& [loc, vec] : res.captures)
      out.values.row(flat_index(loc, cfg.n_heads)) += vec.transpose().template cast<double>();
  }
  out.values /= double(episodes.size());
  out.T = int(episodes.size());
  return out;
}

HeadMask mask_from_locations(int n_layers, int n_heads, const std::vector<HeadLocation>& locs) {
  HeadMask m = HeadMask::Constant(n_layers, n_heads, false);
  for (const auto& l : locs) {
    if (l.layer < 0 || l.layer >= n_layers || l.head < 0 || l.head >= n_heads)
      throw ShapeError("head location outside the mask");
    m(l.layer, l.head) = true;
  }
  return m;
}

std::vector<HeadLocation> locations_of(const HeadMask& mask) {
  std::vector<HeadLocation> out;
  for (Eigen::Index l = 0; l < mask.rows(); ++l)
    for (Eigen::Index h = 0; h < mask.cols(); ++h)
      if (mask(l, h)) out.push_back({int(l), int(h)});
  return out;
}

Matrix<double> bernoulli_logprob_grad(const Matrix<double>& theta, const HeadMask& mask) {
  if (theta.rows() != mask.rows() || theta.cols() != mask.cols())
    throw ShapeError("theta and mask shapes differ");
  require_finite(theta, "theta");
  return mask.cast<double>().matrix() - theta.unaryExpr([](double t) { return sigmoid(t); });
}

double bernoulli_log_prob(const Matrix<double>& theta, const HeadMask& mask) {
  if (theta.rows() != mask.rows() || theta.cols() != mask.cols())
    throw ShapeError("theta and mask shapes differ");
  // log sigma(t) = -softplus(-t), log(1 - sigma(t)) = -softplus(t)
  auto softplus = [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); };
  double lp = 0;
  for (Eigen::Index i = 0; i < theta.rows(); ++i)
    for (Eigen::Index j = 0; j < theta.cols(); ++j)
      lp -= mask(i, j) ? softplus(-theta(i, j)) : softplus(theta(i, j));
  return lp;
}

Matrix<double> BernoulliPolicy::probabilities() const {
  return theta.unaryExpr([](double t) { return sigmoid(t); });
}

std::string to_string(FinalSelection f) { return f == FinalSelection::threshold ? "threshold" : "sample"; }

FinalSelection final_selection_from_string(const std::string& s) {
  if (s == "threshold") return FinalSelection::threshold;
  if (s == "sample") return FinalSelection::sample;
  throw ConfigError("unknown final selection '" + s + "'");
}

std::string to_string(LossMode m) { return m == LossMode::first_token ? "first-token" : "full-sequence"; }

LossMode loss_mode_from_string(const std::string& s) {
  if (s == "first-token") return LossMode::first_token;
  if (s == "full-sequence") return LossMode::full_sequence;
  throw ConfigError("unknown loss mode '" + s + "'");
}

void ExtractionConfig::validate() const {
  if (steps < 0) throw ConfigError("S must be >= 0");
  if (samples_per_step < 1) throw ConfigError("samples_per_step must be >= 1");
  if (!(init_probability > 0.0 && init_probability < 1.0)) throw ConfigError("init probability must be in (0,1)");
  if (init_noise < 0) throw ConfigError("init noise must be >= 0");
  if (examples_per_step < 1) throw ConfigError("examples_per_step must be >= 1");
  if (!(adam.lr > 0)) throw ConfigError("adam lr must be > 0");
}

std::vector<AlignmentExample> alignment_from_episodes(const std::vector<Episode>& episodes,
                                                      const PromptLayout& layout) {
  std::vector<AlignmentExample> out;
  out.reserve(episodes.size());
  for (const auto& e : episodes) out.push_back({render_episode(e, layout), e.gold});
  return out;
}

bool MTVArtifact::operator==(const MTVArtifact& o) const {
  return version == o.version && mode == o.mode && task == o.task && model_fingerprint == o.model_fingerprint &&
         config_hash == o.config_hash && N == o.N && T == o.T && S == o.S && locations == o.locations &&
         values.rows() == o.values.rows() && values.cols() == o.values.cols() && values == o.values &&
         seeds == o.seeds;
}

MTVArtifact make_artifact(const MeanActivations& mean, std::vector<HeadLocation> locations) {
  std::sort(locations.begin(), locations.end());
  locations.erase(std::unique(locations.begin(), locations.end()), locations.end());
  MTVArtifact a;
  a.task = mean.task;
  a.model_fingerprint = mean.model_fingerprint;
  a.N = mean.N;
  a.T = mean.T;
  a.values.resize(Eigen::Index(locations.size()), mean.values.cols());
  for (std::size_t i = 0; i < locations.size(); ++i) {
    const auto& l = locations[i];
    if (l.layer < 0 || l.layer >= mean.n_layers || l.head < 0 || l.head >= mean.n_heads)
      throw ShapeError("artifact location outside the mean-activation table");
    a.values.row(Eigen::Index(i)) = mean.values.row(flat_index(l, mean.n_heads)).cast<float>().cast<double>();
  }
  a.locations = std::move(locations);
  return a;
}

template <class Scalar>
PatchSet<Scalar> patch_from_artifact(const MTVArtifact& artifact, PatchScope scope) {
  if (artifact.values.rows() != Eigen::Index(artifact.locations.size()))
    throw FormatError("values/locations length mismatch", "");
  PatchSet<Scalar> p;
  p.scope = scope;
  for (std::size_t i = 0; i < artifact.locations.size(); ++i)
    p.values[artifact.locations[i]] = artifact.values.row(Eigen::Index(i)).transpose().template cast<Scalar>();
  return p;
}

template <class Scalar>
PatchSet<Scalar> patch_from_mask(const MeanActivations& mean, const HeadMask& mask, PatchScope scope) {
  if (mask.rows() != mean.n_layers || mask.cols() != mean.n_heads) throw ShapeError("mask shape differs from L x H");
  PatchSet<Scalar> p;
  p.scope = scope;
  for (const auto& loc : locations_of(mask)) p.values[loc] = mean.at(loc).template cast<Scalar>();
  return p;
}

void require_fingerprint(const std::string& expected, const std::string& actual) {
  if (expected.empty()) throw FormatError("fingerprint absent", "");
  if (expected != actual) throw FingerprintMismatch(expected, actual);
}

namespace {

template <class Scalar>
double example_loss(const Model<Scalar>& model, const PatchSet<Scalar>& patch, const AlignmentExample& ex,
                    LossMode mode) {
  if (ex.gold.empty()) throw ConfigError("alignment example without a gold response");
  if (mode == LossMode::first_token) {
    const auto res = forward_patched(model, ex.prompt, patch);
    return double(cross_entropy(res.logits.row(res.logits.rows() - 1), ex.gold.front()));
  }
  // Teacher-forced: one pass over prompt + gold[0..n-2], patch window anchored at the prompt end.
  ModelInput seq = ex.prompt;
  seq.tokens.insert(seq.tokens.end(), ex.gold.begin(), ex.gold.end() - 1);
  const auto res = forward_patched(model, seq, patch, CaptureSpec::none(), ex.prompt.size());
  const Eigen::Index first = Eigen::Index(ex.prompt.size()) - 1;
  double total = 0;
  for (std::size_t k = 0; k < ex.gold.size(); ++k)
    total += double(cross_entropy(res.logits.row(first + Eigen::Index(k)), ex.gold[k]));
  return total / double(ex.gold.size());
}

}  // namespace

template <class Scalar>
double alignment_loss(const Model<Scalar>& model, const MeanActivations& mean,
                      const std::vector<AlignmentExample>& alignment, const HeadMask& mask, PatchScope scope,
                      LossMode mode) {
  if (alignment.empty()) throw ConfigError("empty alignment set");
  const auto patch = patch_from_mask<Scalar>(mean, mask, scope);
  double total = 0;
  for (const auto& ex : alignment) total += example_loss(model, patch, ex, mode);
  return total / double(alignment.size());
}

template <class Scalar>
ExtractionResult mtv_extract(const Model<Scalar>& model, const MeanActivations& mean,
                             const std::vector<AlignmentExample>& alignment, const ExtractionConfig& cfg,
                             std::uint64_t seed, ExecOptions exec) {
  cfg.validate();
  require_fingerprint(mean.model_fingerprint, model.fingerprint());
  const auto& mc = model.config();
  if (mean.n_layers != mc.n_layers || mean.n_heads != mc.n_heads || mean.values.cols() != mc.head_dim())
    throw ShapeError("mean activations do not match the model's head layout");
  if (cfg.steps > 0 && alignment.empty()) throw ConfigError("mtv_extract needs alignment examples when S > 0");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int L = mc.n_layers, H = mc.n_heads;

  ExtractionResult result;
  auto& policy = result.policy;
  policy.theta.resize(L, H);
  const double theta0 = logit(cfg.init_probability);
  for (Eigen::Index i = 0; i < policy.theta.size(); ++i)
    policy.theta.data()[i] = theta0 + cfg.init_noise * (2.0 * unit(rng) - 1.0);
  policy.adam = AdamState<double>(L, H, cfg.adam);

  const int K = cfg.samples_per_step;
  std::vector<HeadMask> masks(K);
  std::vector<double> rewards(K);
  double best = -std::numeric_limits<double>::infinity();
  std::size_t cursor = 0;

  for (int s = 0; s < cfg.steps; ++s) {
    std::vector<const AlignmentExample*> batch;
    for (int b = 0; b < cfg.examples_per_step; ++b) batch.push_back(&alignment[cursor++ % alignment.size()]);

    const Matrix<double> probs = policy.probabilities();
    for (auto& m : masks) {
      m.resize(L, H);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = unit(rng) < probs.data()[i];
    }

    auto score = [&](int i) {
      const auto patch = patch_from_mask<Scalar>(mean, masks[i], cfg.patch_scope);
      double loss = 0;
      for (const auto* ex : batch) loss += example_loss(model, patch, *ex, cfg.loss);
      rewards[i] = -loss / double(batch.size());
    };
    const int jobs = std::clamp(exec.jobs, 1, K);
    if (jobs == 1) {
      for (int i = 0; i < K; ++i) score(i);
    } else {
      std::vector<std::jthread> pool;
      for (int j = 0; j < jobs; ++j)
        pool.emplace_back([&, j] {
          for (int i = j; i < K; i += jobs) score(i);
        });
    }

    double mean_reward = 0;
    for (double r : rewards) mean_reward += r;
    mean_reward /= K;
    const double b = cfg.baseline ? mean_reward : 0.0;
    Matrix<double> ascent = Matrix<double>::Zero(L, H);
    for (int i = 0; i < K; ++i) ascent += (rewards[i] - b) * bernoulli_logprob_grad(policy.theta, masks[i]);
    ascent /= double(K);
    const Matrix<double> descent = -ascent;
    adam_update(policy.adam, policy.theta, descent);

    best = std::max(best, mean_reward);
    const Matrix<double> p = policy.probabilities();
    result.trace.push_back({s, mean_reward, best, p.mean(), p.maxCoeff(), int((p.array() > 0.5).count())});
  }

  const Matrix<double> final_probs = policy.probabilities();
  HeadMask chosen(L, H);
  for (Eigen::Index i = 0; i < chosen.size(); ++i)
    chosen.data()[i] = cfg.final_selection == FinalSelection::threshold ? final_probs.data()[i] > 0.5
                                                                         : unit(rng) < final_probs.data()[i];
  result.artifact = make_artifact(mean, locations_of(chosen));
  result.artifact.S = cfg.steps;
  result.artifact.config_hash = config_hash(cfg);
  result.artifact.seeds = {seed};
  return result;
}

template <class Scalar>
std::vector<int> apply_mtv(const Model<Scalar>& model, const MTVArtifact& artifact, const ModelInput& prompt,
                           int max_new_tokens, PatchScope scope) {
  require_fingerprint(artifact.model_fingerprint, model.fingerprint());
  const auto patch = patch_from_artifact<Scalar>(artifact, scope);
  return generate(model, prompt, max_new_tokens, &patch);
}

template <class Scalar>
std::vector<int> apply_mtv(const Model<Scalar>& model, const MTVArtifact& artifact, const Episode& episode,
                           PatchScope scope, const PromptLayout& layout) {
  PromptLayout checked = layout;
  checked.max_context = model.config().max_context;
  return apply_mtv(model, artifact, render_episode(episode, checked), int(episode.gold.size()), scope);
}

#define MTV_INSTANTIATE(S)                                                                                     \
  template MeanActivations compute_mean_activations<S>(const Model<S>&, const std::vector<Episode>&,          \
                                                       const PromptLayout&);                                  \
  template PatchSet<S> patch_from_artifact<S>(const MTVArtifact&, PatchScope);                                \
  template PatchSet<S> patch_from_mask<S>(const MeanActivations&, const HeadMask&, PatchScope);               \
  template ExtractionResult mtv_extract<S>(const Model<S>&, const MeanActivations&,                           \
                                           const std::vector<AlignmentExample>&, const ExtractionConfig&,     \
                                           std::uint64_t, ExecOptions);                                       \
  template double alignment_loss<S>(const Model<S>&, const MeanActivations&,                                  \
                                    const std::vector<AlignmentExample>&, const HeadMask&, PatchScope,        \
                                    LossMode);                                                                \
  template std::vector<int> apply_mtv<S>(const Model<S>&, const MTVArtifact&, const ModelInput&, int,        \
                                         PatchScope);                                                         \
  template std::vector<int> apply_mtv<S>(const Model<S>&, const MTVArtifact&, const Episode&, PatchScope,    \
                                         const PromptLayout&);

MTV_INSTANTIATE(float)
MTV_INSTANTIATE(double)
#undef MTV_INSTANTIATE

}  // namespace mtv
