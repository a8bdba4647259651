#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mtv/model.hpp"
#include "mtv/tasks.hpp"

namespace mtv {

/// Per-head mean of final-prompt-token activations over T episodes of one task.
struct MeanActivations {
  int n_layers = 0;
  int n_heads = 0;
  Matrix<double> values;  // (L*H) x head_dim, row = flat_index(loc)
  int T = 0;
  int N = 0;
  std::string task;
  std::string model_fingerprint;

  Vector<double> at(const HeadLocation& loc) const { return values.row(flat_index(loc, n_heads)).transpose(); }
};

template <class Scalar>
MeanActivations compute_mean_activations(const Model<Scalar>& model, const std::vector<Episode>& episodes,
                                         const PromptLayout& layout = {});

/// Boolean L x H selection (one Bernoulli draw).
using HeadMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

HeadMask mask_from_locations(int n_layers, int n_heads, const std::vector<HeadLocation>& locs);
std::vector<HeadLocation> locations_of(const HeadMask& mask);

/// Score of the independent-Bernoulli log-likelihood: alpha - sigmoid(theta).
Matrix<double> bernoulli_logprob_grad(const Matrix<double>& theta, const HeadMask& mask);
double bernoulli_log_prob(const Matrix<double>& theta, const HeadMask& mask);

struct BernoulliPolicy {
  Matrix<double> theta;  // L x H logits
  AdamState<double> adam;

  Matrix<double> probabilities() const;
};

enum class FinalSelection { threshold, sample };
enum class LossMode { first_token, full_sequence };

std::string to_string(FinalSelection f);
FinalSelection final_selection_from_string(const std::string& s);
std::string to_string(LossMode m);
LossMode loss_mode_from_string(const std::string& s);

struct ExtractionConfig {
  int steps = 50;  // S: alignment examples, one per step
  int samples_per_step = 32;
  double init_probability = 0.1;
  double init_noise = 0.01;
  bool baseline = true;
  FinalSelection final_selection = FinalSelection::threshold;
  LossMode loss = LossMode::first_token;
  int examples_per_step = 1;
  AdamHyper adam{0.3, 0.9, 0.999, 1e-8};
  PatchScope patch_scope = PatchScope::every_step;

  void validate() const;
};

/// CRC32 (hex) of the canonical JSON form of the config.
std::string config_hash(const ExtractionConfig& cfg);
std::string extraction_config_to_json(const ExtractionConfig& cfg);
/// Strict: unknown keys are a ConfigError; absent keys keep their defaults.
ExtractionConfig extraction_config_from_json(const std::string& text);

/// One downstream-formatted example: the prompt exactly as it will be given
/// at inference, and the response it should produce.
struct AlignmentExample {
  ModelInput prompt;
  std::vector<int> gold;
};

std::vector<AlignmentExample> alignment_from_episodes(const std::vector<Episode>& episodes,
                                                      const PromptLayout& layout = {});

inline constexpr int kArtifactVersion = 1;

struct MTVArtifact {
  int version = kArtifactVersion;
  std::string mode = "mtv";  // "mtv", "fv-mode", "vtv-mode", "hybrid"
  std::string task;
  std::string model_fingerprint;
  std::string config_hash;
  int N = 0;
  int T = 0;
  int S = 0;
  std::vector<HeadLocation> locations;  // canonical (layer, head) order
  Matrix<double> values;                // one row per location, f32-representable
  std::vector<std::uint64_t> seeds;

  bool operator==(const MTVArtifact& o) const;
};

/// Restricts `mean` to `locations` (sorted, deduplicated). Values are rounded to f32.
MTVArtifact make_artifact(const MeanActivations& mean, std::vector<HeadLocation> locations);

template <class Scalar>
PatchSet<Scalar> patch_from_artifact(const MTVArtifact& artifact, PatchScope scope);
template <class Scalar>
PatchSet<Scalar> patch_from_mask(const MeanActivations& mean, const HeadMask& mask, PatchScope scope);

struct StepTrace {
  int step = 0;
  double mean_reward = 0;
  double best_mean_reward = 0;
  double mean_probability = 0;
  double max_probability = 0;
  int above_half = 0;
};

struct ExtractionResult {
  MTVArtifact artifact;
  BernoulliPolicy policy;
  std::vector<StepTrace> trace;
};

struct ExecOptions {
  int jobs = 1;
};

/// Bernoulli-policy REINFORCE search over head locations. `mean` is read-only:
/// the search never recomputes it.
template <class Scalar>
ExtractionResult mtv_extract(const Model<Scalar>& model, const MeanActivations& mean,
                             const std::vector<AlignmentExample>& alignment, const ExtractionConfig& cfg,
                             std::uint64_t seed, ExecOptions exec = {});

/// Mean cross-entropy on the alignment set with `mask`'s heads patched.
template <class Scalar>
double alignment_loss(const Model<Scalar>& model, const MeanActivations& mean,
                      const std::vector<AlignmentExample>& alignment, const HeadMask& mask, PatchScope scope,
                      LossMode mode = LossMode::first_token);

/// Patched greedy generation. `prompt` may include explicit shots ahead of the query.
template <class Scalar>
std::vector<int> apply_mtv(const Model<Scalar>& model, const MTVArtifact& artifact, const ModelInput& prompt,
                           int max_new_tokens, PatchScope scope = PatchScope::every_step);
template <class Scalar>
std::vector<int> apply_mtv(const Model<Scalar>& model, const MTVArtifact& artifact, const Episode& episode,
                           PatchScope scope = PatchScope::every_step, const PromptLayout& layout = {});

void require_fingerprint(const std::string& expected, const std::string& actual);

std::string artifact_to_json(const MTVArtifact& a);
MTVArtifact artifact_from_json(const std::string& text);
void save_artifact(const MTVArtifact& a, const std::filesystem::path& path);
MTVArtifact load_artifact(const std::filesystem::path& path);

std::string mean_activations_to_json(const MeanActivations& m);
MeanActivations mean_activations_from_json(const std::string& text);
void save_mean_activations(const MeanActivations& m, const std::filesystem::path& path);
MeanActivations load_mean_activations(const std::filesystem::path& path);

}  // namespace mtv
