#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mtv/mtv.hpp"
#include "mtv/trainer.hpp"

namespace mtv {

enum class ProtocolKind { zero_shot, k_shot, mtv, mtv_plus_shots, fv_mode, vtv_mode, finetune_baseline };

std::string to_string(ProtocolKind k);

struct Protocol {
  ProtocolKind kind = ProtocolKind::zero_shot;
  int k = 0;                            // explicit shots (k_shot, mtv_plus_shots)
  std::optional<MTVArtifact> artifact;  // mtv, mtv_plus_shots, fv_mode, vtv_mode
  PatchScope scope = PatchScope::every_step;
  int eval_episodes = 100;
  std::vector<std::uint64_t> seeds{1};
  int finetune_steps = 300;  // finetune_baseline only

  static Protocol zero_shot();
  static Protocol k_shot(int k);
  static Protocol with_artifact(MTVArtifact a, int k = 0);  // kind from the artifact's mode
  static Protocol finetune(int steps);

  /// "zero-shot", "4-shot", "mtv", "mtv+1-shot", "fv-mode", "vtv-mode", "hybrid", "finetune-baseline".
  std::string name() const;
  int shots() const;
  void validate() const;
};

struct Metrics {
  std::string protocol;
  std::string task;
  std::vector<std::uint64_t> seeds;
  std::vector<double> per_seed;
  double mean = 0;
  std::optional<double> std;  // sample std; absent with fewer than two seeds
  double tokens_per_query = 0;
  double wallclock_ms_per_100 = 0;  // informational, never compared
  int queries = 0;

  /// Equality on everything except wall-clock.
  bool same_results(const Metrics& o) const;
};

/// Exact-match accuracy of greedy decoding against the gold response.
/// Eval episodes come from the eval seed stream, disjoint from extraction.
template <class Scalar>
Metrics evaluate(const Model<Scalar>& model, const Protocol& protocol, const TaskSpec& task);

/// Zero-shot fine-tune on one task (0-shot episodes), the forgetting baseline.
template <class Scalar>
Model<Scalar> finetune(const Model<Scalar>& model, const TaskSpec& task, int steps, std::uint64_t seed);

struct ExtractionRequest {
  int N = 4;
  int T = 50;
  int S = 50;
  int alignment_shots = 0;  // downstream format of the alignment set
  ExtractionConfig config;
};

/// Steps 1 and 2: mean activations over T N-shot episodes, then REINFORCE over
/// S downstream-format alignment examples. Every draw derives from `seed`.
template <class Scalar>
ExtractionResult extract_task_vector(const Model<Scalar>& model, const TaskSpec& task, const ExtractionRequest& req,
                                     std::uint64_t seed, ExecOptions exec = {});

template <class Scalar>
MeanActivations task_mean_activations(const Model<Scalar>& model, const TaskSpec& task, int N, int T,
                                      std::uint64_t seed);

std::vector<AlignmentExample> task_alignment_set(const TaskSpec& task, int S, int shots, std::uint64_t seed,
                                                 int max_context);

struct SubsetResult {
  HeadMask mask;
  double loss = 0;
  std::size_t masks_evaluated = 0;
};

template <class Scalar>
SubsetResult brute_force_best_subset(const Model<Scalar>& model, const MeanActivations& mean,
                                     const std::vector<AlignmentExample>& alignment, int max_heads = 16,
                                     PatchScope scope = PatchScope::every_step, LossMode mode = LossMode::first_token);

/// One CSV row of the fixed results schema.
struct ResultRow {
  std::string protocol;
  std::string task;
  int N = 0;
  int T = 0;
  int S = 0;
  std::string seed;  // numeric, or "mean" for aggregate rows
  std::optional<double> accuracy;
  double tokens_per_query = 0;
  std::optional<double> wallclock_ms_per_100;
  std::string notes;

  std::string key() const;
};

inline constexpr const char* kResultsHeader =
    "protocol,task,N,T,S,seed,accuracy,tokens_per_query,wallclock_ms_per_100,notes";

std::string to_csv(const ResultRow& r);
ResultRow row_from_csv(const std::string& line);
std::vector<ResultRow> read_results(const std::filesystem::path& path);

/// Per-seed rows followed by one aggregate row (seed = "mean").
std::vector<ResultRow> rows_of(const Metrics& m, int N, int T, int S, bool timing, const std::string& notes = "");

struct SweepGrid {
  std::vector<int> N{1, 2, 4, 8};
  std::vector<int> T{10, 50, 100};
  std::vector<int> S{50};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int eval_episodes = 100;
  ExtractionConfig extraction;

  std::size_t size() const { return N.size() * T.size() * S.size() * seeds.size(); }
  void validate() const;
};

struct SweepOptions {
  int jobs = 1;
  bool timing = false;
};

/// Runs every (N, T, S, seed) cell not already in `csv` and appends its row.
/// Failed cells become rows tagged "error:<reason>" and the sweep continues.
/// Rows are written in grid order regardless of `jobs`. Returns rows written.
template <class Scalar>
std::size_t sweep(const Model<Scalar>& model, const TaskSpec& task, const SweepGrid& grid,
                  const std::filesystem::path& csv, SweepOptions opts = {});

/// Hybrid artifact: locations from `artifact_a`, means recomputed on `task_b`.
template <class Scalar>
MTVArtifact hybrid_artifact(const Model<Scalar>& model, const MTVArtifact& artifact_a, const TaskSpec& task_b, int N,
                            int T, std::uint64_t seed);

template <class Scalar>
Metrics generalization_eval(const Model<Scalar>& model, const MTVArtifact& artifact_a, const TaskSpec& task_b,
                            int N, int T, std::uint64_t seed, const Protocol& shared = {});

/// Every head of one layer (default floor(L/2)) with its mean; no search.
MTVArtifact baseline_fv(const MeanActivations& mean, std::optional<int> layer = std::nullopt);

/// T = 10 one-shot episodes for the means and a 10-step search on one-shot
/// (not downstream) examples.
template <class Scalar>
MTVArtifact baseline_vtv(const Model<Scalar>& model, const TaskSpec& task, std::uint64_t seed,
                         ExtractionConfig cfg = {});

struct AccountingRow {
  std::string protocol;
  double tokens_per_query = 0;
  double wallclock_ms_per_100 = 0;
  double extraction_ms = 0;  // one-time cost
};

template <class Scalar>
std::vector<AccountingRow> accounting(const Model<Scalar>& model, const TaskSpec& task,
                                      const std::vector<Protocol>& protocols,
                                      const std::vector<double>& extraction_ms = {});

/// Tokens one rendered shot adds to a prompt.
std::size_t shot_length(const TaskSpec& task);

struct CompareConfig {
  ExtractionRequest extraction;
  int k = 4;
  int eval_episodes = 100;
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

struct CompareReport {
  std::vector<Metrics> rows;  // zero-shot, k-shot, mtv, fv-mode, vtv-mode
  int mtv_wins = 0;           // seeds where mtv >= max(fv-mode, vtv-mode)
  bool ordering_holds() const { return 2 * mtv_wins > int(rows.empty() ? 0 : rows.front().seeds.size()); }
};

template <class Scalar>
CompareReport compare(const Model<Scalar>& model, const TaskSpec& task, const CompareConfig& cfg, ExecOptions exec = {});

}  // namespace mtv
