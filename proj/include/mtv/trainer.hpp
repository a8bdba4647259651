#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mtv/model.hpp"
#include "mtv/tasks.hpp"

namespace mtv {

/// Disjoint seed ranges: stream in the top byte, run seed in the next 24 bits,
/// episode index in the low 32 bits.
enum class SeedStream : std::uint64_t { train = 1, extract = 2, align = 3, eval = 4, corrupt = 5, baseline = 6 };

std::uint64_t episode_seed(SeedStream stream, std::uint64_t run_seed, std::uint64_t index);
SeedStream stream_of(std::uint64_t episode_seed);

struct MixtureEntry {
  TaskKind kind = TaskKind::token_bijection;
  std::vector<int> task_ids;
  double weight = 1.0;
};

struct TaskMixture {
  std::vector<MixtureEntry> entries;
  int min_shots = 0;
  int max_shots = 8;
  TaskUniverse universe;

  /// The reference recipe: bijection, lookup, two-way and soft-token tasks.
  static TaskMixture standard(const TaskUniverse& universe = {});
  void validate() const;
};

struct TrainConfig {
  int steps = 20000;
  int batch_size = 32;
  double lr = 3e-4;
  int warmup_steps = 200;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
  int eval_every = 0;      // 0 disables periodic evaluation
  int eval_episodes = 200;
  int eval_shots = 4;
  std::uint64_t seed = 1;

  void validate() const;
};

struct LossRecord {
  int step = 0;
  double loss = 0;
  double eval_acc = -1;  // < 0 when not evaluated at this step
};

template <class Scalar>
struct TrainResult {
  Model<Scalar> model;
  std::vector<LossRecord> log;
};

/// Normal(0, 0.02) matrices, zero biases, unit layer-norm gains.
template <class Scalar>
Model<Scalar> init_model(const ModelConfig& config, std::uint64_t seed);

/// Mean next-token cross-entropy over answer positions; fills `grad` when non-null.
template <class Scalar>
double loss_and_grad(const Model<Scalar>& model, const std::vector<TrainingSequence>& batch, Weights<Scalar>* grad);

using TrainCallback = std::function<void(const LossRecord&)>;

template <class Scalar>
TrainResult<Scalar> train(const Model<Scalar>& model, const TaskMixture& mixture, const TrainConfig& cfg,
                          const TrainCallback& on_record = {});

/// Draws a training batch from the mixture (deterministic in seed/step).
std::vector<TrainingSequence> sample_batch(const TaskMixture& mixture, int batch_size, int max_context,
                                           std::uint64_t seed, std::uint64_t step);

/// Greedy first-answer-token accuracy on `n_shots`-shot bijection episodes of task ids in the mixture.
template <class Scalar>
double icl_accuracy(const Model<Scalar>& model, const TaskSpec& task, int n_shots, int episodes, std::uint64_t seed);

struct GradCheckReport {
  double max_relative_error = 0;
  std::string worst_tensor;
  std::vector<std::pair<std::string, double>> per_tensor;
};

/// Central differences on every parameter against loss_and_grad at 64-bit.
/// Error per tensor is ||analytic - numeric||_inf / max(||analytic||_inf, ||numeric||_inf).
GradCheckReport grad_check(const Model<double>& model, const std::vector<TrainingSequence>& batch, double epsilon);

void write_loss_log(const std::filesystem::path& path, const std::vector<LossRecord>& log);

}  // namespace mtv
