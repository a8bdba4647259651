#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mtv/model.hpp"

namespace mtv {

enum class TaskKind { token_bijection, key_value_lookup, two_way_one_shot_class, soft_token_class };

std::string to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);

/// Layout of the synthetic integer vocabulary shared by every task family.
/// Symbol ranges are disjoint across families so a query token identifies its family.
struct TaskUniverse {
  int vocab_size = 128;
  int embed_dim = 64;  // soft-token width; must equal the model's embed_dim
  int sep = 1;
  int eos = 2;
  int image = 3;  // placeholder replaced by a soft embedding
  int first_symbol = 4;
  int bijection_symbols = 24;
  int lookup_keys = 16;
  int lookup_values = 16;
  int class_count = 6;  // two-way classification: classes of member tokens
  int class_members = 4;
  int class_labels = 4;
  int soft_classes = 4;
  int tokens_per_image = 4;
  double soft_noise = 0.3;
  std::uint64_t rule_seed = 20240601;

  /// Total symbols consumed; must fit in vocab_size.
  int symbols_used() const;
  void validate() const;
};

struct TaskSpec {
  TaskKind kind = TaskKind::token_bijection;
  int task_id = 0;
  std::vector<int> input_symbols;
  std::vector<int> output_symbols;
  std::vector<int> delimiter_symbols;  // sep, eos, image
  int sep = 1;
  int eos = 2;
  int image = 3;

  // Rule tables (task-specific, derived from task_id).
  std::vector<std::vector<int>> table;    // bijection/lookup: input index -> output tokens
  std::vector<std::vector<int>> classes;  // two-way: member tokens per class
  std::vector<int> label_of_class;        // soft: class -> label token; two-way: the task's two labels
  int tokens_per_image = 0;
  double noise_sigma = 0.0;
  Matrix<double> prototypes;  // soft: class x embed_dim, unit rows

  std::string name() const;
};

TaskSpec make_task(TaskKind kind, int task_id, const TaskUniverse& universe = {});

/// One rendered-input fragment: tokens, with image placeholders backed by
/// rows of `soft` (in order of appearance).
struct Segment {
  std::vector<int> tokens;
  Matrix<double> soft;

  bool operator==(const Segment& o) const;
};

struct Shot {
  Segment input;
  std::vector<int> output;
  bool operator==(const Shot& o) const { return input == o.input && output == o.output; }
};

struct Episode {
  std::string task;
  TaskKind kind = TaskKind::token_bijection;
  int task_id = 0;
  std::uint64_t seed = 0;
  std::vector<Shot> shots;
  Segment query;
  std::vector<int> gold;

  int n_shots() const { return int(shots.size()); }
  bool operator==(const Episode& o) const;
};

/// Throws ConfigError when the task's symbol pool cannot supply N+1 distinct inputs.
Episode sample_episode(const TaskSpec& spec, int n_shots, std::uint64_t seed);

struct PromptLayout {
  int sep = 1;
  int eos = 2;
  int image = 3;
  int max_context = 0;  // 0 disables the overflow check
};

/// [shot input] SEP [shot output] EOS ... [query] SEP
ModelInput render_episode(const Episode& episode, const PromptLayout& layout = {});
std::size_t rendered_length(const Episode& episode);

/// Prompt plus gold continuation with next-token targets on answer positions
/// (every shot output token and every gold token); -1 elsewhere.
struct TrainingSequence {
  ModelInput input;
  std::vector<int> targets;
};
TrainingSequence render_for_training(const Episode& episode, const PromptLayout& layout = {});

/// Replaces exactly `n_replace` randomly chosen shots with shots drawn from `foreign`.
Episode corrupt_episode(const Episode& episode, const TaskSpec& foreign, int n_replace, std::uint64_t seed);

/// Greedy facility-location maximisation of sum_q max_{s in S} cos(q, s).
/// Returns indices in selection order; ties go to the lowest index.
std::vector<std::size_t> facility_location_select(const Matrix<double>& candidates, std::size_t k);
double facility_location_value(const Matrix<double>& candidates, const std::vector<std::size_t>& subset);

// Episode log: one JSON object per line.
std::string episode_to_json(const Episode& e);
Episode episode_from_json(const std::string& line);
void write_episodes(const std::filesystem::path& path, const std::vector<Episode>& episodes);
std::vector<Episode> read_episodes(const std::filesystem::path& path);

}  // namespace mtv
