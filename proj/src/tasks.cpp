#include "mtv/tasks.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>

namespace mtv {

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::token_bijection: return "token-bijection";
    case TaskKind::key_value_lookup: return "key-value-lookup";
    case TaskKind::two_way_one_shot_class: return "two-way-one-shot-class";
    case TaskKind::soft_token_class: return "soft-token-class";
  }
  return "?";
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "token-bijection" || s == "bijection") return TaskKind::token_bijection;
  if (s == "key-value-lookup" || s == "lookup") return TaskKind::key_value_lookup;
  if (s == "two-way-one-shot-class" || s == "two-way") return TaskKind::two_way_one_shot_class;
  if (s == "soft-token-class" || s == "soft") return TaskKind::soft_token_class;
  throw ConfigError("unknown task kind '" + s + "'");
}

int TaskUniverse::symbols_used() const {
  return first_symbol + 2 * bijection_symbols + lookup_keys + lookup_values + class_count * class_members +
         class_labels + soft_classes;
}

void TaskUniverse::validate() const {
  if (symbols_used() > vocab_size)
    throw ConfigError("task universe needs " + std::to_string(symbols_used()) + " symbols, vocabulary has " +
                      std::to_string(vocab_size));
  if (sep < 0 || eos < 0 || image < 0 || sep >= first_symbol || eos >= first_symbol || image >= first_symbol ||
      sep == eos || sep == image || eos == image)
    throw ConfigError("delimiter symbols must be distinct and below first_symbol");
  if (class_labels < 2) throw ConfigError("two-way classification needs at least 2 labels");
  if (soft_classes < 2) throw ConfigError("need >= 2 soft classes");
  if (tokens_per_image < 1) throw ConfigError("tokens_per_image must be >= 1");
  if (!(soft_noise >= 0.0)) throw ConfigError("soft_noise must be >= 0");
}

std::string TaskSpec::name() const { return to_string(kind) + "/" + std::to_string(task_id); }

namespace {

std::vector<int> range_of(int first, int count) {
  std::vector<int> v(count);
  std::iota(v.begin(), v.end(), first);
  return v;
}

std::mt19937_64 rule_rng(const TaskUniverse& u, TaskKind kind, int task_id) {
  std::seed_seq seq{std::uint64_t(u.rule_seed), std::uint64_t(kind) + 1, std::uint64_t(task_id)};
  return std::mt19937_64(seq);
}

// Prototypes are shared by every soft task so one model can learn them once.
Matrix<double> soft_prototypes(const TaskUniverse& u) {
  std::seed_seq seq{std::uint64_t(u.rule_seed), std::uint64_t(0xC1A55)};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix<double> p(u.soft_classes, u.embed_dim);
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    for (Eigen::Index c = 0; c < p.cols(); ++c) p(r, c) = normal(rng);
    p.row(r).normalize();
  }
  return p;
}

}  // namespace

TaskSpec make_task(TaskKind kind, int task_id, const TaskUniverse& u) {
  u.validate();
  if (task_id < 0) throw ConfigError("task id must be >= 0");
  TaskSpec s;
  s.kind = kind;
  s.task_id = task_id;
  s.sep = u.sep;
  s.eos = u.eos;
  s.image = u.image;
  s.delimiter_symbols = {u.sep, u.eos, u.image};
  auto rng = rule_rng(u, kind, task_id);

  int next = u.first_symbol;
  const int bij_in = next;
  next += u.bijection_symbols;
  const int bij_out = next;
  next += u.bijection_symbols;
  const int keys = next;
  next += u.lookup_keys;
  const int values = next;
  next += u.lookup_values;
  const int members = next;
  next += u.class_count * u.class_members;
  const int labels = next;
  next += u.class_labels;
  const int soft_labels = next;

  switch (kind) {
    case TaskKind::token_bijection: {
      s.input_symbols = range_of(bij_in, u.bijection_symbols);
      s.output_symbols = range_of(bij_out, u.bijection_symbols);
      auto perm = s.output_symbols;
      std::shuffle(perm.begin(), perm.end(), rng);
      for (int y : perm) s.table.push_back({y});
      break;
    }
    case TaskKind::key_value_lookup: {
      s.input_symbols = range_of(keys, u.lookup_keys);
      s.output_symbols = range_of(values, u.lookup_values);
      std::uniform_int_distribution<int> pick(0, u.lookup_values - 1);
      for (int k = 0; k < u.lookup_keys; ++k) s.table.push_back({values + pick(rng), values + pick(rng)});
      break;
    }
    case TaskKind::two_way_one_shot_class: {
      s.input_symbols = range_of(members, u.class_count * u.class_members);
      for (int c = 0; c < u.class_count; ++c) s.classes.push_back(range_of(members + c * u.class_members, u.class_members));
      auto pool = range_of(labels, u.class_labels);
      std::shuffle(pool.begin(), pool.end(), rng);
      s.label_of_class = {pool[0], pool[1]};
      s.output_symbols = s.label_of_class;
      std::sort(s.output_symbols.begin(), s.output_symbols.end());
      break;
    }
    case TaskKind::soft_token_class: {
      s.input_symbols = {u.image};
      s.output_symbols = range_of(soft_labels, u.soft_classes);
      s.label_of_class = s.output_symbols;
      std::shuffle(s.label_of_class.begin(), s.label_of_class.end(), rng);
      s.tokens_per_image = u.tokens_per_image;
      s.noise_sigma = u.soft_noise;
      s.prototypes = soft_prototypes(u);
      break;
    }
  }
  return s;
}

bool Segment::operator==(const Segment& o) const {
  if (tokens != o.tokens) return false;
  if (soft.rows() != o.soft.rows()) return false;
  if (soft.rows() == 0) return true;
  return soft.cols() == o.soft.cols() && soft == o.soft;
}

bool Episode::operator==(const Episode& o) const {
  return task == o.task && kind == o.kind && task_id == o.task_id && seed == o.seed && shots == o.shots &&
         query == o.query && gold == o.gold;
}

namespace {

Segment token_segment(int token) { return Segment{{token}, {}}; }

Segment image_segment(const TaskSpec& spec, int cls, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  Segment s;
  s.tokens.assign(spec.tokens_per_image, spec.image);
  s.soft.resize(spec.tokens_per_image, spec.prototypes.cols());
  for (Eigen::Index r = 0; r < s.soft.rows(); ++r)
    for (Eigen::Index c = 0; c < s.soft.cols(); ++c)
      s.soft(r, c) = spec.prototypes(cls, c) + (spec.noise_sigma > 0 ? noise(rng) : 0.0);
  return s;
}

std::vector<int> distinct_indices(int pool, int count, std::mt19937_64& rng) {
  std::vector<int> idx(pool);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count);
  return idx;
}

}  // namespace

Episode sample_episode(const TaskSpec& spec, int n_shots, std::uint64_t seed) {
  if (n_shots < 0) throw ConfigError("n_shots must be >= 0");
  std::mt19937_64 rng(seed);
  Episode e;
  e.task = spec.name();
  e.kind = spec.kind;
  e.task_id = spec.task_id;
  e.seed = seed;

  switch (spec.kind) {
    case TaskKind::token_bijection:
    case TaskKind::key_value_lookup: {
      const int pool = int(spec.table.size());
      if (n_shots + 1 > pool)
        throw ConfigError(spec.name() + ": vocabulary of " + std::to_string(pool) + " inputs too small for " +
                          std::to_string(n_shots) + " shots plus a query");
      const auto idx = distinct_indices(pool, n_shots + 1, rng);
      for (int i = 0; i < n_shots; ++i)
        e.shots.push_back({token_segment(spec.input_symbols[idx[i]]), spec.table[idx[i]]});
      e.query = token_segment(spec.input_symbols[idx[n_shots]]);
      e.gold = spec.table[idx[n_shots]];
      break;
    }
    case TaskKind::two_way_one_shot_class: {
      const int n_classes = int(spec.classes.size());
      const int members = int(spec.classes.front().size());
      const auto pair = distinct_indices(n_classes, 2, rng);
      std::uniform_int_distribution<int> coin(0, 1);
      const int flip = coin(rng);
      const int label[2] = {spec.label_of_class[flip], spec.label_of_class[1 - flip]};
      const int first = coin(rng);
      const int query_side = coin(rng);
      int need[2] = {0, 0};
      for (int i = 0; i < n_shots; ++i) need[(first + i) % 2]++;
      need[query_side]++;
      if (need[0] > members || need[1] > members)
        throw ConfigError(spec.name() + ": " + std::to_string(members) + " members per class too few for " +
                          std::to_string(n_shots) + " shots plus a query");
      std::vector<int> order[2] = {distinct_indices(members, need[0], rng), distinct_indices(members, need[1], rng)};
      int used[2] = {0, 0};
      for (int i = 0; i < n_shots; ++i) {
        const int side = (first + i) % 2;
        e.shots.push_back({token_segment(spec.classes[pair[side]][order[side][used[side]++]]), {label[side]}});
      }
      e.query = token_segment(spec.classes[pair[query_side]][order[query_side][used[query_side]]]);
      e.gold = {label[query_side]};
      break;
    }
    case TaskKind::soft_token_class: {
      std::uniform_int_distribution<int> cls(0, int(spec.prototypes.rows()) - 1);
      for (int i = 0; i < n_shots; ++i) {
        const int c = cls(rng);
        e.shots.push_back({image_segment(spec, c, rng), {spec.label_of_class[c]}});
      }
      const int c = cls(rng);
      e.query = image_segment(spec, c, rng);
      e.gold = {spec.label_of_class[c]};
      break;
    }
  }
  return e;
}

std::size_t rendered_length(const Episode& episode) {
  std::size_t n = episode.query.tokens.size() + 1;
  for (const auto& s : episode.shots) n += s.input.tokens.size() + s.output.size() + 2;
  return n;
}

namespace {

void append_segment(ModelInput& in, const Segment& seg, int image) {
  const std::size_t base = in.tokens.size();
  in.tokens.insert(in.tokens.end(), seg.tokens.begin(), seg.tokens.end());
  if (seg.soft.rows() == 0) return;
  // Group consecutive placeholders into one soft segment each.
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < seg.tokens.size();) {
    if (seg.tokens[i] != image) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < seg.tokens.size() && seg.tokens[j] == image) ++j;
    const Eigen::Index len = Eigen::Index(j - i);
    if (row + len > seg.soft.rows()) throw ShapeError("segment has fewer soft rows than image placeholders");
    in.soft.push_back({base + i, seg.soft.middleRows(row, len)});
    row += len;
    i = j;
  }
  if (row != seg.soft.rows()) throw ShapeError("segment has more soft rows than image placeholders");
}

}  // namespace

ModelInput render_episode(const Episode& episode, const PromptLayout& layout) {
  const std::size_t need = rendered_length(episode);
  if (layout.max_context > 0 && need > std::size_t(layout.max_context))
    throw ContextOverflow(need, std::size_t(layout.max_context));
  ModelInput in;
  in.tokens.reserve(need);
  for (const auto& s : episode.shots) {
    append_segment(in, s.input, layout.image);
    in.tokens.push_back(layout.sep);
    in.tokens.insert(in.tokens.end(), s.output.begin(), s.output.end());
    in.tokens.push_back(layout.eos);
  }
  append_segment(in, episode.query, layout.image);
  in.tokens.push_back(layout.sep);
  return in;
}

TrainingSequence render_for_training(const Episode& episode, const PromptLayout& layout) {
  PromptLayout unchecked = layout;
  unchecked.max_context = 0;
  TrainingSequence ts;
  ts.input = render_episode(episode, unchecked);
  ts.input.tokens.insert(ts.input.tokens.end(), episode.gold.begin(), episode.gold.end());
  if (layout.max_context > 0 && ts.input.size() > std::size_t(layout.max_context))
    throw ContextOverflow(ts.input.size(), std::size_t(layout.max_context));
  ts.targets.assign(ts.input.size(), -1);
  std::size_t pos = 0;
  for (const auto& s : episode.shots) {
    pos += s.input.tokens.size() + 1;  // input + SEP
    for (std::size_t k = 0; k < s.output.size(); ++k) ts.targets[pos + k - 1] = s.output[k];
    pos += s.output.size() + 1;  // output + EOS
  }
  pos += episode.query.tokens.size() + 1;
  for (std::size_t k = 0; k < episode.gold.size(); ++k) ts.targets[pos + k - 1] = episode.gold[k];
  return ts;
}

Episode corrupt_episode(const Episode& episode, const TaskSpec& foreign, int n_replace, std::uint64_t seed) {
  if (n_replace < 0 || n_replace > episode.n_shots())
    throw ConfigError("n_replace " + std::to_string(n_replace) + " outside [0, " +
                      std::to_string(episode.n_shots()) + "]");
  Episode out = episode;
  if (n_replace == 0) return out;
  std::mt19937_64 rng(seed);
  auto slots = distinct_indices(episode.n_shots(), n_replace, rng);
  std::vector<Shot> replacements;
  for (std::uint64_t attempt = 0; int(replacements.size()) < n_replace; ++attempt) {
    if (attempt > 1000) throw ConfigError("could not draw enough distinct foreign shots");
    const Episode donor = sample_episode(foreign, 0, rng());
    const Segment& cand = donor.query;
    auto clash = [&](const Segment& s) { return s.soft.rows() == 0 && s.tokens == cand.tokens; };
    if (cand.soft.rows() == 0) {
      if (clash(episode.query)) continue;
      bool dup = false;
      for (const auto& s : episode.shots) dup = dup || clash(s.input);
      for (const auto& s : replacements) dup = dup || clash(s.input);
      if (dup) continue;
    }
    replacements.push_back({donor.query, donor.gold});
  }
  for (int i = 0; i < n_replace; ++i) out.shots[slots[i]] = replacements[i];
  return out;
}

std::vector<std::size_t> facility_location_select(const Matrix<double>& candidates, std::size_t k) {
  const std::size_t n = std::size_t(candidates.rows());
  if (k < 1 || k > n) throw ConfigError("facility location needs 1 <= k <= " + std::to_string(n));
  require_finite(candidates, "facility location candidates");
  Matrix<double> unit = candidates;
  for (Eigen::Index r = 0; r < unit.rows(); ++r) {
    const double norm = unit.row(r).norm();
    if (norm == 0.0) throw NumericError("zero vector at candidate " + std::to_string(r));
    unit.row(r) /= norm;
  }
  const Matrix<double> sim = unit * unit.transpose();
  // coverage[q] = max similarity of q to the current selection; empty selection contributes nothing.
  Vector<double> coverage = Vector<double>::Constant(n, -std::numeric_limits<double>::infinity());
  std::vector<bool> taken(n, false);
  std::vector<std::size_t> chosen;
  auto value_with = [&](std::size_t s) {
    double v = 0;
    for (std::size_t q = 0; q < n; ++q) v += std::max(coverage[q], sim(q, s));
    return v;
  };
  while (chosen.size() < k) {
    std::size_t best = n;
    double best_val = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < n; ++s) {
      if (taken[s]) continue;
      const double v = value_with(s);
      if (v > best_val) {
        best_val = v;
        best = s;
      }
    }
    taken[best] = true;
    chosen.push_back(best);
    for (std::size_t q = 0; q < n; ++q) coverage[q] = std::max(coverage[q], sim(q, best));
  }
  return chosen;
}

double facility_location_value(const Matrix<double>& candidates, const std::vector<std::size_t>& subset) {
  double total = 0;
  for (Eigen::Index q = 0; q < candidates.rows(); ++q) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t s : subset) {
      const double cos = candidates.row(q).dot(candidates.row(Eigen::Index(s))) /
                         (candidates.row(q).norm() * candidates.row(Eigen::Index(s)).norm());
      best = std::max(best, cos);
    }
    total += best;
  }
  return total;
}

}  // namespace mtv
