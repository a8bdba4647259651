#include "mtv/eval.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace mtv {

std::string to_string(ProtocolKind k) {
  switch (k) {
    case ProtocolKind::zero_shot: return "zero-shot";
    case ProtocolKind::k_shot: return "k-shot-icl";
    case ProtocolKind::mtv: return "mtv";
    case ProtocolKind::mtv_plus_shots: return "mtv-plus-shots";
    case ProtocolKind::fv_mode: return "fv-mode";
    case ProtocolKind::vtv_mode: return "vtv-mode";
    case ProtocolKind::finetune_baseline: return "finetune-baseline";
  }
  return "?";
}

Protocol Protocol::zero_shot() { return {}; }

Protocol Protocol::k_shot(int k) {
  Protocol p;
  p.kind = ProtocolKind::k_shot;
  p.k = k;
  return p;
}

Protocol Protocol::with_artifact(MTVArtifact a, int k) {
  Protocol p;
  if (a.mode == "fv-mode")
    p.kind = ProtocolKind::fv_mode;
  else if (a.mode == "vtv-mode")
    p.kind = ProtocolKind::vtv_mode;
  else
    p.kind = k > 0 ? ProtocolKind::mtv_plus_shots : ProtocolKind::mtv;
  p.k = k;
  p.artifact = std::move(a);
  return p;
}

Protocol Protocol::finetune(int steps) {
  Protocol p;
  p.kind = ProtocolKind::finetune_baseline;
  p.finetune_steps = steps;
  return p;
}

std::string Protocol::name() const {
  switch (kind) {
    case ProtocolKind::k_shot: return std::to_string(k) + "-shot";
    case ProtocolKind::mtv: return artifact ? artifact->mode : "mtv";
    case ProtocolKind::mtv_plus_shots: return (artifact ? artifact->mode : "mtv") + "+" + std::to_string(k) + "-shot";
    default: return to_string(kind);
  }
}

int Protocol::shots() const {
  return kind == ProtocolKind::k_shot || kind == ProtocolKind::mtv_plus_shots ? k : 0;
}

void Protocol::validate() const {
  if ((kind == ProtocolKind::k_shot || kind == ProtocolKind::mtv_plus_shots) && k < 1)
    throw ConfigError(to_string(kind) + " needs k >= 1");
  const bool needs_artifact = kind == ProtocolKind::mtv || kind == ProtocolKind::mtv_plus_shots ||
                              kind == ProtocolKind::fv_mode || kind == ProtocolKind::vtv_mode;
  if (needs_artifact && !artifact) throw ConfigError(to_string(kind) + " needs an artifact");
  if (eval_episodes < 1) throw ConfigError("empty eval set");
  if (seeds.empty()) throw ConfigError("protocol has no seeds");
  if (kind == ProtocolKind::finetune_baseline && finetune_steps < 1) throw ConfigError("finetune_steps must be >= 1");
}

bool Metrics::same_results(const Metrics& o) const {
  return protocol == o.protocol && task == o.task && seeds == o.seeds && per_seed == o.per_seed && mean == o.mean &&
         std == o.std && tokens_per_query == o.tokens_per_query && queries == o.queries;
}

namespace {

void finalize(Metrics& m) {
  double sum = 0;
  for (double a : m.per_seed) sum += a;
  m.mean = m.per_seed.empty() ? 0.0 : sum / double(m.per_seed.size());
  m.std.reset();
  if (m.per_seed.size() >= 2) {
    double ss = 0;
    for (double a : m.per_seed) ss += (a - m.mean) * (a - m.mean);
    m.std = std::sqrt(ss / double(m.per_seed.size() - 1));
  }
}

Metrics merge(const std::vector<Metrics>& parts) {
  Metrics out = parts.front();
  out.seeds.clear();
  out.per_seed.clear();
  out.queries = 0;
  double tokens = 0, wall = 0;
  for (const auto& p : parts) {
    out.seeds.insert(out.seeds.end(), p.seeds.begin(), p.seeds.end());
    out.per_seed.insert(out.per_seed.end(), p.per_seed.begin(), p.per_seed.end());
    out.queries += p.queries;
    tokens += p.tokens_per_query * p.queries;
    wall += p.wallclock_ms_per_100 * p.queries;
  }
  out.tokens_per_query = tokens / out.queries;
  out.wallclock_ms_per_100 = wall / out.queries;
  finalize(out);
  return out;
}

PromptLayout layout_for(const TaskSpec& task, int max_context) {
  return PromptLayout{task.sep, task.eos, task.image, max_context};
}

}  // namespace

template <class Scalar>
Model<Scalar> finetune(const Model<Scalar>& model, const TaskSpec& task, int steps, std::uint64_t seed) {
  TaskMixture mix;
  mix.entries = {{task.kind, {task.task_id}, 1.0}};
  mix.min_shots = mix.max_shots = 0;
  const TaskSpec rebuilt = make_task(task.kind, task.task_id, mix.universe);
  if (rebuilt.table != task.table || rebuilt.label_of_class != task.label_of_class)
    throw ConfigError("finetune needs a task built from the default universe");
  TrainConfig tc;
  tc.steps = steps;
  tc.batch_size = 16;
  tc.lr = 1e-3;
  tc.warmup_steps = 0;
  tc.seed = seed;
  return train(model, mix, tc).model;
}

template <class Scalar>
Metrics evaluate(const Model<Scalar>& model, const Protocol& protocol, const TaskSpec& task) {
  protocol.validate();
  std::optional<PatchSet<Scalar>> patch;
  if (protocol.artifact) {
    require_fingerprint(protocol.artifact->model_fingerprint, model.fingerprint());
    patch = patch_from_artifact<Scalar>(*protocol.artifact, protocol.scope);
  }
  const PromptLayout layout = layout_for(task, model.config().max_context);
  Metrics out;
  out.protocol = protocol.name();
  out.task = task.name();
  out.seeds = protocol.seeds;
  double tokens = 0, seconds = 0;
  for (const std::uint64_t seed : protocol.seeds) {
    std::optional<Model<Scalar>> tuned;
    if (protocol.kind == ProtocolKind::finetune_baseline) tuned.emplace(finetune(model, task, protocol.finetune_steps, seed));
    const Model<Scalar>& m = tuned ? *tuned : model;
    int correct = 0;
    for (int i = 0; i < protocol.eval_episodes; ++i) {
      const Episode e = sample_episode(task, protocol.shots(), episode_seed(SeedStream::eval, seed, std::uint64_t(i)));
      const ModelInput in = render_episode(e, layout);
      tokens += double(in.size());
      const auto t0 = std::chrono::steady_clock::now();
      const auto pred = generate(m, in, int(e.gold.size()), patch ? &*patch : nullptr);
      seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      correct += pred == e.gold;
    }
    out.per_seed.push_back(double(correct) / protocol.eval_episodes);
  }
  out.queries = protocol.eval_episodes * int(protocol.seeds.size());
  out.tokens_per_query = tokens / out.queries;
  out.wallclock_ms_per_100 = 1e5 * seconds / out.queries;
  finalize(out);
  return out;
}

template <class Scalar>
MeanActivations task_mean_activations(const Model<Scalar>& model, const TaskSpec& task, int N, int T,
                                      std::uint64_t seed) {
  if (T < 1) throw ConfigError("T must be >= 1");
  std::vector<Episode> episodes;
  for (int i = 0; i < T; ++i) episodes.push_back(sample_episode(task, N, episode_seed(SeedStream::extract, seed, i)));
  auto mean = compute_mean_activations(model, episodes, layout_for(task, model.config().max_context));
  mean.task = task.name();
  return mean;
}

std::vector<AlignmentExample> task_alignment_set(const TaskSpec& task, int S, int shots, std::uint64_t seed,
                                                 int max_context) {
  std::vector<Episode> episodes;
  for (int i = 0; i < S; ++i) episodes.push_back(sample_episode(task, shots, episode_seed(SeedStream::align, seed, i)));
  return alignment_from_episodes(episodes, layout_for(task, max_context));
}

template <class Scalar>
ExtractionResult extract_task_vector(const Model<Scalar>& model, const TaskSpec& task, const ExtractionRequest& req,
                                     std::uint64_t seed, ExecOptions exec) {
  if (req.N < 0 || req.S < 0) throw ConfigError("N and S must be >= 0");
  const MeanActivations mean = task_mean_activations(model, task, req.N, req.T, seed);
  ExtractionConfig cfg = req.config;
  cfg.steps = req.S;
  const auto alignment =
      task_alignment_set(task, req.S * cfg.examples_per_step, req.alignment_shots, seed, model.config().max_context);
  ExtractionResult res =
      mtv_extract(model, mean, alignment, cfg, episode_seed(SeedStream::extract, seed, 0xFFFFFFFFull), exec);
  res.artifact.task = task.name();
  res.artifact.seeds = {seed};
  return res;
}

template <class Scalar>
SubsetResult brute_force_best_subset(const Model<Scalar>& model, const MeanActivations& mean,
                                     const std::vector<AlignmentExample>& alignment, int max_heads, PatchScope scope,
                                     LossMode mode) {
  const int L = model.config().n_layers, H = model.config().n_heads, n = L * H;
  if (max_heads > 16) throw ConfigError("brute force is limited to 16 heads");
  if (n > max_heads) throw ConfigError("model has " + std::to_string(n) + " heads, above the brute-force limit");
  SubsetResult best;
  best.loss = std::numeric_limits<double>::infinity();
  for (std::uint32_t bits = 0; bits < (1u << n); ++bits) {
    HeadMask m(L, H);
    for (int i = 0; i < n; ++i) m.data()[i] = (bits >> i) & 1u;
    const double loss = alignment_loss(model, mean, alignment, m, scope, mode);
    ++best.masks_evaluated;
    if (loss < best.loss) {
      best.loss = loss;
      best.mask = m;
    }
  }
  return best;
}

// ---- results CSV

std::string ResultRow::key() const {
  return protocol + "|" + task + "|" + std::to_string(N) + "|" + std::to_string(T) + "|" + std::to_string(S) + "|" +
         seed;
}

std::string to_csv(const ResultRow& r) {
  auto clean = [](std::string s) {
    for (char& c : s)
      if (c == ',' || c == '\n' || c == '\r') c = ';';
    return s;
  };
  char acc[32] = "", tok[32], wall[32] = "";
  if (r.accuracy) std::snprintf(acc, sizeof acc, "%.6f", *r.accuracy);
  std::snprintf(tok, sizeof tok, "%.6g", r.tokens_per_query);
  if (r.wallclock_ms_per_100) std::snprintf(wall, sizeof wall, "%.3f", *r.wallclock_ms_per_100);
  std::ostringstream os;
  os << clean(r.protocol) << ',' << clean(r.task) << ',' << r.N << ',' << r.T << ',' << r.S << ',' << clean(r.seed)
     << ',' << acc << ',' << tok << ',' << wall << ',' << clean(r.notes);
  return os.str();
}

ResultRow row_from_csv(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) f.push_back(cell);
  if (!line.empty() && line.back() == ',') f.emplace_back();
  if (f.size() != 10) throw FormatError("malformed csv", "expected 10 fields: " + line);
  ResultRow r;
  try {
    r.protocol = f[0];
    r.task = f[1];
    r.N = std::stoi(f[2]);
    r.T = std::stoi(f[3]);
    r.S = std::stoi(f[4]);
    r.seed = f[5];
    if (!f[6].empty()) r.accuracy = std::stod(f[6]);
    r.tokens_per_query = std::stod(f[7]);
    if (!f[8].empty()) r.wallclock_ms_per_100 = std::stod(f[8]);
    r.notes = f[9];
  } catch (const std::logic_error&) {
    throw FormatError("malformed csv", line);
  }
  return r;
}

std::vector<ResultRow> read_results(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("io", "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kResultsHeader) throw FormatError("malformed csv", "unexpected header");
  std::vector<ResultRow> rows;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(row_from_csv(line));
  return rows;
}

std::vector<ResultRow> rows_of(const Metrics& m, int N, int T, int S, bool timing, const std::string& notes) {
  std::vector<ResultRow> rows;
  for (std::size_t i = 0; i < m.per_seed.size(); ++i) {
    ResultRow r{m.protocol, m.task, N, T, S, std::to_string(m.seeds[i]), m.per_seed[i], m.tokens_per_query, {}, notes};
    if (timing) r.wallclock_ms_per_100 = m.wallclock_ms_per_100;
    rows.push_back(std::move(r));
  }
  ResultRow agg{m.protocol, m.task, N, T, S, "mean", m.mean, m.tokens_per_query, {}, notes};
  if (m.std) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "std=%.6f", *m.std);
    agg.notes = agg.notes.empty() ? buf : agg.notes + ";" + buf;
  }
  if (timing) agg.wallclock_ms_per_100 = m.wallclock_ms_per_100;
  rows.push_back(std::move(agg));
  return rows;
}

void SweepGrid::validate() const {
  if (size() == 0) throw ConfigError("sweep grid is empty");
  for (int n : N)
    if (n < 0) throw ConfigError("sweep N must be >= 0");
  for (int t : T)
    if (t < 1) throw ConfigError("sweep T must be >= 1");
  for (int s : S)
    if (s < 0) throw ConfigError("sweep S must be >= 0");
  if (eval_episodes < 1) throw ConfigError("empty eval set");
}

template <class Scalar>
std::size_t sweep(const Model<Scalar>& model, const TaskSpec& task, const SweepGrid& grid,
                  const std::filesystem::path& csv, SweepOptions opts) {
  grid.validate();
  std::set<std::string> done;
  if (std::filesystem::exists(csv))
    for (const auto& r : read_results(csv)) done.insert(r.key());
  else {
    std::ofstream(csv) << kResultsHeader << "\n";
  }

  std::vector<ResultRow> cells;
  for (int n : grid.N)
    for (int t : grid.T)
      for (int s : grid.S)
        for (auto seed : grid.seeds) {
          ResultRow r{"mtv", task.name(), n, t, s, std::to_string(seed), {}, 0, {}, ""};
          if (!done.count(r.key())) cells.push_back(std::move(r));
        }

  auto run_cell = [&](ResultRow r) {
    try {
      const std::uint64_t seed = std::stoull(r.seed);
      const auto ext = extract_task_vector(model, task, {r.N, r.T, r.S, 0, grid.extraction}, seed);
      Protocol p = Protocol::with_artifact(ext.artifact);
      p.seeds = {seed};
      p.eval_episodes = grid.eval_episodes;
      const Metrics m = evaluate(model, p, task);
      r.accuracy = m.mean;
      r.tokens_per_query = m.tokens_per_query;
      if (opts.timing) r.wallclock_ms_per_100 = m.wallclock_ms_per_100;
      r.notes = "heads=" + std::to_string(ext.artifact.locations.size());
    } catch (const std::exception& e) {
      r.notes = std::string("error:") + e.what();
    }
    return r;
  };

  std::ofstream out(csv, std::ios::app);
  if (!out) throw FormatError("io", "cannot append to " + csv.string());
  std::vector<std::optional<ResultRow>> results(cells.size());
  std::mutex mu;
  std::condition_variable cv;
  std::atomic<std::size_t> next{0};
  const int jobs = std::max(1, std::min<int>(opts.jobs, int(cells.size())));
  std::vector<std::jthread> pool;
  for (int j = 0; j < jobs && !cells.empty(); ++j)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < cells.size();) {
        auto r = run_cell(cells[i]);
        std::lock_guard lock(mu);
        results[i] = std::move(r);
        cv.notify_all();
      }
    });
  // Single writer, grid order.
  for (std::size_t i = 0; i < cells.size(); ++i) {
    std::unique_lock lock(mu);
    cv.wait(lock, [&] { return results[i].has_value(); });
    out << to_csv(*results[i]) << "\n" << std::flush;
  }
  return cells.size();
}

template <class Scalar>
MTVArtifact hybrid_artifact(const Model<Scalar>& model, const MTVArtifact& artifact_a, const TaskSpec& task_b, int N,
                            int T, std::uint64_t seed) {
  require_fingerprint(artifact_a.model_fingerprint, model.fingerprint());
  MTVArtifact h = make_artifact(task_mean_activations(model, task_b, N, T, seed), artifact_a.locations);
  h.mode = "hybrid";
  h.task = task_b.name();
  h.S = artifact_a.S;
  h.config_hash = artifact_a.config_hash;
  h.seeds = {seed};
  return h;
}

template <class Scalar>
Metrics generalization_eval(const Model<Scalar>& model, const MTVArtifact& artifact_a, const TaskSpec& task_b,
                            int N, int T, std::uint64_t seed, const Protocol& shared) {
  Protocol p = shared;
  p.kind = ProtocolKind::mtv;
  p.k = 0;
  p.artifact = hybrid_artifact(model, artifact_a, task_b, N, T, seed);
  return evaluate(model, p, task_b);
}

MTVArtifact baseline_fv(const MeanActivations& mean, std::optional<int> layer) {
  const int l = layer.value_or(mean.n_layers / 2);
  if (l < 0 || l >= mean.n_layers) throw ConfigError("fv-mode layer " + std::to_string(l) + " out of range");
  std::vector<HeadLocation> locs;
  for (int h = 0; h < mean.n_heads; ++h) locs.push_back({l, h});
  MTVArtifact a = make_artifact(mean, locs);
  a.mode = "fv-mode";
  return a;
}

template <class Scalar>
MTVArtifact baseline_vtv(const Model<Scalar>& model, const TaskSpec& task, std::uint64_t seed, ExtractionConfig cfg) {
  cfg.examples_per_step = 1;
  const ExtractionResult r = extract_task_vector(model, task, {1, 10, 10, 1, cfg}, seed);
  MTVArtifact a = r.artifact;
  a.mode = "vtv-mode";
  return a;
}

template <class Scalar>
std::vector<AccountingRow> accounting(const Model<Scalar>& model, const TaskSpec& task,
                                      const std::vector<Protocol>& protocols, const std::vector<double>& extraction_ms) {
  std::vector<AccountingRow> rows;
  for (std::size_t i = 0; i < protocols.size(); ++i) {
    const Metrics m = evaluate(model, protocols[i], task);
    rows.push_back({m.protocol, m.tokens_per_query, m.wallclock_ms_per_100,
                    i < extraction_ms.size() ? extraction_ms[i] : 0.0});
  }
  return rows;
}

std::size_t shot_length(const TaskSpec& task) {
  const Episode e = sample_episode(task, 1, 0);
  const Shot& s = e.shots.front();
  return s.input.tokens.size() + 1 + s.output.size() + 1;
}

template <class Scalar>
CompareReport compare(const Model<Scalar>& model, const TaskSpec& task, const CompareConfig& cfg, ExecOptions exec) {
  if (cfg.seeds.empty()) throw ConfigError("compare needs at least one seed");
  Protocol shared;
  shared.eval_episodes = cfg.eval_episodes;
  shared.seeds = cfg.seeds;

  CompareReport report;
  report.rows.push_back(evaluate(model, shared, task));
  Protocol icl = Protocol::k_shot(cfg.k);
  icl.eval_episodes = cfg.eval_episodes;
  icl.seeds = cfg.seeds;
  report.rows.push_back(evaluate(model, icl, task));

  std::vector<Metrics> mtv, fv, vtv;
  for (const auto seed : cfg.seeds) {
    auto one = [&](MTVArtifact a) {
      Protocol p = Protocol::with_artifact(std::move(a));
      p.eval_episodes = cfg.eval_episodes;
      p.seeds = {seed};
      return evaluate(model, p, task);
    };
    mtv.push_back(one(extract_task_vector(model, task, cfg.extraction, seed, exec).artifact));
    fv.push_back(one(baseline_fv(task_mean_activations(model, task, cfg.extraction.N, cfg.extraction.T, seed))));
    vtv.push_back(one(baseline_vtv(model, task, seed, cfg.extraction.config)));
    if (mtv.back().mean >= std::max(fv.back().mean, vtv.back().mean)) ++report.mtv_wins;
  }
  report.rows.push_back(merge(mtv));
  report.rows.push_back(merge(fv));
  report.rows.push_back(merge(vtv));
  return report;
}

#define MTV_INSTANTIATE(S)                                                                                          \
  template Metrics evaluate<S>(const Model<S>&, const Protocol&, const TaskSpec&);                                  \
  template Model<S> finetune<S>(const Model<S>&, const TaskSpec&, int, std::uint64_t);                              \
  template ExtractionResult extract_task_vector<S>(const Model<S>&, const TaskSpec&, const ExtractionRequest&,       \
                                                   std::uint64_t, ExecOptions);                                     \
  template MeanActivations task_mean_activations<S>(const Model<S>&, const TaskSpec&, int, int, std::uint64_t);     \
  template SubsetResult brute_force_best_subset<S>(const Model<S>&, const MeanActivations&,                         \
                                                   const std::vector<AlignmentExample>&, int, PatchScope, LossMode); \
  template std::size_t sweep<S>(const Model<S>&, const TaskSpec&, const SweepGrid&, const std::filesystem::path&,   \
                                SweepOptions);                                                                      \
  template MTVArtifact hybrid_artifact<S>(const Model<S>&, const MTVArtifact&, const TaskSpec&, int, int,           \
                                          std::uint64_t);                                                           \
  template Metrics generalization_eval<S>(const Model<S>&, const MTVArtifact&, const TaskSpec&, int, int,           \
                                          std::uint64_t, const Protocol&);                                          \
  template MTVArtifact baseline_vtv<S>(const Model<S>&, const TaskSpec&, std::uint64_t, ExtractionConfig);         \
  template std::vector<AccountingRow> accounting<S>(const Model<S>&, const TaskSpec&, const std::vector<Protocol>&, \
                                                    const std::vector<double>&);                                    \
  template CompareReport compare<S>(const Model<S>&, const TaskSpec&, const CompareConfig&, ExecOptions);

MTV_INSTANTIATE(float)
MTV_INSTANTIATE(double)
#undef MTV_INSTANTIATE

}  // namespace mtv
