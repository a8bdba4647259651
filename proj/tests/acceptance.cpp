// Acceptance checks 1-13. One PASS/FAIL line per criterion; exit status is
// non-zero when any hard criterion fails. Criterion 11 is soft: a miss is
// flagged but does not change the exit status.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "cli.hpp"
#include "reference_forward.hpp"
#include "rigged.hpp"

using namespace mtv;
using namespace mtv::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
  bool soft = false;
};

int hard_failures = 0;

void report(int id, const char* title, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const char* verdict = o.pass ? "PASS" : (o.soft ? "FAIL (soft, flagged)" : "FAIL");
  std::printf("%s %2d %s: %s [%.1fs]\n", verdict, id, title, o.detail.c_str(), s);
  std::fflush(stdout);
  if (!o.pass && !o.soft) ++hard_failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0 : s / double(v.size());
}

const std::vector<std::uint64_t> kSeeds{1, 2, 3};
constexpr int kEpisodes = 100;

// 1 ---------------------------------------------------------------------------
Outcome patch_identity() {
  double worst = 0;
  bool identical = true;
  for (std::uint64_t i = 0; i < 100; ++i) {
    auto cfg = small_config(1 + int(i % 3), i % 3 == 0 ? 1 : (i % 3 == 1 ? 2 : 4), 16, 32, 24);
    cfg.activation = i % 2 ? Activation::gelu_tanh : Activation::relu;
    const auto model = random_model<float>(cfg, 1000 + i);
    const auto in = random_input(cfg, 2000 + i, 3 + int(i % 17), i % 4 == 0);
    const auto base = forward(model, in, CaptureSpec::all());
    const PatchSet<float> empty;
    identical = identical && (forward_patched(model, in, empty).logits.array() == base.logits.array()).all();
    PatchSet<float> self;
    self.scope = PatchScope::last_prompt_token;
    for (const auto& [loc, v] : base.captures) self.values[loc] = v;
    worst = std::max(worst, max_abs_diff(forward_patched(model, in, self).logits, base.logits));
  }
  return {identical && worst <= 1e-6,
          fmt("empty patch bit-identical=%s, self-patch max|dlogit|=%.2e (<= 1e-6) over 100 pairs",
              identical ? "yes" : "no", worst)};
}

// 2 ---------------------------------------------------------------------------
Outcome zero_ablation() {
  const auto cfg = small_config(2, 2, 16);
  const auto model = random_model<double>(cfg, 77);
  double worst = 0;
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 2; ++h)
      for (std::uint64_t s = 0; s < 5; ++s) {
        const auto in = random_input(cfg, 300 + s, 6 + int(s), s % 2 == 1);
        PatchSet<double> zero;
        zero.scope = PatchScope::all_positions;
        zero.values[{l, h}] = Vector<double>::Zero(cfg.head_dim());
        const auto oracle = reference_forward(model, in, ZeroHead{l, h});
        worst = std::max(worst, max_abs_diff(oracle, forward_patched(model, in, zero).logits));
      }
  return {worst <= 1e-6, fmt("max|dlogit| vs structural zeroing=%.2e (<= 1e-6) over 4 heads x 5 inputs", worst)};
}

// 3 ---------------------------------------------------------------------------
// Two independent references: the loop-level long-double forward on an f64
// model, and per-episode captures of the f32 model averaged in long double.
// The tolerance measures the averaging path, not f32 forward rounding.
Outcome mean_activation_oracle() {
  const auto model32 = random_model<float>(small_config(2, 2, 16, 128, 64), 5);
  const auto model64 = model32.cast<double>();
  const auto task = make_task(TaskKind::token_bijection, 0);
  const int H = model32.config().n_heads, rows = model32.config().n_locations(), dh = model32.config().head_dim();
  double worst64 = 0, worst32 = 0;
  for (int T : {1, 3, 10}) {
    std::vector<Episode> eps;
    for (int t = 0; t < T; ++t) eps.push_back(sample_episode(task, 3, 40 + t));
    const auto mean64 = compute_mean_activations(model64, eps);
    const auto mean32 = compute_mean_activations(model32, eps);
    using Acc = std::vector<std::vector<long double>>;
    Acc ref(rows, std::vector<long double>(dh, 0.0L)), cap(rows, std::vector<long double>(dh, 0.0L));
    for (const auto& e : eps) {
      const auto in = render_episode(e);
      LMat heads;
      reference_forward(model64, in, std::nullopt, &heads);
      const auto fr = forward(model32, in, CaptureSpec::all());
      for (int r = 0; r < rows; ++r) {
        const auto& v = fr.captures.at(HeadLocation{r / H, r % H});
        for (int k = 0; k < dh; ++k) ref[r][k] += heads[r][k], cap[r][k] += v[k];
      }
    }
    for (int r = 0; r < rows; ++r)
      for (int k = 0; k < dh; ++k) {
        worst64 = std::max(worst64, std::abs(double(ref[r][k] / T) - mean64.values(r, k)));
        worst32 = std::max(worst32, std::abs(double(cap[r][k] / T) - mean32.values(r, k)));
      }
  }
  return {worst64 <= 1e-6 && worst32 <= 1e-6,
          fmt("max elementwise error f64=%.2e f32=%.2e (<= 1e-6) for T in {1,3,10}", worst64, worst32)};
}

// 4 ---------------------------------------------------------------------------
Outcome score_function() {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 2.0);
  std::bernoulli_distribution coin(0.5);
  double worst_rel = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Matrix<double> theta(4, 4);
    HeadMask a(4, 4);
    for (Eigen::Index i = 0; i < theta.size(); ++i) theta.data()[i] = n(rng), a.data()[i] = coin(rng);
    const auto g = bernoulli_logprob_grad(theta, a);
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      Matrix<double> up = theta, dn = theta;
      up.data()[i] += h;
      dn.data()[i] -= h;
      const double fd = (bernoulli_log_prob(up, a) - bernoulli_log_prob(dn, a)) / (2 * h);
      const double scale = std::max({std::abs(fd), std::abs(g.data()[i]), 1e-3});
      worst_rel = std::max(worst_rel, std::abs(fd - g.data()[i]) / scale);
    }
  }
  const int M = 10000;
  Matrix<double> theta(4, 4);
  for (Eigen::Index i = 0; i < theta.size(); ++i) theta.data()[i] = n(rng);
  const Matrix<double> p = theta.unaryExpr([](double t) { return sigmoid(t); });
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix<double> sum = Matrix<double>::Zero(4, 4);
  for (int s = 0; s < M; ++s) {
    HeadMask a(4, 4);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = u(rng) < p.data()[i];
    sum += bernoulli_logprob_grad(theta, a);
  }
  const double mean_abs = (sum / M).cwiseAbs().maxCoeff();
  const double bound = 3.0 / std::sqrt(double(M));
  return {worst_rel <= 1e-4 && mean_abs <= bound,
          fmt("finite-difference rel err=%.2e (<= 1e-4), |sample mean| at M=1e4=%.2e (<= %.2e)", worst_rel,
              mean_abs, bound)};
}

// 5 ---------------------------------------------------------------------------
bool gate_passed = false;

Outcome backprop_gate() {
  const ModelConfig mc{2, 2, 16, 128, 64, 32, Activation::gelu_tanh};
  Weights<double> w = init_model<double>(mc, 1).weights();
  for_each_tensor(w, [](const std::string& name, auto& t) {
    if (!name.ends_with("_gain")) t *= 10.0;
  });
  const Model<double> model(mc, std::move(w));
  TaskMixture mix = TaskMixture::standard();
  mix.universe.embed_dim = mc.embed_dim;
  mix.max_shots = 3;
  const auto r = grad_check(model, sample_batch(mix, 3, mc.max_context, 1, 0), 1e-5);
  gate_passed = r.max_relative_error < 1e-4;
  return {gate_passed, fmt("max relative error=%.2e (< 1e-4), worst tensor %s", r.max_relative_error,
                           r.worst_tensor.c_str())};
}

// 6 ---------------------------------------------------------------------------
Outcome brute_force_optimality() {
  std::string detail;
  bool all_ok = true;
  for (std::uint64_t m = 0; m < 3; ++m) {
    const auto model = random_model<double>(small_config(2, 3, 12, 16, 16), 21 + m);
    const auto mean = random_mean(model, 22 + m, 3.0);
    const auto target = mask_from_locations(2, 3, {{0, 2}, {1, 0}});
    const auto align = rigged_alignment(model, mean, target, 20, 23 + m);
    const double best = brute_force_best_subset(model, mean, align).loss;
    for (auto mode : {FinalSelection::threshold, FinalSelection::sample}) {
      int ok = 0;
      for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        ExtractionConfig cfg;
        cfg.steps = 100;
        cfg.samples_per_step = 32;
        cfg.final_selection = mode;
        const auto r = mtv_extract(model, mean, align, cfg, seed);
        const double loss =
            alignment_loss(model, mean, align, mask_from_locations(2, 3, r.artifact.locations), cfg.patch_scope);
        ok += loss <= 1.05 * best + 1e-12;
      }
      all_ok = all_ok && ok >= 4;
      detail += fmt("m%d/%s %d/5  ", int(m), to_string(mode).c_str(), ok);
    }
  }
  return {all_ok, detail + "(need >= 4/5 within 1.05x of the 64-mask optimum)"};
}

// Shared state for the checkpoint criteria ------------------------------------
struct Checkpoint {
  std::optional<Model<float>> model;
  TaskSpec task = make_task(TaskKind::token_bijection, 0);
  std::vector<MTVArtifact> artifacts;  // one per seed, N=4 T=50 S=50
  Metrics zero, four, mtv;
};

Checkpoint ck;

Metrics eval_with(const Protocol& base, const TaskSpec& task, const std::vector<std::uint64_t>& seeds) {
  Protocol p = base;
  p.eval_episodes = kEpisodes;
  p.seeds = seeds;
  return evaluate(*ck.model, p, task);
}

Metrics eval_artifacts(const std::vector<MTVArtifact>& arts, const TaskSpec& task) {
  std::vector<double> acc;
  Metrics last;
  for (std::size_t i = 0; i < arts.size(); ++i) {
    last = eval_with(Protocol::with_artifact(arts[i]), task, {kSeeds[i]});
    acc.push_back(last.mean);
  }
  last.seeds = kSeeds;
  last.per_seed = acc;
  last.mean = mean_of(acc);
  return last;
}

Outcome gated() { return {false, "skipped: backprop gate (criterion 5) did not pass"}; }

// 7 ---------------------------------------------------------------------------
Outcome end_to_end(const fs::path& weights) {
  if (!gate_passed) return gated();
  ck.model = load_weights<float>(weights);
  for (auto seed : kSeeds)
    ck.artifacts.push_back(extract_task_vector(*ck.model, ck.task, ExtractionRequest{4, 50, 50, 0, {}}, seed).artifact);
  ck.zero = eval_with(Protocol::zero_shot(), ck.task, kSeeds);
  ck.four = eval_with(Protocol::k_shot(4), ck.task, kSeeds);
  ck.mtv = eval_artifacts(ck.artifacts, ck.task);
  const bool icl = ck.four.mean >= 0.95;
  const bool gain = ck.mtv.mean >= ck.zero.mean + 0.30;
  const bool ratio = ck.mtv.mean >= 0.80 * ck.four.mean;
  std::string heads;
  for (const auto& a : ck.artifacts) heads += std::to_string(a.locations.size()) + " ";
  return {icl && gain && ratio,
          fmt("4-shot=%.3f (>= 0.95), zero-shot=%.3f, mtv=%.3f (need >= %.3f and >= %.3f), heads per seed: %s",
              ck.four.mean, ck.zero.mean, ck.mtv.mean, ck.zero.mean + 0.30, 0.80 * ck.four.mean, heads.c_str())};
}

// 8 ---------------------------------------------------------------------------
Outcome token_accounting() {
  if (!ck.model) return gated();
  const double shot = double(shot_length(ck.task));
  const bool mtv_eq = ck.mtv.tokens_per_query == ck.zero.tokens_per_query;
  const bool k_eq = ck.four.tokens_per_query - ck.zero.tokens_per_query == 4 * shot;
  // Wall-clock is informational; re-measure both on identical queries.
  const auto m = eval_with(Protocol::with_artifact(ck.artifacts.front()), ck.task, {1});
  const auto k = eval_with(Protocol::k_shot(4), ck.task, {1});
  const bool wall = m.wallclock_ms_per_100 <= 1.2 * k.wallclock_ms_per_100;
  return {mtv_eq && k_eq && wall,
          fmt("tokens/query zero=%.0f mtv=%.0f 4-shot=%.0f (shot_len=%.0f); ms/100 mtv=%.1f vs 4-shot=%.1f (x1.2 slack)",
              ck.zero.tokens_per_query, ck.mtv.tokens_per_query, ck.four.tokens_per_query, shot,
              m.wallclock_ms_per_100, k.wallclock_ms_per_100)};
}

// 9 ---------------------------------------------------------------------------
Outcome scaling(const fs::path& out) {
  if (!ck.model) return gated();
  const auto csv = out / "sweep.csv";
  fs::remove(csv);
  SweepGrid grid;  // N {1,2,4,8} x T {10,50,100} x S {50} x seeds {1,2,3}
  grid.eval_episodes = kEpisodes;
  sweep(*ck.model, ck.task, grid, csv);
  const auto rows = read_results(csv);
  auto cell_mean = [&](int N, int T) {
    std::vector<double> v;
    for (const auto& r : rows)
      if (r.N == N && r.T == T && r.accuracy) v.push_back(*r.accuracy);
    return mean_of(v);
  };
  const double hi = cell_mean(4, 100), lo = cell_mean(1, 10);
  const bool complete = rows.size() == grid.size();
  return {complete && hi >= lo, fmt("(N=4,T=100)=%.3f >= (N=1,T=10)=%.3f; %zu/%zu rows in %s", hi, lo, rows.size(),
                                    grid.size(), csv.string().c_str())};
}

// 10 --------------------------------------------------------------------------
Outcome generalization() {
  if (!ck.model) return gated();
  const auto b = make_task(TaskKind::key_value_lookup, 0);
  std::vector<MTVArtifact> hybrids;
  for (std::size_t i = 0; i < ck.artifacts.size(); ++i)
    hybrids.push_back(hybrid_artifact(*ck.model, ck.artifacts[i], b, 4, 50, kSeeds[i]));
  const double hybrid = eval_artifacts(hybrids, b).mean;
  const double zero = eval_with(Protocol::zero_shot(), b, kSeeds).mean;
  return {hybrid >= zero, fmt("lookup accuracy with bijection heads + lookup means=%.3f >= zero-shot=%.3f", hybrid, zero)};
}

// 11 --------------------------------------------------------------------------
Outcome baseline_ordering() {
  if (!ck.model) return gated();
  CompareConfig cfg;
  cfg.extraction = {4, 50, 50, 0, {}};
  cfg.eval_episodes = kEpisodes;
  cfg.seeds = kSeeds;
  const auto rep = compare(*ck.model, ck.task, cfg);
  std::string table;
  for (const auto& m : rep.rows) table += fmt("%s=%.3f ", m.protocol.c_str(), m.mean);
  const bool rows_ok = rep.rows.size() == 5;
  Outcome o{rows_ok && rep.ordering_holds(), fmt("%smtv wins %d/3 (need >= 2)", table.c_str(), rep.mtv_wins)};
  o.soft = rows_ok;  // a missing table is a hard failure; the ordering itself is soft
  return o;
}

// 12 --------------------------------------------------------------------------
Outcome artifact_round_trip(const fs::path& out) {
  const auto model = random_model<float>(small_config(2, 4, 16, 128, 64), 12);
  const auto task = make_task(TaskKind::token_bijection, 0);
  auto art = make_artifact(task_mean_activations(model, task, 2, 5, 1), {{0, 1}, {1, 3}});
  art.seeds = {1};
  save_artifact(art, out / "a1.json");
  save_artifact(load_artifact(out / "a1.json"), out / "a2.json");
  const bool bytes = slurp(out / "a1.json") == slurp(out / "a2.json");
  const auto other = random_model<float>(small_config(2, 8, 16, 128, 64), 12);
  bool rejected = false;
  try {
    apply_mtv(other, art, sample_episode(task, 0, 1));
  } catch (const FingerprintMismatch&) {
    rejected = true;
  }
  return {bytes && rejected, fmt("save->load->save byte-identical=%s, foreign-model apply rejected=%s",
                                 bytes ? "yes" : "no", rejected ? "yes" : "no")};
}

// 13 --------------------------------------------------------------------------
Outcome determinism(const fs::path& out, const fs::path& weights) {
  const std::string m = weights.string();
  struct Case {
    std::vector<std::string> args;
    std::vector<std::string> files;
  };
  std::ofstream(out / "tiny_train.json")
      << R"({"model_config": {"n_layers": 1, "n_heads": 2, "embed_dim": 16, "mlp_hidden": 32}, "train": {"steps": 5, "batch_size": 4}})";
  const std::vector<Case> cases{
      {{"train", "--config", (out / "tiny_train.json").string()}, {"model.mtvw", "loss.csv"}},
      {{"gradcheck"}, {"gradcheck.json"}},
      {{"mean-acts", "--model", m, "--N", "4", "--T", "10"}, {"mean_acts.json"}},
      {{"extract", "--model", m, "--N", "4", "--T", "10", "--S", "10"}, {"artifact.json", "extract_trace.csv"}},
      {{"eval", "--model", m, "--protocol", "zero-shot", "--protocol", "4-shot", "--protocol", "fv-mode",
        "--protocol", "vtv-mode", "--episodes", "20", "--N", "4", "--T", "10"},
       {"eval.csv", "eval.json"}},
      {{"sweep", "--model", m, "--grid-N", "1,4", "--grid-T", "10", "--grid-S", "10", "--episodes", "20", "--jobs",
        "2"},
       {"sweep.csv"}},
      {{"compare", "--model", m, "--N", "4", "--T", "10", "--S", "10", "--episodes", "20", "--n-seeds", "2"},
       {"compare.csv", "compare.json"}},
  };
  int identical = 0, total = 0;
  std::string bad;
  for (const auto& c : cases) {
    for (const char* tag : {"a", "b"}) {
      std::vector<std::string> full{"mtv"};
      full.insert(full.end(), c.args.begin(), c.args.end());
      full.insert(full.end(), {"--seed", "7", "--out", (out / "det" / tag / c.args.front()).string()});
      std::vector<const char*> argv;
      for (const auto& a : full) argv.push_back(a.c_str());
      if (cli::run(int(argv.size()), argv.data()) != 0) throw std::runtime_error(c.args.front() + " failed");
    }
    for (const auto& f : c.files) {
      ++total;
      const auto a = slurp(out / "det" / "a" / c.args.front() / f);
      if (!a.empty() && a == slurp(out / "det" / "b" / c.args.front() / f))
        ++identical;
      else
        bad += c.args.front() + "/" + f + " ";
    }
  }
  return {identical == total, fmt("%d/%d primary outputs byte-identical across reruns %s", identical, total,
                                  bad.empty() ? "" : ("(differs: " + bad + ")").c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path weights = argc > 1 ? fs::path(argv[1]) : fs::path(MTV_SOURCE_DIR) / "models" / "reference.mtvw";
  const fs::path out = fs::absolute("acceptance_out");
  fs::create_directories(out);
  std::printf("reference checkpoint: %s\n", weights.string().c_str());

  // The backprop gate runs before everything that depends on a trained model.
  report(5, "backprop gate", backprop_gate);
  report(1, "patch identity & self-consistency", patch_identity);
  report(2, "zero-ablation oracle", zero_ablation);
  report(3, "mean-activation oracle", mean_activation_oracle);
  report(4, "score-function gradient", score_function);
  report(6, "brute-force optimality", brute_force_optimality);
  report(7, "end-to-end transfer", [&] { return end_to_end(weights); });
  report(8, "token accounting", token_accounting);
  report(9, "scaling ordering", [&] { return scaling(out); });
  report(10, "head generalization", generalization);
  report(11, "baseline ordering", baseline_ordering);
  report(12, "artifact round trip", [&] { return artifact_round_trip(out); });
  report(13, "determinism", [&] { return determinism(out, weights); });

  std::printf("%s: %d hard failure(s)\n", hard_failures ? "ACCEPTANCE FAILED" : "ACCEPTANCE PASSED", hard_failures);
  return hard_failures ? 1 : 0;
}
