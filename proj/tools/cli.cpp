#include "cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mtv/eval.hpp"

#ifndef MTV_VERSION
#define MTV_VERSION "unknown"
#endif

namespace mtv::cli {

namespace {

using ojson = nlohmann::ordered_json;
namespace fs = std::filesystem;

struct RunConfig {
  std::string command;
  std::string model = "models/reference.mtvw";
  std::string task = "token-bijection/0";
  std::string task_b = "key-value-lookup/0";
  std::string artifact;
  std::string out_dir;
  std::string precision = "f32";
  std::uint64_t seed = 1;
  int jobs = 1;
  bool timing = false;
  int N = 4;
  int T = 50;
  int S = 50;
  int k = 4;
  int episodes = 100;
  int n_seeds = 3;
  int layer = -1;  // fv-mode layer; -1 = floor(L/2)
  std::vector<std::string> protocols;
  std::vector<int> grid_N{1, 2, 4, 8};
  std::vector<int> grid_T{10, 50, 100};
  std::vector<int> grid_S{50};
  ExtractionConfig extraction;
  ModelConfig model_config;
  TrainConfig train;

  std::vector<std::uint64_t> seeds() const {
    std::vector<std::uint64_t> s;
    for (int i = 0; i < n_seeds; ++i) s.push_back(seed + std::uint64_t(i));
    return s;
  }
};

template <class T>
void take(const ojson& v, T& field, const std::string& key) {
  try {
    field = v.get<T>();
  } catch (const ojson::exception&) {
    throw ConfigError("bad value for '" + key + "'");
  }
}

void load_model_config(const ojson& j, ModelConfig& m) {
  for (const auto& [key, v] : j.items()) {
    const std::string k = "model_config." + key;
    if (key == "n_layers") take(v, m.n_layers, k);
    else if (key == "n_heads") take(v, m.n_heads, k);
    else if (key == "embed_dim") take(v, m.embed_dim, k);
    else if (key == "vocab_size") take(v, m.vocab_size, k);
    else if (key == "max_context") take(v, m.max_context, k);
    else if (key == "mlp_hidden") take(v, m.mlp_hidden, k);
    else if (key == "activation") m.activation = activation_from_string(v.get<std::string>());
    else throw ConfigError("unknown key '" + k + "'");
  }
}

void load_train_config(const ojson& j, TrainConfig& t) {
  for (const auto& [key, v] : j.items()) {
    const std::string k = "train." + key;
    if (key == "steps") take(v, t.steps, k);
    else if (key == "batch_size") take(v, t.batch_size, k);
    else if (key == "lr") take(v, t.lr, k);
    else if (key == "warmup_steps") take(v, t.warmup_steps, k);
    else if (key == "beta1") take(v, t.beta1, k);
    else if (key == "beta2") take(v, t.beta2, k);
    else if (key == "eps") take(v, t.eps, k);
    else if (key == "grad_clip") take(v, t.grad_clip, k);
    else if (key == "eval_every") take(v, t.eval_every, k);
    else if (key == "eval_episodes") take(v, t.eval_episodes, k);
    else if (key == "eval_shots") take(v, t.eval_shots, k);
    else throw ConfigError("unknown key '" + k + "'");
  }
}

void load_config_file(const fs::path& path, RunConfig& c) {
  std::ifstream in(path);
  if (!in) throw FormatError("io", "cannot open config " + path.string());
  ojson j;
  try {
    j = ojson::parse(in);
  } catch (const ojson::parse_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "model") take(v, c.model, key);
    else if (key == "task") take(v, c.task, key);
    else if (key == "task_b") take(v, c.task_b, key);
    else if (key == "artifact") take(v, c.artifact, key);
    else if (key == "out_dir") take(v, c.out_dir, key);
    else if (key == "precision") take(v, c.precision, key);
    else if (key == "seed") take(v, c.seed, key);
    else if (key == "jobs") take(v, c.jobs, key);
    else if (key == "timing") take(v, c.timing, key);
    else if (key == "N") take(v, c.N, key);
    else if (key == "T") take(v, c.T, key);
    else if (key == "S") take(v, c.S, key);
    else if (key == "k") take(v, c.k, key);
    else if (key == "episodes") take(v, c.episodes, key);
    else if (key == "n_seeds") take(v, c.n_seeds, key);
    else if (key == "layer") take(v, c.layer, key);
    else if (key == "protocols") take(v, c.protocols, key);
    else if (key == "grid") {
      for (const auto& [gk, gv] : v.items()) {
        if (gk == "N") take(gv, c.grid_N, "grid.N");
        else if (gk == "T") take(gv, c.grid_T, "grid.T");
        else if (gk == "S") take(gv, c.grid_S, "grid.S");
        else throw ConfigError("unknown key 'grid." + gk + "'");
      }
    } else if (key == "extraction") c.extraction = extraction_config_from_json(v.dump());
    else if (key == "model_config") load_model_config(v, c.model_config);
    else if (key == "train") load_train_config(v, c.train);
    else throw ConfigError("unknown key '" + key + "'");
  }
}

ojson resolved_json(const RunConfig& c) {
  ojson j;
  j["version"] = MTV_VERSION;
  j["command"] = c.command;
  j["model"] = c.model;
  j["task"] = c.task;
  j["task_b"] = c.task_b;
  j["artifact"] = c.artifact;
  j["out_dir"] = c.out_dir;
  j["precision"] = c.precision;
  j["seed"] = c.seed;
  j["jobs"] = c.jobs;
  j["timing"] = c.timing;
  j["N"] = c.N;
  j["T"] = c.T;
  j["S"] = c.S;
  j["k"] = c.k;
  j["episodes"] = c.episodes;
  j["n_seeds"] = c.n_seeds;
  j["layer"] = c.layer;
  j["protocols"] = c.protocols;
  j["grid"] = {{"N", c.grid_N}, {"T", c.grid_T}, {"S", c.grid_S}};
  j["extraction"] = ojson::parse(extraction_config_to_json(c.extraction));
  const auto& m = c.model_config;
  j["model_config"] = {{"n_layers", m.n_layers},     {"n_heads", m.n_heads},       {"embed_dim", m.embed_dim},
                       {"vocab_size", m.vocab_size}, {"max_context", m.max_context}, {"mlp_hidden", m.mlp_hidden},
                       {"activation", to_string(m.activation)}};
  const auto& t = c.train;
  j["train"] = {{"steps", t.steps},         {"batch_size", t.batch_size},   {"lr", t.lr},
                {"warmup_steps", t.warmup_steps}, {"beta1", t.beta1},     {"beta2", t.beta2},
                {"eps", t.eps},             {"grad_clip", t.grad_clip},     {"eval_every", t.eval_every},
                {"eval_episodes", t.eval_episodes}, {"eval_shots", t.eval_shots}};
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("io", "cannot write " + path.string());
  out << text;
}

TaskSpec parse_task(const std::string& s) {
  const auto slash = s.find('/');
  if (slash == std::string::npos) throw ConfigError("task must look like <kind>/<id>: " + s);
  int id = 0;
  try {
    id = std::stoi(s.substr(slash + 1));
  } catch (const std::logic_error&) {
    throw ConfigError("bad task id in " + s);
  }
  return make_task(task_kind_from_string(s.substr(0, slash)), id);
}

std::string json_of(const std::vector<Metrics>& ms, bool timing) {
  ojson arr = ojson::array();
  for (const auto& m : ms) {
    ojson j;
    j["protocol"] = m.protocol;
    j["task"] = m.task;
    j["seeds"] = m.seeds;
    j["per_seed"] = m.per_seed;
    j["mean"] = m.mean;
    j["std"] = m.std ? ojson(*m.std) : ojson(nullptr);
    j["tokens_per_query"] = m.tokens_per_query;
    j["queries"] = m.queries;
    if (timing) j["wallclock_ms_per_100"] = m.wallclock_ms_per_100;
    arr.push_back(std::move(j));
  }
  return arr.dump(2) + "\n";
}

void write_rows(const fs::path& path, const std::vector<ResultRow>& rows) {
  std::ostringstream os;
  os << kResultsHeader << "\n";
  for (const auto& r : rows) os << to_csv(r) << "\n";
  write_text(path, os.str());
}

template <class Scalar>
Protocol parse_protocol(const std::string& spec, const RunConfig& c, const Model<Scalar>& model, const TaskSpec& task) {
  auto number_after = [&](const std::string& prefix) {
    try {
      return std::stoi(spec.substr(prefix.size()));
    } catch (const std::logic_error&) {
      throw ConfigError("bad protocol " + spec);
    }
  };
  Protocol p;
  if (spec == "zero-shot") {
    p = Protocol::zero_shot();
  } else if (spec.starts_with("k-shot:")) {
    p = Protocol::k_shot(number_after("k-shot:"));
  } else if (spec.ends_with("-shot") && spec.find_first_not_of("0123456789") == spec.size() - 5) {
    p = Protocol::k_shot(std::stoi(spec));
  } else if (spec == "mtv" || spec.starts_with("mtv-plus-shots:")) {
    if (c.artifact.empty()) throw ConfigError("protocol " + spec + " needs --artifact");
    p = Protocol::with_artifact(load_artifact(c.artifact), spec == "mtv" ? 0 : number_after("mtv-plus-shots:"));
    if (spec != "mtv" && p.k < 1) throw ConfigError("mtv-plus-shots needs k >= 1");
  } else if (spec == "fv-mode") {
    p = Protocol::with_artifact(baseline_fv(task_mean_activations(model, task, c.N, c.T, c.seed),
                                            c.layer < 0 ? std::nullopt : std::optional<int>(c.layer)));
  } else if (spec == "vtv-mode") {
    p = Protocol::with_artifact(baseline_vtv(model, task, c.seed, c.extraction));
  } else if (spec == "finetune-baseline") {
    p = Protocol::finetune(300);
  } else {
    throw ConfigError("unknown protocol " + spec);
  }
  p.eval_episodes = c.episodes;
  p.seeds = c.seeds();
  return p;
}

template <class Scalar>
int execute(RunConfig& c, const fs::path& out) {
  const std::string& cmd = c.command;
  if (cmd == "train") {
    auto model = init_model<Scalar>(c.model_config, c.seed);
    TrainConfig tc = c.train;
    tc.seed = c.seed;
    TaskUniverse universe;
    universe.embed_dim = c.model_config.embed_dim;
    const auto mix = TaskMixture::standard(universe);
    const auto result = train(model, mix, tc, [](const LossRecord& r) {
      if (r.eval_acc >= 0) std::printf("step %d loss %.4f eval_acc %.3f\n", r.step, r.loss, r.eval_acc);
    });
    save_weights(result.model, out / "model.mtvw");
    write_loss_log(out / "loss.csv", result.log);
    std::printf("model %s\n", result.model.fingerprint().c_str());
    return kOk;
  }
  if (cmd == "gradcheck") {
    ModelConfig mc{2, 2, 16, 128, 64, 32, Activation::gelu_tanh};
    auto base = init_model<double>(mc, c.seed);
    Weights<double> w = base.weights();
    // Larger weights than the training init so attention is far from uniform.
    for_each_tensor(w, [](const std::string& name, auto& t) {
      if (!name.ends_with("_gain")) t *= 10.0;
    });
    const Model<double> model(mc, std::move(w));
    TaskMixture mix = TaskMixture::standard();
    mix.universe.embed_dim = mc.embed_dim;
    mix.max_shots = 3;
    const auto batch = sample_batch(mix, 3, mc.max_context, c.seed, 0);
    const auto report = grad_check(model, batch, 1e-5);
    ojson j;
    j["max_relative_error"] = report.max_relative_error;
    j["worst_tensor"] = report.worst_tensor;
    j["threshold"] = 1e-4;
    j["pass"] = report.max_relative_error < 1e-4;
    ojson per = ojson::object();
    for (const auto& [name, e] : report.per_tensor) per[name] = e;
    j["per_tensor"] = std::move(per);
    write_text(out / "gradcheck.json", j.dump(2) + "\n");
    std::printf("gradcheck max_relative_error %.3e (%s)\n", report.max_relative_error, report.worst_tensor.c_str());
    if (report.max_relative_error >= 1e-4) throw NumericError("gradient check failed");
    return kOk;
  }

  const Model<Scalar> model = load_weights<Scalar>(c.model);
  const TaskSpec task = parse_task(c.task);
  const ExecOptions exec{c.jobs};

  if (cmd == "mean-acts") {
    save_mean_activations(task_mean_activations(model, task, c.N, c.T, c.seed), out / "mean_acts.json");
  } else if (cmd == "extract") {
    const auto res = extract_task_vector(model, task, {c.N, c.T, c.S, 0, c.extraction}, c.seed, exec);
    save_artifact(res.artifact, out / "artifact.json");
    std::ostringstream trace;
    trace << "step,mean_reward,best_mean_reward,mean_probability,max_probability,above_half\n";
    char buf[160];
    for (const auto& t : res.trace) {
      std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%d\n", t.step, t.mean_reward, t.best_mean_reward,
                    t.mean_probability, t.max_probability, t.above_half);
      trace << buf;
    }
    write_text(out / "extract_trace.csv", trace.str());
    std::printf("artifact %zu heads\n", res.artifact.locations.size());
  } else if (cmd == "eval") {
    std::vector<Metrics> ms;
    std::vector<ResultRow> rows;
    for (const auto& spec : c.protocols) {
      const Protocol p = parse_protocol(spec, c, model, task);
      ms.push_back(evaluate(model, p, task));
      const int N = p.artifact ? p.artifact->N : p.shots();
      const int T = p.artifact ? p.artifact->T : 0;
      const int S = p.artifact ? p.artifact->S : 0;
      for (auto& r : rows_of(ms.back(), N, T, S, c.timing)) rows.push_back(std::move(r));
      std::printf("%s %.4f\n", ms.back().protocol.c_str(), ms.back().mean);
    }
    write_rows(out / "eval.csv", rows);
    write_text(out / "eval.json", json_of(ms, c.timing));
  } else if (cmd == "sweep") {
    SweepGrid grid;
    grid.N = c.grid_N;
    grid.T = c.grid_T;
    grid.S = c.grid_S;
    grid.seeds = c.seeds();
    grid.eval_episodes = c.episodes;
    grid.extraction = c.extraction;
    const auto n = sweep(model, task, grid, out / "sweep.csv", {c.jobs, c.timing});
    std::printf("sweep wrote %zu rows\n", n);
  } else if (cmd == "compare") {
    CompareConfig cc;
    cc.extraction = {c.N, c.T, c.S, 0, c.extraction};
    cc.k = c.k;
    cc.eval_episodes = c.episodes;
    cc.seeds = c.seeds();
    const auto report = compare(model, task, cc, exec);
    std::vector<ResultRow> rows;
    for (const auto& m : report.rows) {
      const bool extracted = m.protocol != "zero-shot" && !m.protocol.ends_with("-shot");
      const int N = m.protocol == "vtv-mode" ? 1 : extracted ? c.N : m.protocol == "zero-shot" ? 0 : c.k;
      const int T = m.protocol == "vtv-mode" ? 10 : extracted ? c.T : 0;
      const int S = m.protocol == "vtv-mode" ? 10 : m.protocol == "mtv" ? c.S : 0;
      for (auto& r : rows_of(m, N, T, S, c.timing)) rows.push_back(std::move(r));
    }
    write_rows(out / "compare.csv", rows);
    ojson j;
    j["rows"] = ojson::parse(json_of(report.rows, c.timing));
    j["mtv_wins"] = report.mtv_wins;
    j["seeds"] = report.rows.front().seeds.size();
    j["ordering_holds"] = report.ordering_holds();
    write_text(out / "compare.json", j.dump(2) + "\n");
    for (const auto& m : report.rows) std::printf("%-12s %.4f tokens %.1f\n", m.protocol.c_str(), m.mean, m.tokens_per_query);
    if (!report.ordering_holds())
      std::printf("FLAG: mtv >= max(fv-mode, vtv-mode) held in %d of %zu seeds\n", report.mtv_wins,
                  report.rows.front().seeds.size());
  } else if (cmd == "oracle") {
    const auto mean = task_mean_activations(model, task, c.N, c.T, c.seed);
    const auto alignment = task_alignment_set(task, c.S, 0, c.seed, model.config().max_context);
    const auto best = brute_force_best_subset(model, mean, alignment, 16, c.extraction.patch_scope, c.extraction.loss);
    ojson j;
    ojson locs = ojson::array();
    for (const auto& l : locations_of(best.mask)) locs.push_back({l.layer, l.head});
    j["best_locations"] = std::move(locs);
    j["best_loss"] = best.loss;
    j["masks_evaluated"] = best.masks_evaluated;
    write_text(out / "oracle.json", j.dump(2) + "\n");
    std::printf("oracle best loss %.6f over %zu masks\n", best.loss, best.masks_evaluated);
  } else {
    throw CLI::ValidationError("subcommand", "unknown subcommand " + cmd);
  }
  return kOk;
}

void report(const char* kind, int code, const std::string& msg) {
  std::string one = msg;
  for (char& ch : one)
    if (ch == '\n') ch = ' ';
  std::fprintf(stderr, "error kind=%s exit=%d msg=%s\n", kind, code, one.c_str());
}

}  // namespace

int run(int argc, const char* const* argv) {
  RunConfig c;
  CLI::App app{"Multimodal task vectors on a miniature transformer", "mtv"};
  app.footer(
      "Exit codes: 0 ok, 2 usage, 3 config, 4 fingerprint mismatch, 5 io/format, 6 numeric or other failure.\n"
      "Outputs go to --out, else $MTV_OUT_DIR, else the current directory.");
  app.set_version_flag("--version", MTV_VERSION);
  app.require_subcommand(1, 1);

  std::string config_path;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config; flags override its values");
    sub->add_option("--seed", c.seed, "Single source of randomness");
    sub->add_option("--jobs", c.jobs, "Worker bound")->check(CLI::PositiveNumber);
    sub->add_option("--precision", c.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    sub->add_option("--out", c.out_dir, "Output directory");
    sub->add_flag("--timing", c.timing, "Record wall-clock columns (not byte-stable)");
  };
  auto model_task = [&](CLI::App* sub) {
    sub->add_option("--model", c.model, "Weights file");
    sub->add_option("--task", c.task, "Task, e.g. token-bijection/0");
  };
  auto nts = [&](CLI::App* sub) {
    sub->add_option("--N", c.N, "Shots per mean-activation episode");
    sub->add_option("--T", c.T, "Mean-activation episodes");
    sub->add_option("--S", c.S, "Alignment steps");
  };

  auto* train = app.add_subcommand("train", "Train a model on the task mixture");
  common(train);
  train->add_option("--steps", c.train.steps);
  train->add_option("--batch-size", c.train.batch_size);
  train->add_option("--lr", c.train.lr);
  train->add_option("--warmup", c.train.warmup_steps);
  train->add_option("--eval-every", c.train.eval_every);

  auto* mean_acts = app.add_subcommand("mean-acts", "Mean head activations over ICL episodes");
  common(mean_acts);
  model_task(mean_acts);
  nts(mean_acts);

  auto* extract = app.add_subcommand("extract", "Mean activations and REINFORCE head search");
  common(extract);
  model_task(extract);
  nts(extract);

  auto* eval = app.add_subcommand("eval", "Evaluate protocols");
  common(eval);
  model_task(eval);
  nts(eval);
  eval->add_option("--protocol", c.protocols,
                   "zero-shot | <k>-shot | mtv | mtv-plus-shots:<k> | fv-mode | vtv-mode | finetune-baseline");
  eval->add_option("--artifact", c.artifact);
  eval->add_option("--episodes", c.episodes);
  eval->add_option("--n-seeds", c.n_seeds);

  auto* sweep_cmd = app.add_subcommand("sweep", "Scaling sweep over N, T, S and seeds");
  common(sweep_cmd);
  model_task(sweep_cmd);
  sweep_cmd->add_option("--grid-N", c.grid_N)->delimiter(',');
  sweep_cmd->add_option("--grid-T", c.grid_T)->delimiter(',');
  sweep_cmd->add_option("--grid-S", c.grid_S)->delimiter(',');
  sweep_cmd->add_option("--episodes", c.episodes);
  sweep_cmd->add_option("--n-seeds", c.n_seeds);

  auto* compare_cmd = app.add_subcommand("compare", "mtv vs fv-mode vs vtv-mode vs k-shot table");
  common(compare_cmd);
  model_task(compare_cmd);
  nts(compare_cmd);
  compare_cmd->add_option("--k", c.k);
  compare_cmd->add_option("--episodes", c.episodes);
  compare_cmd->add_option("--n-seeds", c.n_seeds);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the trainer's backward pass");
  common(gradcheck);

  auto* oracle = app.add_subcommand("oracle", "Exhaustive best head subset");
  common(oracle);
  model_task(oracle);
  nts(oracle);

  try {
    // The config file is applied first so that flags parsed afterwards override it.
    for (int i = 1; i < argc; ++i) {
      const std::string a = argv[i];
      if (a == "--config" && i + 1 < argc)
        load_config_file(argv[i + 1], c);
      else if (a.starts_with("--config="))
        load_config_file(a.substr(9), c);
    }
    app.parse(argc, argv);
    c.command = app.get_subcommands().front()->get_name();
    if (c.out_dir.empty()) {
      const char* env = std::getenv("MTV_OUT_DIR");
      c.out_dir = env && *env ? env : ".";
    }
    if (c.n_seeds < 1) throw ConfigError("n_seeds must be >= 1");
    if (c.command == "eval" && c.protocols.empty())
      throw CLI::ValidationError("--protocol", "at least one protocol is required");
    const fs::path out(c.out_dir);
    fs::create_directories(out);
    write_text(out / "resolved_config.json", resolved_json(c).dump(2) + "\n");
    return c.precision == "f64" ? execute<double>(c, out) : execute<float>(c, out);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report("usage", kUsage, e.what());
    return kUsage;
  } catch (const ConfigError& e) {
    report("config", kConfig, e.what());
    return kConfig;
  } catch (const FingerprintMismatch& e) {
    report("fingerprint", kFingerprint, e.what());
    return kFingerprint;
  } catch (const FormatError& e) {
    const bool fp = e.kind() == "fingerprint absent";
    report(fp ? "fingerprint" : "format", fp ? kFingerprint : kFormat, e.what());
    return fp ? kFingerprint : kFormat;
  } catch (const std::exception& e) {
    report("failure", kFailure, e.what());
    return kFailure;
  }
}

}  // namespace mtv::cli
