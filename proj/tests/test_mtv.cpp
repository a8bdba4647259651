#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "reference_forward.hpp"
#include "rigged.hpp"

using namespace mtv;
using namespace mtv::testing;

namespace {

std::vector<Episode> bijection_episodes(int n, int T, std::uint64_t seed) {
  const auto spec = make_task(TaskKind::token_bijection, 0);
  std::vector<Episode> eps;
  for (int t = 0; t < T; ++t) eps.push_back(sample_episode(spec, n, seed + t));
  return eps;
}

/// Capture-then-average with the loop-level reference forward.
Matrix<double> oracle_mean(const Model<double>& m, const std::vector<Episode>& eps) {
  const auto& c = m.config();
  std::vector<std::vector<long double>> acc(c.n_locations(), std::vector<long double>(c.head_dim(), 0.0L));
  for (const auto& e : eps) {
    LMat heads;
    reference_forward(m, render_episode(e), std::nullopt, &heads);
    for (int r = 0; r < c.n_locations(); ++r)
      for (int k = 0; k < c.head_dim(); ++k) acc[r][k] += heads[r][k];
  }
  Matrix<double> out(c.n_locations(), c.head_dim());
  for (int r = 0; r < c.n_locations(); ++r)
    for (int k = 0; k < c.head_dim(); ++k) out(r, k) = double(acc[r][k] / eps.size());
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double sum_log_prob(const Matrix<double>& theta, const HeadMask& mask) { return bernoulli_log_prob(theta, mask); }

}  // namespace

TEST_SUITE("mtv") {

TEST_CASE("mean activations match capture-then-average") {
  const auto model = random_model<double>(small_config(2, 2, 16, 128, 64), 3);
  for (int T : {1, 3, 10}) {
    const auto eps = bijection_episodes(2, T, 100);
    const auto mean = compute_mean_activations(model, eps);
    CHECK(mean.T == T);
    CHECK(mean.N == 2);
    CHECK(mean.model_fingerprint == model.fingerprint());
    CHECK(max_abs_diff(mean.values, oracle_mean(model, eps)) < 1e-9);
  }
  SUBCASE("repeated episode equals its own captures") {
    const auto one = bijection_episodes(3, 1, 7);
    const std::vector<Episode> five(5, one.front());
    CHECK(max_abs_diff(compute_mean_activations(model, five).values, compute_mean_activations(model, one).values) <
          1e-14);
  }
  SUBCASE("32-bit model stays within 1e-6 of the oracle") {
    const auto eps = bijection_episodes(2, 10, 5);
    CHECK(max_abs_diff(compute_mean_activations(model.cast<float>(), eps).values, oracle_mean(model, eps)) < 1e-6);
  }
  CHECK_THROWS_AS(compute_mean_activations(model, std::vector<Episode>{}), ConfigError);
}

TEST_CASE("mean activation JSON round trip") {
  const auto model = random_model<double>(small_config(2, 2, 16, 128, 64), 3);
  const auto m = compute_mean_activations(model, bijection_episodes(1, 2, 1));
  const auto back = mean_activations_from_json(mean_activations_to_json(m));
  CHECK(back.task == m.task);
  CHECK(back.model_fingerprint == m.model_fingerprint);
  CHECK(max_abs_diff(back.values, m.values) < 1e-6 * (1 + m.values.cwiseAbs().maxCoeff()));
}

TEST_CASE("bernoulli score function") {
  Matrix<double> zero = Matrix<double>::Zero(1, 2);
  HeadMask mask(1, 2);
  mask << true, false;
  const auto g = bernoulli_logprob_grad(zero, mask);
  CHECK(g(0, 0) == 0.5);
  CHECK(g(0, 1) == -0.5);
  CHECK_THROWS_AS(bernoulli_logprob_grad(Matrix<double>::Zero(2, 2), mask), ShapeError);

  SUBCASE("matches central finite differences") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> n(0.0, 2.0);
    std::bernoulli_distribution coin(0.5);
    for (int trial = 0; trial < 20; ++trial) {
      Matrix<double> theta(3, 4);
      HeadMask a(3, 4);
      for (Eigen::Index i = 0; i < theta.size(); ++i) theta.data()[i] = n(rng), a.data()[i] = coin(rng);
      const auto analytic = bernoulli_logprob_grad(theta, a);
      const double h = 1e-6;
      for (Eigen::Index i = 0; i < theta.size(); ++i) {
        Matrix<double> up = theta, dn = theta;
        up.data()[i] += h;
        dn.data()[i] -= h;
        const double fd = (sum_log_prob(up, a) - sum_log_prob(dn, a)) / (2 * h);
        const double scale = std::max(std::abs(fd), std::abs(analytic.data()[i]));
        CHECK(std::abs(fd - analytic.data()[i]) <= 1e-4 * std::max(scale, 1e-3));
      }
    }
  }

  SUBCASE("sample mean shrinks like 1/sqrt(M)") {
    Matrix<double> theta(2, 3);
    theta << -2.2, 0.0, 1.0, 0.5, -0.3, 3.0;
    const Matrix<double> p = theta.unaryExpr([](double t) { return sigmoid(t); });
    for (int M : {100, 10000}) {
      std::mt19937_64 rng(M);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      Matrix<double> sum = Matrix<double>::Zero(2, 3);
      for (int s = 0; s < M; ++s) {
        HeadMask a(2, 3);
        for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = u(rng) < p.data()[i];
        sum += bernoulli_logprob_grad(theta, a);
      }
      CHECK((sum / M).cwiseAbs().maxCoeff() <= 3.0 / std::sqrt(double(M)));
    }
  }
}

TEST_CASE("mask helpers") {
  const std::vector<HeadLocation> locs{{0, 1}, {2, 0}};
  const auto m = mask_from_locations(3, 2, locs);
  CHECK(m.count() == 2);
  CHECK(locations_of(m) == locs);
  CHECK_THROWS_AS(mask_from_locations(3, 2, {{3, 0}}), ShapeError);
}

TEST_CASE("S = 0 returns the initial policy with an empty selection") {
  auto rig = two_head_rig();
  ExtractionConfig cfg;
  cfg.steps = 0;
  const auto r = mtv_extract(rig.model, rig.mean, {}, cfg, 1);
  CHECK(r.artifact.locations.empty());
  CHECK(r.trace.empty());
  CHECK((r.policy.probabilities().array() < 0.11).all());
  CHECK((r.policy.probabilities().array() > 0.09).all());
}

TEST_CASE("rigged two-head model: search keeps the helpful head and drops the harmful one") {
  auto rig = two_head_rig();
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto r = mtv_extract(rig.model, rig.mean, rig.alignment, ExtractionConfig{}, seed);
    const auto p = r.policy.probabilities();
    CHECK(p(0, 0) > 0.9);
    CHECK(p(0, 1) < 0.1);
    CHECK(r.artifact.locations == std::vector<HeadLocation>{{0, 0}});
    // Best-so-far reward never decreases.
    for (std::size_t s = 1; s < r.trace.size(); ++s)
      CHECK(r.trace[s].best_mean_reward >= r.trace[s - 1].best_mean_reward);
  }
}

TEST_CASE("extraction is deterministic and jobs-invariant") {
  auto rig = two_head_rig();
  ExtractionConfig cfg;
  cfg.steps = 10;
  const auto a = mtv_extract(rig.model, rig.mean, rig.alignment, cfg, 9);
  const auto b = mtv_extract(rig.model, rig.mean, rig.alignment, cfg, 9, ExecOptions{4});
  CHECK(a.policy.theta == b.policy.theta);
  CHECK(a.artifact == b.artifact);
}

TEST_CASE("constant reward leaves theta near its start") {
  // With the output projection zeroed, no patch can change the logits.
  const auto cfg = small_config(2, 2, 8, 16, 16);
  auto base = random_model<double>(cfg, 4);
  auto w = base.weights();
  for (auto& l : w.layers) l.wo.setZero();
  const Model<double> model(cfg, std::move(w));
  const auto mean = random_mean(model, 2, 3.0);
  std::vector<AlignmentExample> align;
  for (int i = 0; i < 10; ++i) align.push_back({random_input(cfg, i, 5), {3}});
  ExtractionConfig ec;
  ec.steps = 100;
  double drift = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ExtractionConfig zero = ec;
    zero.steps = 0;
    const auto start = mtv_extract(model, mean, align, zero, seed).policy.theta;
    const auto end = mtv_extract(model, mean, align, ec, seed).policy.theta;
    drift += (end - start).cwiseAbs().maxCoeff() / 5;
  }
  CHECK(drift <= 10 * ec.adam.lr);
}

TEST_CASE("final selection modes and config validation") {
  CHECK(final_selection_from_string(to_string(FinalSelection::sample)) == FinalSelection::sample);
  CHECK(loss_mode_from_string(to_string(LossMode::full_sequence)) == LossMode::full_sequence);
  CHECK_THROWS_AS(final_selection_from_string("vote"), ConfigError);
  ExtractionConfig bad;
  bad.samples_per_step = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(extraction_config_from_json(extraction_config_to_json(ExtractionConfig{})).steps == 50);
  CHECK_THROWS_AS(extraction_config_from_json(R"({"stepz": 3})"), ConfigError);
  CHECK(config_hash(ExtractionConfig{}) != config_hash(bad));

  auto rig = two_head_rig();
  ExtractionConfig sample;
  sample.final_selection = FinalSelection::sample;
  const auto r = mtv_extract(rig.model, rig.mean, rig.alignment, sample, 3);
  CHECK(std::count(r.artifact.locations.begin(), r.artifact.locations.end(), HeadLocation{0, 1}) == 0);
}

TEST_CASE("fingerprint mismatch is rejected") {
  auto rig = two_head_rig();
  auto mean = rig.mean;
  mean.model_fingerprint = "L1H2d4V8C16-00000000";
  CHECK_THROWS_AS(mtv_extract(rig.model, mean, rig.alignment, ExtractionConfig{}, 1), FingerprintMismatch);
}

TEST_CASE("apply_mtv") {
  const auto cfg = small_config(2, 2, 16, 128, 64);
  const auto model = random_model<double>(cfg, 8);
  const auto spec = make_task(TaskKind::token_bijection, 0);
  const auto mean = compute_mean_activations(model, bijection_episodes(2, 4, 1));

  SUBCASE("empty selection equals zero-shot generation") {
    const auto empty = make_artifact(mean, {});
    for (std::uint64_t s = 0; s < 5; ++s) {
      const auto e = sample_episode(spec, 0, s);
      CHECK(apply_mtv(model, empty, e) == generate(model, render_episode(e), int(e.gold.size())));
    }
  }
  SUBCASE("equals patched generation on the rendered prompt") {
    const auto art = make_artifact(mean, {{0, 1}, {1, 0}});
    const auto patch = patch_from_artifact<double>(art, PatchScope::every_step);
    for (int shots : {0, 1}) {
      const auto e = sample_episode(spec, shots, 3);
      const auto prompt = render_episode(e);
      CHECK(prompt.size() == rendered_length(e));
      CHECK(apply_mtv(model, art, e) == generate(model, prompt, 1, &patch));
      CHECK(apply_mtv(model, art, prompt, 1) == generate(model, prompt, 1, &patch));
    }
  }
  SUBCASE("artifact values are 32-bit representable") {
    const auto art = make_artifact(mean, {{1, 1}});
    const double v = art.values(0, 0);
    CHECK(double(float(v)) == v);
  }
  SUBCASE("model with a different head count is rejected") {
    const auto art = make_artifact(mean, {{0, 0}});
    const auto other = random_model<double>(small_config(2, 4, 16, 128, 64), 8);
    CHECK_THROWS_AS(apply_mtv(other, art, sample_episode(spec, 0, 1)), FingerprintMismatch);
  }
}

TEST_CASE("artifact persistence") {
  const auto model = random_model<double>(small_config(2, 2, 16, 128, 64), 8);
  auto art = make_artifact(compute_mean_activations(model, bijection_episodes(2, 3, 1)), {{1, 1}, {0, 0}});
  art.seeds = {1, 2};
  art.config_hash = config_hash(ExtractionConfig{});
  CHECK(art.locations == std::vector<HeadLocation>{{0, 0}, {1, 1}});

  const auto dir = std::filesystem::temp_directory_path() / "mtv_test_artifact";
  std::filesystem::create_directories(dir);
  save_artifact(art, dir / "a.json");
  const auto back = load_artifact(dir / "a.json");
  CHECK(back == art);
  save_artifact(back, dir / "b.json");
  CHECK(slurp(dir / "a.json") == slurp(dir / "b.json"));

  SUBCASE("values/locations length mismatch") {
    auto j = nlohmann::json::parse(artifact_to_json(art));
    j["values"].erase(0);
    try {
      artifact_from_json(j.dump());
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("values/locations length mismatch") != std::string::npos);
    }
  }
  SUBCASE("version and fingerprint") {
    auto j = nlohmann::json::parse(artifact_to_json(art));
    j["version"] = 99;
    CHECK_THROWS_AS(artifact_from_json(j.dump()), FormatError);
    j = nlohmann::json::parse(artifact_to_json(art));
    j.erase("model_fingerprint");
    CHECK_THROWS_AS(artifact_from_json(j.dump()), FormatError);
    CHECK_THROWS_AS(artifact_from_json("{"), FormatError);
  }
}

}
