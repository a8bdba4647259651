#pragma once

#include <random>

#include "mtv/eval.hpp"

namespace mtv::testing {

inline ModelConfig small_config(int L, int H, int d, int V = 32, int C = 32, int hidden = 0) {
  ModelConfig c;
  c.n_layers = L;
  c.n_heads = H;
  c.embed_dim = d;
  c.vocab_size = V;
  c.max_context = C;
  c.mlp_hidden = hidden > 0 ? hidden : 4 * d;
  return c;
}

/// Random model with O(scale) weights so attention is far from uniform.
template <class Scalar>
Model<Scalar> random_model(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Weights<Scalar> w = Weights<Scalar>::zeros(cfg);
  for_each_tensor(w, [&](const std::string& name, auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i)
      t.data()[i] = Scalar(name.ends_with("_gain") ? 1.0 + 0.1 * n(rng) : n(rng));
  });
  return Model<Scalar>(cfg, std::move(w));
}

inline ModelInput random_input(const ModelConfig& cfg, std::uint64_t seed, int len, bool soft = false) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, cfg.vocab_size - 1);
  ModelInput in;
  for (int i = 0; i < len; ++i) in.tokens.push_back(tok(rng));
  if (soft && len >= 3) {
    std::normal_distribution<double> n(0.0, 1.0);
    ModelInput::SoftSegment seg;
    seg.position = 1;
    seg.embeddings.resize(2, cfg.embed_dim);
    for (Eigen::Index i = 0; i < seg.embeddings.size(); ++i) seg.embeddings.data()[i] = n(rng);
    in.soft.push_back(std::move(seg));
  }
  return in;
}

template <class A, class B>
double max_abs_diff(const A& a, const B& b) {
  return (a.template cast<double>() - b.template cast<double>()).cwiseAbs().maxCoeff();
}

}  // namespace mtv::testing
