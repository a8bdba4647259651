#include <cmath>
#include <random>

#include "doctest.h"
#include "helpers.hpp"

using namespace mtv;

TEST_SUITE("numerics") {

TEST_CASE("softmax of zeros is uniform") {
  Vector<double> v = Vector<double>::Zero(3);
  const auto p = softmax(v);
  for (int i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));
}

TEST_CASE("softmax is shift invariant up to 1e4") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 3);
  for (int trial = 0; trial < 50; ++trial) {
    Vector<double> v(7);
    for (auto& x : v) x = n(rng);
    for (double c : {-1e4, -17.5, 0.25, 1e4}) {
      const Vector<double> shifted = (v.array() + c).matrix();
      CHECK((softmax(v) - softmax(shifted)).cwiseAbs().maxCoeff() < 1e-9);
    }
    CHECK(std::abs(softmax(v).sum() - 1.0) < 1e-9);
    const Vector<float> vf = v.cast<float>();
    CHECK(std::abs(double(softmax(vf).sum()) - 1.0) < 1e-6);
  }
}

TEST_CASE("softmax [1,2,3] against long double evaluation") {
  Vector<double> v(3);
  v << 1, 2, 3;
  const auto p = softmax(v);
  long double z = 0;
  for (int i = 1; i <= 3; ++i) z += std::exp((long double)(i - 3));
  for (int i = 0; i < 3; ++i) CHECK(std::abs(p[i] - double(std::exp((long double)(i + 1 - 3)) / z)) < 1e-15);
}

TEST_CASE("softmax rejects non-finite input") {
  Vector<double> v(2);
  v << 1, std::nan("");
  CHECK_THROWS_AS(softmax(v), NumericError);
  v << 1, INFINITY;
  CHECK_THROWS_AS(softmax(v), NumericError);
}

TEST_CASE("layer_norm") {
  const Vector<double> ones = Vector<double>::Ones(5), zeros = Vector<double>::Zero(5);
  SUBCASE("constant input maps to zero") {
    const Vector<double> c = Vector<double>::Constant(5, 3.7);
    CHECK(layer_norm(c, ones, zeros, 1e-5).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("zero gain returns beta") {
    Vector<double> v(5), b(5);
    v << 1, -2, 3, 0.5, 9;
    b << 0.1, 0.2, 0.3, 0.4, 0.5;
    CHECK(layer_norm(v, zeros, b, 1e-5) == b);
  }
  SUBCASE("two-pass oracle") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> n(1.0, 2.0);
    for (int trial = 0; trial < 20; ++trial) {
      Vector<double> v(16), g(16), b(16);
      for (int i = 0; i < 16; ++i) v[i] = n(rng), g[i] = n(rng), b[i] = n(rng);
      long double mean = 0, var = 0;
      for (double x : v) mean += x;
      mean /= 16;
      for (double x : v) var += (x - mean) * (x - mean);
      var /= 16;
      const auto y = layer_norm(v, g, b, 1e-5);
      for (int i = 0; i < 16; ++i) {
        const double ref = double(g[i] * (v[i] - mean) / std::sqrt(var + 1e-5L) + b[i]);
        CHECK(std::abs(y[i] - ref) < 1e-12);
      }
    }
  }
  SUBCASE("length mismatch") {
    CHECK_THROWS_AS(layer_norm(Vector<double>::Ones(4), ones, zeros, 1e-5), ShapeError);
  }
}

TEST_CASE("cross_entropy") {
  SUBCASE("confident target is ~0") {
    Vector<double> l = Vector<double>::Constant(10, -30);
    l[4] = 30;
    CHECK(cross_entropy(l, 4) < 1e-9);
  }
  SUBCASE("uniform logits give ln V") {
    CHECK(cross_entropy(Vector<double>::Zero(128), 7) == doctest::Approx(std::log(128.0)).epsilon(1e-14));
  }
  SUBCASE("log-sum-exp oracle and log_softmax identity") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0, 4);
    for (int trial = 0; trial < 50; ++trial) {
      Vector<double> l(20);
      for (auto& x : l) x = n(rng);
      const int t = trial % 20;
      long double s = 0;
      for (double x : l) s += std::exp((long double)x);
      CHECK(std::abs(cross_entropy(l, t) - double(std::log(s) - l[t])) < 1e-12);
      CHECK(std::abs(cross_entropy(l, t) + log_softmax(l)[t]) < 1e-9);
      CHECK(cross_entropy(l, t) >= 0.0);
    }
  }
  SUBCASE("target out of range") {
    CHECK_THROWS_AS(cross_entropy(Vector<double>::Zero(3), 3), ShapeError);
    CHECK_THROWS_AS(cross_entropy(Vector<double>::Zero(3), -1), ShapeError);
  }
}

TEST_CASE("adam_step") {
  const AdamHyper h{0.01, 0.9, 0.999, 1e-8};
  SUBCASE("zero gradient leaves parameters and counts the step") {
    Matrix<double> p(2, 2);
    p << 1, 2, 3, 4;
    const auto r = adam_step<double>(AdamState<double>(2, 2, h), p, Matrix<double>::Zero(2, 2));
    CHECK(r.params == p);
    CHECK(r.state.t == 1);
  }
  SUBCASE("scalar hand trace, two steps of constant gradient") {
    const long double g = -0.37L, lr = 0.01L, b1 = 0.9L, b2 = 0.999L, eps = 1e-8L;
    long double m = 0, v = 0, x = 1.5L;
    Matrix<double> p(1, 1), grad(1, 1);
    p(0, 0) = 1.5;
    grad(0, 0) = double(g);
    AdamState<double> st(1, 1, h);
    for (int t = 1; t <= 2; ++t) {
      m = b1 * m + (1 - b1) * g;
      v = b2 * v + (1 - b2) * g * g;
      const long double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
      x -= lr * mh / (std::sqrt(vh) + eps);
      auto r = adam_step(st, p, grad);
      CHECK(std::abs(r.params(0, 0) - double(x)) < 1e-15);
      st = r.state;
      p = r.params;
    }
    // Each step moves by lr * g / (|g| + eps) against the gradient.
    CHECK(std::abs((double(x) - 1.5) - 0.02) < 1e-9);
  }
  SUBCASE("deterministic and pure") {
    Matrix<double> p = Matrix<double>::Random(3, 4), g = Matrix<double>::Random(3, 4);
    const AdamState<double> st(3, 4, h);
    const auto a = adam_step(st, p, g), b = adam_step(st, p, g);
    CHECK(a.params == b.params);
    CHECK(a.state.m == b.state.m);
    CHECK(st.t == 0);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(adam_step<double>(AdamState<double>(2, 2, h), Matrix<double>::Zero(2, 2), Matrix<double>::Zero(2, 3)),
                    ShapeError);
    Matrix<double> bad = Matrix<double>::Zero(2, 2);
    bad(0, 1) = NAN;
    CHECK_THROWS_AS(adam_step<double>(AdamState<double>(2, 2, h), Matrix<double>::Zero(2, 2), bad), NumericError);
  }
}

TEST_CASE("sigmoid and logit invert each other") {
  for (double p : {1e-6, 0.1, 0.5, 0.9, 1 - 1e-6}) CHECK(sigmoid(logit(p)) == doctest::Approx(p).epsilon(1e-12));
  CHECK(sigmoid(-800) >= 0.0);
  CHECK(sigmoid(800) == 1.0);
  CHECK_THROWS_AS(logit(0.0), NumericError);
}

}
