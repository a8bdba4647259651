#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>

#include "mtv/error.hpp"

namespace mtv {

// Row-major everywhere: a row of a matrix is one position / one sample.
template <class Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <class Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <class Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x) {
  return x.allFinite();
}

template <class Derived>
void require_finite(const Eigen::DenseBase<Derived>& x, const char* what) {
  if (!x.allFinite()) throw NumericError(std::string("non-finite values in ") + what);
}

/// Numerically stable softmax (max-subtracted). Works on any vector expression.
template <class Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& v) {
  using S = typename Derived::Scalar;
  if (v.size() == 0) throw ShapeError("softmax of empty vector");
  require_finite(v, "softmax input");
  const S m = v.maxCoeff();
  Vector<S> e = (v.derived().reshaped().array() - m).exp().matrix();
  return e / e.sum();
}

template <class Derived>
Vector<typename Derived::Scalar> log_softmax(const Eigen::MatrixBase<Derived>& v) {
  using S = typename Derived::Scalar;
  if (v.size() == 0) throw ShapeError("log_softmax of empty vector");
  require_finite(v, "log_softmax input");
  const S m = v.maxCoeff();
  const S lse = m + std::log((v.derived().reshaped().array() - m).exp().sum());
  return (v.derived().reshaped().array() - lse).matrix();
}

/// Positive cross-entropy -log softmax(logits)[target].
template <class Derived>
typename Derived::Scalar cross_entropy(const Eigen::MatrixBase<Derived>& logits, Eigen::Index target) {
  using S = typename Derived::Scalar;
  if (target < 0 || target >= logits.size())
    throw ShapeError("cross_entropy target " + std::to_string(target) + " outside vocabulary of " +
                     std::to_string(logits.size()));
  require_finite(logits, "cross_entropy logits");
  const S m = logits.maxCoeff();
  const S lse = m + std::log((logits.derived().reshaped().array() - m).exp().sum());
  const S ce = lse - logits.derived().reshaped()(target);
  // Rounding can produce a tiny negative value when the target dominates.
  return ce < S(0) ? S(0) : ce;
}

/// gamma * (v - mean) / sqrt(var + eps) + beta with population variance.
template <class D1, class D2, class D3>
Vector<typename D1::Scalar> layer_norm(const Eigen::MatrixBase<D1>& v, const Eigen::MatrixBase<D2>& gamma,
                                       const Eigen::MatrixBase<D3>& beta, typename D1::Scalar eps) {
  using S = typename D1::Scalar;
  if (v.size() != gamma.size() || v.size() != beta.size())
    throw ShapeError("layer_norm length mismatch");
  if (v.size() == 0) throw ShapeError("layer_norm of empty vector");
  if (!(eps > S(0))) throw NumericError("layer_norm eps must be positive");
  const auto x = v.derived().reshaped().array();
  const S mean = x.mean();
  const S var = (x - mean).square().mean();
  const S rstd = S(1) / std::sqrt(var + eps);
  return (gamma.derived().reshaped().array() * (x - mean) * rstd + beta.derived().reshaped().array()).matrix();
}

/// Row-wise layer norm over a matrix; used by the model on whole sequences.
template <class Scalar>
void layer_norm_rows(const Matrix<Scalar>& x, const Vector<Scalar>& gamma, const Vector<Scalar>& beta,
                     Scalar eps, Matrix<Scalar>& out) {
  out.resize(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r).array();
    const Scalar mean = row.mean();
    const Scalar var = (row - mean).square().mean();
    const Scalar rstd = Scalar(1) / std::sqrt(var + eps);
    out.row(r) = ((row - mean) * rstd * gamma.transpose().array() + beta.transpose().array()).matrix();
  }
}

struct AdamHyper {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class Scalar>
struct AdamState {
  Matrix<Scalar> m;
  Matrix<Scalar> v;
  std::int64_t t = 0;
  AdamHyper hyper;

  AdamState() = default;
  AdamState(Eigen::Index rows, Eigen::Index cols, AdamHyper h)
      : m(Matrix<Scalar>::Zero(rows, cols)), v(Matrix<Scalar>::Zero(rows, cols)), hyper(h) {}
};

/// In-place Adam update with bias correction; `lr_scale` multiplies the step (warmup schedules).
template <class Scalar, class P, class G>
void adam_update(AdamState<Scalar>& state, Eigen::MatrixBase<P>& params, const Eigen::MatrixBase<G>& grad,
                 double lr_scale = 1.0) {
  if (params.rows() != grad.rows() || params.cols() != grad.cols() || state.m.rows() != params.rows() ||
      state.m.cols() != params.cols())
    throw ShapeError("adam_step shape mismatch");
  require_finite(grad, "adam_step gradient");
  const auto& h = state.hyper;
  state.t += 1;
  const Scalar b1 = Scalar(h.beta1), b2 = Scalar(h.beta2);
  state.m = b1 * state.m + (Scalar(1) - b1) * grad.derived();
  state.v = b2 * state.v + (Scalar(1) - b2) * grad.derived().cwiseAbs2();
  const Scalar c1 = Scalar(1) - Scalar(std::pow(h.beta1, double(state.t)));
  const Scalar c2 = Scalar(1) - Scalar(std::pow(h.beta2, double(state.t)));
  const Scalar lr = Scalar(h.lr * lr_scale);
  params.derived().array() -=
      lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + Scalar(h.eps));
}

template <class Scalar>
struct AdamResult {
  Matrix<Scalar> params;
  AdamState<Scalar> state;
};

/// Pure Adam step: the caller's state and parameters are left untouched.
template <class Scalar>
AdamResult<Scalar> adam_step(const AdamState<Scalar>& state, const Matrix<Scalar>& params,
                             const Matrix<Scalar>& grad) {
  AdamResult<Scalar> out{params, state};
  adam_update(out.state, out.params, grad);
  return out;
}

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double logit(double p) {
  if (!(p > 0.0 && p < 1.0)) throw NumericError("logit requires p in (0,1)");
  return std::log(p / (1.0 - p));
}

}  // namespace mtv
