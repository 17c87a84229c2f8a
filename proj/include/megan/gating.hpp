#pragma once

// Slope-parameterized sigmoid/Swish and the beta-SwiGLU feedforward block.
//
// The hypernetwork emits a raw beta in (-1, 1) per channel; the gate uses the
// effective slope 1 + beta, so beta = 0 is exactly SiLU.

#include <cmath>

#include "megan/numerics.hpp"

namespace megan {

inline constexpr double kBetaClamp = 1e-3;

template <typename Scalar>
Scalar sigmoid_beta(Scalar x, Scalar slope) {
  const Scalar z = slope * x;
  if (z >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (Scalar(1) + e);
}

/// x * sigmoid(slope * x)
template <typename Scalar>
Scalar swish(Scalar x, Scalar slope) {
  return x * sigmoid_beta(x, slope);
}

/// d swish / d slope = x^2 s (1 - s), bounded by x^2 / 4.
template <typename Scalar>
Scalar swish_grad_slope(Scalar x, Scalar slope) {
  const Scalar s = sigmoid_beta(x, slope);
  return x * x * s * (Scalar(1) - s);
}

/// d swish / d x = s + slope * x * s (1 - s)
template <typename Scalar>
Scalar swish_grad_x(Scalar x, Scalar slope) {
  const Scalar s = sigmoid_beta(x, slope);
  return s + slope * x * s * (Scalar(1) - s);
}

/// Raw per-channel beta, clamped into [-1 + 1e-3, 1 - 1e-3] on construction.
class BetaVector {
 public:
  BetaVector() = default;
  explicit BetaVector(RowVector raw)
      : values_(raw.cwiseMax(-1.0 + kBetaClamp).cwiseMin(1.0 - kBetaClamp)) {}

  static BetaVector zeros(Index channels) { return BetaVector(RowVector::Zero(channels)); }

  const RowVector& values() const { return values_; }
  Index size() const { return values_.size(); }
  RowVector slopes() const { return values_.array() + 1.0; }

 private:
  RowVector values_;
};

/// Bias-free SwiGLU weights in row-vector convention: y = (swish(x Wg) * (x Wu)) Wd.
struct FfnBlock {
  Matrix w_gate;  // D x C
  Matrix w_up;    // D x C
  Matrix w_down;  // C x D

  Index hidden() const { return w_gate.rows(); }
  Index intermediate() const { return w_gate.cols(); }

  /// Throws ShapeError unless the three matrices agree and C > D.
  void validate() const;
};

/// Swish_{1+beta}(x Wg) * (x Wu), projected by Wd. One input row of width D.
RowVector beta_swiglu(const RowVector& x, const BetaVector& beta, const FfnBlock& block);

/// Graph form over packed rows; `slopes` carries 1 + beta for every row (rows x C).
Var beta_swiglu(Var x, Var slopes, Var w_gate, Var w_up, Var w_down);

}  // namespace megan
