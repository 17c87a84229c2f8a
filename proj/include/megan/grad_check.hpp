#pragma once

#include <functional>

#include "megan/numerics.hpp"

namespace megan {

/// Builds a scalar loss from a leaf holding the parameters.
using GraphFunction = std::function<Var(Graph&, Var params)>;

/// Largest |analytic - numeric| / max(1, |analytic|) over all components, where
/// the analytic gradient comes from `backward` and the numeric one from central
/// differences (f(p + eps) - f(p - eps)) / 2eps obtained by replaying the graph.
/// eps must lie in [1e-7, 1e-3]; a non-finite loss raises ValueError.
double finite_difference_check(const GraphFunction& f, const Tensor& params, double epsilon);

/// Same comparison for a plain scalar function against a supplied analytic gradient.
double finite_difference_check(const std::function<double(const Matrix&)>& f, const Matrix& params,
                               const Matrix& analytic, double epsilon);

}  // namespace megan
