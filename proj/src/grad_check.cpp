#include "megan/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace megan {

namespace {

void check_epsilon(double epsilon) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3))
    throw ValueError("finite_difference_check: epsilon " + std::to_string(epsilon) +
                     " outside [1e-7, 1e-3]");
}

double finite_or_throw(double v) {
  if (!std::isfinite(v)) throw ValueError("finite_difference_check: function returned a non-finite value");
  return v;
}

}  // namespace

double finite_difference_check(const std::function<double(const Matrix&)>& f, const Matrix& params,
                               const Matrix& analytic, double epsilon) {
  check_epsilon(epsilon);
  if (analytic.rows() != params.rows() || analytic.cols() != params.cols())
    throw ShapeError("finite_difference_check: gradient shape " +
                     shape_string(analytic.rows(), analytic.cols()) + " vs params " +
                     shape_string(params.rows(), params.cols()));
  finite_or_throw(f(params));
  Matrix probe = params;
  double worst = 0.0;
  for (Index i = 0; i < probe.size(); ++i) {
    const double saved = probe.data()[i];
    probe.data()[i] = saved + epsilon;
    const double up = finite_or_throw(f(probe));
    probe.data()[i] = saved - epsilon;
    const double down = finite_or_throw(f(probe));
    probe.data()[i] = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double a = analytic.data()[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

double finite_difference_check(const GraphFunction& f, const Tensor& params, double epsilon) {
  check_epsilon(epsilon);
  Graph g;
  Var leaf = g.variable(params.matrix());
  Var loss = f(g, leaf);
  if (loss.value().size() != 1)
    throw ShapeError("finite_difference_check: loss must be scalar, got " +
                     shape_string(loss.rows(), loss.cols()));
  finite_or_throw(loss.item());
  g.backward(loss);
  const Matrix analytic =
      g.grad(leaf) ? *g.grad(leaf) : Matrix::Zero(params.rows(), params.cols());

  auto evaluate = [&](const Matrix& p) {
    g.set_leaf(leaf, p);
    g.replay();
    return loss.item();
  };
  const double err = finite_difference_check(evaluate, params.matrix(), analytic, epsilon);
  g.set_leaf(leaf, params.matrix());
  g.replay();
  return err;
}

}  // namespace megan
