#include "megan/gating.hpp"

namespace megan {

void FfnBlock::validate() const {
  const Index d = w_gate.rows(), c = w_gate.cols();
  if (w_up.rows() != d || w_up.cols() != c)
    throw ShapeError("ffn: w_up " + shape_string(w_up.rows(), w_up.cols()) + " vs w_gate " +
                     shape_string(d, c));
  if (w_down.rows() != c || w_down.cols() != d)
    throw ShapeError("ffn: w_down " + shape_string(w_down.rows(), w_down.cols()) +
                     " vs expected " + shape_string(c, d));
  if (c <= d)
    throw ShapeError("ffn: intermediate size " + std::to_string(c) + " must exceed hidden size " +
                     std::to_string(d));
}

RowVector beta_swiglu(const RowVector& x, const BetaVector& beta, const FfnBlock& block) {
  block.validate();
  if (x.size() != block.hidden())
    throw ShapeError("beta_swiglu: input " + shape_string(1, x.size()) + " vs block hidden size " +
                     std::to_string(block.hidden()));
  if (beta.size() != block.intermediate())
    throw ShapeError("beta_swiglu: beta " + shape_string(1, beta.size()) +
                     " vs block intermediate size " + std::to_string(block.intermediate()));
  const RowVector gate = x * block.w_gate;
  const RowVector up = x * block.w_up;
  const RowVector slopes = beta.slopes();
  RowVector hidden(gate.size());
  for (Index c = 0; c < gate.size(); ++c) hidden(c) = swish(gate(c), slopes(c)) * up(c);
  return hidden * block.w_down;
}

Var beta_swiglu(Var x, Var slopes, Var w_gate, Var w_up, Var w_down) {
  if (slopes.rows() != x.rows() || slopes.cols() != w_gate.cols())
    throw ShapeError("beta_swiglu: slopes " + shape_string(slopes.rows(), slopes.cols()) +
                     " vs expected " + shape_string(x.rows(), w_gate.cols()));
  Var gate = matmul(x, w_gate);
  Var up = matmul(x, w_up);
  return matmul(mul(swish(gate, slopes), up), w_down);
}

}  // namespace megan
