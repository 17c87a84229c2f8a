#pragma once

// Dense row-major tensors and a tape-based reverse-mode differentiator.
//
// Every tensor is viewed as a matrix: the last extent is the column count and
// all leading extents fold into rows. Operations are free functions on `Var`
// handles; each one records a forward rule and a backward rule on the owning
// `Graph`, so the graph can be replayed (finite-difference checks) and
// differentiated.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "megan/error.hpp"

namespace megan {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using RowVector = RowVectorX<double>;

std::string shape_string(Index rows, Index cols);
std::string shape_string(std::span<const Index> shape);

template <typename Scalar>
class BasicTensor {
 public:
  using MatrixType = MatrixX<Scalar>;

  BasicTensor() = default;

  explicit BasicTensor(std::vector<Index> shape, bool requires_grad = false)
      : shape_(std::move(shape)) {
    if (shape_.empty()) throw ShapeError("tensor: empty shape");
    for (Index e : shape_)
      if (e <= 0) throw ShapeError("tensor: nonpositive extent in " + shape_string(shape_));
    value_ = MatrixType::Zero(fold_rows(shape_), shape_.back());
    set_requires_grad(requires_grad);
  }

  explicit BasicTensor(MatrixType value, bool requires_grad = false)
      : shape_{value.rows(), value.cols()}, value_(std::move(value)) {
    set_requires_grad(requires_grad);
  }

  const std::vector<Index>& shape() const { return shape_; }
  Index size() const { return value_.size(); }
  Index rows() const { return value_.rows(); }
  Index cols() const { return value_.cols(); }

  MatrixType& matrix() { return value_; }
  const MatrixType& matrix() const { return value_; }

  std::span<Scalar> data() { return {value_.data(), static_cast<std::size_t>(value_.size())}; }
  std::span<const Scalar> data() const {
    return {value_.data(), static_cast<std::size_t>(value_.size())};
  }

  bool requires_grad() const { return requires_grad_; }

  // Turning gradient tracking off releases the gradient buffer entirely.
  void set_requires_grad(bool on) {
    requires_grad_ = on;
    if (on) {
      if (!grad_) grad_ = MatrixType::Zero(value_.rows(), value_.cols());
    } else {
      grad_.reset();
    }
  }

  bool has_grad() const { return grad_.has_value(); }
  MatrixType& grad() {
    if (!grad_) throw ValueError("tensor: no gradient buffer (requires_grad is off)");
    return *grad_;
  }
  const MatrixType& grad() const {
    if (!grad_) throw ValueError("tensor: no gradient buffer (requires_grad is off)");
    return *grad_;
  }
  void zero_grad() {
    if (grad_) grad_->setZero();
  }

 private:
  static Index fold_rows(const std::vector<Index>& shape) {
    return std::accumulate(shape.begin(), shape.end() - 1, Index{1}, std::multiplies<>());
  }

  std::vector<Index> shape_;
  MatrixType value_;
  std::optional<MatrixType> grad_;
  bool requires_grad_ = false;
};

using Tensor = BasicTensor<double>;

class Graph;

/// Handle to a node of a `Graph`. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  Graph* graph() const { return graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double item() const;
  bool requires_grad() const;

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of the operations applied. Nodes are appended in evaluation
/// order, so the node list is already a topological order.
class Graph {
 public:
  using ForwardFn = std::function<void(const Graph&, Matrix& out)>;
  using BackwardFn = std::function<void(Graph&, const Matrix& grad_out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// A leaf that never receives a gradient.
  Var constant(Matrix value);
  /// A leaf that receives a gradient; `backward` adds it into `tensor.grad()`.
  Var parameter(Tensor& tensor);
  /// A leaf that receives a gradient held only by the graph.
  Var variable(Matrix value);

  /// Records an operation and evaluates it once.
  Var record(std::string_view op, std::initializer_list<Var> inputs, ForwardFn forward,
             BackwardFn backward);
  Var record(std::string_view op, std::span<const Var> inputs, ForwardFn forward,
             BackwardFn backward);

  const Matrix& value(Var v) const { return nodes_[v.id()].value; }
  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::string_view op_name(Var v) const { return nodes_[v.id()].op; }
  std::span<const std::size_t> inputs(Var v) const { return nodes_[v.id()].inputs; }

  /// Gradient of the last backward pass, or nullptr when none reached the node.
  const Matrix* grad(Var v) const;

  /// Adds `g` into the gradient of node `id`. No-op for nodes outside the gradient path.
  template <typename Expr>
  void accumulate(std::size_t id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad.noalias() = g;
    else
      n.grad.noalias() += g;
  }

  /// Reverse sweep from a 1x1 loss. Clears node gradients from any earlier sweep.
  void backward(Var loss);

  /// Overwrites a leaf value. Call `replay` to propagate.
  void set_leaf(Var leaf, Matrix value);
  /// Re-evaluates every recorded operation from the current leaf values.
  void replay();

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    ForwardFn forward;
    BackwardFn backward;
    Tensor* parameter = nullptr;
  };

  Var push_leaf(std::string op, Matrix value, bool requires_grad, Tensor* parameter);

  std::vector<Node> nodes_;
};

/// Row ranges of one packed sequence. Sequences of a batch are stacked row-wise.
struct Segment {
  Index offset = 0;
  Index length = 0;
};

// --- primitives -------------------------------------------------------------

Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// Adds a 1xN row to every row of a.
Var add_row(Var a, Var row);
/// Multiplies every row of a elementwise by a 1xN row.
Var mul_row(Var a, Var row);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);

Var exp(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
/// Elementwise x * sigmoid(slope * x); `slope` has the shape of `x`.
Var swish(Var x, Var slope);
/// Gradient passes only where the input lies inside [lo, hi].
Var clamp(Var a, double lo, double hi);

/// Row-wise softmax with max subtraction.
Var softmax_rows(Var a);

Var sum(Var a);
Var mean(Var a);
/// Column means over the rows of a (1xN).
Var mean_rows(Var a);
/// sqrt(mean(a^2)). The gradient at a == 0 is taken as 0.
Var rms(Var a);

/// Row lookup: out[i] = table[indices[i]].
Var gather_rows(Var table, std::span<const int> indices);
Var slice_rows(Var a, Index start, Index count);
Var concat_rows(std::span<const Var> parts);

/// RMS normalization of each row followed by a learned 1xN gain.
Var rms_norm(Var x, Var gain, double eps = 1e-6);

/// Multi-head causal self-attention applied independently within each segment.
/// q, k, v are packed (rows x D) and split into `heads` column groups.
Var causal_self_attention(Var q, Var k, Var v, std::span<const Segment> segments, int heads);

/// Mean over rows with mask != 0 of -log softmax(logits)[target].
Var masked_cross_entropy(Var logits, std::span<const int> targets,
                         std::span<const std::uint8_t> mask);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

}  // namespace megan
