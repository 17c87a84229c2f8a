#include "megan/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace megan {

std::string shape_string(Index rows, Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

std::string shape_string(std::span<const Index> shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

const Matrix& Var::value() const { return graph_->value(*this); }

double Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeError("item: expected a 1x1 value, got " + shape_string(v.rows(), v.cols()));
  return v(0, 0);
}

bool Var::requires_grad() const { return graph_->requires_grad(*this); }

Var Graph::push_leaf(std::string op, Matrix value, bool requires_grad, Tensor* parameter) {
  Node n;
  n.op = std::move(op);
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.parameter = parameter;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::constant(Matrix value) { return push_leaf("constant", std::move(value), false, nullptr); }

Var Graph::parameter(Tensor& tensor) {
  if (!tensor.requires_grad()) throw ValueError("parameter: tensor does not require grad");
  return push_leaf("parameter", tensor.matrix(), true, &tensor);
}

Var Graph::variable(Matrix value) { return push_leaf("variable", std::move(value), true, nullptr); }

Var Graph::record(std::string_view op, std::initializer_list<Var> inputs, ForwardFn forward,
                  BackwardFn backward) {
  return record(op, std::span<const Var>(inputs.begin(), inputs.size()), std::move(forward),
                std::move(backward));
}

Var Graph::record(std::string_view op, std::span<const Var> inputs, ForwardFn forward,
                  BackwardFn backward) {
  Node n;
  n.op = std::string(op);
  for (Var v : inputs) {
    if (v.graph() != this) throw ValueError(std::string(op) + ": input belongs to another graph");
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
  }
  n.forward = std::move(forward);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  Node& added = nodes_.back();
  added.forward(*this, added.value);
  return Var(this, nodes_.size() - 1);
}

const Matrix* Graph::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  return n.grad.size() == 0 ? nullptr : &n.grad;
}

void Graph::backward(Var loss) {
  if (loss.graph() != this) throw ValueError("backward: loss belongs to another graph");
  const Matrix& lv = value(loss);
  if (lv.size() != 1)
    throw ShapeError("backward: loss must be scalar, got " + shape_string(lv.rows(), lv.cols()));
  for (Node& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[loss.id()].requires_grad) return;
  nodes_[loss.id()].grad = Matrix::Ones(1, 1);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.parameter) n.parameter->grad() += n.grad;
  }
}

void Graph::set_leaf(Var leaf, Matrix value) {
  Node& n = nodes_[leaf.id()];
  if (n.forward) throw ValueError("set_leaf: node is not a leaf");
  if (value.rows() != n.value.rows() || value.cols() != n.value.cols())
    throw ShapeError("set_leaf: shape mismatch " + shape_string(n.value.rows(), n.value.cols()) +
                     " vs " + shape_string(value.rows(), value.cols()));
  n.value = std::move(value);
}

void Graph::replay() {
  for (Node& n : nodes_)
    if (n.forward) n.forward(*this, n.value);
}

namespace {

void require_same_shape(std::string_view op, Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.rows(), a.cols()) +
                     " vs " + shape_string(b.rows(), b.cols()));
}

void require_same_graph(std::string_view op, Var a, Var b) {
  if (a.graph() != b.graph()) throw ValueError(std::string(op) + ": inputs belong to different graphs");
}

// Elementwise op with a derivative expressed through the input and output values.
template <typename F, typename DF>
Var unary(std::string_view op, Var a, F f, DF df) {
  Graph& g = *a.graph();
  const std::size_t ia = a.id();
  const std::size_t self = g.size();
  return g.record(
      op, {a}, [ia, f](const Graph& gr, Matrix& o) { o = gr.value(ia).unaryExpr(f); },
      [ia, df, self](Graph& gr, const Matrix& go) {
        gr.accumulate(ia, go.cwiseProduct(df(gr.value(ia), gr.value(self))));
      });
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_graph("matmul", a, b);
  if (a.cols() != b.rows())
    throw ShapeError("matmul: shape mismatch " + shape_string(a.rows(), a.cols()) + " vs " +
                     shape_string(b.rows(), b.cols()));
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph()->record(
      "matmul", {a, b},
      [ia, ib](const Graph& g, Matrix& o) { o.noalias() = g.value(ia) * g.value(ib); },
      [ia, ib](Graph& g, const Matrix& go) {
        g.accumulate(ia, go * g.value(ib).transpose());
        g.accumulate(ib, g.value(ia).transpose() * go);
      });
}

Var matmul_nt(Var a, Var b) {
  require_same_graph("matmul_nt", a, b);
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: shape mismatch " + shape_string(a.rows(), a.cols()) + " vs " +
                     shape_string(b.rows(), b.cols()));
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph()->record(
      "matmul_nt", {a, b},
      [ia, ib](const Graph& g, Matrix& o) { o.noalias() = g.value(ia) * g.value(ib).transpose(); },
      [ia, ib](Graph& g, const Matrix& go) {
        g.accumulate(ia, go * g.value(ib));
        g.accumulate(ib, go.transpose() * g.value(ia));
      });
}

Var transpose(Var a) {
  const std::size_t ia = a.id();
  return a.graph()->record(
      "transpose", {a}, [ia](const Graph& g, Matrix& o) { o = g.value(ia).transpose(); },
      [ia](Graph& g, const Matrix& go) { g.accumulate(ia, go.transpose()); });
}

Var add(Var a, Var b) {
  require_same_graph("add", a, b);
  require_same_shape("add", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph()->record(
      "add", {a, b}, [ia, ib](const Graph& g, Matrix& o) { o = g.value(ia) + g.value(ib); },
      [ia, ib](Graph& g, const Matrix& go) {
        g.accumulate(ia, go);
        g.accumulate(ib, go);
      });
}

Var sub(Var a, Var b) {
  require_same_graph("sub", a, b);
  require_same_shape("sub", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph()->record(
      "sub", {a, b}, [ia, ib](const Graph& g, Matrix& o) { o = g.value(ia) - g.value(ib); },
      [ia, ib](Graph& g, const Matrix& go) {
        g.accumulate(ia, go);
        g.accumulate(ib, -go);
      });
}

Var mul(Var a, Var b) {
  require_same_graph("mul", a, b);
  require_same_shape("mul", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph()->record(
      "mul", {a, b},
      [ia, ib](const Graph& g, Matrix& o) { o = g.value(ia).cwiseProduct(g.value(ib)); },
      [ia, ib](Graph& g, const Matrix& go) {
        g.accumulate(ia, go.cwiseProduct(g.value(ib)));
        g.accumulate(ib, go.cwiseProduct(g.value(ia)));
      });
}

Var add_row(Var a, Var row) {
  require_same_graph("add_row", a, row);
  if (row.rows() != 1 || row.cols() != a.cols())
    throw ShapeError("add_row: shape mismatch " + shape_string(a.rows(), a.cols()) + " vs " +
                     shape_string(row.rows(), row.cols()));
  const std::size_t ia = a.id(), ir = row.id();
  return a.graph()->record(
      "add_row", {a, row},
      [ia, ir](const Graph& g, Matrix& o) {
        o = g.value(ia).rowwise() + g.value(ir).row(0);
      },
      [ia, ir](Graph& g, const Matrix& go) {
        g.accumulate(ia, go);
        g.accumulate(ir, go.colwise().sum());
      });
}

Var mul_row(Var a, Var row) {
  require_same_graph("mul_row", a, row);
  if (row.rows() != 1 || row.cols() != a.cols())
    throw ShapeError("mul_row: shape mismatch " + shape_string(a.rows(), a.cols()) + " vs " +
                     shape_string(row.rows(), row.cols()));
  const std::size_t ia = a.id(), ir = row.id();
  return a.graph()->record(
      "mul_row", {a, row},
      [ia, ir](const Graph& g, Matrix& o) {
        o = g.value(ia).array().rowwise() * g.value(ir).row(0).array();
      },
      [ia, ir](Graph& g, const Matrix& go) {
        g.accumulate(ia, (go.array().rowwise() * g.value(ir).row(0).array()).matrix());
        g.accumulate(ir, go.cwiseProduct(g.value(ia)).colwise().sum());
      });
}

Var scale(Var a, double s) {
  const std::size_t ia = a.id();
  return a.graph()->record(
      "scale", {a}, [ia, s](const Graph& g, Matrix& o) { o = s * g.value(ia); },
      [ia, s](Graph& g, const Matrix& go) { g.accumulate(ia, s * go); });
}

Var add_scalar(Var a, double s) {
  const std::size_t ia = a.id();
  return a.graph()->record(
      "add_scalar", {a}, [ia, s](const Graph& g, Matrix& o) { o = g.value(ia).array() + s; },
      [ia](Graph& g, const Matrix& go) { g.accumulate(ia, go); });
}

Var exp(Var a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); },
      [](const Matrix&, const Matrix& y) { return y; });
}

Var tanh(Var a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](const Matrix&, const Matrix& y) { return Matrix((1.0 - y.array().square()).matrix()); });
}

namespace {
double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}
}  // namespace

Var sigmoid(Var a) {
  return unary("sigmoid", a, stable_sigmoid, [](const Matrix&, const Matrix& y) {
    return Matrix(y.array() * (1.0 - y.array()));
  });
}

Var swish(Var x, Var slope) {
  require_same_graph("swish", x, slope);
  require_same_shape("swish", x, slope);
  const std::size_t ix = x.id(), is = slope.id();
  return x.graph()->record(
      "swish", {x, slope},
      [ix, is](const Graph& g, Matrix& o) {
        const Matrix& xv = g.value(ix);
        const Matrix& sv = g.value(is);
        o.resize(xv.rows(), xv.cols());
        for (Index i = 0; i < xv.size(); ++i)
          o.data()[i] = xv.data()[i] * stable_sigmoid(sv.data()[i] * xv.data()[i]);
      },
      [ix, is](Graph& g, const Matrix& go) {
        const Matrix& xv = g.value(ix);
        const Matrix& sv = g.value(is);
        const bool need_x = g.requires_grad(ix), need_s = g.requires_grad(is);
        Matrix dx(xv.rows(), xv.cols()), ds(xv.rows(), xv.cols());
        for (Index i = 0; i < xv.size(); ++i) {
          const double xi = xv.data()[i], si = sv.data()[i];
          const double sg = stable_sigmoid(si * xi);
          const double curv = sg * (1.0 - sg);
          dx.data()[i] = go.data()[i] * (sg + si * xi * curv);
          ds.data()[i] = go.data()[i] * (xi * xi * curv);
        }
        if (need_x) g.accumulate(ix, dx);
        if (need_s) g.accumulate(is, ds);
      });
}

Var clamp(Var a, double lo, double hi) {
  if (!(lo <= hi)) throw ValueError("clamp: lo > hi");
  const std::size_t ia = a.id();
  return a.graph()->record(
      "clamp", {a},
      [ia, lo, hi](const Graph& g, Matrix& o) { o = g.value(ia).cwiseMax(lo).cwiseMin(hi); },
      [ia, lo, hi](Graph& g, const Matrix& go) {
        const Matrix& x = g.value(ia);
        g.accumulate(ia, ((x.array() >= lo) && (x.array() <= hi)).select(go, 0.0).matrix());
      });
}

Var softmax_rows(Var a) {
  Graph& g = *a.graph();
  const std::size_t ia = a.id();
  const std::size_t self = g.size();
  return g.record(
      "softmax_rows", {a},
      [ia](const Graph& gr, Matrix& o) {
        const Matrix& x = gr.value(ia);
        o = (x.colwise() - x.rowwise().maxCoeff()).array().exp();
        o.array().colwise() /= o.rowwise().sum().array();
      },
      [ia, self](Graph& gr, const Matrix& go) {
        const Matrix& y = gr.value(self);
        const Eigen::VectorXd dots = go.cwiseProduct(y).rowwise().sum();
        gr.accumulate(ia, (y.array() * (go.colwise() - dots).array()).matrix());
      });
}

Var sum(Var a) {
  const std::size_t ia = a.id();
  return a.graph()->record(
      "sum", {a}, [ia](const Graph& g, Matrix& o) { o = Matrix::Constant(1, 1, g.value(ia).sum()); },
      [ia](Graph& g, const Matrix& go) {
        const Matrix& x = g.value(ia);
        g.accumulate(ia, Matrix::Constant(x.rows(), x.cols(), go(0, 0)));
      });
}

Var mean(Var a) {
  const std::size_t ia = a.id();
  return a.graph()->record(
      "mean", {a},
      [ia](const Graph& g, Matrix& o) { o = Matrix::Constant(1, 1, g.value(ia).mean()); },
      [ia](Graph& g, const Matrix& go) {
        const Matrix& x = g.value(ia);
        g.accumulate(ia, Matrix::Constant(x.rows(), x.cols(), go(0, 0) / double(x.size())));
      });
}

Var mean_rows(Var a) {
  const std::size_t ia = a.id();
  return a.graph()->record(
      "mean_rows", {a},
      [ia](const Graph& g, Matrix& o) { o = g.value(ia).colwise().mean(); },
      [ia](Graph& g, const Matrix& go) {
        const Index n = g.value(ia).rows();
        g.accumulate(ia, go.replicate(n, 1) / double(n));
      });
}

Var rms(Var a) {
  const std::size_t ia = a.id();
  return a.graph()->record(
      "rms", {a},
      [ia](const Graph& g, Matrix& o) {
        const Matrix& x = g.value(ia);
        o = Matrix::Constant(1, 1, std::sqrt(x.squaredNorm() / double(x.size())));
      },
      [ia](Graph& g, const Matrix& go) {
        const Matrix& x = g.value(ia);
        const double n = double(x.size());
        const double r = std::sqrt(x.squaredNorm() / n);
        if (r == 0.0) {
          g.accumulate(ia, Matrix::Zero(x.rows(), x.cols()));
          return;
        }
        g.accumulate(ia, (go(0, 0) / (n * r)) * x);
      });
}

Var gather_rows(Var table, std::span<const int> indices) {
  const Index n = table.rows();
  for (int i : indices)
    if (i < 0 || i >= n)
      throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range for table " +
                       shape_string(table.rows(), table.cols()));
  const std::size_t it = table.id();
  std::vector<int> idx(indices.begin(), indices.end());
  return table.graph()->record(
      "gather_rows", {table},
      [it, idx](const Graph& g, Matrix& o) {
        const Matrix& t = g.value(it);
        o.resize(Index(idx.size()), t.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) o.row(Index(r)) = t.row(idx[r]);
      },
      [it, idx](Graph& g, const Matrix& go) {
        const Matrix& t = g.value(it);
        Matrix gt = Matrix::Zero(t.rows(), t.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) gt.row(idx[r]) += go.row(Index(r));
        g.accumulate(it, gt);
      });
}

Var slice_rows(Var a, Index start, Index count) {
  if (start < 0 || count <= 0 || start + count > a.rows())
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of range for " +
                     shape_string(a.rows(), a.cols()));
  const std::size_t ia = a.id();
  return a.graph()->record(
      "slice_rows", {a},
      [ia, start, count](const Graph& g, Matrix& o) { o = g.value(ia).middleRows(start, count); },
      [ia, start, count](Graph& g, const Matrix& go) {
        const Matrix& x = g.value(ia);
        Matrix gx = Matrix::Zero(x.rows(), x.cols());
        gx.middleRows(start, count) = go;
        g.accumulate(ia, gx);
      });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Graph& g = *parts.front().graph();
  std::vector<std::size_t> ids;
  for (Var p : parts) {
    require_same_graph("concat_rows", parts.front(), p);
    if (p.cols() != parts.front().cols())
      throw ShapeError("concat_rows: shape mismatch " +
                       shape_string(parts.front().rows(), parts.front().cols()) + " vs " +
                       shape_string(p.rows(), p.cols()));
    ids.push_back(p.id());
  }
  return g.record(
      "concat_rows", parts,
      [ids](const Graph& gr, Matrix& o) {
        Index rows = 0;
        for (auto id : ids) rows += gr.value(id).rows();
        o.resize(rows, gr.value(ids.front()).cols());
        Index r = 0;
        for (auto id : ids) {
          const Matrix& p = gr.value(id);
          o.middleRows(r, p.rows()) = p;
          r += p.rows();
        }
      },
      [ids](Graph& gr, const Matrix& go) {
        Index r = 0;
        for (auto id : ids) {
          const Index n = gr.value(id).rows();
          gr.accumulate(id, go.middleRows(r, n));
          r += n;
        }
      });
}

Var rms_norm(Var x, Var gain, double eps) {
  require_same_graph("rms_norm", x, gain);
  if (gain.rows() != 1 || gain.cols() != x.cols())
    throw ShapeError("rms_norm: shape mismatch " + shape_string(x.rows(), x.cols()) + " vs " +
                     shape_string(gain.rows(), gain.cols()));
  const std::size_t ix = x.id(), ig = gain.id();
  return x.graph()->record(
      "rms_norm", {x, gain},
      [ix, ig, eps](const Graph& g, Matrix& o) {
        const Matrix& xv = g.value(ix);
        const Eigen::ArrayXd inv =
            ((xv.array().square().rowwise().sum() / double(xv.cols())) + eps).rsqrt();
        o = (xv.array().colwise() * inv).rowwise() * g.value(ig).row(0).array();
      },
      [ix, ig, eps](Graph& g, const Matrix& go) {
        const Matrix& xv = g.value(ix);
        const Matrix& gv = g.value(ig);
        const double d = double(xv.cols());
        const Eigen::ArrayXd inv = ((xv.array().square().rowwise().sum() / d) + eps).rsqrt();
        const Matrix xhat = (xv.array().colwise() * inv).matrix();
        if (g.requires_grad(ig)) g.accumulate(ig, go.cwiseProduct(xhat).colwise().sum());
        if (g.requires_grad(ix)) {
          const Matrix dxhat = (go.array().rowwise() * gv.row(0).array()).matrix();
          const Eigen::ArrayXd proj = dxhat.cwiseProduct(xhat).rowwise().sum().array() / d;
          g.accumulate(ix, ((dxhat.array() - xhat.array().colwise() * proj).colwise() * inv).matrix());
        }
      });
}

Var causal_self_attention(Var q, Var k, Var v, std::span<const Segment> segments, int heads) {
  require_same_graph("causal_self_attention", q, k);
  require_same_graph("causal_self_attention", q, v);
  require_same_shape("causal_self_attention", q, k);
  require_same_shape("causal_self_attention", q, v);
  if (heads <= 0 || q.cols() % heads != 0)
    throw ShapeError("causal_self_attention: width " + std::to_string(q.cols()) +
                     " not divisible by " + std::to_string(heads) + " heads");
  for (const Segment& s : segments)
    if (s.offset < 0 || s.length <= 0 || s.offset + s.length > q.rows())
      throw ShapeError("causal_self_attention: segment out of range for " +
                       shape_string(q.rows(), q.cols()));

  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  const Index dh = q.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(double(dh));
  std::vector<Segment> segs(segments.begin(), segments.end());
  // Attention probabilities per (segment, head), refreshed on every forward.
  auto probs = std::make_shared<std::vector<Matrix>>(segs.size() * std::size_t(heads));

  return q.graph()->record(
      "causal_self_attention", {q, k, v},
      [=](const Graph& g, Matrix& o) {
        const Matrix& Q = g.value(iq);
        const Matrix& K = g.value(ik);
        const Matrix& V = g.value(iv);
        o = Matrix::Zero(Q.rows(), Q.cols());
        for (std::size_t s = 0; s < segs.size(); ++s) {
          const Index off = segs[s].offset, n = segs[s].length;
          for (int h = 0; h < heads; ++h) {
            Matrix& P = (*probs)[s * std::size_t(heads) + std::size_t(h)];
            P.noalias() = inv_sqrt * Q.block(off, h * dh, n, dh) * K.block(off, h * dh, n, dh).transpose();
            for (Index i = 0; i < n; ++i) {
              auto row = P.row(i);
              const double m = row.head(i + 1).maxCoeff();
              row.head(i + 1) = (row.head(i + 1).array() - m).exp();
              row.tail(n - i - 1).setZero();
              row.head(i + 1) /= row.head(i + 1).sum();
            }
            o.block(off, h * dh, n, dh).noalias() = P * V.block(off, h * dh, n, dh);
          }
        }
      },
      [=](Graph& g, const Matrix& go) {
        const Matrix& Q = g.value(iq);
        const Matrix& K = g.value(ik);
        const Matrix& V = g.value(iv);
        Matrix dQ = Matrix::Zero(Q.rows(), Q.cols());
        Matrix dK = Matrix::Zero(Q.rows(), Q.cols());
        Matrix dV = Matrix::Zero(Q.rows(), Q.cols());
        for (std::size_t s = 0; s < segs.size(); ++s) {
          const Index off = segs[s].offset, n = segs[s].length;
          for (int h = 0; h < heads; ++h) {
            const Matrix& P = (*probs)[s * std::size_t(heads) + std::size_t(h)];
            const auto dO = go.block(off, h * dh, n, dh);
            dV.block(off, h * dh, n, dh).noalias() += P.transpose() * dO;
            Matrix dP = dO * V.block(off, h * dh, n, dh).transpose();
            const Eigen::VectorXd dots = dP.cwiseProduct(P).rowwise().sum();
            Matrix dS = (P.array() * (dP.colwise() - dots).array()).matrix() * inv_sqrt;
            dQ.block(off, h * dh, n, dh).noalias() += dS * K.block(off, h * dh, n, dh);
            dK.block(off, h * dh, n, dh).noalias() += dS.transpose() * Q.block(off, h * dh, n, dh);
          }
        }
        g.accumulate(iq, dQ);
        g.accumulate(ik, dK);
        g.accumulate(iv, dV);
      });
}

Var masked_cross_entropy(Var logits, std::span<const int> targets,
                         std::span<const std::uint8_t> mask) {
  const Index n = logits.rows(), vocab = logits.cols();
  if (Index(targets.size()) != n || Index(mask.size()) != n)
    throw ShapeError("masked_cross_entropy: shape mismatch " + shape_string(n, vocab) + " vs targets [" +
                     std::to_string(targets.size()) + "], mask [" + std::to_string(mask.size()) + "]");
  std::vector<Index> rows;
  std::vector<int> tgt;
  for (Index i = 0; i < n; ++i) {
    if (!mask[std::size_t(i)]) continue;
    const int t = targets[std::size_t(i)];
    if (t < 0 || t >= vocab)
      throw ShapeError("masked_cross_entropy: target " + std::to_string(t) + " out of range for " +
                       std::to_string(vocab) + " classes");
    rows.push_back(i);
    tgt.push_back(t);
  }
  if (rows.empty()) throw ValueError("masked_cross_entropy: mask has no true entries");

  const std::size_t il = logits.id();
  auto probs = std::make_shared<Matrix>();
  return logits.graph()->record(
      "masked_cross_entropy", {logits},
      [il, rows, tgt, probs](const Graph& g, Matrix& o) {
        const Matrix& x = g.value(il);
        probs->resize(Index(rows.size()), x.cols());
        double total = 0.0;
        for (std::size_t r = 0; r < rows.size(); ++r) {
          const auto row = x.row(rows[r]);
          const double m = row.maxCoeff();
          auto p = probs->row(Index(r));
          p = (row.array() - m).exp();
          const double z = p.sum();
          p /= z;
          total += -(row(tgt[r]) - m - std::log(z));
        }
        o = Matrix::Constant(1, 1, total / double(rows.size()));
      },
      [il, rows, tgt, probs](Graph& g, const Matrix& go) {
        const Matrix& x = g.value(il);
        Matrix gx = Matrix::Zero(x.rows(), x.cols());
        const double w = go(0, 0) / double(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
          gx.row(rows[r]) = w * probs->row(Index(r));
          gx(rows[r], tgt[r]) -= w;
        }
        g.accumulate(il, gx);
      });
}

}  // namespace megan
