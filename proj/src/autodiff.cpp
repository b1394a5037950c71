#include "fgn/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

namespace fgn {

namespace {

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

// Dot product with four partial sums; fixed order keeps results reproducible.
double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

double pow_abs(double u, double p) {
  if (p == 2.0) return u * u;
  if (p == 1.0) return std::abs(u);
  return std::pow(std::abs(u), p);
}

// d|u|^p / du, with 0 at u == 0.
double pow_abs_deriv(double u, double p) {
  if (u == 0.0) return 0.0;
  if (p == 2.0) return 2.0 * u;
  if (p == 1.0) return u > 0 ? 1.0 : -1.0;
  const double mag = p * std::pow(std::abs(u), p - 1.0);
  return u > 0 ? mag : -mag;
}

constexpr double kMinFactorDiagonal = 1e-6;

double factor_diagonal(double v) {
  if (std::abs(v) >= kMinFactorDiagonal) return v;
  return v < 0 ? -kMinFactorDiagonal : kMinFactorDiagonal;
}

// Solves L z = u for lower-triangular L (row-major, dim x dim).
void forward_substitute(const double* L, const double* u, double* z, std::size_t dim) {
  for (std::size_t i = 0; i < dim; ++i) {
    double acc = u[i];
    for (std::size_t j = 0; j < i; ++j) acc -= L[i * dim + j] * z[j];
    z[i] = acc / factor_diagonal(L[i * dim + i]);
  }
}

// Solves L^T w = r.
void backward_substitute(const double* L, const double* r, double* w, std::size_t dim) {
  for (std::size_t ii = dim; ii-- > 0;) {
    double acc = r[ii];
    for (std::size_t j = ii + 1; j < dim; ++j) acc -= L[j * dim + ii] * w[j];
    w[ii] = acc / factor_diagonal(L[ii * dim + ii]);
  }
}

std::size_t unfold_length(std::size_t n, std::size_t k, std::size_t s, std::size_t d) {
  const std::size_t field = d * (k - 1) + 1;
  if (n < field) return 0;
  return 1 + (n - field) / s;
}

}  // namespace

GraphError::GraphError(NodeId node, const std::string& what)
    : std::runtime_error("node " + std::to_string(node) + ": " + what), node_(node) {}

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::AddRow: return "add_row";
    case Op::MulRow: return "mul_row";
    case Op::DivRow: return "div_row";
    case Op::MulCol: return "mul_col";
    case Op::RepeatCol: return "repeat_col";
    case Op::Scale: return "scale";
    case Op::AddConst: return "add_const";
    case Op::MatMul: return "matmul";
    case Op::Square: return "square";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Tanh: return "tanh";
    case Op::Relu: return "relu";
    case Op::Gaussian: return "gaussian";
    case Op::Sum: return "sum";
    case Op::RowSum: return "row_sum";
    case Op::Max: return "max";
    case Op::RowMax: return "row_max";
    case Op::LogSoftmax: return "log_softmax";
    case Op::Nll: return "nll";
    case Op::PowDist: return "pow_dist";
    case Op::WeightedPowDist: return "weighted_pow_dist";
    case Op::Mahalanobis: return "mahalanobis";
    case Op::Unfold1d: return "unfold1d";
    case Op::ChannelMajor: return "channel_major";
    case Op::Reshape: return "reshape";
  }
  return "?";
}

NodeId Graph::push(Node n) {
  for (NodeId in : n.inputs) {
    if (in >= nodes_.size()) throw GraphError(nodes_.size(), "input id " + std::to_string(in) + " does not exist");
  }
  nodes_.push_back(std::move(n));
  evaluated_ = false;
  return nodes_.size() - 1;
}

NodeId Graph::input(std::string name) {
  Node n;
  n.name = std::move(name);
  return push(std::move(n));
}

NodeId Graph::constant(Tensor value, std::string name) {
  Node n;
  n.bound = std::move(value);
  n.name = std::move(name);
  return push(std::move(n));
}

NodeId Graph::parameter(Tensor value, std::string name) { return constant(std::move(value), std::move(name)); }

void Graph::rebind(NodeId leaf, Tensor value) {
  Node& n = nodes_.at(leaf);
  if (n.op != Op::Leaf) throw GraphError(leaf, "rebind on non-leaf");
  n.bound = std::move(value);
  evaluated_ = false;
}

#define FGN_BINARY(fn, OPC)                \
  NodeId Graph::fn(NodeId a, NodeId b) {   \
    Node n;                                \
    n.op = Op::OPC;                        \
    n.inputs = {a, b};                     \
    return push(std::move(n));             \
  }
FGN_BINARY(add, Add)
FGN_BINARY(sub, Sub)
FGN_BINARY(mul, Mul)
FGN_BINARY(add_row, AddRow)
FGN_BINARY(mul_row, MulRow)
FGN_BINARY(div_row, DivRow)
FGN_BINARY(mul_col, MulCol)
#undef FGN_BINARY

#define FGN_UNARY(fn, OPC)       \
  NodeId Graph::fn(NodeId a) {   \
    Node n;                      \
    n.op = Op::OPC;              \
    n.inputs = {a};              \
    return push(std::move(n));   \
  }
FGN_UNARY(square, Square)
FGN_UNARY(exp, Exp)
FGN_UNARY(log, Log)
FGN_UNARY(tanh, Tanh)
FGN_UNARY(relu, Relu)
FGN_UNARY(gaussian, Gaussian)
FGN_UNARY(sum, Sum)
FGN_UNARY(row_sum, RowSum)
FGN_UNARY(max, Max)
FGN_UNARY(row_max, RowMax)
FGN_UNARY(log_softmax, LogSoftmax)
#undef FGN_UNARY

NodeId Graph::repeat_col(NodeId col, std::size_t times) {
  Node n;
  n.op = Op::RepeatCol;
  n.inputs = {col};
  n.params = {times};
  return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double factor) {
  Node n;
  n.op = Op::Scale;
  n.inputs = {a};
  n.constant = factor;
  return push(std::move(n));
}

NodeId Graph::add_const(NodeId a, double value) {
  Node n;
  n.op = Op::AddConst;
  n.inputs = {a};
  n.constant = value;
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b, bool transpose_b) {
  Node n;
  n.op = Op::MatMul;
  n.inputs = {a, b};
  n.transposed = transpose_b;
  return push(std::move(n));
}

NodeId Graph::nll(NodeId log_probs, std::vector<std::size_t> labels) {
  Node n;
  n.op = Op::Nll;
  n.inputs = {log_probs};
  n.labels = std::move(labels);
  return push(std::move(n));
}

NodeId Graph::pow_dist(NodeId x, NodeId centers, double p) {
  Node n;
  n.op = Op::PowDist;
  n.inputs = {x, centers};
  n.constant = p;
  return push(std::move(n));
}

NodeId Graph::weighted_pow_dist(NodeId x, NodeId centers, NodeId raw_scales, double p) {
  Node n;
  n.op = Op::WeightedPowDist;
  n.inputs = {x, centers, raw_scales};
  n.constant = p;
  return push(std::move(n));
}

NodeId Graph::mahalanobis(NodeId x, NodeId centers, NodeId factors) {
  Node n;
  n.op = Op::Mahalanobis;
  n.inputs = {x, centers, factors};
  return push(std::move(n));
}

NodeId Graph::unfold1d(NodeId x, std::size_t kernel, std::size_t stride, std::size_t dilation) {
  if (kernel == 0 || stride == 0 || dilation == 0) {
    throw GraphError(nodes_.size(), "unfold1d needs kernel, stride and dilation >= 1");
  }
  Node n;
  n.op = Op::Unfold1d;
  n.inputs = {x};
  n.params = {kernel, stride, dilation};
  return push(std::move(n));
}

NodeId Graph::channel_major(NodeId rows, std::size_t batch) {
  Node n;
  n.op = Op::ChannelMajor;
  n.inputs = {rows};
  n.params = {batch};
  return push(std::move(n));
}

NodeId Graph::reshape(NodeId a, Shape shape) {
  Node n;
  n.op = Op::Reshape;
  n.inputs = {a};
  n.params = std::move(shape);
  return push(std::move(n));
}

const Tensor& Graph::value(NodeId id) const {
  if (!evaluated_) throw GraphError(id, "graph has not been evaluated");
  return values_.at(id);
}

Tensor Graph::grad(NodeId id) const {
  const Tensor& v = value(id);
  if (id < grads_.size() && !grads_[id].empty()) return Tensor(v.shape, grads_[id]);
  return Tensor(v.shape, 0.0);
}

void Graph::forward(const std::map<NodeId, Tensor>& bindings) {
  for (const auto& [id, t] : bindings) {
    if (id >= nodes_.size() || nodes_[id].op != Op::Leaf) throw GraphError(id, "binding targets a non-leaf node");
  }
  values_.assign(nodes_.size(), Tensor());
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.op == Op::Leaf) {
      auto it = bindings.find(id);
      if (it != bindings.end()) {
        values_[id] = it->second;
      } else if (n.bound) {
        values_[id] = *n.bound;
      } else {
        throw GraphError(id, "leaf '" + n.name + "' is unbound");
      }
      values_[id].grad.reset();
      if (!values_[id].is_valid()) throw GraphError(id, "leaf tensor is inconsistent");
    } else {
      evaluate(id);
    }
  }
  grads_.clear();
  evaluated_ = true;
}

void Graph::evaluate(NodeId id) {
  const Node& n = nodes_[id];
  Tensor& out = values_[id];
  auto in = [&](std::size_t k) -> const Tensor& { return values_[n.inputs[k]]; };
  auto fail = [&](const std::string& msg) {
    throw GraphError(id, std::string(op_name(n.op)) + ": " + msg);
  };

  switch (n.op) {
    case Op::Leaf: break;
    case Op::Add:
    case Op::Sub:
    case Op::Mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (!same_shape(a, b)) fail("shape mismatch " + shape_string(a.shape) + " vs " + shape_string(b.shape));
      out = Tensor(a.shape);
      for (std::size_t i = 0; i < a.size(); ++i) {
        out[i] = n.op == Op::Add ? a[i] + b[i] : n.op == Op::Sub ? a[i] - b[i] : a[i] * b[i];
      }
      break;
    }
    case Op::AddRow:
    case Op::MulRow:
    case Op::DivRow: {
      const Tensor& a = in(0);
      const Tensor& r = in(1);
      if (r.rank() != 1 || r.size() != a.cols()) {
        fail("row operand " + shape_string(r.shape) + " does not match " + shape_string(a.shape));
      }
      out = Tensor(a.shape);
      const std::size_t cols = a.cols();
      for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
          const double x = a[i * cols + j];
          out[i * cols + j] = n.op == Op::AddRow ? x + r[j] : n.op == Op::MulRow ? x * r[j] : x / r[j];
        }
      }
      break;
    }
    case Op::MulCol: {
      const Tensor& a = in(0);
      const Tensor& c = in(1);
      if (c.rank() != 1 || c.size() != a.rows()) {
        fail("column operand " + shape_string(c.shape) + " does not match " + shape_string(a.shape));
      }
      out = Tensor(a.shape);
      const std::size_t cols = a.cols();
      for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = a[i * cols + j] * c[i];
      }
      break;
    }
    case Op::RepeatCol: {
      const Tensor& c = in(0);
      if (c.rank() != 1) fail("expects a vector");
      const std::size_t times = n.params[0];
      out = Tensor(Shape{c.size() * times});
      for (std::size_t i = 0; i < c.size(); ++i) {
        for (std::size_t t = 0; t < times; ++t) out[i * times + t] = c[i];
      }
      break;
    }
    case Op::Scale:
    case Op::AddConst: {
      const Tensor& a = in(0);
      out = Tensor(a.shape);
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = n.op == Op::Scale ? a[i] * n.constant : a[i] + n.constant;
      break;
    }
    case Op::MatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.rank() < 1 || a.rank() > 2 || b.rank() < 1 || b.rank() > 2) fail("operands must be rank 1 or 2");
      const std::size_t m = a.rows();
      const std::size_t k = a.cols();
      if (n.transposed) {
        if (b.rank() != 2 || b.shape[1] != k) fail("inner dims differ: " + shape_string(a.shape) + " . " + shape_string(b.shape) + "^T");
        const std::size_t nn = b.shape[0];
        out = a.rank() == 1 ? Tensor(Shape{nn}) : Tensor(Shape{m, nn});
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < nn; ++j) out[i * nn + j] = dot(&a.data[i * k], &b.data[j * k], k);
        }
      } else {
        if (b.shape[0] != k) fail("inner dims differ: " + shape_string(a.shape) + " . " + shape_string(b.shape));
        const std::size_t nn = b.rank() == 1 ? 1 : b.shape[1];
        Shape s;
        if (a.rank() == 2) s.push_back(m);
        if (b.rank() == 2) s.push_back(nn);
        out = Tensor(s.empty() ? Shape{} : s);
        for (std::size_t i = 0; i < m; ++i) {
          double* row = &out.data[i * nn];
          for (std::size_t p = 0; p < k; ++p) axpy(a[i * k + p], &b.data[p * nn], row, nn);
        }
      }
      break;
    }
    case Op::Square:
    case Op::Exp:
    case Op::Log:
    case Op::Tanh:
    case Op::Relu:
    case Op::Gaussian: {
      const Tensor& a = in(0);
      out = Tensor(a.shape);
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i];
        switch (n.op) {
          case Op::Square: out[i] = x * x; break;
          case Op::Exp: out[i] = std::exp(x); break;
          case Op::Log: out[i] = std::log(x); break;
          case Op::Tanh: out[i] = std::tanh(x); break;
          case Op::Relu: out[i] = x > 0 ? x : 0.0; break;
          default: out[i] = x > kGaussianCutoff ? 0.0 : std::exp(-x); break;
        }
      }
      break;
    }
    case Op::Sum: {
      const Tensor& a = in(0);
      double s = 0;
      for (double x : a.data) s += x;
      out = Tensor::scalar(s);
      break;
    }
    case Op::RowSum: {
      const Tensor& a = in(0);
      out = Tensor(Shape{a.rows()});
      const std::size_t cols = a.cols();
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0;
        for (std::size_t j = 0; j < cols; ++j) s += a[i * cols + j];
        out[i] = s;
      }
      break;
    }
    case Op::Max: {
      const Tensor& a = in(0);
      if (a.size() == 0) fail("max of empty tensor");
      out = Tensor::scalar(*std::max_element(a.data.begin(), a.data.end()));
      break;
    }
    case Op::RowMax: {
      const Tensor& a = in(0);
      const std::size_t cols = a.cols();
      if (cols == 0) fail("row max of empty rows");
      out = Tensor(Shape{a.rows()});
      for (std::size_t i = 0; i < a.rows(); ++i) {
        out[i] = *std::max_element(a.data.begin() + i * cols, a.data.begin() + (i + 1) * cols);
      }
      break;
    }
    case Op::LogSoftmax: {
      const Tensor& a = in(0);
      const std::size_t cols = a.cols();
      if (cols == 0) fail("empty logits");
      out = Tensor(a.shape);
      for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* z = &a.data[i * cols];
        const double m = *std::max_element(z, z + cols);
        double s = 0;
        for (std::size_t j = 0; j < cols; ++j) s += std::exp(z[j] - m);
        const double lse = m + std::log(s);
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = z[j] - lse;
      }
      break;
    }
    case Op::Nll: {
      const Tensor& a = in(0);
      const std::size_t cols = a.cols();
      if (n.labels.size() != a.rows()) fail("label count differs from row count");
      double s = 0;
      for (std::size_t i = 0; i < a.rows(); ++i) {
        if (n.labels[i] >= cols) fail("label " + std::to_string(n.labels[i]) + " out of range");
        s -= a[i * cols + n.labels[i]];
      }
      out = Tensor::scalar(s / static_cast<double>(a.rows()));
      break;
    }
    case Op::PowDist:
    case Op::WeightedPowDist: {
      const Tensor& x = in(0);
      const Tensor& c = in(1);
      if (x.rank() != 2 || c.rank() != 2 || x.shape[1] != c.shape[1]) {
        fail("expects [B x D] and [N x D], got " + shape_string(x.shape) + " and " + shape_string(c.shape));
      }
      const bool weighted = n.op == Op::WeightedPowDist;
      if (weighted && in(2).shape != c.shape) fail("scale shape differs from centers");
      const std::size_t batch = x.shape[0], units = c.shape[0], dim = x.shape[1];
      const double p = n.constant;
      out = Tensor(Shape{batch, units});
      std::vector<double> inv_var;
      if (weighted) {
        const Tensor& s = in(2);
        inv_var.resize(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) inv_var[i] = 1.0 / (s[i] * s[i] + kVarianceFloor);
      }
      for (std::size_t b = 0; b < batch; ++b) {
        const double* xb = &x.data[b * dim];
        for (std::size_t u = 0; u < units; ++u) {
          const double* cu = &c.data[u * dim];
          double acc = 0;
          if (weighted) {
            const double* iv = &inv_var[u * dim];
            for (std::size_t d = 0; d < dim; ++d) acc += pow_abs(xb[d] - cu[d], p) * iv[d];
          } else if (p == 2.0) {
            for (std::size_t d = 0; d < dim; ++d) {
              const double diff = xb[d] - cu[d];
              acc += diff * diff;
            }
          } else {
            for (std::size_t d = 0; d < dim; ++d) acc += pow_abs(xb[d] - cu[d], p);
          }
          out[b * units + u] = acc;
        }
      }
      break;
    }
    case Op::Mahalanobis: {
      const Tensor& x = in(0);
      const Tensor& c = in(1);
      const Tensor& L = in(2);
      if (x.rank() != 2 || c.rank() != 2 || x.shape[1] != c.shape[1]) fail("expects [B x D] and [N x D]");
      const std::size_t batch = x.shape[0], units = c.shape[0], dim = x.shape[1];
      if (L.shape != Shape{units, dim, dim}) fail("factors must be " + shape_string({units, dim, dim}));
      out = Tensor(Shape{batch, units});
      std::vector<double> u(dim), z(dim);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t k = 0; k < units; ++k) {
          for (std::size_t d = 0; d < dim; ++d) u[d] = x[b * dim + d] - c[k * dim + d];
          forward_substitute(&L.data[k * dim * dim], u.data(), z.data(), dim);
          double q = 0;
          for (double zi : z) q += zi * zi;
          out[b * units + k] = q;
        }
      }
      break;
    }
    case Op::Unfold1d: {
      const Tensor& x = in(0);
      if (x.rank() != 2) fail("expects [B x n]");
      const std::size_t k = n.params[0], s = n.params[1], d = n.params[2];
      const std::size_t len = x.shape[1];
      const std::size_t outlen = unfold_length(len, k, s, d);
      if (outlen == 0) {
        fail("input length " + std::to_string(len) + " shorter than receptive field " + std::to_string(d * (k - 1) + 1));
      }
      const std::size_t batch = x.shape[0];
      out = Tensor(Shape{batch * outlen, k});
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < outlen; ++i) {
          for (std::size_t j = 0; j < k; ++j) out[(b * outlen + i) * k + j] = x[b * len + i * s + j * d];
        }
      }
      break;
    }
    case Op::ChannelMajor: {
      const Tensor& a = in(0);
      const std::size_t batch = n.params[0];
      if (a.rank() != 2 || batch == 0 || a.shape[0] % batch != 0) fail("rows not divisible by batch");
      const std::size_t len = a.shape[0] / batch, ch = a.shape[1];
      out = Tensor(Shape{batch, ch * len});
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < len; ++i) {
          for (std::size_t c = 0; c < ch; ++c) out[b * ch * len + c * len + i] = a[(b * len + i) * ch + c];
        }
      }
      break;
    }
    case Op::Reshape: {
      const Tensor& a = in(0);
      Shape s(n.params.begin(), n.params.end());
      if (shape_size(s) != a.size()) fail("cannot reshape " + shape_string(a.shape) + " to " + shape_string(s));
      out = Tensor(std::move(s), a.data);
      break;
    }
  }
}

std::map<NodeId, Tensor> Graph::backward(NodeId seed) {
  const Tensor& s = value(seed);
  if (s.size() != 1) throw GraphError(seed, "backward seed must be scalar, got " + shape_string(s.shape));
  grads_.assign(nodes_.size(), {});
  grads_[seed] = {1.0};
  for (NodeId id = seed + 1; id-- > 0;) {
    if (!grads_[id].empty() && nodes_[id].op != Op::Leaf) propagate(id);
  }
  std::map<NodeId, Tensor> leaves;
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].op == Op::Leaf) leaves.emplace(id, grad(id));
  }
  return leaves;
}

void Graph::propagate(NodeId id) {
  const Node& n = nodes_[id];
  const Tensor& out = values_[id];
  const std::vector<double>& g = grads_[id];
  auto in = [&](std::size_t k) -> const Tensor& { return values_[n.inputs[k]]; };
  auto acc = [&](std::size_t k) -> std::vector<double>& {
    std::vector<double>& buf = grads_[n.inputs[k]];
    if (buf.empty()) buf.assign(values_[n.inputs[k]].size(), 0.0);
    return buf;
  };

  switch (n.op) {
    case Op::Leaf: break;
    case Op::Add:
    case Op::Sub: {
      auto& ga = acc(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      auto& gb = acc(1);
      const double sign = n.op == Op::Add ? 1.0 : -1.0;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
      break;
    }
    case Op::Mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      auto& ga = acc(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      auto& gb = acc(1);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      break;
    }
    case Op::AddRow:
    case Op::MulRow:
    case Op::DivRow: {
      const Tensor& a = in(0);
      const Tensor& r = in(1);
      const std::size_t cols = a.cols();
      auto& ga = acc(0);
      auto& gr = acc(1);
      for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
          const std::size_t at = i * cols + j;
          if (n.op == Op::AddRow) {
            ga[at] += g[at];
            gr[j] += g[at];
          } else if (n.op == Op::MulRow) {
            ga[at] += g[at] * r[j];
            gr[j] += g[at] * a[at];
          } else {
            ga[at] += g[at] / r[j];
            gr[j] -= g[at] * a[at] / (r[j] * r[j]);
          }
        }
      }
      break;
    }
    case Op::MulCol: {
      const Tensor& a = in(0);
      const Tensor& c = in(1);
      const std::size_t cols = a.cols();
      auto& ga = acc(0);
      auto& gc = acc(1);
      for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
          ga[i * cols + j] += g[i * cols + j] * c[i];
          gc[i] += g[i * cols + j] * a[i * cols + j];
        }
      }
      break;
    }
    case Op::RepeatCol: {
      const std::size_t times = n.params[0];
      auto& gc = acc(0);
      for (std::size_t i = 0; i < gc.size(); ++i) {
        for (std::size_t t = 0; t < times; ++t) gc[i] += g[i * times + t];
      }
      break;
    }
    case Op::Scale: {
      auto& ga = acc(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.constant;
      break;
    }
    case Op::AddConst: {
      auto& ga = acc(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      break;
    }
    case Op::MatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t m = a.rows(), k = a.cols();
      auto& ga = acc(0);
      auto& gb = acc(1);
      if (n.transposed) {
        const std::size_t nn = b.shape[0];
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < nn; ++j) {
            const double gij = g[i * nn + j];
            if (gij == 0.0) continue;
            axpy(gij, &b.data[j * k], &ga[i * k], k);
            axpy(gij, &a.data[i * k], &gb[j * k], k);
          }
        }
      } else {
        const std::size_t nn = b.rank() == 1 ? 1 : b.shape[1];
        for (std::size_t i = 0; i < m; ++i) {
          const double* gi = &g[i * nn];
          for (std::size_t p = 0; p < k; ++p) {
            ga[i * k + p] += dot(gi, &b.data[p * nn], nn);
            axpy(a[i * k + p], gi, &gb[p * nn], nn);
          }
        }
      }
      break;
    }
    case Op::Square:
    case Op::Exp:
    case Op::Log:
    case Op::Tanh:
    case Op::Relu:
    case Op::Gaussian: {
      const Tensor& a = in(0);
      auto& ga = acc(0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        double d = 0;
        switch (n.op) {
          case Op::Square: d = 2.0 * a[i]; break;
          case Op::Exp: d = out[i]; break;
          case Op::Log: d = 1.0 / a[i]; break;
          case Op::Tanh: d = 1.0 - out[i] * out[i]; break;
          case Op::Relu: d = a[i] > 0 ? 1.0 : 0.0; break;
          default: d = -out[i]; break;
        }
        ga[i] += g[i] * d;
      }
      break;
    }
    case Op::Sum: {
      auto& ga = acc(0);
      for (double& v : ga) v += g[0];
      break;
    }
    case Op::RowSum: {
      const Tensor& a = in(0);
      const std::size_t cols = a.cols();
      auto& ga = acc(0);
      for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < cols; ++j) ga[i * cols + j] += g[i];
      }
      break;
    }
    case Op::Max: {
      const Tensor& a = in(0);
      const auto first = std::max_element(a.data.begin(), a.data.end()) - a.data.begin();
      acc(0)[static_cast<std::size_t>(first)] += g[0];
      break;
    }
    case Op::RowMax: {
      const Tensor& a = in(0);
      const std::size_t cols = a.cols();
      auto& ga = acc(0);
      for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto begin = a.data.begin() + i * cols;
        const auto first = std::max_element(begin, begin + cols) - begin;
        ga[i * cols + static_cast<std::size_t>(first)] += g[i];
      }
      break;
    }
    case Op::LogSoftmax: {
      const std::size_t cols = out.cols();
      auto& ga = acc(0);
      for (std::size_t i = 0; i < out.rows(); ++i) {
        double gsum = 0;
        for (std::size_t j = 0; j < cols; ++j) gsum += g[i * cols + j];
        for (std::size_t j = 0; j < cols; ++j) {
          ga[i * cols + j] += g[i * cols + j] - std::exp(out[i * cols + j]) * gsum;
        }
      }
      break;
    }
    case Op::Nll: {
      const Tensor& a = in(0);
      const std::size_t cols = a.cols();
      auto& ga = acc(0);
      const double w = g[0] / static_cast<double>(a.rows());
      for (std::size_t i = 0; i < a.rows(); ++i) ga[i * cols + n.labels[i]] -= w;
      break;
    }
    case Op::PowDist:
    case Op::WeightedPowDist: {
      const Tensor& x = in(0);
      const Tensor& c = in(1);
      const bool weighted = n.op == Op::WeightedPowDist;
      const std::size_t batch = x.shape[0], units = c.shape[0], dim = x.shape[1];
      const double p = n.constant;
      auto& gx = acc(0);
      auto& gc = acc(1);
      std::vector<double>* gs = weighted ? &acc(2) : nullptr;
      std::vector<double> inv_var;
      if (weighted) {
        const Tensor& s = in(2);
        inv_var.resize(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) inv_var[i] = 1.0 / (s[i] * s[i] + kVarianceFloor);
      }
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t u = 0; u < units; ++u) {
          const double gbu = g[b * units + u];
          if (gbu == 0.0) continue;
          for (std::size_t d = 0; d < dim; ++d) {
            const double diff = x[b * dim + d] - c[u * dim + d];
            double dq = pow_abs_deriv(diff, p);
            if (weighted) {
              const double iv = inv_var[u * dim + d];
              const double s = in(2)[u * dim + d];
              (*gs)[u * dim + d] -= gbu * pow_abs(diff, p) * iv * iv * 2.0 * s;
              dq *= iv;
            }
            gx[b * dim + d] += gbu * dq;
            gc[u * dim + d] -= gbu * dq;
          }
        }
      }
      break;
    }
    case Op::Mahalanobis: {
      const Tensor& x = in(0);
      const Tensor& c = in(1);
      const Tensor& L = in(2);
      const std::size_t batch = x.shape[0], units = c.shape[0], dim = x.shape[1];
      auto& gx = acc(0);
      auto& gc = acc(1);
      auto& gl = acc(2);
      std::vector<double> u(dim), z(dim), r(dim), w(dim);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t k = 0; k < units; ++k) {
          const double gq = g[b * units + k];
          if (gq == 0.0) continue;
          const double* Lk = &L.data[k * dim * dim];
          for (std::size_t d = 0; d < dim; ++d) u[d] = x[b * dim + d] - c[k * dim + d];
          forward_substitute(Lk, u.data(), z.data(), dim);
          for (std::size_t d = 0; d < dim; ++d) r[d] = 2.0 * z[d];
          backward_substitute(Lk, r.data(), w.data(), dim);
          for (std::size_t d = 0; d < dim; ++d) {
            gx[b * dim + d] += gq * w[d];
            gc[k * dim + d] -= gq * w[d];
          }
          for (std::size_t i = 0; i < dim; ++i) {
            for (std::size_t j = 0; j < i; ++j) gl[k * dim * dim + i * dim + j] -= gq * w[i] * z[j];
            // Floored diagonal entries are constant.
            if (std::abs(Lk[i * dim + i]) >= kMinFactorDiagonal) gl[k * dim * dim + i * dim + i] -= gq * w[i] * z[i];
          }
        }
      }
      break;
    }
    case Op::Unfold1d: {
      const Tensor& x = in(0);
      const std::size_t k = n.params[0], s = n.params[1], d = n.params[2];
      const std::size_t len = x.shape[1], batch = x.shape[0];
      const std::size_t outlen = out.shape[0] / batch;
      auto& gx = acc(0);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < outlen; ++i) {
          for (std::size_t j = 0; j < k; ++j) gx[b * len + i * s + j * d] += g[(b * outlen + i) * k + j];
        }
      }
      break;
    }
    case Op::ChannelMajor: {
      const Tensor& a = in(0);
      const std::size_t batch = n.params[0];
      const std::size_t len = a.shape[0] / batch, ch = a.shape[1];
      auto& ga = acc(0);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < len; ++i) {
          for (std::size_t c = 0; c < ch; ++c) ga[(b * len + i) * ch + c] += g[b * ch * len + c * len + i];
        }
      }
      break;
    }
    case Op::Reshape: {
      auto& ga = acc(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      break;
    }
  }
}

}  // namespace fgn
