#include "finegates/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "finegates/errors.hpp"
#include "finegates/gemm.hpp"

namespace finegates::ad {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Parameter::Parameter(std::string n, Shape s, std::vector<double> v, ParamRole r)
    : name(std::move(n)), shape(std::move(s)), value(std::move(v)), grad(value.size(), 0.0), role(r) {
  if (value.size() != numel(shape)) {
    throw DimensionError("parameter '" + name + "': " + std::to_string(value.size()) +
                         " values for shape " + to_string(shape));
  }
}

void Parameter::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

// ---------------------------------------------------------------------------
// Tensor

const Shape& Tensor::shape() const { return tape().shape(id_); }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  return s.empty() ? 1 : s[0];
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  return s.size() < 2 ? (s.empty() ? 1 : s[0]) : s[1];
}

std::size_t Tensor::size() const { return numel(shape()); }
std::span<const double> Tensor::data() const { return tape().value(id_); }
std::span<const double> Tensor::grad() const { return tape().grad(id_); }
bool Tensor::requires_grad() const { return tape().requires_grad(id_); }

Tape& Tensor::tape() const {
  if (!tape_) throw ContractError("tensor is not attached to a tape");
  return *tape_;
}

double Tensor::item() const {
  auto d = data();
  if (d.size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return d[0];
}

// ---------------------------------------------------------------------------
// Tape

Tape::Tape(bool grad_enabled) : grad_enabled_(grad_enabled) { nodes_.reserve(256); }

Tensor Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

const Tape::Node& Tape::node(std::size_t id) const {
  if (id >= nodes_.size()) throw ContractError("node id out of range");
  return nodes_[id];
}

Tape::Node& Tape::node(std::size_t id) {
  if (id >= nodes_.size()) throw ContractError("node id out of range");
  return nodes_[id];
}

Tensor Tape::constant(Shape shape, std::vector<double> value) { return leaf(std::move(shape), std::move(value), false); }

Tensor Tape::leaf(Shape shape, std::vector<double> value, bool requires_grad) {
  if (value.size() != numel(shape)) {
    throw DimensionError("leaf: " + std::to_string(value.size()) + " values for shape " + to_string(shape));
  }
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.requires_grad = requires_grad && grad_enabled_;
  return push(std::move(n));
}

Tensor Tape::parameter(Parameter& p) {
  if (p.value.size() != numel(p.shape)) throw DimensionError("parameter '" + p.name + "' has inconsistent shape");
  Node n;
  n.shape = p.shape;
  n.param = &p;
  n.requires_grad = grad_enabled_ && p.trainable();
  if (n.requires_grad && p.grad.size() != p.value.size()) p.grad.assign(p.value.size(), 0.0);
  return push(std::move(n));
}

std::span<const double> Tape::value(std::size_t id) const {
  const Node& n = node(id);
  if (n.param) return n.param->value;
  return n.value;
}

std::span<const double> Tape::grad(std::size_t id) const {
  const Node& n = node(id);
  if (!n.requires_grad) return {};
  if (n.param) return n.param->grad;
  return n.grad;
}

std::span<double> Tape::mutable_grad(std::size_t id) {
  Node& n = node(id);
  if (n.param) return n.param->grad;
  if (n.grad.size() != numel(n.shape)) n.grad.assign(numel(n.shape), 0.0);
  return n.grad;
}

bool Tape::requires_grad(std::size_t id) const { return node(id).requires_grad; }
const Shape& Tape::shape(std::size_t id) const { return node(id).shape; }

Tensor Tape::record(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs, BackwardFn fn) {
  return record(std::move(shape), std::move(value), std::vector<Tensor>(inputs), std::move(fn));
}

Tensor Tape::record(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs, BackwardFn fn) {
  bool needs = false;
  for (const Tensor& t : inputs) {
    if (t.tape_ != this) throw ContractError("operand belongs to a different tape");
    needs = needs || node(t.id_).requires_grad;
  }
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.is_leaf = false;
  n.requires_grad = grad_enabled_ && needs;
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape_ != this) throw ContractError("backward: loss belongs to a different tape");
  const Node& ln = node(loss.id_);
  if (numel(ln.shape) != 1) throw ContractError("backward: loss must be a scalar, got shape " + to_string(ln.shape));
  if (!ln.requires_grad) return;

  for (Node& n : nodes_) {
    if (!n.is_leaf && !n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), 0.0);
  }
  mutable_grad(loss.id_)[0] += 1.0;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.is_leaf || !n.requires_grad || n.grad.empty()) continue;
    n.backward(*this, i);
  }
}

// ---------------------------------------------------------------------------
// Operations

namespace {

void require_same_tape(const Tensor& a, const Tensor& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands belong to different tapes");
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got shape " + to_string(t.shape()));
}

void require_vector(const Tensor& t, const char* op) {
  if (t.rank() != 1) throw DimensionError(std::string(op) + ": expected a vector, got shape " + to_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

template <class F>
Tensor unary(const Tensor& x, F&& f, std::function<void(std::span<const double> in, std::span<const double> out,
                                                           std::span<const double> g, std::span<double> gx)>
                                        df) {
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  const std::size_t xi = x.node_id();
  return x.tape().record(x.shape(), std::move(out), {x}, [xi, df](Tape& t, std::size_t o) {
    if (!t.requires_grad(xi)) return;
    df(t.value(xi), t.value(o), t.grad(o), t.mutable_grad(xi));
  });
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b);
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " + to_string(a.shape()) + " . " + to_string(b.shape()));
  }
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += av[i * k + p] * bv[p * n + j];
      out[i * n + j] = acc;
    }
  }
  const std::size_t ai = a.node_id(), bi = b.node_id();
  return a.tape().record({m, n}, std::move(out), {a, b}, [ai, bi, m, k, n](Tape& t, std::size_t o) {
    auto g = t.grad(o);
    if (t.requires_grad(ai)) {
      auto bv = t.value(bi);
      auto ga = t.mutable_grad(ai);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (t.requires_grad(bi)) {
      auto av = t.value(ai);
      auto gb = t.mutable_grad(bi);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w) {
  require_same_tape(x, w);
  require_matrix(x, "linear");
  require_matrix(w, "linear");
  const std::size_t n = x.rows(), k = x.cols(), m = w.rows();
  if (w.cols() != k) {
    throw DimensionError("linear: input width " + std::to_string(k) + " does not match weight " + to_string(w.shape()));
  }
  std::vector<double> out(n * m);
  gemm::linear_reference<double>(x.data(), n, k, w.data(), m, out);
  const std::size_t xi = x.node_id(), wi = w.node_id();
  return x.tape().record({n, m}, std::move(out), {x, w}, [xi, wi, n, k, m](Tape& t, std::size_t o) {
    auto g = t.grad(o);
    if (t.requires_grad(xi)) {
      auto wv = t.value(wi);
      auto gx = t.mutable_grad(xi);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < m; ++i) {
          const double gri = g[r * m + i];
          if (gri == 0.0) continue;
          for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += gri * wv[i * k + j];
        }
    }
    if (t.requires_grad(wi)) {
      auto xv = t.value(xi);
      auto gw = t.mutable_grad(wi);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < m; ++i) {
          const double gri = g[r * m + i];
          if (gri == 0.0) continue;
          for (std::size_t j = 0; j < k; ++j) gw[i * k + j] += gri * xv[r * k + j];
        }
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_matrix(x, "transpose");
  const std::size_t r = x.rows(), c = x.cols();
  auto v = x.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  const std::size_t xi = x.node_id();
  return x.tape().record({c, r}, std::move(out), {x}, [xi, r, c](Tape& t, std::size_t o) {
    auto g = t.grad(o);
    auto gx = t.mutable_grad(xi);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

namespace {

template <class F, class GA, class GB>
Tensor binary_same_shape(const Tensor& a, const Tensor& b, const char* op, F f, GA ga_fn, GB gb_fn) {
  require_same_tape(a, b);
  require_same_shape(a, b, op);
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
  const std::size_t ai = a.node_id(), bi = b.node_id();
  return a.tape().record(a.shape(), std::move(out), {a, b}, [ai, bi, ga_fn, gb_fn](Tape& t, std::size_t o) {
    auto g = t.grad(o);
    auto av = t.value(ai);
    auto bv = t.value(bi);
    if (t.requires_grad(ai)) {
      auto ga = t.mutable_grad(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += ga_fn(g[i], av[i], bv[i]);
    }
    if (t.requires_grad(bi)) {
      auto gb = t.mutable_grad(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += gb_fn(g[i], av[i], bv[i]);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      a, b, "add", [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor add_row_vector(const Tensor& x, const Tensor& v) {
  require_same_tape(x, v);
  require_matrix(x, "add_row_vector");
  require_vector(v, "add_row_vector");
  const std::size_t n = x.rows(), m = x.cols();
  if (v.size() != m) {
    throw DimensionError("add_row_vector: " + to_string(x.shape()) + " + " + to_string(v.shape()));
  }
  auto xv = x.data();
  auto vv = v.data();
  std::vector<double> out(n * m);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] = xv[r * m + j] + vv[j];
  const std::size_t xi = x.node_id(), vi = v.node_id();
  return x.tape().record(x.shape(), std::move(out), {x, v}, [xi, vi, n, m](Tape& t, std::size_t o) {
    auto g = t.grad(o);
    if (t.requires_grad(xi)) {
      auto gx = t.mutable_grad(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(vi)) {
      auto gv = t.mutable_grad(vi);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < m; ++j) gv[j] += g[r * m + j];
    }
  });
}

Tensor affine(const Tensor& x, double a, double b) {
  return unary(
      x, [a, b](double v) { return a * v + b; },
      [a](std::span<const double>, std::span<const double>, std::span<const double> g, std::span<double> gx) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += a * g[i];
      });
}

Tensor scale(const Tensor& x, double a) {
  return unary(
      x, [a](double v) { return a * v; },
      [a](std::span<const double>, std::span<const double>, std::span<const double> g, std::span<double> gx) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += a * g[i];
      });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const std::size_t xi = x.node_id();
  return x.tape().record({1}, {acc}, {x}, [xi](Tape& t, std::size_t o) {
    const double g = t.grad(o)[0];
    for (double& v : t.mutable_grad(xi)) v += g;
  });
}

Tensor mean(const Tensor& x) {
  const std::size_t n = x.size();
  if (n == 0) throw NumericError("mean of an empty tensor");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const std::size_t xi = x.node_id();
  return x.tape().record({1}, {acc / static_cast<double>(n)}, {x}, [xi, n](Tape& t, std::size_t o) {
    const double g = t.grad(o)[0] / static_cast<double>(n);
    for (double& v : t.mutable_grad(xi)) v += g;
  });
}

Tensor scale_rows_cols(const Tensor& w, const Tensor& row_gates, const Tensor& col_gates) {
  require_same_tape(w, row_gates);
  require_same_tape(w, col_gates);
  require_matrix(w, "scale_rows_cols");
  require_vector(row_gates, "scale_rows_cols");
  require_vector(col_gates, "scale_rows_cols");
  const std::size_t k = w.rows(), d = w.cols();
  if (row_gates.size() != k || col_gates.size() != d) {
    throw DimensionError("scale_rows_cols: gates " + to_string(row_gates.shape()) + "/" +
                         to_string(col_gates.shape()) + " do not fit matrix " + to_string(w.shape()));
  }
  auto wv = w.data();
  auto gr = row_gates.data();
  auto gc = col_gates.data();
  std::vector<double> out(k * d);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = gr[i] * wv[i * d + j] * gc[j];
  const std::size_t wi = w.node_id(), ri = row_gates.node_id(), ci = col_gates.node_id();
  return w.tape().record({k, d}, std::move(out), {w, row_gates, col_gates}, [wi, ri, ci, k, d](Tape& t, std::size_t o) {
    auto g = t.grad(o);
    auto wv = t.value(wi);
    auto gr = t.value(ri);
    auto gc = t.value(ci);
    if (t.requires_grad(wi)) {
      auto gw = t.mutable_grad(wi);
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < d; ++j) gw[i * d + j] += g[i * d + j] * gr[i] * gc[j];
    }
    if (t.requires_grad(ri)) {
      auto grr = t.mutable_grad(ri);
      for (std::size_t i = 0; i < k; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += g[i * d + j] * wv[i * d + j] * gc[j];
        grr[i] += acc;
      }
    }
    if (t.requires_grad(ci)) {
      auto gcc = t.mutable_grad(ci);
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < d; ++j) gcc[j] += g[i * d + j] * gr[i] * wv[i * d + j];
    }
  });
}

Tensor clamp01(const Tensor& x) {
  return unary(
      x, [](double v) { return std::max(0.0, std::min(1.0, v)); },
      [](std::span<const double> in, std::span<const double>, std::span<const double> g, std::span<double> gx) {
        for (std::size_t i = 0; i < g.size(); ++i)
          if (in[i] > 0.0 && in[i] < 1.0) gx[i] += g[i];
      });
}

Tensor maximum(const Tensor& x, double floor) {
  return unary(
      x, [floor](double v) { return std::max(v, floor); },
      [floor](std::span<const double> in, std::span<const double>, std::span<const double> g, std::span<double> gx) {
        for (std::size_t i = 0; i < g.size(); ++i)
          if (in[i] > floor) gx[i] += g[i];
      });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, [](double v) { return v * normal_cdf(v); },
      [](std::span<const double> in, std::span<const double>, std::span<const double> g, std::span<double> gx) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (normal_cdf(in[i]) + in[i] * normal_pdf(in[i]));
      });
}

Tensor erf_op(const Tensor& x) {
  return unary(
      x, [](double v) { return std::erf(v); },
      [](std::span<const double> in, std::span<const double>, std::span<const double> g, std::span<double> gx) {
        constexpr double c = 2.0 * std::numbers::inv_sqrtpi;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c * std::exp(-in[i] * in[i]);
      });
}

Tensor tanh_op(const Tensor& x) {
  return unary(
      x, [](double v) { return std::tanh(v); },
      [](std::span<const double>, std::span<const double> out, std::span<const double> g, std::span<double> gx) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - out[i] * out[i]);
      });
}

Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  const std::size_t n = x.rows(), m = x.cols();
  if (m == 0) throw NumericError("softmax_rows: empty rows");
  auto xv = x.data();
  std::vector<double> out(n * m);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.data() + r * m;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      if (std::isnan(row[j])) throw NumericError("softmax_rows: NaN input in row " + std::to_string(r));
      mx = std::max(mx, row[j]);
    }
    if (!std::isfinite(mx)) throw NumericError("softmax_rows: row " + std::to_string(r) + " has no finite entry");
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      out[r * m + j] = std::exp(row[j] - mx);
      z += out[r * m + j];
    }
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] /= z;
  }
  const std::size_t xi = x.node_id();
  return x.tape().record(x.shape(), std::move(out), {x}, [xi, n, m](Tape& t, std::size_t o) {
    auto g = t.grad(o);
    auto y = t.value(o);
    auto gx = t.mutable_grad(xi);
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += g[r * m + j] * y[r * m + j];
      for (std::size_t j = 0; j < m; ++j) gx[r * m + j] += y[r * m + j] * (g[r * m + j] - dot);
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_matrix(logits, "cross_entropy");
  const std::size_t n = logits.rows(), c = logits.cols();
  if (n == 0 || c == 0) throw NumericError("cross_entropy: empty logits " + to_string(logits.shape()));
  if (labels.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  }
  auto z = logits.data();
  std::vector<double> probs(n * c);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= c) throw InputError("cross_entropy: label out of range");
    const double* row = z.data() + r * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      if (!std::isfinite(row[j])) throw NumericError("cross_entropy: non-finite logit in row " + std::to_string(r));
      mx = std::max(mx, row[j]);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    total += lse - row[y];
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(row[j] - lse);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  const std::size_t li = logits.node_id();
  return logits.tape().record(
      {1}, {total / static_cast<double>(n)}, {logits},
      [li, n, c, probs = std::move(probs), lab = std::move(lab)](Tape& t, std::size_t o) {
        const double g = t.grad(o)[0] / static_cast<double>(n);
        auto gl = t.mutable_grad(li);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const double target = static_cast<std::size_t>(lab[r]) == j ? 1.0 : 0.0;
            gl[r * c + j] += g * (probs[r * c + j] - target);
          }
      });
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_same_tape(x, gamma);
  require_same_tape(x, beta);
  require_matrix(x, "layer_norm_rows");
  const std::size_t n = x.rows(), m = x.cols();
  if (gamma.size() != m || beta.size() != m) throw DimensionError("layer_norm_rows: affine parameters do not match width");
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  std::vector<double> out(n * m), xhat(n * m), inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.data() + r * m;
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += row[j];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(m);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) {
      xhat[r * m + j] = (row[j] - mu) * inv_std[r];
      out[r * m + j] = xhat[r * m + j] * gv[j] + bv[j];
    }
  }
  const std::size_t xi = x.node_id(), gi = gamma.node_id(), bi = beta.node_id();
  return x.tape().record(
      x.shape(), std::move(out), {x, gamma, beta},
      [xi, gi, bi, n, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t o) {
        auto g = t.grad(o);
        auto gv = t.value(gi);
        if (t.requires_grad(gi)) {
          auto gg = t.mutable_grad(gi);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < m; ++j) gg[j] += g[r * m + j] * xhat[r * m + j];
        }
        if (t.requires_grad(bi)) {
          auto gb = t.mutable_grad(bi);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < m; ++j) gb[j] += g[r * m + j];
        }
        if (t.requires_grad(xi)) {
          auto gx = t.mutable_grad(xi);
          const double inv_m = 1.0 / static_cast<double>(m);
          for (std::size_t r = 0; r < n; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              const double dxh = g[r * m + j] * gv[j];
              s1 += dxh;
              s2 += dxh * xhat[r * m + j];
            }
            for (std::size_t j = 0; j < m; ++j) {
              const double dxh = g[r * m + j] * gv[j];
              gx[r * m + j] += inv_std[r] * (dxh - inv_m * s1 - xhat[r * m + j] * inv_m * s2);
            }
          }
        }
      });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_rows");
  const std::size_t m = x.cols();
  if (begin + count > x.rows()) throw DimensionError("slice_rows: range exceeds " + to_string(x.shape()));
  auto xv = x.data();
  std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(begin * m),
                          xv.begin() + static_cast<std::ptrdiff_t>((begin + count) * m));
  const std::size_t xi = x.node_id();
  return x.tape().record({count, m}, std::move(out), {x}, [xi, begin, m](Tape& t, std::size_t o) {
    auto g = t.grad(o);
    auto gx = t.mutable_grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin * m + i] += g[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_cols");
  const std::size_t n = x.rows(), m = x.cols();
  if (begin + count > m) throw DimensionError("slice_cols: range exceeds " + to_string(x.shape()));
  auto xv = x.data();
  std::vector<double> out(n * count);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < count; ++j) out[r * count + j] = xv[r * m + begin + j];
  const std::size_t xi = x.node_id();
  return x.tape().record({n, count}, std::move(out), {x}, [xi, begin, n, m, count](Tape& t, std::size_t o) {
    auto g = t.grad(o);
    auto gx = t.mutable_grad(xi);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < count; ++j) gx[r * m + begin + j] += g[r * count + j];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no operands");
  const std::size_t m = parts.front().cols();
  std::size_t n = 0;
  for (const Tensor& p : parts) {
    require_matrix(p, "concat_rows");
    require_same_tape(parts.front(), p);
    if (p.cols() != m) throw DimensionError("concat_rows: column counts differ");
    n += p.rows();
  }
  std::vector<double> out;
  out.reserve(n * m);
  std::vector<std::size_t> ids, offsets;
  for (const Tensor& p : parts) {
    offsets.push_back(out.size());
    ids.push_back(p.node_id());
    auto v = p.data();
    out.insert(out.end(), v.begin(), v.end());
  }
  return parts.front().tape().record({n, m}, std::move(out), parts, [ids, offsets](Tape& t, std::size_t o) {
    auto g = t.grad(o);
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (!t.requires_grad(ids[p])) continue;
      auto gp = t.mutable_grad(ids[p]);
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[p] + i];
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  const std::size_t n = parts.front().rows();
  std::size_t m = 0;
  std::vector<std::size_t> ids, widths, offsets;
  for (const Tensor& p : parts) {
    require_matrix(p, "concat_cols");
    require_same_tape(parts.front(), p);
    if (p.rows() != n) throw DimensionError("concat_cols: row counts differ");
    ids.push_back(p.node_id());
    widths.push_back(p.cols());
    offsets.push_back(m);
    m += p.cols();
  }
  std::vector<double> out(n * m);
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto v = parts[p].data();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < widths[p]; ++j) out[r * m + offsets[p] + j] = v[r * widths[p] + j];
  }
  return parts.front().tape().record({n, m}, std::move(out), parts, [ids, widths, offsets, n, m](Tape& t, std::size_t o) {
    auto g = t.grad(o);
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (!t.requires_grad(ids[p])) continue;
      auto gp = t.mutable_grad(ids[p]);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < widths[p]; ++j) gp[r * widths[p] + j] += g[r * m + offsets[p] + j];
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "gather_rows");
  const std::size_t v = table.rows(), d = table.cols();
  auto tv = table.data();
  std::vector<double> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= v) {
      throw InputError("gather_rows: id " + std::to_string(ids[r]) + " outside table of " + std::to_string(v) + " rows");
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[r]) * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  std::vector<int> idv(ids.begin(), ids.end());
  const std::size_t ti = table.node_id();
  return table.tape().record({ids.size(), d}, std::move(out), {table}, [ti, d, idv = std::move(idv)](Tape& t, std::size_t o) {
    auto g = t.grad(o);
    auto gt = t.mutable_grad(ti);
    for (std::size_t r = 0; r < idv.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) gt[static_cast<std::size_t>(idv[r]) * d + j] += g[r * d + j];
  });
}

}  // namespace finegates::ad
