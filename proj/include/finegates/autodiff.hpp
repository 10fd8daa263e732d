#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// 64-bit tensors. A Tape is rebuilt for every forward pass; Tensors are
// lightweight handles into the tape that produced them.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace finegates::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// What a parameter is for. Drives optimizer grouping, weight decay and
/// parameter accounting.
enum class ParamRole : std::uint8_t {
  frozen,          // pretrained base weights, embeddings, biases
  gate,            // gate mu vectors (the Omega group)
  lora,            // low-rank factors
  layer_norm,      // always-trainable normalization parameters
  head,            // classifier head
  base_trainable,  // base weights unfrozen for full finetuning
};

struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  ParamRole role = ParamRole::frozen;

  Parameter() = default;
  Parameter(std::string name, Shape shape, std::vector<double> value, ParamRole role);

  bool trainable() const noexcept { return role != ParamRole::frozen; }
  std::size_t size() const noexcept { return value.size(); }
  void zero_grad();
};

class Tape;

class Tensor {
 public:
  Tensor() = default;

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t size() const;
  std::span<const double> data() const;
  /// Empty when the tensor does not require a gradient or none was produced.
  std::span<const double> grad() const;
  bool requires_grad() const;
  std::size_t node_id() const noexcept { return id_; }
  Tape& tape() const;
  bool valid() const noexcept { return tape_ != nullptr; }
  /// Value of a one-element tensor.
  double item() const;

 private:
  friend class Tape;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t out)>;

  explicit Tape(bool grad_enabled = true);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Tensor constant(Shape shape, std::vector<double> value);
  Tensor leaf(Shape shape, std::vector<double> value, bool requires_grad);
  /// Binds a persistent parameter. The tape reads the parameter's storage
  /// in place and accumulates gradients straight into Parameter::grad.
  Tensor parameter(Parameter& p);

  /// Accumulates dLoss/dx into every gradient-carrying leaf reachable from
  /// `loss`. Intermediate gradients are reset on each call; leaf gradients
  /// keep accumulating until zeroed by the owner.
  void backward(const Tensor& loss);

  // Op authoring interface.
  Tensor record(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs, BackwardFn fn);
  Tensor record(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs, BackwardFn fn);
  std::span<const double> value(std::size_t id) const;
  std::span<const double> grad(std::size_t id) const;
  std::span<double> mutable_grad(std::size_t id);
  bool requires_grad(std::size_t id) const;
  const Shape& shape(std::size_t id) const;

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    Parameter* param = nullptr;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = true;
  };

  Tensor push(Node node);
  const Node& node(std::size_t id) const;
  Node& node(std::size_t id);

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

// ---------------------------------------------------------------------------
// Primitive operations. All operands must live on the same tape.

/// a[m x k] . b[k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[n x k] . w[m x k]^T, the layer orientation (w maps k inputs to m outputs).
Tensor linear(const Tensor& x, const Tensor& w);
Tensor transpose(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// x[n x m] + v[m] broadcast over rows.
Tensor add_row_vector(const Tensor& x, const Tensor& v);
/// a * x + b elementwise with scalar constants.
Tensor affine(const Tensor& x, double a, double b);
Tensor scale(const Tensor& x, double a);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// diag(row_gates) . w . diag(col_gates)
Tensor scale_rows_cols(const Tensor& w, const Tensor& row_gates, const Tensor& col_gates);

/// Elementwise clip to [0, 1]. Gradient is 1 strictly inside (0, 1) and 0
/// elsewhere, including the boundary points themselves.
Tensor clamp01(const Tensor& x);
/// Elementwise max(x, floor). Gradient flows only where x > floor.
Tensor maximum(const Tensor& x, double floor);

/// Exact gelu, x * Phi(x).
Tensor gelu(const Tensor& x);
Tensor erf_op(const Tensor& x);
Tensor tanh_op(const Tensor& x);

Tensor softmax_rows(const Tensor& x);
/// Mean over rows of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
/// Rows of table[v x d] selected by ids, giving [ids.size() x d].
Tensor gather_rows(const Tensor& table, std::span<const int> ids);

}  // namespace finegates::ad
