#pragma once

// Linear layers over a frozen base matrix W0 [out x in]:
//   gated:       h = [diag(w_r) . W0 . diag(w_c)] x
//   gated_lora:  h = [diag(w_r) . (W0 + scale * W_B W_A) . diag(w_c)] x
// plus the baselines (frozen, lora, full) and fuse-then-prune export.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "finegates/autodiff.hpp"
#include "finegates/gates.hpp"
#include "finegates/gemm.hpp"
#include "finegates/parameters.hpp"

namespace finegates::adapters {

enum class LayerKind : std::uint8_t {
  frozen,      // W0 only, nothing trainable
  gated,       // row and column gates over frozen W0
  gated_lora,  // gates over W0 + scale * W_B W_A
  lora,        // W0 + scale * W_B W_A, no gates
  full,        // W0 itself trainable
};

std::string_view to_string(LayerKind kind);
bool has_gates(LayerKind kind) noexcept;
bool has_lora(LayerKind kind) noexcept;

inline constexpr double kLoraInitStd = 0.02;

struct LayerSpec {
  std::string name;
  std::size_t out_features = 0;
  std::size_t in_features = 0;
  LayerKind kind = LayerKind::gated;
  bool bias = false;
  std::size_t lora_rank = 0;
  double lora_scale = 1.0;
};

/// Physically compacted matrix: only rows and columns whose hard mask is 1
/// survive, with index maps back to the original layout.
class PrunedLinear {
 public:
  PrunedLinear() = default;
  PrunedLinear(std::string name, std::size_t out_features, std::size_t in_features, std::vector<std::size_t> kept_rows,
               std::vector<std::size_t> kept_cols, std::vector<double> weight, std::vector<double> bias);

  const std::string& name() const noexcept { return name_; }
  std::size_t out_features() const noexcept { return out_; }
  std::size_t in_features() const noexcept { return in_; }
  const std::vector<std::size_t>& kept_rows() const noexcept { return kept_rows_; }
  const std::vector<std::size_t>& kept_cols() const noexcept { return kept_cols_; }
  /// [kept_rows x kept_cols], row-major.
  const std::vector<double>& weight() const noexcept { return weight_; }
  const std::vector<double>& bias() const noexcept { return bias_; }
  std::size_t removed_params() const noexcept { return out_ * in_ - kept_rows_.size() * kept_cols_.size(); }

  /// Gathers x at the kept columns, multiplies by the compact matrix and
  /// scatters into zeros at dropped output rows. x is [n x in_features].
  std::vector<double> forward(std::span<const double> x, std::size_t n) const;
  /// Tape-level wrapper; the output is a constant (pruned layers are inference-only).
  ad::Tensor forward(ad::Tape& tape, const ad::Tensor& x) const;

 private:
  std::string name_;
  std::size_t out_ = 0;
  std::size_t in_ = 0;
  std::vector<std::size_t> kept_rows_;
  std::vector<std::size_t> kept_cols_;
  std::vector<double> weight_;
  std::vector<double> bias_;
  gemm::PackedMatrix<double> packed_;
};

class AdaptedLinear {
 public:
  /// Registers the layer's parameters in `store`. `base_weight` is the
  /// pretrained W0 ([out x in]); `base_bias` may be empty when spec.bias is off.
  AdaptedLinear(ad::ParameterStore& store, const LayerSpec& spec, std::vector<double> base_weight,
                std::vector<double> base_bias, std::mt19937_64& rng);

  const LayerSpec& spec() const noexcept { return spec_; }
  const std::string& name() const noexcept { return spec_.name; }
  LayerKind kind() const noexcept { return spec_.kind; }
  std::size_t out_features() const noexcept { return spec_.out_features; }
  std::size_t in_features() const noexcept { return spec_.in_features; }

  const ad::Parameter& base_weight() const noexcept { return *weight_; }
  const ad::Parameter* bias() const noexcept { return bias_; }
  ad::Parameter* lora_a() noexcept { return lora_a_; }
  ad::Parameter* lora_b() noexcept { return lora_b_; }
  std::optional<gates::GateVector> row_gates() const;
  std::optional<gates::GateVector> col_gates() const;

  /// Stochastic gates drawn from `noise` under the names "<layer>.gate_rows"
  /// and "<layer>.gate_cols".
  ad::Tensor forward_train(ad::Tape& tape, const ad::Tensor& x, gates::NoiseSource& noise) const;
  /// Deterministic gates clamp01(0.5 + mu).
  ad::Tensor forward_eval(ad::Tape& tape, const ad::Tensor& x) const;
  /// forward_eval without a caller-provided tape.
  std::vector<double> forward_eval(std::span<const double> x, std::size_t n) const;

  /// diag(g_r) . (W0 + scale W_B W_A) . diag(g_c) with evaluation gates.
  std::vector<double> fused_weight() const;
  /// Fuses and removes rows and columns whose hard mask is 0.
  /// Throws DegenerateLayerError if every row or every column would go.
  PrunedLinear fuse(double threshold = 0.0) const;
  /// Entries of W0 in rows or columns whose hard mask is 0.
  std::size_t removable_params(double threshold = 0.0) const;

 private:
  ad::Tensor apply(ad::Tape& tape, const ad::Tensor& x, const ad::Tensor* row_gates, const ad::Tensor* col_gates) const;
  ad::Tensor effective_weight(ad::Tape& tape, const ad::Tensor* row_gates, const ad::Tensor* col_gates) const;

  LayerSpec spec_;
  ad::Parameter* weight_ = nullptr;
  ad::Parameter* bias_ = nullptr;
  ad::Parameter* gate_rows_ = nullptr;
  ad::Parameter* gate_cols_ = nullptr;
  ad::Parameter* lora_a_ = nullptr;
  ad::Parameter* lora_b_ = nullptr;
};

}  // namespace finegates::adapters
