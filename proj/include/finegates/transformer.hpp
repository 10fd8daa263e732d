#pragma once

// Post-LN transformer encoder for sequence classification. Each block has six
// projection matrices (Wq, Wk, Wv, Wo, Wmlp_in, Wmlp_out) built as adapter
// layers over frozen base weights; embeddings are frozen, layer norms and the
// first-token classifier head are trainable.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "finegates/adapters.hpp"
#include "finegates/autodiff.hpp"
#include "finegates/data.hpp"
#include "finegates/gates.hpp"
#include "finegates/parameters.hpp"

namespace finegates::model {

enum class AdapterKind : std::uint8_t {
  gates_only,
  gates_plus_lora,
  lora_only,
  full_finetune,
  frozen,  // nothing but the head and layer norms train; the ungated reference
};

AdapterKind parse_adapter_kind(std::string_view text);
std::string_view to_string(AdapterKind kind);

struct ModelConfig {
  std::size_t num_blocks = 2;
  std::size_t model_dim = 32;
  std::size_t num_heads = 2;
  std::size_t ffn_dim = 64;
  std::size_t vocab_size = 2500;
  std::size_t max_seq_len = 16;
  std::size_t num_classes = 2;
  AdapterKind adapter_kind = AdapterKind::gates_only;
  std::size_t lora_rank = 4;
  double lora_scale = 1.0;
  bool gate_mlp = true;
  bool use_bias = false;
  /// Seed of the simulated pretrained weights. Independent of the run seed so
  /// that runs with different seeds adapt the same backbone.
  std::uint64_t backbone_seed = 1234;

  void validate() const;
  std::size_t head_dim() const { return model_dim / num_heads; }
};

/// Simulated pretrained weights.
struct Backbone {
  std::vector<double> token_embedding;     // [vocab x d]
  std::vector<double> position_embedding;  // [max_seq_len x d]
  std::map<std::string, std::vector<double>> weights;  // per layer, [out x in]
  std::map<std::string, std::vector<double>> biases;   // per layer, [out]
};

/// Seeded random backbone. A non-empty `token_embedding` replaces the random
/// embedding table (the planted task uses its feature table here).
Backbone make_backbone(const ModelConfig& cfg, std::span<const double> token_embedding = {});

/// Layer names of one block in forward order.
inline constexpr std::string_view kBlockLayers[] = {"wq", "wk", "wv", "wo", "mlp_in", "mlp_out"};
std::string layer_name(std::size_t block, std::string_view layer);

struct ParamCounts {
  std::size_t trainable = 0;   // gates, LoRA factors and unfrozen base weights
  std::size_t frozen = 0;
  std::size_t layer_norm = 0;  // trainable, reported separately
  std::size_t head = 0;        // trainable, reported separately
  std::size_t gated = 0;       // entries of matrices that carry gates
  std::size_t removable = 0;   // entries of gated matrices in hard-masked rows/cols
  std::size_t gates = 0;       // gate entries over all gate vectors
  std::size_t closed_gates = 0;

  /// removable / gated, 0 when nothing is gated.
  double achieved_sparsity() const { return gated ? static_cast<double>(removable) / static_cast<double>(gated) : 0.0; }
  /// Fraction of gates whose hard mask is 0.
  double gate_sparsity() const { return gates ? static_cast<double>(closed_gates) / static_cast<double>(gates) : 0.0; }
};

enum class Mode : std::uint8_t { train, eval };

class Model {
 public:
  /// `init_seed` drives the adapter and head initialisation.
  Model(const ModelConfig& cfg, const Backbone& backbone, std::uint64_t init_seed);

  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const noexcept { return cfg_; }
  ad::ParameterStore& parameters() noexcept { return store_; }
  const ad::ParameterStore& parameters() const noexcept { return store_; }

  /// All projection layers, block by block in forward order.
  std::vector<const adapters::AdaptedLinear*> layers() const;
  const adapters::AdaptedLinear& layer(const std::string& name) const;
  /// Every gate vector (rows then columns, layer by layer).
  std::vector<gates::GateVector> gate_vectors();
  bool has_gates() const;

  /// Logits [batch x num_classes]. Train mode draws gate noise from `noise`,
  /// which must then be non-null whenever the model has gates.
  ad::Tensor forward(ad::Tape& tape, const data::Batch& batch, Mode mode, gates::NoiseSource* noise = nullptr) const;
  /// Eval-mode logits without gradients.
  std::vector<double> logits(const data::Batch& batch) const;

  ParamCounts count_params(double threshold = 0.0) const;

  /// Replaces every gated layer by its fused, compacted form. The model
  /// becomes inference-only. Throws DegenerateLayerError.
  void prune(double threshold = 0.0);
  bool is_pruned() const noexcept { return !pruned_.empty(); }
  const std::map<std::string, adapters::PrunedLinear>& pruned_layers() const noexcept { return pruned_; }
  /// Installs a pruned layer directly (checkpoint loading).
  void install_pruned(adapters::PrunedLinear layer);

  /// Sets the lowest-mu floor(level * n) entries of every gate vector to the
  /// lower mu bound, closing them for evaluation.
  void impose_sparsity(double level);

 private:
  struct Block {
    std::vector<adapters::AdaptedLinear> layers;  // kBlockLayers order
    ad::Parameter* ln1_gamma = nullptr;
    ad::Parameter* ln1_beta = nullptr;
    ad::Parameter* ln2_gamma = nullptr;
    ad::Parameter* ln2_beta = nullptr;
  };

  ad::Tensor project(ad::Tape& tape, const adapters::AdaptedLinear& layer, const ad::Tensor& x, Mode mode,
                     gates::NoiseSource* noise) const;
  ad::Tensor attention(ad::Tape& tape, const Block& block, const ad::Tensor& x, std::span<const std::size_t> offsets,
                       Mode mode, gates::NoiseSource* noise) const;

  ModelConfig cfg_;
  ad::ParameterStore store_;
  ad::Parameter* token_embedding_ = nullptr;
  ad::Parameter* position_embedding_ = nullptr;
  std::vector<Block> blocks_;
  ad::Parameter* head_dense_w_ = nullptr;
  ad::Parameter* head_dense_b_ = nullptr;
  ad::Parameter* head_out_w_ = nullptr;
  ad::Parameter* head_out_b_ = nullptr;
  std::map<std::string, adapters::PrunedLinear> pruned_;
};

}  // namespace finegates::model
