#include "finegates/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "finegates/errors.hpp"

namespace finegates::model {

AdapterKind parse_adapter_kind(std::string_view text) {
  if (text == "gates_only") return AdapterKind::gates_only;
  if (text == "gates_plus_lora") return AdapterKind::gates_plus_lora;
  if (text == "lora_only") return AdapterKind::lora_only;
  if (text == "full_finetune") return AdapterKind::full_finetune;
  if (text == "frozen") return AdapterKind::frozen;
  throw ConfigError("unknown adapter_kind '" + std::string(text) + "'");
}

std::string_view to_string(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::gates_only: return "gates_only";
    case AdapterKind::gates_plus_lora: return "gates_plus_lora";
    case AdapterKind::lora_only: return "lora_only";
    case AdapterKind::full_finetune: return "full_finetune";
    case AdapterKind::frozen: return "frozen";
  }
  return "unknown";
}

void ModelConfig::validate() const {
  if (num_blocks == 0) throw ConfigError("num_blocks must be positive");
  if (model_dim == 0 || num_heads == 0 || ffn_dim == 0) throw ConfigError("model dimensions must be positive");
  if (model_dim % num_heads != 0) {
    throw ConfigError("model_dim " + std::to_string(model_dim) + " is not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (vocab_size <= data::kFirstTokenId) throw ConfigError("vocab_size must exceed the reserved token ids");
  if (max_seq_len == 0) throw ConfigError("max_seq_len must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  const bool lora = adapter_kind == AdapterKind::gates_plus_lora || adapter_kind == AdapterKind::lora_only;
  if (lora && lora_rank == 0) throw ConfigError("lora_rank must be at least 1 when LoRA is active");
}

std::string layer_name(std::size_t block, std::string_view layer) {
  return "block" + std::to_string(block) + "." + std::string(layer);
}

namespace {

struct LayerShape {
  std::size_t out, in;
};

LayerShape shape_of(const ModelConfig& cfg, std::string_view layer) {
  if (layer == "mlp_in") return {cfg.ffn_dim, cfg.model_dim};
  if (layer == "mlp_out") return {cfg.model_dim, cfg.ffn_dim};
  return {cfg.model_dim, cfg.model_dim};
}

bool is_mlp(std::string_view layer) { return layer == "mlp_in" || layer == "mlp_out"; }

adapters::LayerKind layer_kind(const ModelConfig& cfg, std::string_view layer) {
  using adapters::LayerKind;
  switch (cfg.adapter_kind) {
    case AdapterKind::gates_only:
      return is_mlp(layer) && !cfg.gate_mlp ? LayerKind::frozen : LayerKind::gated;
    case AdapterKind::gates_plus_lora:
      return is_mlp(layer) && !cfg.gate_mlp ? LayerKind::lora : LayerKind::gated_lora;
    case AdapterKind::lora_only: return LayerKind::lora;
    case AdapterKind::full_finetune: return LayerKind::full;
    case AdapterKind::frozen: return LayerKind::frozen;
  }
  return LayerKind::frozen;
}

std::vector<double> normal_vector(std::mt19937_64& rng, std::size_t n, double std) {
  std::normal_distribution<double> normal(0.0, std);
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

}  // namespace

Backbone make_backbone(const ModelConfig& cfg, std::span<const double> token_embedding) {
  cfg.validate();
  const std::size_t d = cfg.model_dim;
  std::mt19937_64 rng(cfg.backbone_seed);
  Backbone b;
  if (token_embedding.empty()) {
    b.token_embedding = normal_vector(rng, cfg.vocab_size * d, 1.0);
  } else {
    if (token_embedding.size() != cfg.vocab_size * d) {
      throw DimensionError("token embedding has " + std::to_string(token_embedding.size()) + " values, expected " +
                           std::to_string(cfg.vocab_size) + "x" + std::to_string(d));
    }
    b.token_embedding.assign(token_embedding.begin(), token_embedding.end());
  }
  b.position_embedding = normal_vector(rng, cfg.max_seq_len * d, 0.1);
  for (std::size_t i = 0; i < cfg.num_blocks; ++i) {
    for (auto layer : kBlockLayers) {
      const auto [out, in] = shape_of(cfg, layer);
      const auto name = layer_name(i, layer);
      b.weights[name] = normal_vector(rng, out * in, 1.0 / std::sqrt(static_cast<double>(in)));
      if (cfg.use_bias) b.biases[name] = normal_vector(rng, out, 0.02);
    }
  }
  return b;
}

Model::Model(const ModelConfig& cfg, const Backbone& backbone, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.model_dim;
  // Separate streams so the head does not depend on how many LoRA draws
  // the adapter layers consumed.
  std::mt19937_64 rng(init_seed);
  std::mt19937_64 head_rng(init_seed ^ 0x5851f42d4c957f2dULL);
  token_embedding_ = &store_.add("embed.token", {cfg_.vocab_size, d}, backbone.token_embedding, ad::ParamRole::frozen);
  position_embedding_ =
      &store_.add("embed.position", {cfg_.max_seq_len, d}, backbone.position_embedding, ad::ParamRole::frozen);
  blocks_.resize(cfg_.num_blocks);
  for (std::size_t i = 0; i < cfg_.num_blocks; ++i) {
    Block& blk = blocks_[i];
    blk.layers.reserve(std::size(kBlockLayers));
    for (auto layer : kBlockLayers) {
      const auto [out, in] = shape_of(cfg_, layer);
      adapters::LayerSpec spec;
      spec.name = layer_name(i, layer);
      spec.out_features = out;
      spec.in_features = in;
      spec.kind = layer_kind(cfg_, layer);
      spec.bias = cfg_.use_bias;
      spec.lora_rank = cfg_.lora_rank;
      spec.lora_scale = cfg_.lora_scale;
      auto w = backbone.weights.find(spec.name);
      if (w == backbone.weights.end()) throw ContractError("backbone lacks weights for " + spec.name);
      std::vector<double> bias;
      if (cfg_.use_bias) {
        auto b = backbone.biases.find(spec.name);
        if (b == backbone.biases.end()) throw ContractError("backbone lacks bias for " + spec.name);
        bias = b->second;
      }
      blk.layers.emplace_back(store_, spec, w->second, std::move(bias), rng);
    }
    const std::string p = "block" + std::to_string(i);
    blk.ln1_gamma = &store_.add(p + ".ln1.gamma", {d}, std::vector<double>(d, 1.0), ad::ParamRole::layer_norm);
    blk.ln1_beta = &store_.add(p + ".ln1.beta", {d}, std::vector<double>(d, 0.0), ad::ParamRole::layer_norm);
    blk.ln2_gamma = &store_.add(p + ".ln2.gamma", {d}, std::vector<double>(d, 1.0), ad::ParamRole::layer_norm);
    blk.ln2_beta = &store_.add(p + ".ln2.beta", {d}, std::vector<double>(d, 0.0), ad::ParamRole::layer_norm);
  }
  const double head_std = 1.0 / std::sqrt(static_cast<double>(d));
  head_dense_w_ = &store_.add("head.dense.weight", {d, d}, normal_vector(head_rng, d * d, head_std), ad::ParamRole::head);
  head_dense_b_ = &store_.add("head.dense.bias", {d}, std::vector<double>(d, 0.0), ad::ParamRole::head);
  head_out_w_ = &store_.add("head.out.weight", {cfg_.num_classes, d}, normal_vector(head_rng, cfg_.num_classes * d, head_std),
                            ad::ParamRole::head);
  head_out_b_ =
      &store_.add("head.out.bias", {cfg_.num_classes}, std::vector<double>(cfg_.num_classes, 0.0), ad::ParamRole::head);
}

std::vector<const adapters::AdaptedLinear*> Model::layers() const {
  std::vector<const adapters::AdaptedLinear*> out;
  for (const auto& b : blocks_)
    for (const auto& l : b.layers) out.push_back(&l);
  return out;
}

const adapters::AdaptedLinear& Model::layer(const std::string& name) const {
  for (const auto* l : layers())
    if (l->name() == name) return *l;
  throw ContractError("no layer named '" + name + "'");
}

std::vector<gates::GateVector> Model::gate_vectors() {
  std::vector<gates::GateVector> out;
  for (const auto* l : layers()) {
    if (!adapters::has_gates(l->kind())) continue;
    out.emplace_back(store_.at(l->name() + ".gate_rows"));
    out.emplace_back(store_.at(l->name() + ".gate_cols"));
  }
  return out;
}

bool Model::has_gates() const {
  for (const auto* l : layers())
    if (adapters::has_gates(l->kind())) return true;
  return false;
}

ad::Tensor Model::project(ad::Tape& tape, const adapters::AdaptedLinear& layer, const ad::Tensor& x, Mode mode,
                          gates::NoiseSource* noise) const {
  if (auto it = pruned_.find(layer.name()); it != pruned_.end()) {
    if (mode == Mode::train) throw ContractError("pruned model cannot be trained");
    return it->second.forward(tape, x);
  }
  if (mode == Mode::eval) return layer.forward_eval(tape, x);
  if (adapters::has_gates(layer.kind()) && !noise) throw ContractError("train-mode forward needs a noise source");
  if (!noise) {
    auto zero = gates::NoiseSource::zeros();
    return layer.forward_train(tape, x, zero);
  }
  return layer.forward_train(tape, x, *noise);
}

ad::Tensor Model::attention(ad::Tape& tape, const Block& block, const ad::Tensor& x,
                            std::span<const std::size_t> offsets, Mode mode, gates::NoiseSource* noise) const {
  const auto q = project(tape, block.layers[0], x, mode, noise);
  const auto k = project(tape, block.layers[1], x, mode, noise);
  const auto v = project(tape, block.layers[2], x, mode, noise);
  const std::size_t hd = cfg_.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<ad::Tensor> seqs;
  seqs.reserve(offsets.size() - 1);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t begin = offsets[s], len = offsets[s + 1] - offsets[s];
    const auto qs = ad::slice_rows(q, begin, len);
    const auto ks = ad::slice_rows(k, begin, len);
    const auto vs = ad::slice_rows(v, begin, len);
    std::vector<ad::Tensor> heads;
    heads.reserve(cfg_.num_heads);
    for (std::size_t h = 0; h < cfg_.num_heads; ++h) {
      const auto qh = ad::slice_cols(qs, h * hd, hd);
      const auto kh = ad::slice_cols(ks, h * hd, hd);
      const auto vh = ad::slice_cols(vs, h * hd, hd);
      const auto scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
      heads.push_back(ad::matmul(ad::softmax_rows(scores), vh));
    }
    seqs.push_back(cfg_.num_heads == 1 ? heads[0] : ad::concat_cols(heads));
  }
  const auto attended = seqs.size() == 1 ? seqs[0] : ad::concat_rows(seqs);
  return project(tape, block.layers[3], attended, mode, noise);
}

ad::Tensor Model::forward(ad::Tape& tape, const data::Batch& batch, Mode mode, gates::NoiseSource* noise) const {
  if (batch.size == 0) throw InputError("empty batch");
  if (batch.seq_len > cfg_.max_seq_len) {
    throw InputError("sequence length " + std::to_string(batch.seq_len) + " exceeds max_seq_len " +
                     std::to_string(cfg_.max_seq_len));
  }
  if (batch.ids.size() != batch.size * batch.seq_len || batch.mask.size() != batch.ids.size()) {
    throw DimensionError("batch buffers do not match its shape");
  }
  // Only real tokens enter the network; each sequence attends within itself,
  // so padding can never influence the logits.
  std::vector<int> ids, positions;
  std::vector<std::size_t> offsets{0};
  std::vector<int> first;
  for (std::size_t b = 0; b < batch.size; ++b) {
    bool any = false;
    for (std::size_t t = 0; t < batch.seq_len; ++t) {
      if (!batch.mask[b * batch.seq_len + t]) continue;
      if (!any) first.push_back(static_cast<int>(ids.size()));
      any = true;
      const int id = batch.ids[b * batch.seq_len + t];
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
        throw InputError("token id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(cfg_.vocab_size));
      }
      ids.push_back(id);
      positions.push_back(static_cast<int>(t));
    }
    if (!any) throw InputError("sequence " + std::to_string(b) + " of the batch has no tokens");
    offsets.push_back(ids.size());
  }

  auto x = ad::add(ad::gather_rows(tape.parameter(*token_embedding_), ids),
                   ad::gather_rows(tape.parameter(*position_embedding_), positions));
  for (const Block& blk : blocks_) {
    auto a = attention(tape, blk, x, offsets, mode, noise);
    x = ad::layer_norm_rows(ad::add(x, a), tape.parameter(*blk.ln1_gamma), tape.parameter(*blk.ln1_beta));
    auto f = project(tape, blk.layers[5], ad::gelu(project(tape, blk.layers[4], x, mode, noise)), mode, noise);
    x = ad::layer_norm_rows(ad::add(x, f), tape.parameter(*blk.ln2_gamma), tape.parameter(*blk.ln2_beta));
  }
  auto pooled = ad::gather_rows(x, first);
  auto hidden = ad::tanh_op(
      ad::add_row_vector(ad::linear(pooled, tape.parameter(*head_dense_w_)), tape.parameter(*head_dense_b_)));
  return ad::add_row_vector(ad::linear(hidden, tape.parameter(*head_out_w_)), tape.parameter(*head_out_b_));
}

std::vector<double> Model::logits(const data::Batch& batch) const {
  ad::Tape tape(false);
  auto out = forward(tape, batch, Mode::eval).data();
  return {out.begin(), out.end()};
}

ParamCounts Model::count_params(double threshold) const {
  ParamCounts c;
  store_.for_each([&](const ad::Parameter& p) {
    switch (p.role) {
      case ad::ParamRole::frozen: c.frozen += p.size(); break;
      case ad::ParamRole::layer_norm: c.layer_norm += p.size(); break;
      case ad::ParamRole::head: c.head += p.size(); break;
      case ad::ParamRole::gate:
      case ad::ParamRole::lora:
      case ad::ParamRole::base_trainable: c.trainable += p.size(); break;
    }
  });
  for (const auto* l : layers()) {
    if (!adapters::has_gates(l->kind())) continue;
    c.gated += l->out_features() * l->in_features();
    for (const auto& g : {l->row_gates(), l->col_gates()}) {
      const auto mask = gates::hard_mask(g->mu(), threshold);
      c.gates += mask.size();
      c.closed_gates += static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{0}));
    }
    if (auto it = pruned_.find(l->name()); it != pruned_.end()) {
      c.removable += it->second.removed_params();
    } else {
      c.removable += l->removable_params(threshold);
    }
  }
  return c;
}

void Model::prune(double threshold) {
  std::map<std::string, adapters::PrunedLinear> fused;
  for (const auto* l : layers()) {
    if (!adapters::has_gates(l->kind()) || pruned_.count(l->name())) continue;
    fused.emplace(l->name(), l->fuse(threshold));
  }
  for (auto& [name, p] : fused) pruned_.insert_or_assign(name, std::move(p));
}

void Model::install_pruned(adapters::PrunedLinear layer) {
  const auto& l = this->layer(layer.name());
  if (l.out_features() != layer.out_features() || l.in_features() != layer.in_features()) {
    throw DimensionError("pruned layer '" + layer.name() + "' does not match the model shape");
  }
  std::string name = layer.name();
  pruned_.insert_or_assign(std::move(name), std::move(layer));
}

void Model::impose_sparsity(double level) {
  if (!(level >= 0.0 && level < 1.0)) throw ConfigError("sparsity level must lie in [0, 1)");
  for (auto& g : gate_vectors()) {
    auto& mu = g.parameter().value;
    const auto n = static_cast<std::size_t>(std::floor(level * static_cast<double>(mu.size())));
    std::vector<std::size_t> order(mu.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mu[a] < mu[b]; });
    for (std::size_t i = 0; i < n; ++i) mu[order[i]] = gates::kMuMin;
  }
}

}  // namespace finegates::model
