#include "finegates/adapters.hpp"

#include <algorithm>

#include "finegates/errors.hpp"

namespace finegates::adapters {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::frozen: return "frozen";
    case LayerKind::gated: return "gated";
    case LayerKind::gated_lora: return "gated_lora";
    case LayerKind::lora: return "lora";
    case LayerKind::full: return "full";
  }
  return "unknown";
}

bool has_gates(LayerKind kind) noexcept { return kind == LayerKind::gated || kind == LayerKind::gated_lora; }
bool has_lora(LayerKind kind) noexcept { return kind == LayerKind::gated_lora || kind == LayerKind::lora; }

// ---------------------------------------------------------------------------
// PrunedLinear

PrunedLinear::PrunedLinear(std::string name, std::size_t out_features, std::size_t in_features,
                           std::vector<std::size_t> kept_rows, std::vector<std::size_t> kept_cols,
                           std::vector<double> weight, std::vector<double> bias)
    : name_(std::move(name)),
      out_(out_features),
      in_(in_features),
      kept_rows_(std::move(kept_rows)),
      kept_cols_(std::move(kept_cols)),
      weight_(std::move(weight)),
      bias_(std::move(bias)) {
  if (kept_rows_.empty() || kept_cols_.empty()) throw DegenerateLayerError(name_);
  if (weight_.size() != kept_rows_.size() * kept_cols_.size()) {
    throw DimensionError("pruned layer '" + name_ + "': weight size does not match kept indices");
  }
  if (!bias_.empty() && bias_.size() != kept_rows_.size()) {
    throw DimensionError("pruned layer '" + name_ + "': bias size does not match kept rows");
  }
  auto check_indices = [this](const std::vector<std::size_t>& idx, std::size_t bound, const char* what) {
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= bound || (i > 0 && idx[i] <= idx[i - 1])) {
        throw DimensionError("pruned layer '" + name_ + "': " + what + " must be sorted, unique and in range");
      }
    }
  };
  check_indices(kept_rows_, out_, "kept rows");
  check_indices(kept_cols_, in_, "kept cols");
  packed_ = gemm::PackedMatrix<double>(weight_, kept_rows_.size(), kept_cols_.size());
}

std::vector<double> PrunedLinear::forward(std::span<const double> x, std::size_t n) const {
  if (x.size() != n * in_) {
    throw DimensionError("pruned layer '" + name_ + "': input has " + std::to_string(n ? x.size() / n : 0) +
                         " columns, expected " + std::to_string(in_));
  }
  const std::size_t kr = kept_rows_.size(), kc = kept_cols_.size();
  std::vector<double> xg(n * kc), yc(n * kr);
  gemm::gather_columns<double>(x, n, in_, kept_cols_, xg);
  packed_.multiply(xg, n, yc);
  std::vector<double> out(n * out_, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < kr; ++i) {
      double v = yc[r * kr + i];
      if (!bias_.empty()) v = v + bias_[i];
      out[r * out_ + kept_rows_[i]] = v;
    }
  }
  return out;
}

ad::Tensor PrunedLinear::forward(ad::Tape& tape, const ad::Tensor& x) const {
  if (x.rank() != 2 || x.cols() != in_) {
    throw DimensionError("pruned layer '" + name_ + "': input " + ad::to_string(x.shape()) + " does not have width " +
                         std::to_string(in_));
  }
  const std::size_t n = x.rows();
  return tape.constant({n, out_}, forward(x.data(), n));
}

// ---------------------------------------------------------------------------
// AdaptedLinear

AdaptedLinear::AdaptedLinear(ad::ParameterStore& store, const LayerSpec& spec, std::vector<double> base_weight,
                             std::vector<double> base_bias, std::mt19937_64& rng)
    : spec_(spec) {
  const std::size_t k = spec.out_features, d = spec.in_features;
  if (k == 0 || d == 0) throw DimensionError("layer '" + spec.name + "' has a zero dimension");
  const auto base_role = spec.kind == LayerKind::full ? ad::ParamRole::base_trainable : ad::ParamRole::frozen;
  weight_ = &store.add(spec.name + ".weight", {k, d}, std::move(base_weight), base_role);
  if (spec.bias) {
    if (base_bias.empty()) base_bias.assign(k, 0.0);
    bias_ = &store.add(spec.name + ".bias", {k}, std::move(base_bias), ad::ParamRole::frozen);
  }
  if (has_gates(spec.kind)) {
    gate_rows_ = &store.add(spec.name + ".gate_rows", {k}, std::vector<double>(k, gates::kInitMu), ad::ParamRole::gate);
    gate_cols_ = &store.add(spec.name + ".gate_cols", {d}, std::vector<double>(d, gates::kInitMu), ad::ParamRole::gate);
  }
  if (has_lora(spec.kind)) {
    const std::size_t r = spec.lora_rank;
    if (r == 0) throw ConfigError("layer '" + spec.name + "': LoRA rank must be at least 1");
    std::normal_distribution<double> normal(0.0, kLoraInitStd);
    std::vector<double> a(r * d);
    for (double& v : a) v = normal(rng);
    lora_a_ = &store.add(spec.name + ".lora_a", {r, d}, std::move(a), ad::ParamRole::lora);
    lora_b_ = &store.add(spec.name + ".lora_b", {k, r}, std::vector<double>(k * r, 0.0), ad::ParamRole::lora);
  }
}

std::optional<gates::GateVector> AdaptedLinear::row_gates() const {
  if (!gate_rows_) return std::nullopt;
  return gates::GateVector(*gate_rows_);
}

std::optional<gates::GateVector> AdaptedLinear::col_gates() const {
  if (!gate_cols_) return std::nullopt;
  return gates::GateVector(*gate_cols_);
}

ad::Tensor AdaptedLinear::effective_weight(ad::Tape& tape, const ad::Tensor* row_gates,
                                           const ad::Tensor* col_gates) const {
  ad::Tensor w = tape.parameter(*weight_);
  if (lora_a_) {
    auto delta = ad::matmul(tape.parameter(*lora_b_), tape.parameter(*lora_a_));
    w = ad::add(w, ad::scale(delta, spec_.lora_scale));
  }
  if (row_gates) w = ad::scale_rows_cols(w, *row_gates, *col_gates);
  return w;
}

ad::Tensor AdaptedLinear::apply(ad::Tape& tape, const ad::Tensor& x, const ad::Tensor* row_gates,
                                const ad::Tensor* col_gates) const {
  if (x.rank() != 2 || x.cols() != spec_.in_features) {
    throw DimensionError("layer '" + spec_.name + "': input " + ad::to_string(x.shape()) + " does not have width " +
                         std::to_string(spec_.in_features));
  }
  ad::Tensor h = ad::linear(x, effective_weight(tape, row_gates, col_gates));
  if (bias_) {
    ad::Tensor b = tape.parameter(*bias_);
    if (row_gates) b = ad::mul(b, *row_gates);
    h = ad::add_row_vector(h, b);
  }
  return h;
}

ad::Tensor AdaptedLinear::forward_train(ad::Tape& tape, const ad::Tensor& x, gates::NoiseSource& noise) const {
  if (!gate_rows_) return apply(tape, x, nullptr, nullptr);
  auto gr = gates::sample_train_gates(tape.parameter(*gate_rows_), noise.draw(gate_rows_->name, gate_rows_->size()));
  auto gc = gates::sample_train_gates(tape.parameter(*gate_cols_), noise.draw(gate_cols_->name, gate_cols_->size()));
  return apply(tape, x, &gr, &gc);
}

ad::Tensor AdaptedLinear::forward_eval(ad::Tape& tape, const ad::Tensor& x) const {
  if (!gate_rows_) return apply(tape, x, nullptr, nullptr);
  auto gr = tape.constant(gate_rows_->shape, gates::eval_gates(gate_rows_->value));
  auto gc = tape.constant(gate_cols_->shape, gates::eval_gates(gate_cols_->value));
  return apply(tape, x, &gr, &gc);
}

std::vector<double> AdaptedLinear::forward_eval(std::span<const double> x, std::size_t n) const {
  ad::Tape tape(false);
  auto xt = tape.constant({n, spec_.in_features}, std::vector<double>(x.begin(), x.end()));
  auto out = forward_eval(tape, xt).data();
  return {out.begin(), out.end()};
}

std::vector<double> AdaptedLinear::fused_weight() const {
  ad::Tape tape(false);
  ad::Tensor w;
  if (gate_rows_) {
    auto gr = tape.constant(gate_rows_->shape, gates::eval_gates(gate_rows_->value));
    auto gc = tape.constant(gate_cols_->shape, gates::eval_gates(gate_cols_->value));
    w = effective_weight(tape, &gr, &gc);
  } else {
    w = effective_weight(tape, nullptr, nullptr);
  }
  auto v = w.data();
  return {v.begin(), v.end()};
}

namespace {
std::vector<std::size_t> kept_indices(const ad::Parameter* gate, std::size_t n, double threshold) {
  std::vector<std::size_t> kept;
  if (!gate) {
    kept.resize(n);
    for (std::size_t i = 0; i < n; ++i) kept[i] = i;
    return kept;
  }
  auto mask = gates::hard_mask(gate->value, threshold);
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i]) kept.push_back(i);
  return kept;
}
}  // namespace

PrunedLinear AdaptedLinear::fuse(double threshold) const {
  const std::size_t k = spec_.out_features, d = spec_.in_features;
  auto rows = kept_indices(gate_rows_, k, threshold);
  auto cols = kept_indices(gate_cols_, d, threshold);
  if (rows.empty() || cols.empty()) throw DegenerateLayerError(spec_.name);
  const auto fused = fused_weight();
  std::vector<double> compact;
  compact.reserve(rows.size() * cols.size());
  for (std::size_t i : rows)
    for (std::size_t j : cols) compact.push_back(fused[i * d + j]);
  std::vector<double> bias;
  if (bias_) {
    const auto row_eval = gate_rows_ ? gates::eval_gates(gate_rows_->value) : std::vector<double>();
    for (std::size_t i : rows) bias.push_back(gate_rows_ ? bias_->value[i] * row_eval[i] : bias_->value[i]);
  }
  return PrunedLinear(spec_.name, k, d, std::move(rows), std::move(cols), std::move(compact), std::move(bias));
}

std::size_t AdaptedLinear::removable_params(double threshold) const {
  const std::size_t k = spec_.out_features, d = spec_.in_features;
  const std::size_t kr = kept_indices(gate_rows_, k, threshold).size();
  const std::size_t kc = kept_indices(gate_cols_, d, threshold).size();
  return k * d - kr * kc;
}

}  // namespace finegates::adapters
