#include "finegates/gates.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>

#include "finegates/errors.hpp"

namespace finegates::gates {

SparsityLossMode parse_sparsity_loss_mode(std::string_view text) {
  if (text == "hinge") return SparsityLossMode::hinge;
  if (text == "paper_literal") return SparsityLossMode::paper_literal;
  throw ConfigError("unknown sparsity loss mode '" + std::string(text) + "' (expected hinge or paper_literal)");
}

std::string_view to_string(SparsityLossMode mode) {
  return mode == SparsityLossMode::hinge ? "hinge" : "paper_literal";
}

GateVector::GateVector(ad::Parameter& mu) : mu_(&mu) {
  if (mu.shape.size() != 1) throw DimensionError("gate vector '" + mu.name + "' must be one-dimensional");
}

void GateVector::project() {
  for (double& m : mu_->value) m = std::clamp(m, kMuMin, kMuMax);
}

ad::Tensor sample_train_gates(const ad::Tensor& mu, std::span<const double> noise) {
  if (noise.size() != mu.size()) {
    throw DimensionError("sample_train_gates: " + std::to_string(noise.size()) + " noise values for " +
                         std::to_string(mu.size()) + " gates");
  }
  std::vector<double> shift(noise.size());
  for (std::size_t j = 0; j < noise.size(); ++j) shift[j] = 0.5 + noise[j];
  auto& tape = mu.tape();
  return ad::clamp01(ad::add(mu, tape.constant(mu.shape(), std::move(shift))));
}

std::vector<double> eval_gates(std::span<const double> mu) {
  std::vector<double> out(mu.size());
  for (std::size_t j = 0; j < mu.size(); ++j) out[j] = std::max(0.0, std::min(1.0, 0.5 + mu[j]));
  return out;
}

namespace {
double erf_argument_scale(double sigma) { return -1.0 / (std::numbers::sqrt2 * sigma); }
}  // namespace

std::vector<double> open_probabilities(std::span<const double> mu, double sigma) {
  const double a = erf_argument_scale(sigma);
  std::vector<double> p(mu.size());
  for (std::size_t j = 0; j < mu.size(); ++j) p[j] = 0.5 - 0.5 * std::erf(a * (mu[j] + 0.5));
  return p;
}

double expected_open_fraction(std::span<const double> mu, double sigma) {
  if (mu.empty()) return 0.0;
  double acc = 0.0;
  for (double p : open_probabilities(mu, sigma)) acc += p;
  return acc / static_cast<double>(mu.size());
}

ad::Tensor expected_open_fraction(const ad::Tensor& mu, double sigma) {
  const double a = erf_argument_scale(sigma);
  // erf(a * mu + 0.5 a), then 1/2 - 1/2 erf(.), then the mean.
  auto e = ad::erf_op(ad::affine(mu, a, 0.5 * a));
  return ad::mean(ad::affine(e, -0.5, 0.5));
}

void validate_target_sparsity(double s) {
  if (!(s >= 0.0 && s < 1.0)) throw ConfigError("target sparsity must lie in [0, 1), got " + std::to_string(s));
}

double sparsity_loss(double open_fraction, double target_sparsity, SparsityLossMode mode) {
  validate_target_sparsity(target_sparsity);
  if (mode == SparsityLossMode::hinge) return std::max(open_fraction - (1.0 - target_sparsity), 0.0);
  return std::max(open_fraction, target_sparsity);
}

ad::Tensor sparsity_loss(const ad::Tensor& open_fraction, double target_sparsity, SparsityLossMode mode) {
  validate_target_sparsity(target_sparsity);
  if (mode == SparsityLossMode::hinge) return ad::maximum(ad::affine(open_fraction, 1.0, -(1.0 - target_sparsity)), 0.0);
  return ad::maximum(open_fraction, target_sparsity);
}

std::vector<std::uint8_t> hard_mask(std::span<const double> mu, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("hard mask threshold must lie in [0, 1]");
  auto g = eval_gates(mu);
  std::vector<std::uint8_t> mask(g.size());
  for (std::size_t j = 0; j < g.size(); ++j) mask[j] = g[j] > threshold ? 1 : 0;
  return mask;
}

// ---------------------------------------------------------------------------

NoiseSource::NoiseSource(std::uint64_t seed, double sigma) : mode_(Mode::sampled), sigma_(sigma), rng_(seed) {}

NoiseSource NoiseSource::zeros() { return NoiseSource(); }

std::vector<double> NoiseSource::draw(const std::string& gate_name, std::size_t n) {
  switch (mode_) {
    case Mode::zero:
      return std::vector<double>(n, 0.0);
    case Mode::frozen: {
      auto it = recorded_.find(gate_name);
      if (it == recorded_.end()) throw ContractError("no frozen noise recorded for gate '" + gate_name + "'");
      if (it->second.size() != n) throw DimensionError("frozen noise for '" + gate_name + "' has the wrong length");
      return it->second;
    }
    case Mode::sampled:
      break;
  }
  std::vector<double> eps(n);
  for (double& e : eps) e = sigma_ * normal_(rng_);
  recorded_[gate_name] = eps;
  return eps;
}

void NoiseSource::freeze() { mode_ = Mode::frozen; }

void NoiseSource::resume_sampling() {
  if (mode_ == Mode::zero) throw ContractError("a zero noise source cannot sample");
  mode_ = Mode::sampled;
}

void NoiseSource::set_frozen(const std::string& gate_name, std::vector<double> noise) {
  recorded_[gate_name] = std::move(noise);
  mode_ = Mode::frozen;
}

// ---------------------------------------------------------------------------

std::vector<GateReportRow> report_rows(const std::string& layer, const std::string& side, std::span<const double> mu,
                                       double threshold) {
  auto g = eval_gates(mu);
  auto mask = hard_mask(mu, threshold);
  std::vector<GateReportRow> rows;
  rows.reserve(mu.size());
  for (std::size_t j = 0; j < mu.size(); ++j) rows.push_back({layer, side, j, mu[j], g[j], mask[j] != 0});
  return rows;
}

void write_report_csv(std::ostream& os, const std::vector<GateReportRow>& rows) {
  os << "layer,gate_side,index,mu,eval_gate,kept\n";
  const auto old_precision = os.precision(17);
  for (const auto& r : rows) {
    os << r.layer << ',' << r.side << ',' << r.index << ',' << r.mu << ',' << r.eval_gate << ',' << (r.kept ? 1 : 0)
       << '\n';
  }
  os.precision(old_precision);
}

}  // namespace finegates::gates
