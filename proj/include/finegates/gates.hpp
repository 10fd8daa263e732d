#pragma once

// Stochastic gate vectors with a Gaussian relaxation of Bernoulli variables:
//   omega = clamp01(0.5 + mu + eps),  eps ~ N(0, sigma^2),  sigma = 0.5.
// The probability that a gate is open has the closed form
//   P(omega_j > 0) = 1/2 - 1/2 * erf(-(mu_j + 0.5) / (sqrt(2) * sigma)).

#include <cstdint>
#include <iosfwd>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "finegates/autodiff.hpp"

namespace finegates::gates {

inline constexpr double kSigma = 0.5;
inline constexpr double kInitMu = 0.5;
inline constexpr double kMuMin = -1.0;
inline constexpr double kMuMax = 1.0;

enum class SparsityLossMode : std::uint8_t {
  hinge,         // max(open - (1 - s), 0): zero once the target sparsity is met
  paper_literal  // max(open, s)
};

SparsityLossMode parse_sparsity_loss_mode(std::string_view text);
std::string_view to_string(SparsityLossMode mode);

/// View over a gate parameter vector. The mu values live in an
/// ad::Parameter owned by the model so the optimizer can update them.
class GateVector {
 public:
  explicit GateVector(ad::Parameter& mu);

  std::size_t size() const noexcept { return mu_->value.size(); }
  std::span<const double> mu() const noexcept { return mu_->value; }
  double sigma() const noexcept { return kSigma; }
  const std::string& name() const noexcept { return mu_->name; }
  ad::Parameter& parameter() noexcept { return *mu_; }
  const ad::Parameter& parameter() const noexcept { return *mu_; }

  /// Clips every mu into [-1, 1].
  void project();

 private:
  ad::Parameter* mu_;
};

/// omega = clamp01(0.5 + mu + noise), differentiable with respect to mu.
ad::Tensor sample_train_gates(const ad::Tensor& mu, std::span<const double> noise);

/// Deterministic gates clamp01(0.5 + mu).
std::vector<double> eval_gates(std::span<const double> mu);

/// P(omega_j > 0) per coordinate.
std::vector<double> open_probabilities(std::span<const double> mu, double sigma = kSigma);
/// Mean of P(omega_j > 0) over the vector.
double expected_open_fraction(std::span<const double> mu, double sigma = kSigma);
ad::Tensor expected_open_fraction(const ad::Tensor& mu, double sigma = kSigma);

/// Regularizer for one gate vector given its open fraction.
double sparsity_loss(double open_fraction, double target_sparsity, SparsityLossMode mode);
ad::Tensor sparsity_loss(const ad::Tensor& open_fraction, double target_sparsity, SparsityLossMode mode);

/// mask[j] = eval_gates(mu)[j] > threshold.
std::vector<std::uint8_t> hard_mask(std::span<const double> mu, double threshold = 0.0);

/// Throws ConfigError unless 0 <= s < 1.
void validate_target_sparsity(double s);

/// Source of the Gaussian perturbations used by training-time gates.
///
/// In `sampled` mode each draw is fresh and is also remembered under its
/// gate name; `freeze()` switches to replaying those remembered draws, which
/// makes the stochastic forward pass a deterministic function of mu.
class NoiseSource {
 public:
  enum class Mode : std::uint8_t { sampled, frozen, zero };

  explicit NoiseSource(std::uint64_t seed, double sigma = kSigma);
  static NoiseSource zeros();

  Mode mode() const noexcept { return mode_; }
  std::vector<double> draw(const std::string& gate_name, std::size_t n);
  void freeze();
  void resume_sampling();
  /// Installs explicit noise for a gate and switches to frozen mode.
  void set_frozen(const std::string& gate_name, std::vector<double> noise);
  const std::map<std::string, std::vector<double>>& recorded() const noexcept { return recorded_; }

 private:
  NoiseSource() = default;

  Mode mode_ = Mode::zero;
  double sigma_ = kSigma;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::map<std::string, std::vector<double>> recorded_;
};

/// One row of the per-gate report.
struct GateReportRow {
  std::string layer;
  std::string side;  // "row" or "col"
  std::size_t index = 0;
  double mu = 0.0;
  double eval_gate = 0.0;
  bool kept = false;
};

std::vector<GateReportRow> report_rows(const std::string& layer, const std::string& side, std::span<const double> mu,
                                       double threshold = 0.0);
void write_report_csv(std::ostream& os, const std::vector<GateReportRow>& rows);

}  // namespace finegates::gates
