#pragma once

// L = L_task + lambda * sum over gate vectors of L_sparse, optimized jointly
// with two parameter groups: gate mu vectors at lr_gates and everything else
// trainable (LoRA factors, head, layer norms, unfrozen base weights) at lr_lora.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "finegates/autodiff.hpp"
#include "finegates/data.hpp"
#include "finegates/gates.hpp"
#include "finegates/parameters.hpp"
#include "finegates/transformer.hpp"

namespace finegates::train {

enum class OptimizerKind : std::uint8_t { adamw, sgd };

OptimizerKind parse_optimizer_kind(std::string_view text);
std::string_view to_string(OptimizerKind kind);

struct TrainConfig {
  double lambda = 1.0;
  double target_sparsity = 0.0;
  double lr_gates = 1e-3;
  double lr_lora = 1e-4;
  double weight_decay = 0.0;
  std::size_t batch_size = 32;
  std::size_t max_steps = 1000;
  std::uint64_t seed = 0;
  std::size_t eval_every = 100;
  gates::SparsityLossMode sparsity_loss_mode = gates::SparsityLossMode::hinge;
  OptimizerKind optimizer = OptimizerKind::adamw;
  double prune_threshold = 0.0;

  void validate() const;
};

struct GroupSettings {
  double lr = 0.0;
  double weight_decay = 0.0;
};

/// Per-parameter moments keyed by parameter name.
struct OptimState {
  std::size_t step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

/// AdamW (beta1 0.9, beta2 0.999, eps 1e-8) with decoupled decay
///   p <- p - lr * wd * p - lr * mhat / (sqrt(vhat) + eps)
/// or plain SGD p <- p - lr * wd * p - lr * g. Gate mu vectors are clipped
/// into [-1, 1] after every step.
class Optimizer {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  Optimizer(ad::ParameterStore& store, const TrainConfig& cfg);

  GroupSettings gate_group() const noexcept { return gates_; }
  GroupSettings other_group() const noexcept { return other_; }
  GroupSettings settings_for(const ad::Parameter& p) const;
  const OptimState& state() const noexcept { return state_; }

  /// Throws NumericError naming the parameter if any gradient is not finite.
  void step();

 private:
  ad::ParameterStore* store_;
  OptimizerKind kind_;
  GroupSettings gates_;
  GroupSettings other_;
  OptimState state_;
};

struct LossParts {
  ad::Tensor total;
  ad::Tensor task;
  ad::Tensor sparse;  // unweighted sum over gate vectors
  double open_fraction_mean = 1.0;
};

/// Train-mode forward and loss assembly on `tape`.
LossParts total_loss(ad::Tape& tape, model::Model& m, const data::Batch& batch, const TrainConfig& cfg,
                     gates::NoiseSource& noise);

struct StepMetrics {
  std::size_t step = 0;
  double total = 0.0;
  double task_loss = 0.0;
  double sparse_loss = 0.0;
  double open_fraction_mean = 1.0;
  double grad_norm = 0.0;
};

/// Zero grads, forward, backward, one optimizer step. Throws NumericError on
/// a non-finite loss or gradient.
StepMetrics train_step(model::Model& m, const data::Batch& batch, Optimizer& opt, const TrainConfig& cfg,
                       gates::NoiseSource& noise);

/// Eval-mode predictions and accuracy.
std::vector<int> predict(const model::Model& m, const data::Corpus& corpus, std::size_t batch_size = 256);
double accuracy(const model::Model& m, const data::Corpus& corpus, std::size_t batch_size = 256);

/// Mean of the expected open fraction over all gate vectors (1 without gates).
double mean_open_fraction(model::Model& m);

struct EvalRow {
  std::size_t step = 0;
  double task_loss = 0.0;  // mean training task loss since the previous row
  double sparse_loss = 0.0;
  double open_fraction_mean = 1.0;
  double achieved_sparsity = 0.0;
  double accuracy = 0.0;
};

inline constexpr std::string_view kMetricsHeader =
    "step,task_loss,sparse_loss,open_fraction_mean,achieved_sparsity,accuracy";
std::string format_metrics_row(const EvalRow& row);

struct FitResult {
  std::vector<EvalRow> history;
  std::size_t best_step = 0;
  double best_accuracy = -1.0;
};

/// Hooks called by fit; all optional.
struct FitCallbacks {
  std::function<void(const EvalRow&)> on_eval;
  std::function<void(const EvalRow&)> on_best;  // after a new best accuracy
};

/// Runs max_steps train steps with an eval row every eval_every steps and at
/// the last step. Throws ConfigError on an empty training or eval corpus.
FitResult fit(model::Model& m, const data::Corpus& train_set, const data::Corpus& eval_set, const TrainConfig& cfg,
              const FitCallbacks& callbacks = {});

/// Median of the values (mean of the two middle ones for even counts).
double median(std::vector<double> values);

}  // namespace finegates::train
