#include "finegates/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "finegates/errors.hpp"

namespace finegates::train {

OptimizerKind parse_optimizer_kind(std::string_view text) {
  if (text == "adamw") return OptimizerKind::adamw;
  if (text == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + std::string(text) + "'");
}

std::string_view to_string(OptimizerKind kind) { return kind == OptimizerKind::adamw ? "adamw" : "sgd"; }

void TrainConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be a finite non-negative number");
  gates::validate_target_sparsity(target_sparsity);
  if (!(lr_gates >= 0.0) || !(lr_lora >= 0.0)) throw ConfigError("learning rates must be non-negative");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
  if (!(prune_threshold >= 0.0 && prune_threshold <= 1.0)) throw ConfigError("prune_threshold must lie in [0, 1]");
}

// ---------------------------------------------------------------------------
// Optimizer

Optimizer::Optimizer(ad::ParameterStore& store, const TrainConfig& cfg)
    : store_(&store), kind_(cfg.optimizer), gates_{cfg.lr_gates, 0.0}, other_{cfg.lr_lora, cfg.weight_decay} {}

GroupSettings Optimizer::settings_for(const ad::Parameter& p) const {
  switch (p.role) {
    case ad::ParamRole::gate: return gates_;
    case ad::ParamRole::lora:
    case ad::ParamRole::head: return other_;
    default: return {other_.lr, 0.0};
  }
}

void Optimizer::step() {
  store_->for_each([](const ad::Parameter& p) {
    if (!p.trainable()) return;
    for (double g : p.grad)
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
  });
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double bc1 = 1.0 - std::pow(kBeta1, t);
  const double bc2 = 1.0 - std::pow(kBeta2, t);
  store_->for_each([&](ad::Parameter& p) {
    if (!p.trainable()) return;
    const auto s = settings_for(p);
    auto& value = p.value;
    const auto& grad = p.grad;
    if (kind_ == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < value.size(); ++i) {
        value[i] -= s.lr * s.weight_decay * value[i];
        value[i] -= s.lr * grad[i];
      }
    } else {
      auto& m = state_.m[p.name];
      auto& v = state_.v[p.name];
      if (m.empty()) {
        m.assign(value.size(), 0.0);
        v.assign(value.size(), 0.0);
      }
      for (std::size_t i = 0; i < value.size(); ++i) {
        m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * grad[i];
        v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * grad[i] * grad[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        value[i] -= s.lr * s.weight_decay * value[i];
        value[i] -= s.lr * mhat / (std::sqrt(vhat) + kEps);
      }
    }
    if (p.role == ad::ParamRole::gate) gates::GateVector(p).project();
  });
}

// ---------------------------------------------------------------------------
// Loss

LossParts total_loss(ad::Tape& tape, model::Model& m, const data::Batch& batch, const TrainConfig& cfg,
                     gates::NoiseSource& noise) {
  LossParts parts;
  const auto logits = m.forward(tape, batch, model::Mode::train, &noise);
  parts.task = ad::cross_entropy(logits, batch.labels);
  auto& store = m.parameters();
  std::vector<ad::Tensor> terms;
  double open_sum = 0.0;
  for (const auto* layer : m.layers()) {
    if (!adapters::has_gates(layer->kind())) continue;
    for (const char* side : {".gate_rows", ".gate_cols"}) {
      auto open = gates::expected_open_fraction(tape.parameter(store.at(layer->name() + side)));
      open_sum += open.item();
      terms.push_back(gates::sparsity_loss(open, cfg.target_sparsity, cfg.sparsity_loss_mode));
    }
  }
  if (terms.empty()) {
    parts.sparse = tape.constant({1}, {0.0});
    parts.total = parts.task;
    return parts;
  }
  parts.open_fraction_mean = open_sum / static_cast<double>(terms.size());
  ad::Tensor sparse = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) sparse = ad::add(sparse, terms[i]);
  parts.sparse = sparse;
  parts.total = ad::add(parts.task, ad::scale(sparse, cfg.lambda));
  return parts;
}

StepMetrics train_step(model::Model& m, const data::Batch& batch, Optimizer& opt, const TrainConfig& cfg,
                       gates::NoiseSource& noise) {
  m.parameters().zero_grad();
  ad::Tape tape;
  StepMetrics row;
  row.step = opt.state().step + 1;
  LossParts parts;
  try {
    parts = total_loss(tape, m, batch, cfg, noise);
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " at step " + std::to_string(row.step));
  }
  row.total = parts.total.item();
  row.task_loss = parts.task.item();
  row.sparse_loss = parts.sparse.item();
  row.open_fraction_mean = parts.open_fraction_mean;
  if (!std::isfinite(row.total)) {
    throw NumericError("non-finite loss at step " + std::to_string(row.step) + " (task " +
                       std::to_string(row.task_loss) + ", sparse " + std::to_string(row.sparse_loss) + ")");
  }
  tape.backward(parts.total);
  double sq = 0.0;
  m.parameters().for_each([&](const ad::Parameter& p) {
    if (!p.trainable()) return;
    for (double g : p.grad) sq += g * g;
  });
  row.grad_norm = std::sqrt(sq);
  try {
    opt.step();
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " at step " + std::to_string(row.step));
  }
  return row;
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<int> predict(const model::Model& m, const data::Corpus& corpus, std::size_t batch_size) {
  std::vector<int> out;
  out.reserve(corpus.size());
  const std::size_t c = m.config().num_classes;
  for (const auto& batch : data::sequential_batches(corpus, batch_size)) {
    const auto logits = m.logits(batch);
    for (std::size_t r = 0; r < batch.size; ++r) {
      const auto row = logits.begin() + static_cast<std::ptrdiff_t>(r * c);
      out.push_back(static_cast<int>(std::max_element(row, row + static_cast<std::ptrdiff_t>(c)) - row));
    }
  }
  return out;
}

double accuracy(const model::Model& m, const data::Corpus& corpus, std::size_t batch_size) {
  if (corpus.empty()) throw ConfigError("cannot evaluate on an empty corpus");
  const auto pred = predict(m, corpus, batch_size);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == corpus.examples[i].label;
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

double mean_open_fraction(model::Model& m) {
  auto gv = m.gate_vectors();
  if (gv.empty()) return 1.0;
  double s = 0.0;
  for (const auto& g : gv) s += gates::expected_open_fraction(g.mu());
  return s / static_cast<double>(gv.size());
}

std::string format_metrics_row(const EvalRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g", r.step, r.task_loss, r.sparse_loss,
                r.open_fraction_mean, r.achieved_sparsity, r.accuracy);
  return buf;
}

FitResult fit(model::Model& m, const data::Corpus& train_set, const data::Corpus& eval_set, const TrainConfig& cfg,
              const FitCallbacks& callbacks) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("training set is empty");
  if (eval_set.empty()) throw ConfigError("evaluation set is empty");
  Optimizer opt(m.parameters(), cfg);
  data::BatchStream stream(train_set, cfg.batch_size, cfg.seed);
  gates::NoiseSource noise(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  FitResult result;
  double task_sum = 0.0, sparse_sum = 0.0;
  std::size_t since = 0;
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    const auto row = train_step(m, stream.next(), opt, cfg, noise);
    task_sum += row.task_loss;
    sparse_sum += row.sparse_loss;
    ++since;
    if (step % cfg.eval_every != 0 && step != cfg.max_steps) continue;
    EvalRow e;
    e.step = step;
    e.task_loss = task_sum / static_cast<double>(since);
    e.sparse_loss = sparse_sum / static_cast<double>(since);
    e.open_fraction_mean = mean_open_fraction(m);
    e.achieved_sparsity = m.count_params(cfg.prune_threshold).achieved_sparsity();
    e.accuracy = accuracy(m, eval_set);
    task_sum = sparse_sum = 0.0;
    since = 0;
    result.history.push_back(e);
    if (callbacks.on_eval) callbacks.on_eval(e);
    if (e.accuracy > result.best_accuracy) {
      result.best_accuracy = e.accuracy;
      result.best_step = step;
      if (callbacks.on_best) callbacks.on_best(e);
    }
  }
  return result;
}

double median(std::vector<double> values) {
  if (values.empty()) throw ContractError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace finegates::train
