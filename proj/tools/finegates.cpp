// finegates command line tool.
//
// Exit codes: 0 success, 1 unexpected failure, 2 configuration or input
// error, 3 numeric failure during training, 4 degenerate layer on prune.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "finegates/bench.hpp"
#include "finegates/checkpoint.hpp"
#include "finegates/config.hpp"
#include "finegates/errors.hpp"
#include "finegates/gates.hpp"
#include "finegates/pipeline.hpp"
#include "finegates/training.hpp"

namespace fs = std::filesystem;
using namespace finegates;

namespace {

std::vector<double> parse_levels(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("cannot parse sparsity level '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty sparsity list");
  return out;
}

std::optional<fs::path> vocab_beside(const fs::path& checkpoint, const std::string& explicit_vocab) {
  if (!explicit_vocab.empty()) return fs::path(explicit_vocab);
  auto p = checkpoint.parent_path() / pipeline::kVocabFile;
  if (fs::exists(p)) return p;
  return std::nullopt;
}

std::optional<fs::path> optional_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::path(s);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

struct TrainArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> set;
};

int cmd_train(const TrainArgs& a) {
  if (!fs::exists(a.config)) throw ConfigError("config file not found: " + a.config);
  auto cfg = config::load(a.config);
  if (const char* env = std::getenv("FINEGATES_SEED"); env && *env) {
    config::apply_overrides(cfg, {std::string("train.seed=") + env});
  }
  config::apply_overrides(cfg, a.set);
  if (a.seed) cfg.train.seed = *a.seed;
  const auto result = pipeline::run_training(cfg, a.out);
  const auto& last = result.history.back();
  std::printf("step %zu accuracy %.17g achieved_sparsity %.17g best_accuracy %.17g (step %zu)\n", last.step,
              last.accuracy, last.achieved_sparsity, result.best_accuracy, result.best_step);
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string vocab;
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  const auto c = ckpt::load(a.checkpoint);
  const auto m = ckpt::restore(c);
  const auto corpus = pipeline::eval_corpus(c, optional_path(a.data), vocab_beside(a.checkpoint, a.vocab));
  if (corpus.empty()) throw InputError("evaluation set is empty");
  const auto pred = train::predict(m, corpus);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == corpus.examples[i].label;
  const double acc = static_cast<double>(correct) / static_cast<double>(pred.size());
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    std::ofstream csv(fs::path(a.out) / pipeline::kPredictionsFile);
    csv << "index,label,prediction\n";
    for (std::size_t i = 0; i < pred.size(); ++i) csv << i << ',' << corpus.examples[i].label << ',' << pred[i] << '\n';
  }
  std::printf("accuracy %.17g (%zu/%zu)\n", acc, correct, pred.size());
  return 0;
}

struct PruneArgs {
  std::string checkpoint;
  double threshold = 0.0;
  std::string out;
};

int cmd_prune(const PruneArgs& a) {
  const auto c = ckpt::load(a.checkpoint);
  auto m = ckpt::restore(c);
  if (!m.has_gates()) throw ConfigError("checkpoint has no gated layers to prune");
  m.prune(a.threshold);
  const auto rows = pipeline::prune_report(m);
  fs::create_directories(a.out);
  std::ofstream report(fs::path(a.out) / pipeline::kPruneReport);
  pipeline::write_prune_report(report, rows);
  ckpt::save(fs::path(a.out) / pipeline::kPrunedCheckpoint, m, c.config, c.last_eval ? &*c.last_eval : nullptr);
  const auto& total = rows.back();
  std::printf("removed_params %zu achieved_sparsity %.17g\n", total.removed_params, total.layer_sparsity);
  return 0;
}

struct BenchMatmulArgs {
  bench::MatmulOptions opts;
  std::string grid;
  std::string precision = "f32";
  std::string out;
};

int cmd_bench_matmul(BenchMatmulArgs a) {
  if (!a.grid.empty()) a.opts.sparsity_grid = parse_levels(a.grid);
  a.opts.precision = bench::parse_precision(a.precision);
  bench::pin_single_thread();
  const auto rows = bench::run_matmul(a.opts);
  std::ostringstream csv;
  bench::write_matmul_csv(csv, rows);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_text(fs::path(a.out) / pipeline::kBenchFile, csv.str());
  }
  std::cout << csv.str();
  return 0;
}

struct BenchInferArgs {
  std::string checkpoint;
  std::string data;
  std::string vocab;
  std::string levels;
  bench::InferOptions opts;
  std::string out;
};

int cmd_bench_infer(BenchInferArgs a) {
  if (!a.levels.empty()) a.opts.levels = parse_levels(a.levels);
  const auto c = ckpt::load(a.checkpoint);
  const auto corpus = pipeline::eval_corpus(c, optional_path(a.data), vocab_beside(a.checkpoint, a.vocab));
  bench::pin_single_thread();
  const auto rows = bench::run_infer(c, corpus, a.opts);
  std::ostringstream csv;
  bench::write_infer_csv(csv, rows);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_text(fs::path(a.out) / pipeline::kBenchFile, csv.str());
  }
  std::cout << csv.str();
  return 0;
}

struct GatesReportArgs {
  std::string checkpoint;
  double threshold = 0.0;
  std::string out;
};

int cmd_gates_report(const GatesReportArgs& a) {
  const auto c = ckpt::load(a.checkpoint);
  auto m = ckpt::restore(c);
  if (!m.has_gates()) throw ConfigError("checkpoint " + a.checkpoint + " has no gates");
  std::vector<gates::GateReportRow> rows;
  for (const auto* l : m.layers()) {
    if (!adapters::has_gates(l->kind())) continue;
    for (auto r : gates::report_rows(l->name(), "row", l->row_gates()->mu(), a.threshold)) rows.push_back(r);
    for (auto r : gates::report_rows(l->name(), "col", l->col_gates()->mu(), a.threshold)) rows.push_back(r);
  }
  std::ostringstream csv;
  gates::write_report_csv(csv, rows);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_text(fs::path(a.out) / pipeline::kGatesReport, csv.str());
  } else {
    std::cout << csv.str();
  }
  const auto counts = m.count_params(a.threshold);
  std::fprintf(a.out.empty() ? stderr : stdout, "gates %zu closed %zu removed_params %zu achieved_sparsity %.17g\n",
               counts.gates, counts.closed_gates, counts.removable, counts.achieved_sparsity());
  return 0;
}

template <class F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const DegenerateLayerError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const InputError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const DimensionError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stochastic-gate structured sparsification on a toy transformer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", config::version());
  int code = 0;

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train a model and write checkpoints, metrics and a manifest");
  train->add_option("-c,--config", train_args.config, "Config file (INI with [model], [train], [data])")->required();
  train->add_option("-o,--out", train_args.out, "Output directory")->required();
  train->add_option("--seed", train_args.seed, "Override train.seed");
  train->add_option("--set", train_args.set, "Override a config key, e.g. train.lambda=0.3");
  train->callback([&] { code = guarded([&] { return cmd_train(train_args); }); });

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("-k,--checkpoint", eval_args.checkpoint, "Checkpoint file")->required();
  eval->add_option("-d,--data", eval_args.data, "TSV file; defaults to the eval split of the stored config");
  eval->add_option("--vocab", eval_args.vocab, "Vocabulary file; defaults to vocab.txt beside the checkpoint");
  eval->add_option("-o,--out", eval_args.out, "Directory for predictions.csv");
  eval->callback([&] { code = guarded([&] { return cmd_eval(eval_args); }); });

  PruneArgs prune_args;
  auto* prune = app.add_subcommand("prune", "Fuse and compact every gated layer");
  prune->add_option("-k,--checkpoint", prune_args.checkpoint, "Checkpoint file")->required();
  prune->add_option("-t,--threshold", prune_args.threshold, "Keep gates whose eval value exceeds this")
      ->check(CLI::Range(0.0, 1.0));
  prune->add_option("-o,--out", prune_args.out, "Output directory")->required();
  prune->callback([&] { code = guarded([&] { return cmd_prune(prune_args); }); });

  BenchMatmulArgs bm;
  auto* bench_matmul = app.add_subcommand("bench-matmul", "Time gathered versus dense matrix multiplication");
  bench_matmul->add_option("--dim", bm.opts.dim, "Matrix dimension")->capture_default_str();
  bench_matmul->add_option("--batch", bm.opts.batch, "Rows of X")->capture_default_str();
  bench_matmul->add_option("--repeats", bm.opts.repeats, "Timed repeats per level")->capture_default_str();
  bench_matmul->add_option("--grid", bm.grid, "Comma separated sparsity levels");
  bench_matmul->add_option("--precision", bm.precision, "f32 or f64")->capture_default_str();
  bench_matmul->add_option("--blocks", bm.opts.blocks, "Timing blocks for the median of medians")
      ->capture_default_str();
  bench_matmul->add_option("--seed", bm.opts.seed, "Seed for matrices and dropped columns");
  bench_matmul->add_option("-o,--out", bm.out, "Directory for bench.csv");
  bench_matmul->callback([&] { code = guarded([&] { return cmd_bench_matmul(bm); }); });

  BenchInferArgs bi;
  auto* bench_infer = app.add_subcommand("bench-infer", "Time inference epochs at imposed sparsity levels");
  bench_infer->add_option("-k,--checkpoint", bi.checkpoint, "Checkpoint file")->required();
  bench_infer->add_option("-d,--data", bi.data, "TSV file; defaults to the eval split of the stored config");
  bench_infer->add_option("--vocab", bi.vocab, "Vocabulary file");
  bench_infer->add_option("--levels", bi.levels, "Comma separated sparsity levels");
  bench_infer->add_option("--repeats", bi.opts.repeats, "Epochs timed per level")->capture_default_str();
  bench_infer->add_option("--batch-size", bi.opts.batch_size, "Evaluation batch size")->capture_default_str();
  bench_infer->add_option("-o,--out", bi.out, "Directory for bench.csv");
  bench_infer->callback([&] { code = guarded([&] { return cmd_bench_infer(bi); }); });

  GatesReportArgs gr;
  auto* gates_report = app.add_subcommand("gates-report", "Per-gate CSV report");
  gates_report->add_option("-k,--checkpoint", gr.checkpoint, "Checkpoint file")->required();
  gates_report->add_option("-t,--threshold", gr.threshold, "Hard mask threshold")->check(CLI::Range(0.0, 1.0));
  gates_report->add_option("-o,--out", gr.out, "Directory for gates_report.csv; stdout otherwise");
  gates_report->callback([&] { code = guarded([&] { return cmd_gates_report(gr); }); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  return code;
}
