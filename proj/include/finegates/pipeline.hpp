#pragma once

// End-to-end helpers shared by the command line tool and the tests.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "finegates/checkpoint.hpp"
#include "finegates/config.hpp"
#include "finegates/data.hpp"
#include "finegates/training.hpp"
#include "finegates/transformer.hpp"

namespace finegates::pipeline {

struct Datasets {
  data::Corpus train;
  data::Corpus eval;
  std::vector<double> embedding;  // planted feature table; empty for TSV data
};

data::PlantedTaskSpec planted_spec(const config::RunConfig& cfg);

/// Loads or generates the data. For TSV sources the model's vocab_size and
/// num_classes are resolved from the data and written back into `cfg`.
Datasets prepare_data(config::RunConfig& cfg);

model::Model build_model(const config::RunConfig& cfg, const Datasets& data);

inline constexpr const char* kManifestFile = "manifest.txt";
inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kFinalCheckpoint = "final.ckpt";
inline constexpr const char* kBestCheckpoint = "best.ckpt";
inline constexpr const char* kVocabFile = "vocab.txt";
inline constexpr const char* kPruneReport = "prune_report.csv";
inline constexpr const char* kPrunedCheckpoint = "pruned.ckpt";
inline constexpr const char* kBenchFile = "bench.csv";
inline constexpr const char* kPredictionsFile = "predictions.csv";
inline constexpr const char* kGatesReport = "gates_report.csv";

/// Trains per `cfg` and writes manifest, metrics, best and final checkpoints
/// (and the vocabulary for TSV data) into `out_dir`.
train::FitResult run_training(config::RunConfig cfg, const std::filesystem::path& out_dir);

/// Evaluation corpus for a checkpoint: `data_path` when given (vocabulary from
/// `vocab_path`), otherwise the eval split described by the stored config.
data::Corpus eval_corpus(const ckpt::Checkpoint& c, const std::optional<std::filesystem::path>& data_path,
                         const std::optional<std::filesystem::path>& vocab_path);

struct PruneReportRow {
  std::string layer;
  std::size_t kept_rows = 0;
  std::size_t kept_cols = 0;
  std::size_t removed_params = 0;
  double layer_sparsity = 0.0;
};

/// Per gated layer rows plus a final "total" row.
std::vector<PruneReportRow> prune_report(const model::Model& pruned);
void write_prune_report(std::ostream& os, const std::vector<PruneReportRow>& rows);

}  // namespace finegates::pipeline
