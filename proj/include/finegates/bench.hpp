#pragma once

// Wall-clock benchmarks: gathered versus dense matrix multiplication, and
// inference epochs of pruned models at imposed sparsity levels.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "finegates/checkpoint.hpp"
#include "finegates/data.hpp"

namespace finegates::bench {

enum class Precision : std::uint8_t { f32, f64 };
Precision parse_precision(const std::string& text);

struct MatmulOptions {
  std::size_t dim = 1024;
  std::size_t batch = 16;
  std::size_t repeats = 100000;
  std::vector<double> sparsity_grid = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99};
  Precision precision = Precision::f32;
  std::size_t blocks = 3;  // repeats are split into this many timing blocks
  std::uint64_t seed = 0;
};

struct MatmulRow {
  double sparsity = 0.0;
  std::size_t kept_cols = 0;
  double dense_ms = 0.0;
  double gathered_ms = 0.0;              // median of the per-block medians
  double relative_reduction_pct = 0.0;   // 100 * (dense - gathered) / dense
  double gathered_spread_ms = 0.0;       // max - min of the per-block medians
  double dense_spread_ms = 0.0;
};

/// For each level, times y = (X restricted to kept columns) . (W restricted
/// to kept columns)^T against the full product. The gather of X happens inside
/// the timed region, W is compacted once. Dense and gathered repeats are
/// interleaved so that slow drifts of the machine affect both equally.
std::vector<MatmulRow> run_matmul(const MatmulOptions& opts);

inline constexpr const char* kMatmulHeader =
    "sparsity,dense_ms,gathered_ms,relative_reduction_pct,kept_cols,gathered_spread_ms,dense_spread_ms";
void write_matmul_csv(std::ostream& os, const std::vector<MatmulRow>& rows);

struct InferOptions {
  std::vector<double> levels = {0.0, 0.1, 0.2, 0.3, 0.4};
  std::size_t repeats = 10;
  std::size_t batch_size = 256;
  double threshold = 0.0;
};

struct InferRow {
  double sparsity = 0.0;
  double median_epoch_ms = 0.0;
  double rtf = 1.0;
  double accuracy = 0.0;
  std::size_t removed_params = 0;
};

/// Each level restores the checkpoint, closes the lowest-mu share of every
/// gate vector, prunes, and times full passes over `corpus`.
std::vector<InferRow> run_infer(const ckpt::Checkpoint& checkpoint, const data::Corpus& corpus,
                                const InferOptions& opts);

inline constexpr const char* kInferHeader = "sparsity,median_epoch_ms,rtf,accuracy,removed_params";
void write_infer_csv(std::ostream& os, const std::vector<InferRow>& rows);

/// Restricts the process to one CPU when the platform allows it.
void pin_single_thread();

}  // namespace finegates::bench
