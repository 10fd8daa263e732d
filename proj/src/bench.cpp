#include "finegates/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>

#include <sched.h>

#include "finegates/errors.hpp"
#include "finegates/gemm.hpp"
#include "finegates/training.hpp"

namespace finegates::bench {

Precision parse_precision(const std::string& text) {
  if (text == "f32" || text == "float32") return Precision::f32;
  if (text == "f64" || text == "float64") return Precision::f64;
  throw ConfigError("unknown precision '" + text + "' (expected f32 or f64)");
}

void pin_single_thread() {
  cpu_set_t set;
  CPU_ZERO(&set);
  if (sched_getaffinity(0, sizeof set, &set) != 0) return;
  for (int c = 0; c < CPU_SETSIZE; ++c) {
    if (CPU_ISSET(c, &set)) {
      cpu_set_t one;
      CPU_ZERO(&one);
      CPU_SET(c, &one);
      sched_setaffinity(0, sizeof one, &one);
      return;
    }
  }
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

struct Summary {
  double median = 0.0;
  double spread = 0.0;
};

// Median of per-block medians, and their range.
Summary summarize(const std::vector<double>& samples, std::size_t blocks) {
  const std::size_t per = samples.size() / blocks;
  std::vector<double> medians;
  for (std::size_t b = 0; b < blocks; ++b) {
    const auto first = samples.begin() + static_cast<std::ptrdiff_t>(b * per);
    const auto last = b + 1 == blocks ? samples.end() : first + static_cast<std::ptrdiff_t>(per);
    medians.push_back(train::median(std::vector<double>(first, last)));
  }
  const auto [lo, hi] = std::minmax_element(medians.begin(), medians.end());
  return {train::median(medians), *hi - *lo};
}

volatile double g_sink = 0.0;

template <class T>
std::vector<MatmulRow> matmul_impl(const MatmulOptions& o) {
  const std::size_t d = o.dim, n = o.batch;
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<T> w(d * d);
  gemm::AlignedVector<T> x(n * d);
  for (auto& v : w) v = static_cast<T>(normal(rng));
  for (auto& v : x) v = static_cast<T>(normal(rng));

  struct Level {
    std::vector<std::size_t> kept;
    gemm::PackedMatrix<T> packed;
    gemm::AlignedVector<T> xg, out;
    std::vector<double> times;
  };
  const gemm::PackedMatrix<T> dense(w, d, d);
  gemm::AlignedVector<T> dense_out(n * d);
  std::vector<double> dense_times;
  dense_times.reserve(o.repeats);

  std::vector<Level> levels;
  for (double s : o.sparsity_grid) {
    Level lv;
    const auto drop = static_cast<std::size_t>(std::llround(s * static_cast<double>(d)));
    std::vector<std::size_t> all(d);
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::shuffle(all.begin(), all.end(), rng);
    lv.kept.assign(all.begin() + static_cast<std::ptrdiff_t>(drop), all.end());
    std::sort(lv.kept.begin(), lv.kept.end());
    const std::size_t k = lv.kept.size();
    std::vector<T> wc(d * k);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < k; ++j) wc[i * k + j] = w[i * d + lv.kept[j]];
    lv.packed = gemm::PackedMatrix<T>(wc, d, k);
    lv.xg.resize(n * k);
    lv.out.resize(n * d);
    lv.times.reserve(o.repeats);
    levels.push_back(std::move(lv));
  }

  // Round-robin over dense and every level so all of them see the same
  // machine state over the run. The starting slot rotates each repeat, so
  // no entry always follows the same predecessor.
  const std::size_t slots = levels.size() + 1;
  for (std::size_t r = 0; r < o.repeats; ++r) {
    for (std::size_t k = 0; k < slots; ++k) {
      const std::size_t e = (r + k) % slots;
      if (e == levels.size()) {
        const auto t0 = Clock::now();
        dense.multiply(x, n, dense_out);
        dense_times.push_back(ms_since(t0));
        g_sink = g_sink + static_cast<double>(dense_out[r % dense_out.size()]);
        continue;
      }
      auto& lv = levels[e];
      const auto t0 = Clock::now();
      gemm::gather_columns<T>(x, n, d, lv.kept, lv.xg);
      lv.packed.multiply(lv.xg, n, lv.out);
      lv.times.push_back(ms_since(t0));
      g_sink = g_sink + static_cast<double>(lv.out[r % lv.out.size()]);
    }
  }

  const auto dense_sum = summarize(dense_times, o.blocks);
  std::vector<MatmulRow> rows;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const auto g = summarize(levels[i].times, o.blocks);
    MatmulRow row;
    row.sparsity = o.sparsity_grid[i];
    row.kept_cols = levels[i].kept.size();
    row.dense_ms = dense_sum.median;
    row.dense_spread_ms = dense_sum.spread;
    row.gathered_ms = g.median;
    row.gathered_spread_ms = g.spread;
    row.relative_reduction_pct = 100.0 * (dense_sum.median - g.median) / dense_sum.median;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

std::vector<MatmulRow> run_matmul(const MatmulOptions& opts) {
  if (opts.dim == 0 || opts.batch == 0) throw ConfigError("bench dimensions must be positive");
  if (opts.blocks == 0 || opts.repeats < opts.blocks) throw ConfigError("need at least one repeat per timing block");
  for (double s : opts.sparsity_grid) {
    if (!(s >= 0.0 && s < 1.0)) throw ConfigError("sparsity levels must lie in [0, 1)");
    if (static_cast<std::size_t>(std::llround(s * static_cast<double>(opts.dim))) >= opts.dim) {
      throw ConfigError("sparsity level " + std::to_string(s) + " would drop every column");
    }
  }
  return opts.precision == Precision::f32 ? matmul_impl<float>(opts) : matmul_impl<double>(opts);
}

void write_matmul_csv(std::ostream& os, const std::vector<MatmulRow>& rows) {
  os << kMatmulHeader << '\n';
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.15g,%.6f,%.6f,%.3f,%zu,%.6f,%.6f", r.sparsity, r.dense_ms, r.gathered_ms,
                  r.relative_reduction_pct, r.kept_cols, r.gathered_spread_ms, r.dense_spread_ms);
    os << buf << '\n';
  }
}

std::vector<InferRow> run_infer(const ckpt::Checkpoint& checkpoint, const data::Corpus& corpus,
                                const InferOptions& opts) {
  if (corpus.empty()) throw ConfigError("inference corpus is empty");
  if (opts.repeats == 0) throw ConfigError("repeats must be positive");
  for (double s : opts.levels)
    if (!(s >= 0.0 && s < 1.0)) throw ConfigError("sparsity levels must lie in [0, 1)");

  // Level 0 is always measured first as the reference; requested zero levels
  // reuse it, so their RTF is exactly 1.
  std::vector<double> levels{0.0};
  for (double s : opts.levels)
    if (s > 0.0) levels.push_back(s);
  std::vector<model::Model> models;
  std::vector<InferRow> rows;
  for (double s : levels) {
    auto m = ckpt::restore(checkpoint);
    if (s > 0.0) m.impose_sparsity(s);
    const auto removed = m.count_params(opts.threshold).removable;
    m.prune(opts.threshold);
    InferRow row;
    row.sparsity = s;
    row.removed_params = removed;
    row.accuracy = train::accuracy(m, corpus, opts.batch_size);
    rows.push_back(row);
    models.push_back(std::move(m));
  }
  const auto batches = data::sequential_batches(corpus, opts.batch_size);
  std::vector<std::vector<double>> times(levels.size());
  for (std::size_t r = 0; r < opts.repeats; ++r) {
    for (std::size_t i = 0; i < models.size(); ++i) {
      const auto t0 = Clock::now();
      for (const auto& b : batches) {
        const auto logits = models[i].logits(b);
        g_sink = g_sink + logits[0];
      }
      times[i].push_back(ms_since(t0));
    }
  }
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].median_epoch_ms = train::median(times[i]);
  for (auto& row : rows) row.rtf = rows[0].median_epoch_ms / row.median_epoch_ms;
  std::vector<InferRow> out;
  std::size_t next = 1;
  for (double s : opts.levels) out.push_back(s > 0.0 ? rows[next++] : rows[0]);
  return out;
}

void write_infer_csv(std::ostream& os, const std::vector<InferRow>& rows) {
  os << kInferHeader << '\n';
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.15g,%.6f,%.6f,%.17g,%zu", r.sparsity, r.median_epoch_ms, r.rtf, r.accuracy,
                  r.removed_params);
    os << buf << '\n';
  }
}

}  // namespace finegates::bench
