#pragma once

// Run configuration: INI-style text with [model], [train] and [data] tables.
// Keys may also appear before any table header when their name is
// unambiguous. Rendering materializes every default, so a rendered file
// parses back to the identical configuration.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "finegates/training.hpp"
#include "finegates/transformer.hpp"

namespace finegates::config {

enum class DataSource : std::uint8_t { planted, tsv };

struct DataConfig {
  DataSource source = DataSource::planted;
  std::string train_path;
  std::string eval_path;
  std::size_t max_samples = 10000;
  // planted task
  std::size_t informative_dims = 16;  // the leading dims of the embedding
  double noise_rate = 0.0;
  std::size_t num_samples = 5000;
  std::size_t eval_samples = 1000;
  std::uint64_t seed = 7;
};

struct RunConfig {
  model::ModelConfig model;
  train::TrainConfig train;
  DataConfig data;

  void validate() const;
};

RunConfig parse(std::string_view text);
RunConfig load(const std::filesystem::path& path);
/// Applies "table.key=value" or "key=value" assignments.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments);
std::string render(const RunConfig& cfg);

/// Every recognised key as "table.key".
std::vector<std::string> known_keys();

/// Version reported in manifests.
std::string version();

/// Rendered config plus a [manifest] table (version, seed, output files).
std::string render_manifest(const RunConfig& cfg);

}  // namespace finegates::config
