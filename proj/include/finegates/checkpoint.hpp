#pragma once

// Binary checkpoint format, all integers little-endian:
//   "FGCKPT01" | u32 tensor count | per tensor:
//     u16 name length | UTF-8 name | u8 dtype (0 = f64) | u8 rank |
//     rank x u32 dims | raw f64 data
//
// A model checkpoint holds every model parameter under its own name, the
// rendered run config as a byte tensor "__config__", and optionally the last
// metrics row as "__metrics__". Pruned layers are stored as
// "<layer>.pruned.{shape,kept_rows,kept_cols,weight,bias}" and their dense
// base weight and LoRA factors are left out.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "finegates/autodiff.hpp"
#include "finegates/config.hpp"
#include "finegates/training.hpp"
#include "finegates/transformer.hpp"

namespace finegates::ckpt {

inline constexpr char kMagic[8] = {'F', 'G', 'C', 'K', 'P', 'T', '0', '1'};

struct NamedTensor {
  std::string name;
  ad::Shape shape;
  std::vector<double> data;
};

std::vector<std::uint8_t> encode(const std::vector<NamedTensor>& tensors);
/// Throws FormatError carrying the byte offset of the first problem.
std::vector<NamedTensor> decode(std::span<const std::uint8_t> bytes);

void write_file(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_file(const std::filesystem::path& path);

struct Checkpoint {
  config::RunConfig config;
  std::vector<NamedTensor> tensors;  // model tensors only
  std::optional<train::EvalRow> last_eval;

  const NamedTensor* find(const std::string& name) const;
};

Checkpoint snapshot(const model::Model& m, const config::RunConfig& cfg, const train::EvalRow* last_eval = nullptr);
std::vector<NamedTensor> to_tensors(const Checkpoint& c);
Checkpoint from_tensors(std::vector<NamedTensor> tensors);

void save(const std::filesystem::path& path, const model::Model& m, const config::RunConfig& cfg,
          const train::EvalRow* last_eval = nullptr);
Checkpoint load(const std::filesystem::path& path);

/// Copies checkpoint tensors into `m`. Shape mismatches throw DimensionError
/// naming the tensor; missing tensors throw FormatError.
void apply(model::Model& m, const Checkpoint& c);
/// Builds the model described by the checkpoint config and applies it.
model::Model restore(const Checkpoint& c);

}  // namespace finegates::ckpt
