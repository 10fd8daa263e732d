#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace finegates::data {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kFirstTokenId = 3;

struct Example {
  std::vector<int> ids;  // starts with kClsId
  int label = 0;
};

class Vocab {
 public:
  Vocab();

  int id(std::string_view token) const;
  int add(const std::string& token);
  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(int id) const;

  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct Corpus {
  std::vector<Example> examples;
  Vocab vocab;
  std::string split;
  std::size_t num_classes = 0;
  std::size_t vocab_size = 0;

  std::size_t size() const noexcept { return examples.size(); }
  bool empty() const noexcept { return examples.empty(); }
};

/// Synthetic classification task whose label depends only on a known subset
/// of embedding dimensions.
struct PlantedTaskSpec {
  std::size_t vocab_size = 2500;
  std::size_t seq_len = 16;  // including the leading CLS token
  std::size_t num_classes = 2;
  std::size_t model_dim = 32;
  std::vector<std::size_t> informative_dims;
  double noise_rate = 0.0;
  std::size_t num_samples = 5000;
  std::uint64_t seed = 0;

  void validate() const;
};

/// First `count` dimensions.
std::vector<std::size_t> leading_dims(std::size_t count);

/// Token feature table [vocab_size x model_dim]. This doubles as the frozen
/// embedding table of the simulated pretrained model.
std::vector<double> planted_features(const PlantedTaskSpec& spec);

/// Label an oracle reading only the informative dimensions would assign.
int planted_oracle_label(const PlantedTaskSpec& spec, std::span<const double> features, std::span<const int> ids);

/// Deterministic given spec.seed and split. Different split names give
/// disjoint sample streams over the same feature table.
Corpus generate_planted(const PlantedTaskSpec& spec, const std::string& split = "train");

/// Reads "label<TAB>space separated tokens" lines. When `vocab` is null the
/// vocabulary is built from this file; otherwise unknown tokens map to UNK.
/// At most `max_samples` lines are kept (0 keeps all).
Corpus load_tsv(const std::filesystem::path& path, std::size_t max_samples, const Vocab* vocab = nullptr,
                const std::string& split = "train");
Corpus parse_tsv(std::istream& in, std::size_t max_samples, const Vocab* vocab, const std::string& split);

/// Truncates every example to at most `max_len` ids.
void truncate(Corpus& corpus, std::size_t max_len);

/// Right-padded block of examples.
struct Batch {
  std::size_t size = 0;
  std::size_t seq_len = 0;
  std::vector<int> ids;            // [size x seq_len]
  std::vector<std::uint8_t> mask;  // 1 for real tokens
  std::vector<int> labels;
  std::vector<std::size_t> example_index;
};

Batch make_batch(const Corpus& corpus, std::span<const std::size_t> indices, int pad_id = kPadId);

/// In-order batches covering the corpus once.
std::vector<Batch> sequential_batches(const Corpus& corpus, std::size_t batch_size, int pad_id = kPadId);

/// Endless stream of shuffled batches; the permutation of each epoch is a
/// function of (seed, epoch) only.
class BatchStream {
 public:
  BatchStream(const Corpus& corpus, std::size_t batch_size, std::uint64_t seed, int pad_id = kPadId);

  Batch next();
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  void reshuffle();

  const Corpus* corpus_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  int pad_id_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

}  // namespace finegates::data
