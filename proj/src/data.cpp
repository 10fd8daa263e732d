#include "finegates/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <sstream>

#include "finegates/errors.hpp"

namespace finegates::data {

namespace {

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::mt19937_64 stream_rng(std::uint64_t seed, std::string_view purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fnv1a(purpose)), static_cast<std::uint32_t>(fnv1a(purpose) >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab() {
  add("<pad>");
  add("<unk>");
  add("<cls>");
}

int Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

int Vocab::add(const std::string& token) {
  auto [it, inserted] = index_.emplace(token, static_cast<int>(tokens_.size()));
  if (inserted) tokens_.push_back(token);
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw InputError("token id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write vocabulary to " + path.string());
  for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << i << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read vocabulary " + path.string());
  Vocab v;
  v.tokens_.clear();
  v.index_.clear();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    int id = -1;
    if (tab == std::string::npos ||
        std::from_chars(line.data() + tab + 1, line.data() + line.size(), id).ec != std::errc() ||
        id != static_cast<int>(v.tokens_.size())) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": malformed vocabulary line");
    }
    v.add(line.substr(0, tab));
  }
  if (v.size() < kFirstTokenId) throw InputError(path.string() + ": vocabulary lacks reserved tokens");
  return v;
}

// ---------------------------------------------------------------------------
// Planted task

void PlantedTaskSpec::validate() const {
  if (vocab_size <= kFirstTokenId) throw ConfigError("planted task: vocab_size must exceed the reserved ids");
  if (seq_len < 2) throw ConfigError("planted task: seq_len must be at least 2");
  if (num_classes < 2) throw ConfigError("planted task: need at least two classes");
  if (model_dim == 0) throw ConfigError("planted task: model_dim must be positive");
  if (informative_dims.empty()) throw ConfigError("planted task: informative_dims is empty");
  if (informative_dims.size() >= model_dim) {
    throw ConfigError("planted task: informative_dims must be a strict subset of the embedding dims");
  }
  for (std::size_t d : informative_dims) {
    if (d >= model_dim) {
      throw ConfigError("planted task: informative dim " + std::to_string(d) + " outside [0, " +
                        std::to_string(model_dim) + ")");
    }
  }
  auto sorted = informative_dims;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ConfigError("planted task: informative_dims contains duplicates");
  }
  if (!(noise_rate >= 0.0 && noise_rate < 1.0)) throw ConfigError("planted task: noise_rate must lie in [0, 1)");
}

std::vector<std::size_t> leading_dims(std::size_t count) {
  std::vector<std::size_t> dims(count);
  std::iota(dims.begin(), dims.end(), std::size_t{0});
  return dims;
}

std::vector<double> planted_features(const PlantedTaskSpec& spec) {
  spec.validate();
  auto rng = stream_rng(spec.seed, "features");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> f(spec.vocab_size * spec.model_dim);
  for (double& v : f) v = normal(rng);
  // Centre each dimension over the content tokens so labels come out balanced.
  const std::size_t d = spec.model_dim, first = static_cast<std::size_t>(kFirstTokenId);
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t t = first; t < spec.vocab_size; ++t) mean += f[t * d + j];
    mean /= static_cast<double>(spec.vocab_size - first);
    for (std::size_t t = first; t < spec.vocab_size; ++t) f[t * d + j] -= mean;
  }
  // Reserved tokens carry no signal.
  std::fill_n(f.begin(), first * d, 0.0);
  return f;
}

namespace {

std::vector<double> class_directions(const PlantedTaskSpec& spec) {
  auto rng = stream_rng(spec.seed, "directions");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> r(spec.num_classes * spec.informative_dims.size());
  for (double& v : r) v = normal(rng);
  return r;
}

int label_from_directions(const PlantedTaskSpec& spec, std::span<const double> directions,
                          std::span<const double> features, std::span<const int> ids) {
  const std::size_t d = spec.model_dim, m = spec.informative_dims.size();
  std::vector<double> mean(m, 0.0);
  std::size_t count = 0;
  for (int id : ids) {
    if (id < kFirstTokenId) continue;
    ++count;
    for (std::size_t q = 0; q < m; ++q) mean[q] += features[static_cast<std::size_t>(id) * d + spec.informative_dims[q]];
  }
  if (count) {
    for (double& v : mean) v /= static_cast<double>(count);
  }
  int best = 0;
  double best_score = 0.0;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    double s = 0.0;
    for (std::size_t q = 0; q < m; ++q) s += directions[c * m + q] * mean[q];
    if (c == 0 || s > best_score) {
      best = static_cast<int>(c);
      best_score = s;
    }
  }
  return best;
}

}  // namespace

int planted_oracle_label(const PlantedTaskSpec& spec, std::span<const double> features, std::span<const int> ids) {
  const auto directions = class_directions(spec);
  return label_from_directions(spec, directions, features, ids);
}

Corpus generate_planted(const PlantedTaskSpec& spec, const std::string& split) {
  spec.validate();
  const auto features = planted_features(spec);
  const auto directions = class_directions(spec);
  auto rng = stream_rng(spec.seed, "samples/" + split);
  const std::size_t min_len = std::max<std::size_t>(2, spec.seq_len / 2);
  std::uniform_int_distribution<std::size_t> length(min_len, spec.seq_len);
  std::uniform_int_distribution<int> token(kFirstTokenId, static_cast<int>(spec.vocab_size) - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> shift(1, spec.num_classes - 1);

  Corpus corpus;
  corpus.split = split;
  corpus.num_classes = spec.num_classes;
  corpus.vocab_size = spec.vocab_size;
  corpus.examples.reserve(spec.num_samples);
  for (std::size_t i = 0; i < spec.num_samples; ++i) {
    Example ex;
    const std::size_t len = length(rng);
    ex.ids.reserve(len);
    ex.ids.push_back(kClsId);
    while (ex.ids.size() < len) ex.ids.push_back(token(rng));
    ex.label = label_from_directions(spec, directions, features, ex.ids);
    if (spec.noise_rate > 0.0 && coin(rng) < spec.noise_rate) {
      ex.label = static_cast<int>((static_cast<std::size_t>(ex.label) + shift(rng)) % spec.num_classes);
    }
    corpus.examples.push_back(std::move(ex));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// TSV

Corpus parse_tsv(std::istream& in, std::size_t max_samples, const Vocab* vocab, const std::string& split) {
  Corpus corpus;
  corpus.split = split;
  if (vocab) corpus.vocab = *vocab;
  std::string line;
  std::size_t line_no = 0;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (max_samples && corpus.examples.size() >= max_samples) break;
    const auto tab = line.find('\t');
    int label = -1;
    if (tab == std::string::npos) throw InputError("line " + std::to_string(line_no) + ": missing tab separator");
    auto [ptr, ec] = std::from_chars(line.data(), line.data() + tab, label);
    if (ec != std::errc() || ptr != line.data() + tab || label < 0) {
      throw InputError("line " + std::to_string(line_no) + ": label must be a non-negative integer");
    }
    Example ex;
    ex.label = label;
    ex.ids.push_back(kClsId);
    std::istringstream tokens(line.substr(tab + 1));
    std::string tok;
    while (tokens >> tok) ex.ids.push_back(vocab ? corpus.vocab.id(tok) : corpus.vocab.add(tok));
    max_label = std::max(max_label, label);
    corpus.examples.push_back(std::move(ex));
  }
  if (corpus.examples.empty()) throw InputError("no examples in input");
  corpus.num_classes = static_cast<std::size_t>(max_label + 1);
  corpus.vocab_size = corpus.vocab.size();
  return corpus;
}

Corpus load_tsv(const std::filesystem::path& path, std::size_t max_samples, const Vocab* vocab,
                const std::string& split) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return parse_tsv(in, max_samples, vocab, split);
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

void truncate(Corpus& corpus, std::size_t max_len) {
  for (auto& ex : corpus.examples)
    if (ex.ids.size() > max_len) ex.ids.resize(max_len);
}

// ---------------------------------------------------------------------------
// Batching

Batch make_batch(const Corpus& corpus, std::span<const std::size_t> indices, int pad_id) {
  Batch b;
  b.size = indices.size();
  for (std::size_t i : indices) b.seq_len = std::max(b.seq_len, corpus.examples.at(i).ids.size());
  b.ids.assign(b.size * b.seq_len, pad_id);
  b.mask.assign(b.size * b.seq_len, 0);
  for (std::size_t r = 0; r < b.size; ++r) {
    const auto& ex = corpus.examples[indices[r]];
    std::copy(ex.ids.begin(), ex.ids.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(r * b.seq_len));
    std::fill_n(b.mask.begin() + static_cast<std::ptrdiff_t>(r * b.seq_len), ex.ids.size(), 1);
    b.labels.push_back(ex.label);
    b.example_index.push_back(indices[r]);
  }
  return b;
}

std::vector<Batch> sequential_batches(const Corpus& corpus, std::size_t batch_size, int pad_id) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  std::vector<Batch> out;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < corpus.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(corpus.size(), start + batch_size); ++i) idx.push_back(i);
    out.push_back(make_batch(corpus, idx, pad_id));
  }
  return out;
}

BatchStream::BatchStream(const Corpus& corpus, std::size_t batch_size, std::uint64_t seed, int pad_id)
    : corpus_(&corpus), batch_size_(batch_size), seed_(seed), pad_id_(pad_id) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (corpus.empty()) throw ConfigError("cannot batch an empty corpus");
  reshuffle();
}

void BatchStream::reshuffle() {
  order_.resize(corpus_->size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  auto rng = stream_rng(seed_, "epoch/" + std::to_string(epoch_));
  std::shuffle(order_.begin(), order_.end(), rng);
  cursor_ = 0;
}

Batch BatchStream::next() {
  if (cursor_ >= order_.size()) {
    ++epoch_;
    reshuffle();
  }
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  std::span<const std::size_t> idx(order_.data() + cursor_, end - cursor_);
  cursor_ = end;
  return make_batch(*corpus_, idx, pad_id_);
}

}  // namespace finegates::data
