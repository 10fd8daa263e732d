#include "finegates/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>

#include "finegates/errors.hpp"

namespace finegates::ckpt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
static_assert(sizeof(double) == 8);

namespace {

constexpr const char* kConfigTensor = "__config__";
constexpr const char* kMetricsTensor = "__metrics__";

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(std::string("truncated checkpoint: expected ") + what + " (" + std::to_string(n) +
                            " bytes, " + std::to_string(remaining()) + " left)",
                        pos_);
    }
  }

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  const std::uint8_t* take(std::size_t n, const char* what) {
    need(n, what);
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

NamedTensor text_tensor(const std::string& name, const std::string& text) {
  NamedTensor t{name, {text.size()}, {}};
  t.data.reserve(text.size());
  for (unsigned char c : text) t.data.push_back(static_cast<double>(c));
  return t;
}

std::string tensor_text(const NamedTensor& t) {
  std::string s;
  s.reserve(t.data.size());
  for (double v : t.data) {
    if (!(v >= 0.0 && v <= 255.0) || v != static_cast<double>(static_cast<int>(v))) {
      throw FormatError("tensor '" + t.name + "' does not hold text", 0);
    }
    s.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  }
  return s;
}

std::vector<double> index_data(const std::vector<std::size_t>& idx) {
  return {idx.begin(), idx.end()};
}

std::vector<std::size_t> data_index(const NamedTensor& t) {
  std::vector<std::size_t> out;
  out.reserve(t.data.size());
  for (double v : t.data) {
    if (!(v >= 0.0) || v != static_cast<double>(static_cast<std::size_t>(v))) {
      throw FormatError("tensor '" + t.name + "' holds a non-integer index", 0);
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode(const std::vector<NamedTensor>& tensors) {
  if (tensors.size() > std::numeric_limits<std::uint32_t>::max()) throw ContractError("too many tensors");
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) throw ContractError("tensor name too long: " + t.name);
    if (t.shape.size() > std::numeric_limits<std::uint8_t>::max()) throw ContractError("tensor rank too large: " + t.name);
    if (ad::numel(t.shape) != t.data.size()) {
      throw DimensionError("tensor '" + t.name + "': " + std::to_string(t.data.size()) + " values for shape " +
                           ad::to_string(t.shape));
    }
    put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put<std::uint8_t>(out, 0);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
    for (std::size_t d : t.shape) {
      if (d > std::numeric_limits<std::uint32_t>::max()) throw ContractError("dimension too large in " + t.name);
      put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    }
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data.data());
    out.insert(out.end(), p, p + t.data.size() * sizeof(double));
  }
  return out;
}

std::vector<NamedTensor> decode(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto* magic = r.take(sizeof kMagic, "magic");
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw FormatError("bad magic, not a FineGates checkpoint", 0);
  const auto count = r.get<std::uint32_t>("tensor count");
  std::vector<NamedTensor> out;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const std::size_t start = r.offset();
    const auto len = r.get<std::uint16_t>("name length");
    const auto* name = r.take(len, "tensor name");
    t.name.assign(reinterpret_cast<const char*>(name), len);
    if (!seen.insert(t.name).second) throw FormatError("duplicate tensor name '" + t.name + "'", start);
    const std::size_t dtype_at = r.offset();
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != 0) throw FormatError("unsupported dtype code " + std::to_string(dtype), dtype_at);
    const auto rank = r.get<std::uint8_t>("rank");
    const std::size_t dims_at = r.offset();
    std::uint64_t n = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint32_t>("dimension");
      t.shape.push_back(d);
      if (d != 0 && n > (r.remaining() / sizeof(double)) / d) {
        throw FormatError("dimensions of '" + t.name + "' exceed the remaining file size", dims_at);
      }
      n *= d;
    }
    const auto* data = r.take(static_cast<std::size_t>(n) * sizeof(double), "tensor data");
    t.data.resize(static_cast<std::size_t>(n));
    std::memcpy(t.data.data(), data, t.data.size() * sizeof(double));
    out.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after the last tensor", r.offset());
  return out;
}

void write_file(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  const auto bytes = encode(tensors);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<NamedTensor> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

// ---------------------------------------------------------------------------
// Model checkpoints

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

namespace {

bool dropped_when_pruned(const std::string& param, const std::map<std::string, adapters::PrunedLinear>& pruned) {
  for (const auto& [layer, p] : pruned) {
    for (const char* suffix : {".weight", ".bias", ".lora_a", ".lora_b"}) {
      if (param == layer + suffix) return true;
    }
  }
  return false;
}

}  // namespace

Checkpoint snapshot(const model::Model& m, const config::RunConfig& cfg, const train::EvalRow* last_eval) {
  Checkpoint c;
  c.config = cfg;
  c.config.model = m.config();
  const auto& pruned = m.pruned_layers();
  m.parameters().for_each([&](const ad::Parameter& p) {
    if (dropped_when_pruned(p.name, pruned)) return;
    c.tensors.push_back({p.name, p.shape, p.value});
  });
  for (const auto& [name, p] : pruned) {
    const std::string base = name + ".pruned.";
    c.tensors.push_back({base + "shape", {2}, {double(p.out_features()), double(p.in_features())}});
    c.tensors.push_back({base + "kept_rows", {p.kept_rows().size()}, index_data(p.kept_rows())});
    c.tensors.push_back({base + "kept_cols", {p.kept_cols().size()}, index_data(p.kept_cols())});
    c.tensors.push_back({base + "weight", {p.kept_rows().size(), p.kept_cols().size()}, p.weight()});
    if (!p.bias().empty()) c.tensors.push_back({base + "bias", {p.bias().size()}, p.bias()});
  }
  if (last_eval) c.last_eval = *last_eval;
  return c;
}

std::vector<NamedTensor> to_tensors(const Checkpoint& c) {
  auto out = c.tensors;
  out.push_back(text_tensor(kConfigTensor, config::render(c.config)));
  if (c.last_eval) {
    const auto& e = *c.last_eval;
    out.push_back({kMetricsTensor,
                   {6},
                   {double(e.step), e.task_loss, e.sparse_loss, e.open_fraction_mean, e.achieved_sparsity, e.accuracy}});
  }
  return out;
}

Checkpoint from_tensors(std::vector<NamedTensor> tensors) {
  Checkpoint c;
  bool have_config = false;
  for (auto& t : tensors) {
    if (t.name == kConfigTensor) {
      c.config = config::parse(tensor_text(t));
      have_config = true;
    } else if (t.name == kMetricsTensor) {
      if (t.data.size() != 6) throw FormatError("metrics tensor has the wrong size", 0);
      train::EvalRow e;
      e.step = static_cast<std::size_t>(t.data[0]);
      e.task_loss = t.data[1];
      e.sparse_loss = t.data[2];
      e.open_fraction_mean = t.data[3];
      e.achieved_sparsity = t.data[4];
      e.accuracy = t.data[5];
      c.last_eval = e;
    } else {
      c.tensors.push_back(std::move(t));
    }
  }
  if (!have_config) throw FormatError("checkpoint has no config tensor", 0);
  return c;
}

void save(const std::filesystem::path& path, const model::Model& m, const config::RunConfig& cfg,
          const train::EvalRow* last_eval) {
  write_file(path, to_tensors(snapshot(m, cfg, last_eval)));
}

Checkpoint load(const std::filesystem::path& path) { return from_tensors(read_file(path)); }

void apply(model::Model& m, const Checkpoint& c) {
  std::set<std::string> pruned_layers;
  for (const auto& t : c.tensors) {
    const auto at = t.name.find(".pruned.shape");
    if (at != std::string::npos && at + 13 == t.name.size()) pruned_layers.insert(t.name.substr(0, at));
  }
  std::set<std::string> used;
  m.parameters().for_each([&](ad::Parameter& p) {
    const auto* t = c.find(p.name);
    if (!t) {
      const auto dot = p.name.rfind('.');
      if (dot != std::string::npos && pruned_layers.count(p.name.substr(0, dot))) return;
      throw FormatError("checkpoint lacks tensor '" + p.name + "'", 0);
    }
    if (t->shape != p.shape) {
      throw DimensionError("tensor '" + p.name + "' has shape " + ad::to_string(t->shape) + " in the checkpoint but " +
                           ad::to_string(p.shape) + " in the model");
    }
    p.value = t->data;
    used.insert(p.name);
  });
  for (const auto& layer : pruned_layers) {
    auto get = [&](const char* part) -> const NamedTensor* { return c.find(layer + ".pruned." + part); };
    const auto* shape = get("shape");
    const auto* rows = get("kept_rows");
    const auto* cols = get("kept_cols");
    const auto* weight = get("weight");
    const auto* bias = get("bias");
    if (!rows || !cols || !weight) throw FormatError("incomplete pruned layer '" + layer + "'", 0);
    if (shape->data.size() != 2) throw FormatError("pruned layer '" + layer + "' has a malformed shape tensor", 0);
    auto kept_rows = data_index(*rows);
    auto kept_cols = data_index(*cols);
    m.install_pruned(adapters::PrunedLinear(layer, static_cast<std::size_t>(shape->data[0]),
                                            static_cast<std::size_t>(shape->data[1]), std::move(kept_rows),
                                            std::move(kept_cols), weight->data,
                                            bias ? bias->data : std::vector<double>()));
    for (const char* part : {"shape", "kept_rows", "kept_cols", "weight", "bias"}) used.insert(layer + ".pruned." + part);
  }
  for (const auto& t : c.tensors) {
    if (!used.count(t.name)) throw FormatError("checkpoint tensor '" + t.name + "' does not belong to the model", 0);
  }
}

model::Model restore(const Checkpoint& c) {
  const auto& mc = c.config.model;
  mc.validate();
  // Placeholder backbone; every value is overwritten by apply().
  model::Backbone zero;
  zero.token_embedding.assign(mc.vocab_size * mc.model_dim, 0.0);
  zero.position_embedding.assign(mc.max_seq_len * mc.model_dim, 0.0);
  for (std::size_t b = 0; b < mc.num_blocks; ++b) {
    for (auto layer : model::kBlockLayers) {
      const auto name = model::layer_name(b, layer);
      const std::size_t out = layer == "mlp_in" ? mc.ffn_dim : mc.model_dim;
      const std::size_t in = layer == "mlp_out" ? mc.ffn_dim : mc.model_dim;
      zero.weights[name].assign(out * in, 0.0);
      if (mc.use_bias) zero.biases[name].assign(out, 0.0);
    }
  }
  model::Model m(mc, zero, 0);
  apply(m, c);
  return m;
}

}  // namespace finegates::ckpt
