#include "finegates/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "finegates/errors.hpp"

#ifndef FINEGATES_VERSION
#define FINEGATES_VERSION "0.1.0"
#endif

namespace finegates::config {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError("key '" + key + "': expected a finite number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Key {
  std::string table;
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string& full, const std::string&)> set;
};

template <class F>
Key size_key(std::string table, std::string name, F field) {
  return {std::move(table), std::move(name),
          [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); },
          [field](RunConfig& c, const std::string& k, const std::string& v) {
            field(c) = static_cast<std::remove_reference_t<decltype(field(c))>>(parse_u64(k, v));
          }};
}

template <class F>
Key double_key(std::string table, std::string name, F field) {
  return {std::move(table), std::move(name),
          [field](const RunConfig& c) { return fmt_double(field(const_cast<RunConfig&>(c))); },
          [field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_double(k, v); }};
}

template <class F>
Key bool_key(std::string table, std::string name, F field) {
  return {std::move(table), std::move(name),
          [field](const RunConfig& c) { return std::string(field(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_bool(k, v); }};
}

template <class F>
Key string_key(std::string table, std::string name, F field) {
  return {std::move(table), std::move(name), [field](const RunConfig& c) { return field(const_cast<RunConfig&>(c)); },
          [field](RunConfig& c, const std::string&, const std::string& v) { field(c) = v; }};
}

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = [] {
    std::vector<Key> k;
    // model
    k.push_back(size_key("model", "num_blocks", [](RunConfig& c) -> auto& { return c.model.num_blocks; }));
    k.push_back(size_key("model", "model_dim", [](RunConfig& c) -> auto& { return c.model.model_dim; }));
    k.push_back(size_key("model", "num_heads", [](RunConfig& c) -> auto& { return c.model.num_heads; }));
    k.push_back(size_key("model", "ffn_dim", [](RunConfig& c) -> auto& { return c.model.ffn_dim; }));
    k.push_back(size_key("model", "vocab_size", [](RunConfig& c) -> auto& { return c.model.vocab_size; }));
    k.push_back(size_key("model", "max_seq_len", [](RunConfig& c) -> auto& { return c.model.max_seq_len; }));
    k.push_back(size_key("model", "num_classes", [](RunConfig& c) -> auto& { return c.model.num_classes; }));
    k.push_back({"model", "adapter_kind",
                 [](const RunConfig& c) { return std::string(model::to_string(c.model.adapter_kind)); },
                 [](RunConfig& c, const std::string&, const std::string& v) {
                   c.model.adapter_kind = model::parse_adapter_kind(v);
                 }});
    k.push_back(size_key("model", "lora_rank", [](RunConfig& c) -> auto& { return c.model.lora_rank; }));
    k.push_back(double_key("model", "lora_scale", [](RunConfig& c) -> auto& { return c.model.lora_scale; }));
    k.push_back(bool_key("model", "gate_mlp", [](RunConfig& c) -> auto& { return c.model.gate_mlp; }));
    k.push_back(bool_key("model", "use_bias", [](RunConfig& c) -> auto& { return c.model.use_bias; }));
    k.push_back(size_key("model", "backbone_seed", [](RunConfig& c) -> auto& { return c.model.backbone_seed; }));
    // train
    k.push_back(double_key("train", "lambda", [](RunConfig& c) -> auto& { return c.train.lambda; }));
    k.push_back(double_key("train", "target_sparsity", [](RunConfig& c) -> auto& { return c.train.target_sparsity; }));
    k.push_back(double_key("train", "lr_gates", [](RunConfig& c) -> auto& { return c.train.lr_gates; }));
    k.push_back(double_key("train", "lr_lora", [](RunConfig& c) -> auto& { return c.train.lr_lora; }));
    k.push_back(double_key("train", "weight_decay", [](RunConfig& c) -> auto& { return c.train.weight_decay; }));
    k.push_back(size_key("train", "batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; }));
    k.push_back(size_key("train", "max_steps", [](RunConfig& c) -> auto& { return c.train.max_steps; }));
    k.push_back(size_key("train", "seed", [](RunConfig& c) -> auto& { return c.train.seed; }));
    k.push_back(size_key("train", "eval_every", [](RunConfig& c) -> auto& { return c.train.eval_every; }));
    k.push_back({"train", "sparsity_loss_mode",
                 [](const RunConfig& c) { return std::string(gates::to_string(c.train.sparsity_loss_mode)); },
                 [](RunConfig& c, const std::string&, const std::string& v) {
                   c.train.sparsity_loss_mode = gates::parse_sparsity_loss_mode(v);
                 }});
    k.push_back({"train", "optimizer", [](const RunConfig& c) { return std::string(train::to_string(c.train.optimizer)); },
                 [](RunConfig& c, const std::string&, const std::string& v) {
                   c.train.optimizer = train::parse_optimizer_kind(v);
                 }});
    k.push_back(double_key("train", "prune_threshold", [](RunConfig& c) -> auto& { return c.train.prune_threshold; }));
    // data
    k.push_back({"data", "source",
                 [](const RunConfig& c) { return std::string(c.data.source == DataSource::planted ? "planted" : "tsv"); },
                 [](RunConfig& c, const std::string& key, const std::string& v) {
                   if (v == "planted") {
                     c.data.source = DataSource::planted;
                   } else if (v == "tsv") {
                     c.data.source = DataSource::tsv;
                   } else {
                     throw ConfigError("key '" + key + "': expected planted or tsv, got '" + v + "'");
                   }
                 }});
    k.push_back(string_key("data", "train_path", [](RunConfig& c) -> auto& { return c.data.train_path; }));
    k.push_back(string_key("data", "eval_path", [](RunConfig& c) -> auto& { return c.data.eval_path; }));
    k.push_back(size_key("data", "max_samples", [](RunConfig& c) -> auto& { return c.data.max_samples; }));
    k.push_back(size_key("data", "informative_dims", [](RunConfig& c) -> auto& { return c.data.informative_dims; }));
    k.push_back(double_key("data", "noise_rate", [](RunConfig& c) -> auto& { return c.data.noise_rate; }));
    k.push_back(size_key("data", "num_samples", [](RunConfig& c) -> auto& { return c.data.num_samples; }));
    k.push_back(size_key("data", "eval_samples", [](RunConfig& c) -> auto& { return c.data.eval_samples; }));
    k.push_back(size_key("data", "seed", [](RunConfig& c) -> auto& { return c.data.seed; }));
    return k;
  }();
  return keys;
}

// Informational keys written into manifests; accepted and ignored on input.
bool is_manifest_key(const std::string& table, const std::string& name) {
  return table == "manifest" && (name == "version" || name == "seed" || name == "outputs");
}

void assign(RunConfig& cfg, const std::string& table, const std::string& name, const std::string& value) {
  if (is_manifest_key(table, name)) return;
  const Key* match = nullptr;
  for (const auto& k : registry()) {
    if (k.name != name || (!table.empty() && k.table != table)) continue;
    if (match) throw ConfigError("ambiguous key '" + name + "'; qualify it with its table");
    match = &k;
  }
  const std::string full = table.empty() ? name : table + "." + name;
  if (!match) throw ConfigError("unknown config key '" + full + "'");
  match->set(cfg, full, trim(value));
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (data.source == DataSource::tsv && data.train_path.empty()) {
    throw ConfigError("data.train_path is required when data.source is tsv");
  }
  if (data.source == DataSource::planted) {
    if (data.num_samples == 0 || data.eval_samples == 0) throw ConfigError("planted task needs samples");
    if (data.informative_dims == 0 || data.informative_dims >= model.model_dim) {
      throw ConfigError("data.informative_dims must lie in [1, model_dim)");
    }
    if (!(data.noise_rate >= 0.0 && data.noise_rate < 1.0)) throw ConfigError("data.noise_rate must lie in [0, 1)");
  }
}

RunConfig parse(std::string_view text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in{std::string(text)};
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig cfg;
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      assign(cfg, "", name, node.data());
      continue;
    }
    if (name != "model" && name != "train" && name != "data" && name != "manifest") {
      throw ConfigError("unknown config table '" + name + "'");
    }
    for (const auto& [key, leaf] : node) {
      if (!leaf.empty()) throw ConfigError("nested tables are not supported ('" + name + "." + key + "')");
      assign(cfg, name, key, leaf.data());
    }
  }
  return cfg;
}

RunConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + a + "' is not of the form key=value");
    const std::string key = trim(std::string_view(a).substr(0, eq));
    const auto dot = key.find('.');
    if (dot == std::string::npos) {
      assign(cfg, "", key, a.substr(eq + 1));
    } else {
      assign(cfg, key.substr(0, dot), key.substr(dot + 1), a.substr(eq + 1));
    }
  }
}

std::string render(const RunConfig& cfg) {
  std::ostringstream os;
  std::string table;
  for (const auto& k : registry()) {
    if (k.table != table) {
      if (!table.empty()) os << '\n';
      table = k.table;
      os << '[' << table << "]\n";
    }
    os << k.name << " = " << k.get(cfg) << '\n';
  }
  return os.str();
}

std::vector<std::string> known_keys() {
  std::vector<std::string> out;
  for (const auto& k : registry()) out.push_back(k.table + "." + k.name);
  return out;
}

std::string version() { return FINEGATES_VERSION; }

std::string render_manifest(const RunConfig& cfg) {
  std::ostringstream os;
  os << render(cfg) << "\n[manifest]\n"
     << "version = " << version() << '\n'
     << "seed = " << cfg.train.seed << '\n'
     << "outputs = manifest.txt metrics.csv final.ckpt best.ckpt"
     << (cfg.data.source == DataSource::tsv ? " vocab.txt\n" : "\n");
  return os.str();
}

}  // namespace finegates::config
