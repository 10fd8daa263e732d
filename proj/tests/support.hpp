#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "finegates/autodiff.hpp"
#include "finegates/data.hpp"
#include "finegates/transformer.hpp"

namespace fgtest {

namespace ad = finegates::ad;
namespace data = finegates::data;
namespace model = finegates::model;

struct Input {
  ad::Shape shape;
  std::vector<double> value;
};

using Fn = std::function<ad::Tensor(ad::Tape&, const std::vector<ad::Tensor>&)>;

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline Input random_input(std::mt19937_64& rng, ad::Shape shape, double lo = -1.0, double hi = 1.0) {
  const auto n = ad::numel(shape);
  return {std::move(shape), random_vector(rng, n, lo, hi)};
}

inline double evaluate(const Fn& f, const std::vector<Input>& in) {
  ad::Tape tape(false);
  std::vector<ad::Tensor> xs;
  for (const auto& i : in) xs.push_back(tape.constant(i.shape, i.value));
  return f(tape, xs).item();
}

inline std::vector<std::vector<double>> analytic_gradients(const Fn& f, const std::vector<Input>& in) {
  ad::Tape tape;
  std::vector<ad::Tensor> xs;
  for (const auto& i : in) xs.push_back(tape.leaf(i.shape, i.value, true));
  const auto loss = f(tape, xs);
  tape.backward(loss);
  std::vector<std::vector<double>> out;
  for (const auto& x : xs) {
    const auto g = x.grad();
    out.emplace_back(g.begin(), g.end());
    if (out.back().empty()) out.back().assign(x.size(), 0.0);
  }
  return out;
}

/// Central difference with step h.
inline double central_difference(const std::function<double()>& f, double& x, double h = 1e-5) {
  const double saved = x;
  x = saved + h;
  const double up = f();
  x = saved - h;
  const double down = f();
  x = saved;
  return (up - down) / (2.0 * h);
}

inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Largest relative error between tape gradients and central differences
/// over every input coordinate.
inline double max_gradient_error(const Fn& f, std::vector<Input> in, double h = 1e-5, double floor = 1e-6) {
  const auto grads = analytic_gradients(f, in);
  double worst = 0.0;
  for (std::size_t t = 0; t < in.size(); ++t) {
    for (std::size_t i = 0; i < in[t].value.size(); ++i) {
      const double num = central_difference([&] { return evaluate(f, in); }, in[t].value[i], h);
      worst = std::max(worst, relative_error(grads[t][i], num, floor));
    }
  }
  return worst;
}

/// Small corpus of random token sequences with lengths in [2, max_len].
inline data::Corpus random_corpus(std::size_t n, std::size_t vocab, std::size_t max_len, std::size_t classes,
                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  data::Corpus c;
  c.num_classes = classes;
  c.vocab_size = vocab;
  std::uniform_int_distribution<std::size_t> len(2, max_len);
  std::uniform_int_distribution<int> tok(data::kFirstTokenId, static_cast<int>(vocab) - 1);
  std::uniform_int_distribution<int> lab(0, static_cast<int>(classes) - 1);
  for (std::size_t i = 0; i < n; ++i) {
    data::Example ex;
    ex.ids.push_back(data::kClsId);
    const auto l = len(rng);
    while (ex.ids.size() < l) ex.ids.push_back(tok(rng));
    ex.label = lab(rng);
    c.examples.push_back(std::move(ex));
  }
  return c;
}

inline data::Batch whole_batch(const data::Corpus& c) {
  std::vector<std::size_t> idx(c.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return data::make_batch(c, idx);
}

inline model::ModelConfig tiny_config(model::AdapterKind kind) {
  model::ModelConfig cfg;
  cfg.num_blocks = 1;
  cfg.model_dim = 8;
  cfg.num_heads = 2;
  cfg.ffn_dim = 16;
  cfg.vocab_size = 24;
  cfg.max_seq_len = 6;
  cfg.num_classes = 3;
  cfg.adapter_kind = kind;
  cfg.lora_rank = 2;
  return cfg;
}

/// Fills every gate mu with uniform values in [lo, hi].
inline void randomize_gates(model::Model& m, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  for (auto& g : m.gate_vectors()) g.parameter().value = random_vector(rng, g.size(), lo, hi);
}

/// Gives LoRA factors non-zero values so that their products contribute.
inline void randomize_lora(model::Model& m, std::mt19937_64& rng, double scale = 0.3) {
  m.parameters().for_each([&](ad::Parameter& p) {
    if (p.role == ad::ParamRole::lora) p.value = random_vector(rng, p.size(), -scale, scale);
  });
}

/// Fresh scratch directory under the system temp path.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("finegates_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fgtest
