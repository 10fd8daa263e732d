#include <gtest/gtest.h>

#include <random>

#include "finegates/adapters.hpp"
#include "finegates/errors.hpp"
#include "finegates/parameters.hpp"
#include "support.hpp"

namespace ad = finegates::ad;
namespace adapters = finegates::adapters;
namespace gates = finegates::gates;
using adapters::LayerKind;

namespace {

struct Fixture {
  ad::ParameterStore store;
  std::unique_ptr<adapters::AdaptedLinear> layer;
};

std::unique_ptr<Fixture> make_layer(std::size_t out, std::size_t in, LayerKind kind, std::vector<double> w,
                                    std::uint64_t seed = 0, bool bias = false, std::size_t rank = 2) {
  auto f = std::make_unique<Fixture>();
  adapters::LayerSpec spec{"layer", out, in, kind, bias, adapters::has_lora(kind) ? rank : 0, 1.0};
  std::mt19937_64 rng(seed);
  std::vector<double> b;
  if (bias) b = fgtest::random_vector(rng, out);
  f->layer = std::make_unique<adapters::AdaptedLinear>(f->store, spec, std::move(w), std::move(b), rng);
  return f;
}

std::unique_ptr<Fixture> random_layer(std::mt19937_64& rng, LayerKind kind, bool bias = false) {
  std::uniform_int_distribution<std::size_t> dim(1, 9);
  const std::size_t out = dim(rng), in = dim(rng);
  return make_layer(out, in, kind, fgtest::random_vector(rng, out * in), rng(), bias,
                    std::uniform_int_distribution<std::size_t>(1, 3)(rng));
}

void set(ad::ParameterStore& s, const std::string& name, std::vector<double> v) { s.at(name).value = std::move(v); }

std::vector<double> plain_matvec(const std::vector<double>& w, std::size_t out, std::size_t in,
                                 const std::vector<double>& x, std::size_t n) {
  std::vector<double> y(n * out, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < out; ++i)
      for (std::size_t j = 0; j < in; ++j) y[r * out + i] += w[i * in + j] * x[r * in + j];
  return y;
}

// diag(rows) (W + B A) diag(cols), computed with plain loops.
std::vector<double> masked_weight(const Fixture& f, const std::vector<double>& rows, const std::vector<double>& cols) {
  const auto& l = *f.layer;
  const std::size_t k = l.out_features(), d = l.in_features();
  std::vector<double> w = l.base_weight().value;
  if (adapters::has_lora(l.kind())) {
    const auto& a = f.store.at("layer.lora_a").value;
    const auto& b = f.store.at("layer.lora_b").value;
    const std::size_t r = l.spec().lora_rank;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < r; ++t) s += b[i * r + t] * a[t * d + j];
        w[i * d + j] += l.spec().lora_scale * s;
      }
  }
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j) w[i * d + j] *= rows[i] * cols[j];
  return w;
}

}  // namespace

TEST(GatedLinear, InitStateEqualsBaseWeightExactly) {
  std::mt19937_64 rng(1);
  for (auto kind : {LayerKind::gated, LayerKind::gated_lora}) {
    auto f = make_layer(5, 4, kind, fgtest::random_vector(rng, 20), 3);
    const auto x = fgtest::random_vector(rng, 3 * 4);
    const auto expected = plain_matvec(f->layer->base_weight().value, 5, 4, x, 3);
    EXPECT_EQ(f->layer->forward_eval(x, 3), expected);
    ad::Tape t;
    auto zero = gates::NoiseSource::zeros();
    auto h = f->layer->forward_train(t, t.constant({3, 4}, x), zero);
    EXPECT_EQ(std::vector<double>(h.data().begin(), h.data().end()), expected);
  }
}

TEST(GatedLinear, ClosedColumnKillsInput) {
  auto f = make_layer(2, 2, LayerKind::gated, {1, 0, 0, 1});
  set(f->store, "layer.gate_cols", {0.5, -0.5});
  EXPECT_EQ(f->layer->forward_eval(std::vector<double>{3, 4}, 1), (std::vector<double>{3, 0}));
}

TEST(GatedLinear, OnlyGatesAreTrainable) {
  auto f = make_layer(3, 4, LayerKind::gated, std::vector<double>(12, 0.5));
  std::size_t trainable = 0;
  f->store.for_each([&](const ad::Parameter& p) { trainable += p.trainable() ? p.size() : 0; });
  EXPECT_EQ(trainable, 3u + 4u);
  EXPECT_FALSE(f->layer->base_weight().trainable());
}

TEST(GatedLinear, BaseWeightNeverReceivesGradient) {
  std::mt19937_64 rng(2);
  auto f = make_layer(3, 4, LayerKind::gated_lora, fgtest::random_vector(rng, 12), 4, true);
  gates::NoiseSource noise(5);
  ad::Tape t;
  auto h = f->layer->forward_train(t, t.constant({2, 4}, fgtest::random_vector(rng, 8)), noise);
  t.backward(ad::sum(ad::mul(h, h)));
  for (double g : f->layer->base_weight().grad) EXPECT_EQ(g, 0.0);
  for (double g : f->layer->bias()->grad) EXPECT_EQ(g, 0.0);
}

TEST(GatedLinear, ColumnGateGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  auto f = make_layer(4, 5, LayerKind::gated_lora, fgtest::random_vector(rng, 20), 6);
  set(f->store, "layer.gate_cols", fgtest::random_vector(rng, 5, -0.4, 0.4));
  set(f->store, "layer.gate_rows", fgtest::random_vector(rng, 4, -0.4, 0.4));
  set(f->store, "layer.lora_b", fgtest::random_vector(rng, 8, -0.3, 0.3));
  const auto x = fgtest::random_vector(rng, 10);
  gates::NoiseSource noise(7);
  noise.set_frozen("layer.gate_rows", fgtest::random_vector(rng, 4, -0.05, 0.05));
  noise.set_frozen("layer.gate_cols", fgtest::random_vector(rng, 5, -0.05, 0.05));
  auto loss = [&](ad::Tape& t) {
    auto h = f->layer->forward_train(t, t.constant({2, 5}, x), noise);
    return ad::sum(ad::mul(h, h));
  };
  auto& mu = f->store.at("layer.gate_cols");
  mu.zero_grad();
  {
    ad::Tape t;
    t.backward(loss(t));
  }
  const auto analytic = mu.grad;
  for (std::size_t j = 0; j < mu.size(); ++j) {
    const double num = fgtest::central_difference(
        [&] {
          ad::Tape t(false);
          return loss(t).item();
        },
        mu.value[j]);
    EXPECT_LE(fgtest::relative_error(analytic[j], num), 1e-5) << j;
  }
}

TEST(GatedLinear, EvalEqualsTrainWithZeroNoise) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto f = random_layer(rng, LayerKind::gated_lora, trial % 2 == 0);
    set(f->store, "layer.gate_rows", fgtest::random_vector(rng, f->layer->out_features()));
    set(f->store, "layer.gate_cols", fgtest::random_vector(rng, f->layer->in_features()));
    const auto x = fgtest::random_vector(rng, 3 * f->layer->in_features());
    ad::Tape t;
    auto zero = gates::NoiseSource::zeros();
    auto h = f->layer->forward_train(t, t.constant({3, f->layer->in_features()}, x), zero);
    EXPECT_EQ(std::vector<double>(h.data().begin(), h.data().end()), f->layer->forward_eval(x, 3));
  }
}

TEST(GatedLinear, OpenGatesGivePlainLoraLayer) {
  std::mt19937_64 rng(5);
  auto f = make_layer(4, 3, LayerKind::gated_lora, fgtest::random_vector(rng, 12), 8);
  set(f->store, "layer.lora_b", fgtest::random_vector(rng, 8));
  const auto x = fgtest::random_vector(rng, 2 * 3);
  const auto w = masked_weight(*f, std::vector<double>(4, 1.0), std::vector<double>(3, 1.0));
  const auto expected = plain_matvec(w, 4, 3, x, 2);
  const auto got = f->layer->forward_eval(x, 2);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-14);
}

TEST(GatedLinear, BinaryGatesMatchMaskedMatmul) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    auto f = random_layer(rng, LayerKind::gated_lora);
    const std::size_t k = f->layer->out_features(), d = f->layer->in_features();
    set(f->store, "layer.lora_b", fgtest::random_vector(rng, f->store.at("layer.lora_b").size()));
    std::bernoulli_distribution coin(0.6);
    std::vector<double> rmu(k), cmu(d), rg(k), cg(d);
    for (std::size_t i = 0; i < k; ++i) rg[i] = coin(rng), rmu[i] = rg[i] ? 0.5 : -1.0;
    for (std::size_t j = 0; j < d; ++j) cg[j] = coin(rng), cmu[j] = cg[j] ? 0.5 : -1.0;
    set(f->store, "layer.gate_rows", rmu);
    set(f->store, "layer.gate_cols", cmu);
    const auto x = fgtest::random_vector(rng, 4 * d);
    const auto expected = plain_matvec(masked_weight(*f, rg, cg), k, d, x, 4);
    const auto got = f->layer->forward_eval(x, 4);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-13);
  }
}

TEST(Fuse, AllOpenKeepsEverything) {
  std::mt19937_64 rng(7);
  const auto w = fgtest::random_vector(rng, 12);
  auto f = make_layer(3, 4, LayerKind::gated_lora, w, 9);
  const auto p = f->layer->fuse();
  EXPECT_EQ(p.weight(), w);
  EXPECT_EQ(p.kept_rows(), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(p.kept_cols(), (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(p.removed_params(), 0u);
}

TEST(Fuse, ClosedMiddleColumnIsRemoved) {
  auto f = make_layer(3, 3, LayerKind::gated, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  set(f->store, "layer.gate_cols", {0.5, -0.5, 0.5});
  const auto p = f->layer->fuse();
  EXPECT_EQ(p.kept_cols(), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(p.kept_rows().size(), 3u);
  EXPECT_EQ(p.weight(), (std::vector<double>{1, 3, 4, 6, 7, 9}));
  EXPECT_EQ(p.removed_params(), 3u);
  EXPECT_EQ(f->layer->removable_params(), 3u);
}

TEST(Fuse, AllClosedIsDegenerate) {
  auto f = make_layer(2, 2, LayerKind::gated, {1, 2, 3, 4});
  set(f->store, "layer.gate_rows", {-1.0, -0.6});
  try {
    (void)f->layer->fuse();
    FAIL() << "expected DegenerateLayerError";
  } catch (const finegates::DegenerateLayerError& e) {
    EXPECT_EQ(e.layer(), "layer");
  }
}

TEST(Fuse, PrunedForwardEqualsEvalForwardBitExactly) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto kind = trial % 2 ? LayerKind::gated_lora : LayerKind::gated;
    auto f = random_layer(rng, kind, trial % 3 == 0);
    const std::size_t k = f->layer->out_features(), d = f->layer->in_features();
    if (adapters::has_lora(kind)) set(f->store, "layer.lora_b", fgtest::random_vector(rng, f->store.at("layer.lora_b").size()));
    auto rmu = fgtest::random_vector(rng, k), cmu = fgtest::random_vector(rng, d);
    rmu[0] = 0.7;
    cmu[d - 1] = 0.2;
    set(f->store, "layer.gate_rows", rmu);
    set(f->store, "layer.gate_cols", cmu);
    const auto x = fgtest::random_vector(rng, 5 * d);
    const auto p = f->layer->fuse();
    EXPECT_EQ(p.forward(x, 5), f->layer->forward_eval(x, 5)) << "trial " << trial;
  }
}

TEST(Fuse, UngatedLayersKeepEverything) {
  std::mt19937_64 rng(9);
  auto f = make_layer(3, 2, LayerKind::lora, fgtest::random_vector(rng, 6), 10);
  EXPECT_FALSE(f->layer->row_gates().has_value());
  const auto p = f->layer->fuse();
  EXPECT_EQ(p.removed_params(), 0u);
  const auto x = fgtest::random_vector(rng, 4);
  EXPECT_EQ(p.forward(x, 2), f->layer->forward_eval(x, 2));
}

TEST(PrunedLinear, IdentityWithOneKeptColumn) {
  adapters::PrunedLinear p("l", 2, 2, {0, 1}, {0}, {1, 0}, {});
  EXPECT_EQ(p.forward(std::vector<double>{3, 4}, 1), (std::vector<double>{3, 0}));
}

TEST(PrunedLinear, DisjointSupportGivesZero) {
  adapters::PrunedLinear p("l", 2, 3, {0, 1}, {2}, {5, 7}, {});
  EXPECT_EQ(p.forward(std::vector<double>{1, 2, 0}, 1), (std::vector<double>{0, 0}));
}

TEST(PrunedLinear, DroppedRowsScatterAsZero) {
  adapters::PrunedLinear p("l", 3, 2, {1}, {0, 1}, {2, 3}, {0.5});
  EXPECT_EQ(p.forward(std::vector<double>{1, 1}, 1), (std::vector<double>{0, 5.5, 0}));
}

TEST(PrunedLinear, RejectsInconsistentShapes) {
  EXPECT_THROW(adapters::PrunedLinear("l", 2, 2, {0, 1}, {0}, {1, 2, 3}, {}), finegates::DimensionError);
  EXPECT_THROW(adapters::PrunedLinear("l", 2, 2, {0, 2}, {0}, {1, 2}, {}), finegates::DimensionError);
  adapters::PrunedLinear p("l", 2, 2, {0, 1}, {0}, {1, 2}, {});
  EXPECT_THROW(p.forward(std::vector<double>{1, 2, 3}, 1), finegates::DimensionError);
}

TEST(Lora, InitProductIsZeroAndCountsAdd) {
  std::mt19937_64 rng(11);
  auto f = make_layer(6, 5, LayerKind::gated_lora, fgtest::random_vector(rng, 30), 12, false, 3);
  for (double b : f->store.at("layer.lora_b").value) EXPECT_EQ(b, 0.0);
  bool any_nonzero = false;
  for (double a : f->store.at("layer.lora_a").value) any_nonzero |= a != 0.0;
  EXPECT_TRUE(any_nonzero);
  std::size_t trainable = 0;
  f->store.for_each([&](const ad::Parameter& p) { trainable += p.trainable() ? p.size() : 0; });
  EXPECT_EQ(trainable, (6u + 5u) + 3u * (6u + 5u));
}

TEST(Lora, FullKindTrainsBaseWeight) {
  auto f = make_layer(2, 2, LayerKind::full, {1, 2, 3, 4});
  EXPECT_TRUE(f->layer->base_weight().trainable());
  EXPECT_EQ(f->layer->base_weight().role, ad::ParamRole::base_trainable);
}

TEST(Layer, WrongInputWidthThrows) {
  auto f = make_layer(2, 3, LayerKind::gated, std::vector<double>(6, 1.0));
  EXPECT_THROW(f->layer->forward_eval(std::vector<double>{1, 2}, 1), finegates::DimensionError);
}
