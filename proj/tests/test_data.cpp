#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "finegates/data.hpp"
#include "finegates/errors.hpp"
#include "support.hpp"

namespace data = finegates::data;

namespace {

data::PlantedTaskSpec planted(std::size_t n = 2000, double noise = 0.0) {
  data::PlantedTaskSpec s;
  s.informative_dims = data::leading_dims(16);
  s.num_samples = n;
  s.noise_rate = noise;
  s.seed = 7;
  return s;
}

data::Corpus parse(const std::string& text, std::size_t max_samples = 0, const data::Vocab* vocab = nullptr) {
  std::istringstream in(text);
  return data::parse_tsv(in, max_samples, vocab, "train");
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const finegates::InputError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Planted, NoiseFreeLabelsMatchOracle) {
  const auto spec = planted();
  const auto c = data::generate_planted(spec);
  const auto f = data::planted_features(spec);
  for (const auto& ex : c.examples) EXPECT_EQ(data::planted_oracle_label(spec, f, ex.ids), ex.label);
}

TEST(Planted, LabelsIgnoreUninformativeDims) {
  const auto spec = planted(200);
  const auto c = data::generate_planted(spec);
  auto f = data::planted_features(spec);
  std::mt19937_64 rng(3);
  for (std::size_t t = 0; t < spec.vocab_size; ++t)
    for (std::size_t d = 16; d < spec.model_dim; ++d) f[t * spec.model_dim + d] = fgtest::random_vector(rng, 1, -9, 9)[0];
  for (const auto& ex : c.examples) EXPECT_EQ(data::planted_oracle_label(spec, f, ex.ids), ex.label);
}

TEST(Planted, DeterministicPerSeedAndSplit) {
  const auto spec = planted(300);
  const auto a = data::generate_planted(spec, "train"), b = data::generate_planted(spec, "train");
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.examples[i].ids, b.examples[i].ids);
    EXPECT_EQ(a.examples[i].label, b.examples[i].label);
  }
  const auto e = data::generate_planted(spec, "eval");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a.examples[i].ids == e.examples[i].ids;
  EXPECT_EQ(same, 0u);
}

TEST(Planted, IdsAndLabelsInRange) {
  auto spec = planted(500);
  spec.num_classes = 4;
  const auto c = data::generate_planted(spec);
  for (const auto& ex : c.examples) {
    ASSERT_GE(ex.ids.size(), 2u);
    ASSERT_LE(ex.ids.size(), spec.seq_len);
    EXPECT_EQ(ex.ids[0], data::kClsId);
    for (std::size_t i = 1; i < ex.ids.size(); ++i) {
      EXPECT_GE(ex.ids[i], data::kFirstTokenId);
      EXPECT_LT(ex.ids[i], static_cast<int>(spec.vocab_size));
    }
    EXPECT_GE(ex.label, 0);
    EXPECT_LT(ex.label, 4);
  }
}

TEST(Planted, LabelBalanceWithinThreeSigma) {
  const auto c = data::generate_planted(planted(10000));
  std::size_t ones = 0;
  for (const auto& ex : c.examples) ones += ex.label == 1;
  const double n = 10000.0, sigma = std::sqrt(n * 0.25);
  EXPECT_LE(std::abs(static_cast<double>(ones) - n / 2), 3 * sigma);
}

TEST(Planted, NoiseRateFlipsThatShare) {
  const auto spec = planted(10000, 0.2);
  const auto c = data::generate_planted(spec);
  const auto f = data::planted_features(spec);
  std::size_t flipped = 0;
  for (const auto& ex : c.examples) flipped += data::planted_oracle_label(spec, f, ex.ids) != ex.label;
  EXPECT_NEAR(static_cast<double>(flipped) / 10000.0, 0.2, 3 * std::sqrt(0.2 * 0.8 / 10000.0));
}

TEST(Planted, PadRowCarriesNoSignal) {
  const auto f = data::planted_features(planted());
  for (std::size_t d = 0; d < 32; ++d) EXPECT_EQ(f[d], 0.0);
}

TEST(Planted, InvalidSpecsThrow) {
  auto s = planted();
  s.informative_dims = data::leading_dims(32);
  EXPECT_THROW(s.validate(), finegates::ConfigError);
  s = planted();
  s.informative_dims = {3, 3};
  EXPECT_THROW(s.validate(), finegates::ConfigError);
  s = planted();
  s.informative_dims = {40};
  EXPECT_THROW(s.validate(), finegates::ConfigError);
  s = planted();
  s.noise_rate = 1.0;
  EXPECT_THROW(s.validate(), finegates::ConfigError);
  s = planted();
  s.num_classes = 1;
  EXPECT_THROW(s.validate(), finegates::ConfigError);
}

TEST(Tsv, SingleLine) {
  const auto c = parse("1\thello world\n");
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c.examples[0].label, 1);
  // The classifier token comes first, then one id per whitespace token.
  ASSERT_EQ(c.examples[0].ids.size(), 3u);
  EXPECT_EQ(c.examples[0].ids[0], data::kClsId);
  EXPECT_EQ(c.vocab.token(c.examples[0].ids[1]), "hello");
  EXPECT_EQ(c.vocab.token(c.examples[0].ids[2]), "world");
  EXPECT_EQ(c.num_classes, 2u);
}

TEST(Tsv, MaxSamplesCapsLines) { EXPECT_EQ(parse("0\ta\n1\tb\n0\tc\n", 1).size(), 1u); }

TEST(Tsv, UnknownTokenMapsToUnk) {
  const auto train = parse("0\ta b\n1\tc\n");
  const auto eval = parse("1\ta zzz\n", 0, &train.vocab);
  EXPECT_EQ(eval.examples[0].ids, (std::vector<int>{data::kClsId, train.vocab.id("a"), data::kUnkId}));
  EXPECT_EQ(eval.vocab.size(), train.vocab.size());
}

TEST(Tsv, RepeatedTokensShareIds) {
  const auto c = parse("0\tx y x\n");
  EXPECT_EQ(c.examples[0].ids[1], c.examples[0].ids[3]);
  EXPECT_EQ(c.vocab.size(), 5u);
}

TEST(Tsv, MalformedLinesNameTheLine) {
  EXPECT_NE(error_of([] { parse("0\ta\nno tab here\n"); }).find("line 2"), std::string::npos);
  EXPECT_NE(error_of([] { parse("x\ta\n"); }).find("line 1"), std::string::npos);
  EXPECT_NE(error_of([] { parse("-1\ta\n"); }).find("line 1"), std::string::npos);
  EXPECT_THROW(parse(""), finegates::InputError);
  EXPECT_THROW(data::load_tsv("/nonexistent/file.tsv", 0), finegates::InputError);
}

TEST(Tsv, BlankLinesAreSkipped) { EXPECT_EQ(parse("0\ta\n\n1\tb\n").size(), 2u); }

TEST(Vocab, ReservedIdsAndRoundTrip) {
  data::Vocab v;
  EXPECT_EQ(v.size(), 3u);
  EXPECT_EQ(v.id("never seen"), data::kUnkId);
  const int a = v.add("alpha");
  EXPECT_EQ(a, 3);
  EXPECT_EQ(v.add("alpha"), a);
  v.add("beta");
  const auto dir = fgtest::scratch_dir("vocab");
  v.save(dir / "vocab.txt");
  const auto w = data::Vocab::load(dir / "vocab.txt");
  ASSERT_EQ(w.size(), v.size());
  for (int i = 0; i < static_cast<int>(v.size()); ++i) EXPECT_EQ(w.token(i), v.token(i));
  std::ofstream(dir / "bad.txt") << "<pad>\t0\n<unk>\t1\n<cls>\t2\nbroken\n";
  EXPECT_THROW(data::Vocab::load(dir / "bad.txt"), finegates::InputError);
  EXPECT_THROW(v.token(99), finegates::InputError);
}

TEST(Batches, SequentialSplit) {
  const auto c = fgtest::random_corpus(10, 20, 5, 2, 1);
  const auto b = data::sequential_batches(c, 4);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].size, 4u);
  EXPECT_EQ(b[1].size, 4u);
  EXPECT_EQ(b[2].size, 2u);
  EXPECT_EQ(b[2].example_index, (std::vector<std::size_t>{8, 9}));
  EXPECT_THROW(data::sequential_batches(c, 0), finegates::ConfigError);
}

TEST(Batches, PaddingAndMask) {
  data::Corpus c;
  c.examples = {{{2, 5, 6}, 0}, {{2, 7}, 1}};
  const std::size_t idx[] = {0, 1};
  const auto b = data::make_batch(c, idx);
  EXPECT_EQ(b.seq_len, 3u);
  EXPECT_EQ(b.ids, (std::vector<int>{2, 5, 6, 2, 7, data::kPadId}));
  EXPECT_EQ(b.mask, (std::vector<std::uint8_t>{1, 1, 1, 1, 1, 0}));
  EXPECT_EQ(b.labels, (std::vector<int>{0, 1}));
}

TEST(Batches, StreamOrderDependsOnlyOnSeed) {
  const auto c = fgtest::random_corpus(23, 20, 5, 2, 2);
  data::BatchStream a(c, 5, 11), b(c, 5, 11), other(c, 5, 12);
  bool differs = false;
  std::vector<std::size_t> seen;
  for (int i = 0; i < 10; ++i) {
    const auto x = a.next(), y = b.next(), z = other.next();
    EXPECT_EQ(x.example_index, y.example_index);
    differs |= x.example_index != z.example_index;
    if (i < 5) seen.insert(seen.end(), x.example_index.begin(), x.example_index.end());
  }
  EXPECT_TRUE(differs);
  // The first epoch visits every example once (23 = 4 * 5 + 3, the last batch is short).
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < seen.size(); ++i) EXPECT_EQ(seen[i], i);
  EXPECT_GE(a.epoch(), 1u);
}

TEST(Corpus, Truncate) {
  data::Corpus c;
  c.examples = {{{2, 5, 6, 7, 8}, 0}, {{2, 7}, 1}};
  data::truncate(c, 3);
  EXPECT_EQ(c.examples[0].ids, (std::vector<int>{2, 5, 6}));
  EXPECT_EQ(c.examples[1].ids, (std::vector<int>{2, 7}));
}
