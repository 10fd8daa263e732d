#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "finegates/checkpoint.hpp"
#include "finegates/pipeline.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
namespace ckpt = finegates::ckpt;
namespace config = finegates::config;
namespace model = finegates::model;

namespace {

struct Run {
  int code = -1;
  std::string output;  // stdout and stderr
};

Run cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + FINEGATES_CLI + std::string(" ") + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.output.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string f; std::getline(ss, f, ',');) out.push_back(f);
  return out;
}

// Number following `key ` in the tool's one-line summaries.
double summary_value(const std::string& output, const std::string& key) {
  const auto at = output.find(key + " ");
  if (at == std::string::npos) {
    ADD_FAILURE() << "no '" << key << "' in: " << output;
    return std::nan("");
  }
  return std::stod(output.substr(at + key.size() + 1));
}

constexpr const char* kTinyRun = R"([model]
num_blocks = 1
model_dim = 8
num_heads = 2
ffn_dim = 16
vocab_size = 40
max_seq_len = 6
adapter_kind = gates_plus_lora
lora_rank = 2

[train]
lambda = 1
target_sparsity = 0.3
lr_gates = 0.04
lr_lora = 0.01
batch_size = 8
max_steps = 25
eval_every = 10
seed = 3

[data]
informative_dims = 4
num_samples = 64
eval_samples = 40
)";

fs::path write_config(const fs::path& dir, const std::string& text = kTinyRun) {
  const auto p = dir / "run.ini";
  std::ofstream(p) << text;
  return p;
}

config::RunConfig tiny_run(model::AdapterKind kind) {
  auto c = config::parse(kTinyRun);
  c.model.adapter_kind = kind;
  return c;
}

model::Model fresh_model(const config::RunConfig& run) {
  return model::Model(run.model, model::make_backbone(run.model), 1);
}

// Training once is enough for the read-only subcommands below.
class Trained : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fgtest::scratch_dir("cli_trained");
    const auto r = cli("train -c " + write_config(dir_).string() + " -o " + (dir_ / "out").string());
    ASSERT_EQ(r.code, 0) << r.output;
  }
  static fs::path out() { return dir_ / "out"; }
  static inline fs::path dir_;
};

}  // namespace

TEST(Cli, MissingConfigExitsTwoNamingThePath) {
  const auto r = cli("train -c /nonexistent/run.ini -o /tmp/finegates_never");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("/nonexistent/run.ini"), std::string::npos);
}

TEST(Cli, UnknownKeyExitsTwoNamingTheKey) {
  const auto dir = fgtest::scratch_dir("cli_unknown");
  const auto cfg = write_config(dir, std::string(kTinyRun) + "lerning_rate = 1\n");
  const auto r = cli("train -c " + cfg.string() + " -o " + (dir / "out").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("data.lerning_rate"), std::string::npos) << r.output;
  const auto s = cli("train -c " + cfg.string() + " -o x --set train.nope=1");
  EXPECT_EQ(s.code, 2);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("prune -k x.ckpt").code, 2);
  const auto v = cli("--version");
  EXPECT_EQ(v.code, 0);
  EXPECT_NE(v.output.find(config::version()), std::string::npos);
}

TEST(Cli, NonFiniteLossExitsThree) {
  const auto dir = fgtest::scratch_dir("cli_nan");
  const auto cfg = write_config(dir);
  const auto r = cli("train -c " + cfg.string() + " -o " + (dir / "out").string() +
                     " --set model.adapter_kind=full_finetune --set train.lr_lora=1e200 --set train.optimizer=sgd");
  EXPECT_EQ(r.code, 3) << r.output;
  EXPECT_NE(r.output.find("step"), std::string::npos);
}

TEST(Cli, SeedOverrideChangesOnlyTheSeed) {
  const auto dir = fgtest::scratch_dir("cli_seed");
  const auto cfg = write_config(dir);
  ASSERT_EQ(cli("train -c " + cfg.string() + " -o " + (dir / "a").string()).code, 0);
  ASSERT_EQ(cli("train -c " + cfg.string() + " -o " + (dir / "b").string() + " --seed 11").code, 0);
  ASSERT_EQ(cli("train -c " + cfg.string() + " -o " + (dir / "c").string(), "FINEGATES_SEED=11").code, 0);
  const auto a = lines(slurp(dir / "a" / "manifest.txt")), b = lines(slurp(dir / "b" / "manifest.txt"));
  ASSERT_EQ(a.size(), b.size());
  std::size_t changed = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) continue;
    ++changed;
    EXPECT_EQ(a[i], "seed = 3");
    EXPECT_EQ(b[i], "seed = 11");
  }
  EXPECT_EQ(changed, 2u);  // [train] seed and the [manifest] copy
  EXPECT_EQ(slurp(dir / "b" / "manifest.txt"), slurp(dir / "c" / "manifest.txt"));
  EXPECT_EQ(slurp(dir / "b" / "metrics.csv"), slurp(dir / "c" / "metrics.csv"));
}

TEST_F(Trained, WritesTheFixedLayout) {
  for (const char* f : {"manifest.txt", "metrics.csv", "final.ckpt", "best.ckpt"}) EXPECT_TRUE(fs::exists(out() / f)) << f;
  const auto m = lines(slurp(out() / "metrics.csv"));
  ASSERT_EQ(m.size(), 4u);  // header and steps 10, 20, 25
  EXPECT_EQ(m[0], finegates::train::kMetricsHeader);
  EXPECT_EQ(fields(m[3])[0], "25");
}

TEST_F(Trained, IdenticalInvocationsAndManifestRerunsMatch) {
  const auto again = dir_ / "again", rerun = dir_ / "rerun";
  ASSERT_EQ(cli("train -c " + (dir_ / "run.ini").string() + " -o " + again.string()).code, 0);
  ASSERT_EQ(cli("train -c " + (out() / "manifest.txt").string() + " -o " + rerun.string()).code, 0);
  const auto metrics = slurp(out() / "metrics.csv");
  EXPECT_EQ(slurp(again / "metrics.csv"), metrics);
  EXPECT_EQ(slurp(rerun / "metrics.csv"), metrics);
  EXPECT_EQ(slurp(rerun / "manifest.txt"), slurp(out() / "manifest.txt"));
  EXPECT_EQ(slurp(rerun / "final.ckpt"), slurp(out() / "final.ckpt"));
}

TEST_F(Trained, EvalReproducesLastLoggedAccuracy) {
  const auto r = cli("eval -k " + (out() / "final.ckpt").string() + " -o " + (dir_ / "eval").string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto last = fields(lines(slurp(out() / "metrics.csv")).back());
  EXPECT_EQ(summary_value(r.output, "accuracy"), std::stod(last.back()));
  const auto pred = lines(slurp(dir_ / "eval" / "predictions.csv"));
  EXPECT_EQ(pred.size(), 41u);
  EXPECT_EQ(pred[0], "index,label,prediction");
}

TEST_F(Trained, PruneReportMatchesParameterCounts) {
  const auto k = out() / "final.ckpt";
  const auto r = cli("prune -k " + k.string() + " -o " + (dir_ / "pruned").string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto counts = ckpt::restore(ckpt::load(k)).count_params();
  const auto report = lines(slurp(dir_ / "pruned" / "prune_report.csv"));
  EXPECT_EQ(report[0], "layer,kept_rows,kept_cols,removed_params,layer_sparsity");
  ASSERT_EQ(report.size(), 1u + 6u + 1u);
  std::size_t sum = 0;
  for (std::size_t i = 1; i + 1 < report.size(); ++i) sum += std::stoul(fields(report[i])[3]);
  const auto total = fields(report.back());
  EXPECT_EQ(total[0], "total");
  EXPECT_EQ(std::stoul(total[3]), sum);
  EXPECT_EQ(std::stoul(total[3]), counts.removable);
  EXPECT_EQ(summary_value(r.output, "removed_params"), static_cast<double>(counts.removable));
  EXPECT_EQ(std::stod(total[4]), counts.achieved_sparsity());

  const auto g = cli("gates-report -k " + k.string() + " -o " + (dir_ / "gates").string());
  ASSERT_EQ(g.code, 0) << g.output;
  EXPECT_EQ(summary_value(g.output, "removed_params"), static_cast<double>(counts.removable));
  EXPECT_EQ(summary_value(g.output, "achieved_sparsity"), std::stod(total[4]));

  const auto pruned_eval = cli("eval -k " + (dir_ / "pruned" / "pruned.ckpt").string());
  const auto gated_eval = cli("eval -k " + k.string());
  ASSERT_EQ(pruned_eval.code, 0) << pruned_eval.output;
  EXPECT_EQ(summary_value(pruned_eval.output, "accuracy"), summary_value(gated_eval.output, "accuracy"));
}

TEST_F(Trained, BenchInferEmitsOneRowPerLevel) {
  const auto r = cli("bench-infer -k " + (out() / "final.ckpt").string() + " --levels 0,0.2,0.4 --repeats 2 -o " +
                     (dir_ / "bench").string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rows = lines(slurp(dir_ / "bench" / "bench.csv"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], "sparsity,median_epoch_ms,rtf,accuracy,removed_params");
  EXPECT_EQ(std::stod(fields(rows[1])[2]), 1.0);
}

TEST(Cli, FreshGatesReportAllOpenAndPruneRemovesNothing) {
  const auto dir = fgtest::scratch_dir("cli_fresh");
  const auto run = tiny_run(model::AdapterKind::gates_only);
  const auto m = fresh_model(run);
  ckpt::save(dir / "fresh.ckpt", m, run);
  const auto g = cli("gates-report -k " + (dir / "fresh.ckpt").string() + " -o " + dir.string());
  ASSERT_EQ(g.code, 0) << g.output;
  const auto rows = lines(slurp(dir / "gates_report.csv"));
  std::size_t expected = 0;
  for (const auto* l : m.layers()) expected += l->out_features() + l->in_features();
  EXPECT_EQ(rows.size(), 1u + expected);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto f = fields(rows[i]);
    EXPECT_EQ(std::stod(f[3]), 0.5);
    EXPECT_EQ(f[5], "1");
  }
  const auto p = cli("prune -k " + (dir / "fresh.ckpt").string() + " -o " + (dir / "p").string());
  ASSERT_EQ(p.code, 0) << p.output;
  EXPECT_EQ(summary_value(p.output, "removed_params"), 0.0);
}

TEST(Cli, BinaryGatesPruneWithoutChangingAccuracy) {
  const auto dir = fgtest::scratch_dir("cli_binary");
  const auto run = tiny_run(model::AdapterKind::gates_plus_lora);
  auto m = fresh_model(run);
  std::mt19937_64 rng(12);
  fgtest::randomize_lora(m, rng);
  std::bernoulli_distribution open(0.7);
  for (auto& g : m.gate_vectors()) {
    for (double& v : g.parameter().value) v = open(rng) ? 0.5 : -0.5;
    g.parameter().value[0] = 0.5;
  }
  ckpt::save(dir / "gated.ckpt", m, run);
  ASSERT_EQ(cli("prune -k " + (dir / "gated.ckpt").string() + " -o " + dir.string()).code, 0);
  const auto a = cli("eval -k " + (dir / "gated.ckpt").string() + " -o " + (dir / "a").string());
  const auto b = cli("eval -k " + (dir / "pruned.ckpt").string() + " -o " + (dir / "b").string());
  ASSERT_EQ(a.code, 0) << a.output;
  ASSERT_EQ(b.code, 0) << b.output;
  EXPECT_EQ(a.output, b.output);
  EXPECT_EQ(slurp(dir / "a" / "predictions.csv"), slurp(dir / "b" / "predictions.csv"));
}

TEST(Cli, DegenerateLayerExitsFourNamingIt) {
  const auto dir = fgtest::scratch_dir("cli_degenerate");
  const auto run = tiny_run(model::AdapterKind::gates_only);
  auto m = fresh_model(run);
  auto& cols = m.parameters().at("block0.wk.gate_cols").value;
  std::fill(cols.begin(), cols.end(), -1.0);
  ckpt::save(dir / "d.ckpt", m, run);
  const auto r = cli("prune -k " + (dir / "d.ckpt").string() + " -o " + dir.string());
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.output.find("block0.wk"), std::string::npos) << r.output;
}

TEST(Cli, InputProblemsExitTwo) {
  const auto dir = fgtest::scratch_dir("cli_inputs");
  const auto run = tiny_run(model::AdapterKind::frozen);
  ckpt::save(dir / "frozen.ckpt", fresh_model(run), run);
  EXPECT_EQ(cli("gates-report -k " + (dir / "frozen.ckpt").string()).code, 2);
  EXPECT_EQ(cli("eval -k " + (dir / "missing.ckpt").string()).code, 2);

  std::ofstream(dir / "empty.tsv").close();
  std::ofstream(dir / "vocab.txt") << "<pad>\t0\n<unk>\t1\n<cls>\t2\n";
  EXPECT_EQ(cli("eval -k " + (dir / "frozen.ckpt").string() + " -d " + (dir / "empty.tsv").string()).code, 2);

  std::ofstream(dir / "garbage.ckpt") << "not a checkpoint";
  const auto g = cli("eval -k " + (dir / "garbage.ckpt").string());
  EXPECT_EQ(g.code, 2);
  EXPECT_NE(g.output.find("byte offset 0"), std::string::npos) << g.output;
}

TEST(Cli, TsvTrainingWritesVocabulary) {
  const auto dir = fgtest::scratch_dir("cli_tsv");
  {
    std::ofstream tr(dir / "train.tsv"), ev(dir / "eval.tsv");
    for (int i = 0; i < 40; ++i) tr << (i % 2) << '\t' << (i % 2 ? "good fine nice" : "bad poor awful") << ' ' << i << '\n';
    for (int i = 0; i < 10; ++i) ev << (i % 2) << '\t' << (i % 2 ? "nice" : "awful") << " unseen\n";
  }
  auto text = std::string(kTinyRun) + "source = tsv\ntrain_path = " + (dir / "train.tsv").string() +
              "\neval_path = " + (dir / "eval.tsv").string() + "\n";
  const auto cfg = write_config(dir, text);
  const auto r = cli("train -c " + cfg.string() + " -o " + (dir / "out").string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(dir / "out" / "vocab.txt"));
  const auto manifest = config::load(dir / "out" / "manifest.txt");
  EXPECT_EQ(manifest.model.vocab_size, 3u + 6u + 40u);
  const auto e = cli("eval -k " + (dir / "out" / "final.ckpt").string() + " -d " + (dir / "eval.tsv").string());
  EXPECT_EQ(e.code, 0) << e.output;
}

TEST(Cli, BenchMatmulSmallGrid) {
  const auto r = cli("bench-matmul --dim 32 --batch 2 --repeats 6 --grid 0,0.5 --precision f64");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(lines(r.output).size(), 3u);
  EXPECT_EQ(cli("bench-matmul --dim 32 --repeats 6 --grid 1.5").code, 2);
}
