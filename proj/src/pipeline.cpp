#include "finegates/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <ostream>

#include "finegates/errors.hpp"

namespace finegates::pipeline {

data::PlantedTaskSpec planted_spec(const config::RunConfig& cfg) {
  data::PlantedTaskSpec spec;
  spec.vocab_size = cfg.model.vocab_size;
  spec.seq_len = cfg.model.max_seq_len;
  spec.num_classes = cfg.model.num_classes;
  spec.model_dim = cfg.model.model_dim;
  spec.informative_dims = data::leading_dims(cfg.data.informative_dims);
  spec.noise_rate = cfg.data.noise_rate;
  spec.num_samples = cfg.data.num_samples;
  spec.seed = cfg.data.seed;
  return spec;
}

namespace {

std::size_t max_label(const data::Corpus& c) {
  int m = 0;
  for (const auto& ex : c.examples) m = std::max(m, ex.label);
  return static_cast<std::size_t>(m);
}

}  // namespace

Datasets prepare_data(config::RunConfig& cfg) {
  Datasets d;
  if (cfg.data.source == config::DataSource::planted) {
    cfg.validate();
    auto spec = planted_spec(cfg);
    d.train = data::generate_planted(spec, "train");
    spec.num_samples = cfg.data.eval_samples;
    d.eval = data::generate_planted(spec, "eval");
    d.embedding = data::planted_features(planted_spec(cfg));
    return d;
  }
  if (cfg.data.train_path.empty()) throw ConfigError("data.train_path is required when data.source is tsv");
  if (cfg.data.eval_path.empty()) throw ConfigError("data.eval_path is required when data.source is tsv");
  d.train = data::load_tsv(cfg.data.train_path, cfg.data.max_samples, nullptr, "train");
  d.eval = data::load_tsv(cfg.data.eval_path, cfg.data.max_samples, &d.train.vocab, "eval");
  data::truncate(d.train, cfg.model.max_seq_len);
  data::truncate(d.eval, cfg.model.max_seq_len);
  cfg.model.vocab_size = d.train.vocab.size();
  cfg.model.num_classes = std::max<std::size_t>(2, std::max(max_label(d.train), max_label(d.eval)) + 1);
  cfg.validate();
  return d;
}

model::Model build_model(const config::RunConfig& cfg, const Datasets& data) {
  const auto backbone = model::make_backbone(cfg.model, data.embedding);
  return model::Model(cfg.model, backbone, cfg.train.seed);
}

train::FitResult run_training(config::RunConfig cfg, const std::filesystem::path& out_dir) {
  auto data = prepare_data(cfg);
  auto m = build_model(cfg, data);
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream manifest(out_dir / kManifestFile);
    if (!manifest) throw InputError("cannot write into " + out_dir.string());
    manifest << config::render_manifest(cfg);
  }
  if (cfg.data.source == config::DataSource::tsv) data.train.vocab.save(out_dir / kVocabFile);
  std::ofstream metrics(out_dir / kMetricsFile);
  metrics << train::kMetricsHeader << '\n';
  train::FitCallbacks cb;
  cb.on_eval = [&](const train::EvalRow& row) { metrics << train::format_metrics_row(row) << '\n' << std::flush; };
  cb.on_best = [&](const train::EvalRow& row) { ckpt::save(out_dir / kBestCheckpoint, m, cfg, &row); };
  auto result = train::fit(m, data.train, data.eval, cfg.train, cb);
  ckpt::save(out_dir / kFinalCheckpoint, m, cfg, result.history.empty() ? nullptr : &result.history.back());
  return result;
}

data::Corpus eval_corpus(const ckpt::Checkpoint& c, const std::optional<std::filesystem::path>& data_path,
                         const std::optional<std::filesystem::path>& vocab_path) {
  const auto& cfg = c.config;
  data::Corpus corpus;
  if (data_path) {
    std::optional<data::Vocab> vocab;
    if (vocab_path) vocab = data::Vocab::load(*vocab_path);
    if (!vocab) throw ConfigError("a vocabulary file is needed to read " + data_path->string());
    corpus = data::load_tsv(*data_path, 0, &*vocab, "eval");
  } else if (cfg.data.source == config::DataSource::planted) {
    auto spec = planted_spec(cfg);
    spec.num_samples = cfg.data.eval_samples;
    corpus = data::generate_planted(spec, "eval");
  } else {
    if (!vocab_path) throw ConfigError("a vocabulary file is needed to read " + cfg.data.eval_path);
    const auto vocab = data::Vocab::load(*vocab_path);
    corpus = data::load_tsv(cfg.data.eval_path, cfg.data.max_samples, &vocab, "eval");
  }
  data::truncate(corpus, cfg.model.max_seq_len);
  if (corpus.vocab.size() > cfg.model.vocab_size && data_path) {
    throw DimensionError("vocabulary has " + std::to_string(corpus.vocab.size()) + " entries, the model only " +
                         std::to_string(cfg.model.vocab_size));
  }
  for (const auto& ex : corpus.examples) {
    if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= cfg.model.num_classes) {
      throw InputError("label " + std::to_string(ex.label) + " outside the model's " +
                       std::to_string(cfg.model.num_classes) + " classes");
    }
  }
  return corpus;
}

std::vector<PruneReportRow> prune_report(const model::Model& m) {
  std::vector<PruneReportRow> rows;
  PruneReportRow total{"total", 0, 0, 0, 0.0};
  std::size_t gated = 0;
  for (const auto& [name, p] : m.pruned_layers()) {
    const std::size_t size = p.out_features() * p.in_features();
    rows.push_back({name, p.kept_rows().size(), p.kept_cols().size(), p.removed_params(),
                    static_cast<double>(p.removed_params()) / static_cast<double>(size)});
    total.kept_rows += p.kept_rows().size();
    total.kept_cols += p.kept_cols().size();
    total.removed_params += p.removed_params();
    gated += size;
  }
  // Forward order rather than name order.
  std::vector<PruneReportRow> ordered;
  for (const auto* l : m.layers()) {
    for (const auto& r : rows)
      if (r.layer == l->name()) ordered.push_back(r);
  }
  total.layer_sparsity = gated ? static_cast<double>(total.removed_params) / static_cast<double>(gated) : 0.0;
  ordered.push_back(total);
  return ordered;
}

void write_prune_report(std::ostream& os, const std::vector<PruneReportRow>& rows) {
  os << "layer,kept_rows,kept_cols,removed_params,layer_sparsity\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%zu,%.17g", r.layer.c_str(), r.kept_rows, r.kept_cols,
                  r.removed_params, r.layer_sparsity);
    os << buf << '\n';
  }
}

}  // namespace finegates::pipeline
