#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <nlohmann/json.hpp>

#include "dann/config.hpp"

namespace dann {

/// Keeps freed tape buffers in the heap instead of returning them to the OS
/// on every op; worth about 2x on the recurrent and convolutional extractors.
inline void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

struct Dataset {
  PreparedData prepared;
  EmbeddingTable table;
};

struct EncodedSplits {
  std::vector<EncodedDoc> source_train;
  std::vector<EncodedDoc> source_test;
  std::vector<EncodedDoc> target_train;
  std::vector<EncodedDoc> target_test;
  std::vector<EncodedDoc> target_unlabeled;
  std::size_t n_classes = 0;
  std::size_t n_domains = 0;

  TrainingData training() const {
    return TrainingData{source_train, target_train, target_unlabeled, n_classes, n_domains};
  }

  /// Held-out documents of every domain.
  std::vector<const EncodedDoc*> test_docs() const {
    auto out = pointers(source_test);
    for (const auto& d : target_test) out.push_back(&d);
    return out;
  }
};

namespace detail {

inline Corpus merge_corpora(std::vector<Corpus> parts) {
  Corpus out = std::move(parts.front());
  for (std::size_t i = 1; i < parts.size(); ++i) {
    if (parts[i].class_names != out.class_names) {
      throw ConfigError("corpus files disagree on class names");
    }
    for (auto& d : parts[i].documents) {
      const std::string& name = parts[i].domain_names.at(static_cast<std::size_t>(d.domain));
      int idx = out.domain_index(name);
      if (idx < 0) {
        out.domain_names.push_back(name);
        idx = static_cast<int>(out.domain_names.size()) - 1;
      }
      d.domain = idx;
      out.documents.push_back(std::move(d));
    }
  }
  return out;
}

template <class F>
void for_each_doc(PreparedData& p, F&& f) {
  for (auto* split : {&p.source_train, &p.source_test, &p.target_train, &p.target_test, &p.target_unlabeled}) {
    for (auto& d : *split) f(d);
  }
}

inline EmbeddingTable open_embeddings(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open embeddings " + path);
  return load_embeddings(in, &vocab);
}

/// Separate embedding spaces: token t of domain d becomes "d::t" in one
/// combined table.
inline EmbeddingTable per_domain_table(const RunConfig& cfg, PreparedData& p) {
  std::vector<Vocabulary> vocabs(p.n_domains());
  for_each_doc(p, [&](const Document& d) {
    for (const auto& t : d.tokens) vocabs[static_cast<std::size_t>(d.domain)].add(t);
  });
  Vocabulary combined;
  std::vector<double> rows;
  std::size_t dim = 0;
  for (std::size_t dom = 0; dom < p.n_domains(); ++dom) {
    const std::string& name = p.domain_names[dom];
    auto it = cfg.domain_embeddings.find(name);
    if (it == cfg.domain_embeddings.end()) {
      throw ConfigError("config: domain_embeddings has no entry for domain '" + name + "'");
    }
    EmbeddingTable t = open_embeddings(it->second, vocabs[dom]);
    if (dim == 0) dim = t.dim;
    if (t.dim != dim) {
      throw ConfigError("embeddings for domain '" + name + "' have dimension " + std::to_string(t.dim) +
                        ", expected " + std::to_string(dim));
    }
    for (std::size_t r = 1; r < t.vocab.size(); ++r) {
      combined.add(name + "::" + t.vocab.token(r));
      const double* row = t.matrix.value.data().data() + r * dim;
      rows.insert(rows.end(), row, row + dim);
    }
  }
  for_each_doc(p, [&](Document& d) {
    const std::string& name = p.domain_names[static_cast<std::size_t>(d.domain)];
    for (auto& t : d.tokens) t = name + "::" + t;
  });
  Tensor m(Shape{combined.size(), dim});
  std::copy(rows.begin(), rows.end(), m.data().begin() + dim);
  return make_table(std::move(combined), std::move(m));
}

}  // namespace detail

/// Loads or generates the corpus, applies the sampling plan and builds the
/// embedding table. Fully determined by the config.
inline Dataset load_dataset(const RunConfig& cfg) {
  cfg.validate();
  Dataset out;
  if (cfg.data == DataSource::kSynthetic) {
    SynthData sd = synth_generate(cfg.synth, cfg.dann.seed);
    out.prepared = make_splits(std::vector<const Corpus*>{&sd.source}, sd.target, cfg.plan(), cfg.zero_shot);
    out.table = std::move(sd.table);
    return out;
  }
  std::vector<Corpus> parts;
  for (const auto& path : cfg.corpus) {
    LoadReport rep;
    parts.push_back(load_jsonl(path, cfg.fields, &rep));
  }
  Corpus all = detail::merge_corpora(std::move(parts));
  out.prepared = make_splits(all, cfg.target_domain, cfg.plan(), cfg.zero_shot);
  if (!cfg.domain_embeddings.empty()) {
    out.table = detail::per_domain_table(cfg, out.prepared);
  } else {
    Vocabulary vocab;
    detail::for_each_doc(out.prepared, [&](const Document& d) {
      for (const auto& t : d.tokens) vocab.add(t);
    });
    out.table = detail::open_embeddings(cfg.embeddings, vocab);
  }
  return out;
}

inline EncodedSplits encode_splits(const Dataset& ds) {
  const Vocabulary& v = ds.table.vocab;
  const PreparedData& p = ds.prepared;
  return EncodedSplits{encode_all(p.source_train, v), encode_all(p.source_test, v),
                       encode_all(p.target_train, v), encode_all(p.target_test, v),
                       encode_all(p.target_unlabeled, v), p.n_classes(), p.n_domains()};
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline std::filesystem::path out_path(const RunConfig& cfg, const std::string& name) {
  return std::filesystem::path(cfg.out_dir) / name;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Wall-clock notes go to a sidecar log so the main artifacts stay
/// byte-reproducible.
inline void append_log(const RunConfig& cfg, const std::string& line) {
  std::filesystem::create_directories(cfg.out_dir);
  std::ofstream log(out_path(cfg, "run.log"), std::ios::app);
  const std::time_t now = std::time(nullptr);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  log << stamp << ' ' << line << '\n';
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Writes manifest.json and the resolved config.json.
inline nlohmann::json cmd_prepare(const RunConfig& cfg) {
  Dataset ds = load_dataset(cfg);
  nlohmann::json manifest = manifest_json(ds.prepared, cfg.plan());
  write_text(out_path(cfg, "manifest.json"), manifest.dump(2) + "\n");
  write_text(out_path(cfg, "config.json"), to_json(cfg).dump(2) + "\n");
  return manifest;
}

/// Rebuilds the splits and checks them against the prepared manifest.
inline Dataset load_prepared(const RunConfig& cfg) {
  const auto path = out_path(cfg, "manifest.json");
  if (!std::filesystem::exists(path)) {
    throw ConfigError("no manifest at " + path.string() + "; run prepare first");
  }
  const nlohmann::json on_disk = read_json_file(path.string());
  Dataset ds = load_dataset(cfg);
  if (manifest_json(ds.prepared, cfg.plan()).at("splits") != on_disk.at("splits")) {
    throw ConfigError("manifest " + path.string() + " does not match the config; rerun prepare");
  }
  return ds;
}

struct Metrics {
  double source_acc = 0.0;
  double target_acc = 0.0;
};

inline nlohmann::json metrics_json(const RunConfig& cfg, const Metrics& m) {
  return {{"source_acc", json_number(m.source_acc)},
          {"target_acc", json_number(m.target_acc)},
          {"extractor", extractor_name(cfg.dann.extractor.kind)},
          {"lambda", cfg.dann.lambda},
          {"critic_loss", critic_loss_name(cfg.dann.critic_loss)},
          {"adversarial", cfg.dann.adversarial},
          {"zero_shot", cfg.zero_shot},
          {"seed", cfg.dann.seed}};
}

inline Metrics score(DannModel& m, const EncodedSplits& e) {
  Metrics out;
  out.source_acc = e.source_test.empty() ? std::nan("") : evaluate(m, e.source_test);
  out.target_acc = e.target_test.empty() ? std::nan("") : evaluate(m, e.target_test);
  return out;
}

/// Trains, then writes checkpoint.txt, history.csv and metrics.json.
inline Metrics cmd_train(const RunConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  Dataset ds = load_prepared(cfg);
  EncodedSplits e = encode_splits(ds);
  MonitorSets monitor{&e.source_test, &e.target_test};
  TrainResult r = train(cfg.dann, ds.table, e.training(), &monitor);
  Metrics m = score(*r.model, e);
  std::ostringstream ck;
  save_checkpoint(ck, *r.model);
  write_text(out_path(cfg, "checkpoint.txt"), ck.str());
  write_text(out_path(cfg, "history.csv"), r.history.csv());
  write_text(out_path(cfg, "metrics.json"), metrics_json(cfg, m).dump(2) + "\n");
  append_log(cfg, "train finished in " +
                      format_double(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()) +
                      " s");
  return m;
}

inline std::unique_ptr<DannModel> open_checkpoint(const std::string& path, const EmbeddingTable& table) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open checkpoint " + path);
  return load_checkpoint(in, table);
}

inline std::string checkpoint_or_default(const RunConfig& cfg, const std::string& checkpoint) {
  return checkpoint.empty() ? out_path(cfg, "checkpoint.txt").string() : checkpoint;
}

/// Scores a checkpoint on the held-out splits; writes eval.json.
inline Metrics cmd_eval(const RunConfig& cfg, const std::string& checkpoint = "") {
  Dataset ds = load_prepared(cfg);
  EncodedSplits e = encode_splits(ds);
  auto model = open_checkpoint(checkpoint_or_default(cfg, checkpoint), ds.table);
  Metrics m = score(*model, e);
  write_text(out_path(cfg, "eval.json"), metrics_json(cfg, m).dump(2) + "\n");
  return m;
}

struct SweepRow {
  double lambda = 0.0;
  std::string critic_loss;
  std::uint64_t seed = 0;
  double source_acc = std::nan("");
  double target_acc = std::nan("");
  double domain_sep = std::nan("");
  double class_sep = std::nan("");
  std::string status = "ok";
};

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string s = "lambda,critic_loss,seed,source_acc,target_acc,domain_sep,class_sep,status\n";
  for (const auto& r : rows) {
    std::string status = r.status;
    for (char& c : status) {
      if (c == ',' || c == '\n' || c == '"') c = ' ';
    }
    s += format_double(r.lambda) + ',' + r.critic_loss + ',' + std::to_string(r.seed) + ',' +
         format_double(r.source_acc) + ',' + format_double(r.target_acc) + ',' + format_double(r.domain_sep) + ',' +
         format_double(r.class_sep) + ',' + status + '\n';
  }
  return s;
}

/// One run per (seed, loss mode, lambda); a failing run is recorded in the
/// status column and the sweep moves on. Writes sweep.csv.
inline std::vector<SweepRow> cmd_sweep(const RunConfig& cfg) {
  std::vector<std::uint64_t> seeds = cfg.sweep_seeds;
  if (seeds.empty()) seeds.push_back(cfg.dann.seed);
  std::vector<SweepRow> rows;
  for (std::uint64_t seed : seeds) {
    RunConfig base = cfg;
    base.dann.seed = seed;
    base.report.seed = seed;
    Dataset ds = load_dataset(base);
    EncodedSplits e = encode_splits(ds);
    const auto test = e.test_docs();
    for (const auto& loss : cfg.sweep_losses) {
      for (double lambda : cfg.sweep_lambdas) {
        SweepRow row;
        row.lambda = lambda;
        row.critic_loss = loss;
        row.seed = seed;
        try {
          DannConfig dc = base.dann;
          dc.lambda = lambda;
          dc.critic_loss = *parse_critic_loss(loss);
          TrainResult r = train(dc, ds.table, e.training());
          Metrics m = score(*r.model, e);
          row.source_acc = m.source_acc;
          row.target_acc = m.target_acc;
          DiagnosticsReport rep = feature_report(*r.model, test, base.report);
          row.domain_sep = rep.domain_sep;
          row.class_sep = rep.class_sep;
        } catch (const std::exception& ex) {
          row.status = std::string("error: ") + ex.what();
        }
        rows.push_back(row);
      }
    }
  }
  write_text(out_path(cfg, "sweep.csv"), sweep_csv(rows));
  return rows;
}

/// Feature report for a checkpoint on the held-out splits; writes
/// diagnostics.json and scatter.csv.
inline DiagnosticsReport cmd_diagnose(const RunConfig& cfg, const std::string& checkpoint = "") {
  if (cfg.report.attention_docs > 0 && cfg.dann.extractor.kind != ExtractorKind::kHan) {
    throw ConfigError("attention unavailable for this extractor (" + extractor_name(cfg.dann.extractor.kind) +
                      "); only han produces attention maps");
  }
  Dataset ds = load_prepared(cfg);
  EncodedSplits e = encode_splits(ds);
  auto model = open_checkpoint(checkpoint_or_default(cfg, checkpoint), ds.table);
  if (model->cfg.extractor.kind != cfg.dann.extractor.kind) {
    throw ConfigError("checkpoint holds a " + extractor_name(model->cfg.extractor.kind) +
                      " model but the config names " + extractor_name(cfg.dann.extractor.kind));
  }
  DiagnosticsReport rep = feature_report(*model, e.test_docs(), cfg.report);
  write_text(out_path(cfg, "diagnostics.json"), to_json(rep).dump(2) + "\n");
  write_text(out_path(cfg, "scatter.csv"), rep.scatter_csv());
  return rep;
}

}  // namespace dann
