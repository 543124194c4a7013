#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dann/data.hpp"
#include "dann/diagnostics.hpp"
#include "dann/synth.hpp"
#include "dann/trainer.hpp"

namespace dann {

enum class DataSource { kSynthetic, kJsonl };

inline std::string label_mode_name(LabelMode m) {
  switch (m) {
    case LabelMode::kRating: return "rating";
    case LabelMode::kIndex: return "index";
    case LabelMode::kName: return "name";
  }
  return "?";
}

inline std::string rating_scheme_name(RatingScheme s) {
  return s == RatingScheme::kAmazonBinary ? "amazon-binary" : "yelp-3class";
}

inline std::string shift_mode_name(ShiftMode s) {
  return s == ShiftMode::kLexicalSwap ? "lexical-swap" : "rotation";
}

/// Everything one run needs. Serialized as a flat JSON object; missing keys
/// take the defaults below.
struct RunConfig {
  DannConfig dann;
  DataSource data = DataSource::kSynthetic;

  SynthSpec synth;

  std::vector<std::string> corpus;  // JSONL files
  std::string target_domain;
  FieldMapping fields;
  std::string embeddings;                               // one shared table
  std::map<std::string, std::string> domain_embeddings;  // or one per domain

  std::size_t n_target = 500;
  double source_train_fraction = 0.8;
  bool zero_shot = false;

  std::string out_dir = "run";

  std::vector<double> sweep_lambdas = {0.01, 0.05, 0.1, 0.5, 0.75, 1.0};
  std::vector<std::string> sweep_losses = {"wasserstein"};
  std::vector<std::uint64_t> sweep_seeds;  // empty: just `seed`

  ReportOptions report;

  SamplingPlan plan() const {
    SamplingPlan p;
    p.n_target = n_target;
    p.source_train_fraction = source_train_fraction;
    p.seed = dann.seed;
    return p;
  }

  /// Checks values and that every referenced file exists.
  void validate() const {
    dann.validate();
    dann.extractor.validate();
    plan().validate();
    if (data == DataSource::kSynthetic) {
      synth.validate();
      return;
    }
    auto need_file = [](const std::string& key, const std::string& path) {
      if (path.empty()) throw ConfigError("config: '" + key + "' is empty");
      if (!std::filesystem::is_regular_file(path)) {
        throw ConfigError("config: '" + key + "' refers to missing file " + path);
      }
    };
    if (corpus.empty()) throw ConfigError("config: 'corpus' must list at least one JSONL file");
    for (const auto& p : corpus) need_file("corpus", p);
    if (target_domain.empty()) throw ConfigError("config: 'target_domain' is required for JSONL data");
    if (embeddings.empty() == domain_embeddings.empty()) {
      throw ConfigError("config: set exactly one of 'embeddings' and 'domain_embeddings'");
    }
    if (!embeddings.empty()) need_file("embeddings", embeddings);
    for (const auto& [dom, path] : domain_embeddings) need_file("domain_embeddings." + dom, path);
  }
};

inline nlohmann::json to_json(const RunConfig& r) {
  const DannConfig& c = r.dann;
  const ExtractorConfig& e = c.extractor;
  nlohmann::json j = {
      {"extractor", extractor_name(e.kind)},
      {"dense_units", e.dense_units},
      {"cnn_maps", e.cnn_maps},
      {"cnn_widths", e.cnn_widths},
      {"cnn_dropout", e.cnn_dropout},
      {"max_norm", e.max_norm},
      {"max_len_cap", e.max_len_cap},
      {"gru_units", e.gru_units},
      {"attention_units", e.attention_units},
      {"lambda", c.lambda},
      {"n_critic", c.n_critic},
      {"clip", c.clip},
      {"lr", c.lr},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"critic_loss", critic_loss_name(c.critic_loss)},
      {"n_domains", c.n_domains},
      {"one_vs_rest", c.one_vs_rest},
      {"adversarial", c.adversarial},
      {"cross_lingual", c.cross_lingual},
      {"train_source_projections", c.train_source_projections},
      {"train_embeddings", c.train_embeddings},
      {"orthogonalize", c.orthogonalize},
      {"critic_units", c.critic_units},
      {"patience", c.patience},
      {"seed", c.seed},
      {"record_time", c.record_time},
      {"data", r.data == DataSource::kSynthetic ? "synthetic" : "jsonl"},
      {"synth_shift", shift_mode_name(r.synth.shift)},
      {"synth_vocab_size", r.synth.vocab_size},
      {"synth_dim", r.synth.dim},
      {"synth_classes", r.synth.n_classes},
      {"synth_docs_per_domain", r.synth.docs_per_domain},
      {"synth_source_domains", r.synth.n_source_domains},
      {"synth_domain_rate", r.synth.domain_rate},
      {"synth_noise", r.synth.noise},
      {"synth_target_class_shift", r.synth.target_class_shift},
      {"corpus", r.corpus},
      {"target_domain", r.target_domain},
      {"text_field", r.fields.text_field},
      {"label_field", r.fields.label_field},
      {"domain_field", r.fields.domain_field},
      {"id_field", r.fields.id_field},
      {"label_mode", label_mode_name(r.fields.label_mode)},
      {"rating_scheme", rating_scheme_name(r.fields.scheme)},
      {"class_names", r.fields.class_names},
      {"embeddings", r.embeddings},
      {"domain_embeddings", r.domain_embeddings},
      {"n_target", r.n_target},
      {"source_train_fraction", r.source_train_fraction},
      {"zero_shot", r.zero_shot},
      {"out_dir", r.out_dir},
      {"sweep_lambdas", r.sweep_lambdas},
      {"sweep_losses", r.sweep_losses},
      {"sweep_seeds", r.sweep_seeds},
      {"report_max_per_group", r.report.max_per_group},
      {"report_hausdorff_tokens", r.report.hausdorff_tokens},
      {"report_attention_docs", r.report.attention_docs}};
  return j;
}

namespace detail {

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config: key '") + key + "' has the wrong type (" + it->dump() + ")");
  }
}

}  // namespace detail

/// Parses a flat config object. Unknown keys are rejected so typos surface.
/// Without an explicit "lambda" the default is 0.1, or 0.5 in cross-lingual mode.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  static const std::set<std::string> known = [] {
    std::set<std::string> s;
    const nlohmann::json defaults = to_json(RunConfig{});
    for (const auto& [k, v] : defaults.items()) s.insert(k);
    return s;
  }();
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("config: unknown key '" + k + "'");
  }
  using detail::read_key;
  RunConfig r;
  DannConfig& c = r.dann;
  ExtractorConfig& e = c.extractor;
  std::string s;
  if (j.contains("extractor")) {
    read_key(j, "extractor", s);
    auto k = parse_extractor(s);
    if (!k) throw ConfigError("config: unknown extractor '" + s + "' (avg, tfidf, cnn, han)");
    e.kind = *k;
  }
  read_key(j, "dense_units", e.dense_units);
  read_key(j, "cnn_maps", e.cnn_maps);
  read_key(j, "cnn_widths", e.cnn_widths);
  read_key(j, "cnn_dropout", e.cnn_dropout);
  read_key(j, "max_norm", e.max_norm);
  read_key(j, "max_len_cap", e.max_len_cap);
  read_key(j, "gru_units", e.gru_units);
  read_key(j, "attention_units", e.attention_units);
  read_key(j, "n_critic", c.n_critic);
  read_key(j, "clip", c.clip);
  read_key(j, "lr", c.lr);
  read_key(j, "batch_size", c.batch_size);
  read_key(j, "epochs", c.epochs);
  if (j.contains("critic_loss")) {
    read_key(j, "critic_loss", s);
    auto l = parse_critic_loss(s);
    if (!l) throw ConfigError("config: unknown critic loss '" + s + "' (wasserstein, ce)");
    c.critic_loss = *l;
  }
  read_key(j, "n_domains", c.n_domains);
  read_key(j, "one_vs_rest", c.one_vs_rest);
  read_key(j, "adversarial", c.adversarial);
  read_key(j, "cross_lingual", c.cross_lingual);
  c.lambda = c.cross_lingual ? 0.5 : 0.1;
  read_key(j, "lambda", c.lambda);
  read_key(j, "train_source_projections", c.train_source_projections);
  read_key(j, "train_embeddings", c.train_embeddings);
  read_key(j, "orthogonalize", c.orthogonalize);
  read_key(j, "critic_units", c.critic_units);
  read_key(j, "patience", c.patience);
  read_key(j, "seed", c.seed);
  read_key(j, "record_time", c.record_time);

  if (j.contains("data")) {
    read_key(j, "data", s);
    if (s == "synthetic") {
      r.data = DataSource::kSynthetic;
    } else if (s == "jsonl") {
      r.data = DataSource::kJsonl;
    } else {
      throw ConfigError("config: unknown data source '" + s + "' (synthetic, jsonl)");
    }
  }
  if (j.contains("synth_shift")) {
    read_key(j, "synth_shift", s);
    if (s == "lexical-swap") {
      r.synth.shift = ShiftMode::kLexicalSwap;
    } else if (s == "rotation") {
      r.synth.shift = ShiftMode::kRotation;
    } else {
      throw ConfigError("config: unknown synth_shift '" + s + "' (lexical-swap, rotation)");
    }
  }
  read_key(j, "synth_vocab_size", r.synth.vocab_size);
  read_key(j, "synth_dim", r.synth.dim);
  read_key(j, "synth_classes", r.synth.n_classes);
  read_key(j, "synth_docs_per_domain", r.synth.docs_per_domain);
  read_key(j, "synth_source_domains", r.synth.n_source_domains);
  read_key(j, "synth_domain_rate", r.synth.domain_rate);
  read_key(j, "synth_noise", r.synth.noise);
  read_key(j, "synth_target_class_shift", r.synth.target_class_shift);

  read_key(j, "corpus", r.corpus);
  read_key(j, "target_domain", r.target_domain);
  read_key(j, "text_field", r.fields.text_field);
  read_key(j, "label_field", r.fields.label_field);
  read_key(j, "domain_field", r.fields.domain_field);
  read_key(j, "id_field", r.fields.id_field);
  if (j.contains("label_mode")) {
    read_key(j, "label_mode", s);
    if (s == "rating") {
      r.fields.label_mode = LabelMode::kRating;
    } else if (s == "index") {
      r.fields.label_mode = LabelMode::kIndex;
    } else if (s == "name") {
      r.fields.label_mode = LabelMode::kName;
    } else {
      throw ConfigError("config: unknown label_mode '" + s + "' (rating, index, name)");
    }
  }
  if (j.contains("rating_scheme")) {
    read_key(j, "rating_scheme", s);
    auto sch = parse_rating_scheme(s);
    if (!sch) throw ConfigError("config: unknown rating_scheme '" + s + "' (amazon-binary, yelp-3class)");
    r.fields.scheme = *sch;
  }
  read_key(j, "class_names", r.fields.class_names);
  read_key(j, "embeddings", r.embeddings);
  read_key(j, "domain_embeddings", r.domain_embeddings);

  read_key(j, "n_target", r.n_target);
  read_key(j, "source_train_fraction", r.source_train_fraction);
  read_key(j, "zero_shot", r.zero_shot);
  read_key(j, "out_dir", r.out_dir);
  read_key(j, "sweep_lambdas", r.sweep_lambdas);
  read_key(j, "sweep_losses", r.sweep_losses);
  read_key(j, "sweep_seeds", r.sweep_seeds);
  read_key(j, "report_max_per_group", r.report.max_per_group);
  read_key(j, "report_hausdorff_tokens", r.report.hausdorff_tokens);
  read_key(j, "report_attention_docs", r.report.attention_docs);
  r.report.seed = c.seed;
  for (const auto& l : r.sweep_losses) {
    if (!parse_critic_loss(l)) throw ConfigError("config: unknown loss mode '" + l + "' in sweep_losses");
  }
  return r;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& ex) {
    throw ConfigError(path + ": " + ex.what());
  }
}

/// Layers flag overrides on top of an optional config file, then parses.
inline RunConfig resolve_config(const std::string& file, const nlohmann::json& overrides) {
  nlohmann::json j = file.empty() ? nlohmann::json::object() : read_json_file(file);
  if (!j.is_object()) throw ConfigError("config: " + file + " does not hold a JSON object");
  for (const auto& [k, v] : overrides.items()) j[k] = v;
  return run_config_from_json(j);
}

}  // namespace dann
