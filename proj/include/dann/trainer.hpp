#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <istream>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dann/autodiff.hpp"
#include "dann/data.hpp"
#include "dann/embeddings.hpp"
#include "dann/extractors.hpp"
#include "dann/numeric_io.hpp"
#include "dann/optim.hpp"
#include "dann/params.hpp"

namespace dann {

enum class CriticLoss { kWasserstein, kCrossEntropy };

inline std::string critic_loss_name(CriticLoss c) {
  return c == CriticLoss::kWasserstein ? "wasserstein" : "ce";
}

inline std::optional<CriticLoss> parse_critic_loss(const std::string& s) {
  if (s == "wasserstein") return CriticLoss::kWasserstein;
  if (s == "ce") return CriticLoss::kCrossEntropy;
  return std::nullopt;
}

struct DannConfig {
  ExtractorConfig extractor;
  double lambda = 0.1;
  std::size_t n_critic = 5;
  double clip = 0.01;
  double lr = 0.01;
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  CriticLoss critic_loss = CriticLoss::kWasserstein;
  /// 2 pools all sources against the target; more gives one critic output
  /// per data domain.
  std::size_t n_domains = 2;
  /// Required for the Wasserstein critic with more than two domains.
  bool one_vs_rest = false;
  bool adversarial = true;
  /// Per-domain K x K projections in front of the extractor.
  bool cross_lingual = false;
  /// When false, source projections stay frozen at the identity (align the
  /// target into the source space).
  bool train_source_projections = true;
  bool train_embeddings = false;
  /// After each joint step, W <- (1 + beta) W - beta W W^T W on trainable
  /// projections, which keeps them close to orthogonal; 0 disables it.
  double orthogonalize = 0.0;
  std::size_t critic_units = 100;
  /// Early stopping on source validation accuracy; 0 disables it.
  std::size_t patience = 0;
  std::uint64_t seed = 0;
  /// Record wall-clock seconds in the history (breaks byte-identical output).
  bool record_time = false;

  std::size_t critic_arity() const {
    return critic_loss == CriticLoss::kWasserstein && n_domains == 2 ? 1 : n_domains;
  }

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (n_critic < 1) throw ConfigError("n_critic must be >= 1");
    if (!(clip > 0.0)) throw ConfigError("clip value must be > 0");
    if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (n_domains < 2) throw ConfigError("n_domains must be >= 2");
    if (!(orthogonalize >= 0.0 && orthogonalize <= 0.5)) throw ConfigError("orthogonalize must lie in [0, 0.5]");
    if (critic_units < 1) throw ConfigError("critic needs at least one hidden unit");
    if (critic_loss == CriticLoss::kWasserstein && n_domains > 2 && !one_vs_rest) {
      throw ConfigError("the Wasserstein critic is only defined for two domains; with " +
                        std::to_string(n_domains) +
                        " domains enable the one-vs-rest scheme or use the ce critic");
    }
    extractor.validate();
  }
};

inline nlohmann::json to_json(const ExtractorConfig& e) {
  return {{"kind", extractor_name(e.kind)},
          {"dense_units", e.dense_units},
          {"cnn_maps", e.cnn_maps},
          {"cnn_widths", e.cnn_widths},
          {"cnn_dropout", e.cnn_dropout},
          {"max_norm", e.max_norm},
          {"max_len_cap", e.max_len_cap},
          {"cnn_len", e.cnn_len},
          {"gru_units", e.gru_units},
          {"attention_units", e.attention_units}};
}

inline ExtractorConfig extractor_from_json(const nlohmann::json& j) {
  ExtractorConfig e;
  auto kind = parse_extractor(j.at("kind").get<std::string>());
  if (!kind) throw ConfigError("unknown extractor '" + j.at("kind").get<std::string>() + "'");
  e.kind = *kind;
  e.dense_units = j.at("dense_units");
  e.cnn_maps = j.at("cnn_maps");
  e.cnn_widths = j.at("cnn_widths").get<std::vector<std::size_t>>();
  e.cnn_dropout = j.at("cnn_dropout");
  e.max_norm = j.at("max_norm");
  e.max_len_cap = j.at("max_len_cap");
  e.cnn_len = j.at("cnn_len");
  e.gru_units = j.at("gru_units");
  e.attention_units = j.at("attention_units");
  return e;
}

inline nlohmann::json to_json(const DannConfig& c) {
  return {{"extractor", to_json(c.extractor)},
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
          {"record_time", c.record_time}};
}

inline DannConfig dann_config_from_json(const nlohmann::json& j) {
  DannConfig c;
  c.extractor = extractor_from_json(j.at("extractor"));
  c.lambda = j.at("lambda");
  c.n_critic = j.at("n_critic");
  c.clip = j.at("clip");
  c.lr = j.at("lr");
  c.batch_size = j.at("batch_size");
  c.epochs = j.at("epochs");
  auto loss = parse_critic_loss(j.at("critic_loss").get<std::string>());
  if (!loss) throw ConfigError("unknown critic loss");
  c.critic_loss = *loss;
  c.n_domains = j.at("n_domains");
  c.one_vs_rest = j.at("one_vs_rest");
  c.adversarial = j.at("adversarial");
  c.cross_lingual = j.at("cross_lingual");
  c.train_source_projections = j.at("train_source_projections");
  c.train_embeddings = j.at("train_embeddings");
  c.orthogonalize = j.at("orthogonalize");
  c.critic_units = j.at("critic_units");
  c.patience = j.at("patience");
  c.seed = j.at("seed");
  c.record_time = j.at("record_time");
  return c;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// F, P and Q plus the embedding stack and both optimizers. Not movable:
/// optimizers and graphs hold parameter addresses.
class DannModel {
 public:
  DannConfig cfg;
  std::size_t n_classes = 0;
  std::size_t n_data_domains = 0;
  EmbeddingTable table;
  std::vector<ProjectionMatrix> projections;  // one per domain when cross-lingual
  ParamStore store;                           // F.*, P.*, Q.*
  Extractor F;
  Dense P;
  Dense q_hidden;
  Dense q_out;
  Adam opt_fp;
  Adam opt_q;

  DannModel() = default;
  DannModel(const DannModel&) = delete;
  DannModel& operator=(const DannModel&) = delete;

  int target_domain() const { return static_cast<int>(n_data_domains) - 1; }

  /// Critic class of a data domain.
  int critic_label(int domain) const {
    if (domain < 0 || static_cast<std::size_t>(domain) >= n_data_domains) {
      throw Error("critic: domain label " + std::to_string(domain) + " outside [0, " +
                  std::to_string(n_data_domains) + ")");
    }
    if (cfg.n_domains == 2) return domain == target_domain() ? 1 : 0;
    return domain;
  }

  std::vector<Parameter*> params_with_prefix(const std::string& prefix) {
    std::vector<Parameter*> out;
    for (Parameter* p : store.all()) {
      if (p->name.rfind(prefix, 0) == 0) out.push_back(p);
    }
    return out;
  }

  std::vector<Parameter*> q_params() { return params_with_prefix("Q."); }

  /// Everything the joint step may update.
  std::vector<Parameter*> fp_params() {
    std::vector<Parameter*> out = params_with_prefix("F.");
    for (Parameter* p : params_with_prefix("P.")) out.push_back(p);
    for (auto& proj : projections) out.push_back(&proj.weights);
    if (table.matrix.trainable) out.push_back(&table.matrix);
    return out;
  }

  /// Named parameters stored in a checkpoint, in a fixed order.
  std::vector<Parameter*> checkpoint_params() {
    std::vector<Parameter*> out = store.all();
    for (auto& proj : projections) out.push_back(&proj.weights);
    if (table.matrix.trainable) out.push_back(&table.matrix);
    return out;
  }

  /// Token rows of every document, in batch order, projected per domain.
  Var embed_batch(Graph& g, const std::vector<const EncodedDoc*>& docs) {
    std::vector<std::size_t> ids;
    for (const EncodedDoc* d : docs) ids.insert(ids.end(), d->ids.begin(), d->ids.end());
    auto raw = [&](const std::vector<std::size_t>& rows) {
      if (table.matrix.trainable) return gather_rows(g.param(table.matrix), rows);
      const std::size_t k = table.dim;
      Tensor t(Shape{rows.size(), k});
      const auto& src = table.matrix.value.values();
      for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[i] * k), k,
                    t.data().begin() + static_cast<std::ptrdiff_t>(i * k));
      }
      return g.constant(std::move(t), "embedded");
    };
    if (projections.empty()) return raw(ids);

    // Group tokens by document domain; most batches hold one domain.
    std::vector<int> order;
    for (const EncodedDoc* d : docs) {
      if (std::find(order.begin(), order.end(), d->domain) == order.end()) order.push_back(d->domain);
    }
    std::vector<Var> parts;
    std::vector<std::size_t> where(ids.size());
    std::size_t done = 0;
    for (int dom : order) {
      std::vector<std::size_t> rows;
      std::size_t at = 0;
      for (const EncodedDoc* d : docs) {
        if (d->domain == dom) {
          for (std::size_t i = 0; i < d->ids.size(); ++i) {
            where[at + i] = done + rows.size();
            rows.push_back(d->ids[i]);
          }
        }
        at += d->ids.size();
      }
      done += rows.size();
      ProjectionMatrix& proj = projections.at(static_cast<std::size_t>(dom));
      Var e = raw(rows);
      if (proj.weights.trainable || proj.weights.value != Tensor::identity(table.dim)) {
        e = matmul(e, transpose(g.param(proj.weights)));
      }
      parts.push_back(e);
    }
    if (parts.size() == 1) return parts[0];
    return gather_rows(concat(parts, 0), where);
  }

  FeatureOutput features(Graph& g, const std::vector<const EncodedDoc*>& docs, Rng* dropout_rng) {
    return F.forward(g, embed_batch(g, docs), docs, dropout_rng);
  }

  Var logits(Graph& g, Var z) { return P(g, z); }

  Var critic_scores(Graph& g, Var z) { return q_out(g, relu(q_hidden(g, z))); }
};

/// Builds F, P and Q with seeded initialisation. `n_data_domains` counts the
/// source domains plus the target, which is last.
inline std::unique_ptr<DannModel> build_model(const DannConfig& cfg, const EmbeddingTable& table,
                                              std::size_t n_classes, std::size_t n_data_domains) {
  cfg.validate();
  if (n_classes < 2) throw ConfigError("need at least two classes");
  if (n_data_domains < 2) throw ConfigError("need a source and a target domain");
  if (cfg.n_domains > 2 && cfg.n_domains != n_data_domains) {
    throw ConfigError("critic configured for " + std::to_string(cfg.n_domains) +
                      " domains but the data has " + std::to_string(n_data_domains));
  }
  if (cfg.extractor.kind == ExtractorKind::kCnn && cfg.extractor.cnn_len == 0) {
    throw ConfigError("cnn: maximum document length not set");
  }
  auto m = std::make_unique<DannModel>();
  m->cfg = cfg;
  m->n_classes = n_classes;
  m->n_data_domains = n_data_domains;
  m->table = table;
  m->table.trainable = cfg.train_embeddings;
  m->table.sync_trainable();
  if (cfg.cross_lingual) {
    for (std::size_t d = 0; d < n_data_domains; ++d) {
      const bool is_target = static_cast<int>(d) == m->target_domain();
      m->projections.push_back(ProjectionMatrix::identity(
          static_cast<int>(d), table.dim, is_target || cfg.train_source_projections));
    }
  }
  Rng rng = make_rng(cfg.seed, Stream::kInit);
  m->F = Extractor::create(cfg.extractor, table.dim, m->store, rng);
  const std::size_t dim = m->F.feature_dim();
  m->P = Dense::create(m->store, "P", dim, n_classes, rng);
  m->q_hidden = Dense::create(m->store, "Q.hidden", dim, cfg.critic_units, rng);
  m->q_out = Dense::create(m->store, "Q.out", cfg.critic_units, cfg.critic_arity(), rng);
  m->opt_fp = Adam(m->fp_params(), cfg.lr);
  m->opt_q = Adam(m->q_params(), cfg.lr);
  return m;
}

// ---------------------------------------------------------------------------
// Critic objectives
// ---------------------------------------------------------------------------

/// Wasserstein mode: mean over domains d of [mean score_d on domain-d rows
/// minus mean score_d on the other rows]; the critic maximises it. CE mode:
/// categorical cross-entropy of the scores against the domain labels.
inline Var multi_domain_critic_loss(Var scores, std::span<const int> labels, std::size_t n_domains,
                                    CriticLoss mode) {
  Graph& g = *scores.graph();
  const std::size_t n = scores.value().rows();
  if (scores.value().rank() != 2 || scores.value().cols() != n_domains) {
    throw Error("multi-domain critic: expected scores [batch x " + std::to_string(n_domains) +
                "], got " + shape_str(scores.value().shape()));
  }
  if (labels.size() != n) throw Error("multi-domain critic: label count does not match batch");
  std::vector<std::size_t> count(n_domains, 0);
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= n_domains) {
      throw Error("multi-domain critic: unseen domain label " + std::to_string(l));
    }
    ++count[static_cast<std::size_t>(l)];
  }
  if (mode == CriticLoss::kCrossEntropy) return cross_entropy(scores, labels);
  Tensor w(Shape{n, n_domains});
  std::size_t used = 0;
  for (std::size_t d = 0; d < n_domains; ++d) {
    if (count[d] == 0 || count[d] == n) continue;
    ++used;
    for (std::size_t i = 0; i < n; ++i) {
      w.at(i, d) = static_cast<std::size_t>(labels[i]) == d
                       ? 1.0 / static_cast<double>(count[d])
                       : -1.0 / static_cast<double>(n - count[d]);
    }
  }
  if (used == 0) throw Error("multi-domain critic: batch holds a single domain");
  return scale(sum(mul(scores, g.constant(std::move(w)))), 1.0 / static_cast<double>(used));
}

/// The quantity the critic minimises, for `scores` whose first `n_src` rows
/// come from source documents.
inline Var critic_loss(const DannModel& m, Var scores, std::size_t n_src, const std::vector<int>& labels) {
  const std::size_t n = scores.value().rows();
  if (m.cfg.critic_arity() == 1) {
    return scale(wasserstein_loss(slice_rows(scores, 0, n_src), slice_rows(scores, n_src, n)), -1.0);
  }
  Var v = multi_domain_critic_loss(scores, labels, m.cfg.n_domains, m.cfg.critic_loss);
  return m.cfg.critic_loss == CriticLoss::kWasserstein ? scale(v, -1.0) : v;
}

inline void require_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw Error("non-finite " + what + " (" + format_double(v) + ")");
}

inline void require_finite_params(const std::vector<Parameter*>& params, const std::string& when) {
  for (const Parameter* p : params) {
    if (!p->value.all_finite()) throw Error("parameter " + p->name + " became non-finite " + when);
  }
}

/// One step of W <- (1 + beta) W - beta (W W^T) W.
inline void orthogonalize_step(Tensor& w, double beta) {
  const std::size_t k = w.rows();
  Tensor wwt(Shape{k, k});
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += w.at(i, c) * w.at(j, c);
      wwt.at(i, j) = s;
    }
  }
  Tensor next = w;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += wwt.at(i, j) * w.at(j, c);
      next.at(i, c) = (1.0 + beta) * w.at(i, c) - beta * s;
    }
  }
  w = std::move(next);
}

inline std::vector<const EncodedDoc*> concat_docs(const std::vector<const EncodedDoc*>& a,
                                                  const std::vector<const EncodedDoc*>& b) {
  std::vector<const EncodedDoc*> out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

/// One Adam step on Q only, on detached features, followed by clipping in
/// Wasserstein mode. Returns the critic loss before the step.
inline double critic_step(DannModel& m, const std::vector<const EncodedDoc*>& src,
                          const std::vector<const EncodedDoc*>& tgt, Rng& dropout_rng) {
  if (src.empty() || tgt.empty()) throw Error("critic_step: empty source or target batch");
  Graph g(true);
  const auto docs = concat_docs(src, tgt);
  Var z = detach(m.features(g, docs, &dropout_rng).z);
  std::vector<int> labels;
  for (const EncodedDoc* d : docs) labels.push_back(m.critic_label(d->domain));
  Var loss = critic_loss(m, m.critic_scores(g, z), src.size(), labels);
  const double value = loss.value().item();
  require_finite(value, "critic loss");
  m.opt_q.zero_grad();
  g.backward(loss);
  m.opt_q.step();
  if (m.cfg.critic_loss == CriticLoss::kWasserstein) {
    auto qp = m.q_params();
    clip_params(std::span<Parameter* const>(qp), m.cfg.clip);
  }
  require_finite_params(m.q_params(), "after a critic step");
  return value;
}

struct JointBatch {
  std::vector<const EncodedDoc*> source;
  std::vector<const EncodedDoc*> target_labeled;
  std::vector<const EncodedDoc*> target_unlabeled;
};

struct JointResult {
  double p_loss = 0.0;
  double adversarial = 0.0;
};

/// One Adam step on F, P and the projections: cross-entropy over all labeled
/// documents plus, in adversarial mode, the critic loss seen through the
/// gradient reversal layer. Q is read but never updated.
inline JointResult joint_step(DannModel& m, const JointBatch& b, Rng& dropout_rng, Rng& adv_dropout_rng) {
  const auto labeled = concat_docs(b.source, b.target_labeled);
  if (labeled.empty()) throw Error("joint_step: no labeled documents");
  std::vector<int> y;
  for (const EncodedDoc* d : labeled) {
    if (!d->label) throw Error("joint_step: labeled batch contains an unlabeled document");
    y.push_back(*d->label);
  }
  Graph g(true);
  Var z = m.features(g, labeled, &dropout_rng).z;
  Var p_loss = cross_entropy(m.logits(g, z), y);
  Var total = p_loss;
  JointResult r;
  r.p_loss = p_loss.value().item();
  require_finite(r.p_loss, "label loss");
  if (m.cfg.adversarial) {
    if (b.source.empty() || b.target_unlabeled.empty()) {
      throw Error("joint_step: adversarial mode needs source and unlabeled target documents");
    }
    Var z_src = b.target_labeled.empty() ? z : slice_rows(z, 0, b.source.size());
    Var z_tgt = m.features(g, b.target_unlabeled, &adv_dropout_rng).z;
    Var reversed = grl(concat({z_src, z_tgt}, 0), GrlConfig{m.cfg.lambda});
    std::vector<int> labels;
    for (const EncodedDoc* d : b.source) labels.push_back(m.critic_label(d->domain));
    for (const EncodedDoc* d : b.target_unlabeled) labels.push_back(m.critic_label(d->domain));
    Var adv = critic_loss(m, m.critic_scores(g, reversed), b.source.size(), labels);
    r.adversarial = adv.value().item();
    require_finite(r.adversarial, "adversarial loss");
    total = add(p_loss, adv);
  }
  m.opt_fp.zero_grad();
  g.backward(total);
  if (m.table.matrix.trainable) m.table.mask_gradient();
  m.opt_fp.step();
  if (m.cfg.extractor.kind == ExtractorKind::kCnn) max_norm_columns(m.P.w->value, m.cfg.extractor.max_norm);
  if (m.cfg.orthogonalize > 0.0) {
    for (auto& proj : m.projections) {
      if (proj.weights.trainable) orthogonalize_step(proj.weights.value, m.cfg.orthogonalize);
    }
  }
  require_finite_params(m.fp_params(), "after a joint step");
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Index of the largest entry; ties go to the lowest index.
inline int argmax_row(const Tensor& t, std::size_t r) {
  int best = 0;
  for (std::size_t c = 1; c < t.cols(); ++c) {
    if (t.at(r, c) > t.at(r, static_cast<std::size_t>(best))) best = static_cast<int>(c);
  }
  return best;
}

inline std::vector<const EncodedDoc*> pointers(const std::vector<EncodedDoc>& docs) {
  std::vector<const EncodedDoc*> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(&d);
  return out;
}

/// Runs `fn(batch, graph, features)` over evaluation-mode batches.
template <typename Fn>
void for_each_eval_batch(DannModel& m, const std::vector<const EncodedDoc*>& docs,
                         std::size_t batch, Fn fn) {
  for (std::size_t i = 0; i < docs.size(); i += batch) {
    std::vector<const EncodedDoc*> part(docs.begin() + static_cast<std::ptrdiff_t>(i),
                                        docs.begin() + static_cast<std::ptrdiff_t>(std::min(docs.size(), i + batch)));
    Graph g(false);
    FeatureOutput out = m.features(g, part, nullptr);
    fn(part, g, out);
  }
}

inline std::vector<int> predict(DannModel& m, const std::vector<const EncodedDoc*>& docs,
                                std::size_t batch = 64) {
  std::vector<int> out;
  for_each_eval_batch(m, docs, batch, [&](const auto&, Graph& g, FeatureOutput& f) {
    Tensor logits = m.logits(g, f.z).value();
    for (std::size_t r = 0; r < logits.rows(); ++r) out.push_back(argmax_row(logits, r));
  });
  return out;
}

inline double accuracy(const std::vector<int>& predicted, const std::vector<int>& gold) {
  if (gold.empty()) throw Error("evaluate: empty dataset");
  if (predicted.size() != gold.size()) throw Error("evaluate: prediction count mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hit += predicted[i] == gold[i];
  return static_cast<double>(hit) / static_cast<double>(gold.size());
}

inline double evaluate(DannModel& m, const std::vector<const EncodedDoc*>& docs) {
  if (docs.empty()) throw Error("evaluate: empty dataset");
  std::vector<int> gold;
  for (const EncodedDoc* d : docs) {
    if (!d->label) throw Error("evaluate: dataset contains unlabeled documents");
    gold.push_back(*d->label);
  }
  return accuracy(predict(m, docs), gold);
}

inline double evaluate(DannModel& m, const std::vector<EncodedDoc>& docs) {
  return evaluate(m, pointers(docs));
}

/// Feature vectors z in evaluation mode, one row per document.
inline Tensor extract_features(DannModel& m, const std::vector<const EncodedDoc*>& docs,
                               std::size_t batch = 64) {
  Tensor out(Shape{docs.size(), m.F.feature_dim()});
  std::size_t row = 0;
  for_each_eval_batch(m, docs, batch, [&](const auto&, Graph&, FeatureOutput& f) {
    const Tensor& z = f.z.value();
    std::copy(z.data().begin(), z.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(row * z.cols()));
    row += z.rows();
  });
  return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double p_loss = 0.0;
  double q_loss = 0.0;
  double src_acc = std::numeric_limits<double>::quiet_NaN();
  double tgt_acc = std::numeric_limits<double>::quiet_NaN();
  double lambda = 0.0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  std::string csv() const {
    std::string s = "epoch,p_loss,q_loss,src_acc,tgt_acc,lambda,seconds\n";
    for (const auto& e : epochs) {
      s += std::to_string(e.epoch) + ',' + format_double(e.p_loss) + ',' + format_double(e.q_loss) +
           ',' + format_double(e.src_acc) + ',' + format_double(e.tgt_acc) + ',' +
           format_double(e.lambda) + ',' + format_double(e.seconds) + '\n';
    }
    return s;
  }
};

struct TrainingData {
  std::vector<EncodedDoc> source;            // labeled
  std::vector<EncodedDoc> target_labeled;    // empty in zero-shot mode
  std::vector<EncodedDoc> target_unlabeled;  // no class labels
  std::size_t n_classes = 0;
  std::size_t n_domains = 0;  // data domains, target last
};

/// Optional held-out sets scored at the end of each epoch.
struct MonitorSets {
  const std::vector<EncodedDoc>* source = nullptr;
  const std::vector<EncodedDoc>* target = nullptr;
};

struct TrainResult {
  std::unique_ptr<DannModel> model;
  TrainHistory history;
};

/// Per-domain idf statistics from the documents available for training.
inline std::vector<IdfTable> fit_domain_idf(const TrainingData& data) {
  std::vector<std::vector<const EncodedDoc*>> by_domain(data.n_domains);
  auto add = [&](const std::vector<EncodedDoc>& docs) {
    for (const auto& d : docs) by_domain.at(static_cast<std::size_t>(d.domain)).push_back(&d);
  };
  add(data.source);
  add(data.target_unlabeled.empty() ? data.target_labeled : data.target_unlabeled);
  std::vector<IdfTable> out(data.n_domains);
  for (std::size_t d = 0; d < data.n_domains; ++d) {
    if (!by_domain[d].empty()) out[d] = fit_idf(by_domain[d]);
  }
  return out;
}

inline void check_training_data(const DannConfig& cfg, const TrainingData& data) {
  if (data.source.empty() && data.target_labeled.empty()) throw Error("train: no labeled documents");
  if (data.n_domains < 2) throw Error("train: need at least a source and a target domain");
  const int target = static_cast<int>(data.n_domains) - 1;
  for (const auto& d : data.source) {
    if (!d.label) throw Error("train: unlabeled source document");
    if (d.domain < 0 || d.domain >= target) throw Error("train: source document with a non-source domain");
  }
  for (const auto& d : data.target_labeled) {
    if (!d.label) throw Error("train: unlabeled document in the labeled target set");
    if (d.domain != target) throw Error("train: labeled target document with the wrong domain");
  }
  for (const auto& d : data.target_unlabeled) {
    if (d.label) throw Error("train: the unlabeled target stream carries class labels");
    if (d.domain != target) throw Error("train: unlabeled target document with the wrong domain");
  }
  if (cfg.adversarial && (data.source.empty() || data.target_unlabeled.empty())) {
    throw Error("train: adversarial mode needs source documents and unlabeled target documents");
  }
}

inline TrainResult train(DannConfig cfg, const EmbeddingTable& table, const TrainingData& data,
                         const MonitorSets* monitor = nullptr,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  check_training_data(cfg, data);
  if (cfg.extractor.kind == ExtractorKind::kCnn) {
    std::vector<const EncodedDoc*> all = pointers(data.source);
    for (const auto* set : {&data.target_labeled, &data.target_unlabeled}) {
      for (const auto& d : *set) all.push_back(&d);
    }
    cfg.extractor.cnn_len = fit_max_len(all, cfg.extractor.max_len_cap);
    cfg.extractor.validate();
  }
  TrainResult result;
  result.model = build_model(cfg, table, data.n_classes, data.n_domains);
  DannModel& m = *result.model;
  if (cfg.extractor.kind == ExtractorKind::kTfidf) m.F.idf = fit_domain_idf(data);

  Rng shuffle = make_rng(cfg.seed, Stream::kShuffle);
  Rng dropout_rng = make_rng(cfg.seed, Stream::kDropout);
  Rng critic_dropout = make_rng(cfg.seed, Stream::kCriticDropout);
  Rng adv_dropout = make_rng(cfg.seed, Stream::kAdversarialDropout);
  BatchCycler tgt_labeled(data.target_labeled.size(), cfg.batch_size, make_rng(cfg.seed, Stream::kTargetShuffle));
  BatchCycler critic_src(data.source.size(), cfg.batch_size, make_rng(cfg.seed, Stream::kCriticSourceShuffle));
  BatchCycler critic_tgt(data.target_unlabeled.size(), cfg.batch_size, make_rng(cfg.seed, Stream::kCriticShuffle));
  BatchCycler adv_tgt(data.target_unlabeled.size(), cfg.batch_size, make_rng(cfg.seed, Stream::kAdversarialShuffle));

  auto pick = [](const std::vector<EncodedDoc>& docs, const std::vector<std::size_t>& idx) {
    std::vector<const EncodedDoc*> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(&docs[i]);
    return out;
  };

  // Without source documents the epoch is driven by the labeled target set.
  const bool source_driven = !data.source.empty();
  const std::size_t driver = source_driven ? data.source.size() : data.target_labeled.size();
  double best_val = -1.0;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    double p_sum = 0.0;
    double q_sum = 0.0;
    std::size_t q_count = 0;
    const auto batches = batch_iter(driver, cfg.batch_size, shuffle);
    for (const auto& idx : batches) {
      if (cfg.adversarial) {
        for (std::size_t k = 0; k < cfg.n_critic; ++k) {
          q_sum += critic_step(m, pick(data.source, critic_src.next()),
                               pick(data.target_unlabeled, critic_tgt.next()), critic_dropout);
          ++q_count;
        }
      }
      JointBatch jb;
      if (source_driven) {
        jb.source = pick(data.source, idx);
        jb.target_labeled = pick(data.target_labeled, tgt_labeled.next());
      } else {
        jb.target_labeled = pick(data.target_labeled, idx);
      }
      if (cfg.adversarial) jb.target_unlabeled = pick(data.target_unlabeled, adv_tgt.next());
      JointResult jr = joint_step(m, jb, dropout_rng, adv_dropout);
      p_sum += jr.p_loss;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.p_loss = p_sum / static_cast<double>(batches.size());
    rec.q_loss = q_count ? q_sum / static_cast<double>(q_count) : 0.0;
    rec.lambda = cfg.lambda;
    if (monitor && monitor->source && !monitor->source->empty()) rec.src_acc = evaluate(m, *monitor->source);
    if (monitor && monitor->target && !monitor->target->empty()) rec.tgt_acc = evaluate(m, *monitor->target);
    if (cfg.record_time) {
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    result.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (cfg.patience > 0 && !std::isnan(rec.src_acc)) {
      if (rec.src_acc > best_val) {
        best_val = rec.src_acc;
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        break;
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointMagic = "dann-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline void save_checkpoint(std::ostream& os, DannModel& m) {
  os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  os << "config " << to_json(m.cfg).dump() << '\n';
  os << "meta " << m.n_classes << ' ' << m.n_data_domains << '\n';
  for (Parameter* p : m.checkpoint_params()) {
    const Tensor& v = p->value;
    os << "param " << p->name << ' ' << v.rank();
    for (std::size_t d : v.shape()) os << ' ' << d;
    os << '\n';
    write_rows(os, v.rank() == 2 ? v : v.reshaped({1, v.size()}));
  }
  for (std::size_t d = 0; d < m.F.idf.size(); ++d) {
    const IdfTable& t = m.F.idf[d];
    std::vector<std::pair<std::size_t, std::size_t>> rows(t.df.begin(), t.df.end());
    std::sort(rows.begin(), rows.end());
    os << "idf " << d << ' ' << t.n_docs << ' ' << rows.size() << '\n';
    for (const auto& [id, df] : rows) os << id << ' ' << df << '\n';
  }
  os << "end\n";
}

/// Rebuilds a model from a checkpoint. The frozen embedding table is not
/// stored and must be supplied.
inline std::unique_ptr<DannModel> load_checkpoint(std::istream& is, const EmbeddingTable& table) {
  std::string line;
  std::size_t line_no = 0;
  auto next = [&](const char* what) {
    if (!std::getline(is, line)) throw Error(std::string("checkpoint: missing ") + what);
    ++line_no;
    return split_ws(line);
  };
  auto head = next("header");
  if (head.size() != 2 || head[0] != kCheckpointMagic) throw Error("checkpoint: bad header");
  if (parse_int(head[1]) != kCheckpointVersion) {
    throw Error("checkpoint: unsupported version " + std::string(head[1]));
  }
  next("config");
  if (line.rfind("config ", 0) != 0) throw Error("checkpoint: missing config line");
  DannConfig cfg = dann_config_from_json(nlohmann::json::parse(line.substr(7)));
  auto meta = next("meta");
  if (meta.size() != 3 || meta[0] != "meta") throw Error("checkpoint: bad meta line");
  auto m = build_model(cfg, table, static_cast<std::size_t>(*parse_int(meta[1])),
                       static_cast<std::size_t>(*parse_int(meta[2])));
  std::vector<Parameter*> params = m->checkpoint_params();
  std::set<std::string> loaded;
  while (true) {
    auto f = next("end marker");
    if (f.empty()) continue;
    if (f[0] == "end") break;
    if (f[0] == "param" && f.size() >= 3) {
      const std::string name(f[1]);
      const auto rank = static_cast<std::size_t>(parse_int(f[2]).value_or(-1));
      if (rank > 2 || f.size() != 3 + rank) throw Error("checkpoint: bad param line " + std::to_string(line_no));
      Shape shape;
      for (std::size_t k = 0; k < rank; ++k) shape.push_back(static_cast<std::size_t>(*parse_int(f[3 + k])));
      auto it = std::find_if(params.begin(), params.end(), [&](Parameter* p) { return p->name == name; });
      if (it == params.end()) throw Error("checkpoint: unknown parameter " + name);
      if ((*it)->value.shape() != shape) {
        throw Error("checkpoint: parameter " + name + " has shape " + shape_str(shape) + ", model expects " +
                    shape_str((*it)->value.shape()));
      }
      const std::size_t rows = rank == 2 ? shape[0] : 1;
      const std::size_t cols = rank == 2 ? shape[1] : shape_size(shape);
      (*it)->value = read_rows(is, rows, cols, line_no, "checkpoint").reshaped(shape);
      loaded.insert(name);
    } else if (f[0] == "idf" && f.size() == 4) {
      const auto d = static_cast<std::size_t>(*parse_int(f[1]));
      if (m->F.idf.size() <= d) m->F.idf.resize(d + 1);
      IdfTable& t = m->F.idf[d];
      t.n_docs = static_cast<std::size_t>(*parse_int(f[2]));
      const auto n = static_cast<std::size_t>(*parse_int(f[3]));
      for (std::size_t i = 0; i < n; ++i) {
        auto e = next("idf entry");
        if (e.size() != 2) throw Error("checkpoint: bad idf entry at line " + std::to_string(line_no));
        t.df[static_cast<std::size_t>(*parse_int(e[0]))] = static_cast<std::size_t>(*parse_int(e[1]));
      }
    } else {
      throw Error("checkpoint: unexpected line " + std::to_string(line_no));
    }
  }
  for (Parameter* p : params) {
    if (!loaded.count(p->name)) throw Error("checkpoint: parameter " + p->name + " missing");
  }
  return m;
}

}  // namespace dann
