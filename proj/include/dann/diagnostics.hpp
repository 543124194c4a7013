#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "dann/data.hpp"
#include "dann/embeddings.hpp"
#include "dann/numeric_io.hpp"
#include "dann/trainer.hpp"

namespace dann {

struct FeatureGroup {
  int id = 0;
  Tensor points;  // [n x dim]
};

/// Sum over group pairs (ascending id) of (1/|F1|) * sum over w2 in F2 of the
/// distance from w2 to its nearest point in F1.
inline double sep_metric(std::vector<FeatureGroup> groups) {
  if (groups.size() < 2) throw Error("sep_metric: need at least two groups");
  const std::size_t dim = groups[0].points.rank() == 2 ? groups[0].points.cols() : 0;
  for (const auto& g : groups) {
    if (g.points.rank() != 2 || g.points.rows() == 0) {
      throw Error("sep_metric: group " + std::to_string(g.id) + " is empty");
    }
    if (g.points.cols() != dim) throw Error("sep_metric: groups differ in dimensionality");
  }
  std::stable_sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  double total = 0.0;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    for (std::size_t j = i + 1; j < groups.size(); ++j) {
      const Tensor& f1 = groups[i].points;
      const Tensor& f2 = groups[j].points;
      double acc = 0.0;
      for (std::size_t b = 0; b < f2.rows(); ++b) {
        const double* pb = f2.data().data() + b * dim;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < f1.rows(); ++a) {
          const double* pa = f1.data().data() + a * dim;
          double d = 0.0;
          for (std::size_t c = 0; c < dim; ++c) d += (pa[c] - pb[c]) * (pa[c] - pb[c]);
          best = std::min(best, d);
        }
        acc += std::sqrt(best);
      }
      total += acc / static_cast<double>(f1.rows());
    }
  }
  return total;
}

struct Pca2d {
  Tensor coords;                   // [n x 2]
  Tensor directions;               // [2 x dim], rows are unit principal axes
  std::vector<double> eigenvalues; // of the centred scatter matrix, descending
  Tensor mean;                     // [dim]
  bool rank_deficient = false;
};

/// Mean-centred projection onto the top two principal directions. Each
/// direction's first nonzero component is made positive.
inline Pca2d pca_2d(const Tensor& points) {
  if (points.rank() != 2 || points.rows() < 3) throw Error("pca_2d: need at least 3 points");
  if (points.cols() < 2) throw Error("pca_2d: need dimensionality >= 2");
  const std::size_t n = points.rows();
  const std::size_t k = points.cols();
  Eigen::MatrixXd x(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < k; ++c) x(i, c) = points.at(i, c);
  }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(x.transpose() * x);
  if (es.info() != Eigen::Success) throw Error("pca_2d: eigen-decomposition failed");
  Pca2d out;
  out.mean = Tensor(Shape{k});
  for (std::size_t c = 0; c < k; ++c) out.mean[c] = mean(static_cast<Eigen::Index>(c));
  const auto& vals = es.eigenvalues();  // ascending
  for (Eigen::Index i = vals.size() - 1; i >= 0; --i) out.eigenvalues.push_back(std::max(0.0, vals(i)));
  const double top = out.eigenvalues[0];
  const double tol = 1e-10 * std::max(top, std::numeric_limits<double>::min());
  out.directions = Tensor(Shape{2, k});
  out.coords = Tensor(Shape{n, 2});
  for (std::size_t a = 0; a < 2; ++a) {
    if (out.eigenvalues[a] <= tol) {
      out.rank_deficient = true;
      continue;
    }
    Eigen::VectorXd v = es.eigenvectors().col(static_cast<Eigen::Index>(k - 1 - a));
    for (Eigen::Index c = 0; c < v.size(); ++c) {
      if (std::abs(v(c)) > 1e-12) {
        if (v(c) < 0) v = -v;
        break;
      }
    }
    for (std::size_t c = 0; c < k; ++c) out.directions.at(a, c) = v(static_cast<Eigen::Index>(c));
    const Eigen::VectorXd proj = x * v;
    for (std::size_t i = 0; i < n; ++i) out.coords.at(i, a) = proj(static_cast<Eigen::Index>(i));
  }
  return out;
}

struct AttentionMap {
  std::vector<double> sentence;            // alpha_i
  std::vector<std::vector<double>> word;   // alpha_it per sentence
  std::vector<std::vector<double>> normalized;
};

/// alpha_it * alpha_i divided by the largest such product in the document.
inline std::vector<std::vector<double>> normalize_attention(const std::vector<double>& sentence,
                                                            const std::vector<std::vector<double>>& word) {
  if (sentence.size() != word.size() || sentence.empty()) {
    throw Error("normalized attention: sentence and word attention disagree on sentence count");
  }
  double top = 0.0;
  for (std::size_t i = 0; i < word.size(); ++i) {
    for (double a : word[i]) top = std::max(top, a * sentence[i]);
  }
  if (!(top > 0.0)) throw Error("normalized attention: all products are zero");
  std::vector<std::vector<double>> out(word.size());
  for (std::size_t i = 0; i < word.size(); ++i) {
    for (double a : word[i]) out[i].push_back(a * sentence[i] / top);
  }
  return out;
}

inline AttentionMap normalized_attention(DannModel& m, const EncodedDoc& doc) {
  if (m.cfg.extractor.kind != ExtractorKind::kHan) {
    throw Error("attention unavailable for the " + extractor_name(m.cfg.extractor.kind) + " extractor");
  }
  Graph g(false);
  FeatureOutput f = m.features(g, {&doc}, nullptr);
  AttentionMap out;
  for (std::size_t i = 0; i < doc.sentences.size(); ++i) {
    out.sentence.push_back(f.sentence_alpha.at(0, i));
    std::vector<double> row;
    for (std::size_t t = 0; t < doc.sentences[i].size(); ++t) row.push_back(f.word_alpha.at(i, t));
    out.word.push_back(std::move(row));
  }
  out.normalized = normalize_attention(out.sentence, out.word);
  return out;
}

// ---------------------------------------------------------------------------
// Feature report
// ---------------------------------------------------------------------------

struct ReportOptions {
  std::size_t max_per_group = 1000;
  std::uint64_t seed = 0;
  std::size_t hausdorff_tokens = 500;
  std::size_t attention_docs = 0;
};

struct ScatterPoint {
  double x = 0.0;
  double y = 0.0;
  int domain = 0;
  int label = -1;  // -1 when the document is unlabeled
};

struct HausdorffEntry {
  int source_domain = 0;
  double before = 0.0;  // identity projections
  double after = 0.0;   // learned projections
};

struct AttentionRecord {
  std::vector<std::size_t> ids;
  std::vector<SentenceRange> sentences;
  AttentionMap map;
};

struct DiagnosticsReport {
  std::string extractor;
  std::size_t n_points = 0;
  double domain_sep = std::numeric_limits<double>::quiet_NaN();
  double class_sep = std::numeric_limits<double>::quiet_NaN();
  bool pca_rank_deficient = false;
  std::vector<ScatterPoint> scatter;
  std::vector<HausdorffEntry> hausdorff;
  std::vector<AttentionRecord> attention;

  std::string scatter_csv() const {
    std::string s = "x,y,domain,label\n";
    for (const auto& p : scatter) {
      s += format_double(p.x) + ',' + format_double(p.y) + ',' + std::to_string(p.domain) + ',' +
           std::to_string(p.label) + '\n';
    }
    return s;
  }
};

/// NaN is written as null so the JSON stays standard.
inline nlohmann::json json_number(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline double number_from_json(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline nlohmann::json to_json(const DiagnosticsReport& r) {
  nlohmann::json j;
  j["extractor"] = r.extractor;
  j["n_points"] = r.n_points;
  j["domain_sep"] = json_number(r.domain_sep);
  j["class_sep"] = json_number(r.class_sep);
  j["pca_rank_deficient"] = r.pca_rank_deficient;
  j["scatter"] = nlohmann::json::array();
  for (const auto& p : r.scatter) j["scatter"].push_back({p.x, p.y, p.domain, p.label});
  j["hausdorff"] = nlohmann::json::array();
  for (const auto& h : r.hausdorff) {
    j["hausdorff"].push_back({{"source_domain", h.source_domain}, {"before", h.before}, {"after", h.after}});
  }
  j["attention"] = nlohmann::json::array();
  for (const auto& a : r.attention) {
    nlohmann::json sents = nlohmann::json::array();
    for (const auto& s : a.sentences) sents.push_back({s.begin, s.end});
    j["attention"].push_back({{"ids", a.ids},
                              {"sentences", sents},
                              {"sentence_alpha", a.map.sentence},
                              {"word_alpha", a.map.word},
                              {"normalized", a.map.normalized}});
  }
  return j;
}

inline DiagnosticsReport report_from_json(const nlohmann::json& j) {
  DiagnosticsReport r;
  r.extractor = j.at("extractor");
  r.n_points = j.at("n_points");
  r.domain_sep = number_from_json(j.at("domain_sep"));
  r.class_sep = number_from_json(j.at("class_sep"));
  r.pca_rank_deficient = j.at("pca_rank_deficient");
  for (const auto& p : j.at("scatter")) r.scatter.push_back({p[0], p[1], p[2], p[3]});
  for (const auto& h : j.at("hausdorff")) r.hausdorff.push_back({h.at("source_domain"), h.at("before"), h.at("after")});
  for (const auto& a : j.at("attention")) {
    AttentionRecord rec;
    rec.ids = a.at("ids").get<std::vector<std::size_t>>();
    for (const auto& s : a.at("sentences")) rec.sentences.push_back({s[0], s[1]});
    rec.map.sentence = a.at("sentence_alpha").get<std::vector<double>>();
    rec.map.word = a.at("word_alpha").get<std::vector<std::vector<double>>>();
    rec.map.normalized = a.at("normalized").get<std::vector<std::vector<double>>>();
    r.attention.push_back(std::move(rec));
  }
  return r;
}

namespace detail {

inline Tensor select_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  Tensor out(Shape{rows.size(), t.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * t.cols()), t.cols(),
                out.data().begin() + static_cast<std::ptrdiff_t>(i * t.cols()));
  }
  return out;
}

/// Groups row indices by key, keeping at most `cap` per group (seeded).
inline std::map<int, std::vector<std::size_t>> capped_groups(const std::vector<int>& keys, std::size_t cap,
                                                             Rng& rng) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < keys.size(); ++i) groups[keys[i]].push_back(i);
  for (auto& [key, rows] : groups) {
    if (rows.size() <= cap) continue;
    auto order = shuffled_indices(rows.size(), rng);
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < cap; ++i) kept.push_back(rows[order[i]]);
    std::sort(kept.begin(), kept.end());
    rows = std::move(kept);
  }
  return groups;
}

inline double grouped_sep(const Tensor& z, const std::map<int, std::vector<std::size_t>>& groups) {
  if (groups.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  std::vector<FeatureGroup> fg;
  for (const auto& [id, rows] : groups) fg.push_back({id, select_rows(z, rows)});
  return sep_metric(std::move(fg));
}

}  // namespace detail

/// Features, separation, 2-D scatter, Hausdorff and attention for `docs`.
inline DiagnosticsReport feature_report(DannModel& m, const std::vector<const EncodedDoc*>& docs,
                                        const ReportOptions& opt = {}) {
  if (docs.empty()) throw Error("feature_report: no documents");
  if (opt.attention_docs > 0 && m.cfg.extractor.kind != ExtractorKind::kHan) {
    throw Error("attention unavailable for the " + extractor_name(m.cfg.extractor.kind) + " extractor");
  }
  Rng rng = make_rng(opt.seed, Stream::kReport);
  std::vector<int> domains;
  for (const EncodedDoc* d : docs) domains.push_back(d->domain);
  auto by_domain = detail::capped_groups(domains, opt.max_per_group, rng);
  std::vector<std::size_t> kept;
  for (const auto& [id, rows] : by_domain) kept.insert(kept.end(), rows.begin(), rows.end());
  std::sort(kept.begin(), kept.end());
  std::vector<const EncodedDoc*> sample;
  for (std::size_t i : kept) sample.push_back(docs[i]);

  DiagnosticsReport r;
  r.extractor = extractor_name(m.cfg.extractor.kind);
  r.n_points = sample.size();
  const Tensor z = extract_features(m, sample);
  std::vector<int> sdom, scls;
  std::vector<std::size_t> labeled;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    sdom.push_back(sample[i]->domain);
    if (sample[i]->label) {
      labeled.push_back(i);
      scls.push_back(*sample[i]->label);
    }
  }
  std::map<int, std::vector<std::size_t>> dom_groups;
  for (std::size_t i = 0; i < sdom.size(); ++i) dom_groups[sdom[i]].push_back(i);
  r.domain_sep = detail::grouped_sep(z, dom_groups);
  auto cls_groups = detail::capped_groups(scls, opt.max_per_group, rng);
  for (auto& [id, rows] : cls_groups) {
    for (auto& row : rows) row = labeled[row];
  }
  r.class_sep = detail::grouped_sep(z, cls_groups);

  if (sample.size() >= 3 && z.cols() >= 2) {
    Pca2d pca = pca_2d(z);
    r.pca_rank_deficient = pca.rank_deficient;
    for (std::size_t i = 0; i < sample.size(); ++i) {
      r.scatter.push_back({pca.coords.at(i, 0), pca.coords.at(i, 1), sample[i]->domain,
                           sample[i]->label ? *sample[i]->label : -1});
    }
  }

  if (!m.projections.empty()) {
    std::map<int, std::vector<std::vector<std::size_t>>> ids;
    for (const EncodedDoc* d : docs) ids[d->domain].push_back(d->ids);
    const int target = m.target_domain();
    if (ids.count(target)) {
      const auto tgt_tokens = most_frequent(ids[target], opt.hausdorff_tokens);
      const Tensor tgt_before = projected_rows(m.table, tgt_tokens);
      const Tensor tgt_after = projected_rows(m.table, tgt_tokens, &m.projections[static_cast<std::size_t>(target)]);
      for (const auto& [dom, lists] : ids) {
        if (dom == target) continue;
        const auto src_tokens = most_frequent(lists, opt.hausdorff_tokens);
        if (src_tokens.empty() || tgt_tokens.empty()) continue;
        HausdorffEntry h;
        h.source_domain = dom;
        h.before = hausdorff_undirected(projected_rows(m.table, src_tokens), tgt_before);
        h.after = hausdorff_undirected(
            projected_rows(m.table, src_tokens, &m.projections[static_cast<std::size_t>(dom)]), tgt_after);
        r.hausdorff.push_back(h);
      }
    }
  }

  for (std::size_t i = 0; i < opt.attention_docs && i < sample.size(); ++i) {
    r.attention.push_back({sample[i]->ids, sample[i]->sentences, normalized_attention(m, *sample[i])});
  }
  return r;
}

}  // namespace dann
