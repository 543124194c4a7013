#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dann/autodiff.hpp"
#include "dann/data.hpp"
#include "dann/embeddings.hpp"
#include "dann/params.hpp"

namespace dann {

enum class ExtractorKind { kAvg, kTfidf, kCnn, kHan };

inline std::string extractor_name(ExtractorKind k) {
  switch (k) {
    case ExtractorKind::kAvg: return "avg";
    case ExtractorKind::kTfidf: return "tfidf";
    case ExtractorKind::kCnn: return "cnn";
    case ExtractorKind::kHan: return "han";
  }
  return "?";
}

inline std::optional<ExtractorKind> parse_extractor(const std::string& s) {
  for (auto k : {ExtractorKind::kAvg, ExtractorKind::kTfidf, ExtractorKind::kCnn, ExtractorKind::kHan}) {
    if (extractor_name(k) == s) return k;
  }
  return std::nullopt;
}

struct ExtractorConfig {
  ExtractorKind kind = ExtractorKind::kAvg;
  std::size_t dense_units = 100;   // avg, tfidf
  std::size_t cnn_maps = 100;
  std::vector<std::size_t> cnn_widths = {3, 4, 5};
  double cnn_dropout = 0.5;
  double max_norm = 3.0;           // on P's weight vectors, cnn only
  std::size_t max_len_cap = 400;
  std::size_t cnn_len = 0;         // resolved N; 0 until fitted
  std::size_t gru_units = 100;     // per direction
  std::size_t attention_units = 200;

  std::size_t feature_dim() const {
    switch (kind) {
      case ExtractorKind::kAvg:
      case ExtractorKind::kTfidf: return dense_units;
      case ExtractorKind::kCnn: return cnn_maps * cnn_widths.size();
      case ExtractorKind::kHan: return 2 * gru_units;
    }
    return 0;
  }

  std::size_t min_len() const {
    return cnn_widths.empty() ? 1 : *std::max_element(cnn_widths.begin(), cnn_widths.end());
  }

  void validate() const {
    if (feature_dim() == 0) throw ConfigError("extractor: zero feature dimension");
    if (kind == ExtractorKind::kCnn) {
      if (cnn_widths.empty()) throw ConfigError("cnn: no filter widths");
      if (cnn_len != 0 && cnn_len < min_len()) {
        throw ConfigError("cnn: max document length " + std::to_string(cnn_len) +
                          " is shorter than the widest filter (" +
                          std::to_string(min_len()) + ")");
      }
      if (cnn_dropout < 0.0 || cnn_dropout >= 1.0) throw ConfigError("cnn: dropout must lie in [0, 1)");
      if (!(max_norm > 0.0)) throw ConfigError("cnn: max-norm must be positive");
    }
    if (kind == ExtractorKind::kHan && attention_units == 0) {
      throw ConfigError("han: zero attention units");
    }
  }
};

/// A document as vocabulary ids.
struct EncodedDoc {
  std::vector<std::size_t> ids;
  std::vector<SentenceRange> sentences;
  int domain = 0;
  std::optional<int> label;
};

inline EncodedDoc encode(const Document& d, const Vocabulary& vocab) {
  return EncodedDoc{lookup_ids(d.tokens, vocab), d.sentences, d.domain, d.label};
}

inline std::vector<EncodedDoc> encode_all(const std::vector<Document>& docs, const Vocabulary& vocab) {
  std::vector<EncodedDoc> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(encode(d, vocab));
  return out;
}

// ---------------------------------------------------------------------------
// tf-idf statistics
// ---------------------------------------------------------------------------

struct IdfTable {
  std::size_t n_docs = 0;
  std::unordered_map<std::size_t, std::size_t> df;

  /// ln((1 + N) / (1 + df)) + 1.
  double idf(std::size_t token) const {
    auto it = df.find(token);
    const double d = it == df.end() ? 0.0 : static_cast<double>(it->second);
    return std::log((1.0 + static_cast<double>(n_docs)) / (1.0 + d)) + 1.0;
  }
};

inline IdfTable fit_idf(const std::vector<const EncodedDoc*>& docs) {
  if (docs.empty()) throw Error("fit_idf: empty corpus");
  IdfTable t;
  t.n_docs = docs.size();
  std::vector<std::size_t> seen;
  for (const EncodedDoc* d : docs) {
    seen = d->ids;
    std::sort(seen.begin(), seen.end());
    seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
    for (std::size_t id : seen) ++t.df[id];
  }
  return t;
}

inline IdfTable fit_idf(const std::vector<EncodedDoc>& docs) {
  std::vector<const EncodedDoc*> ptrs;
  for (const auto& d : docs) ptrs.push_back(&d);
  return fit_idf(ptrs);
}

/// Per-position weights tf(w_i) * idf(w_i) / |x| for one document.
inline std::vector<double> tfidf_weights(const std::vector<std::size_t>& ids, const IdfTable& idf) {
  if (ids.empty()) throw Error("tfidf: empty document");
  std::unordered_map<std::size_t, std::size_t> tf;
  for (std::size_t id : ids) ++tf[id];
  std::vector<double> w(ids.size());
  const double n = static_cast<double>(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    w[i] = static_cast<double>(tf[ids[i]]) * idf.idf(ids[i]) / n;
  }
  return w;
}

// ---------------------------------------------------------------------------
// Pooling stages for avg / tfidf. `embedded` stacks every document's token
// rows in batch order.
// ---------------------------------------------------------------------------

inline Var weighted_pool(Graph& g, Var embedded, const std::vector<std::vector<double>>& weights) {
  std::size_t total = 0;
  for (const auto& w : weights) total += w.size();
  if (total != embedded.value().rows()) {
    throw Error("pool: " + std::to_string(total) + " weights for " +
                std::to_string(embedded.value().rows()) + " rows");
  }
  Tensor m(Shape{weights.size(), total});
  std::size_t at = 0;
  for (std::size_t b = 0; b < weights.size(); ++b) {
    if (weights[b].empty()) throw Error("pool: empty document");
    for (double w : weights[b]) m.at(b, at++) = w;
  }
  return matmul(g.constant(std::move(m), "pool_weights"), embedded);
}

inline Var avg_pool(Graph& g, Var embedded, const std::vector<std::size_t>& lengths) {
  std::vector<std::vector<double>> w;
  for (std::size_t n : lengths) w.emplace_back(n, n ? 1.0 / static_cast<double>(n) : 0.0);
  return weighted_pool(g, embedded, w);
}

inline Var tfidf_pool(Graph& g, Var embedded, const std::vector<const EncodedDoc*>& docs,
                      const std::vector<IdfTable>& idf) {
  std::vector<std::vector<double>> w;
  for (const EncodedDoc* d : docs) {
    w.push_back(tfidf_weights(d->ids, idf.at(static_cast<std::size_t>(d->domain))));
  }
  return weighted_pool(g, embedded, w);
}

/// Mean of rows, then dense + ReLU. `embedded` is [n x K]; result [units].
inline Var f_avg(Graph& g, Var embedded, const Dense& head) {
  const std::size_t n = embedded.value().rows();
  if (n == 0) throw Error("f_avg: empty document");
  Var z = relu(head(g, avg_pool(g, embedded, {n})));
  return reshape(z, {head.out()});
}

inline Var f_tfidf(Graph& g, const EncodedDoc& doc, Var embedded, const IdfTable& idf,
                   const Dense& head) {
  std::vector<std::vector<double>> w{tfidf_weights(doc.ids, idf)};
  Var z = relu(head(g, weighted_pool(g, embedded, w)));
  return reshape(z, {head.out()});
}

// ---------------------------------------------------------------------------
// CNN
// ---------------------------------------------------------------------------

inline Var with_zero_row(Graph& g, Var x) {
  return concat({x, g.constant(Tensor(Shape{1, x.value().cols()}), "zero_row")}, 0);
}

/// Convolution bank over documents padded or truncated to n rows.
/// `lengths` are the true token counts. Returns [B x maps*widths].
inline Var cnn_features(Graph& g, Var embedded, const std::vector<std::size_t>& lengths,
                        std::size_t n, const std::vector<Dense>& filters,
                        const std::vector<std::size_t>& widths) {
  const std::size_t k = embedded.value().cols();
  const std::size_t batch = lengths.size();
  Var ext = with_zero_row(g, embedded);
  const std::size_t zero = embedded.value().rows();
  std::vector<std::size_t> clipped(lengths.size());
  std::size_t total = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    clipped[b] = std::min(lengths[b], n);
    total += lengths[b];
  }
  if (total != zero) throw Error("cnn: lengths do not match embedded rows");
  // Rows of the padded documents, indexed into ext.
  std::vector<std::size_t> pos;
  pos.reserve(batch * n);
  std::size_t offset = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < n; ++p) pos.push_back(p < clipped[b] ? offset + p : zero);
    offset += lengths[b];
  }
  std::vector<Var> pooled;
  for (std::size_t f = 0; f < filters.size(); ++f) {
    const std::size_t h = widths[f];
    if (h > n) throw Error("cnn: filter width exceeds document length");
    const std::size_t steps = n - h + 1;
    std::vector<std::size_t> win;
    win.reserve(batch * steps * h);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t j = 0; j < h; ++j) win.push_back(pos[b * n + t + j]);
      }
    }
    Var cols = reshape(gather_rows(ext, std::move(win)), {batch * steps, h * k});
    Var act = relu(filters[f](g, cols));
    Var mx = max_over_time(act, batch);
    if (batch == 1) mx = reshape(mx, {1, filters[f].out()});
    pooled.push_back(mx);
  }
  return pooled.size() == 1 ? pooled[0] : concat(pooled, 1);
}

/// Single padded document [N x K] -> [maps*widths], no dropout.
inline Var f_cnn(Graph& g, Var embedded_padded, const std::vector<Dense>& filters,
                 const std::vector<std::size_t>& widths) {
  const std::size_t n = embedded_padded.value().rows();
  Var z = cnn_features(g, embedded_padded, {n}, n, filters, widths);
  return reshape(z, {z.value().cols()});
}

// ---------------------------------------------------------------------------
// GRU and attention
// ---------------------------------------------------------------------------

/// z = s(xW_z + hU_z + b_z), r = s(xW_r + hU_r + b_r),
/// h~ = tanh(xW_h + (r*h)U_h + b_h), h' = (1-z)*h + z*h~.
/// W is stored [in x 3H] as (z | r | h), U_zr [H x 2H], U_h [H x H].
struct GruParams {
  Parameter* w = nullptr;
  Parameter* u_zr = nullptr;
  Parameter* u_h = nullptr;
  Parameter* b = nullptr;

  std::size_t units() const { return u_h->value.rows(); }
  std::size_t in() const { return w->value.rows(); }

  static GruParams create(ParamStore& store, const std::string& name, std::size_t in,
                          std::size_t h, Rng& rng) {
    GruParams p;
    p.w = &store.add(name + ".w", glorot_uniform(rng, {in, 3 * h}, in, h));
    p.u_zr = &store.add(name + ".u_zr", glorot_uniform(rng, {h, 2 * h}, h, h));
    p.u_h = &store.add(name + ".u_h", glorot_uniform(rng, {h, h}, h, h));
    p.b = &store.add(name + ".b", Tensor(Shape{3 * h}));
    return p;
  }
};

/// One GRU update for a batch. `xw` = x W + b, [S x 3H]; `h` is [S x H].
inline Var gru_step(Graph& g, const GruParams& p, Var xw, Var h) {
  const std::size_t H = p.units();
  Var zr = sigmoid(add(slice_cols(xw, 0, 2 * H), matmul(h, g.param(*p.u_zr))));
  Var z = slice_cols(zr, 0, H);
  Var r = slice_cols(zr, H, 2 * H);
  Var cand = tanh(add(slice_cols(xw, 2 * H, 3 * H), matmul(mul(r, h), g.param(*p.u_h))));
  return add(mul(one_minus(z), h), mul(z, cand));
}

/// Single-vector GRU cell: x [in], h_prev [H] -> [H].
inline Var gru_cell(Graph& g, const GruParams& p, Var x, Var h_prev) {
  const std::size_t H = p.units();
  if (x.value().rank() != 1 || x.value().size() != p.in() || h_prev.value().rank() != 1 ||
      h_prev.value().size() != H) {
    throw Error("gru_cell: expected x " + shape_str({p.in()}) + " and h " + shape_str({H}) +
                ", got " + shape_str(x.value().shape()) + " and " +
                shape_str(h_prev.value().shape()));
  }
  Var xw = add(matmul(reshape(x, {1, p.in()}), g.param(*p.w)), g.param(*p.b));
  return reshape(gru_step(g, p, xw, reshape(h_prev, {1, H})), {H});
}

/// GRU over a padded, time-major sequence: row t*S + s of `x` is step t of
/// sequence s. Where mask[t][s] is 0 the state is carried unchanged.
/// Returns [T*S x H] states in the same layout.
inline Var gru_sequence(Graph& g, const GruParams& p, Var x, std::size_t steps, std::size_t seqs,
                        const std::vector<std::vector<char>>& mask, bool reverse) {
  const std::size_t H = p.units();
  Var xw_all = add(matmul(x, g.param(*p.w)), g.param(*p.b));
  Var h = g.constant(Tensor(Shape{seqs, H}), "h0");
  std::vector<Var> out(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const std::size_t t = reverse ? steps - 1 - k : k;
    Var xw = steps == 1 ? xw_all : slice_rows(xw_all, t * seqs, (t + 1) * seqs);
    Var next = gru_step(g, p, xw, h);
    const auto& m = mask[t];
    const bool full = std::all_of(m.begin(), m.end(), [](char c) { return c != 0; });
    if (full) {
      h = next;
    } else {
      Tensor mt(Shape{seqs, 1});
      for (std::size_t s = 0; s < seqs; ++s) mt[s] = m[s] ? 1.0 : 0.0;
      h = add(h, mul(sub(next, h), g.constant(std::move(mt), "step_mask")));
    }
    out[t] = h;
  }
  return steps == 1 ? out[0] : concat(out, 0);
}

inline Var bigru_sequence(Graph& g, const GruParams& fwd, const GruParams& bwd, Var x,
                          std::size_t steps, std::size_t seqs,
                          const std::vector<std::vector<char>>& mask) {
  return concat({gru_sequence(g, fwd, x, steps, seqs, mask, false),
                 gru_sequence(g, bwd, x, steps, seqs, mask, true)},
                1);
}

struct AttentionParams {
  Dense proj;                  // W_w, b_w: [D x A]
  Parameter* context = nullptr;  // u: [A]

  static AttentionParams create(ParamStore& store, const std::string& name, std::size_t d,
                                std::size_t a, Rng& rng) {
    AttentionParams p;
    p.proj = Dense::create(store, name, d, a, rng);
    p.context = &store.add(name + ".u", glorot_uniform(rng, {a}, a, 1));
    return p;
  }
};

struct Pooled {
  Var s;      // [S x D]
  Var alpha;  // [S x T]
};

/// Attention pooling over a padded time-major sequence [T*S x D].
/// mask is [S x T] with 1 for real steps.
inline Pooled attention_pool_batched(Graph& g, const AttentionParams& p, Var hs, std::size_t steps,
                                     std::size_t seqs, const Tensor& mask) {
  const std::size_t d = hs.value().cols();
  const std::size_t a = p.context->value.size();
  Var u = tanh(p.proj(g, hs));
  Var scores = matmul(u, reshape(g.param(*p.context), {a, 1}));
  Var by_seq = transpose(reshape(scores, {steps, seqs}));
  Var alpha = masked_softmax(by_seq, mask);
  Var weights = reshape(transpose(alpha), {steps * seqs, 1});
  Var weighted = reshape(mul(hs, weights), {steps, seqs * d});
  Var s = reshape(matmul(g.constant(Tensor(Shape{1, steps}, 1.0), "ones"), weighted), {seqs, d});
  return {s, alpha};
}

/// Single sequence [T x H] -> (s [H], alpha [T]).
inline std::pair<Var, Var> attention_pool(Graph& g, const AttentionParams& p, Var h_seq) {
  if (h_seq.value().rank() != 2 || h_seq.value().rows() == 0) {
    throw Error("attention_pool: empty sequence");
  }
  const std::size_t t = h_seq.value().rows();
  const std::size_t d = h_seq.value().cols();
  Pooled r = attention_pool_batched(g, p, h_seq, t, 1, Tensor(Shape{1, t}, 1.0));
  return {reshape(r.s, {d}), reshape(r.alpha, {t})};
}

// ---------------------------------------------------------------------------
// Full extractor
// ---------------------------------------------------------------------------

struct FeatureOutput {
  Var z;  // [B x feature_dim]
  /// HAN only: word attention per sentence [S_total x T_w] (row order follows
  /// documents then sentences) and sentence attention [B x T_s].
  Tensor word_alpha;
  Tensor sentence_alpha;
  std::vector<std::size_t> first_sentence;  // per document, row in word_alpha
};

struct Extractor {
  ExtractorConfig cfg;
  std::size_t input_dim = 0;
  Dense head;                    // avg, tfidf
  std::vector<Dense> filters;    // cnn, w: [h*K x maps]
  GruParams word_fwd, word_bwd, sent_fwd, sent_bwd;
  AttentionParams word_att, sent_att;
  std::vector<IdfTable> idf;     // tfidf, per domain

  static Extractor create(const ExtractorConfig& cfg, std::size_t k, ParamStore& store, Rng& rng) {
    cfg.validate();
    Extractor e;
    e.cfg = cfg;
    e.input_dim = k;
    switch (cfg.kind) {
      case ExtractorKind::kAvg:
      case ExtractorKind::kTfidf:
        e.head = Dense::create(store, "F.dense", k, cfg.dense_units, rng);
        break;
      case ExtractorKind::kCnn:
        for (std::size_t h : cfg.cnn_widths) {
          e.filters.push_back(Dense::create(store, "F.conv" + std::to_string(h), h * k, cfg.cnn_maps, rng));
        }
        break;
      case ExtractorKind::kHan: {
        const std::size_t H = cfg.gru_units;
        e.word_fwd = GruParams::create(store, "F.word_gru_fwd", k, H, rng);
        e.word_bwd = GruParams::create(store, "F.word_gru_bwd", k, H, rng);
        e.word_att = AttentionParams::create(store, "F.word_att", 2 * H, cfg.attention_units, rng);
        e.sent_fwd = GruParams::create(store, "F.sent_gru_fwd", 2 * H, H, rng);
        e.sent_bwd = GruParams::create(store, "F.sent_gru_bwd", 2 * H, H, rng);
        e.sent_att = AttentionParams::create(store, "F.sent_att", 2 * H, cfg.attention_units, rng);
        break;
      }
    }
    return e;
  }

  std::size_t feature_dim() const { return cfg.feature_dim(); }

  /// `embedded` holds the token rows of every document in batch order.
  /// `dropout_rng` enables dropout (cnn) when the graph is training.
  FeatureOutput forward(Graph& g, Var embedded, const std::vector<const EncodedDoc*>& docs,
                        Rng* dropout_rng) const {
    if (docs.empty()) throw Error("extractor: empty batch");
    std::vector<std::size_t> lengths;
    for (const EncodedDoc* d : docs) {
      if (d->ids.empty()) throw Error("extractor: empty document");
      lengths.push_back(d->ids.size());
    }
    FeatureOutput out;
    switch (cfg.kind) {
      case ExtractorKind::kAvg:
        out.z = relu(head(g, avg_pool(g, embedded, lengths)));
        break;
      case ExtractorKind::kTfidf:
        if (idf.empty()) throw Error("tfidf extractor used before fitting idf statistics");
        out.z = relu(head(g, tfidf_pool(g, embedded, docs, idf)));
        break;
      case ExtractorKind::kCnn: {
        if (cfg.cnn_len == 0) throw Error("cnn extractor used before fixing the document length");
        Var z = cnn_features(g, embedded, lengths, cfg.cnn_len, filters, cfg.cnn_widths);
        if (dropout_rng != nullptr) z = dropout(z, cfg.cnn_dropout, *dropout_rng);
        out.z = z;
        break;
      }
      case ExtractorKind::kHan:
        han(g, embedded, docs, out);
        break;
    }
    return out;
  }

 private:
  void han(Graph& g, Var embedded, const std::vector<const EncodedDoc*>& docs,
           FeatureOutput& out) const {
    const std::size_t batch = docs.size();
    struct Sent {
      std::size_t offset;
      std::size_t len;
    };
    std::vector<Sent> sents;
    std::vector<std::size_t> n_sent(batch);
    std::size_t offset = 0;
    std::size_t tw = 0;
    std::size_t ts = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const EncodedDoc& d = *docs[b];
      if (d.sentences.empty()) throw Error("han: document without sentences");
      out.first_sentence.push_back(sents.size());
      std::size_t covered = 0;
      for (const auto& s : d.sentences) {
        if (s.size() == 0) throw Error("han: empty sentence");
        if (s.begin != covered || s.end > d.ids.size()) throw Error("han: sentence ranges do not partition the document");
        covered = s.end;
        sents.push_back({offset + s.begin, s.size()});
        tw = std::max(tw, s.size());
      }
      if (covered != d.ids.size()) throw Error("han: sentence ranges do not partition the document");
      n_sent[b] = d.sentences.size();
      ts = std::max(ts, n_sent[b]);
      offset += d.ids.size();
    }
    const std::size_t S = sents.size();

    // Word level.
    Var ext = with_zero_row(g, embedded);
    const std::size_t zero = offset;
    std::vector<std::size_t> idx;
    idx.reserve(tw * S);
    std::vector<std::vector<char>> wmask(tw, std::vector<char>(S));
    Tensor wmask_st(Shape{S, tw});
    for (std::size_t t = 0; t < tw; ++t) {
      for (std::size_t s = 0; s < S; ++s) {
        const bool on = t < sents[s].len;
        idx.push_back(on ? sents[s].offset + t : zero);
        wmask[t][s] = on;
        wmask_st.at(s, t) = on ? 1.0 : 0.0;
      }
    }
    Var x = gather_rows(ext, std::move(idx));
    Var hw = bigru_sequence(g, word_fwd, word_bwd, x, tw, S, wmask);
    Pooled words = attention_pool_batched(g, word_att, hw, tw, S, wmask_st);

    // Sentence level.
    Var sext = with_zero_row(g, words.s);
    std::vector<std::size_t> sidx;
    std::vector<std::vector<char>> smask(ts, std::vector<char>(batch));
    Tensor smask_st(Shape{batch, ts});
    for (std::size_t t = 0; t < ts; ++t) {
      for (std::size_t b = 0; b < batch; ++b) {
        const bool on = t < n_sent[b];
        sidx.push_back(on ? out.first_sentence[b] + t : S);
        smask[t][b] = on;
        smask_st.at(b, t) = on ? 1.0 : 0.0;
      }
    }
    Var xs = gather_rows(sext, std::move(sidx));
    Var hs = bigru_sequence(g, sent_fwd, sent_bwd, xs, ts, batch, smask);
    Pooled doc = attention_pool_batched(g, sent_att, hs, ts, batch, smask_st);
    out.z = doc.s;
    out.word_alpha = words.alpha.value();
    out.sentence_alpha = doc.alpha.value();
  }
};

/// Largest training document length, capped.
inline std::size_t fit_max_len(const std::vector<const EncodedDoc*>& docs, std::size_t cap) {
  std::size_t n = 0;
  for (const EncodedDoc* d : docs) n = std::max(n, d->ids.size());
  return std::min(n, cap);
}

}  // namespace dann
