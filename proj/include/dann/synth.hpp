#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dann/data.hpp"
#include "dann/embeddings.hpp"
#include "dann/random.hpp"

namespace dann {

enum class ShiftMode { kLexicalSwap, kRotation };

/// Synthetic domain-shift benchmark. Each domain owns a copy of a V-token
/// vocabulary; token i plays the same role (class-indicative, domain-specific
/// or topical) in every domain, so documents are drawn from identical
/// class-conditional distributions over token indices.
struct SynthSpec {
  std::size_t vocab_size = 2000;
  std::size_t dim = 32;
  std::size_t n_classes = 2;
  std::size_t docs_per_domain = 2000;
  std::size_t n_source_domains = 1;
  ShiftMode shift = ShiftMode::kLexicalSwap;

  std::size_t min_sentences = 2;
  std::size_t max_sentences = 4;
  std::size_t min_sentence_len = 4;
  std::size_t max_sentence_len = 10;

  double sentiment_fraction = 0.1;  // share of the vocabulary
  double domain_fraction = 0.1;
  std::size_t n_topics = 8;

  double sentiment_rate = 0.15;  // share of tokens in a document
  double domain_rate = 0.3;
  double topic_focus = 0.7;      // neutral tokens taken from the doc topic

  double class_signal = 1.0;
  double domain_signal = 1.0;
  double topic_signal = 1.0;
  double noise = 0.3;
  /// Moves the target's domain-token centre along class1 - class0, so its
  /// domain words look class-indicative to a source-trained classifier.
  double target_class_shift = 0.0;

  std::size_t n_sentiment() const {
    return static_cast<std::size_t>(std::llround(sentiment_fraction * static_cast<double>(vocab_size)));
  }
  std::size_t n_domain_tokens() const {
    return static_cast<std::size_t>(std::llround(domain_fraction * static_cast<double>(vocab_size)));
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("synth: " + m); };
    if (vocab_size == 0 || dim == 0) fail("vocab size and dim must be positive");
    if (n_classes < 2) fail("need at least 2 classes");
    if (n_source_domains < 1) fail("need at least one source domain");
    if (min_sentences == 0 || min_sentences > max_sentences) fail("bad sentence count range");
    if (min_sentence_len == 0 || min_sentence_len > max_sentence_len) fail("bad sentence length range");
    if (sentiment_rate < 0 || domain_rate < 0 || sentiment_rate + domain_rate > 1.0) {
      fail("token rates must be nonnegative and sum to at most 1");
    }
    if (topic_focus < 0 || topic_focus > 1) fail("topic focus must lie in [0, 1]");
    if (n_sentiment() < n_classes) fail("too few class-indicative tokens for the class count");
    if (domain_rate > 0 && n_domain_tokens() == 0) fail("domain rate set but no domain tokens");
    if (n_sentiment() + n_domain_tokens() >= vocab_size) fail("no neutral tokens left");
    if (n_topics == 0) fail("need at least one topic");
    if (noise < 0) fail("noise must be nonnegative");
  }
};

enum class TokenRole { kSentiment, kDomain, kNeutral };

struct SynthData {
  Corpus source;  // n_source_domains domains
  Corpus target;  // one domain
  EmbeddingTable table;
  Tensor rotation;  // K x K, identity in lexical-swap mode
  /// Table row of token i in domain d (sources first, then target).
  std::vector<std::vector<std::size_t>> rows;
  std::vector<TokenRole> roles;
  std::vector<int> role_group;  // class for sentiment tokens, topic for neutral
};

inline std::string synth_token(std::size_t domain, std::size_t i) {
  return "d" + std::to_string(domain) + "w" + std::to_string(i);
}

/// Random orthogonal matrix from the QR factorization of a Gaussian matrix,
/// with column signs fixed so the draw is uniform.
inline Tensor random_rotation(std::size_t k, Rng& rng) {
  Eigen::MatrixXd a(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = normal(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  Tensor out(Shape{k, k});
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      out.at(i, j) = q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
  }
  return out;
}

namespace detail {

inline std::vector<double> random_direction(std::size_t k, double scale, Rng& rng) {
  std::vector<double> v(k);
  double n2 = 0.0;
  for (auto& x : v) {
    x = normal(rng);
    n2 += x * x;
  }
  const double f = scale / std::sqrt(n2);
  for (auto& x : v) x *= f;
  return v;
}

/// Draws from {0..n-1} with weights 1/(i+1).
class ZipfSampler {
 public:
  explicit ZipfSampler(std::size_t n) : cdf_(n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      acc += 1.0 / static_cast<double>(i + 1);
      cdf_[i] = acc;
    }
  }
  std::size_t operator()(Rng& rng) const {
    const double u = uniform(rng, 0.0, cdf_.back());
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    if (it == cdf_.end()) --it;
    return static_cast<std::size_t>(it - cdf_.begin());
  }

 private:
  std::vector<double> cdf_;
};

}  // namespace detail

inline SynthData synth_generate(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng = make_rng(seed, Stream::kSynth);
  const std::size_t V = spec.vocab_size;
  const std::size_t K = spec.dim;
  const std::size_t n_dom = spec.n_source_domains + 1;
  const std::size_t n_sent = spec.n_sentiment();
  const std::size_t n_dtok = spec.n_domain_tokens();

  SynthData out;
  out.roles.resize(V);
  out.role_group.assign(V, -1);
  std::vector<std::vector<std::size_t>> by_class(spec.n_classes);
  std::vector<std::vector<std::size_t>> by_topic(spec.n_topics);
  std::vector<std::size_t> domain_tokens;
  std::vector<std::size_t> neutral;
  for (std::size_t i = 0; i < V; ++i) {
    if (i < n_sent) {
      out.roles[i] = TokenRole::kSentiment;
      out.role_group[i] = static_cast<int>(i % spec.n_classes);
      by_class[i % spec.n_classes].push_back(i);
    } else if (i < n_sent + n_dtok) {
      out.roles[i] = TokenRole::kDomain;
      domain_tokens.push_back(i);
    } else {
      out.roles[i] = TokenRole::kNeutral;
      const std::size_t t = (i - n_sent - n_dtok) % spec.n_topics;
      out.role_group[i] = static_cast<int>(t);
      by_topic[t].push_back(i);
      neutral.push_back(i);
    }
  }

  std::vector<std::vector<double>> class_dir;
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    class_dir.push_back(detail::random_direction(K, spec.class_signal, rng));
  }
  std::vector<std::vector<double>> topic_dir;
  for (std::size_t t = 0; t < spec.n_topics; ++t) {
    topic_dir.push_back(detail::random_direction(K, spec.topic_signal, rng));
  }
  std::vector<std::vector<double>> domain_dir;
  for (std::size_t d = 0; d < n_dom; ++d) {
    domain_dir.push_back(detail::random_direction(K, spec.domain_signal, rng));
  }
  for (std::size_t c = 0; c < K; ++c) {
    domain_dir.back()[c] += spec.target_class_shift * (class_dir[1][c] - class_dir[0][c]);
  }
  const double noise_sd = spec.noise / std::sqrt(static_cast<double>(K));

  auto draw_vector = [&](std::size_t i, std::size_t d) {
    std::vector<double> v(K);
    const std::vector<double>* centre = nullptr;
    switch (out.roles[i]) {
      case TokenRole::kSentiment: centre = &class_dir[static_cast<std::size_t>(out.role_group[i])]; break;
      case TokenRole::kDomain: centre = &domain_dir[d]; break;
      case TokenRole::kNeutral: centre = &topic_dir[static_cast<std::size_t>(out.role_group[i])]; break;
    }
    for (std::size_t c = 0; c < K; ++c) v[c] = (*centre)[c] + normal(rng, 0.0, noise_sd);
    return v;
  };

  // Embedding rows: row 0 is <unk>, then V rows per domain.
  Vocabulary vocab;
  Tensor matrix(Shape{1 + n_dom * V, K});
  out.rows.assign(n_dom, std::vector<std::size_t>(V));
  if (spec.shift == ShiftMode::kRotation) {
    out.rotation = random_rotation(K, rng);
  } else {
    out.rotation = Tensor::identity(K);
  }
  for (std::size_t d = 0; d < n_dom; ++d) {
    const bool is_target = d + 1 == n_dom;
    for (std::size_t i = 0; i < V; ++i) {
      const std::size_t row = vocab.add(synth_token(d, i));
      out.rows[d][i] = row;
      std::vector<double> v;
      if (spec.shift == ShiftMode::kRotation && d > 0) {
        // Sources share one space; the target is the first source rotated.
        const std::size_t src = out.rows[0][i];
        v.assign(K, 0.0);
        if (is_target) {
          for (std::size_t r = 0; r < K; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < K; ++c) s += out.rotation.at(r, c) * matrix.at(src, c);
            v[r] = s;
          }
        } else {
          for (std::size_t c = 0; c < K; ++c) v[c] = matrix.at(src, c);
        }
      } else {
        v = draw_vector(i, d);
      }
      for (std::size_t c = 0; c < K; ++c) matrix.at(row, c) = v[c];
    }
  }
  out.table = make_table(std::move(vocab), std::move(matrix), "synth_embeddings");

  const detail::ZipfSampler sent_pick(n_sent / spec.n_classes);
  const detail::ZipfSampler topic_pick(neutral.size() / spec.n_topics);
  const detail::ZipfSampler neutral_pick(neutral.size());
  auto make_docs = [&](Corpus& corpus, std::size_t d, int local_domain) {
    const std::string name = "domain" + std::to_string(d);
    for (std::size_t n = 0; n < spec.docs_per_domain; ++n) {
      const int y = static_cast<int>(rng() % spec.n_classes);
      const std::size_t topic = static_cast<std::size_t>(rng() % spec.n_topics);
      const std::size_t n_sentences =
          spec.min_sentences + static_cast<std::size_t>(rng() % (spec.max_sentences - spec.min_sentences + 1));
      Document doc;
      doc.id = name + ":" + std::to_string(n);
      doc.label = y;
      doc.domain = local_domain;
      for (std::size_t s = 0; s < n_sentences; ++s) {
        const std::size_t len = spec.min_sentence_len +
            static_cast<std::size_t>(rng() % (spec.max_sentence_len - spec.min_sentence_len + 1));
        const std::size_t begin = doc.tokens.size();
        for (std::size_t t = 0; t < len; ++t) {
          const double u = uniform(rng, 0.0, 1.0);
          std::size_t token;
          if (u < spec.sentiment_rate) {
            const auto& pool = by_class[static_cast<std::size_t>(y)];
            token = pool[std::min(sent_pick(rng), pool.size() - 1)];
          } else if (u < spec.sentiment_rate + spec.domain_rate) {
            token = domain_tokens[static_cast<std::size_t>(rng() % domain_tokens.size())];
          } else if (uniform(rng, 0.0, 1.0) < spec.topic_focus) {
            const auto& pool = by_topic[topic];
            token = pool[std::min(topic_pick(rng), pool.size() - 1)];
          } else {
            token = neutral[neutral_pick(rng)];
          }
          doc.tokens.push_back(synth_token(d, token));
        }
        doc.sentences.push_back({begin, doc.tokens.size()});
        if (s) doc.text += " / ";
        for (std::size_t t = begin; t < doc.tokens.size(); ++t) {
          if (t > begin) doc.text += ' ';
          doc.text += doc.tokens[t];
        }
      }
      corpus.documents.push_back(std::move(doc));
    }
  };

  const auto classes = [&] {
    std::vector<std::string> names;
    for (std::size_t c = 0; c < spec.n_classes; ++c) names.push_back("class" + std::to_string(c));
    return names;
  }();
  out.source.class_names = out.target.class_names = classes;
  for (std::size_t d = 0; d < spec.n_source_domains; ++d) {
    out.source.domain_names.push_back("domain" + std::to_string(d));
    make_docs(out.source, d, static_cast<int>(d));
  }
  out.target.domain_names = {"domain" + std::to_string(spec.n_source_domains)};
  make_docs(out.target, spec.n_source_domains, 0);
  return out;
}

/// Rows of the table that belong to domain d, as a [V x K] matrix.
inline Tensor domain_vectors(const SynthData& s, std::size_t d) {
  return projected_rows(s.table, s.rows.at(d), nullptr);
}

}  // namespace dann
