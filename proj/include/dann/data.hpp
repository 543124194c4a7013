#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dann/random.hpp"
#include "dann/tensor.hpp"
#include "dann/text.hpp"

namespace dann {

enum class Split { kNone, kTrain, kTest };

struct Document {
  std::string id;
  std::vector<std::string> tokens;
  std::vector<SentenceRange> sentences;
  std::optional<int> label;
  int domain = 0;
  Split split = Split::kNone;
  std::string text;
};

/// Builds a document from raw text. Returns nullopt when tokenization is
/// empty.
inline std::optional<Document> make_document(std::string id, std::string text,
                                             std::optional<int> label, int domain) {
  Tokenized tk = tokenize(text);
  if (tk.tokens.empty()) return std::nullopt;
  Document d;
  d.id = std::move(id);
  d.tokens = std::move(tk.tokens);
  d.sentences = std::move(tk.sentences);
  d.label = label;
  d.domain = domain;
  d.text = std::move(text);
  return d;
}

/// Checks that sentence ranges partition the token list.
inline bool sentences_partition(const Document& d) {
  std::size_t at = 0;
  for (const auto& s : d.sentences) {
    if (s.begin != at || s.end <= s.begin) return false;
    at = s.end;
  }
  return at == d.tokens.size();
}

struct Corpus {
  std::vector<Document> documents;
  std::vector<std::string> class_names;
  std::vector<std::string> domain_names;

  std::size_t size() const noexcept { return documents.size(); }

  int domain_index(const std::string& name) const {
    auto it = std::find(domain_names.begin(), domain_names.end(), name);
    return it == domain_names.end() ? -1 : static_cast<int>(it - domain_names.begin());
  }

  void validate() const {
    for (const auto& d : documents) {
      if (d.domain < 0 || static_cast<std::size_t>(d.domain) >= domain_names.size()) {
        throw Error("corpus: document " + d.id + " has domain " +
                    std::to_string(d.domain) + " outside declared range");
      }
      if (d.label && (*d.label < 0 ||
                      static_cast<std::size_t>(*d.label) >= class_names.size())) {
        throw Error("corpus: document " + d.id + " has label " +
                    std::to_string(*d.label) + " outside declared range");
      }
      if (!sentences_partition(d)) {
        throw Error("corpus: document " + d.id + " has inconsistent sentence ranges");
      }
    }
  }
};

enum class LabelMode { kRating, kIndex, kName };

struct FieldMapping {
  std::string text_field = "text";
  std::string label_field = "overall";
  std::string domain_field = "category";
  std::string id_field;          // empty: "<prefix>:<line>"
  std::string fixed_domain;      // used when domain_field is empty
  LabelMode label_mode = LabelMode::kRating;
  RatingScheme scheme = RatingScheme::kAmazonBinary;
  std::vector<std::string> class_names;   // kIndex / kName
  std::vector<std::string> domain_names;  // optional closed set
  bool label_required = true;
  bool strict = false;
  std::string id_prefix = "doc";

  std::vector<std::string> resolved_classes() const {
    if (label_mode == LabelMode::kRating) return dann::class_names(scheme);
    return class_names;
  }
};

struct LoadReport {
  std::size_t lines = 0;
  std::size_t loaded = 0;
  std::size_t excluded = 0;   // dropped by the rating scheme or empty text
  std::size_t malformed = 0;
  std::vector<std::string> errors;  // first few, with line numbers
};

namespace detail {

inline std::optional<int> rating_value(const nlohmann::json& v) {
  if (v.is_number_integer()) return v.get<int>();
  if (v.is_number_float()) {
    const double x = v.get<double>();
    if (std::floor(x) == x) return static_cast<int>(x);
    return std::nullopt;
  }
  if (v.is_string()) {
    try {
      std::size_t used = 0;
      const double x = std::stod(v.get<std::string>(), &used);
      if (used == v.get<std::string>().size() && std::floor(x) == x) {
        return static_cast<int>(x);
      }
    } catch (const std::exception&) {
    }
  }
  return std::nullopt;
}

}  // namespace detail

/// Parses JSON Lines from a stream. Lines that are not objects or lack a
/// mandatory field are counted as malformed; in strict mode any malformed
/// line makes the call throw.
inline Corpus parse_jsonl(std::istream& in, const FieldMapping& map,
                          LoadReport* report = nullptr) {
  Corpus corpus;
  corpus.class_names = map.resolved_classes();
  if (corpus.class_names.empty()) {
    throw ConfigError("load_jsonl: no class names for label mode");
  }
  corpus.domain_names = map.domain_names;
  if (map.domain_field.empty()) {
    if (map.fixed_domain.empty()) {
      throw ConfigError("load_jsonl: need a domain field or a fixed domain name");
    }
    if (corpus.domain_index(map.fixed_domain) < 0) {
      corpus.domain_names.push_back(map.fixed_domain);
    }
  }
  const bool closed_domains = !map.domain_names.empty();

  LoadReport local;
  LoadReport& rep = report ? *report : local;
  rep = LoadReport{};
  auto bad = [&](std::size_t line_no, const std::string& why) {
    ++rep.malformed;
    if (rep.errors.size() < 20) {
      rep.errors.push_back("line " + std::to_string(line_no) + ": " + why);
    }
  };

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++rep.lines;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      bad(line_no, "invalid JSON");
      continue;
    }
    if (!obj.is_object()) {
      bad(line_no, "not a JSON object");
      continue;
    }
    auto text_it = obj.find(map.text_field);
    if (text_it == obj.end() || !text_it->is_string()) {
      bad(line_no, "missing string field '" + map.text_field + "'");
      continue;
    }

    int domain = 0;
    if (map.domain_field.empty()) {
      domain = corpus.domain_index(map.fixed_domain);
    } else {
      auto it = obj.find(map.domain_field);
      if (it == obj.end() || !it->is_string()) {
        bad(line_no, "missing string field '" + map.domain_field + "'");
        continue;
      }
      const std::string name = it->get<std::string>();
      domain = corpus.domain_index(name);
      if (domain < 0) {
        if (closed_domains) {
          bad(line_no, "unknown domain '" + name + "'");
          continue;
        }
        corpus.domain_names.push_back(name);
        domain = static_cast<int>(corpus.domain_names.size() - 1);
      }
    }

    std::optional<int> label;
    bool drop = false;
    auto label_it = obj.find(map.label_field);
    if (label_it == obj.end() || label_it->is_null()) {
      if (map.label_required) {
        bad(line_no, "missing field '" + map.label_field + "'");
        continue;
      }
    } else if (map.label_mode == LabelMode::kRating) {
      auto r = detail::rating_value(*label_it);
      if (!r || *r < 1 || *r > 5) {
        bad(line_no, "rating is not an integer in 1..5");
        continue;
      }
      label = map_rating(*r, map.scheme);
      drop = !label.has_value();
    } else if (map.label_mode == LabelMode::kIndex) {
      if (!label_it->is_number_integer()) {
        bad(line_no, "label is not an integer");
        continue;
      }
      const int v = label_it->get<int>();
      if (v < 0 || static_cast<std::size_t>(v) >= corpus.class_names.size()) {
        bad(line_no, "label index out of range");
        continue;
      }
      label = v;
    } else {
      if (!label_it->is_string()) {
        bad(line_no, "label is not a string");
        continue;
      }
      const std::string name = label_it->get<std::string>();
      auto it = std::find(corpus.class_names.begin(), corpus.class_names.end(), name);
      if (it == corpus.class_names.end()) {
        bad(line_no, "unknown class '" + name + "'");
        continue;
      }
      label = static_cast<int>(it - corpus.class_names.begin());
    }
    if (drop) {
      ++rep.excluded;
      continue;
    }

    std::string id = map.id_prefix + ":" + std::to_string(line_no);
    if (!map.id_field.empty()) {
      auto it = obj.find(map.id_field);
      if (it == obj.end()) {
        bad(line_no, "missing field '" + map.id_field + "'");
        continue;
      }
      id = it->is_string() ? it->get<std::string>() : it->dump();
    }
    auto doc = make_document(std::move(id), text_it->get<std::string>(), label, domain);
    if (!doc) {
      ++rep.excluded;
      continue;
    }
    corpus.documents.push_back(std::move(*doc));
    ++rep.loaded;
  }

  if (map.strict && rep.malformed > 0) {
    std::string msg = "load_jsonl: " + std::to_string(rep.malformed) + " malformed line(s)";
    for (const auto& e : rep.errors) msg += "\n  " + e;
    throw Error(msg);
  }
  return corpus;
}

inline Corpus load_jsonl(const std::string& path, const FieldMapping& map,
                         LoadReport* report = nullptr) {
  std::ifstream in(path);
  if (!in) throw Error("load_jsonl: cannot open " + path);
  return parse_jsonl(in, map, report);
}

struct SamplingPlan {
  std::size_t n_target = 500;
  double source_train_fraction = 0.8;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(source_train_fraction > 0.0 && source_train_fraction < 1.0)) {
      throw ConfigError("sampling plan: source train fraction must lie in (0, 1)");
    }
  }
};

/// Splits ready for training. Domain indices are remapped so that source
/// domains come first and the target domain is last.
struct PreparedData {
  std::vector<std::string> class_names;
  std::vector<std::string> domain_names;
  bool zero_shot = false;

  std::vector<Document> source_train;
  std::vector<Document> source_test;
  std::vector<Document> target_train;
  std::vector<Document> target_test;
  /// Every target document with its class label removed.
  std::vector<Document> target_unlabeled;

  int target_domain() const { return static_cast<int>(domain_names.size()) - 1; }
  std::size_t n_domains() const { return domain_names.size(); }
  std::size_t n_classes() const { return class_names.size(); }
};

namespace detail {

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  // Fisher-Yates with our own draws so the order does not depend on the
  // standard library's shuffle implementation.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

}  // namespace detail

/// Source domains from `sources`, target from the single-domain corpus
/// `target`. Class names must agree.
inline PreparedData make_splits(const std::vector<const Corpus*>& sources,
                                const Corpus& target, const SamplingPlan& plan,
                                bool zero_shot) {
  plan.validate();
  if (sources.empty()) throw ConfigError("make_splits: no source corpus");
  if (target.domain_names.size() != 1) {
    throw ConfigError("make_splits: target corpus must hold exactly one domain");
  }
  PreparedData out;
  out.class_names = target.class_names;
  out.zero_shot = zero_shot;
  const std::size_t n_tgt = zero_shot ? 0 : plan.n_target;
  if (n_tgt > target.size()) {
    throw ConfigError("make_splits: n_target " + std::to_string(n_tgt) +
                      " exceeds target corpus size " + std::to_string(target.size()));
  }

  Rng rng = make_rng(plan.seed, Stream::kSampling);
  std::map<std::string, int> remap;
  for (const Corpus* c : sources) {
    if (c->class_names != out.class_names) {
      throw ConfigError("make_splits: source and target class names differ");
    }
    for (const auto& name : c->domain_names) {
      if (name == target.domain_names[0]) {
        throw ConfigError("make_splits: domain '" + name + "' is both source and target");
      }
      if (remap.emplace(name, static_cast<int>(out.domain_names.size())).second) {
        out.domain_names.push_back(name);
      }
    }
  }
  const int tgt_domain = static_cast<int>(out.domain_names.size());
  out.domain_names.push_back(target.domain_names[0]);

  // Per (domain, class) groups, shuffled, first share goes to train.
  std::map<std::pair<int, int>, std::vector<Document>> groups;
  for (const Corpus* c : sources) {
    for (const auto& d : c->documents) {
      Document copy = d;
      copy.domain = remap.at(c->domain_names.at(static_cast<std::size_t>(d.domain)));
      groups[{copy.domain, d.label.value_or(-1)}].push_back(std::move(copy));
    }
  }
  for (auto& [key, docs] : groups) {
    const auto order = detail::shuffled_indices(docs.size(), rng);
    const auto n_train = static_cast<std::size_t>(
        std::llround(plan.source_train_fraction * static_cast<double>(docs.size())));
    std::vector<bool> is_train(docs.size(), false);
    for (std::size_t i = 0; i < n_train; ++i) is_train[order[i]] = true;
    for (std::size_t i = 0; i < docs.size(); ++i) {
      docs[i].split = is_train[i] ? Split::kTrain : Split::kTest;
      (is_train[i] ? out.source_train : out.source_test).push_back(docs[i]);
    }
  }

  const auto order = detail::shuffled_indices(target.size(), rng);
  std::vector<bool> is_train(target.size(), false);
  for (std::size_t i = 0; i < n_tgt; ++i) is_train[order[i]] = true;
  for (std::size_t i = 0; i < target.size(); ++i) {
    Document d = target.documents[i];
    d.domain = tgt_domain;
    Document unlabeled = d;
    unlabeled.label.reset();
    unlabeled.split = Split::kNone;
    out.target_unlabeled.push_back(std::move(unlabeled));
    d.split = is_train[i] ? Split::kTrain : Split::kTest;
    (is_train[i] ? out.target_train : out.target_test).push_back(std::move(d));
  }
  return out;
}

/// Splits one multi-domain corpus: `target_domain` becomes the target and
/// every other domain a source.
inline PreparedData make_splits(const Corpus& corpus, const std::string& target_domain,
                                const SamplingPlan& plan, bool zero_shot) {
  const int t = corpus.domain_index(target_domain);
  if (t < 0) throw ConfigError("make_splits: unknown target domain '" + target_domain + "'");
  Corpus src;
  Corpus tgt;
  src.class_names = tgt.class_names = corpus.class_names;
  tgt.domain_names = {target_domain};
  std::vector<int> remap(corpus.domain_names.size(), -1);
  for (std::size_t i = 0; i < corpus.domain_names.size(); ++i) {
    if (static_cast<int>(i) == t) continue;
    remap[i] = static_cast<int>(src.domain_names.size());
    src.domain_names.push_back(corpus.domain_names[i]);
  }
  for (const auto& d : corpus.documents) {
    Document copy = d;
    if (d.domain == t) {
      copy.domain = 0;
      tgt.documents.push_back(std::move(copy));
    } else {
      copy.domain = remap[static_cast<std::size_t>(d.domain)];
      src.documents.push_back(std::move(copy));
    }
  }
  if (src.domain_names.empty()) throw ConfigError("make_splits: no source domain left");
  return make_splits({&src}, tgt, plan, zero_shot);
}

/// One shuffled pass over n items; the last batch may be short.
inline std::vector<std::vector<std::size_t>> batch_iter(std::size_t n,
                                                        std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw ConfigError("batch_iter: batch size must be >= 1");
  const auto order = detail::shuffled_indices(n, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

/// Endless stream of full batches over n items, reshuffling at each wrap.
class BatchCycler {
 public:
  BatchCycler(std::size_t n, std::size_t batch_size, Rng rng)
      : n_(n), batch_(batch_size), rng_(std::move(rng)) {
    if (batch_ == 0) throw ConfigError("batch size must be >= 1");
  }

  bool empty() const noexcept { return n_ == 0; }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    if (n_ == 0) return out;
    const std::size_t want = std::min(batch_, n_);
    while (out.size() < want) {
      if (pos_ >= order_.size()) {
        order_ = detail::shuffled_indices(n_, rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::size_t n_;
  std::size_t batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// Appends zero rows up to n, or drops rows past n.
inline Tensor pad_rows(const Tensor& x, std::size_t n) {
  const std::size_t k = x.cols();
  Tensor out(Shape{n, k});
  const std::size_t keep = std::min(n, x.rows());
  std::copy_n(x.values().begin(), keep * k, out.data().begin());
  return out;
}

struct SplitStats {
  std::size_t documents = 0;
  std::vector<std::size_t> per_class;
  double avg_tokens = 0.0;
  std::size_t unique_tokens = 0;
};

inline SplitStats split_stats(const std::vector<Document>& docs, std::size_t n_classes) {
  SplitStats s;
  s.per_class.assign(n_classes, 0);
  std::set<std::string> uniq;
  std::size_t tokens = 0;
  for (const auto& d : docs) {
    ++s.documents;
    if (d.label) ++s.per_class.at(static_cast<std::size_t>(*d.label));
    tokens += d.tokens.size();
    uniq.insert(d.tokens.begin(), d.tokens.end());
  }
  s.avg_tokens = docs.empty() ? 0.0 : static_cast<double>(tokens) / static_cast<double>(docs.size());
  s.unique_tokens = uniq.size();
  return s;
}

/// Document ids per split plus corpus statistics.
inline nlohmann::json manifest_json(const PreparedData& p, const SamplingPlan& plan) {
  using nlohmann::json;
  auto ids = [](const std::vector<Document>& docs) {
    json a = json::array();
    for (const auto& d : docs) a.push_back(d.id);
    return a;
  };
  auto stats = [&](const std::vector<Document>& docs) {
    SplitStats s = split_stats(docs, p.n_classes());
    json per_class = json::object();
    for (std::size_t c = 0; c < p.n_classes(); ++c) per_class[p.class_names[c]] = s.per_class[c];
    return json{{"documents", s.documents},
                {"per_class", per_class},
                {"avg_tokens", s.avg_tokens},
                {"unique_tokens", s.unique_tokens}};
  };
  json per_domain = json::object();
  for (std::size_t d = 0; d < p.n_domains(); ++d) {
    std::vector<Document> docs;
    for (const auto* split : {&p.source_train, &p.source_test, &p.target_train, &p.target_test}) {
      for (const auto& doc : *split) {
        if (doc.domain == static_cast<int>(d)) docs.push_back(doc);
      }
    }
    per_domain[p.domain_names[d]] = stats(docs);
  }
  return json{{"seed", plan.seed},
              {"n_target", plan.n_target},
              {"source_train_fraction", plan.source_train_fraction},
              {"zero_shot", p.zero_shot},
              {"classes", p.class_names},
              {"domains", p.domain_names},
              {"target_domain", p.domain_names.back()},
              {"splits",
               {{"source_train", ids(p.source_train)},
                {"source_test", ids(p.source_test)},
                {"target_train", ids(p.target_train)},
                {"target_test", ids(p.target_test)}}},
              {"statistics", per_domain}};
}

}  // namespace dann
