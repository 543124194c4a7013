#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "dann/autodiff.hpp"
#include "dann/numeric_io.hpp"

namespace dann {

/// Token <-> index map. Index 0 is reserved for out-of-vocabulary tokens.
class Vocabulary {
 public:
  static constexpr std::size_t kOov = 0;
  static constexpr const char* kOovToken = "<unk>";

  Vocabulary() { tokens_.emplace_back(kOovToken); index_.emplace(kOovToken, kOov); }

  /// Returns the index of `token`, inserting it when new.
  std::size_t add(const std::string& token) {
    auto [it, inserted] = index_.emplace(token, tokens_.size());
    if (inserted) tokens_.push_back(token);
    return it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  /// Index of `token`, or kOov when unknown.
  std::size_t index_of(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kOov : it->second;
  }

  const std::string& token(std::size_t i) const { return tokens_.at(i); }
  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Word vectors for one embedding space. Row 0 is the OOV vector (zero unless
/// the OOV row is made trainable).
struct EmbeddingTable {
  Vocabulary vocab;
  std::size_t dim = 0;
  Parameter matrix;
  bool trainable = false;
  bool oov_trainable = false;

  /// Clears gradient rows that must not move: every known row when the table is
  /// frozen, and the OOV row unless it is trainable.
  void mask_gradient() {
    if (matrix.grad.shape() != matrix.value.shape()) return;
    const std::size_t k = dim;
    for (std::size_t r = 0; r < vocab.size(); ++r) {
      const bool movable = r == Vocabulary::kOov ? oov_trainable : trainable;
      if (!movable) std::fill_n(matrix.grad.data().begin() + r * k, k, 0.0);
    }
  }

  void sync_trainable() { matrix.trainable = trainable || oov_trainable; }

  std::vector<double> vector_of(const std::string& token) const {
    const std::size_t r = vocab.index_of(token);
    return std::vector<double>(matrix.value.data().begin() + r * dim,
                               matrix.value.data().begin() + (r + 1) * dim);
  }
};

/// Builds a table from a vocabulary and a [size x dim] matrix.
inline EmbeddingTable make_table(Vocabulary vocab, Tensor matrix,
                                 std::string name = "embedding") {
  if (matrix.rank() != 2 || matrix.rows() != vocab.size() || matrix.cols() == 0) {
    throw Error("embedding table: matrix " + shape_str(matrix.shape()) +
                " does not match vocabulary of size " + std::to_string(vocab.size()));
  }
  EmbeddingTable t;
  t.dim = matrix.cols();
  t.vocab = std::move(vocab);
  t.matrix = Parameter(std::move(name), std::move(matrix), false);
  return t;
}

/// Parses the word-vector text format: an optional "<count> <dim>" header,
/// then one "token v1 ... vK" line per word. Tokens outside `restrict_to` are
/// skipped; duplicates keep their first occurrence.
inline EmbeddingTable load_embeddings(std::istream& is,
                                      const Vocabulary* restrict_to = nullptr) {
  Vocabulary vocab;
  std::vector<double> rows;
  std::vector<double> oov_row;
  std::optional<std::size_t> header_dim;
  std::size_t dim = 0;
  std::size_t line_no = 0;
  std::string line;
  while (std::getline(is, line)) {
    ++line_no;
    auto fields = split_ws(line);
    if (fields.empty()) continue;
    if (line_no == 1 && fields.size() == 2 && parse_int(fields[0]) &&
        parse_int(fields[1])) {
      header_dim = static_cast<std::size_t>(*parse_int(fields[1]));
      continue;
    }
    if (fields.size() < 2) {
      throw Error("load_embeddings: line " + std::to_string(line_no) +
                  " has no vector values");
    }
    const std::size_t k = fields.size() - 1;
    if (dim == 0) {
      dim = k;
      if (header_dim && *header_dim != dim) {
        throw Error("load_embeddings: line " + std::to_string(line_no) + " has " +
                    std::to_string(k) + " values but the header declares " +
                    std::to_string(*header_dim));
      }
    } else if (k != dim) {
      throw Error("load_embeddings: line " + std::to_string(line_no) + " has " +
                  std::to_string(k) + " values, expected " + std::to_string(dim));
    }
    std::vector<double> vec(k);
    for (std::size_t j = 0; j < k; ++j) {
      auto v = parse_double(fields[j + 1]);
      if (!v) {
        throw Error("load_embeddings: non-numeric field '" +
                    std::string(fields[j + 1]) + "' at line " +
                    std::to_string(line_no));
      }
      vec[j] = *v;
    }
    const std::string token(fields[0]);
    if (token == Vocabulary::kOovToken) {
      if (oov_row.empty()) oov_row = std::move(vec);
      continue;
    }
    if (restrict_to != nullptr && !restrict_to->contains(token)) continue;
    if (vocab.contains(token)) continue;
    vocab.add(token);
    rows.insert(rows.end(), vec.begin(), vec.end());
  }
  if (dim == 0) throw Error("load_embeddings: no vectors found");
  Tensor matrix(Shape{vocab.size(), dim});
  if (!oov_row.empty()) std::copy(oov_row.begin(), oov_row.end(), matrix.data().begin());
  std::copy(rows.begin(), rows.end(), matrix.data().begin() + dim);
  return make_table(std::move(vocab), std::move(matrix));
}

/// Writes every known token (the OOV row only when non-zero) with a header.
inline void save_embeddings(std::ostream& os, const EmbeddingTable& table) {
  const Tensor& m = table.matrix.value;
  const std::size_t k = table.dim;
  bool oov_nonzero = false;
  for (std::size_t j = 0; j < k; ++j) oov_nonzero = oov_nonzero || m[j] != 0.0;
  const std::size_t first = oov_nonzero ? 0 : 1;
  os << (table.vocab.size() - first) << ' ' << k << '\n';
  for (std::size_t r = first; r < table.vocab.size(); ++r) {
    os << table.vocab.token(r);
    for (std::size_t j = 0; j < k; ++j) os << ' ' << format_double(m[r * k + j]);
    os << '\n';
  }
}

/// Learned K x K map into the shared space for one domain. Row vectors are
/// projected as (P v)^T = v^T P^T.
struct ProjectionMatrix {
  int domain = 0;
  Parameter weights;

  static ProjectionMatrix identity(int domain, std::size_t k, bool trainable = true) {
    ProjectionMatrix p;
    p.domain = domain;
    p.weights = Parameter("projection." + std::to_string(domain),
                          Tensor::identity(k), trainable);
    return p;
  }

  std::size_t dim() const { return weights.value.rows(); }
};

inline void save_projection(std::ostream& os, const ProjectionMatrix& p) {
  os << "PROJ " << p.domain << ' ' << p.dim() << '\n';
  write_rows(os, p.weights.value);
}

inline ProjectionMatrix load_projection(std::istream& is) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!split_ws(line).empty()) break;
  }
  auto f = split_ws(line);
  if (f.size() != 3 || f[0] != "PROJ" || !parse_int(f[1]) || !parse_int(f[2]) ||
      *parse_int(f[2]) <= 0) {
    throw Error("load_projection: expected 'PROJ <domain> <K>' at line " +
                std::to_string(line_no));
  }
  const auto k = static_cast<std::size_t>(*parse_int(f[2]));
  ProjectionMatrix p;
  p.domain = static_cast<int>(*parse_int(f[1]));
  p.weights = Parameter("projection." + std::to_string(p.domain),
                        read_rows(is, k, k, line_no, "load_projection"));
  return p;
}

/// Embeds a token-id sequence as a [n x K] matrix on the tape, applying the
/// projection when given.
inline Var embed_ids(Graph& g, const std::vector<std::size_t>& ids,
                     EmbeddingTable& table, ProjectionMatrix* proj = nullptr) {
  if (ids.empty()) throw Error("embed: empty document");
  Var rows = gather_rows(g.param(table.matrix), ids);
  if (proj == nullptr) return rows;
  if (proj->dim() != table.dim) {
    throw Error("embed: projection of size " + std::to_string(proj->dim()) +
                " for embeddings of size " + std::to_string(table.dim));
  }
  return matmul(rows, transpose(g.param(proj->weights)));
}

inline std::vector<std::size_t> lookup_ids(const std::vector<std::string>& tokens,
                                           const Vocabulary& vocab) {
  std::vector<std::size_t> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(vocab.index_of(t));
  return ids;
}

inline Var embed(Graph& g, const std::vector<std::string>& tokens,
                 EmbeddingTable& table, ProjectionMatrix* proj = nullptr) {
  return embed_ids(g, lookup_ids(tokens, table.vocab), table, proj);
}

// ---------------------------------------------------------------------------
// Hausdorff distances between point sets (rows of a matrix)
// ---------------------------------------------------------------------------

/// sup over rows a of A of the Euclidean distance to the nearest row of B.
inline double hausdorff_directed(const Tensor& a, const Tensor& b) {
  if (a.size() == 0 || b.size() == 0 || a.rows() == 0 || b.rows() == 0) {
    throw Error("hausdorff: empty point set");
  }
  if (a.cols() != b.cols()) {
    throw Error("hausdorff: dimension mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
  }
  const std::size_t k = a.cols();
  double worst = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    const double* pa = a.data().data() + i * k;
    for (std::size_t j = 0; j < b.rows() && best > worst; ++j) {
      const double* pb = b.data().data() + j * k;
      double d = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const double diff = pa[c] - pb[c];
        d += diff * diff;
      }
      best = std::min(best, d);
    }
    worst = std::max(worst, best);
  }
  return std::sqrt(worst);
}

inline double hausdorff_undirected(const Tensor& a, const Tensor& b) {
  return std::max(hausdorff_directed(a, b), hausdorff_directed(b, a));
}

/// Rows of the table for the given token indices, projected when `proj` is set.
inline Tensor projected_rows(const EmbeddingTable& table,
                             const std::vector<std::size_t>& indices,
                             const ProjectionMatrix* proj = nullptr) {
  const std::size_t k = table.dim;
  Tensor out(Shape{indices.size(), k});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const double* row = table.matrix.value.data().data() + indices[i] * k;
    for (std::size_t c = 0; c < k; ++c) {
      if (proj == nullptr) {
        out[i * k + c] = row[c];
      } else {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += proj->weights.value.at(c, j) * row[j];
        out[i * k + c] = s;
      }
    }
  }
  return out;
}

/// The `k` most frequent known tokens in `docs` (ties broken by index).
inline std::vector<std::size_t> most_frequent(
    const std::vector<std::vector<std::size_t>>& docs, std::size_t k) {
  std::map<std::size_t, std::size_t> counts;
  for (const auto& d : docs) {
    for (std::size_t id : d) {
      if (id != Vocabulary::kOov) ++counts[id];
    }
  }
  std::vector<std::pair<std::size_t, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& x, const auto& y) { return x.second > y.second; });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ranked.size() && i < k; ++i) out.push_back(ranked[i].first);
  return out;
}

}  // namespace dann
