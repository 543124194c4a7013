#pragma once

#include <cctype>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dann/tensor.hpp"

namespace dann {

/// Half-open token range [begin, end) forming one sentence.
struct SentenceRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - begin; }
  friend bool operator==(const SentenceRange&, const SentenceRange&) = default;
};

struct Tokenized {
  std::vector<std::string> tokens;
  std::vector<SentenceRange> sentences;
};

namespace detail {

inline bool is_ascii_punct(char c) {
  return static_cast<unsigned char>(c) < 0x80 &&
         std::ispunct(static_cast<unsigned char>(c));
}

inline bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

inline bool is_terminator(char c) { return c == '.' || c == '!' || c == '?'; }

}  // namespace detail

/// Lowercases ASCII, splits on whitespace and peels leading/trailing
/// punctuation off each chunk as one-character tokens. A chunk ending in
/// '.', '!' or '?' that is followed by more text closes a sentence.
inline Tokenized tokenize(std::string_view text) {
  Tokenized out;
  std::size_t sentence_begin = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && detail::is_space(text[i])) ++i;
    if (i >= text.size()) break;
    std::size_t j = i;
    while (j < text.size() && !detail::is_space(text[j])) ++j;
    std::string_view chunk = text.substr(i, j - i);

    std::size_t lead = 0;
    while (lead < chunk.size() && detail::is_ascii_punct(chunk[lead])) ++lead;
    std::size_t trail = chunk.size();
    while (trail > lead && detail::is_ascii_punct(chunk[trail - 1])) --trail;

    for (std::size_t k = 0; k < lead; ++k) out.tokens.emplace_back(1, chunk[k]);
    if (trail > lead) {
      std::string word(chunk.substr(lead, trail - lead));
      for (char& c : word) {
        if (static_cast<unsigned char>(c) < 0x80) {
          c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        }
      }
      out.tokens.push_back(std::move(word));
    }
    for (std::size_t k = trail; k < chunk.size(); ++k) {
      if (k >= lead) out.tokens.emplace_back(1, chunk[k]);
    }

    const bool ends_sentence = detail::is_terminator(chunk.back());
    i = j;
    std::size_t next = i;
    while (next < text.size() && detail::is_space(text[next])) ++next;
    if (ends_sentence && next > j && next < text.size() &&
        out.tokens.size() > sentence_begin) {
      out.sentences.push_back({sentence_begin, out.tokens.size()});
      sentence_begin = out.tokens.size();
    }
  }
  if (out.tokens.size() > sentence_begin) {
    out.sentences.push_back({sentence_begin, out.tokens.size()});
  }
  return out;
}

enum class RatingScheme {
  kAmazonBinary,  // 1-2 negative, 4-5 positive, 3 dropped
  kYelp3Class,    // 1-2 negative, 3 neutral, 4-5 positive
};

inline std::optional<RatingScheme> parse_rating_scheme(std::string_view s) {
  if (s == "amazon-binary") return RatingScheme::kAmazonBinary;
  if (s == "yelp-3class") return RatingScheme::kYelp3Class;
  return std::nullopt;
}

inline std::vector<std::string> class_names(RatingScheme scheme) {
  switch (scheme) {
    case RatingScheme::kAmazonBinary: return {"negative", "positive"};
    case RatingScheme::kYelp3Class: return {"negative", "neutral", "positive"};
  }
  return {};
}

/// Class index for a 1-5 star rating, or nullopt when the scheme drops it.
inline std::optional<int> map_rating(int rating, RatingScheme scheme) {
  if (rating < 1 || rating > 5) {
    throw Error("map_rating: rating " + std::to_string(rating) + " outside 1..5");
  }
  switch (scheme) {
    case RatingScheme::kAmazonBinary:
      if (rating <= 2) return 0;
      if (rating >= 4) return 1;
      return std::nullopt;
    case RatingScheme::kYelp3Class:
      if (rating <= 2) return 0;
      if (rating == 3) return 1;
      return 2;
  }
  return std::nullopt;
}

}  // namespace dann
