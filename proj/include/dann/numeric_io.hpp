#pragma once

#include <charconv>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "dann/tensor.hpp"

namespace dann {

/// Shortest decimal form that parses back to the identical double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(std::string_view s) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<long long> parse_int(std::string_view s) {
  long long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

/// Splits on ASCII whitespace, dropping empty fields.
inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  auto is_ws = [](char c) {
    return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\v' || c == '\f';
  };
  while (i < line.size()) {
    while (i < line.size() && is_ws(line[i])) ++i;
    std::size_t j = i;
    while (j < line.size() && !is_ws(line[j])) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

/// Writes the rows of a matrix as whitespace-separated decimals, one row per
/// line.
inline void write_rows(std::ostream& os, const Tensor& t) {
  const std::size_t r = t.rows();
  const std::size_t c = t.cols();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      if (j) os << ' ';
      os << format_double(t.at(i, j));
    }
    os << '\n';
  }
}

/// Reads `rows` lines of `cols` decimals. `line_no` tracks the current line
/// for error messages.
inline Tensor read_rows(std::istream& is, std::size_t rows, std::size_t cols,
                        std::size_t& line_no, std::string_view what) {
  Tensor t(Shape{rows, cols});
  std::string line;
  for (std::size_t i = 0; i < rows; ++i) {
    if (!std::getline(is, line)) {
      throw Error(std::string(what) + ": unexpected end of input at line " +
                  std::to_string(line_no + 1));
    }
    ++line_no;
    auto fields = split_ws(line);
    if (fields.size() != cols) {
      throw Error(std::string(what) + ": line " + std::to_string(line_no) +
                  " has " + std::to_string(fields.size()) + " values, expected " +
                  std::to_string(cols));
    }
    for (std::size_t j = 0; j < cols; ++j) {
      auto v = parse_double(fields[j]);
      if (!v) {
        throw Error(std::string(what) + ": non-numeric field '" +
                    std::string(fields[j]) + "' at line " + std::to_string(line_no));
      }
      t.at(i, j) = *v;
    }
  }
  return t;
}

}  // namespace dann
