#pragma once

// Line-oriented CSV helpers shared by the text readers.

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "robloc/errors.hpp"

namespace robloc::csv {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

class LineSource {
 public:
  LineSource(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  bool next(std::string& line) {
    if (!std::getline(in_, line)) return false;
    ++number_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  }

  std::size_t number() const { return number_; }
  [[noreturn]] void fail(const std::string& msg, std::size_t line = 0) const {
    throw ParseError(source_, line ? line : number_, msg);
  }

 private:
  std::istream& in_;
  std::string source_;
  std::size_t number_ = 0;
};

// Maps the header row onto the expected column set.
inline std::vector<std::size_t> column_order(const std::string& header, const std::vector<std::string>& expected,
                                      const LineSource& src) {
  const auto names = split_csv(header);
  std::map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const std::string name(names[i]);
    if (std::find(expected.begin(), expected.end(), name) == expected.end())
      src.fail("schema error: unknown column '" + name + "'");
    if (!position.emplace(name, i).second) src.fail("schema error: duplicate column '" + name + "'");
  }
  std::vector<std::size_t> order;
  for (const auto& e : expected) {
    const auto it = position.find(e);
    if (it == position.end()) src.fail("schema error: missing column '" + e + "'");
    order.push_back(it->second);
  }
  return order;
}

inline double parse_double(std::string_view s, const char* column, const LineSource& src) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v))
    src.fail(fmt::format("column '{}': invalid number '{}'", column, s));
  return v;
}

template <class Int>
Int parse_int(std::string_view s, const char* column, const LineSource& src) {
  Int v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) src.fail(fmt::format("column '{}': invalid integer '{}'", column, s));
  return v;
}

}  // namespace robloc::csv
