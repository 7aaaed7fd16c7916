#pragma once

// Strict reader for JSON configuration objects. Every accessor records the
// key it consumed; finish() rejects anything left over, so typos surface as
// errors naming the full dotted path instead of being silently ignored.

#include <cstdint>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "robloc/errors.hpp"

namespace robloc {

class JsonReader {
 public:
  JsonReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  std::string path_of(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <class T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    return convert<T>(j_.at(key), path_of(key));
  }

  template <class T>
  T require(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(path_of(key), "required field is missing");
    return convert<T>(j_.at(key), path_of(key));
  }

  /// Nested object; an absent key yields an empty object.
  JsonReader child(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) return JsonReader(empty(), path_of(key));
    return JsonReader(j_.at(key), path_of(key));
  }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(path_of(key), "required field is missing");
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(path_of(it.key()), "unknown field");
  }

  const std::string& path() const { return path_; }

  template <class T>
  static T convert(const nlohmann::json& v, const std::string& path) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(path, "expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(path, "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned()) return v.get<T>();
        if (v.get<std::int64_t>() < 0) throw ConfigError(path, "expected a non-negative integer");
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(path, "expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(path, "expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      if (!v.is_array()) throw ConfigError(path, "expected an array of numbers");
      std::vector<double> out;
      for (std::size_t i = 0; i < v.size(); ++i) out.push_back(convert<double>(v[i], path + "[" + std::to_string(i) + "]"));
      return out;
    } else {
      static_assert(sizeof(T) == 0, "unsupported type");
    }
  }

 private:
  static const nlohmann::json& empty() {
    static const nlohmann::json e = nlohmann::json::object();
    return e;
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace robloc
