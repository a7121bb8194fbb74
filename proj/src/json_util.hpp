#pragma once

#include <initializer_list>
#include <string>

#include <nlohmann/json.hpp>

#include "dsmd/errors.hpp"

namespace dsmd::jsonutil {

inline void require_object(const nlohmann::json& j, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected a JSON object");
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known,
                           const char* what) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError(std::string(what) + ": unknown key '" + key + "'");
  }
}

/// Reads j[key] into `out` if present; wrong JSON types raise ConfigError.
template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    if constexpr (std::is_unsigned_v<T>) {
      if (!it->is_number_unsigned()) throw ConfigError("");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) throw ConfigError("");
    }
    out = it->get<T>();
  } catch (const std::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace dsmd::jsonutil
