#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

#include "segreg/errors.hpp"

namespace segreg {

using Json = nlohmann::json;
// Insertion-ordered so echoed documents keep a stable, readable key order.
using OrderedJson = nlohmann::ordered_json;

namespace detail {

// Rejects any key not in `allowed`; `where` prefixes the error path.
inline void require_known_keys(const Json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ValidationError(where + ": unknown field '" + key + "'");
    }
  }
}

// Typed read of an optional field; a type mismatch is reported with the full path.
template <class V>
void read_field(const Json& j, std::string_view key, V& out, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(where + "." + std::string(key) + ": wrong type");
  }
}

template <class V>
void read_required(const Json& j, std::string_view key, V& out, const std::string& where) {
  if (!j.contains(key)) throw ValidationError(where + "." + std::string(key) + ": missing required field");
  read_field(j, key, out, where);
}

inline Json parse_json(const std::string& text, const std::string& where) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(where + ": malformed JSON: " + e.what());
  }
}

}  // namespace detail

}  // namespace segreg
