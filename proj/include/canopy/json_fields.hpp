#pragma once

// Typed lookups into JSON configs. Failures raise ConfigError with the
// dotted path of the offending field, e.g. "scene.height_range[1]".

#include "canopy/errors.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace canopy::cfg {

using nlohmann::json;

inline std::string join(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
}

inline std::string type_name_of(const json& j) { return j.type_name(); }

template <typename T>
bool holds(const json& j) {
    if constexpr (std::is_same_v<T, bool>) return j.is_boolean();
    else if constexpr (std::is_integral_v<T>) return j.is_number_integer();
    else if constexpr (std::is_floating_point_v<T>) return j.is_number();
    else if constexpr (std::is_same_v<T, std::string>) return j.is_string();
    else return true;
}

template <typename T>
const char* expected_name() {
    if constexpr (std::is_same_v<T, bool>) return "boolean";
    else if constexpr (std::is_integral_v<T>) return "integer";
    else if constexpr (std::is_floating_point_v<T>) return "number";
    else if constexpr (std::is_same_v<T, std::string>) return "string";
    else return "value";
}

template <typename T>
T as(const json& j, const std::string& path) {
    if (!holds<T>(j)) throw ConfigError(path + ": expected " + expected_name<T>() + ", got " + type_name_of(j));
    if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (std::is_unsigned_v<T> && j.is_number_integer() && !j.is_number_unsigned() && j.get<long long>() < 0)
            throw ConfigError(path + ": expected a non-negative integer");
    }
    return j.get<T>();
}

inline void require_object(const json& j, const std::string& path) {
    if (!j.is_object()) throw ConfigError((path.empty() ? std::string("config") : path) + ": expected object, got " + type_name_of(j));
}

template <typename T>
T required(const json& obj, const std::string& key, const std::string& path) {
    require_object(obj, path);
    if (!obj.contains(key)) throw ConfigError(join(path, key) + ": required field missing");
    return as<T>(obj.at(key), join(path, key));
}

template <typename T>
T optional_or(const json& obj, const std::string& key, const std::string& path, T fallback) {
    require_object(obj, path);
    if (!obj.contains(key) || obj.at(key).is_null()) return fallback;
    return as<T>(obj.at(key), join(path, key));
}

template <typename T>
std::optional<T> optional_field(const json& obj, const std::string& key, const std::string& path) {
    require_object(obj, path);
    if (!obj.contains(key) || obj.at(key).is_null()) return std::nullopt;
    return as<T>(obj.at(key), join(path, key));
}

template <typename T>
std::vector<T> list_of(const json& arr, const std::string& path) {
    if (!arr.is_array()) throw ConfigError(path + ": expected array, got " + type_name_of(arr));
    std::vector<T> out;
    for (std::size_t i = 0; i < arr.size(); ++i) out.push_back(as<T>(arr[i], path + "[" + std::to_string(i) + "]"));
    return out;
}

/// Rejects keys outside `allowed` so that typos do not pass silently.
inline void only_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
    require_object(obj, path);
    for (const auto& [k, v] : obj.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || k == a;
        if (!ok) throw ConfigError(join(path, k) + ": unknown field");
    }
}

inline json parse(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(what + ": invalid JSON: " + e.what());
    }
}

} // namespace canopy::cfg
