#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace dpsim::jsonutil {

// Strict-schema guard: every key must be either required (and present) or
// optional. Unknown keys are configuration errors, not warnings.
inline void check_keys(const nlohmann::json& obj, const std::string& where,
                       std::initializer_list<const char*> required,
                       std::initializer_list<const char*> optional = {}) {
    if (!obj.is_object()) throw std::invalid_argument(where + ": expected an object");
    for (const char* key : required) {
        if (!obj.contains(key)) {
            throw std::invalid_argument(where + ": missing key \"" + key + "\"");
        }
    }
    for (const auto& item : obj.items()) {
        bool known = false;
        for (const char* key : required) known = known || item.key() == key;
        for (const char* key : optional) known = known || item.key() == key;
        if (!known) throw std::invalid_argument(where + ": unknown key \"" + item.key() + "\"");
    }
}

inline double get_number(const nlohmann::json& obj, const char* key, double fallback,
                         const std::string& where) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_number()) throw std::invalid_argument(where + ": \"" + key + "\" must be a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw std::invalid_argument(where + ": \"" + key + "\" must be finite");
    return x;
}

inline std::uint64_t get_uint(const nlohmann::json& obj, const char* key, std::uint64_t fallback,
                              const std::string& where) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_number_unsigned()) {
        throw std::invalid_argument(where + ": \"" + key + "\" must be a non-negative integer");
    }
    return v.get<std::uint64_t>();
}

inline bool get_bool(const nlohmann::json& obj, const char* key, bool fallback,
                     const std::string& where) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_boolean()) throw std::invalid_argument(where + ": \"" + key + "\" must be a boolean");
    return v.get<bool>();
}

inline std::string get_string(const nlohmann::json& obj, const char* key, std::string fallback,
                              const std::string& where) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_string()) throw std::invalid_argument(where + ": \"" + key + "\" must be a string");
    return v.get<std::string>();
}

}  // namespace dpsim::jsonutil
