#pragma once

#include <cmath>
#include <compare>
#include <cstdio>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "error.hpp"

namespace repalign {

/// Enumerator order is the canonical report order.
enum class TransformFamily { identity, noise, scale, rotation };

constexpr std::string_view to_string(TransformFamily family) {
    switch (family) {
        case TransformFamily::identity: return "identity";
        case TransformFamily::noise: return "noise";
        case TransformFamily::scale: return "scale";
        case TransformFamily::rotation: return "rotation";
    }
    return "identity";
}

inline TransformFamily parse_family(std::string_view name) {
    if (name == "identity") return TransformFamily::identity;
    if (name == "noise") return TransformFamily::noise;
    if (name == "scale") return TransformFamily::scale;
    if (name == "rotation") return TransformFamily::rotation;
    throw Error(ErrorCode::ParseError, "unknown transform family '" + std::string(name) + "'");
}

/// One semantic-preserving perturbation. `parameter` is sigma for noise, the
/// scale factor for scale, and degrees for rotation.
struct TransformCondition {
    TransformFamily family = TransformFamily::identity;
    double parameter = 0.0;
    std::uint64_t seed = 0;

    auto operator<=>(const TransformCondition&) const = default;
    bool operator==(const TransformCondition&) const = default;
};

/// Rotation angle normalized to [0, 360). Throws unless a multiple of 90.
inline int quarter_turn_degrees(double degrees) {
    require(std::isfinite(degrees) && std::fmod(degrees, 90.0) == 0.0, ErrorCode::InvalidArgument,
            "rotation angle must be a multiple of 90 degrees");
    const long turns = static_cast<long>(degrees / 90.0);
    return static_cast<int>(((turns % 4) + 4) % 4) * 90;
}

inline void validate(const TransformCondition& c) {
    switch (c.family) {
        case TransformFamily::identity:
            break;
        case TransformFamily::noise:
            require(std::isfinite(c.parameter) && c.parameter >= 0.0, ErrorCode::InvalidArgument,
                    "noise sigma must be finite and >= 0");
            break;
        case TransformFamily::scale:
            require(std::isfinite(c.parameter) && c.parameter > 0.0, ErrorCode::InvalidArgument,
                    "scale factor must be finite and > 0");
            break;
        case TransformFamily::rotation:
            quarter_turn_degrees(c.parameter);
            break;
    }
}

/// True for conditions that leave the image untouched (sigma 0, scale 1,
/// rotation 0 mod 360, or the identity family itself).
inline bool is_identity_equivalent(const TransformCondition& c) {
    switch (c.family) {
        case TransformFamily::identity: return true;
        case TransformFamily::noise: return c.parameter == 0.0;
        case TransformFamily::scale: return c.parameter == 1.0;
        case TransformFamily::rotation: return quarter_turn_degrees(c.parameter) == 0;
    }
    return false;
}

inline std::string label(const TransformCondition& c) {
    if (c.family == TransformFamily::identity) {
        return "identity";
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s:%g", std::string(to_string(c.family)).c_str(), c.parameter);
    return buf;
}

inline void to_json(nlohmann::json& j, const TransformCondition& c) {
    j = nlohmann::json{{"family", std::string(to_string(c.family))},
                       {"parameter", c.parameter},
                       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TransformCondition& c) {
    try {
        c.family = parse_family(j.at("family").get<std::string>());
        c.parameter = j.at("parameter").get<double>();
        c.seed = j.value("seed", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ParseError, std::string("transform condition: ") + e.what());
    }
    validate(c);
}

/// The evaluation suite: one identity baseline followed by noise
/// {0.05, 0.1, 0.15, 0.2}, scale {0.25, 0.5, 0.75, 1.0} and rotation
/// {0, 90, 180, 270}. Condition i gets seed base_seed + i.
inline std::vector<TransformCondition> default_suite(std::uint64_t base_seed = 0) {
    std::vector<TransformCondition> suite;
    suite.push_back({TransformFamily::identity, 0.0, base_seed});
    for (double sigma : {0.05, 0.1, 0.15, 0.2}) {
        suite.push_back({TransformFamily::noise, sigma, base_seed + suite.size()});
    }
    for (double s : {0.25, 0.5, 0.75, 1.0}) {
        suite.push_back({TransformFamily::scale, s, base_seed + suite.size()});
    }
    for (double theta : {0.0, 90.0, 180.0, 270.0}) {
        suite.push_back({TransformFamily::rotation, theta, base_seed + suite.size()});
    }
    return suite;
}

inline nlohmann::json suite_to_json(const std::vector<TransformCondition>& suite) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& c : suite) {
        j.push_back(c);
    }
    return j;
}

inline std::vector<TransformCondition> suite_from_json(const nlohmann::json& j) {
    require(j.is_array(), ErrorCode::ParseError, "suite must be a JSON array");
    std::vector<TransformCondition> suite;
    for (const auto& item : j) {
        suite.push_back(item.get<TransformCondition>());
    }
    return suite;
}

}  // namespace repalign
