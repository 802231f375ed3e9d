#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "equivariance.hpp"
#include "error.hpp"
#include "feature_store.hpp"
#include "kernel_align.hpp"
#include "parallel.hpp"

namespace repalign {

inline constexpr const char* kToolVersion = "repalign 1.0.0";

struct LayerEntry {
    std::size_t layer_index = 0;  // position in the input list
    std::int64_t layer_id = 0;    // label carried by the feature file
    std::optional<CknnaScore> score;

    bool operator==(const LayerEntry&) const = default;
};

struct LayerPeak {
    std::size_t layer_index = 0;
    double value = 0.0;

    bool operator==(const LayerPeak&) const = default;
};

struct LayerProfile {
    std::vector<LayerEntry> entries;
    std::optional<double> reference_level;
    std::optional<LayerPeak> peak;
    std::optional<double> mean_score;
    std::vector<std::string> warnings;

    bool operator==(const LayerProfile&) const = default;
};

namespace detail {

inline void summarize(LayerProfile& profile) {
    double sum = 0.0;
    std::size_t scored = 0;
    profile.peak.reset();
    for (const auto& e : profile.entries) {
        if (!e.score) continue;
        sum += e.score->value;
        ++scored;
        if (!profile.peak || e.score->value > profile.peak->value) {
            profile.peak = LayerPeak{e.layer_index, e.score->value};
        }
    }
    profile.mean_score = scored > 0 ? std::optional<double>(sum / static_cast<double>(scored)) : std::nullopt;
}

}  // namespace detail

/// CKNNA of every layer against one fixed reference. Degenerate layers stay in
/// the profile without a score and do not count toward peak or mean.
inline LayerProfile layer_profile(std::span<const FeatureSet> layers, const FeatureSet& reference,
                                  std::size_t k = kDefaultK, std::optional<double> reference_level = std::nullopt) {
    require(!layers.empty(), ErrorCode::EmptyLayerList, "no layers given");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        require(layers[i].n() == reference.n(), ErrorCode::ShapeMismatch,
                "layer " + std::to_string(i) + " has " + std::to_string(layers[i].n()) +
                    " samples, reference has " + std::to_string(reference.n()));
    }
    const KernelMatrix ref_kernel = gram(reference);

    LayerProfile profile;
    profile.reference_level = reference_level;
    profile.entries.resize(layers.size());
    parallel_for(layers.size(), [&](std::size_t i) {
        LayerEntry& entry = profile.entries[i];
        entry.layer_index = i;
        entry.layer_id = layers[i].meta().layer_id;
        try {
            entry.score = cknna(gram(layers[i]), ref_kernel, k);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::DegenerateMask) throw;
        }
    });
    for (const auto& e : profile.entries) {
        if (!e.score) {
            profile.warnings.push_back("degenerate mask at layer " + std::to_string(e.layer_index) +
                                       "; excluded from peak and mean");
        } else if (e.score->value < 0.0) {
            profile.warnings.push_back("negative CKNNA at layer " + std::to_string(e.layer_index));
        }
    }
    detail::summarize(profile);
    return profile;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct InputDigest {
    std::string path;
    std::string sha256;

    bool operator==(const InputDigest&) const = default;
};

struct Preprocessing {
    bool normalize = true;
    OutlierPolicy::Method outlier = OutlierPolicy::Method::norm_mad;
    double mad_multiplier = 5.0;
    std::string pool = "mean";
    std::size_t n_input = 0;
    std::size_t n_kept = 0;

    bool operator==(const Preprocessing&) const = default;
};

using ReportResults = std::variant<CknnaScore, SeCknnaResult, LayerProfile>;

struct AlignmentReport {
    std::string tool_version = kToolVersion;
    std::vector<InputDigest> inputs;
    std::size_t k = kDefaultK;
    Preprocessing preprocessing;
    ReportResults results;
    std::vector<std::string> warnings;

    bool operator==(const AlignmentReport&) const = default;
};

inline std::string_view report_kind(const ReportResults& r) {
    switch (r.index()) {
        case 0: return "cknna";
        case 1: return "se_cknna";
        default: return "layer_profile";
    }
}

/// Builds a report, hoisting result-level warnings to the report so they live
/// in exactly one place.
inline AlignmentReport make_report(ReportResults results, std::size_t k, Preprocessing pre,
                                   std::vector<InputDigest> inputs = {}) {
    AlignmentReport report;
    report.k = k;
    report.preprocessing = std::move(pre);
    report.inputs = std::move(inputs);
    std::visit(
        [&](auto& r) {
            using T = std::decay_t<decltype(r)>;
            if constexpr (std::is_same_v<T, CknnaScore>) {
                if (r.value < 0.0) report.warnings.push_back("negative CKNNA value");
            } else {
                report.warnings.insert(report.warnings.end(), r.warnings.begin(), r.warnings.end());
                r.warnings.clear();
            }
        },
        results);
    report.results = std::move(results);
    return report;
}

/// Rounds to 9 significant digits; identical runs then print identical bytes.
inline double canonical(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::strtod(buf, nullptr);
}

inline std::string format_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

namespace detail {

using nlohmann::json;

inline json opt_json(const std::optional<double>& v) { return v ? json(canonical(*v)) : json(nullptr); }

inline std::optional<double> opt_double(const json& j, const char* key) {
    if (auto it = j.find(key); it != j.end() && !it->is_null()) {
        return it->get<double>();
    }
    return std::nullopt;
}

inline json score_json(const CknnaScore& s) {
    return json{{"value", canonical(s.value)},
                {"k", s.k},
                {"n_effective", s.n_effective},
                {"mask_density", canonical(s.mask_density)}};
}

inline CknnaScore score_from(const json& j) {
    return {j.at("value").get<double>(), j.at("k").get<std::size_t>(), j.at("n_effective").get<std::size_t>(),
            j.at("mask_density").get<double>()};
}

inline json opt_score_json(const std::optional<CknnaScore>& s) { return s ? score_json(*s) : json(nullptr); }

inline std::optional<CknnaScore> opt_score_from(const json& j, const char* key) {
    if (auto it = j.find(key); it != j.end() && !it->is_null()) {
        return score_from(*it);
    }
    return std::nullopt;
}

inline json results_json(const CknnaScore& s) {
    json j = score_json(s);
    j["negative"] = s.value < 0.0;
    return j;
}

inline json results_json(const SeCknnaResult& r) {
    json rows = json::array();
    for (const auto& e : r.per_condition) {
        rows.push_back(json{{"condition", e.condition},
                            {"identity_equivalent", e.identity_equivalent},
                            {"degenerate", !e.score.has_value()},
                            {"score", opt_score_json(e.score)}});
    }
    return json{{"aggregator", std::string(to_string(r.aggregator))},
                {"aggregate", canonical(r.aggregate)},
                {"baseline", canonical(r.baseline)},
                {"relative_change", opt_json(r.relative_change)},
                {"relative_change_convention", "signed (se_cknna - cknna) / cknna, not its absolute value"},
                {"per_condition", rows}};
}

inline json results_json(const LayerProfile& p) {
    json rows = json::array();
    for (const auto& e : p.entries) {
        rows.push_back(json{{"layer_index", e.layer_index},
                            {"layer_id", e.layer_id},
                            {"degenerate", !e.score.has_value()},
                            {"score", opt_score_json(e.score)}});
    }
    return json{{"entries", rows},
                {"peak", p.peak ? json{{"layer_index", p.peak->layer_index}, {"value", canonical(p.peak->value)}}
                                : json(nullptr)},
                {"mean_score", opt_json(p.mean_score)},
                {"reference_level", opt_json(p.reference_level)}};
}

inline bool close(double a, double b) { return std::abs(a - b) <= 1e-8 * std::max(1.0, std::abs(b)); }

inline void check_consistency(const AlignmentReport& report) {
    if (const auto* p = std::get_if<LayerProfile>(&report.results)) {
        for (std::size_t i = 1; i < p->entries.size(); ++i) {
            require(p->entries[i].layer_index > p->entries[i - 1].layer_index, ErrorCode::InvalidArgument,
                    "layer indices are not strictly increasing");
        }
        LayerProfile recomputed = *p;
        summarize(recomputed);
        require(recomputed.peak.has_value() == p->peak.has_value() &&
                    recomputed.mean_score.has_value() == p->mean_score.has_value(),
                ErrorCode::InvalidArgument, "profile summary does not match its entries");
        if (p->peak) {
            require(recomputed.peak->layer_index == p->peak->layer_index &&
                        close(recomputed.peak->value, p->peak->value) && close(*recomputed.mean_score, *p->mean_score),
                    ErrorCode::InvalidArgument, "profile peak/mean do not match its entries");
        }
    } else if (const auto* se = std::get_if<SeCknnaResult>(&report.results)) {
        std::vector<double> members;
        for (const auto& e : se->per_condition) {
            if (e.score && !e.identity_equivalent) members.push_back(e.score->value);
        }
        require(!members.empty() && close(aggregate(members, se->aggregator), se->aggregate),
                ErrorCode::InvalidArgument, "SE-CKNNA aggregate does not match its per-condition scores");
    }
}

}  // namespace detail

inline nlohmann::json report_to_json(const AlignmentReport& report) {
    using nlohmann::json;
    json inputs = json::array();
    for (const auto& in : report.inputs) {
        inputs.push_back(json{{"path", in.path}, {"sha256", in.sha256}});
    }
    const auto& pre = report.preprocessing;
    return json{{"tool_version", report.tool_version},
                {"kind", std::string(report_kind(report.results))},
                {"k", report.k},
                {"inputs", inputs},
                {"preprocessing",
                 {{"normalize", pre.normalize},
                  {"outlier", std::string(to_string(pre.outlier))},
                  {"mad_multiplier", canonical(pre.mad_multiplier)},
                  {"pool", pre.pool},
                  {"n_input", pre.n_input},
                  {"n_kept", pre.n_kept}}},
                {"results", std::visit([](const auto& r) { return detail::results_json(r); }, report.results)},
                {"warnings", report.warnings}};
}

inline AlignmentReport report_from_json(const nlohmann::json& j) {
    using detail::opt_double;
    using detail::opt_score_from;
    try {
        AlignmentReport report;
        report.tool_version = j.at("tool_version").get<std::string>();
        report.k = j.at("k").get<std::size_t>();
        for (const auto& in : j.value("inputs", nlohmann::json::array())) {
            report.inputs.push_back({in.at("path").get<std::string>(), in.at("sha256").get<std::string>()});
        }
        const auto& pre = j.at("preprocessing");
        report.preprocessing.normalize = pre.at("normalize").get<bool>();
        report.preprocessing.outlier = pre.at("outlier").get<std::string>() == "none" ? OutlierPolicy::Method::none
                                                                                       : OutlierPolicy::Method::norm_mad;
        report.preprocessing.mad_multiplier = pre.at("mad_multiplier").get<double>();
        report.preprocessing.pool = pre.at("pool").get<std::string>();
        report.preprocessing.n_input = pre.at("n_input").get<std::size_t>();
        report.preprocessing.n_kept = pre.at("n_kept").get<std::size_t>();
        report.warnings = j.at("warnings").get<std::vector<std::string>>();

        const auto kind = j.at("kind").get<std::string>();
        const auto& r = j.at("results");
        if (kind == "cknna") {
            report.results = detail::score_from(r);
        } else if (kind == "se_cknna") {
            SeCknnaResult se;
            se.aggregator = parse_aggregator(r.at("aggregator").get<std::string>());
            se.aggregate = r.at("aggregate").get<double>();
            se.baseline = r.at("baseline").get<double>();
            se.relative_change = opt_double(r, "relative_change");
            for (const auto& row : r.at("per_condition")) {
                se.per_condition.push_back({row.at("condition").get<TransformCondition>(), opt_score_from(row, "score"),
                                            row.at("identity_equivalent").get<bool>()});
            }
            report.results = std::move(se);
        } else if (kind == "layer_profile") {
            LayerProfile p;
            for (const auto& row : r.at("entries")) {
                p.entries.push_back({row.at("layer_index").get<std::size_t>(), row.at("layer_id").get<std::int64_t>(),
                                     opt_score_from(row, "score")});
            }
            if (auto it = r.find("peak"); it != r.end() && !it->is_null()) {
                p.peak = LayerPeak{it->at("layer_index").get<std::size_t>(), it->at("value").get<double>()};
            }
            p.mean_score = opt_double(r, "mean_score");
            p.reference_level = opt_double(r, "reference_level");
            report.results = std::move(p);
        } else {
            throw Error(ErrorCode::ParseError, "unknown report kind '" + kind + "'");
        }
        return report;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ParseError, std::string("report JSON: ") + e.what());
    }
}

enum class ReportFormat { json, csv };

inline ReportFormat parse_report_format(std::string_view s) {
    if (s == "json") return ReportFormat::json;
    if (s == "csv") return ReportFormat::csv;
    throw Error(ErrorCode::InvalidArgument, "unknown report format '" + std::string(s) + "'");
}

namespace detail {

inline void csv_score_cells(std::string& out, const std::optional<CknnaScore>& s) {
    if (s) {
        out += format_number(s->value) + "," + format_number(s->mask_density) + "," + std::to_string(s->n_effective) +
               ",0";
    } else {
        out += ",,,1";
    }
}

inline std::string report_csv(const AlignmentReport& report) {
    std::string out;
    if (const auto* s = std::get_if<CknnaScore>(&report.results)) {
        out += "cknna,mask_density,n_effective,degenerate,k\n";
        csv_score_cells(out, *s);
        out += "," + std::to_string(s->k) + "\n";
    } else if (const auto* se = std::get_if<SeCknnaResult>(&report.results)) {
        out += "family,parameter,seed,cknna,mask_density,n_effective,degenerate,identity_equivalent\n";
        for (const auto& e : se->per_condition) {
            out += std::string(to_string(e.condition.family)) + "," + format_number(e.condition.parameter) + "," +
                   std::to_string(e.condition.seed) + ",";
            csv_score_cells(out, e.score);
            out += e.identity_equivalent ? ",1\n" : ",0\n";
        }
    } else {
        const auto& p = std::get<LayerProfile>(report.results);
        out += "layer_index,cknna,mask_density,n_effective,degenerate\n";
        for (const auto& e : p.entries) {
            out += std::to_string(e.layer_index) + ",";
            csv_score_cells(out, e.score);
            out += "\n";
        }
    }
    return out;
}

}  // namespace detail

/// Serializes a report. JSON has sorted keys and 9-significant-digit floats;
/// CSV has one row per condition or layer.
inline std::string emit_report(const AlignmentReport& report, ReportFormat format = ReportFormat::json) {
    detail::check_consistency(report);
    if (format == ReportFormat::csv) {
        return detail::report_csv(report);
    }
    return report_to_json(report).dump(2) + "\n";
}

inline AlignmentReport parse_report(std::string_view text) {
    try {
        return report_from_json(nlohmann::json::parse(text));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ParseError, std::string("report JSON: ") + e.what());
    }
}

}  // namespace repalign
