#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "equivariance.hpp"
#include "error.hpp"
#include "feature_store.hpp"
#include "kernel_align.hpp"
#include "profiler.hpp"

namespace repalign {

struct RunConfig {
    std::size_t k = kDefaultK;
    bool normalize = true;
    OutlierPolicy outlier;
    Aggregator aggregator = Aggregator::mean;
    std::uint64_t seed = 0;
    ReportFormat format = ReportFormat::json;
    std::optional<std::filesystem::path> output_path;
};

inline void validate(const RunConfig& cfg) {
    require(cfg.k >= 1, ErrorCode::InvalidArgument, "k must be >= 1");
    require(cfg.outlier.mad_multiplier > 0.0, ErrorCode::InvalidArgument, "mad multiplier must be > 0");
}

/// Overlays the keys present in a JSON config object onto `base`.
inline RunConfig apply_config_json(RunConfig base, const nlohmann::json& j) {
    try {
        require(j.is_object(), ErrorCode::ParseError, "config file must hold a JSON object");
        if (j.contains("k")) base.k = j.at("k").get<std::size_t>();
        if (j.contains("normalize")) base.normalize = j.at("normalize").get<bool>();
        if (j.contains("outlier")) {
            const auto m = j.at("outlier").get<std::string>();
            require(m == "none" || m == "norm_mad", ErrorCode::InvalidArgument, "outlier must be none|norm_mad");
            base.outlier.method = m == "none" ? OutlierPolicy::Method::none : OutlierPolicy::Method::norm_mad;
        }
        if (j.contains("mad_multiplier")) base.outlier.mad_multiplier = j.at("mad_multiplier").get<double>();
        if (j.contains("aggregator")) base.aggregator = parse_aggregator(j.at("aggregator").get<std::string>());
        if (j.contains("seed")) base.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("format")) base.format = parse_report_format(j.at("format").get<std::string>());
        if (j.contains("out")) base.output_path = j.at("out").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ParseError, std::string("config: ") + e.what());
    }
    validate(base);
    return base;
}

struct Prepared {
    std::vector<FeatureSet> sets;
    Preprocessing record;
};

/// Joint outlier filter across every set, then per-set channel normalization.
inline Prepared preprocess(const std::vector<FeatureSet>& pooled, const RunConfig& cfg) {
    auto filtered = filter_outliers_joint(pooled, cfg.outlier);
    Prepared out;
    out.record.normalize = cfg.normalize;
    out.record.outlier = cfg.outlier.method;
    out.record.mad_multiplier = cfg.outlier.mad_multiplier;
    out.record.n_input = pooled.front().n();
    out.record.n_kept = filtered.kept.size();
    out.sets.reserve(filtered.sets.size());
    for (auto& s : filtered.sets) {
        out.sets.push_back(cfg.normalize ? normalize_channels(s) : std::move(s));
    }
    return out;
}

using ConditionPairs = std::map<TransformCondition, std::pair<FeatureSet, FeatureSet>>;

/// Preprocesses all condition pairs jointly and scores them.
inline std::pair<SeCknnaResult, Preprocessing> se_cknna_pipeline(const ConditionPairs& pairs, const RunConfig& cfg) {
    require(!pairs.empty(), ErrorCode::MissingIdentityCondition, "no conditions given");
    std::vector<FeatureSet> flat;
    for (const auto& [cond, pair] : pairs) {
        flat.push_back(pair.first);
        flat.push_back(pair.second);
    }
    auto prepared = preprocess(flat, cfg);
    ConditionFeatures a;
    ConditionFeatures b;
    std::size_t i = 0;
    for (const auto& [cond, _] : pairs) {
        a.emplace(cond, std::move(prepared.sets[i++]));
        b.emplace(cond, std::move(prepared.sets[i++]));
    }
    return {se_cknna(a, b, cfg.k, cfg.aggregator), prepared.record};
}

/// Builds the condition pairs for a toy corpus entirely in memory.
inline ConditionPairs toy_condition_pairs(std::span<const Image> corpus, std::span<const TransformCondition> suite,
                                          const ToyModels& models) {
    ConditionPairs pairs;
    for (const auto& cond : suite) {
        pairs.emplace(cond, toy_feature_pair(corpus, cond, models));
    }
    return pairs;
}

/// Toy model seeds for a run seed.
inline ToyModels toy_models_for(std::uint64_t seed, std::size_t d, ToyMode mode) {
    return {derive_key(seed, 0xA), derive_key(seed, 0xB), d, mode};
}

}  // namespace repalign
