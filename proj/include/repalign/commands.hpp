#pragma once

// Command implementations behind the repalign CLI. Each returns the process
// exit code: 0 success, 1 input/validation error, 2 degenerate metric,
// 3 oracle mismatch.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <json.hpp>

#include "equivariance.hpp"
#include "error.hpp"
#include "feature_store.hpp"
#include "kernel_align.hpp"
#include "oracle.hpp"
#include "pipeline.hpp"
#include "profiler.hpp"
#include "random.hpp"

namespace repalign {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 1;
inline constexpr int kExitDegenerate = 2;
inline constexpr int kExitOracleMismatch = 3;

inline std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error(ErrorCode::Io, "SHA-256 computation failed");
    }
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) {
        hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    }
    return hex.str();
}

inline InputDigest digest_file(const std::filesystem::path& path) {
    return {path.string(), sha256_hex(read_bytes(path))};
}

namespace detail {

/// Tags errors with the pipeline stage that raised them.
class Stage {
public:
    explicit Stage(std::string name) : name_(std::move(name)) {}
    const std::string& name() const noexcept { return name_; }
    void set(std::string name) { name_ = std::move(name); }

private:
    std::string name_;
};

inline int report_failure(const Error& e, const Stage& stage, std::ostream& err) {
    err << "error [" << stage.name() << "]: " << e.what() << "\n";
    return e.code() == ErrorCode::DegenerateMask ? kExitDegenerate : kExitInput;
}

inline void deliver(const AlignmentReport& report, const RunConfig& cfg, std::ostream& out) {
    const std::string text = emit_report(report, cfg.format);
    if (cfg.output_path) {
        const std::vector<std::uint8_t> bytes(text.begin(), text.end());
        write_bytes(*cfg.output_path, bytes);
    } else {
        out << text;
    }
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    const auto bytes = read_bytes(path);
    try {
        return nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ParseError, "'" + path.string() + "': " + e.what());
    }
}

inline std::filesystem::path resolve(const std::filesystem::path& manifest, const std::string& entry) {
    const std::filesystem::path p(entry);
    return p.is_absolute() ? p : manifest.parent_path() / p;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    const std::string text = j.dump(2) + "\n";
    write_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace detail

inline int cmd_cknna(const std::filesystem::path& file_a, const std::filesystem::path& file_b, const RunConfig& cfg,
                     std::ostream& out, std::ostream& err) {
    detail::Stage stage("config");
    try {
        validate(cfg);
        stage.set("load");
        std::vector<FeatureSet> sets{load_features(file_a), load_features(file_b)};
        std::vector<InputDigest> inputs{digest_file(file_a), digest_file(file_b)};
        stage.set("preprocess");
        auto prepared = preprocess(sets, cfg);
        stage.set("cknna");
        const CknnaScore score = cknna(prepared.sets[0], prepared.sets[1], cfg.k);
        stage.set("report");
        detail::deliver(make_report(score, cfg.k, prepared.record, std::move(inputs)), cfg, out);
        return kExitOk;
    } catch (const Error& e) {
        return detail::report_failure(e, stage, err);
    }
}

/// SE manifest:
///   {"conditions": [{"condition": {"family", "parameter", "seed"}, "a": PATH, "b": PATH}, ...]}
/// Relative paths resolve against the manifest's directory.
inline int cmd_se_cknna(const std::filesystem::path& manifest, const RunConfig& cfg, std::ostream& out,
                        std::ostream& err) {
    detail::Stage stage("config");
    try {
        validate(cfg);
        stage.set("manifest");
        const auto j = detail::read_json_file(manifest);
        require(j.is_object() && j.contains("conditions") && j.at("conditions").is_array(), ErrorCode::ParseError,
                "SE manifest needs a 'conditions' array");
        stage.set("load");
        ConditionPairs pairs;
        std::vector<InputDigest> inputs{digest_file(manifest)};
        for (const auto& row : j.at("conditions")) {
            TransformCondition cond;
            std::string path_a;
            std::string path_b;
            try {
                cond = row.at("condition").get<TransformCondition>();
                path_a = row.at("a").get<std::string>();
                path_b = row.at("b").get<std::string>();
            } catch (const nlohmann::json::exception& e) {
                throw Error(ErrorCode::ParseError, std::string("SE manifest entry: ") + e.what());
            }
            const auto pa = detail::resolve(manifest, path_a);
            const auto pb = detail::resolve(manifest, path_b);
            require(!pairs.contains(cond), ErrorCode::ParseError, "duplicate condition " + label(cond));
            pairs.emplace(cond, std::pair{load_features(pa), load_features(pb)});
            inputs.push_back(digest_file(pa));
            inputs.push_back(digest_file(pb));
        }
        stage.set("se_cknna");
        auto [result, record] = se_cknna_pipeline(pairs, cfg);
        stage.set("report");
        detail::deliver(make_report(std::move(result), cfg.k, record, std::move(inputs)), cfg, out);
        return kExitOk;
    } catch (const Error& e) {
        return detail::report_failure(e, stage, err);
    }
}

/// Layer manifest:
///   {"reference": PATH, "layers": [PATH, ...], "reference_level": 0.5 (optional)}
inline int cmd_layer_profile(const std::filesystem::path& manifest, const RunConfig& cfg, std::ostream& out,
                             std::ostream& err) {
    detail::Stage stage("config");
    try {
        validate(cfg);
        stage.set("manifest");
        const auto j = detail::read_json_file(manifest);
        std::string reference_path;
        std::vector<std::string> layer_paths;
        std::optional<double> reference_level;
        try {
            reference_path = j.at("reference").get<std::string>();
            layer_paths = j.at("layers").get<std::vector<std::string>>();
            if (j.contains("reference_level") && !j.at("reference_level").is_null()) {
                reference_level = j.at("reference_level").get<double>();
            }
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::ParseError, std::string("layer manifest: ") + e.what());
        }
        require(!layer_paths.empty(), ErrorCode::EmptyLayerList, "manifest lists no layers");

        stage.set("load");
        std::vector<InputDigest> inputs{digest_file(manifest)};
        std::vector<FeatureSet> sets;
        for (const auto& p : layer_paths) {
            const auto path = detail::resolve(manifest, p);
            sets.push_back(load_features(path));
            inputs.push_back(digest_file(path));
        }
        const auto ref_path = detail::resolve(manifest, reference_path);
        sets.push_back(load_features(ref_path));
        inputs.push_back(digest_file(ref_path));

        stage.set("preprocess");
        auto prepared = preprocess(sets, cfg);
        const FeatureSet reference = std::move(prepared.sets.back());
        prepared.sets.pop_back();

        stage.set("layer_profile");
        LayerProfile profile = layer_profile(prepared.sets, reference, cfg.k, reference_level);
        const auto summary_peak = profile.peak;
        const auto summary_mean = profile.mean_score;
        stage.set("report");
        detail::deliver(make_report(std::move(profile), cfg.k, prepared.record, std::move(inputs)), cfg, out);

        std::ostream& summary_stream = cfg.output_path ? out : err;
        summary_stream << "layers=" << layer_paths.size();
        if (summary_peak) {
            summary_stream << " peak_layer=" << summary_peak->layer_index
                           << " peak=" << format_number(summary_peak->value)
                           << " mean=" << format_number(*summary_mean);
        } else {
            summary_stream << " peak=none mean=none";
        }
        if (reference_level) {
            summary_stream << " reference_level=" << format_number(*reference_level);
        }
        summary_stream << "\n";
        return kExitOk;
    } catch (const Error& e) {
        return detail::report_failure(e, stage, err);
    }
}

struct SynthOptions {
    enum class Kind { se, layers };
    Kind kind = Kind::se;
    std::int64_t n = 256;
    std::int64_t d = 64;
    std::uint64_t seed = 0;
    ToyMode mode = ToyMode::generic;
    std::int64_t image_size = 16;
    std::int64_t classes = 16;
    std::int64_t layers = 8;
    std::filesystem::path out_dir = "synth";
};

namespace detail {

inline std::string indexed_name(const char* prefix, std::size_t i, const char* suffix) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s%02zu%s", prefix, i, suffix);
    return buf;
}

inline void synth_se(const SynthOptions& opt, std::ostream& out) {
    CorpusSpec spec;
    spec.count = static_cast<std::size_t>(opt.n);
    spec.seed = opt.seed;
    spec.size = static_cast<std::size_t>(opt.image_size);
    spec.classes = static_cast<std::size_t>(opt.classes);
    const auto corpus = make_corpus(spec);
    const auto suite = default_suite(opt.seed);
    const auto models = toy_models_for(opt.seed, static_cast<std::size_t>(opt.d), opt.mode);

    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < suite.size(); ++i) {
        auto [a, b] = toy_feature_pair(corpus, suite[i], models);
        const auto name_a = indexed_name("cond_", i, "_a.rafs");
        const auto name_b = indexed_name("cond_", i, "_b.rafs");
        save_features(opt.out_dir / name_a, a);
        save_features(opt.out_dir / name_b, b);
        rows.push_back({{"condition", suite[i]}, {"a", name_a}, {"b", name_b}});
    }
    write_json(opt.out_dir / "suite.json", suite_to_json(suite));
    write_json(opt.out_dir / "manifest.json", nlohmann::json{{"conditions", rows}});
    out << "wrote " << suite.size() << " conditions to " << (opt.out_dir / "manifest.json").string() << "\n";
}

/// Reference ~ N(0, 1); layer l = reference + N(0, 1) * 2^-l, so later layers
/// sit closer to the reference.
inline void synth_layers(const SynthOptions& opt, std::ostream& out) {
    const auto n = static_cast<std::size_t>(opt.n);
    const auto d = static_cast<std::size_t>(opt.d);
    CounterStream ref_rng(derive_key(opt.seed, 0x5EF));
    Matrix<float> ref(n, d);
    for (auto& v : ref.flat()) {
        v = static_cast<float>(ref_rng.normal());
    }
    FeatureMeta meta;
    meta.model_id = "synthetic-reference";
    meta.layer_id = -1;
    meta.source_image_count = n;
    save_features(opt.out_dir / "reference.rafs", FeatureSet(ref, meta));

    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < static_cast<std::size_t>(opt.layers); ++l) {
        CounterStream rng(derive_key(opt.seed, l));
        Matrix<float> layer(n, d);
        const double amplitude = std::ldexp(1.0, -static_cast<int>(l));
        for (std::size_t i = 0; i < layer.size(); ++i) {
            layer.flat()[i] = static_cast<float>(ref.flat()[i] + amplitude * rng.normal());
        }
        FeatureMeta lm;
        lm.model_id = "synthetic-layer";
        lm.layer_id = static_cast<std::int64_t>(l);
        lm.source_image_count = n;
        const auto name = indexed_name("layer_", l, ".rafs");
        save_features(opt.out_dir / name, FeatureSet(std::move(layer), lm));
        layers.push_back(name);
    }
    write_json(opt.out_dir / "manifest.json", nlohmann::json{{"reference", "reference.rafs"}, {"layers", layers}});
    out << "wrote " << opt.layers << " layers to " << (opt.out_dir / "manifest.json").string() << "\n";
}

}  // namespace detail

inline int cmd_synth(const SynthOptions& opt, std::ostream& out, std::ostream& err) {
    detail::Stage stage("validate");
    try {
        require(opt.n >= 1, ErrorCode::InvalidArgument, "n must be >= 1");
        require(opt.d >= 1, ErrorCode::InvalidArgument, "d must be >= 1");
        require(opt.image_size >= 1 && opt.classes >= 1, ErrorCode::InvalidArgument,
                "image size and class count must be >= 1");
        require(opt.layers >= 1, ErrorCode::InvalidArgument, "layer count must be >= 1");
        stage.set("write");
        std::error_code ec;
        std::filesystem::create_directories(opt.out_dir, ec);
        require(!ec, ErrorCode::Io, "cannot create '" + opt.out_dir.string() + "': " + ec.message());
        if (opt.kind == SynthOptions::Kind::se) {
            detail::synth_se(opt, out);
        } else {
            detail::synth_layers(opt, out);
        }
        return kExitOk;
    } catch (const Error& e) {
        return detail::report_failure(e, stage, err);
    }
}

/// Fast path with the grand-mean term dropped from centering. Only reachable
/// through the oracle-check fault-injection flag.
inline CknnaScore faulty_centering_cknna(const FeatureSet& f, const FeatureSet& g, std::size_t k) {
    return detail::cknna_with(gram(f), gram(g), k, [](const Matrix<double>& m) {
        Matrix<double> c = center(m);
        double grand = 0.0;
        for (double v : m.flat()) grand += v;
        grand /= static_cast<double>(m.size());
        for (auto& v : c.flat()) v -= grand;
        return c;
    });
}

inline int cmd_oracle_check(std::size_t instances, bool inject_centering_fault, std::ostream& out,
                            std::ostream& err) {
    try {
        const auto summary = run_oracle_sweep(instances, inject_centering_fault ? FastPath(faulty_centering_cknna)
                                                                                : FastPath(default_fast_path));
        out << "index,n,d,k,fast,oracle,abs_delta,degenerate\n";
        for (const auto& row : summary.rows) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%zu,%.17g,%.17g,%.3e,%d\n", row.instance.index,
                          row.instance.n, row.instance.d, row.instance.k, row.fast, row.oracle, row.delta,
                          row.degenerate ? 1 : 0);
            out << buf;
        }
        char buf[96];
        std::snprintf(buf, sizeof buf, "max_abs_delta=%.3e tolerance=%.0e instances=%zu %s\n", summary.max_delta,
                      kOracleTolerance, summary.rows.size(), summary.passed ? "PASS" : "FAIL");
        out << buf;
        return summary.passed ? kExitOk : kExitOracleMismatch;
    } catch (const Error& e) {
        err << "error [oracle-check]: " << e.what() << "\n";
        return kExitInput;
    }
}

}  // namespace repalign
