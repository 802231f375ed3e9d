// repalign: representation-alignment diagnostics from feature files.
//
//   repalign cknna A.rafs B.rafs [run flags]
//   repalign se-cknna manifest.json [run flags]
//   repalign layer-profile manifest.json [run flags]
//   repalign synth --kind se|layers --out DIR [--n --d --seed --mode ...]
//   repalign oracle-check [--instances N]
//
// Run flags: --k --no-normalize --outlier --mad-mult --agg --seed --format
// --out --config. Values from --config (JSON) are overridden by flags.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "repalign/commands.hpp"

namespace {

struct RunFlags {
    std::size_t k = repalign::kDefaultK;
    bool no_normalize = false;
    std::string outlier = "norm_mad";
    double mad_mult = 5.0;
    std::string agg = "mean";
    std::uint64_t seed = 0;
    std::string format = "json";
    std::string out;
    std::string config;

    CLI::Option* k_opt = nullptr;
    CLI::Option* no_normalize_opt = nullptr;
    CLI::Option* outlier_opt = nullptr;
    CLI::Option* mad_opt = nullptr;
    CLI::Option* agg_opt = nullptr;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* format_opt = nullptr;
    CLI::Option* out_opt = nullptr;

    void attach(CLI::App* app) {
        k_opt = app->add_option("--k", k, "neighbors per sample (default 10)");
        no_normalize_opt = app->add_flag("--no-normalize", no_normalize, "skip channel-wise normalization");
        outlier_opt = app->add_option("--outlier", outlier, "outlier filter")
                          ->check(CLI::IsMember({"none", "norm_mad"}));
        mad_opt = app->add_option("--mad-mult", mad_mult, "MAD multiplier for norm_mad (default 5)");
        agg_opt = app->add_option("--agg", agg, "SE-CKNNA aggregator")->check(CLI::IsMember({"mean", "median", "min"}));
        seed_opt = app->add_option("--seed", seed, "run seed");
        format_opt = app->add_option("--format", format, "report format")->check(CLI::IsMember({"json", "csv"}));
        out_opt = app->add_option("--out", out, "write the report here instead of stdout");
        app->add_option("--config", config, "JSON config file; flags take precedence");
    }

    repalign::RunConfig resolve() const {
        repalign::RunConfig cfg;
        if (!config.empty()) {
            const auto bytes = repalign::read_bytes(config);
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(bytes.begin(), bytes.end());
            } catch (const nlohmann::json::exception& e) {
                throw repalign::Error(repalign::ErrorCode::ParseError, "config '" + config + "': " + e.what());
            }
            cfg = repalign::apply_config_json(cfg, j);
        }
        if (k_opt->count() > 0) cfg.k = k;
        if (no_normalize_opt->count() > 0) cfg.normalize = !no_normalize;
        if (outlier_opt->count() > 0) {
            cfg.outlier.method = outlier == "none" ? repalign::OutlierPolicy::Method::none
                                                   : repalign::OutlierPolicy::Method::norm_mad;
        }
        if (mad_opt->count() > 0) cfg.outlier.mad_multiplier = mad_mult;
        if (agg_opt->count() > 0) cfg.aggregator = repalign::parse_aggregator(agg);
        if (seed_opt->count() > 0) cfg.seed = seed;
        if (format_opt->count() > 0) cfg.format = repalign::parse_report_format(format);
        if (out_opt->count() > 0) cfg.output_path = out;
        repalign::validate(cfg);
        return cfg;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"repalign: CKNNA / SE-CKNNA representation-alignment diagnostics"};
    app.require_subcommand(1);

    std::string file_a;
    std::string file_b;
    RunFlags cknna_flags;
    auto* cknna_cmd = app.add_subcommand("cknna", "CKNNA between two feature files");
    cknna_cmd->add_option("file_a", file_a, "representation A")->required();
    cknna_cmd->add_option("file_b", file_b, "representation B")->required();
    cknna_flags.attach(cknna_cmd);

    std::string se_manifest;
    RunFlags se_flags;
    auto* se_cmd = app.add_subcommand("se-cknna", "SE-CKNNA over a condition manifest");
    se_cmd->add_option("manifest", se_manifest, "SE manifest JSON")->required();
    se_flags.attach(se_cmd);

    std::string layer_manifest;
    RunFlags layer_flags;
    auto* layer_cmd = app.add_subcommand("layer-profile", "layer-wise CKNNA against a reference");
    layer_cmd->add_option("manifest", layer_manifest, "layer manifest JSON")->required();
    layer_flags.attach(layer_cmd);

    repalign::SynthOptions synth;
    std::string synth_kind = "se";
    std::string synth_mode = "generic";
    std::string synth_out = "synth";
    auto* synth_cmd = app.add_subcommand("synth", "write a synthetic toy corpus as feature files + manifest");
    synth_cmd->add_option("--kind", synth_kind, "se (transform suite) or layers (decaying-noise sweep)")
        ->check(CLI::IsMember({"se", "layers"}));
    synth_cmd->add_option("--n", synth.n, "samples / images");
    synth_cmd->add_option("--d", synth.d, "feature dimension");
    synth_cmd->add_option("--seed", synth.seed, "seed");
    synth_cmd->add_option("--mode", synth_mode, "toy extractor mode")
        ->check(CLI::IsMember({"generic", "rotation_invariant"}));
    synth_cmd->add_option("--size", synth.image_size, "image side length");
    synth_cmd->add_option("--classes", synth.classes, "class templates in the corpus");
    synth_cmd->add_option("--layers", synth.layers, "layer count for --kind layers");
    synth_cmd->add_option("--out", synth_out, "output directory");

    std::size_t instances = 100;
    bool inject_fault = false;
    auto* oracle_cmd = app.add_subcommand("oracle-check", "fast path vs brute-force oracle sweep");
    oracle_cmd->add_option("--instances", instances, "number of seeded instances");
    oracle_cmd->add_flag("--inject-centering-fault", inject_fault)->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : repalign::kExitInput;
    }

    try {
        if (*cknna_cmd) {
            return repalign::cmd_cknna(file_a, file_b, cknna_flags.resolve(), std::cout, std::cerr);
        }
        if (*se_cmd) {
            return repalign::cmd_se_cknna(se_manifest, se_flags.resolve(), std::cout, std::cerr);
        }
        if (*layer_cmd) {
            return repalign::cmd_layer_profile(layer_manifest, layer_flags.resolve(), std::cout, std::cerr);
        }
        if (*synth_cmd) {
            synth.kind = synth_kind == "layers" ? repalign::SynthOptions::Kind::layers
                                                : repalign::SynthOptions::Kind::se;
            synth.mode = repalign::parse_toy_mode(synth_mode);
            synth.out_dir = synth_out;
            return repalign::cmd_synth(synth, std::cout, std::cerr);
        }
        if (*oracle_cmd) {
            return repalign::cmd_oracle_check(instances, inject_fault, std::cout, std::cerr);
        }
    } catch (const repalign::Error& e) {
        std::cerr << "error [config]: " << e.what() << "\n";
        return repalign::kExitInput;
    }
    return repalign::kExitInput;
}
