// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <sstream>

#include "repalign/commands.hpp"
#include "test_support.hpp"

namespace {

using namespace repalign;
using nlohmann::json;
using repalign::testing::multiply;
using repalign::testing::permute_rows;
using repalign::testing::random_features;
using repalign::testing::random_orthogonal;
using repalign::testing::random_permutation;
using repalign::testing::TempDir;

const std::filesystem::path kFixtures = REPALIGN_FIXTURE_DIR;
const std::string kCli = REPALIGN_CLI_PATH;

struct Verdict {
    bool pass = true;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* pattern, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, pattern, args...);
    return buf;
}

void set_threads(const char* value) { ::setenv("REPALIGN_THREADS", value, 1); }

json read_json(const std::filesystem::path& p) {
    const auto bytes = read_bytes(p);
    return json::parse(bytes.begin(), bytes.end());
}

int run_binary(const std::string& args, const char* threads = nullptr) {
    std::string cmd;
    if (threads) cmd += std::string("REPALIGN_THREADS=") + threads + " ";
    cmd += "\"" + kCli + "\" " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string quoted(const std::filesystem::path& p) { return "\"" + p.string() + "\""; }

// ---------------------------------------------------------------------------

Verdict oracle_equivalence() {
    set_threads("1");
    const auto t0 = Clock::now();
    const SweepSummary s = run_oracle_sweep(100);
    const double secs = seconds_since(t0);
    ::unsetenv("REPALIGN_THREADS");
    bool grid_ok = s.rows.size() == 100;
    for (const auto& row : s.rows) {
        grid_ok = grid_ok && row.instance.k < row.instance.n && row.instance.n <= 128 && !row.degenerate;
    }
    return {s.passed && grid_ok && secs < 30.0,
            fmt("instances=%zu max_abs_delta=%.3e (<= 1e-10) time=%.2fs (< 30s, 1 thread)", s.rows.size(),
                s.max_delta, secs)};
}

Verdict self_alignment() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const KernelMatrix k = gram(random_features(256, 64, 500 + seed));
        worst = std::max(worst, std::abs(cknna(k, k, 10).value - 1.0));
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-6 && secs < 5.0, fmt("sets=20 (256x64) max|value-1|=%.3e (<= 1e-6) time=%.2fs (< 5s)", worst, secs)};
}

Verdict invariance() {
    double orth = 0.0, scale = 0.0, perm = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const FeatureSet f = random_features(128, 32, 900 + seed);
        const FeatureSet g = random_features(128, 32, 1900 + seed);
        const double base = cknna(f, g, 10).value;
        orth = std::max(orth, std::abs(cknna(multiply(f, random_orthogonal(32, seed)), g, 10).value - base));
        for (float s : {1e-3f, 1.0f, 1e3f}) {
            Matrix<float> m = f.data();
            for (auto& v : m.flat()) v *= s;
            scale = std::max(scale, std::abs(cknna(f.with_data(m), g, 10).value - base));
        }
        const auto p = random_permutation(128, seed);
        perm = std::max(perm, std::abs(cknna(permute_rows(f, p), permute_rows(g, p), 10).value - base));
    }
    return {orth <= 1e-6 && scale <= 1e-6 && perm <= 1e-6,
            fmt("seeds=20 max|delta| orthogonal=%.3e scale=%.3e permutation=%.3e (each <= 1e-6)", orth, scale, perm)};
}

Verdict relative_change_table() {
    const double a = 100.0 * relative_change(0.135, 0.202);
    const double b = 100.0 * relative_change(0.191, 0.188);
    const bool pass = std::abs(a - (-33.2)) <= 0.05 && std::abs(b - 1.6) <= 0.05;
    return {pass, fmt("(0.135, 0.202) -> %+.3f%% (want -33.2) ; (0.191, 0.188) -> %+.3f%% (want +1.6) ; tol 0.05pp", a, b)};
}

Verdict rotation_closure() {
    // In-process at full precision.
    CorpusSpec spec;
    spec.seed = 11;
    const auto corpus = make_corpus(spec);
    const auto suite = default_suite(11);
    const auto pairs = toy_condition_pairs(corpus, suite, toy_models_for(11, 64, ToyMode::rotation_invariant));
    const auto [result, record] = se_cknna_pipeline(pairs, RunConfig{});
    double worst = 0.0;
    int rotations = 0;
    for (const auto& e : result.per_condition) {
        if (e.condition.family != TransformFamily::rotation) continue;
        ++rotations;
        worst = e.score ? std::max(worst, std::abs(e.score->value - result.baseline)) : 1.0;
    }

    // Report bytes through the binary: two runs at 1 thread, one at 8.
    TempDir dir;
    const auto data = dir / "synth";
    bool bytes_ok = run_binary("synth --mode rotation_invariant --seed 11 --out " + quoted(data)) == 0;
    std::vector<std::vector<std::uint8_t>> reports;
    int idx = 0;
    for (const char* threads : {"1", "1", "8"}) {
        const auto out = dir / ("report_" + std::to_string(idx++) + ".json");
        bytes_ok = bytes_ok && run_binary("se-cknna " + quoted(data / "manifest.json") + " --out " + quoted(out),
                                          threads) == 0;
        if (bytes_ok) reports.push_back(read_bytes(out));
    }
    bytes_ok = bytes_ok && reports.size() == 3 && reports[0] == reports[1] && reports[0] == reports[2];
    return {rotations == 4 && worst <= 1e-9 && bytes_ok,
            fmt("rotation conditions=%d max|score-baseline|=%.3e (<= 1e-9) ; reports byte-identical "
                "(2 runs @1 thread, 1 run @8 threads): %s",
                rotations, worst, bytes_ok ? "yes" : "no")};
}

Verdict noise_monotonicity() {
    const auto t0 = Clock::now();
    CorpusSpec spec;
    spec.seed = 0;
    const auto corpus = make_corpus(spec);
    const ToyModels models = toy_models_for(0, 64, ToyMode::generic);
    const std::vector<double> sigmas{0.05, 0.1, 0.15, 0.2};
    std::vector<std::vector<double>> scores(sigmas.size());
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto suite = default_suite(1000 * (seed + 1));
        const auto pairs = toy_condition_pairs(corpus, suite, models);
        const auto [result, record] = se_cknna_pipeline(pairs, RunConfig{});
        for (const auto& e : result.per_condition) {
            if (e.condition.family != TransformFamily::noise) continue;
            for (std::size_t s = 0; s < sigmas.size(); ++s) {
                if (e.condition.parameter == sigmas[s] && e.score) scores[s].push_back(e.score->value);
            }
        }
    }
    std::vector<double> medians;
    bool complete = true;
    for (auto& v : scores) {
        complete = complete && v.size() == 20;
        medians.push_back(aggregate(v, Aggregator::median));
    }
    int inversions = 0;
    double worst_inversion = 0.0;
    for (std::size_t s = 1; s < medians.size(); ++s) {
        if (medians[s] > medians[s - 1]) {
            ++inversions;
            worst_inversion = std::max(worst_inversion, medians[s] - medians[s - 1]);
        }
    }
    const double secs = seconds_since(t0);
    const bool pass = complete && (inversions == 0 || (inversions == 1 && worst_inversion <= 0.02)) && secs < 120.0;
    return {pass, fmt("medians over 20 seeds sigma=0.05/0.1/0.15/0.2: %.6f %.6f %.6f %.6f ; inversions=%d "
                      "(max %.3e) ; time=%.1fs (< 120s)",
                      medians[0], medians[1], medians[2], medians[3], inversions, worst_inversion, secs)};
}

Verdict format_and_cli() {
    std::vector<std::string> problems;
    TempDir dir;

    // RAFS round trip through disk.
    const FeatureSet f = random_features(33, 7, 3);
    save_features(dir / "f.rafs", f);
    const auto first = read_bytes(dir / "f.rafs");
    save_features(dir / "g.rafs", load_features(dir / "f.rafs"));
    if (read_bytes(dir / "g.rafs") != first || load_features(dir / "g.rafs") != f) problems.push_back("rafs");

    double worst = 0.0;
    const auto track = [&](double got, double want) { worst = std::max(worst, std::abs(got - want)); };
    std::ostringstream sink;

    // cmd_cknna golden.
    {
        RunConfig cfg;
        cfg.output_path = dir / "cknna.json";
        if (cmd_cknna(kFixtures / "pair_a.rafs", kFixtures / "pair_b.rafs", cfg, sink, sink) != kExitOk) {
            problems.push_back("cknna exit");
        } else {
            track(read_json(dir / "cknna.json").at("results").at("value").get<double>(),
                  read_json(kFixtures / "golden_cknna.json").at("score").at("value").get<double>());
        }
    }
    // cmd_se_cknna golden.
    {
        const json golden = read_json(kFixtures / "golden_se_cknna.json");
        SynthOptions opt;
        opt.seed = golden.at("synth").at("seed");
        opt.out_dir = dir / "se";
        RunConfig cfg;
        cfg.output_path = dir / "se.json";
        if (cmd_synth(opt, sink, sink) != kExitOk || cmd_se_cknna(opt.out_dir / "manifest.json", cfg, sink, sink) != kExitOk) {
            problems.push_back("se exit");
        } else {
            const json res = read_json(dir / "se.json").at("results");
            const json& rows = golden.at("per_condition");
            if (res.at("per_condition").size() != rows.size()) problems.push_back("se rows");
            for (std::size_t i = 0; i < rows.size() && i < res.at("per_condition").size(); ++i) {
                track(res.at("per_condition")[i].at("score").at("value").get<double>(),
                      rows[i].at("score").at("value").get<double>());
            }
            track(res.at("baseline").get<double>(), golden.at("baseline").get<double>());
            track(res.at("aggregate").get<double>(), golden.at("aggregate").get<double>());
        }
    }
    // cmd_layer_profile golden.
    {
        const json golden = read_json(kFixtures / "golden_layer_profile.json");
        const json& spec = golden.at("synth");
        SynthOptions opt;
        opt.kind = SynthOptions::Kind::layers;
        opt.n = spec.at("n");
        opt.d = spec.at("d");
        opt.seed = spec.at("seed");
        opt.layers = spec.at("layers");
        opt.out_dir = dir / "layers";
        RunConfig cfg;
        cfg.output_path = dir / "layers.json";
        if (cmd_synth(opt, sink, sink) != kExitOk ||
            cmd_layer_profile(opt.out_dir / "manifest.json", cfg, sink, sink) != kExitOk) {
            problems.push_back("layer exit");
        } else {
            const json entries = read_json(dir / "layers.json").at("results").at("entries");
            if (entries.size() != golden.at("layers").size()) problems.push_back("layer rows");
            for (std::size_t l = 0; l < entries.size() && l < golden.at("layers").size(); ++l) {
                track(entries[l].at("score").at("value").get<double>(), golden.at("layers")[l].at("value").get<double>());
            }
        }
    }
    if (worst > 1e-9) problems.push_back("golden mismatch");

    // Exit-code contract through the binary.
    const std::string pair = quoted(kFixtures / "pair_a.rafs") + " " + quoted(kFixtures / "pair_b.rafs");
    const std::string text_a = "x\n1\n2\n3\n4\n";
    const std::string text_b = "x\n4\n3\n2\n1\n";
    write_bytes(dir / "a.csv", std::vector<std::uint8_t>(text_a.begin(), text_a.end()));
    write_bytes(dir / "b.csv", std::vector<std::uint8_t>(text_b.begin(), text_b.end()));
    const int ok = run_binary("cknna " + pair);
    const int input = run_binary("cknna " + pair + " --k 0");
    const int missing = run_binary("cknna " + quoted(dir / "missing.rafs") + " " + quoted(kFixtures / "pair_b.rafs"));
    const int degenerate =
        run_binary("cknna " + quoted(dir / "a.csv") + " " + quoted(dir / "b.csv") + " --k 1 --no-normalize");
    const int mismatch = run_binary("oracle-check --instances 5 --inject-centering-fault");
    if (ok != 0 || input != 1 || missing != 1 || degenerate != 2 || mismatch != 3) problems.push_back("exit codes");

    std::string summary;
    for (const auto& p : problems) summary += (summary.empty() ? "" : ",") + p;
    return {problems.empty(),
            fmt("rafs round trip byte-identical ; goldens cknna/se/layers max|delta|=%.3e (<= 1e-9) ; exit codes "
                "ok=%d input=%d missing=%d degenerate=%d oracle_mismatch=%d%s%s",
                worst, ok, input, missing, degenerate, mismatch, summary.empty() ? "" : " ; problems: ",
                summary.c_str())};
}

Verdict layer_profile_sanity() {
    TempDir dir;
    SynthOptions opt;
    opt.kind = SynthOptions::Kind::layers;
    opt.n = 128;
    opt.d = 32;
    opt.seed = 21;
    opt.layers = 8;
    opt.out_dir = dir.path();
    std::ostringstream sink;
    if (cmd_synth(opt, sink, sink) != kExitOk) return {false, "synth failed"};
    const json m = read_json(dir / "manifest.json");
    std::vector<FeatureSet> sets;
    for (const auto& p : m.at("layers")) sets.push_back(load_features(dir / p.get<std::string>()));
    sets.push_back(load_features(dir / m.at("reference").get<std::string>()));
    auto prepared = preprocess(sets, RunConfig{});
    const FeatureSet reference = prepared.sets.back();
    prepared.sets.pop_back();
    const LayerProfile p = layer_profile(prepared.sets, reference, 10);

    bool increasing = p.entries.size() == 8;
    double worst = 0.0;
    std::string values;
    for (std::size_t l = 0; l < p.entries.size(); ++l) {
        if (!p.entries[l].score) return {false, fmt("layer %zu degenerate", l)};
        const double v = p.entries[l].score->value;
        worst = std::max(worst, std::abs(v - cknna_oracle(prepared.sets[l], reference, 10).value));
        if (l > 0) increasing = increasing && v > p.entries[l - 1].score->value;
        values += fmt("%s%.6f", l ? " " : "", v);
    }
    return {increasing && worst <= 1e-10,
            fmt("profile [%s] strictly increasing: %s ; max|fast-oracle|=%.3e (<= 1e-10)", values.c_str(),
                increasing ? "yes" : "no", worst)};
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
        {"oracle-equivalence", oracle_equivalence},
        {"self-alignment", self_alignment},
        {"invariance", invariance},
        {"relative-change-table", relative_change_table},
        {"se-rotation-closure-and-determinism", rotation_closure},
        {"noise-monotonicity", noise_monotonicity},
        {"format-and-cli-contracts", format_and_cli},
        {"layer-profile-sanity", layer_profile_sanity},
    };
    int failures = 0;
    for (const auto& [name, check] : criteria) {
        Verdict v;
        try {
            v = check();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        std::printf("%s %s: %s\n", v.pass ? "PASS" : "FAIL", name, v.detail.c_str());
        std::fflush(stdout);
        failures += v.pass ? 0 : 1;
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
    return failures == 0 ? 0 : 1;
}
