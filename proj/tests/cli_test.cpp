#include <gtest/gtest.h>
#include <sys/wait.h>

#include <fstream>
#include <sstream>

#include "repalign/commands.hpp"
#include "test_support.hpp"

namespace {

using namespace repalign;
using nlohmann::json;
using repalign::testing::features_from;
using repalign::testing::random_features;
using repalign::testing::TempDir;

const std::filesystem::path kFixtures = REPALIGN_FIXTURE_DIR;
const std::string kCli = REPALIGN_CLI_PATH;

json read_json(const std::filesystem::path& p) {
    const auto bytes = read_bytes(p);
    return json::parse(bytes.begin(), bytes.end());
}

std::string read_text(const std::filesystem::path& p) {
    const auto bytes = read_bytes(p);
    return std::string(bytes.begin(), bytes.end());
}

void write_text(const std::filesystem::path& p, const std::string& text) {
    write_bytes(p, std::vector<std::uint8_t>(text.begin(), text.end()));
}

struct Outcome {
    int code = 0;
    std::string out;
    std::string err;
};

template <typename Fn>
Outcome run(Fn&& fn) {
    std::ostringstream out, err;
    const int code = fn(out, err);
    return {code, out.str(), err.str()};
}

int run_binary(const std::string& args, const TempDir& dir) {
    const std::string cmd = "\"" + kCli + "\" " + args + " >\"" + (dir / "stdout.txt").string() + "\" 2>\"" +
                            (dir / "stderr.txt").string() + "\"";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome cknna_files(const std::filesystem::path& a, const std::filesystem::path& b, const RunConfig& cfg = {}) {
    return run([&](auto& out, auto& err) { return cmd_cknna(a, b, cfg, out, err); });
}

Outcome synth(const SynthOptions& opt) {
    return run([&](auto& out, auto& err) { return cmd_synth(opt, out, err); });
}

TEST(CmdCknna, SameFileIsOne) {
    TempDir dir;
    save_features(dir / "a.rafs", random_features(60, 12, 1));
    const Outcome r = cknna_files(dir / "a.rafs", dir / "a.rafs");
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const json j = json::parse(r.out);
    EXPECT_NEAR(j.at("results").at("value").get<double>(), 1.0, 1e-6);
    EXPECT_EQ(j.at("inputs").size(), 2u);
    EXPECT_EQ(j.at("inputs")[0].at("sha256"), j.at("inputs")[1].at("sha256"));
}

TEST(CmdCknna, DifferentSampleCounts) {
    TempDir dir;
    save_features(dir / "a.rafs", random_features(20, 4, 1));
    save_features(dir / "b.rafs", random_features(21, 4, 2));
    const Outcome r = cknna_files(dir / "a.rafs", dir / "b.rafs");
    EXPECT_EQ(r.code, kExitInput);
    EXPECT_NE(r.err.find("ShapeMismatch"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("[preprocess]"), std::string::npos) << r.err;
}

TEST(CmdCknna, DegenerateMaskExitsTwo) {
    TempDir dir;
    write_text(dir / "a.csv", "x\n1\n2\n3\n4\n");
    write_text(dir / "b.csv", "x\n4\n3\n2\n1\n");
    RunConfig cfg;
    cfg.k = 1;
    cfg.normalize = false;
    const Outcome r = cknna_files(dir / "a.csv", dir / "b.csv", cfg);
    EXPECT_EQ(r.code, kExitDegenerate);
    EXPECT_NE(r.err.find("DegenerateMask"), std::string::npos) << r.err;
}

TEST(CmdCknna, MatchesGolden) {
    const json golden = read_json(kFixtures / "golden_cknna.json");
    const Outcome r = cknna_files(kFixtures / "pair_a.rafs", kFixtures / "pair_b.rafs");
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const json j = json::parse(r.out);
    const json& score = golden.at("score");
    EXPECT_NEAR(j.at("results").at("value").get<double>(), score.at("value").get<double>(), 1e-9);
    EXPECT_EQ(j.at("results").at("n_effective"), score.at("n_effective"));
    EXPECT_EQ(j.at("preprocessing").at("n_kept"), golden.at("n_kept"));

    // Full-precision library value, no report rounding in between.
    const auto prepared =
        preprocess({load_features(kFixtures / "pair_a.rafs"), load_features(kFixtures / "pair_b.rafs")}, {});
    EXPECT_NEAR(cknna(prepared.sets[0], prepared.sets[1], 10).value, score.at("value").get<double>(), 1e-10);
}

TEST(CmdCknna, CsvFormatAndOutputFile) {
    TempDir dir;
    RunConfig cfg;
    cfg.format = ReportFormat::csv;
    cfg.output_path = dir / "report.csv";
    const Outcome r = cknna_files(kFixtures / "pair_a.rafs", kFixtures / "pair_b.rafs", cfg);
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_TRUE(r.out.empty());
    const std::string csv = read_text(dir / "report.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "cknna,mask_density,n_effective,degenerate,k");
}

TEST(CmdCknna, MissingFileNamesPath) {
    TempDir dir;
    const Outcome r = cknna_files(dir / "nope.rafs", kFixtures / "pair_b.rafs");
    EXPECT_EQ(r.code, kExitInput);
    EXPECT_NE(r.err.find("nope.rafs"), std::string::npos) << r.err;
}

TEST(CmdSeCknna, IdenticalPairsGiveZeroChange) {
    TempDir dir;
    save_features(dir / "a.rafs", random_features(50, 8, 1));
    save_features(dir / "b.rafs", random_features(50, 8, 2));
    json conditions = json::array();
    for (const auto& c : default_suite(0)) conditions.push_back({{"condition", c}, {"a", "a.rafs"}, {"b", "b.rafs"}});
    write_text(dir / "manifest.json", json{{"conditions", conditions}}.dump());
    const Outcome r = run([&](auto& out, auto& err) { return cmd_se_cknna(dir / "manifest.json", {}, out, err); });
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const json res = json::parse(r.out).at("results");
    EXPECT_EQ(res.at("aggregate"), res.at("baseline"));
    EXPECT_EQ(res.at("relative_change").get<double>(), 0.0);
}

TEST(CmdSeCknna, MissingIdentity) {
    TempDir dir;
    save_features(dir / "a.rafs", random_features(30, 4, 1));
    const json c = TransformCondition{TransformFamily::noise, 0.1, 1};
    write_text(dir / "manifest.json", json{{"conditions", {{{"condition", c}, {"a", "a.rafs"}, {"b", "a.rafs"}}}}}.dump());
    const Outcome r = run([&](auto& out, auto& err) { return cmd_se_cknna(dir / "manifest.json", {}, out, err); });
    EXPECT_EQ(r.code, kExitInput);
    EXPECT_NE(r.err.find("MissingIdentityCondition"), std::string::npos) << r.err;
}

TEST(CmdSeCknna, RotationInvariantToyClosesOverRotations) {
    TempDir dir;
    SynthOptions opt;
    opt.n = 128;
    opt.mode = ToyMode::rotation_invariant;
    opt.seed = 3;
    opt.out_dir = dir.path();
    ASSERT_EQ(synth(opt).code, kExitOk);
    const Outcome r = run([&](auto& out, auto& err) { return cmd_se_cknna(dir / "manifest.json", {}, out, err); });
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const json res = json::parse(r.out).at("results");
    const double baseline = res.at("baseline").get<double>();
    int rotations = 0;
    for (const auto& row : res.at("per_condition")) {
        if (row.at("condition").at("family") == "rotation") {
            EXPECT_NEAR(row.at("score").at("value").get<double>(), baseline, 1e-9);
            ++rotations;
        }
    }
    EXPECT_EQ(rotations, 4);
}

TEST(CmdSeCknna, GenericToyMatchesGolden) {
    const json golden = read_json(kFixtures / "golden_se_cknna.json");
    TempDir dir;
    SynthOptions opt;
    opt.seed = golden.at("synth").at("seed").get<std::uint64_t>();
    opt.out_dir = dir.path();
    ASSERT_EQ(synth(opt).code, kExitOk);
    const Outcome r = run([&](auto& out, auto& err) { return cmd_se_cknna(dir / "manifest.json", {}, out, err); });
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const json report = json::parse(r.out);
    const json& res = report.at("results");
    EXPECT_EQ(report.at("preprocessing").at("n_kept"), golden.at("n_kept"));
    ASSERT_EQ(res.at("per_condition").size(), golden.at("per_condition").size());
    for (std::size_t i = 0; i < golden.at("per_condition").size(); ++i) {
        const json& want = golden.at("per_condition")[i];
        const json& got = res.at("per_condition")[i];
        EXPECT_EQ(got.at("condition"), want.at("condition"));
        EXPECT_NEAR(got.at("score").at("value").get<double>(), want.at("score").at("value").get<double>(), 1e-9) << i;
    }
    EXPECT_NEAR(res.at("baseline").get<double>(), golden.at("baseline").get<double>(), 1e-9);
    EXPECT_NEAR(res.at("aggregate").get<double>(), golden.at("aggregate").get<double>(), 1e-9);
    EXPECT_NEAR(res.at("relative_change").get<double>(), golden.at("relative_change").get<double>(), 1e-8);
}

TEST(CmdLayerProfile, ReferenceAsSingleLayer) {
    TempDir dir;
    save_features(dir / "ref.rafs", random_features(40, 6, 1));
    write_text(dir / "m.json", R"({"reference": "ref.rafs", "layers": ["ref.rafs"]})");
    const Outcome r = run([&](auto& out, auto& err) { return cmd_layer_profile(dir / "m.json", {}, out, err); });
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const json entries = json::parse(r.out).at("results").at("entries");
    ASSERT_EQ(entries.size(), 1u);
    EXPECT_EQ(entries[0].at("layer_index"), 0);
    EXPECT_NEAR(entries[0].at("score").at("value").get<double>(), 1.0, 1e-6);
    EXPECT_NE(r.err.find("layers=1 peak_layer=0"), std::string::npos) << r.err;
}

TEST(CmdLayerProfile, MissingLayerFile) {
    TempDir dir;
    save_features(dir / "ref.rafs", random_features(40, 6, 1));
    write_text(dir / "m.json", R"({"reference": "ref.rafs", "layers": ["ref.rafs", "gone.rafs"]})");
    const Outcome r = run([&](auto& out, auto& err) { return cmd_layer_profile(dir / "m.json", {}, out, err); });
    EXPECT_EQ(r.code, kExitInput);
    EXPECT_NE(r.err.find("gone.rafs"), std::string::npos) << r.err;
}

TEST(CmdLayerProfile, EmptyLayerList) {
    TempDir dir;
    save_features(dir / "ref.rafs", random_features(40, 6, 1));
    write_text(dir / "m.json", R"({"reference": "ref.rafs", "layers": []})");
    const Outcome r = run([&](auto& out, auto& err) { return cmd_layer_profile(dir / "m.json", {}, out, err); });
    EXPECT_EQ(r.code, kExitInput);
    EXPECT_NE(r.err.find("EmptyLayerList"), std::string::npos) << r.err;
}

TEST(CmdLayerProfile, SweepMatchesGolden) {
    const json golden = read_json(kFixtures / "golden_layer_profile.json");
    const json& spec = golden.at("synth");
    TempDir dir;
    SynthOptions opt;
    opt.kind = SynthOptions::Kind::layers;
    opt.n = spec.at("n");
    opt.d = spec.at("d");
    opt.seed = spec.at("seed");
    opt.layers = spec.at("layers");
    opt.out_dir = dir.path();
    ASSERT_EQ(synth(opt).code, kExitOk);
    RunConfig cfg;
    cfg.output_path = dir / "profile.json";
    const Outcome r = run([&](auto& out, auto& err) { return cmd_layer_profile(dir / "manifest.json", cfg, out, err); });
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_NE(r.out.find("peak_layer=7"), std::string::npos) << r.out;
    const json entries = read_json(dir / "profile.json").at("results").at("entries");
    ASSERT_EQ(entries.size(), golden.at("layers").size());
    for (std::size_t l = 0; l < entries.size(); ++l) {
        EXPECT_NEAR(entries[l].at("score").at("value").get<double>(), golden.at("layers")[l].at("value").get<double>(), 1e-9);
    }
}

TEST(CmdSynth, DeterministicDigests) {
    TempDir one, two;
    SynthOptions opt;
    opt.n = 32;
    opt.out_dir = one.path();
    ASSERT_EQ(synth(opt).code, kExitOk);
    opt.out_dir = two.path();
    ASSERT_EQ(synth(opt).code, kExitOk);
    std::size_t files = 0;
    for (const auto& entry : std::filesystem::directory_iterator(one.path())) {
        const auto name = entry.path().filename();
        EXPECT_EQ(digest_file(entry.path()).sha256, digest_file(two / name.string()).sha256) << name;
        ++files;
    }
    EXPECT_EQ(files, 13u * 2 + 2);
}

TEST(CmdSynth, DefaultManifestHasThirteenConditions) {
    TempDir dir;
    SynthOptions opt;
    opt.n = 16;
    opt.out_dir = dir.path();
    ASSERT_EQ(synth(opt).code, kExitOk);
    const json m = read_json(dir / "manifest.json");
    ASSERT_EQ(m.at("conditions").size(), 13u);
    EXPECT_EQ(m.at("conditions")[0].at("condition").at("family"), "identity");
    EXPECT_EQ(suite_from_json(read_json(dir / "suite.json")), default_suite(0));
}

TEST(CmdSynth, ZeroSamplesRejected) {
    TempDir dir;
    SynthOptions opt;
    opt.n = 0;
    opt.out_dir = dir.path();
    const Outcome r = synth(opt);
    EXPECT_EQ(r.code, kExitInput);
    EXPECT_NE(r.err.find("InvalidArgument"), std::string::npos);
}

TEST(CmdOracleCheck, StockBuildPasses) {
    const Outcome r = run([](auto& out, auto& err) { return cmd_oracle_check(100, false, out, err); });
    EXPECT_EQ(r.code, kExitOk);
    EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 1 + 100 + 1);
    EXPECT_NE(r.out.find(" PASS\n"), std::string::npos);
}

TEST(CmdOracleCheck, InjectedFaultExitsThree) {
    const Outcome r = run([](auto& out, auto& err) { return cmd_oracle_check(10, true, out, err); });
    EXPECT_EQ(r.code, kExitOracleMismatch);
    EXPECT_NE(r.out.find(" FAIL\n"), std::string::npos);
}

TEST(RunConfig, JsonKeysApply) {
    const RunConfig cfg = apply_config_json(
        {}, json{{"k", 4}, {"normalize", false}, {"outlier", "none"}, {"aggregator", "min"}, {"format", "csv"}});
    EXPECT_EQ(cfg.k, 4u);
    EXPECT_FALSE(cfg.normalize);
    EXPECT_EQ(cfg.outlier.method, OutlierPolicy::Method::none);
    EXPECT_EQ(cfg.aggregator, Aggregator::min);
    EXPECT_EQ(cfg.format, ReportFormat::csv);
    RunConfig bad;
    bad.k = 0;
    EXPECT_THROW(validate(bad), Error);
}

TEST(Binary, FlagsOverrideConfigFile) {
    TempDir dir;
    write_text(dir / "cfg.json", R"({"k": 5, "format": "json"})");
    const std::string pair = "\"" + (kFixtures / "pair_a.rafs").string() + "\" \"" + (kFixtures / "pair_b.rafs").string() + "\"";
    ASSERT_EQ(run_binary("cknna " + pair + " --config \"" + (dir / "cfg.json").string() + "\"", dir), 0);
    EXPECT_EQ(json::parse(read_text(dir / "stdout.txt")).at("k"), 5);
    ASSERT_EQ(run_binary("cknna " + pair + " --config \"" + (dir / "cfg.json").string() + "\" --k 7", dir), 0);
    EXPECT_EQ(json::parse(read_text(dir / "stdout.txt")).at("k"), 7);
}

TEST(Binary, ExitCodes) {
    TempDir dir;
    EXPECT_EQ(run_binary("cknna", dir), 1);
    EXPECT_EQ(run_binary("bogus", dir), 1);
    EXPECT_EQ(run_binary("synth --n 0 --out \"" + (dir / "s").string() + "\"", dir), 1);
    write_text(dir / "a.csv", "x\n1\n2\n3\n4\n");
    write_text(dir / "b.csv", "x\n4\n3\n2\n1\n");
    EXPECT_EQ(run_binary("cknna \"" + (dir / "a.csv").string() + "\" \"" + (dir / "b.csv").string() + "\" --k 1 --no-normalize", dir), 2);
    EXPECT_EQ(run_binary("oracle-check --instances 5 --inject-centering-fault", dir), 3);
    EXPECT_EQ(run_binary("oracle-check --instances 5", dir), 0);
}

}  // namespace
