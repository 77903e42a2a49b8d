#include "jinsect/pipeline.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

using namespace jinsect;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("jinsect_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// Short noisy Case 1 run: every noise source on, two pulse-noise realizations.
RunConfig small_run() {
    RunConfig c = preset_config("case1");
    c.protocol.n_stages = 24;
    c.spin_repetitions = 2;
    c.chunk_size = 1;
    c.seed = 77;
    return c;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(JINSECT_CLI) + " " + args + " > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
    RunConfig c = preset_config("case2");
    c.seed = 12345;
    c.noise.ou_relative_sigma = 0.02;
    c.toggles.crosstalk = false;
    c.analysis.noise_band_lo = 30;
    c.inference.sampler.n_kept = 1000;
    const auto j = config_to_json(c);
    const RunConfig d = config_from_json(nlohmann::json::parse(j.dump()));
    EXPECT_EQ(json_text(config_to_json(d)), json_text(j));
}

TEST(Config, UnknownKeysRejected) {
    const RunConfig base = preset_config("case1");
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"bogus": 1})"), base), ConfigError);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"protocol": {"tau": 1}})"), base), ConfigError);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"noise": {"ou": "yes"}})"), base), std::exception);
}

TEST(Config, InvalidValuesRejected) {
    RunConfig c = preset_config("case1");
    c.protocol.targeted_species = {"H", "N15"};
    EXPECT_THROW(validate_config(c), ConfigError);
    RunConfig d = preset_config("case1");
    d.spin_repetitions = 0;
    EXPECT_THROW(validate_config(d), ConfigError);
    EXPECT_THROW(preset_config("case3"), ConfigError);
}

TEST(Config, Presets) {
    EXPECT_EQ(preset_config("case1").protocol.targeted_species, (std::set<std::string>{"H", "C13"}));
    EXPECT_EQ(preset_config("case2").protocol.targeted_species, (std::set<std::string>{"H", "C13", "F19"}));
    const auto f = preset_config("fast");
    EXPECT_EQ(f.protocol.mode, ProtocolMode::fast);
    EXPECT_EQ(f.protocol.n_stages, 6553);
    EXPECT_NEAR(f.photon.estimator_std() / preset_config("case1").photon.estimator_std(), 2.0, 1e-12);
    EXPECT_EQ(preset_config("case1-fig2").photon.n_reps, 1000);
}

TEST(Predict, LineCounts) {
    const auto one = resonance_table(fluoromethanol(), {"H", "C13"});
    EXPECT_EQ(one["positive_lines"], 5);
    EXPECT_EQ(one["signed_peaks"], 10);
    const auto two = resonance_table(fluoromethanol(), {"H", "C13", "F19"});
    EXPECT_EQ(two["positive_lines"], 10);
    EXPECT_EQ(two["multiplicity_rule_peaks"], 20);
}

TEST(Csv, ReadBackAndErrors) {
    const auto dir = scratch("csv");
    write_text_atomic(dir / "a.csv", csv_text({"stage", "v"}, {{1, 2}, {0.1, 1.0 / 3.0}}, 1));
    const auto t = read_csv((dir / "a.csv").string());
    EXPECT_EQ(t.col("v")[1], 1.0 / 3.0);
    EXPECT_THROW(t.col("w"), ConfigError);
    write_text_atomic(dir / "b.csv", "x,y\n1,2\n3,oops\n");
    try {
        read_csv((dir / "b.csv").string());
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos);
    }
    EXPECT_THROW(read_csv((dir / "missing.csv").string()), ConfigError);
}

TEST(Simulate, SameSeedByteIdenticalOutputs) {
    const RunConfig c = small_run();
    const auto a = scratch("det_a"), b = scratch("det_b");
    write_simulation(c, simulate(c), a);
    write_simulation(c, simulate(c), b);
    for (const char* f : {"trace.csv", "field.csv", "signal.csv", "spectrum.csv", "peaks.json", "manifest.json"})
        EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
    RunConfig d = c;
    d.seed = 78;
    const auto e = scratch("det_e");
    write_simulation(d, simulate(d), e);
    EXPECT_NE(slurp(a / "signal.csv"), slurp(e / "signal.csv"));
}

TEST(Simulate, ManifestReproducesRun) {
    const RunConfig c = small_run();
    const auto a = scratch("manifest");
    write_simulation(c, simulate(c), a);
    const RunConfig d = load_config_file((a / "manifest.json").string());
    const auto b = scratch("manifest_b");
    write_simulation(d, simulate(d), b);
    EXPECT_EQ(slurp(a / "signal.csv"), slurp(b / "signal.csv"));
}

TEST(Simulate, ResumesFromCheckpoint) {
    const RunConfig c = small_run();
    const auto full = simulate(c);

    // checkpoint after the first realization, written the way the pipeline writes it
    const Schedule s = build_schedule(c.protocol, c.molecule);
    const auto rho0 = thermal_state(c.molecule, c.molecule.thermal_params(c.protocol.B_ext, c.protocol.temperature), {});
    const auto first = propagate(rho0, s, c.molecule, c.effective_noise(derived_seed(c.seed, 1, 0)));
    nlohmann::ordered_json j;
    j["config_hash"] = std::to_string(std::hash<std::string>{}(json_text(config_to_json(c))));
    j["completed"] = 1;
    for (const auto& v : first.M) j["sum_m"].push_back({fmt17(v(0)), fmt17(v(1)), fmt17(v(2))});
    const auto dir = scratch("ckpt");
    std::ofstream(dir / "checkpoint.json") << j.dump();

    const auto resumed = simulate(c, dir / "checkpoint.json");
    EXPECT_FALSE(fs::exists(dir / "checkpoint.json"));
    ASSERT_EQ(resumed.signal.size(), full.signal.size());
    for (std::size_t i = 0; i < full.signal.size(); ++i) EXPECT_EQ(resumed.signal[i], full.signal[i]);
}

TEST(Simulate, StaleCheckpointIgnored) {
    const RunConfig c = small_run();
    const auto dir = scratch("stale");
    std::ofstream(dir / "checkpoint.json") << R"({"config_hash":"0","completed":1,"sum_m":[]})";
    const auto r = simulate(c, dir / "checkpoint.json");
    EXPECT_EQ(r.signal, simulate(c).signal);
}

TEST(Simulate, NoiseFreeSnrIsInfinite) {
    RunConfig c = small_run();
    c.toggles.ou = c.toggles.readout = false;
    const auto r = simulate(c);
    EXPECT_TRUE(std::isinf(r.smallest_peak_snr));
    EXPECT_EQ(r.spin_runs, 1);
    EXPECT_EQ(r.signal, r.clean);
}

TEST(Infer, GridMismatchAndPolicy) {
    const RunConfig c = preset_config("case1");
    EXPECT_THROW(infer(c, {0.0, 1.0}, {0.0, 0.0}), ConfigError);
    RunConfig f = c;
    f.amplitude_policy = AmplitudePolicy::formula;
    EXPECT_THROW(infer(f, {}, {}), ConfigError);
}

TEST(Cli, ExitCodes) {
    const auto dir = scratch("cli");
    EXPECT_EQ(run_cli("predict --preset case2 --out " + dir.string()), 0);
    EXPECT_TRUE(fs::exists(dir / "resonances.json"));
    EXPECT_EQ(run_cli("predict --preset nonsense"), 2);
    EXPECT_EQ(run_cli("simulate --noise ou=maybe"), 2);
    EXPECT_EQ(run_cli("frobnicate"), 2);
    std::ofstream(dir / "bad.json") << R"({"protocol": {"n_stages": 10, "extra": 1}})";
    EXPECT_EQ(run_cli("simulate --config " + (dir / "bad.json").string()), 2);
    std::ofstream(dir / "short.csv") << "stage,t_s,estimate\n1,0.1,0.0\n";
    EXPECT_EQ(run_cli("infer --signal " + (dir / "short.csv").string()), 2);
}

TEST(Cli, SimulateThenSpectrum) {
    const auto dir = scratch("cli_sim");
    std::ofstream(dir / "cfg.json") << R"({"protocol": {"n_stages": 20}, "simulation": {"spin_repetitions": 1}})";
    ASSERT_EQ(run_cli("simulate --preset case1 --config " + (dir / "cfg.json").string() + " --seed 3 --out " + dir.string()), 0);
    for (const char* f : {"trace.csv", "field.csv", "signal.csv", "spectrum.csv", "peaks.json", "manifest.json"})
        EXPECT_TRUE(fs::exists(dir / f)) << f;
    const auto spec_dir = dir / "re";
    ASSERT_EQ(run_cli("spectrum --config " + (dir / "manifest.json").string() + " --input " + (dir / "signal.csv").string() +
                      " --out " + spec_dir.string()),
              0);
    EXPECT_EQ(slurp(dir / "spectrum.csv"), slurp(spec_dir / "spectrum.csv"));
}
