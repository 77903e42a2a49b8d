#pragma once

#include "jinsect/analysis.hpp"
#include "jinsect/emission.hpp"
#include "jinsect/inference.hpp"
#include "jinsect/nv_readout.hpp"

#include <cstdio>
#include <filesystem>
#include <sstream>

namespace jinsect {

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ConvergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class AmplitudePolicy { anchored, formula };

struct NoiseToggles {
    bool ou = true;
    bool crosstalk = true;
    bool t2 = true;
    bool readout = true;
};

struct AnalysisConfig {
    int zero_pad_factor = 4;
    double peak_rel_threshold = 0.1;   // fraction of the spectrum maximum
    double peak_noise_multiple = 5.0;  // threshold above the band mean, in band standard deviations
    double min_peak_separation_hz = 0.6;  // just above the 1/(pi T2) half width
    double noise_band_lo = 35.0, noise_band_hi = 55.0;  // Hz, free of lines for both cases
    double assignment_window_hz = 1.5;
};

struct InferenceConfig {
    PriorSpec prior{{"J", "J1", "J2"}, {5.0, 127.0, 3.0}, {11.0, 133.0, 9.0}};
    SamplerOptions sampler;
    double noise_sigma = 0;  // 0 = photon-model estimator std
};

struct RunConfig {
    std::string preset;
    std::uint64_t seed = 1;
    std::string out_dir = "out";
    std::string molecule_file;  // empty = bundled fluoromethanol
    Molecule molecule = fluoromethanol();
    ProtocolConfig protocol;
    bool ideal_pulses = false;
    NoiseConfig noise;
    NoiseToggles toggles;
    PhotonModel photon;
    AmplitudePolicy amplitude_policy = AmplitudePolicy::anchored;
    double anchored_amplitude = 1e-3;
    SampleConstants sample;
    XY4Config xy4 = XY4Config::for_rabi(two_pi * 50e3);
    int spin_repetitions = 4;
    int chunk_size = 2;
    AnalysisConfig analysis;
    InferenceConfig inference;

    NoiseConfig effective_noise(std::uint64_t rep_seed) const {
        NoiseConfig n = noise;
        n.ou_enabled = toggles.ou && noise.ou_enabled;
        n.cross_talk_enabled = toggles.crosstalk && noise.cross_talk_enabled;
        n.rng_seed = rep_seed;
        return n;
    }
    int spin_runs() const { return (toggles.ou && noise.ou_active() && !ideal_pulses) ? spin_repetitions : 1; }
};

// ---------------------------------------------------------------------------
// Presets

inline RunConfig preset_config(const std::string& name) {
    RunConfig c;
    c.preset = name;
    c.protocol.tau = 1.2 / 276.0;
    c.protocol.n_stages = 600;
    if (name == "case1" || name == "case1-fig2") {
        c.protocol.targeted_species = {"H", "C13"};
    } else if (name == "case2" || name == "case2-fig2") {
        c.protocol.targeted_species = {"H", "C13", "F19"};
    } else if (name == "fast") {
        c.protocol.targeted_species = {"H", "C13"};
        c.protocol.mode = ProtocolMode::fast;
        c.protocol.tau = 75e-6;
        c.protocol.n_stages = 6553;
        c.photon.n_reps = 18000.0 / 4.0;  // four times fewer repetitions: noise doubled
        c.spin_repetitions = 2;
        c.chunk_size = 1;
        c.inference.sampler.grid_step = 0.5;  // seeds the chains only; Nelder-Mead refines
    } else {
        throw ConfigError("unknown preset '" + name + "' (case1, case2, case1-fig2, case2-fig2, fast)");
    }
    if (name.ends_with("-fig2")) c.photon.n_reps = 1000;
    c.out_dir = "out/" + name;
    return c;
}

// ---------------------------------------------------------------------------
// JSON round trip. Unknown keys are rejected at every level.

namespace detail {

inline void strict(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
    try {
        reject_unknown_keys(j, allowed, where);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

inline std::string mode_name(ProtocolMode m) { return m == ProtocolMode::standard ? "standard" : "fast"; }

}  // namespace detail

inline nlohmann::ordered_json config_to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["preset"] = c.preset;
    j["seed"] = c.seed;
    j["out"] = c.out_dir;
    j["molecule"] = molecule_to_json(c.molecule);
    const auto& p = c.protocol;
    j["protocol"] = {{"tau_s", p.tau},
                     {"n_stages", p.n_stages},
                     {"omega_h_hz", p.omega_H / two_pi},
                     {"targeted_species", std::vector<std::string>(p.targeted_species.begin(), p.targeted_species.end())},
                     {"mode", detail::mode_name(p.mode)},
                     {"b_ext_t", p.B_ext},
                     {"t2_s", p.T2},
                     {"temperature_k", p.temperature},
                     {"alignment", p.alignment == Alignment::midpoint ? "midpoint" : "leading_edge"},
                     {"ideal_pulses", c.ideal_pulses}};
    j["noise"] = {{"ou", c.toggles.ou},
                  {"ou_relative_sigma", c.noise.ou_relative_sigma},
                  {"ou_correlation_time_s", c.noise.ou_correlation_time},
                  {"independent_channels", c.noise.independent_channels},
                  {"crosstalk", c.toggles.crosstalk},
                  {"crosstalk_mode", c.noise.cross_talk_mode == CrossTalkMode::effective ? "effective" : "resolved"},
                  {"t2", c.toggles.t2},
                  {"readout", c.toggles.readout}};
    j["photon"] = {{"n0", c.photon.n0},
                   {"contrast", c.photon.contrast},
                   {"n_nv", c.photon.n_nv},
                   {"n_reps", c.photon.n_reps},
                   {"exact_poisson", c.photon.exact_poisson}};
    j["readout"] = {{"amplitude_policy", c.amplitude_policy == AmplitudePolicy::anchored ? "anchored" : "formula"},
                    {"anchored_amplitude", c.anchored_amplitude},
                    {"gamma_e_ghz_per_t", c.xy4.gamma_e / two_pi / 1e9}};
    j["sample"] = {{"rho_h_per_m3", c.sample.rho_H}, {"f3", c.sample.F3}};
    j["simulation"] = {{"spin_repetitions", c.spin_repetitions}, {"chunk_size", c.chunk_size}};
    const auto& a = c.analysis;
    j["analysis"] = {{"zero_pad_factor", a.zero_pad_factor},
                     {"peak_rel_threshold", a.peak_rel_threshold},
                     {"peak_noise_multiple", a.peak_noise_multiple},
                     {"min_peak_separation_hz", a.min_peak_separation_hz},
                     {"noise_band_hz", {a.noise_band_lo, a.noise_band_hi}},
                     {"assignment_window_hz", a.assignment_window_hz}};
    const auto& in = c.inference;
    j["inference"] = {{"labels", in.prior.names},
                      {"prior_lower_hz", in.prior.lower},
                      {"prior_upper_hz", in.prior.upper},
                      {"noise_sigma", in.noise_sigma},
                      {"n_chains", in.sampler.n_chains},
                      {"n_kept", in.sampler.n_kept},
                      {"burn_in", in.sampler.burn_in},
                      {"adapt_interval", in.sampler.adapt_interval},
                      {"grid_step_hz", in.sampler.grid_step},
                      {"step_scale", in.sampler.step_scale},
                      {"rhat_threshold", in.sampler.rhat_threshold}};
    return j;
}

// Overlays j onto base. A "preset" key resets the base first.
inline RunConfig config_from_json(const nlohmann::json& j, RunConfig base = RunConfig{}, const std::string& origin = "config") {
    using detail::read;
    detail::strict(j, {"preset", "seed", "out", "molecule", "molecule_file", "protocol", "noise", "photon", "readout",
                       "sample", "simulation", "analysis", "inference"},
                   origin);
    RunConfig c = base;
    if (j.contains("preset") && !j.at("preset").get<std::string>().empty()) {
        const auto name = j.at("preset").get<std::string>();
        if (name != c.preset) c = preset_config(name);
    }
    read(j, "seed", c.seed, origin);
    read(j, "out", c.out_dir, origin);
    if (j.contains("molecule_file")) {
        c.molecule_file = j.at("molecule_file").get<std::string>();
        try {
            c.molecule = load_molecule(c.molecule_file);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
    if (j.contains("molecule")) {
        try {
            c.molecule = molecule_from_json(j.at("molecule"));
        } catch (const std::exception& e) {
            throw ConfigError(origin + ".molecule: " + e.what());
        }
    }
    if (j.contains("protocol")) {
        const auto& p = j.at("protocol");
        const std::string w = origin + ".protocol";
        detail::strict(p, {"tau_s", "n_stages", "omega_h_hz", "targeted_species", "mode", "b_ext_t", "t2_s",
                           "temperature_k", "alignment", "ideal_pulses"},
                       w);
        read(p, "tau_s", c.protocol.tau, w);
        read(p, "n_stages", c.protocol.n_stages, w);
        if (p.contains("omega_h_hz")) c.protocol.omega_H = two_pi * p.at("omega_h_hz").get<double>();
        if (p.contains("targeted_species")) {
            auto v = p.at("targeted_species").get<std::vector<std::string>>();
            c.protocol.targeted_species = std::set<std::string>(v.begin(), v.end());
        }
        if (p.contains("mode")) {
            const auto m = p.at("mode").get<std::string>();
            if (m == "standard") c.protocol.mode = ProtocolMode::standard;
            else if (m == "fast") c.protocol.mode = ProtocolMode::fast;
            else throw ConfigError(w + ".mode: expected standard or fast");
        }
        read(p, "b_ext_t", c.protocol.B_ext, w);
        read(p, "t2_s", c.protocol.T2, w);
        read(p, "temperature_k", c.protocol.temperature, w);
        if (p.contains("alignment")) {
            const auto a = p.at("alignment").get<std::string>();
            if (a == "midpoint") c.protocol.alignment = Alignment::midpoint;
            else if (a == "leading_edge") c.protocol.alignment = Alignment::leading_edge;
            else throw ConfigError(w + ".alignment: expected midpoint or leading_edge");
        }
        read(p, "ideal_pulses", c.ideal_pulses, w);
    }
    if (j.contains("noise")) {
        const auto& n = j.at("noise");
        const std::string w = origin + ".noise";
        detail::strict(n, {"ou", "ou_relative_sigma", "ou_correlation_time_s", "independent_channels", "crosstalk",
                           "crosstalk_mode", "t2", "readout"},
                       w);
        read(n, "ou", c.toggles.ou, w);
        read(n, "ou_relative_sigma", c.noise.ou_relative_sigma, w);
        read(n, "ou_correlation_time_s", c.noise.ou_correlation_time, w);
        read(n, "independent_channels", c.noise.independent_channels, w);
        read(n, "crosstalk", c.toggles.crosstalk, w);
        if (n.contains("crosstalk_mode")) {
            const auto m = n.at("crosstalk_mode").get<std::string>();
            if (m == "effective") c.noise.cross_talk_mode = CrossTalkMode::effective;
            else if (m == "resolved") c.noise.cross_talk_mode = CrossTalkMode::resolved;
            else throw ConfigError(w + ".crosstalk_mode: expected effective or resolved");
        }
        read(n, "t2", c.toggles.t2, w);
        read(n, "readout", c.toggles.readout, w);
    }
    if (j.contains("photon")) {
        const auto& p = j.at("photon");
        const std::string w = origin + ".photon";
        detail::strict(p, {"n0", "contrast", "n_nv", "n_reps", "exact_poisson"}, w);
        read(p, "n0", c.photon.n0, w);
        read(p, "contrast", c.photon.contrast, w);
        read(p, "n_nv", c.photon.n_nv, w);
        read(p, "n_reps", c.photon.n_reps, w);
        read(p, "exact_poisson", c.photon.exact_poisson, w);
    }
    if (j.contains("readout")) {
        const auto& r = j.at("readout");
        const std::string w = origin + ".readout";
        detail::strict(r, {"amplitude_policy", "anchored_amplitude", "gamma_e_ghz_per_t"}, w);
        if (r.contains("amplitude_policy")) {
            const auto m = r.at("amplitude_policy").get<std::string>();
            if (m == "anchored") c.amplitude_policy = AmplitudePolicy::anchored;
            else if (m == "formula") c.amplitude_policy = AmplitudePolicy::formula;
            else throw ConfigError(w + ".amplitude_policy: expected anchored or formula");
        }
        read(r, "anchored_amplitude", c.anchored_amplitude, w);
        if (r.contains("gamma_e_ghz_per_t")) c.xy4.gamma_e = two_pi * 1e9 * r.at("gamma_e_ghz_per_t").get<double>();
    }
    if (j.contains("sample")) {
        const auto& s = j.at("sample");
        const std::string w = origin + ".sample";
        detail::strict(s, {"rho_h_per_m3", "f3"}, w);
        read(s, "rho_h_per_m3", c.sample.rho_H, w);
        read(s, "f3", c.sample.F3, w);
    }
    if (j.contains("simulation")) {
        const auto& s = j.at("simulation");
        const std::string w = origin + ".simulation";
        detail::strict(s, {"spin_repetitions", "chunk_size"}, w);
        read(s, "spin_repetitions", c.spin_repetitions, w);
        read(s, "chunk_size", c.chunk_size, w);
    }
    if (j.contains("analysis")) {
        const auto& a = j.at("analysis");
        const std::string w = origin + ".analysis";
        detail::strict(a, {"zero_pad_factor", "peak_rel_threshold", "peak_noise_multiple", "min_peak_separation_hz", "noise_band_hz",
                           "assignment_window_hz"},
                       w);
        read(a, "zero_pad_factor", c.analysis.zero_pad_factor, w);
        read(a, "peak_rel_threshold", c.analysis.peak_rel_threshold, w);
        read(a, "peak_noise_multiple", c.analysis.peak_noise_multiple, w);
        read(a, "min_peak_separation_hz", c.analysis.min_peak_separation_hz, w);
        if (a.contains("noise_band_hz")) {
            auto b = a.at("noise_band_hz").get<std::vector<double>>();
            if (b.size() != 2) throw ConfigError(w + ".noise_band_hz: expected [lo, hi]");
            c.analysis.noise_band_lo = b[0];
            c.analysis.noise_band_hi = b[1];
        }
        read(a, "assignment_window_hz", c.analysis.assignment_window_hz, w);
    }
    if (j.contains("inference")) {
        const auto& in = j.at("inference");
        const std::string w = origin + ".inference";
        detail::strict(in, {"labels", "prior_lower_hz", "prior_upper_hz", "noise_sigma", "n_chains", "n_kept",
                            "burn_in", "adapt_interval", "grid_step_hz", "step_scale", "rhat_threshold"},
                       w);
        read(in, "labels", c.inference.prior.names, w);
        read(in, "prior_lower_hz", c.inference.prior.lower, w);
        read(in, "prior_upper_hz", c.inference.prior.upper, w);
        read(in, "noise_sigma", c.inference.noise_sigma, w);
        read(in, "n_chains", c.inference.sampler.n_chains, w);
        read(in, "n_kept", c.inference.sampler.n_kept, w);
        read(in, "burn_in", c.inference.sampler.burn_in, w);
        read(in, "adapt_interval", c.inference.sampler.adapt_interval, w);
        read(in, "grid_step_hz", c.inference.sampler.grid_step, w);
        read(in, "step_scale", c.inference.sampler.step_scale, w);
        read(in, "rhat_threshold", c.inference.sampler.rhat_threshold, w);
    }
    c.xy4 = [&] {
        XY4Config x = XY4Config::for_rabi(c.protocol.omega_H);
        x.gamma_e = c.xy4.gamma_e;
        return x;
    }();
    c.sample.B_ext = c.protocol.B_ext;
    c.sample.temperature = c.protocol.temperature;
    c.sample.gamma_H = c.molecule.gamma_of("H");
    return c;
}

inline void validate_config(const RunConfig& c) {
    try {
        c.protocol.validate();
        c.noise.validate();
        c.photon.validate();
        c.inference.prior.validate();
        c.molecule.validate();
        if (c.spin_repetitions < 1 || c.chunk_size < 1) throw std::invalid_argument("repetition counts must be >= 1");
        if (c.analysis.zero_pad_factor < 1) throw std::invalid_argument("zero_pad_factor must be >= 1");
        if (!(c.analysis.noise_band_lo < c.analysis.noise_band_hi)) throw std::invalid_argument("empty noise band");
        if (c.inference.sampler.n_chains < 2) throw std::invalid_argument("need at least two chains");
        for (const auto& sp : c.protocol.targeted_species)
            if (!c.molecule.has_species(sp)) throw std::invalid_argument("targeted species '" + sp + "' not in molecule");
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = RunConfig{}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return config_from_json(j, std::move(base), path);
}

// ---------------------------------------------------------------------------
// Output helpers: fixed 17 significant digits.

inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write '" + tmp + "'");
        out << text;
    }
    std::filesystem::rename(tmp, path);
}

inline std::string json_text(const nlohmann::ordered_json& j) {
    // Doubles through fmt17 so files are byte-stable.
    std::function<nlohmann::ordered_json(const nlohmann::ordered_json&)> fix = [&](const nlohmann::ordered_json& v) {
        if (v.is_number_float()) {
            const double d = v.get<double>();
            if (!std::isfinite(d)) return nlohmann::ordered_json(std::isnan(d) ? "nan" : (d > 0 ? "inf" : "-inf"));
            return nlohmann::ordered_json::parse(fmt17(d));
        }
        if (v.is_object()) {
            nlohmann::ordered_json o = nlohmann::ordered_json::object();
            for (auto it = v.begin(); it != v.end(); ++it) o[it.key()] = fix(it.value());
            return o;
        }
        if (v.is_array()) {
            nlohmann::ordered_json a = nlohmann::ordered_json::array();
            for (const auto& e : v) a.push_back(fix(e));
            return a;
        }
        return v;
    };
    return fix(j).dump(2) + "\n";
}

inline std::string csv_text(const std::vector<std::string>& header, const std::vector<std::vector<double>>& cols,
                            std::size_t int_cols = 0) {
    std::ostringstream s;
    for (std::size_t k = 0; k < header.size(); ++k) s << (k ? "," : "") << header[k];
    s << "\n";
    const std::size_t n = cols.empty() ? 0 : cols.front().size();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < cols.size(); ++k) {
            if (k) s << ",";
            if (k < int_cols) s << static_cast<long long>(cols[k][i]);
            else s << fmt17(cols[k][i]);
        }
        s << "\n";
    }
    return s.str();
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> cols;
    const std::vector<double>& col(const std::string& name) const {
        for (std::size_t k = 0; k < header.size(); ++k)
            if (header[k] == name) return cols[k];
        throw ConfigError("CSV column '" + name + "' missing");
    }
    bool has(const std::string& name) const { return std::find(header.begin(), header.end(), name) != header.end(); }
};

inline CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open '" + path + "'");
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) throw ConfigError(path + ": empty file");
    std::stringstream hs(line);
    for (std::string f; std::getline(hs, f, ',');) t.header.push_back(f);
    t.cols.resize(t.header.size());
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ls(line);
        std::size_t k = 0;
        for (std::string f; std::getline(ls, f, ','); ++k) {
            if (k >= t.cols.size()) throw ConfigError(path + ":" + std::to_string(lineno) + ": too many fields");
            try {
                t.cols[k].push_back(std::stod(f));
            } catch (const std::exception&) {
                throw ConfigError(path + ":" + std::to_string(lineno) + ": bad number '" + f + "'");
            }
        }
        if (k != t.cols.size()) throw ConfigError(path + ":" + std::to_string(lineno) + ": too few fields");
    }
    return t;
}

// ---------------------------------------------------------------------------
// Pipeline stages.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derived_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
    return splitmix64(splitmix64(seed ^ (stream * 0xD1B54A32D192ED03ULL)) + index);
}

struct SimulationResult {
    Schedule schedule;
    MagnetizationTrace trace;       // averaged over spin repetitions
    std::vector<double> m;          // M_x / (B_H / 2)
    FieldTrace field;               // emitted amplitude after the T2 envelope
    std::vector<double> clean;      // noise-free readout signal
    std::vector<double> signal;     // photon-limited estimate
    Spectrum spec;
    std::vector<Peak> peaks;        // positive frequency
    std::vector<double> peak_snr;
    double noise_std = 0;           // |S| standard deviation in the noise band
    double readout_std = 0;         // per-sample estimator std of the photon model
    double smallest_peak_snr = std::numeric_limits<double>::infinity();
    std::vector<Resonance> predicted;
    CouplingEstimate estimate;
    int spin_runs = 0;
};

inline double hydrogen_polarization(const RunConfig& c) {
    return thermal_polarization(c.molecule.gamma_of("H"), c.protocol.B_ext, c.protocol.temperature);
}

// Averaged magnetization over the OU realizations, chunked with optional checkpointing.
inline MagnetizationTrace simulate_magnetization(const RunConfig& c, const Schedule& s,
                                                 const std::filesystem::path& checkpoint = {}) {
    const int runs = c.spin_runs();
    const DensityMatrix rho0 = thermal_state(c.molecule, c.molecule.thermal_params(c.protocol.B_ext, c.protocol.temperature), {});
    PropagationOptions opt;
    opt.ideal_pulses = c.ideal_pulses;
    const std::string tag = json_text(config_to_json(c));
    const std::string tag_hash = std::to_string(std::hash<std::string>{}(tag));

    int done = 0;
    std::vector<Eigen::Vector3d> sum;
    MagnetizationTrace shape;
    if (!checkpoint.empty() && std::filesystem::exists(checkpoint)) {
        std::ifstream in(checkpoint);
        auto j = nlohmann::json::parse(in);
        if (j.value("config_hash", "") == tag_hash) {
            done = j.at("completed").get<int>();
            for (const auto& v : j.at("sum_m"))
                sum.emplace_back(std::stod(v[0].get<std::string>()), std::stod(v[1].get<std::string>()),
                                 std::stod(v[2].get<std::string>()));
        }
    }
    const int workers = worker_count(0);
    while (done < runs || shape.t.empty()) {
        const int chunk = done < runs ? std::min(c.chunk_size, runs - done) : 1;
        const int base = done < runs ? done : 0;
        std::vector<MagnetizationTrace> res(chunk);
        std::vector<std::exception_ptr> errs(chunk);
        std::atomic<int> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < std::min(workers, chunk); ++w)
            pool.emplace_back([&] {
                for (int k; (k = next++) < chunk;) {
                    try {
                        const NoiseConfig nc = c.effective_noise(derived_seed(c.seed, 1, std::uint64_t(base + k)));
                        res[k] = propagate(rho0, s, c.molecule, nc, opt);
                    } catch (...) {
                        errs[k] = std::current_exception();
                    }
                }
            });
        for (auto& t : pool) t.join();
        for (auto& e : errs)
            if (e) std::rethrow_exception(e);
        shape = res.front();
        if (done >= runs) break;  // resumed after completion: shape only
        if (sum.empty()) sum.assign(shape.size(), Eigen::Vector3d::Zero());
        for (const auto& r : res)
            for (std::size_t i = 0; i < r.size(); ++i) sum[i] += r.M[i];
        done += chunk;
        if (!checkpoint.empty() && done < runs) {
            nlohmann::ordered_json j;
            j["config_hash"] = tag_hash;
            j["completed"] = done;
            j["sum_m"] = nlohmann::ordered_json::array();
            for (const auto& v : sum) j["sum_m"].push_back({fmt17(v(0)), fmt17(v(1)), fmt17(v(2))});
            write_text_atomic(checkpoint, j.dump() + "\n");
        }
    }
    if (!checkpoint.empty() && std::filesystem::exists(checkpoint)) std::filesystem::remove(checkpoint);
    MagnetizationTrace avg = shape;
    for (std::size_t i = 0; i < avg.size(); ++i) avg.M[i] = sum[i] / double(runs);
    return avg;
}

inline double readout_from_field(const RunConfig& c, double m, double envelope) {
    if (c.amplitude_policy == AmplitudePolicy::anchored) return c.anchored_amplitude * m * envelope;
    return xy4_response(b0_amplitude(m, c.sample) * envelope, c.xy4);
}

inline double min_peak_height(const RunConfig& c, const Spectrum& sp) {
    const double mx = *std::max_element(sp.magnitude.begin(), sp.magnitude.end());
    double sum = 0, n = 0;
    for (std::size_t i = 0; i < sp.size(); ++i)
        if (sp.freqs[i] >= c.analysis.noise_band_lo && sp.freqs[i] <= c.analysis.noise_band_hi) sum += sp.magnitude[i], ++n;
    const double band_mean = n > 0 ? sum / n : 0.0;
    const double sd = noise_floor(sp, c.analysis.noise_band_lo, c.analysis.noise_band_hi);
    return std::max({c.analysis.peak_rel_threshold * mx, band_mean + c.analysis.peak_noise_multiple * sd,
                     std::numeric_limits<double>::min()});
}

inline void analyze(const RunConfig& c, SimulationResult& r) {
    r.spec = spectrum(r.signal, r.schedule.sample_interval, c.analysis.zero_pad_factor);
    r.noise_std = noise_floor(r.spec, c.analysis.noise_band_lo, c.analysis.noise_band_hi);
    r.peaks = positive_peaks(merge_close_peaks(find_peaks(r.spec, min_peak_height(c, r.spec)),
                                               c.analysis.min_peak_separation_hz));
    // Without a stochastic source the band spread is deterministic line tails, not noise.
    const bool noise_free = !c.toggles.readout && !(c.toggles.ou && c.noise.ou_active());
    r.peak_snr.clear();
    for (const auto& p : r.peaks)
        r.peak_snr.push_back(noise_free ? std::numeric_limits<double>::infinity()
                                        : measure_snr(r.spec, p, c.analysis.noise_band_lo, c.analysis.noise_band_hi));
    r.smallest_peak_snr = std::numeric_limits<double>::infinity();
    if (!r.peaks.empty()) {
        auto it = std::min_element(r.peaks.begin(), r.peaks.end(), [](const Peak& a, const Peak& b) { return a.height < b.height; });
        r.smallest_peak_snr = r.peak_snr[std::size_t(it - r.peaks.begin())];
    }
    r.predicted = predict_resonances(c.molecule, c.protocol.targeted_species);
    std::vector<std::string> labels;
    for (const auto& e : effective_couplings(c.molecule, c.protocol.targeted_species))
        if (std::find(labels.begin(), labels.end(), e.label) == labels.end()) labels.push_back(e.label);
    std::sort(labels.begin(), labels.end());
    if (c.protocol.mode == ProtocolMode::standard)
        r.estimate = estimate_couplings(r.peaks, r.predicted, labels, c.analysis.assignment_window_hz);
}

inline SimulationResult simulate(const RunConfig& c, const std::filesystem::path& checkpoint = {}) {
    validate_config(c);
    SimulationResult r;
    r.schedule = build_schedule(c.protocol, c.molecule);
    r.trace = simulate_magnetization(c, r.schedule, checkpoint);
    r.spin_runs = c.spin_runs();
    const double bh = hydrogen_polarization(c);
    std::mt19937_64 rng(derived_seed(c.seed, 2));
    for (std::size_t i = 0; i < r.trace.size(); ++i) {
        const double m = r.trace.M[i](0) / (bh / 2.0);
        const double env = c.toggles.t2 ? std::exp(-r.trace.t[i] / c.protocol.T2) : 1.0;
        r.m.push_back(m);
        r.field.t.push_back(r.trace.t[i]);
        r.field.B0.push_back(b0_amplitude(m, c.sample));
        r.clean.push_back(readout_from_field(c, m, env));
    }
    if (c.toggles.t2) r.field = apply_t2(r.field, c.protocol.T2);
    PhotonModel pm = c.photon;
    pm.noiseless = !c.toggles.readout;
    r.signal = photon_readout(r.clean, pm, rng);
    r.readout_std = c.toggles.readout ? pm.estimator_std(0.0) : 0.0;
    analyze(c, r);
    return r;
}

inline nlohmann::ordered_json peak_report(const RunConfig& c, const SimulationResult& r) {
    nlohmann::ordered_json j;
    j["sample_interval_s"] = r.schedule.sample_interval;
    j["noise_band_hz"] = {c.analysis.noise_band_lo, c.analysis.noise_band_hi};
    j["noise_std"] = r.noise_std;
    j["readout_estimator_std"] = r.readout_std;
    j["spin_repetitions"] = r.spin_runs;
    j["peaks"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < r.peaks.size(); ++i)
        j["peaks"].push_back({{"freq", r.peaks[i].freq},
                              {"height", r.peaks[i].height},
                              {"fwhm", r.peaks[i].fwhm},
                              {"snr", r.peak_snr[i]}});
    j["smallest_peak_snr"] = r.smallest_peak_snr;
    j["predicted"] = nlohmann::ordered_json::array();
    for (const auto& p : r.predicted) j["predicted"].push_back({{"freq", p.freq_hz}, {"amplitude", p.amplitude}});
    if (!r.estimate.j_hz.empty()) {
        nlohmann::ordered_json e;
        for (const auto& [k, v] : r.estimate.j_hz) e[k] = v;
        j["coupling_estimates_hz"] = e;
        j["assigned_lines"] = r.estimate.n_assigned;
        j["assignment_rms_hz"] = r.estimate.rms_residual_hz;
    }
    return j;
}

inline void write_simulation(const RunConfig& c, const SimulationResult& r, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<double> stage, t, mx, my, mz;
    for (std::size_t i = 0; i < r.trace.size(); ++i) {
        stage.push_back(r.trace.stage[i]);
        t.push_back(r.trace.t[i]);
        mx.push_back(r.trace.M[i](0));
        my.push_back(r.trace.M[i](1));
        mz.push_back(r.trace.M[i](2));
    }
    write_text_atomic(dir / "trace.csv", csv_text({"stage", "t_s", "M_x", "M_y", "M_z"}, {stage, t, mx, my, mz}, 1));
    write_text_atomic(dir / "field.csv", csv_text({"stage", "t_s", "B0_T"}, {stage, r.field.t, r.field.B0}, 1));
    write_text_atomic(dir / "signal.csv", csv_text({"stage", "t_s", "estimate"}, {stage, t, r.signal}, 1));
    write_text_atomic(dir / "spectrum.csv", csv_text({"freq_hz", "magnitude"}, {r.spec.freqs, r.spec.magnitude}));
    write_text_atomic(dir / "peaks.json", json_text(peak_report(c, r)));
    write_text_atomic(dir / "manifest.json", json_text(config_to_json(c)));
}

inline std::vector<double> signal_column(const CsvTable& t) {
    if (t.has("estimate")) return t.col("estimate");
    if (t.has("M_x")) return t.col("M_x");
    throw ConfigError("signal file needs an 'estimate' or 'M_x' column");
}

inline ForwardSpec forward_spec(const RunConfig& c) {
    ForwardSpec fs;
    fs.molecule = c.molecule;
    fs.protocol = c.protocol;
    fs.labels = c.inference.prior.names;
    fs.amplitude = c.anchored_amplitude;
    fs.apply_t2 = c.toggles.t2;
    fs.cross_talk = c.toggles.crosstalk && c.noise.cross_talk_enabled;
    return fs;
}

inline double inference_sigma(const RunConfig& c) {
    return c.inference.noise_sigma > 0 ? c.inference.noise_sigma : c.photon.estimator_std(0.0);
}

inline Posterior infer(const RunConfig& c, const std::vector<double>& times, const std::vector<double>& data) {
    validate_config(c);
    if (c.amplitude_policy != AmplitudePolicy::anchored)
        throw ConfigError("inference supports the anchored amplitude policy only");
    ForwardModel fm(forward_spec(c));
    if (times.size() != fm.n_samples()) throw ConfigError("signal grid mismatch: sample count differs from the protocol");
    for (std::size_t i = 0; i < times.size(); ++i)
        if (std::abs(times[i] - fm.times()[i]) > 1e-9 * std::max(1.0, fm.times()[i]))
            throw ConfigError("signal grid mismatch at sample " + std::to_string(i));
    SamplerOptions so = c.inference.sampler;
    so.seed = derived_seed(c.seed, 3);
    return posterior(data, c.inference.prior, inference_sigma(c), fm, so);
}

inline nlohmann::ordered_json posterior_summary(const Posterior& p, double sigma) {
    nlohmann::ordered_json j;
    j["noise_sigma"] = sigma;
    for (std::size_t k = 0; k < p.names.size(); ++k)
        j["parameters"][p.names[k]] = {{"mean_hz", p.mean[k]}, {"sigma_hz", p.sigma[k]}, {"rhat", p.rhat[k]},
                                       {"map_hz", p.map_estimate[k]}};
    j["kept_samples"] = p.samples.size();
    j["acceptance"] = p.acceptance;
    j["converged"] = p.converged;
    j["likelihood_evaluations"] = p.n_evaluations;
    return j;
}

inline void write_posterior(const Posterior& p, double sigma, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<std::string> header{"chain"};
    for (const auto& n : p.names) header.push_back(n + "_hz");
    std::vector<std::vector<double>> cols(header.size());
    for (std::size_t i = 0; i < p.samples.size(); ++i) {
        cols[0].push_back(p.chain[i]);
        for (std::size_t k = 0; k < p.names.size(); ++k) cols[k + 1].push_back(p.samples[i][k]);
    }
    write_text_atomic(dir / "posterior_samples.csv", csv_text(header, cols, 1));
    write_text_atomic(dir / "posterior.json", json_text(posterior_summary(p, sigma)));
}

inline nlohmann::ordered_json resonance_table(const Molecule& mol, const std::set<std::string>& targeted) {
    const auto lines = predict_resonances(mol, targeted);
    nlohmann::ordered_json j;
    j["lines"] = nlohmann::ordered_json::array();
    for (const auto& l : lines) {
        nlohmann::ordered_json c = nlohmann::ordered_json::object();
        for (const auto& [k, v] : l.coefficients) c[k] = v;
        j["lines"].push_back({{"freq_hz", l.freq_hz}, {"amplitude", l.amplitude}, {"coefficients_half_j", c}});
    }
    int positive = 0;
    for (const auto& l : lines) positive += l.freq_hz > 0;
    j["positive_lines"] = positive;
    j["signed_peaks"] = signed_peak_count(lines);
    j["multiplicity_rule_peaks"] = multiplicity_peak_count(mol, targeted);
    return j;
}

}  // namespace jinsect
