// jinsect: simulate, infer, predict, spectrum.
#include "jinsect/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace jinsect;

namespace {

struct Common {
    std::string preset, config, out;
    std::vector<std::string> noise;
    long long seed = -1;
    double reps = -1;
    int spin_reps = -1;
};

void add_common(CLI::App* app, Common& o) {
    app->add_option("--preset", o.preset, "case1, case2, case1-fig2, case2-fig2 or fast");
    app->add_option("--config", o.config, "JSON run config (overlays the preset)")->check(CLI::ExistingFile);
    app->add_option("--seed", o.seed, "master seed");
    app->add_option("--reps", o.reps, "protocol repetitions averaged by the photon readout");
    app->add_option("--spin-reps", o.spin_reps, "independent pulse-noise realizations averaged");
    app->add_option("--noise", o.noise, "per-source toggle: ou|crosstalk|t2|readout = on|off; all = every noise source except t2")->take_all();
    app->add_option("--out", o.out, "output directory");
}

RunConfig resolve(const Common& o) {
    RunConfig c = preset_config(o.preset.empty() ? "case1" : o.preset);
    if (!o.config.empty()) c = load_config_file(o.config, c);
    if (!o.preset.empty() && o.preset != c.preset) {
        // an explicit --preset wins over the preset named inside the config
        c = load_config_file(o.config, preset_config(o.preset));
        c.preset = o.preset;
    }
    if (o.seed >= 0) c.seed = std::uint64_t(o.seed);
    if (o.reps > 0) c.photon.n_reps = o.reps;
    if (o.spin_reps > 0) c.spin_repetitions = o.spin_reps;
    for (const auto& s : o.noise) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--noise expects src=on|off, got '" + s + "'");
        const auto src = s.substr(0, eq), val = s.substr(eq + 1);
        if (val != "on" && val != "off") throw ConfigError("--noise value must be on or off, got '" + val + "'");
        const bool on = val == "on";
        if (src == "ou") c.toggles.ou = on;
        else if (src == "crosstalk") c.toggles.crosstalk = on;
        else if (src == "t2") c.toggles.t2 = on;
        else if (src == "readout") c.toggles.readout = on;
        else if (src == "all") c.toggles.ou = c.toggles.crosstalk = c.toggles.readout = on;  // T2 decay is physics, not noise
        else throw ConfigError("unknown noise source '" + src + "'");
    }
    if (!o.out.empty()) c.out_dir = o.out;
    validate_config(c);
    return c;
}

void print_peaks(const SimulationResult& r) {
    std::cout << "peaks (Hz):";
    for (const auto& p : r.peaks) std::cout << " " << p.freq;
    std::cout << "\nsmallest-peak SNR: " << r.smallest_peak_snr << "  noise std: " << r.noise_std << "\n";
    for (const auto& [k, v] : r.estimate.j_hz) std::cout << k << " = " << v << " Hz\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Heterodyne J-coupling spectroscopy simulator"};
    app.require_subcommand(1);
    Common sim_o, inf_o, pre_o, spe_o;
    std::string signal_file, input_file;

    auto* sim = app.add_subcommand("simulate", "run the pipeline and export traces, spectrum and peaks");
    add_common(sim, sim_o);
    auto* inf = app.add_subcommand("infer", "posterior over the labelled couplings from a saved signal");
    add_common(inf, inf_o);
    inf->add_option("--signal", signal_file, "signal CSV (stage,t_s,estimate)")->required();
    auto* pre = app.add_subcommand("predict", "resonance table for the configured molecule and targets");
    add_common(pre, pre_o);
    auto* spe = app.add_subcommand("spectrum", "re-analyze a saved trace or signal");
    add_common(spe, spe_o);
    spe->add_option("--input", input_file, "trace.csv or signal.csv")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*sim) {
            const RunConfig c = resolve(sim_o);
            const std::filesystem::path dir = c.out_dir;
            std::filesystem::create_directories(dir);
            const auto r = simulate(c, dir / "checkpoint.json");
            write_simulation(c, r, dir);
            print_peaks(r);
        } else if (*inf) {
            const RunConfig c = resolve(inf_o);
            if (!std::filesystem::exists(signal_file)) throw ConfigError("signal file '" + signal_file + "' not found");
            const auto t = read_csv(signal_file);
            const auto p = infer(c, t.col("t_s"), signal_column(t));
            write_posterior(p, inference_sigma(c), c.out_dir);
            for (std::size_t k = 0; k < p.names.size(); ++k)
                std::cout << p.names[k] << " = " << p.mean[k] << " +- " << p.sigma[k] << " Hz  (Rhat " << p.rhat[k] << ")\n";
            if (!p.converged) {
                std::cerr << "chains did not converge\n";
                return 4;
            }
        } else if (*pre) {
            const RunConfig c = resolve(pre_o);
            const auto j = resonance_table(c.molecule, c.protocol.targeted_species);
            std::filesystem::create_directories(c.out_dir);
            write_text_atomic(std::filesystem::path(c.out_dir) / "resonances.json", json_text(j));
            for (const auto& l : j["lines"])
                if (l["freq_hz"].get<double>() > 0) std::cout << l["freq_hz"].get<double>() << " Hz\n";
        } else if (*spe) {
            const RunConfig c = resolve(spe_o);
            const auto t = read_csv(input_file);
            SimulationResult r;
            r.schedule = build_schedule(c.protocol, c.molecule);
            r.signal = signal_column(t);
            analyze(c, r);
            const std::filesystem::path dir = c.out_dir;
            std::filesystem::create_directories(dir);
            write_text_atomic(dir / "spectrum.csv", csv_text({"freq_hz", "magnitude"}, {r.spec.freqs, r.spec.magnitude}));
            write_text_atomic(dir / "peaks.json", json_text(peak_report(c, r)));
            print_peaks(r);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const RegimeError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const ConvergenceError& e) {
        std::cerr << e.what() << "\n";
        return 4;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
