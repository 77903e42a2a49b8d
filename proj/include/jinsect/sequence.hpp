#pragma once

#include "jinsect/molecule.hpp"

#include <variant>

namespace jinsect {

enum class PulseShape { top_hat, corpse };
enum class ProtocolMode { standard, fast };
enum class Alignment { midpoint, leading_edge };

// One piece of constant drive inside a pulse slot, times relative to the slot start.
struct DriveSegment {
    double start = 0, end = 0;
    double rabi = 0;   // rad/s
    double phase = 0;  // rad
    bool operator==(const DriveSegment&) const = default;
};

struct Rotation {
    double angle = 0;  // rad
    double phase = 0;  // rad
    double duration = 0;
    bool operator==(const Rotation&) const = default;
};

// 420(phi) 300(phi + pi) 60(phi): net pi about phi, first-order robust to offsets.
inline std::vector<Rotation> corpse_decomposition(double rabi, double phase) {
    if (!(rabi > 0)) throw std::invalid_argument("rabi must be positive");
    const double deg = std::numbers::pi / 180.0;
    std::vector<Rotation> r;
    for (auto [a, p] : {std::pair{420.0, 0.0}, {300.0, std::numbers::pi}, {60.0, 0.0}})
        r.push_back({a * deg, phase + p, a * deg / rabi});
    return r;
}

inline double corpse_duration(double rabi) { return (780.0 / 180.0) * std::numbers::pi / rabi; }

struct PulseChannel {
    std::string species;
    double rabi = 0;
    double phase = 0;
    double angle = 0;  // nominal net rotation
    PulseShape shape = PulseShape::top_hat;
    double offset = 0;  // start inside the slot
    double duration = 0;
    bool operator==(const PulseChannel&) const = default;

    std::vector<DriveSegment> segments() const {
        if (shape == PulseShape::top_hat) return {{offset, offset + duration, rabi, phase}};
        std::vector<DriveSegment> s;
        double t = offset;
        for (const auto& r : corpse_decomposition(rabi, phase)) {
            s.push_back({t, t + r.duration, rabi, r.phase});
            t += r.duration;
        }
        return s;
    }
    double midpoint() const { return offset + 0.5 * duration; }
};

struct PulseEvent {
    std::vector<PulseChannel> channels;
    double duration = 0;  // slot length
    double phase = 0;
    double nominal_angle = 0;
    bool operator==(const PulseEvent&) const = default;

    std::set<std::string> target_species() const {
        std::set<std::string> s;
        for (const auto& c : channels) s.insert(c.species);
        return s;
    }
};

struct FreeEvolution {
    double duration = 0;
    bool operator==(const FreeEvolution&) const = default;
};

// Y for one Rabi period, then -Y for one Rabi period.
struct DetectionWindow {
    double duration = 0;
    double rabi = 0;
    bool operator==(const DetectionWindow&) const = default;
};

using Event = std::variant<PulseEvent, FreeEvolution, DetectionWindow>;

inline double event_duration(const Event& e) {
    return std::visit([](const auto& v) { return v.duration; }, e);
}

struct Schedule {
    std::vector<Event> events;
    std::vector<double> start;  // seconds from the beginning
    std::vector<int> stage;     // 0 = preparation, 1..n = stage index
    int n_stages = 0;
    double sample_interval = 0;  // encoding time per stage, the spectral clock
    double B_ext = 2.0;

    void push(Event e, int stage_index) {
        const double t0 = events.empty() ? 0.0 : start.back() + event_duration(events.back());
        events.push_back(std::move(e));
        start.push_back(t0);
        stage.push_back(stage_index);
    }
    double total_duration() const { return events.empty() ? 0.0 : start.back() + event_duration(events.back()); }
    std::size_t size() const { return events.size(); }
};

struct ProtocolConfig {
    double tau = 1.2 / 276.0;
    int n_stages = 600;
    double omega_H = two_pi * 50e3;
    std::set<std::string> targeted_species{"H", "C13"};
    ProtocolMode mode = ProtocolMode::standard;
    double B_ext = 2.0;
    double T2 = 0.6;
    double temperature = 300.0;
    Alignment alignment = Alignment::midpoint;

    void validate() const {
        if (!(tau > 0)) throw std::invalid_argument("tau must be positive");
        if (n_stages < 1) throw std::invalid_argument("n_stages must be at least 1");
        if (!(omega_H > 0)) throw std::invalid_argument("omega_H must be positive");
        if (!(B_ext > 0)) throw std::invalid_argument("B_ext must be positive");
        if (!(T2 > 0)) throw std::invalid_argument("T2 must be positive");
        if (!(temperature > 0)) throw std::invalid_argument("temperature must be positive");
    }
};

inline double rabi_for(const std::string& species, double omega_H, const Molecule& mol) {
    return omega_H * mol.gamma_of(species) / mol.gamma_of("H");
}

// Top-hat pi duration with one shared RF amplitude.
inline double pi_duration(const std::string& species, double omega_H, const Molecule& mol) {
    if (!mol.has_species(species)) throw std::invalid_argument("unknown species '" + species + "'");
    return std::numbers::pi / std::abs(rabi_for(species, omega_H, mol));
}

inline PulseEvent top_hat_pulse(const std::string& species, double angle, double phase, double omega_H,
                                const Molecule& mol) {
    const double rabi = std::abs(rabi_for(species, omega_H, mol));
    const double d = angle / rabi;
    return PulseEvent{{PulseChannel{species, rabi, phase, angle, PulseShape::top_hat, 0.0, d}}, d, phase, angle};
}

// CORPSE pi on H plus top-hat pi on every other targeted species, sharing one slot.
inline PulseEvent simultaneous_pi(const ProtocolConfig& cfg, const Molecule& mol) {
    std::vector<PulseChannel> ch;
    ch.push_back({"H", cfg.omega_H, 0.0, std::numbers::pi, PulseShape::corpse, 0.0, corpse_duration(cfg.omega_H)});
    for (const auto& sp : cfg.targeted_species) {
        if (sp == "H") continue;
        const double rabi = std::abs(rabi_for(sp, cfg.omega_H, mol));
        ch.push_back({sp, rabi, 0.0, std::numbers::pi, PulseShape::top_hat, 0.0, std::numbers::pi / rabi});
    }
    double slot = 0;
    for (const auto& c : ch) slot = std::max(slot, c.duration);
    for (auto& c : ch) c.offset = cfg.alignment == Alignment::midpoint ? 0.5 * (slot - c.duration) : 0.0;
    return PulseEvent{ch, slot, 0.0, std::numbers::pi};
}

inline DetectionWindow detection_window(double omega_H) { return {2.0 * two_pi / omega_H, omega_H}; }

inline Schedule build_schedule(const ProtocolConfig& cfg, const Molecule& mol) {
    cfg.validate();
    if (!cfg.targeted_species.count("H")) throw std::invalid_argument("targeted species must include H");
    for (const auto& sp : cfg.targeted_species)
        if (!mol.has_species(sp)) throw std::invalid_argument("targeted species '" + sp + "' not in molecule");
    const PulseEvent pi = simultaneous_pi(cfg, mol);
    const double widest = pi.duration;
    if (cfg.tau < widest) throw std::invalid_argument("tau shorter than the widest pi pulse");

    Schedule s;
    s.n_stages = cfg.n_stages;
    s.sample_interval = cfg.tau;
    s.B_ext = cfg.B_ext;
    s.push(top_hat_pulse("H", std::numbers::pi / 2, std::numbers::pi / 2, cfg.omega_H, mol), 0);
    const DetectionWindow det = detection_window(cfg.omega_H);
    for (int k = 1; k <= cfg.n_stages; ++k) {
        if (cfg.mode == ProtocolMode::standard) {
            s.push(FreeEvolution{cfg.tau / 2}, k);
            s.push(pi, k);
            s.push(FreeEvolution{cfg.tau / 2}, k);
        } else {
            const double q = cfg.tau / 4;
            s.push(FreeEvolution{q}, k);
            s.push(top_hat_pulse("H", std::numbers::pi, 0.0, cfg.omega_H, mol), k);
            s.push(FreeEvolution{q}, k);
            s.push(top_hat_pulse("H", std::numbers::pi, std::numbers::pi, cfg.omega_H, mol), k);
            s.push(FreeEvolution{q}, k);
            s.push(pi, k);
            s.push(FreeEvolution{q}, k);
        }
        s.push(det, k);
    }
    return s;
}

inline const char* shape_name(PulseShape s) { return s == PulseShape::top_hat ? "top_hat" : "corpse"; }

inline nlohmann::json schedule_to_json(const Schedule& s) {
    nlohmann::json j;
    j["n_stages"] = s.n_stages;
    j["sample_interval_s"] = s.sample_interval;
    j["total_duration_s"] = s.total_duration();
    j["events"] = nlohmann::json::array();
    for (std::size_t i = 0; i < s.size(); ++i) {
        nlohmann::json e{{"stage", s.stage[i]}, {"start_s", s.start[i]}, {"duration_s", event_duration(s.events[i])}};
        if (const auto* p = std::get_if<PulseEvent>(&s.events[i])) {
            e["kind"] = "pulse";
            e["angle_rad"] = p->nominal_angle;
            e["phase_rad"] = p->phase;
            e["channels"] = nlohmann::json::array();
            for (const auto& c : p->channels)
                e["channels"].push_back({{"species", c.species},
                                         {"shape", shape_name(c.shape)},
                                         {"rabi_rad_s", c.rabi},
                                         {"phase_rad", c.phase},
                                         {"angle_rad", c.angle},
                                         {"offset_s", c.offset},
                                         {"duration_s", c.duration}});
        } else if (std::holds_alternative<FreeEvolution>(s.events[i])) {
            e["kind"] = "free";
        } else {
            e["kind"] = "detection";
            e["rabi_rad_s"] = std::get<DetectionWindow>(s.events[i]).rabi;
        }
        j["events"].push_back(e);
    }
    return j;
}

}  // namespace jinsect
