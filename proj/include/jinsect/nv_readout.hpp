#pragma once

#include "jinsect/spin_core.hpp"

#include <cstdint>
#include <random>

namespace jinsect {

struct RegimeError : std::domain_error {
    using std::domain_error::domain_error;
};

struct XY4Config {
    double t_rf = 40e-6;
    int n_pulses = 4;
    double spacing = 10e-6;
    double gamma_e = two_pi * 28.025e9;  // rad s^-1 T^-1

    // Two Rabi periods of the sample signal, pulses at its zero crossings.
    static XY4Config for_rabi(double omega_H) {
        XY4Config c;
        c.t_rf = 2.0 * two_pi / omega_H;
        c.spacing = c.t_rf / 4.0;
        return c;
    }
    void validate() const {
        if (n_pulses != 4) throw std::invalid_argument("XY4 uses four pulses");
        if (std::abs(spacing * 4.0 - t_rf) > 1e-12 * t_rf) throw std::invalid_argument("XY4 spacing must be t_rf/4");
        if (!(t_rf > 0) || gamma_e == 0) throw std::invalid_argument("bad XY4 config");
    }
};

inline double xy4_linear_phase(double b0, const XY4Config& cfg) { return 2.0 * cfg.gamma_e * cfg.t_rf * b0 / std::numbers::pi; }

// Phase of B0 sin(omega t) under the toggling sign that flips at every pulse:
// the integral of |B0 sin| over t_rf, evaluated per interval.
inline double xy4_phase(double b0, const XY4Config& cfg) {
    const double omega = 2.0 * two_pi / cfg.t_rf;
    double phi = 0, sign = 1;
    for (int k = 0; k < cfg.n_pulses; ++k) {
        const double a = k * cfg.spacing, b = (k + 1) * cfg.spacing;
        phi += sign * cfg.gamma_e * b0 * (std::cos(omega * a) - std::cos(omega * b)) / omega;
        sign = -sign;
    }
    return phi;
}

inline double xy4_response(double b0, const XY4Config& cfg) {
    cfg.validate();
    if (std::abs(xy4_linear_phase(b0, cfg)) >= 0.3) throw RegimeError("XY4 linear-regime guard violated");
    return std::sin(xy4_phase(b0, cfg));
}

struct PhotonModel {
    double n0 = 0.016;
    double contrast = 0.07;
    double n_nv = 2.5e8;
    double n_reps = 18000;
    std::uint64_t rng_seed = 0;
    bool exact_poisson = false;
    bool noiseless = false;

    void validate() const {
        if (!(contrast > 0 && contrast < 1)) throw std::invalid_argument("contrast must lie in (0, 1)");
        if (!(n0 > 0) || !(n_nv > 0) || !(n_reps > 0)) throw std::invalid_argument("photon model counts must be positive");
    }
    double shots() const { return n_nv * n_reps; }
    double mean_count(double p) const { return n0 * (1.0 - contrast * (1.0 + p) / 2.0); }
    // Standard deviation of the inverted estimate at signal p.
    double estimator_std(double p = 0.0) const {
        return 2.0 * std::sqrt(shots() * mean_count(p)) / (contrast * n0 * shots());
    }
};

// Aggregate counts over n_nv x n_reps shots, inverted to an unbiased estimate of p.
inline std::vector<double> photon_readout(const std::vector<double>& p, const PhotonModel& m, std::mt19937_64& rng) {
    m.validate();
    std::vector<double> out;
    out.reserve(p.size());
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (double pi : p) {
        if (std::abs(pi) > 1.0) throw std::invalid_argument("signal outside [-1, 1]");
        if (m.noiseless) {
            out.push_back(pi);
            continue;
        }
        const double mean = m.shots() * m.mean_count(pi);
        double counts;
        if (m.exact_poisson) {
            std::poisson_distribution<long long> pois(mean);
            counts = double(pois(rng));
        } else {
            counts = mean + std::sqrt(mean) * gauss(rng);
        }
        out.push_back((1.0 - counts / (m.shots() * m.n0)) * 2.0 / m.contrast - 1.0);
    }
    return out;
}

}  // namespace jinsect
