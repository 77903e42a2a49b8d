#pragma once

#include "jinsect/spin_core.hpp"

namespace jinsect {

struct SampleConstants {
    double hbar = phys::hbar;
    double mu0 = phys::mu0;
    double rho_H = 6.6e28;  // m^-3
    double F3 = 4.1;
    double K_B = phys::k_B;
    double temperature = 300.0;
    double B_ext = 2.0;
    double gamma_H = two_pi * 42.577e6;

    void validate() const {
        for (double v : {hbar, mu0, rho_H, F3, K_B, temperature, B_ext, gamma_H})
            if (!(v > 0)) throw std::invalid_argument("sample constants must be positive");
    }
};

// B0 = (2pi)^2 (hbar gamma_H)^2 mu0 rho_H B F3 / (16 pi K_B T) * M_x
inline double b0_amplitude(double m_x, const SampleConstants& c) {
    c.validate();
    const double hg = c.hbar * c.gamma_H;
    return two_pi * two_pi * hg * hg * c.mu0 * c.rho_H * c.B_ext * c.F3 /
           (16.0 * std::numbers::pi * c.K_B * c.temperature) * m_x;
}

inline double detection_waveform(double b0_n, double omega_H, double t) {
    const double window = 2.0 * two_pi / omega_H;
    if (t < 0 || t > window) throw std::domain_error("t outside the detection window");
    return b0_n * std::sin(omega_H * t);
}

struct FieldTrace {
    std::vector<double> t;
    std::vector<double> B0;
};

inline FieldTrace apply_t2(FieldTrace trace, double T2) {
    if (!(T2 > 0)) throw std::invalid_argument("T2 must be positive");
    for (std::size_t i = 0; i < trace.t.size(); ++i) trace.B0[i] *= std::exp(-trace.t[i] / T2);
    return trace;
}

}  // namespace jinsect
