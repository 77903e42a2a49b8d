#pragma once
// Reference computations that share no code with the library.

#include "jinsect/spin_core.hpp"
#include "jinsect/molecule.hpp"

#include <unsupported/Eigen/KroneckerProduct>
#include <unsupported/Eigen/MatrixFunctions>

#include <random>

namespace oracle {

using jinsect::cplx;
using jinsect::Mat;

inline Eigen::Matrix2cd pauli(char a) {
    Eigen::Matrix2cd m;
    if (a == 'x') m << 0, 1, 1, 0;
    else if (a == 'y') m << 0, cplx(0, -1), cplx(0, 1), 0;
    else if (a == 'z') m << 1, 0, 0, -1;
    else m = Eigen::Matrix2cd::Identity();
    return m;
}

// S^a on one site by explicit Kronecker products, site 0 leftmost.
inline Mat spin(int n, int site, char a) {
    Mat out = Mat::Identity(1, 1);
    for (int k = 0; k < n; ++k) {
        Mat f = k == site ? Mat(0.5 * pauli(a)) : Mat(Eigen::Matrix2cd::Identity());
        out = Eigen::kroneckerProduct(out, f).eval();
    }
    return out;
}

// exp(-i H t) through the Pade-based matrix exponential.
inline Mat expm(const Mat& h, double t) { return (cplx(0, -t) * h).exp(); }

inline Mat zz_hamiltonian(const jinsect::Molecule& mol, const std::set<std::string>& targeted) {
    const int n = mol.size();
    Mat h = Mat::Zero(Eigen::Index(1) << n, Eigen::Index(1) << n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const auto& a = mol.nuclei[i];
            const auto& b = mol.nuclei[j];
            const bool hi = a.species == "H", hj = b.species == "H";
            bool keep = false;
            if (hi && hj) keep = !mol.equivalent(i, j);
            else if (hi) keep = targeted.count(b.species) > 0;
            else if (hj) keep = targeted.count(a.species) > 0;
            if (keep) h += mol.j_matrix(i, j) * spin(n, i, 'z') * spin(n, j, 'z');
        }
    return h;
}

// (2/N_H) sum <S^x_H> after ZZ encoding for time t from fully x-polarized H.
inline double zz_signal(const jinsect::Molecule& mol, const std::set<std::string>& targeted, double t) {
    const int n = mol.size();
    const Eigen::Index d = Eigen::Index(1) << n;
    Mat rho = Mat::Identity(1, 1);
    for (const auto& nu : mol.nuclei) {
        Eigen::Matrix2cd f = 0.5 * Eigen::Matrix2cd::Identity();
        if (nu.species == "H") f += 0.5 * pauli('x');
        rho = Eigen::kroneckerProduct(rho, Mat(f)).eval();
    }
    const Mat u = expm(zz_hamiltonian(mol, targeted), t);
    rho = u * rho * u.adjoint();
    Mat sx = Mat::Zero(d, d);
    int nh = 0;
    for (int k = 0; k < n; ++k)
        if (mol.nuclei[k].species == "H") sx += spin(n, k, 'x'), ++nh;
    return (2.0 / nh) * (rho * sx).trace().real();
}

// Random weakly coupled molecule: 2..3 H with distinct shifts plus up to two heteronuclei.
inline jinsect::Molecule random_molecule(std::mt19937_64& rng, double min_ratio = 10.0) {
    std::uniform_int_distribution<int> nh_d(2, 3), nx_d(0, 2), sp_d(0, 1);
    std::uniform_real_distribution<double> j_d(1.0, 10.0), big_d(20.0, 160.0), u(0.0, 1.0);
    for (;;) {
        jinsect::Molecule m;
        m.name = "random";
        const int nh = nh_d(rng), nx = nx_d(rng);
        const double gh = jinsect::two_pi * 42.577e6;
        std::vector<double> shifts;
        for (int k = 0; k < nh; ++k) {
            shifts.push_back(600.0 * u(rng));
            m.nuclei.push_back({"H" + std::to_string(k), "H", gh, jinsect::two_pi * shifts.back(), std::nullopt});
        }
        for (int k = 0; k < nx; ++k) {
            const bool c = sp_d(rng) == 0;
            m.nuclei.push_back({"X" + std::to_string(k), c ? "C13" : "F19",
                                jinsect::two_pi * (c ? 10.7084e6 : 40.052e6), jinsect::two_pi * 300.0 * u(rng),
                                std::nullopt});
        }
        const int n = m.size();
        m.j_matrix = Eigen::MatrixXd::Zero(n, n);
        double jmax = 0, dmin = 1e300;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) {
                const bool hh = i < nh && j < nh;
                const double jv = hh ? j_d(rng) : (i < nh || j < nh ? big_d(rng) : j_d(rng));
                m.set_coupling(i, j, jinsect::two_pi * jv);
                if (hh) jmax = std::max(jmax, jv), dmin = std::min(dmin, std::abs(shifts[i] - shifts[j]));
            }
        if (dmin / jmax >= min_ratio) return m;
    }
}

inline double min_h_shift_gap_hz(const jinsect::Molecule& m) {
    double d = 1e300;
    const auto hs = m.sites_of("H");
    for (std::size_t a = 0; a < hs.size(); ++a)
        for (std::size_t b = a + 1; b < hs.size(); ++b)
            d = std::min(d, std::abs(m.nuclei[hs[a]].shift - m.nuclei[hs[b]].shift) / jinsect::two_pi);
    return d;
}

inline double max_hh_coupling_hz(const jinsect::Molecule& m) {
    double j = 0;
    const auto hs = m.sites_of("H");
    for (int a : hs)
        for (int b : hs)
            if (a != b) j = std::max(j, std::abs(m.j_matrix(a, b)) / jinsect::two_pi);
    return j;
}

// NV two-level system under B0 sin(omega t) with ideal pi pulses X, Y, X, Y at multiples of spacing.
// Starts on +x; returns <sigma_y> after the block.
inline double xy4_direct(double b0, double gamma_e, double t_rf, int steps_per_interval = 4000) {
    const double omega = 2.0 * jinsect::two_pi / t_rf;
    const double s = t_rf / 4.0;
    Eigen::Vector2cd psi(1.0 / std::sqrt(2.0), 1.0 / std::sqrt(2.0));
    const char axes[4] = {'x', 'y', 'x', 'y'};
    for (int k = 0; k < 4; ++k) {
        const double dt = s / steps_per_interval;
        for (int i = 0; i < steps_per_interval; ++i) {
            // exact integral of the field over the substep, H = gamma_e B(t) sigma_z / 2
            const double t0 = k * s + i * dt, t1 = t0 + dt;
            const double phi = gamma_e * b0 * (std::cos(omega * t0) - std::cos(omega * t1)) / omega;
            psi(0) *= std::polar(1.0, -phi / 2);
            psi(1) *= std::polar(1.0, phi / 2);
        }
        psi = (cplx(0, -1) * pauli(axes[k])) * psi;  // exp(-i pi sigma/2)
    }
    return (psi.adjoint() * pauli('y') * psi)(0, 0).real();
}

}  // namespace oracle
