#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <numbers>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace jinsect {

using cplx = std::complex<double>;
using Mat = Eigen::MatrixXcd;
using Vec = Eigen::VectorXcd;

inline constexpr double two_pi = 2.0 * std::numbers::pi;

namespace phys {
inline constexpr double hbar = 1.054e-34;  // J s
inline constexpr double k_B = 1.38e-23;    // J/K
inline constexpr double mu0 = 4.0e-7 * std::numbers::pi;
}  // namespace phys

enum class Axis { x, y, z };

inline bool is_power_of_two(Eigen::Index n) { return n > 0 && (n & (n - 1)) == 0; }

inline double hermiticity_error(const Mat& m) { return (m - m.adjoint()).cwiseAbs().maxCoeff(); }

struct OperatorMatrix {
    Mat entries;
    bool hermitian = false;

    OperatorMatrix() = default;
    OperatorMatrix(Mat e, bool herm) : entries(std::move(e)), hermitian(herm) {
        if (entries.rows() != entries.cols() || !is_power_of_two(entries.rows()))
            throw std::invalid_argument("operator dimension must be a power of two");
        if (hermitian && hermiticity_error(entries) > 1e-12)
            throw std::invalid_argument("operator flagged Hermitian is not Hermitian");
    }
    Eigen::Index dim() const { return entries.rows(); }
};

struct DensityMatrix {
    Mat entries;

    DensityMatrix() = default;
    explicit DensityMatrix(Mat e) : entries(std::move(e)) {
        if (entries.rows() != entries.cols() || !is_power_of_two(entries.rows()))
            throw std::invalid_argument("density matrix dimension must be a power of two");
    }
    Eigen::Index dim() const { return entries.rows(); }

    double trace_error() const { return std::abs(entries.trace() - cplx(1.0)); }
    double hermiticity_error() const { return jinsect::hermiticity_error(entries); }
    double min_eigenvalue() const {
        Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (entries + entries.adjoint()), Eigen::EigenvaluesOnly);
        return es.eigenvalues().minCoeff();
    }
    bool valid(double tol = 1e-10) const {
        return trace_error() <= tol && hermiticity_error() <= tol && min_eigenvalue() >= -tol;
    }
};

// Site 0 is the most significant qubit, so (2, 0, z) = diag(1/2, 1/2, -1/2, -1/2).
inline Mat site_matrix(int n_sites, int site, Axis axis) {
    if (n_sites < 1 || n_sites > 12) throw std::out_of_range("n_sites must be in [1, 12]");
    if (site < 0 || site >= n_sites) throw std::out_of_range("site index out of range");
    const Eigen::Index dim = Eigen::Index(1) << n_sites;
    const Eigen::Index bit = Eigen::Index(1) << (n_sites - 1 - site);
    Mat m = Mat::Zero(dim, dim);
    for (Eigen::Index b = 0; b < dim; ++b) {
        const bool down = (b & bit) != 0;
        switch (axis) {
            case Axis::z: m(b, b) = down ? -0.5 : 0.5; break;
            case Axis::x: m(b ^ bit, b) = 0.5; break;
            case Axis::y: m(b ^ bit, b) = down ? cplx(0, -0.5) : cplx(0, 0.5); break;
        }
    }
    return m;
}

inline OperatorMatrix site_operator(int n_sites, int site, Axis axis) {
    return OperatorMatrix(site_matrix(n_sites, site, axis), true);
}

// Diagonal of S^z_site, which is all the ZZ terms need.
inline Eigen::VectorXd site_z_diagonal(int n_sites, int site) {
    const Eigen::Index dim = Eigen::Index(1) << n_sites;
    const Eigen::Index bit = Eigen::Index(1) << (n_sites - 1 - site);
    Eigen::VectorXd d(dim);
    for (Eigen::Index b = 0; b < dim; ++b) d(b) = (b & bit) ? -0.5 : 0.5;
    return d;
}

// Cached S^{x,y,z} for every site of an n-spin register.
struct SpinOperators {
    int n = 0;
    std::vector<Mat> x, y, z;

    explicit SpinOperators(int n_sites) : n(n_sites) {
        for (int k = 0; k < n; ++k) {
            x.push_back(site_matrix(n, k, Axis::x));
            y.push_back(site_matrix(n, k, Axis::y));
            z.push_back(site_matrix(n, k, Axis::z));
        }
    }
    const Mat& get(int site, Axis a) const { return a == Axis::x ? x[site] : a == Axis::y ? y[site] : z[site]; }
    Eigen::Index dim() const { return Eigen::Index(1) << n; }
};

// exp(-i H t) for Hermitian H.
inline Mat unitary_exp(const Mat& h, double t) {
    Eigen::SelfAdjointEigenSolver<Mat> es(h);
    if (es.info() != Eigen::Success) throw std::runtime_error("eigendecomposition failed");
    const Eigen::VectorXcd phase = (es.eigenvalues().cast<cplx>() * cplx(0, -t)).array().exp();
    return es.eigenvectors() * phase.asDiagonal() * es.eigenvectors().adjoint();
}

inline Mat diagonal_unitary(const Eigen::VectorXd& diag_h, double t) {
    return (diag_h.cast<cplx>() * cplx(0, -t)).array().exp().matrix().asDiagonal();
}

struct ThermalParams {
    double B_ext = 2.0;          // T
    double temperature = 300.0;  // K
    std::map<std::string, double> gamma;  // rad s^-1 T^-1 per species

    void validate() const {
        if (!(B_ext > 0)) throw std::invalid_argument("B_ext must be positive");
        if (!(temperature > 0)) throw std::invalid_argument("temperature must be positive");
    }
};

inline double thermal_polarization(double gamma, double B_ext, double temperature) {
    return phys::hbar * gamma * B_ext / (phys::k_B * temperature);
}

inline double thermal_polarization(const ThermalParams& p, const std::string& species) {
    auto it = p.gamma.find(species);
    if (it == p.gamma.end()) throw std::invalid_argument("unknown species '" + species + "'");
    return thermal_polarization(it->second, p.B_ext, p.temperature);
}

inline Mat product_state(const std::vector<Eigen::Matrix2cd>& factors) {
    Mat rho = Mat::Identity(1, 1);
    for (const auto& r : factors) {
        Mat next(rho.rows() * 2, rho.cols() * 2);
        for (Eigen::Index i = 0; i < rho.rows(); ++i)
            for (Eigen::Index j = 0; j < rho.cols(); ++j) next.block(2 * i, 2 * j, 2, 2) = rho(i, j) * r;
        rho = std::move(next);
    }
    return rho;
}

// First-order product state: rho^x = I/2 - (B/4) sigma_x, rho^z = I/2 + (B/4) sigma_z.
inline DensityMatrix thermal_state(const std::vector<std::string>& site_species, const ThermalParams& params,
                                   const std::set<std::string>& x_polarized) {
    for (const auto& s : x_polarized)
        if (std::find(site_species.begin(), site_species.end(), s) == site_species.end())
            throw std::invalid_argument("unknown species '" + s + "'");
    std::vector<Eigen::Matrix2cd> factors;
    for (const auto& s : site_species) {
        const double b = thermal_polarization(params, s);
        Eigen::Matrix2cd r = 0.5 * Eigen::Matrix2cd::Identity();
        if (x_polarized.count(s)) {
            r(0, 1) = r(1, 0) = -b / 4.0;
        } else {
            r(0, 0) += b / 4.0;
            r(1, 1) -= b / 4.0;
        }
        factors.push_back(r);
    }
    return DensityMatrix(product_state(factors));
}

inline cplx trace_product(const Mat& a, const Mat& b) { return (a.transpose().array() * b.array()).sum(); }

inline double expectation(const DensityMatrix& rho, const OperatorMatrix& op) {
    if (rho.dim() != op.dim()) throw std::invalid_argument("dimension mismatch in expectation");
    return trace_product(rho.entries, op.entries).real();
}

inline double expectation(const Mat& rho, const Mat& op) {
    if (rho.rows() != op.rows()) throw std::invalid_argument("dimension mismatch in expectation");
    return trace_product(rho, op).real();
}

inline Mat commutator(const Mat& a, const Mat& b) { return a * b - b * a; }

}  // namespace jinsect
