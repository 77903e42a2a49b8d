#include "oracles.hpp"

#include "jinsect/emission.hpp"
#include "jinsect/nv_readout.hpp"

#include <gtest/gtest.h>

using namespace jinsect;

TEST(Emission, ZeroMagnetizationZeroField) { EXPECT_EQ(b0_amplitude(0.0, SampleConstants{}), 0.0); }

TEST(Emission, AmplitudeAtUnitMagnetization) {
    // by hand: gamma_H = 2.675e8 rad/s/T, hbar gamma = 2.8197e-26 J/T
    // (2pi)^2 (2.8197e-26)^2 (4pi e-7)(6.6e28)(2)(4.1) / (16 pi 1.38e-23 300) = 1.0258e-7 T
    const double b = b0_amplitude(1.0, SampleConstants{});
    EXPECT_NEAR(b, 1.0258e-7, 0.01 * 1.0258e-7);
    EXPECT_NEAR(b, 1.0e-7, 0.05e-7);
}

TEST(Emission, LinearInField) {
    SampleConstants c;
    const double b2 = b0_amplitude(0.7, c);
    c.B_ext = 4.0;
    EXPECT_NEAR(b0_amplitude(0.7, c), 2.0 * b2, 1e-22);
}

TEST(Emission, DetectionWaveform) {
    const double w = two_pi * 50e3;
    EXPECT_EQ(detection_waveform(2e-7, w, 0.0), 0.0);
    EXPECT_NEAR(detection_waveform(2e-7, w, std::numbers::pi / (2 * w)), 2e-7, 1e-22);
    // trapezoid over one period
    const int n = 10000;
    const double period = two_pi / w;
    double integral = 0;
    for (int k = 0; k < n; ++k) integral += detection_waveform(2e-7, w, (k + 0.5) * period / n) * period / n;
    EXPECT_LT(std::abs(integral), 1e-15 * 2e-7);
    EXPECT_THROW(detection_waveform(2e-7, w, 3 * period), std::domain_error);
    EXPECT_THROW(detection_waveform(2e-7, w, -1e-9), std::domain_error);
}

TEST(Emission, T2Envelope) {
    FieldTrace f{{0.0, 0.6}, {1.0, 1.0}};
    const auto g = apply_t2(f, 0.6);
    EXPECT_EQ(g.B0[0], 1.0);
    EXPECT_NEAR(g.B0[1], std::exp(-1.0), 1e-15);
    EXPECT_THROW(apply_t2(f, 0.0), std::invalid_argument);
}

TEST(XY4, ZeroFieldZeroResponse) { EXPECT_EQ(xy4_response(0.0, XY4Config::for_rabi(two_pi * 50e3)), 0.0); }

TEST(XY4, LinearCoefficient) {
    const auto cfg = XY4Config::for_rabi(two_pi * 50e3);
    const double b0 = 1e-11;
    EXPECT_NEAR(xy4_response(b0, cfg) / b0, 2 * cfg.gamma_e * cfg.t_rf / std::numbers::pi,
                1e-3 * 2 * cfg.gamma_e * cfg.t_rf / std::numbers::pi);
}

TEST(XY4, MatchesDirectTwoLevelPropagation) {
    const auto cfg = XY4Config::for_rabi(two_pi * 50e3);
    for (double b0 : {1e-10, 1e-9, 5e-9, 2e-8, 4e-8}) {
        const double direct = oracle::xy4_direct(b0, cfg.gamma_e, cfg.t_rf);
        EXPECT_NEAR(std::sin(xy4_phase(b0, cfg)), direct, 1e-6) << b0;
        if (std::abs(xy4_linear_phase(b0, cfg)) < 0.3) EXPECT_NEAR(xy4_response(b0, cfg), direct, 1e-6) << b0;
    }
}

TEST(XY4, GuardRejectsNonlinearRegime) {
    const auto cfg = XY4Config::for_rabi(two_pi * 50e3);
    // the unit-magnetization field of the default sample already leaves the linear regime
    EXPECT_THROW(xy4_response(b0_amplitude(1.0, SampleConstants{}), cfg), RegimeError);
    XY4Config bad = cfg;
    bad.spacing *= 2;
    EXPECT_THROW(xy4_response(1e-12, bad), std::invalid_argument);
}

TEST(Photon, EstimatorStdMatchesShotNoiseFormula) {
    PhotonModel m;
    const double n = m.n_nv * m.n0 * m.n_reps;
    const double oracle_std = std::sqrt(n) / (m.contrast * n / 2.0);
    EXPECT_NEAR(m.estimator_std(0.0), oracle_std, 0.03 * oracle_std);
}

TEST(Photon, MonteCarloSpreadAndBias) {
    PhotonModel m;
    std::mt19937_64 rng(9);
    const std::vector<double> p(40000, 0.3);
    const auto est = photon_readout(p, m, rng);
    double mean = 0, var = 0;
    for (double e : est) mean += e / est.size();
    for (double e : est) var += (e - mean) * (e - mean) / (est.size() - 1);
    const double sd = m.estimator_std(0.3);
    EXPECT_NEAR(std::sqrt(var), sd, 0.02 * sd);
    EXPECT_NEAR(mean, 0.3, 4 * sd / std::sqrt(double(est.size())));
}

TEST(Photon, ExactPoissonAgrees) {
    PhotonModel m;
    m.exact_poisson = true;
    m.n_reps = 1;  // keep the Poisson mean small enough to sample directly
    m.n_nv = 1e6;
    std::mt19937_64 rng(2);
    const auto est = photon_readout(std::vector<double>(20000, 0.0), m, rng);
    double mean = 0, var = 0;
    for (double e : est) mean += e / est.size();
    for (double e : est) var += (e - mean) * (e - mean) / (est.size() - 1);
    EXPECT_NEAR(std::sqrt(var), m.estimator_std(0.0), 0.03 * m.estimator_std(0.0));
}

TEST(Photon, QuarterRepetitionsDoubleNoise) {
    PhotonModel a, b;
    b.n_reps = a.n_reps / 4;
    EXPECT_NEAR(b.estimator_std() / a.estimator_std(), 2.0, 1e-12);
}

TEST(Photon, NoiselessPassesThrough) {
    PhotonModel m;
    m.noiseless = true;
    std::mt19937_64 rng(1);
    const std::vector<double> p{0.1, -0.2, 1e-3};
    EXPECT_EQ(photon_readout(p, m, rng), p);
}

TEST(Photon, Validation) {
    PhotonModel m;
    m.contrast = 1.5;
    std::mt19937_64 rng(1);
    EXPECT_THROW(photon_readout({0.0}, m, rng), std::invalid_argument);
    PhotonModel ok;
    EXPECT_THROW(photon_readout({1.5}, ok, rng), std::invalid_argument);
}
