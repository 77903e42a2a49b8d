#include "oracles.hpp"

#include "jinsect/sequence.hpp"

#include <gtest/gtest.h>

using namespace jinsect;

namespace {

// Rotation sequence on one spin with resonance offset delta (rad/s).
Eigen::Matrix2cd compose(const std::vector<Rotation>& rots, double rabi, double delta) {
    Eigen::Matrix2cd u = Eigen::Matrix2cd::Identity();
    for (const auto& r : rots) {
        const Mat h = 0.5 * (delta * oracle::pauli('z') +
                             rabi * (std::cos(r.phase) * oracle::pauli('x') + std::sin(r.phase) * oracle::pauli('y')));
        u = oracle::expm(h, r.angle / rabi) * u;
    }
    return u;
}

double fidelity(const Eigen::Matrix2cd& u, const Eigen::Matrix2cd& target) {
    return std::abs((target.adjoint() * u).trace()) / 2.0;
}

const double omega_h = two_pi * 50e3;

}  // namespace

TEST(Corpse, SegmentDurations) {
    const auto r = corpse_decomposition(omega_h, 0.0);
    ASSERT_EQ(r.size(), 3u);
    EXPECT_NEAR(r[0].duration * 1e6, 23.333, 1e-3);
    EXPECT_NEAR(r[1].duration * 1e6, 16.667, 1e-3);
    EXPECT_NEAR(r[2].duration * 1e6, 3.333, 1e-3);
    EXPECT_NEAR(corpse_duration(omega_h) * 1e6, 43.33, 0.01);
    EXPECT_NEAR(r[1].phase, std::numbers::pi, 1e-15);
}

TEST(Corpse, OnResonanceEqualsTopHat) {
    const auto u = compose(corpse_decomposition(omega_h, 0.0), omega_h, 0.0);
    const auto pi = compose({{std::numbers::pi, 0.0, std::numbers::pi / omega_h}}, omega_h, 0.0);
    EXPECT_LT((u - pi).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Corpse, BeatsTopHatUnderDetuning) {
    const Eigen::Matrix2cd target = cplx(0, -1) * oracle::pauli('x');
    for (double f : {0.02, 0.05, 0.1}) {
        const double delta = f * omega_h;
        const double fc = fidelity(compose(corpse_decomposition(omega_h, 0.0), omega_h, delta), target);
        const double ft = fidelity(compose({{std::numbers::pi, 0.0, std::numbers::pi / omega_h}}, omega_h, delta), target);
        EXPECT_GT(fc, ft) << "detuning " << f;
    }
}

TEST(Corpse, SegmentsFollowChannelOffset) {
    PulseChannel ch{"H", omega_h, 0.3, std::numbers::pi, PulseShape::corpse, 5e-6, corpse_duration(omega_h)};
    const auto seg = ch.segments();
    ASSERT_EQ(seg.size(), 3u);
    EXPECT_NEAR(seg.front().start, 5e-6, 1e-18);
    EXPECT_NEAR(seg.back().end, 5e-6 + corpse_duration(omega_h), 1e-15);
    EXPECT_NEAR(seg[1].phase, 0.3 + std::numbers::pi, 1e-15);
}

TEST(PiDuration, PerSpecies) {
    const Molecule m = fluoromethanol();
    EXPECT_NEAR(pi_duration("H", omega_h, m) * 1e6, 10.0, 1e-9);
    EXPECT_NEAR(pi_duration("C13", omega_h, m) * 1e6, 39.7, 0.1);
    EXPECT_NEAR(pi_duration("F19", omega_h, m) * 1e6, 10.6, 0.05);
    EXPECT_THROW(pi_duration("N15", omega_h, m), std::invalid_argument);
}

TEST(Schedule, CaseOneTotalDuration) {
    const Schedule s = build_schedule(ProtocolConfig{}, fluoromethanol());
    EXPECT_NEAR(s.total_duration(), 2.66, 0.01);
    EXPECT_EQ(s.size(), 1u + 600u * 4u);
    EXPECT_DOUBLE_EQ(s.sample_interval, 1.2 / 276.0);
}

TEST(Schedule, SingleStageEventCount) {
    ProtocolConfig c;
    c.n_stages = 1;
    c.targeted_species = {"H"};
    const Schedule s = build_schedule(c, fluoromethanol());
    ASSERT_EQ(s.size(), 5u);
    EXPECT_TRUE(std::holds_alternative<PulseEvent>(s.events[0]));
    EXPECT_TRUE(std::holds_alternative<FreeEvolution>(s.events[1]));
    EXPECT_TRUE(std::holds_alternative<PulseEvent>(s.events[2]));
    EXPECT_TRUE(std::holds_alternative<FreeEvolution>(s.events[3]));
    EXPECT_TRUE(std::holds_alternative<DetectionWindow>(s.events[4]));
    for (std::size_t i = 1; i < s.size(); ++i) EXPECT_NEAR(s.start[i], s.start[i - 1] + event_duration(s.events[i - 1]), 1e-15);
}

TEST(Schedule, FastModeAlternatesPiPhases) {
    ProtocolConfig c;
    c.mode = ProtocolMode::fast;
    c.tau = 75e-6;
    c.n_stages = 6553;
    const Schedule s = build_schedule(c, fluoromethanol());
    std::vector<double> phases;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s.stage[i] != 17) continue;
        if (const auto* p = std::get_if<PulseEvent>(&s.events[i]))
            if (p->channels.size() == 1 && p->channels[0].shape == PulseShape::top_hat) phases.push_back(p->phase);
    }
    ASSERT_EQ(phases.size(), 2u);
    EXPECT_NEAR(phases[0], 0.0, 1e-15);
    EXPECT_NEAR(phases[1], std::numbers::pi, 1e-15);
    EXPECT_EQ(s.n_stages, 6553);
}

TEST(Schedule, SimultaneousPulsesShareMidpoint) {
    ProtocolConfig c;
    c.targeted_species = {"H", "C13", "F19"};
    const PulseEvent ev = simultaneous_pi(c, fluoromethanol());
    ASSERT_EQ(ev.channels.size(), 3u);
    for (const auto& ch : ev.channels) {
        EXPECT_NEAR(ch.midpoint(), 0.5 * ev.duration, 1e-15);
        EXPECT_LE(ch.offset + ch.duration, ev.duration + 1e-15);
    }
    EXPECT_NEAR(ev.duration, corpse_duration(c.omega_H), 1e-15);
}

TEST(Schedule, LeadingEdgeAlignment) {
    ProtocolConfig c;
    c.alignment = Alignment::leading_edge;
    for (const auto& ch : simultaneous_pi(c, fluoromethanol()).channels) EXPECT_EQ(ch.offset, 0.0);
}

TEST(Schedule, Errors) {
    ProtocolConfig c;
    c.tau = 20e-6;
    EXPECT_THROW(build_schedule(c, fluoromethanol()), std::invalid_argument);
    ProtocolConfig d;
    d.targeted_species = {"C13"};
    EXPECT_THROW(build_schedule(d, fluoromethanol()), std::invalid_argument);
    ProtocolConfig e;
    e.targeted_species = {"H", "N15"};
    EXPECT_THROW(build_schedule(e, fluoromethanol()), std::invalid_argument);
}

TEST(Schedule, ExportsJson) {
    ProtocolConfig c;
    c.n_stages = 2;
    const auto j = schedule_to_json(build_schedule(c, fluoromethanol()));
    EXPECT_EQ(j["events"].size(), 9u);
}
