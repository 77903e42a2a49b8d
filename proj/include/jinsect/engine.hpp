#pragma once

#include "jinsect/sequence.hpp"

#include <Eigen/Eigenvalues>

#include <cstdint>
#include <functional>
#include <random>

namespace jinsect {

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class CrossTalkMode { effective, resolved };

struct NoiseConfig {
    double ou_relative_sigma = 0.01;
    double ou_correlation_time = 1e-3;
    std::uint64_t rng_seed = 0;
    bool ou_enabled = true;
    bool cross_talk_enabled = true;
    CrossTalkMode cross_talk_mode = CrossTalkMode::effective;
    bool independent_channels = false;  // one OU process per species instead of one shared chain

    static NoiseConfig off() {
        NoiseConfig n;
        n.ou_enabled = false;
        n.cross_talk_enabled = false;
        return n;
    }
    bool ou_active() const { return ou_enabled && ou_relative_sigma > 0; }
    void validate() const {
        if (ou_relative_sigma < 0) throw std::invalid_argument("ou_relative_sigma must be >= 0");
        if (!(ou_correlation_time > 0)) throw std::invalid_argument("ou_correlation_time must be positive");
    }
};

using Rng = std::mt19937_64;

// Exact OU update over dt.
inline double ou_step(double x, double dt, const NoiseConfig& cfg, Rng& rng) {
    if (!(dt > 0)) throw std::invalid_argument("dt must be positive");
    const double decay = std::exp(-dt / cfg.ou_correlation_time);
    std::normal_distribution<double> xi(0.0, 1.0);
    return x * decay + cfg.ou_relative_sigma * std::sqrt(1.0 - decay * decay) * xi(rng);
}

// Continuous OU path sampled at increasing times.
class OuProcess {
  public:
    OuProcess(const NoiseConfig& cfg, Rng& rng) : cfg_(cfg), rng_(rng) {}
    double at(double t) {
        if (!started_) {
            std::normal_distribution<double> xi(0.0, 1.0);
            x_ = cfg_.ou_relative_sigma * xi(rng_);
            started_ = true;
        } else if (t > t_) {
            x_ = ou_step(x_, t - t_, cfg_, rng_);
        }
        t_ = t;
        return x_;
    }

  private:
    NoiseConfig cfg_;
    Rng& rng_;
    double x_ = 0, t_ = 0;
    bool started_ = false;
};

struct MagnetizationTrace {
    std::vector<double> t;  // wall-clock time of each sample
    std::vector<int> stage;
    std::vector<Eigen::Vector3d> M;
    int n_H = 0;
    double sample_interval = 0;
    Mat final_state;

    std::size_t size() const { return t.size(); }
    std::vector<double> component(int axis) const {
        std::vector<double> v;
        for (const auto& m : M) v.push_back(m(axis));
        return v;
    }
    std::vector<double> encoding_times() const {
        std::vector<double> v;
        for (int k : stage) v.push_back(k * sample_interval);
        return v;
    }
};

struct PropagationOptions {
    HamiltonianModel model = HamiltonianModel::full();
    bool ideal_pulses = false;
    bool cache_stages = true;
    double substep_fraction = 1.0 / 20.0;
    long long max_substeps_per_event = 5'000'000;
    double trace_tolerance = 1e-8;
    std::function<void(int, const Mat&)> observer;  // called after every detection sample
};

// Off-resonant drive on off_species from every channel active at t_rel:
// amplitude rabi * gamma_off / gamma_src, phase advancing at (gamma_src - gamma_off) * B_ext.
inline OperatorMatrix cross_talk_term(const PulseEvent& event, const std::string& off_species, const Molecule& mol,
                                      double B_ext, double t_rel, double t_abs) {
    if (event.target_species().count(off_species))
        throw std::invalid_argument("off species is a pulse target");
    const int n = mol.size();
    const Eigen::Index dim = Eigen::Index(1) << n;
    Mat h = Mat::Zero(dim, dim);
    const double g_off = mol.gamma_of(off_species);
    for (const auto& ch : event.channels) {
        const double g_src = mol.gamma_of(ch.species);
        const double beat = (g_src - g_off) * B_ext;
        for (const auto& seg : ch.segments()) {
            if (t_rel < seg.start || t_rel >= seg.end) continue;
            const double a = seg.rabi * g_off / g_src;
            const double ph = seg.phase + beat * t_abs;
            for (int k : mol.sites_of(off_species))
                h += a * (std::cos(ph) * site_matrix(n, k, Axis::x) + std::sin(ph) * site_matrix(n, k, Axis::y));
        }
    }
    return OperatorMatrix(h, true);
}

// Piecewise-constant propagation of a density matrix through a Schedule.
class Propagator {
  public:
    Propagator(const Molecule& mol, PropagationOptions opt = {})
        : mol_(mol), opt_(std::move(opt)), ops_(mol.size()) {
        h_sys_ = simulation_hamiltonian_matrix(mol_, opt_.model);
        const Eigen::Index dim = ops_.dim();
        for (const auto& sp : mol_.species()) {
            Mat x = Mat::Zero(dim, dim), y = Mat::Zero(dim, dim), z = Mat::Zero(dim, dim);
            for (int k : mol_.sites_of(sp)) {
                x += ops_.x[k];
                y += ops_.y[k];
                z += ops_.z[k];
            }
            sx_[sp] = x;
            sy_[sp] = y;
            sz_[sp] = z;
        }
        n_h_ = mol_.n_hydrogen();
    }

    const Mat& hamiltonian() const { return h_sys_; }
    const PropagationOptions& options() const { return opt_; }

    Eigen::Vector3d magnetization(const Mat& rho) const {
        if (n_h_ == 0) return Eigen::Vector3d::Zero();
        const double s = 2.0 / n_h_;
        return {s * expectation(rho, sx_.at("H")), s * expectation(rho, sy_.at("H")),
                s * expectation(rho, sz_.at("H"))};
    }

    Mat drive(const std::string& sp, double rabi, double phase) const {
        return rabi * (std::cos(phase) * sx_.at(sp) + std::sin(phase) * sy_.at(sp));
    }

    const Mat& free_unitary(double t) {
        auto it = free_cache_.find(t);
        if (it != free_cache_.end()) return it->second;
        return free_cache_.emplace(t, unitary_exp(h_sys_, t)).first->second;
    }

    // Instantaneous rotations, one per channel.
    Mat ideal_pulse_unitary(const PulseEvent& ev) const {
        Mat u = Mat::Identity(ops_.dim(), ops_.dim());
        for (const auto& ch : ev.channels) u = unitary_exp(drive(ch.species, 1.0, ch.phase), ch.angle) * u;
        return u;
    }

    // Boundaries where the set of active drive segments changes.
    static std::vector<double> piece_bounds(const PulseEvent& ev) {
        std::vector<double> b{0.0, ev.duration};
        for (const auto& ch : ev.channels)
            for (const auto& s : ch.segments()) {
                b.push_back(s.start);
                b.push_back(s.end);
            }
        std::sort(b.begin(), b.end());
        std::vector<double> out;
        for (double v : b)
            if (out.empty() || v - out.back() > 1e-15) out.push_back(std::clamp(v, 0.0, ev.duration));
        return out;
    }

    struct ActiveDrive {
        const PulseChannel* channel;
        DriveSegment seg;
    };

    static std::vector<ActiveDrive> active_at(const PulseEvent& ev, double t_rel) {
        std::vector<ActiveDrive> a;
        for (const auto& ch : ev.channels)
            for (const auto& s : ch.segments())
                if (t_rel >= s.start && t_rel < s.end) a.push_back({&ch, s});
        return a;
    }

    // Drive plus cross-talk for one instant. scale(species) gives 1 + OU noise.
    template <class Scale>
    Mat pulse_hamiltonian(const PulseEvent& ev, const std::vector<ActiveDrive>& act, double B_ext, double t_abs,
                          const NoiseConfig& noise, Scale&& scale) const {
        Mat h = h_sys_;
        const auto targets = ev.target_species();
        for (const auto& a : act) {
            const double rabi = a.seg.rabi * scale(a.channel->species);
            h += drive(a.channel->species, rabi, a.seg.phase);
            if (!noise.cross_talk_enabled) continue;
            const double g_src = mol_.gamma_of(a.channel->species);
            for (const auto& off : mol_.species()) {
                if (targets.count(off)) continue;
                const double g_off = mol_.gamma_of(off);
                const double amp = rabi * g_off / g_src;
                const double beat = (g_src - g_off) * B_ext;
                if (noise.cross_talk_mode == CrossTalkMode::resolved)
                    h += drive(off, amp, a.seg.phase + beat * t_abs);
                else
                    h += (-amp * amp / (2.0 * beat)) * sz_.at(off);  // Bloch-Siegert shift
            }
        }
        return h;
    }

    double max_substep(const PulseEvent& ev, const std::vector<ActiveDrive>& act, double B_ext,
                       const NoiseConfig& noise) const {
        double dt = std::numeric_limits<double>::infinity();
        for (const auto& a : act) {
            dt = std::min(dt, opt_.substep_fraction * two_pi / a.seg.rabi);
            if (noise.cross_talk_enabled && noise.cross_talk_mode == CrossTalkMode::resolved) {
                const double g_src = mol_.gamma_of(a.channel->species);
                for (const auto& off : mol_.species())
                    if (!ev.target_species().count(off))
                        dt = std::min(dt, opt_.substep_fraction * two_pi /
                                              std::abs((g_src - mol_.gamma_of(off)) * B_ext));
            }
        }
        return dt;
    }

    bool time_dependent(const NoiseConfig& noise) const {
        return noise.ou_active() || (noise.cross_talk_enabled && noise.cross_talk_mode == CrossTalkMode::resolved);
    }

    // Unitary of one pulse slot starting at t0. OU processes are advanced in place.
    Mat pulse_unitary(const PulseEvent& ev, double t0, double B_ext, const NoiseConfig& noise,
                      std::map<std::string, OuProcess>* ou) {
        if (opt_.ideal_pulses) return ideal_pulse_unitary(ev);
        const auto bounds = piece_bounds(ev);
        const bool sub = time_dependent(noise);
        Mat u = Mat::Identity(ops_.dim(), ops_.dim());
        long long steps = 0;
        for (std::size_t i = 0; i + 1 < bounds.size(); ++i) {
            const double a = bounds[i], b = bounds[i + 1];
            const auto act = active_at(ev, 0.5 * (a + b));
            if (act.empty()) {
                u = free_unitary(b - a) * u;
                continue;
            }
            long long n = 1;
            if (sub) n = std::max(1LL, (long long)std::ceil((b - a) / max_substep(ev, act, B_ext, noise) - 1e-9));
            steps += n;
            if (steps > opt_.max_substeps_per_event)
                throw NumericalError("pulse sub-step budget exceeded; step size cannot meet tolerance");
            const double dt = (b - a) / double(n);
            for (long long k = 0; k < n; ++k) {
                const double tm = t0 + a + (k + 0.5) * dt;
                auto scale = [&](const std::string& sp) {
                    if (!ou || ou->empty()) return 1.0;
                    auto it = ou->find(noise.independent_channels ? sp : std::string("shared"));
                    return 1.0 + it->second.at(tm);
                };
                u = unitary_exp(pulse_hamiltonian(ev, act, B_ext, tm, noise, scale), dt) * u;
            }
        }
        return u;
    }

    // Unitary of the non-detection events [first, last) for time-independent runs.
    Mat block_unitary(const Schedule& s, std::size_t first, std::size_t last, const NoiseConfig& noise) {
        Mat u = Mat::Identity(ops_.dim(), ops_.dim());
        for (std::size_t i = first; i < last; ++i) {
            if (const auto* f = std::get_if<FreeEvolution>(&s.events[i])) u = free_unitary(f->duration) * u;
            else if (const auto* p = std::get_if<PulseEvent>(&s.events[i]))
                u = pulse_unitary(*p, s.start[i], s.B_ext, noise, nullptr) * u;
        }
        return u;
    }

    MagnetizationTrace run(const Mat& rho0, const Schedule& s, const NoiseConfig& noise) {
        noise.validate();
        if (rho0.rows() != ops_.dim()) throw std::invalid_argument("state dimension does not match molecule");
        Rng rng(noise.rng_seed);
        std::map<std::string, OuProcess> ou;
        if (noise.ou_active() && !opt_.ideal_pulses) {
            if (noise.independent_channels)
                for (const auto& sp : mol_.species()) ou.emplace(sp, OuProcess(noise, rng));
            else
                ou.emplace("shared", OuProcess(noise, rng));
        }
        const bool cache = opt_.cache_stages && !time_dependent(noise);

        MagnetizationTrace tr;
        tr.n_H = n_h_;
        tr.sample_interval = s.sample_interval;
        Mat rho = rho0;
        std::vector<std::pair<std::vector<Event>, Mat>> block_cache;

        std::size_t i = 0;
        while (i < s.size()) {
            std::size_t j = i;
            while (j < s.size() && !std::holds_alternative<DetectionWindow>(s.events[j])) ++j;
            if (j > i) {
                Mat u;
                if (cache) {
                    std::vector<Event> sig(s.events.begin() + i, s.events.begin() + j);
                    auto it = std::find_if(block_cache.begin(), block_cache.end(),
                                           [&](const auto& c) { return c.first == sig; });
                    if (it == block_cache.end()) {
                        block_cache.emplace_back(std::move(sig), block_unitary(s, i, j, noise));
                        it = std::prev(block_cache.end());
                    }
                    u = it->second;
                } else {
                    u = Mat::Identity(ops_.dim(), ops_.dim());
                    for (std::size_t k = i; k < j; ++k) {
                        if (const auto* f = std::get_if<FreeEvolution>(&s.events[k]))
                            u = free_unitary(f->duration) * u;
                        else
                            u = pulse_unitary(std::get<PulseEvent>(s.events[k]), s.start[k], s.B_ext, noise, &ou) * u;
                    }
                }
                rho = u * rho * u.adjoint();
            }
            if (j < s.size()) {
                // Detection window: net identity on the sample, sample M at its start.
                tr.t.push_back(s.start[j]);
                tr.stage.push_back(s.stage[j]);
                tr.M.push_back(magnetization(rho));
                if (opt_.observer) opt_.observer(s.stage[j], rho);
                ++j;
            }
            i = j;
        }
        if (tr.t.empty()) {
            tr.t.push_back(s.total_duration());
            tr.stage.push_back(0);
            tr.M.push_back(magnetization(rho));
        }
        const double tr_err = std::abs(rho.trace() - rho0.trace());
        if (!(tr_err <= opt_.trace_tolerance)) throw NumericalError("trace drift exceeds tolerance");
        tr.final_state = rho;
        return tr;
    }

  private:
    Molecule mol_;
    PropagationOptions opt_;
    SpinOperators ops_;
    Mat h_sys_;
    std::map<std::string, Mat> sx_, sy_, sz_;
    std::map<double, Mat> free_cache_;
    int n_h_ = 0;
};

inline MagnetizationTrace propagate(const DensityMatrix& rho0, const Schedule& schedule, const Molecule& mol,
                                    const NoiseConfig& noise, PropagationOptions opt = {}) {
    Propagator p(mol, std::move(opt));
    return p.run(rho0.entries, schedule, noise);
}

// Tr(O U^n rho U^-n) for n = 1..N from one Schur factorization of the stage unitary.
class StageSeries {
  public:
    // Terms with |coefficient| below rel_cutoff * max are dropped.
    StageSeries(const Mat& u, const Mat& rho, const Mat& obs, double rel_cutoff = 1e-13) {
        Eigen::ComplexSchur<Mat> schur(u);
        const Mat& T = schur.matrixT();
        const Mat& Q = schur.matrixU();
        const Eigen::Index d = u.rows();
        double off = 0;
        for (Eigen::Index r = 0; r < d; ++r)
            for (Eigen::Index c = r + 1; c < d; ++c) off = std::max(off, std::abs(T(r, c)));
        if (off > 1e-8) throw NumericalError("stage unitary is not normal to working precision");
        const Mat R = Q.adjoint() * rho * Q;
        const Mat O = Q.adjoint() * obs * Q;
        std::vector<std::pair<double, cplx>> terms;
        for (Eigen::Index a = 0; a < d; ++a)
            for (Eigen::Index b = 0; b < d; ++b) {
                const cplx c = R(a, b) * O(b, a);
                if (std::abs(c) == 0) continue;
                terms.push_back({std::arg(T(a, a) * std::conj(T(b, b))), c});
            }
        std::sort(terms.begin(), terms.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
        std::vector<std::pair<double, cplx>> merged;
        for (const auto& [w, c] : terms) {
            if (!merged.empty() && w - merged.back().first < 1e-12) merged.back().second += c;
            else merged.push_back({w, c});
        }
        double cmax = 0;
        for (const auto& t : merged) cmax = std::max(cmax, std::abs(t.second));
        for (const auto& [w, c] : merged) {
            if (std::abs(c) <= rel_cutoff * cmax) continue;
            phase_.push_back(w);
            coef_.push_back(c);
        }
    }

    std::vector<double> evaluate(int n) const {
        const Eigen::Index m = Eigen::Index(phase_.size());
        Eigen::ArrayXcd z(m), zn(m), c(m);
        for (Eigen::Index k = 0; k < m; ++k) {
            z(k) = zn(k) = std::polar(1.0, phase_[k]);
            c(k) = coef_[k];
        }
        std::vector<double> out(n);
        for (int s = 1; s <= n; ++s) {
            out[s - 1] = (c * zn).sum().real();
            if (s % 256 == 0)
                for (Eigen::Index k = 0; k < m; ++k) zn(k) = std::polar(1.0, phase_[k] * double(s + 1));
            else
                zn *= z;
        }
        return out;
    }

    std::size_t n_terms() const { return phase_.size(); }

  private:
    std::vector<double> phase_;
    std::vector<cplx> coef_;
};

}  // namespace jinsect
