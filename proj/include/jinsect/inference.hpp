#pragma once

#include "jinsect/engine.hpp"

#include <atomic>
#include <thread>

namespace jinsect {

struct ForwardSpec {
    Molecule molecule;
    ProtocolConfig protocol;
    std::vector<std::string> labels{"J", "J1", "J2"};
    double amplitude = 1e-3;  // readout signal per unit normalized magnetization
    bool apply_t2 = true;
    bool cross_talk = true;   // deterministic part of the pulse errors
    HamiltonianModel model = HamiltonianModel::full();
};

// Noise-free pipeline signal as a function of the coupling labels (Hz).
class ForwardModel {
  public:
    explicit ForwardModel(ForwardSpec spec) : spec_(std::move(spec)) {
        schedule_ = build_schedule(spec_.protocol, spec_.molecule);
        for (std::size_t i = 0; i < schedule_.size(); ++i)
            if (std::holds_alternative<DetectionWindow>(schedule_.events[i])) times_.push_back(schedule_.start[i]);
        first_ = 0;
        while (first_ < schedule_.size() && schedule_.stage[first_] == 0) ++first_;
        last_ = first_;
        while (last_ < schedule_.size() && !std::holds_alternative<DetectionWindow>(schedule_.events[last_])) ++last_;
        noise_ = NoiseConfig::off();
        noise_.cross_talk_enabled = spec_.cross_talk;
        for (const auto& l : spec_.labels) spec_.molecule.labelled_coupling(l);
    }

    const std::vector<double>& times() const { return times_; }
    std::size_t n_samples() const { return times_.size(); }
    const ForwardSpec& spec() const { return spec_; }
    const Schedule& schedule() const { return schedule_; }

    // Normalized magnetization m_n = M_x / (B_H / 2).
    std::vector<double> magnetization(const std::vector<double>& params_hz) const {
        if (params_hz.size() != spec_.labels.size()) throw std::invalid_argument("parameter count mismatch");
        Molecule mol = spec_.molecule;
        for (std::size_t k = 0; k < params_hz.size(); ++k) mol.set_labelled_coupling(spec_.labels[k], two_pi * params_hz[k]);
        PropagationOptions opt;
        opt.model = spec_.model;
        Propagator prop(mol, opt);
        const auto& pc = spec_.protocol;
        const DensityMatrix rho0 = thermal_state(mol, mol.thermal_params(pc.B_ext, pc.temperature), {});
        const Eigen::Index d = rho0.dim();
        const Mat dev = rho0.entries - Mat::Identity(d, d) / double(d);
        const Mat prep = prop.block_unitary(schedule_, 0, first_, noise_);
        const Mat stage = prop.block_unitary(schedule_, first_, last_, noise_);
        const double bh = thermal_polarization(mol.gamma_of("H"), pc.B_ext, pc.temperature);
        Mat obs = Mat::Zero(d, d);
        for (int k : mol.sites_of("H")) obs += site_matrix(mol.size(), k, Axis::x);
        obs *= (2.0 / mol.n_hydrogen()) / (bh / 2.0);
        StageSeries series(stage, prep * dev * prep.adjoint(), obs);
        return series.evaluate(int(n_samples()));
    }

    std::vector<double> operator()(const std::vector<double>& params_hz) const {
        auto m = magnetization(params_hz);
        for (std::size_t n = 0; n < m.size(); ++n)
            m[n] *= spec_.amplitude * (spec_.apply_t2 ? std::exp(-times_[n] / spec_.protocol.T2) : 1.0);
        return m;
    }

  private:
    ForwardSpec spec_;
    Schedule schedule_;
    std::vector<double> times_;
    std::size_t first_ = 0, last_ = 0;
    NoiseConfig noise_;
};

inline double log_likelihood(const std::vector<double>& data, const std::vector<double>& model, double sigma) {
    if (!(sigma > 0)) throw std::invalid_argument("noise sigma must be positive");
    if (data.size() != model.size()) throw std::invalid_argument("data and model grids differ");
    double s = 0;
    for (std::size_t i = 0; i < data.size(); ++i) s += (data[i] - model[i]) * (data[i] - model[i]);
    return -s / (2.0 * sigma * sigma);
}

inline double log_likelihood(const std::vector<double>& data, const std::vector<double>& params, double sigma,
                             const ForwardModel& forward) {
    if (data.size() != forward.n_samples()) throw std::invalid_argument("data and model grids differ");
    return log_likelihood(data, forward(params), sigma);
}

struct PriorSpec {
    std::vector<std::string> names;
    std::vector<double> lower, upper;  // Hz

    std::size_t dim() const { return names.size(); }
    void validate() const {
        if (lower.size() != names.size() || upper.size() != names.size()) throw std::invalid_argument("prior size mismatch");
        for (std::size_t k = 0; k < dim(); ++k)
            if (!(lower[k] < upper[k])) throw std::invalid_argument("prior bounds must satisfy lower < upper");
    }
    bool contains(const std::vector<double>& x) const {
        for (std::size_t k = 0; k < dim(); ++k)
            if (x[k] < lower[k] || x[k] > upper[k]) return false;
        return true;
    }
};

struct SamplerOptions {
    int n_chains = 4;
    int n_kept = 50000;        // total over chains
    int burn_in = 3000;        // per chain, with proposal adaptation
    int adapt_interval = 250;
    double grid_step = 0.25;   // Hz, coarse search used to seed the chains
    double step_scale = 1.0;   // multiplies the adapted proposal covariance
    double rhat_threshold = 1.05;
    std::uint64_t seed = 1;
    int workers = 0;           // 0 = hardware concurrency
};

struct Posterior {
    std::vector<std::string> names;
    std::vector<std::vector<double>> samples;  // kept samples, chain-major
    std::vector<int> chain;
    std::vector<double> mean, sigma, rhat;
    std::vector<double> map_estimate;
    double acceptance = 0;
    bool converged = false;
    long long n_evaluations = 0;
};

inline int worker_count(int requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("JINSECT_WORKERS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

// Split-chain potential scale reduction for one parameter.
inline double split_rhat(const std::vector<std::vector<double>>& chains) {
    std::vector<std::vector<double>> halves;
    for (const auto& c : chains) {
        const std::size_t h = c.size() / 2;
        halves.emplace_back(c.begin(), c.begin() + h);
        halves.emplace_back(c.begin() + h, c.begin() + 2 * h);
    }
    const double n = double(halves.front().size());
    const double m = double(halves.size());
    std::vector<double> means, vars;
    for (const auto& c : halves) {
        const double mu = std::accumulate(c.begin(), c.end(), 0.0) / n;
        double v = 0;
        for (double x : c) v += (x - mu) * (x - mu);
        means.push_back(mu);
        vars.push_back(v / (n - 1));
    }
    const double grand = std::accumulate(means.begin(), means.end(), 0.0) / m;
    double B = 0;
    for (double mu : means) B += (mu - grand) * (mu - grand);
    B *= n / (m - 1);
    const double W = std::accumulate(vars.begin(), vars.end(), 0.0) / m;
    if (W == 0) return B == 0 ? 1.0 : std::numeric_limits<double>::infinity();
    return std::sqrt(((n - 1) / n * W + B / n) / W);
}

inline Posterior summarize(Posterior p) {
    const std::size_t d = p.names.size();
    p.mean.assign(d, 0);
    p.sigma.assign(d, 0);
    const double n = double(p.samples.size());
    for (const auto& s : p.samples)
        for (std::size_t k = 0; k < d; ++k) p.mean[k] += s[k] / n;
    for (const auto& s : p.samples)
        for (std::size_t k = 0; k < d; ++k) p.sigma[k] += (s[k] - p.mean[k]) * (s[k] - p.mean[k]) / n;
    for (auto& v : p.sigma) v = std::sqrt(v);
    return p;
}

namespace detail {

template <class LogPost>
std::vector<double> nelder_mead(LogPost&& f, std::vector<double> x0, double step, int max_iter, long long& evals) {
    const std::size_t d = x0.size();
    std::vector<std::vector<double>> pts{x0};
    for (std::size_t k = 0; k < d; ++k) {
        auto p = x0;
        p[k] += step;
        pts.push_back(p);
    }
    std::vector<double> val;
    for (const auto& p : pts) val.push_back(-f(p));
    evals += static_cast<long long>(pts.size());
    for (int it = 0; it < max_iter; ++it) {
        std::vector<std::size_t> idx(pts.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return val[a] < val[b]; });
        const std::size_t best = idx.front(), worst = idx.back(), second = idx[idx.size() - 2];
        if (std::abs(val[worst] - val[best]) < 1e-9 * (1 + std::abs(val[best]))) break;
        std::vector<double> c(d, 0);
        for (std::size_t i : idx)
            if (i != worst)
                for (std::size_t k = 0; k < d; ++k) c[k] += pts[i][k] / double(d);
        auto along = [&](double t) {
            std::vector<double> p(d);
            for (std::size_t k = 0; k < d; ++k) p[k] = c[k] + t * (pts[worst][k] - c[k]);
            return p;
        };
        auto r = along(-1.0);
        const double fr = -f(r);
        ++evals;
        if (fr < val[best]) {
            auto e = along(-2.0);
            const double fe = -f(e);
            ++evals;
            if (fe < fr) pts[worst] = e, val[worst] = fe;
            else pts[worst] = r, val[worst] = fr;
        } else if (fr < val[second]) {
            pts[worst] = r, val[worst] = fr;
        } else {
            auto k = along(0.5);
            const double fk = -f(k);
            ++evals;
            if (fk < val[worst]) pts[worst] = k, val[worst] = fk;
            else {
                for (std::size_t i : idx)
                    if (i != best) {
                        for (std::size_t q = 0; q < d; ++q) pts[i][q] = pts[best][q] + 0.5 * (pts[i][q] - pts[best][q]);
                        val[i] = -f(pts[i]);
                        ++evals;
                    }
            }
        }
    }
    const auto it = std::min_element(val.begin(), val.end());
    return pts[std::size_t(it - val.begin())];
}

}  // namespace detail

// Adaptive random-walk Metropolis seeded by a coarse grid search and a local optimizer.
inline Posterior posterior(const std::vector<double>& data, const PriorSpec& prior, double sigma,
                           const ForwardModel& forward, const SamplerOptions& opt = {}) {
    prior.validate();
    if (!(sigma > 0)) throw std::invalid_argument("noise sigma must be positive");
    if (data.size() != forward.n_samples()) throw std::invalid_argument("data and model grids differ");
    if (prior.names != forward.spec().labels) throw std::invalid_argument("prior names must match forward labels");
    const std::size_t d = prior.dim();
    std::atomic<long long> evals{0};
    auto logpost = [&](const std::vector<double>& x) {
        if (!prior.contains(x)) return -std::numeric_limits<double>::infinity();
        ++evals;
        return log_likelihood(data, forward(x), sigma);
    };

    // Coarse grid.
    std::vector<std::vector<double>> axes(d);
    for (std::size_t k = 0; k < d; ++k) {
        const int n = std::max(2, int(std::floor((prior.upper[k] - prior.lower[k]) / opt.grid_step)) + 1);
        for (int i = 0; i < n; ++i) axes[k].push_back(prior.lower[k] + (prior.upper[k] - prior.lower[k]) * i / (n - 1));
    }
    std::vector<std::vector<double>> grid{{}};
    for (const auto& ax : axes) {
        std::vector<std::vector<double>> next;
        for (const auto& g : grid)
            for (double v : ax) {
                auto p = g;
                p.push_back(v);
                next.push_back(p);
            }
        grid = std::move(next);
    }
    const int workers = worker_count(opt.workers);
    std::vector<double> gval(grid.size());
    {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t i; (i = next++) < grid.size();) gval[i] = logpost(grid[i]);
            });
        for (auto& t : pool) t.join();
    }
    std::vector<double> best = grid[std::size_t(std::max_element(gval.begin(), gval.end()) - gval.begin())];
    long long nm_evals = 0;
    best = detail::nelder_mead(logpost, best, 0.5 * opt.grid_step, 400, nm_evals);

    // Proposal from the curvature at the optimum, diagonal fallback.
    Eigen::MatrixXd cov = Eigen::MatrixXd::Identity(d, d) * std::pow(0.1 * opt.grid_step, 2);
    {
        const double h = 0.02 * opt.grid_step;
        Eigen::MatrixXd H(d, d);
        const double f0 = logpost(best);
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = a; b < d; ++b) {
                auto at = [&](double da, double db) {
                    auto p = best;
                    p[a] += da;
                    p[b] += db;
                    return logpost(p);
                };
                H(a, b) = a == b ? (at(h, 0) - 2 * f0 + at(-h, 0)) / (h * h)
                                 : (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4 * h * h);
                H(b, a) = H(a, b);
            }
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(-H);
        if (es.info() == Eigen::Success && es.eigenvalues().minCoeff() > 0 && std::isfinite(es.eigenvalues().sum()))
            cov = es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
    }

    const int kept_per_chain = (opt.n_kept + opt.n_chains - 1) / opt.n_chains;
    std::vector<std::vector<std::vector<double>>> chains(opt.n_chains);
    std::vector<long long> accepted(opt.n_chains, 0);
    auto run_chain = [&](int c) {
        Rng rng(opt.seed * 0x9E3779B97F4A7C15ULL + std::uint64_t(c) + 1);
        std::normal_distribution<double> gauss(0.0, 1.0);
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        Eigen::MatrixXd prop = cov * (2.38 * 2.38 / double(d)) * opt.step_scale;
        Eigen::LLT<Eigen::MatrixXd> llt(prop);
        Eigen::MatrixXd L = llt.matrixL();
        auto draw = [&](const std::vector<double>& x, const Eigen::MatrixXd& chol, double scale) {
            Eigen::VectorXd z(d);
            for (std::size_t k = 0; k < d; ++k) z(k) = gauss(rng);
            const Eigen::VectorXd step = scale * chol * z;
            auto y = x;
            for (std::size_t k = 0; k < d; ++k) y[k] += step(k);
            return y;
        };
        // Overdispersed start around the optimum.
        std::vector<double> x = best;
        for (int tries = 0; tries < 100; ++tries) {
            auto y = draw(best, L, 2.0);
            if (prior.contains(y)) {
                x = y;
                break;
            }
        }
        double lx = logpost(x);
        std::vector<std::vector<double>> hist;
        for (int it = 0; it < opt.burn_in + kept_per_chain; ++it) {
            auto y = draw(x, L, 1.0);
            const double ly = logpost(y);
            const bool acc = std::log(unif(rng)) < ly - lx;
            if (acc) x = y, lx = ly;
            if (it < opt.burn_in) {
                hist.push_back(x);
                if ((it + 1) % opt.adapt_interval == 0 && hist.size() > 2 * d + 10) {
                    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(d, d);
                    Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
                    const std::size_t from = hist.size() / 2;
                    const double cnt = double(hist.size() - from);
                    for (std::size_t i = from; i < hist.size(); ++i)
                        for (std::size_t k = 0; k < d; ++k) mu(k) += hist[i][k] / cnt;
                    for (std::size_t i = from; i < hist.size(); ++i) {
                        Eigen::VectorXd v(d);
                        for (std::size_t k = 0; k < d; ++k) v(k) = hist[i][k] - mu(k);
                        S += v * v.transpose() / cnt;
                    }
                    S += Eigen::MatrixXd::Identity(d, d) * 1e-12;
                    Eigen::LLT<Eigen::MatrixXd> l2(S * (2.38 * 2.38 / double(d)) * opt.step_scale);
                    if (l2.info() == Eigen::Success && S.trace() > 0) L = l2.matrixL();
                }
            } else {
                chains[c].push_back(x);
                accepted[c] += acc;
            }
        }
    };
    {
        std::atomic<int> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < std::min(workers, opt.n_chains); ++w)
            pool.emplace_back([&] {
                for (int c; (c = next++) < opt.n_chains;) run_chain(c);
            });
        for (auto& t : pool) t.join();
    }

    Posterior p;
    p.names = prior.names;
    p.map_estimate = best;
    long long acc_total = 0;
    for (int c = 0; c < opt.n_chains; ++c) {
        for (const auto& s : chains[c]) {
            p.samples.push_back(s);
            p.chain.push_back(c);
        }
        acc_total += accepted[c];
    }
    p.acceptance = double(acc_total) / double(p.samples.size());
    for (std::size_t k = 0; k < d; ++k) {
        std::vector<std::vector<double>> per(opt.n_chains);
        for (int c = 0; c < opt.n_chains; ++c)
            for (const auto& s : chains[c]) per[c].push_back(s[k]);
        p.rhat.push_back(split_rhat(per));
    }
    p.converged = std::all_of(p.rhat.begin(), p.rhat.end(), [&](double r) { return r < opt.rhat_threshold; });
    p.n_evaluations = evals.load();
    return summarize(std::move(p));
}

// Normalized likelihood weights on an explicit grid (uniform prior over the grid).
struct GridPosterior {
    std::vector<std::vector<double>> points;
    std::vector<double> weights;
    std::vector<double> mean, sigma;
};

inline GridPosterior grid_posterior(const std::vector<double>& data, const std::vector<std::vector<double>>& points,
                                    double sigma, const ForwardModel& forward) {
    GridPosterior g;
    g.points = points;
    std::vector<double> ll;
    for (const auto& p : points) ll.push_back(log_likelihood(data, p, sigma, forward));
    const double mx = *std::max_element(ll.begin(), ll.end());
    double z = 0;
    for (double v : ll) z += std::exp(v - mx);
    for (double v : ll) g.weights.push_back(std::exp(v - mx) / z);
    const std::size_t d = points.front().size();
    g.mean.assign(d, 0);
    g.sigma.assign(d, 0);
    for (std::size_t i = 0; i < points.size(); ++i)
        for (std::size_t k = 0; k < d; ++k) g.mean[k] += g.weights[i] * points[i][k];
    for (std::size_t i = 0; i < points.size(); ++i)
        for (std::size_t k = 0; k < d; ++k) g.sigma[k] += g.weights[i] * std::pow(points[i][k] - g.mean[k], 2);
    for (auto& v : g.sigma) v = std::sqrt(v);
    return g;
}

}  // namespace jinsect
