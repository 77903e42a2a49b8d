#pragma once

#include "jinsect/molecule.hpp"

#include <fftw3.h>

#include <limits>
#include <mutex>
#include <numeric>

namespace jinsect {

struct Spectrum {
    std::vector<double> freqs;  // Hz, ascending, two-sided
    std::vector<double> magnitude;
    double bin_width = 0;

    std::size_t size() const { return freqs.size(); }
    // Index of the bin at frequency f (exact grid point).
    std::size_t index_of(double f) const {
        return std::size_t(std::llround((f - freqs.front()) / bin_width));
    }
};

struct Peak {
    double freq = 0;
    double height = 0;
    double fwhm = 0;
};

inline std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

// |DFT| of the zero-padded series, no window.
inline Spectrum spectrum(const std::vector<double>& series, double sample_interval, int zero_pad_factor = 4) {
    if (!(sample_interval > 0)) throw std::invalid_argument("sample interval must be positive");
    if (zero_pad_factor < 1) throw std::invalid_argument("zero_pad_factor must be >= 1");
    if (series.empty()) throw std::invalid_argument("empty series");
    const int L = int(series.size()) * zero_pad_factor;
    fftw_complex* in = fftw_alloc_complex(L);
    fftw_complex* out = fftw_alloc_complex(L);
    fftw_plan plan;
    {
        std::lock_guard<std::mutex> lock(fftw_planner_mutex());
        plan = fftw_plan_dft_1d(L, in, out, FFTW_FORWARD, FFTW_ESTIMATE);
    }
    for (int k = 0; k < L; ++k) {
        in[k][0] = k < int(series.size()) ? series[k] : 0.0;
        in[k][1] = 0.0;
    }
    fftw_execute(plan);
    Spectrum s;
    s.bin_width = 1.0 / (L * sample_interval);
    const int lo = -(L / 2), hi = (L - 1) / 2;
    for (int k = lo; k <= hi; ++k) {
        const int idx = (k + L) % L;
        s.freqs.push_back(k * s.bin_width);
        s.magnitude.push_back(std::hypot(out[idx][0], out[idx][1]));
    }
    {
        std::lock_guard<std::mutex> lock(fftw_planner_mutex());
        fftw_destroy_plan(plan);
    }
    fftw_free(in);
    fftw_free(out);
    return s;
}

inline Spectrum spectrum(const std::vector<double>& times, const std::vector<double>& series, int zero_pad_factor) {
    if (times.size() != series.size() || times.size() < 2) throw std::invalid_argument("need matching times, >= 2 samples");
    const double dt = (times.back() - times.front()) / double(times.size() - 1);
    for (std::size_t i = 1; i < times.size(); ++i)
        if (std::abs(times[i] - times[i - 1] - dt) > 1e-9 * std::max(1.0, std::abs(dt)) + 1e-6 * dt)
            throw std::invalid_argument("non-uniform timestamps");
    return spectrum(series, dt, zero_pad_factor);
}

// Local maxima above min_height; parabolic refinement on 3 bins; FWHM from half-height crossings.
inline std::vector<Peak> find_peaks(const Spectrum& s, double min_height) {
    std::vector<Peak> peaks;
    const auto& m = s.magnitude;
    const std::size_t n = m.size();
    for (std::size_t i = 1; i + 1 < n; ++i) {
        if (!(m[i] > m[i - 1] && m[i] >= m[i + 1] && m[i] >= min_height)) continue;
        const double y0 = m[i - 1], y1 = m[i], y2 = m[i + 1];
        const double den = y0 - 2 * y1 + y2;
        const double p = den != 0 ? 0.5 * (y0 - y2) / den : 0.0;
        Peak pk;
        pk.freq = s.freqs[i] + p * s.bin_width;
        pk.height = y1 - 0.25 * (y0 - y2) * p;
        if (!(pk.height > 0)) continue;
        const double half = 0.5 * pk.height;
        std::size_t l = i, r = i;
        while (l > 0 && m[l] > half) --l;
        while (r + 1 < n && m[r] > half) ++r;
        const double fl = m[l] <= half && m[l + 1] != m[l]
                              ? s.freqs[l] + (half - m[l]) / (m[l + 1] - m[l]) * s.bin_width
                              : s.freqs[l];
        const double fr = m[r] <= half && m[r - 1] != m[r]
                              ? s.freqs[r] - (half - m[r]) / (m[r - 1] - m[r]) * s.bin_width
                              : s.freqs[r];
        pk.fwhm = std::max(fr - fl, s.bin_width * 1e-6);
        peaks.push_back(pk);
    }
    return peaks;
}

// Keep the taller of any two maxima closer than min_sep_hz (noise ripple on one line).
inline std::vector<Peak> merge_close_peaks(std::vector<Peak> peaks, double min_sep_hz) {
    std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) { return a.height > b.height; });
    std::vector<Peak> kept;
    for (const auto& p : peaks) {
        bool near = false;
        for (const auto& k : kept) near = near || std::abs(k.freq - p.freq) < min_sep_hz;
        if (!near) kept.push_back(p);
    }
    std::sort(kept.begin(), kept.end(), [](const Peak& a, const Peak& b) { return a.freq < b.freq; });
    return kept;
}

inline std::vector<Peak> positive_peaks(const std::vector<Peak>& all) {
    std::vector<Peak> out;
    for (const auto& p : all)
        if (p.freq > 0) out.push_back(p);
    return out;
}

// Standard deviation of |S| over bins with lo <= f <= hi.
inline double noise_floor(const Spectrum& s, double lo, double hi) {
    double sum = 0, sum2 = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (s.freqs[i] >= lo && s.freqs[i] <= hi) {
            sum += s.magnitude[i];
            sum2 += s.magnitude[i] * s.magnitude[i];
            ++n;
        }
    if (n == 0) throw std::invalid_argument("empty noise band");
    const double mean = sum / double(n);
    return std::sqrt(std::max(0.0, sum2 / double(n) - mean * mean));
}

inline double measure_snr(const Spectrum& s, const Peak& peak, double band_lo, double band_hi) {
    const double sd = noise_floor(s, band_lo, band_hi);
    if (sd == 0) return std::numeric_limits<double>::infinity();
    return peak.height / sd;
}

// ---------------------------------------------------------------------------
// Closed-form ZZ signal.

struct EffectiveCoupling {
    int h;      // hydrogen site
    int other;  // partner site
    double J;   // rad/s
    std::string label;
};

// Couplings that survive the encoding, seen from each hydrogen.
inline std::vector<EffectiveCoupling> effective_couplings(const Molecule& mol, const std::set<std::string>& targeted) {
    std::vector<EffectiveCoupling> out;
    for (int i : mol.sites_of("H"))
        for (int j = 0; j < mol.size(); ++j) {
            if (j == i || mol.j_matrix(i, j) == 0) continue;
            const auto& nj = mol.nuclei[j];
            const bool keep = is_hydrogen(nj) ? !mol.equivalent(i, j) : targeted.count(nj.species) > 0;
            if (keep) out.push_back({i, j, mol.j_matrix(i, j), mol.label_of(i, j)});
        }
    return out;
}

// (2/N_H) sum_i <S^x_i>(t) for fully x-polarized H: (1/N_H) sum_i prod_j cos(J_ij t / 2).
inline double analytic_signal(const Molecule& mol, const std::set<std::string>& targeted, double t) {
    const auto hs = mol.sites_of("H");
    if (hs.empty()) throw std::invalid_argument("molecule has no hydrogen");
    const auto eff = effective_couplings(mol, targeted);
    double total = 0;
    for (int i : hs) {
        double prod = 1;
        for (const auto& c : eff)
            if (c.h == i) prod *= std::cos(0.5 * c.J * t);
        total += prod;
    }
    return total / double(hs.size());
}

struct Resonance {
    double freq_hz = 0;
    double amplitude = 0;
    std::map<std::string, int> coefficients;  // freq = sum_k c_k J_k / (4 pi)
};

// Expand each product of cosines with cos a cos b = (cos(a+b) + cos(a-b))/2.
inline std::vector<Resonance> predict_resonances(const Molecule& mol, const std::set<std::string>& targeted) {
    const auto hs = mol.sites_of("H");
    if (hs.empty()) throw std::invalid_argument("molecule has no hydrogen");
    const auto eff = effective_couplings(mol, targeted);
    std::map<std::string, double> value;
    for (const auto& c : eff) value[c.label] = c.J;
    auto freq_of = [&](const std::map<std::string, int>& v) {
        double w = 0;
        for (const auto& [k, c] : v) w += c * value.at(k);
        return w / (4.0 * std::numbers::pi);
    };
    std::map<std::map<std::string, int>, double> acc;
    for (int i : hs) {
        std::map<std::map<std::string, int>, double> terms{{{}, 1.0 / double(hs.size())}};
        for (const auto& c : eff) {
            if (c.h != i) continue;
            std::map<std::map<std::string, int>, double> next;
            for (const auto& [v, a] : terms)
                for (int sgn : {1, -1}) {
                    auto w = v;
                    w[c.label] += sgn;
                    if (w[c.label] == 0) w.erase(c.label);
                    next[w] += 0.5 * a;
                }
            terms = std::move(next);
        }
        for (const auto& [key, a] : terms) {
            auto v = key;
            const double f = freq_of(v);
            if (f < 0 || (f == 0 && !v.empty() && v.begin()->second < 0))
                for (auto& [k, c] : v) c = -c;
            acc[v] += a;
        }
    }
    std::vector<Resonance> lines;
    for (const auto& [v, a] : acc) {
        if (std::abs(a) < 1e-14) continue;
        const double f = freq_of(v);
        auto it = std::find_if(lines.begin(), lines.end(), [&](const Resonance& r) { return std::abs(r.freq_hz - f) < 1e-9; });
        if (it == lines.end()) lines.push_back({f, a, v});
        else {
            if (std::abs(a) > std::abs(it->amplitude)) it->coefficients = v;
            it->amplitude += a;
        }
    }
    lines.erase(std::remove_if(lines.begin(), lines.end(), [](const Resonance& r) { return std::abs(r.amplitude) < 1e-14; }),
                lines.end());
    std::sort(lines.begin(), lines.end(), [](const Resonance& a, const Resonance& b) { return a.freq_hz < b.freq_hz; });
    return lines;
}

inline int signed_peak_count(const std::vector<Resonance>& lines) {
    int n = 0;
    for (const auto& r : lines) n += r.freq_hz > 0 ? 2 : 1;
    return n;
}

// n+1 rule: each inequivalent hydrogen group contributes prod over coupled groups of (n_X + 1).
inline int multiplicity_peak_count(const Molecule& mol, const std::set<std::string>& targeted) {
    const auto eff = effective_couplings(mol, targeted);
    auto group_of = [&](int i) {
        return mol.nuclei[i].equivalence_group ? "g:" + *mol.nuclei[i].equivalence_group : "s:" + mol.nuclei[i].label;
    };
    std::map<std::string, int> size;
    for (int i = 0; i < mol.size(); ++i) size[group_of(i)]++;
    std::map<std::string, std::set<std::string>> partners;
    for (int i : mol.sites_of("H")) partners[group_of(i)];
    for (const auto& c : eff) partners[group_of(c.h)].insert(group_of(c.other));
    int total = 0;
    for (const auto& [g, ps] : partners) {
        int lines = 1;
        for (const auto& p : ps) lines *= size[p] + 1;
        total += lines;
    }
    return total;
}

// ---------------------------------------------------------------------------
// Coupling constants from observed peak positions.

struct CouplingEstimate {
    std::map<std::string, double> j_hz;
    int n_assigned = 0;
    double rms_residual_hz = 0;
};

// Assign each predicted line to the nearest unused observed peak within window_hz
// (strongest lines first), then solve the linear line equations in least squares.
inline CouplingEstimate estimate_couplings(const std::vector<Peak>& peaks, const std::vector<Resonance>& predicted,
                                           const std::vector<std::string>& labels, double window_hz = 1.5) {
    std::vector<std::size_t> order(predicted.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return std::abs(predicted[a].amplitude) > std::abs(predicted[b].amplitude); });
    std::vector<bool> used(peaks.size(), false);
    std::vector<std::pair<std::size_t, double>> pairs;
    for (std::size_t li : order) {
        double best = window_hz;
        std::size_t bi = peaks.size();
        for (std::size_t k = 0; k < peaks.size(); ++k) {
            const double d = std::abs(peaks[k].freq - predicted[li].freq_hz);
            if (!used[k] && d <= best) {
                best = d;
                bi = k;
            }
        }
        if (bi < peaks.size()) {
            used[bi] = true;
            pairs.push_back({li, peaks[bi].freq});
        }
    }
    CouplingEstimate est;
    est.n_assigned = int(pairs.size());
    if (pairs.empty()) {
        for (const auto& l : labels) est.j_hz[l] = std::numeric_limits<double>::quiet_NaN();
        return est;
    }
    Eigen::MatrixXd A(pairs.size(), labels.size());
    Eigen::VectorXd b(pairs.size());
    for (std::size_t r = 0; r < pairs.size(); ++r) {
        const auto& coef = predicted[pairs[r].first].coefficients;
        for (std::size_t c = 0; c < labels.size(); ++c) {
            auto it = coef.find(labels[c]);
            A(r, c) = it == coef.end() ? 0.0 : 0.5 * it->second;  // J in Hz: f = sum c_k J_k / 2
        }
        b(r) = pairs[r].second;
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
    const Eigen::VectorXd x = qr.solve(b);
    const bool full_rank = qr.rank() == Eigen::Index(labels.size());
    for (std::size_t c = 0; c < labels.size(); ++c)
        est.j_hz[labels[c]] = full_rank ? x(c) : std::numeric_limits<double>::quiet_NaN();
    est.rms_residual_hz = std::sqrt((A * x - b).squaredNorm() / double(pairs.size()));
    return est;
}

}  // namespace jinsect
