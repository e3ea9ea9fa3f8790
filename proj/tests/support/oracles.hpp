#pragma once

// Test-only oracles: finite-difference gradient checking, brute-force
// threshold-sweep detection metrics, an independent AS-Norm path, and a
// DFT peak finder. These deliberately do not share code with the
// implementations they check.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>
#include <vector>

#include "wpmfa/tensor.hpp"

namespace oracles {

inline double max_rel_err(const std::vector<double>& got, const std::vector<double>& want) {
    double sc = 1.0;
    for (double w : want) sc = std::max(sc, std::abs(w));
    double m = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i)
        m = std::max(m, std::abs(got[i] - want[i]) / sc);
    return m;
}

// Autodiff gradient of f (scalar output) w.r.t. x, against central
// finite differences; returns the max scale-relative error.
template <class F>
double check_grad(F f, wpmfa::Tensor x, double h = 1e-5) {
    wpmfa::Tensor xr = x.clone();
    xr.set_requires_grad(true);
    std::vector<double> g_ad;
    {
        wpmfa::Tape tape;
        wpmfa::Tensor loss = f(xr);
        tape.backward(loss);
        g_ad = xr.grad();
    }
    wpmfa::Tensor g_fd = wpmfa::finite_diff_grad(
        [&](const wpmfa::Tensor& xx) { return f(const_cast<wpmfa::Tensor&>(xx))[0]; }, xr, h);
    return max_rel_err(g_ad, g_fd.data());
}

// ---------------------------------------------------------------------------
// Brute-force detection metrics (accept iff score >= threshold)
// ---------------------------------------------------------------------------

struct OpPoint {
    double p_fa;
    double p_miss;
};

inline OpPoint count_at(const std::vector<double>& scores, const std::vector<bool>& labels,
                        double threshold) {
    std::size_t fa = 0, miss = 0, n_tar = 0, n_non = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i]) {
            ++n_tar;
            if (scores[i] < threshold) ++miss;
        } else {
            ++n_non;
            if (scores[i] >= threshold) ++fa;
        }
    }
    return {static_cast<double>(fa) / n_non, static_cast<double>(miss) / n_tar};
}

inline std::vector<double> candidate_thresholds(const std::vector<double>& scores) {
    std::set<double> distinct(scores.begin(), scores.end());
    std::vector<double> s(distinct.begin(), distinct.end());
    std::vector<double> thr;
    thr.push_back(std::numeric_limits<double>::infinity());
    for (auto it = s.rbegin(); it != s.rend(); ++it) {
        thr.push_back(*it);
        auto next = std::next(it);
        if (next != s.rend()) thr.push_back(0.5 * (*it + *next));  // midpoints
    }
    thr.push_back(-std::numeric_limits<double>::infinity());
    return thr;
}

inline double oracle_eer(const std::vector<double>& scores, const std::vector<bool>& labels) {
    std::vector<OpPoint> pts;
    for (double t : candidate_thresholds(scores)) pts.push_back(count_at(scores, labels, t));
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
        const double d0 = pts[i].p_fa - pts[i].p_miss;
        const double d1 = pts[i + 1].p_fa - pts[i + 1].p_miss;
        if (d0 <= 0.0 && d1 >= 0.0) {
            if (d1 == d0) return pts[i].p_fa;
            const double t = -d0 / (d1 - d0);
            return pts[i].p_fa + t * (pts[i + 1].p_fa - pts[i].p_fa);
        }
    }
    return pts.front().p_fa;
}

inline double oracle_min_dcf(const std::vector<double>& scores, const std::vector<bool>& labels,
                             double p_target, double c_fa, double c_miss) {
    double best = std::numeric_limits<double>::infinity();
    for (double t : candidate_thresholds(scores)) {
        OpPoint p = count_at(scores, labels, t);
        best = std::min(best, c_miss * p_target * p.p_miss + c_fa * (1.0 - p_target) * p.p_fa);
    }
    return best / std::min(c_miss * p_target, c_fa * (1.0 - p_target));
}

// ---------------------------------------------------------------------------
// Independent AS-Norm (select, full sort, explicit moments)
// ---------------------------------------------------------------------------

inline double oracle_as_norm(double raw, const std::vector<double>& enroll,
                             const std::vector<double>& test,
                             const std::vector<std::vector<double>>& cohort, std::size_t top_k) {
    auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
        double d = 0, na = 0, nb = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            d += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        return d / (std::sqrt(na) * std::sqrt(nb));
    };
    auto moments = [&](const std::vector<double>& emb) {
        std::vector<double> s;
        for (const auto& c : cohort) s.push_back(cosine(emb, c));
        std::sort(s.begin(), s.end());
        std::reverse(s.begin(), s.end());
        const std::size_t k = std::min(top_k, s.size());
        double mu = 0;
        for (std::size_t i = 0; i < k; ++i) mu += s[i];
        mu /= k;
        double var = 0;
        for (std::size_t i = 0; i < k; ++i) var += (s[i] - mu) * (s[i] - mu);
        var /= k;
        double sd = std::sqrt(var);
        if (sd < 1e-12) sd = 1e-12;
        return std::pair<double, double>{mu, sd};
    };
    auto [me, se] = moments(enroll);
    auto [mt, st] = moments(test);
    return 0.5 * ((raw - me) / se + (raw - mt) / st);
}

// ---------------------------------------------------------------------------
// DFT peak frequency of a real signal (Hz)
// ---------------------------------------------------------------------------

inline double dominant_frequency(const std::vector<double>& x, double sample_rate,
                                 double max_freq = 2000.0, std::size_t max_len = 8000) {
    const std::size_t n = std::min(x.size(), max_len);
    const std::size_t b_hi = std::min<std::size_t>(
        n / 2, static_cast<std::size_t>(max_freq * n / sample_rate) + 1);
    double best_mag = -1.0;
    std::size_t best_bin = 0;
    for (std::size_t b = 1; b < b_hi; ++b) {
        double re = 0, im = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double a = 2.0 * std::numbers::pi * b * i / n;
            re += x[i] * std::cos(a);
            im -= x[i] * std::sin(a);
        }
        const double mag = re * re + im * im;
        if (mag > best_mag) {
            best_mag = mag;
            best_bin = b;
        }
    }
    return static_cast<double>(best_bin) * sample_rate / static_cast<double>(n);
}

}  // namespace oracles
