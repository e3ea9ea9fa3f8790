#pragma once

// Trial scoring and detection metrics: cosine similarity, adaptive score
// normalization (AS-Norm), EER on the interpolated ROC polyline, and
// normalized minimum detection cost.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace wpmfa {

struct Trial {
    std::string enroll;
    std::string test;
    bool target = false;
};

using TrialList = std::vector<Trial>;

struct ScoreSet {
    std::vector<double> scores;
    std::vector<bool> labels;  // true = target

    void require_both_classes() const {
        bool has_t = false, has_n = false;
        for (bool l : labels) (l ? has_t : has_n) = true;
        if (!has_t || !has_n)
            throw std::invalid_argument("score set must contain both target and nontarget trials");
    }
};

struct Cohort {
    std::vector<std::vector<double>> embeddings;
    std::size_t top_k = 300;  // capped at cohort size
};

struct DcfConfig {
    double p_target = 0.05;
    double c_fa = 1.0;
    double c_miss = 1.0;

    void validate() const {
        if (p_target <= 0.0 || p_target >= 1.0)
            throw std::invalid_argument("dcf: p_target must be in (0,1)");
        if (c_fa <= 0.0 || c_miss <= 0.0)
            throw std::invalid_argument("dcf: costs must be positive");
    }
};

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

inline double cosine_score(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("cosine_score: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0)
        throw std::invalid_argument("cosine_score: zero-norm embedding");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace scoredet {

// Mean and population std of the top_k highest cohort scores of an
// embedding; sigma floored at 1e-12.
inline std::pair<double, double> topk_moments(const std::vector<double>& emb,
                                              const Cohort& cohort) {
    std::vector<double> s;
    s.reserve(cohort.embeddings.size());
    for (const auto& c : cohort.embeddings) s.push_back(cosine_score(emb, c));
    const std::size_t k = std::min(cohort.top_k, s.size());
    std::partial_sort(s.begin(), s.begin() + k, s.end(), std::greater<>{});
    double mu = 0.0;
    for (std::size_t i = 0; i < k; ++i) mu += s[i];
    mu /= static_cast<double>(k);
    double var = 0.0;
    for (std::size_t i = 0; i < k; ++i) var += (s[i] - mu) * (s[i] - mu);
    var /= static_cast<double>(k);
    return {mu, std::max(std::sqrt(var), 1e-12)};
}

}  // namespace scoredet

// Adaptive s-norm with per-side top-k cohort selection.
inline double as_norm(double raw, const std::vector<double>& enroll,
                      const std::vector<double>& test, const Cohort& cohort) {
    if (cohort.embeddings.empty())
        throw std::invalid_argument("as_norm: empty cohort");
    if (cohort.top_k < 1) throw std::invalid_argument("as_norm: top_k must be >= 1");
    auto [mu_e, sd_e] = scoredet::topk_moments(enroll, cohort);
    auto [mu_t, sd_t] = scoredet::topk_moments(test, cohort);
    return 0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

namespace scoredet {

struct RocPoint {
    double p_fa;
    double p_miss;
};

// Operating points at thresholds +inf, then each distinct score value in
// descending order; the decision rule is accept iff score >= threshold.
inline std::vector<RocPoint> roc_points(const ScoreSet& s) {
    s.require_both_classes();
    std::size_t n_tar = 0, n_non = 0;
    std::vector<std::pair<double, bool>> sl(s.scores.size());
    for (std::size_t i = 0; i < s.scores.size(); ++i) {
        sl[i] = {s.scores[i], s.labels[i]};
        (s.labels[i] ? n_tar : n_non)++;
    }
    std::sort(sl.begin(), sl.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<RocPoint> pts;
    pts.push_back({0.0, 1.0});  // threshold +inf
    std::size_t acc_tar = 0, acc_non = 0;
    for (std::size_t i = 0; i < sl.size(); ++i) {
        (sl[i].second ? acc_tar : acc_non)++;
        // Emit a point only after the last copy of a tied score.
        if (i + 1 < sl.size() && sl[i + 1].first == sl[i].first) continue;
        pts.push_back({static_cast<double>(acc_non) / n_non,
                       static_cast<double>(n_tar - acc_tar) / n_tar});
    }
    return pts;
}

}  // namespace scoredet

// Equal error rate via linear interpolation on the ROC polyline.
inline double eer(const ScoreSet& s) {
    const auto pts = scoredet::roc_points(s);
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
        const double d0 = pts[i].p_fa - pts[i].p_miss;
        const double d1 = pts[i + 1].p_fa - pts[i + 1].p_miss;
        if (d0 <= 0.0 && d1 >= 0.0) {
            if (d1 == d0) return pts[i].p_fa;
            const double t = -d0 / (d1 - d0);
            return pts[i].p_fa + t * (pts[i + 1].p_fa - pts[i].p_fa);
        }
    }
    // FA > miss already at the first point (all thresholds below all scores).
    return pts.front().p_fa;
}

// Minimum normalized detection cost over all ROC operating points.
inline double min_dcf(const ScoreSet& s, const DcfConfig& cfg = {}) {
    cfg.validate();
    const auto pts = scoredet::roc_points(s);
    const double norm = std::min(cfg.c_miss * cfg.p_target, cfg.c_fa * (1.0 - cfg.p_target));
    double best = std::numeric_limits<double>::infinity();
    for (const auto& p : pts) {
        const double dcf =
            cfg.c_miss * cfg.p_target * p.p_miss + cfg.c_fa * (1.0 - cfg.p_target) * p.p_fa;
        best = std::min(best, dcf);
    }
    return best / norm;
}

// ---------------------------------------------------------------------------
// Evaluation pipeline
// ---------------------------------------------------------------------------

struct EvalResult {
    double eer;
    double min_dcf;
    ScoreSet scores;
};

inline EvalResult evaluate(const TrialList& trials,
                           const std::map<std::string, std::vector<double>>& embeddings,
                           const Cohort* cohort = nullptr, const DcfConfig& dcf = {}) {
    ScoreSet set;
    for (const auto& t : trials) {
        auto ei = embeddings.find(t.enroll);
        auto ti = embeddings.find(t.test);
        if (ei == embeddings.end())
            throw std::out_of_range("no embedding for enrollment utterance '" + t.enroll + "'");
        if (ti == embeddings.end())
            throw std::out_of_range("no embedding for test utterance '" + t.test + "'");
        double s = cosine_score(ei->second, ti->second);
        if (cohort) s = as_norm(s, ei->second, ti->second, *cohort);
        set.scores.push_back(s);
        set.labels.push_back(t.target);
    }
    return {eer(set), min_dcf(set, dcf), std::move(set)};
}

// ---------------------------------------------------------------------------
// File formats: trial list "label enroll test", score file
// "enroll test score label".
// ---------------------------------------------------------------------------

inline TrialList read_trial_list(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open trial list: " + path);
    TrialList out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        int label;
        Trial t;
        if (!(is >> label >> t.enroll >> t.test) || (label != 0 && label != 1))
            throw std::runtime_error("malformed trial line: " + line);
        t.target = label == 1;
        out.push_back(std::move(t));
    }
    return out;
}

inline void write_score_file(const std::string& path, const TrialList& trials,
                             const ScoreSet& scores) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write score file: " + path);
    f.precision(17);
    for (std::size_t i = 0; i < trials.size(); ++i)
        f << trials[i].enroll << " " << trials[i].test << " " << scores.scores[i] << " "
          << (scores.labels[i] ? 1 : 0) << "\n";
}

}  // namespace wpmfa
