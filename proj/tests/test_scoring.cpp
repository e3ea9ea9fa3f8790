#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <random>

#include "support/oracles.hpp"
#include "wpmfa/scoring.hpp"

using namespace wpmfa;

TEST_CASE("cosine_score basics") {
    CHECK(cosine_score({1, 0}, {1, 0}) == doctest::Approx(1.0));
    CHECK(cosine_score({1, 0}, {0, 1}) == doctest::Approx(0.0));
    CHECK(cosine_score({1, 0}, {-1, 0}) == doctest::Approx(-1.0));
    CHECK(cosine_score({2, 0}, {5, 0}) == doctest::Approx(1.0));  // scale invariant
    CHECK_THROWS_AS(cosine_score({1, 0}, {1, 0, 0}), std::invalid_argument);
    CHECK_THROWS_AS(cosine_score({0, 0}, {1, 0}), std::invalid_argument);
}

TEST_CASE("eer: worked examples") {
    // Targets {0.8, 0.6, 0.4}, nontargets {0.5, 0.3, 0.1}: one miss vs one FA
    // cross at 1/3.
    ScoreSet s;
    s.scores = {0.8, 0.6, 0.4, 0.5, 0.3, 0.1};
    s.labels = {true, true, true, false, false, false};
    CHECK(eer(s) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    // Perfect separation.
    ScoreSet p;
    p.scores = {0.9, 0.8, 0.2, 0.1};
    p.labels = {true, true, false, false};
    CHECK(eer(p) == doctest::Approx(0.0));

    // Identical score multisets: chance.
    ScoreSet c;
    c.scores = {0.5, 0.4, 0.5, 0.4};
    c.labels = {true, true, false, false};
    CHECK(eer(c) == doctest::Approx(0.5));

    // All-target or all-nontarget sets are rejected.
    ScoreSet bad;
    bad.scores = {0.5, 0.6};
    bad.labels = {true, true};
    CHECK_THROWS_AS(eer(bad), std::invalid_argument);
}

TEST_CASE("min_dcf: worked examples") {
    ScoreSet p;
    p.scores = {0.9, 0.8, 0.2, 0.1};
    p.labels = {true, true, false, false};
    CHECK(min_dcf(p) == doctest::Approx(0.0));

    // Completely inverted scores: cost is min(full-miss, full-FA) after
    // normalization, i.e. 1.0 at either extreme threshold.
    ScoreSet inv;
    inv.scores = {0.1, 0.2, 0.8, 0.9};
    inv.labels = {true, true, false, false};
    CHECK(min_dcf(inv) <= 1.0 + 1e-12);

    DcfConfig bad;
    bad.p_target = 1.5;
    CHECK_THROWS_AS(min_dcf(p, bad), std::invalid_argument);
}

TEST_CASE("metrics match the brute-force threshold sweep on random sets") {
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<int> n_dist(4, 60);
    std::uniform_real_distribution<double> sc(-1.0, 1.0);
    std::bernoulli_distribution lab(0.5);
    std::uniform_int_distribution<int> quant(0, 1);
    DcfConfig dcf;
    for (int rep = 0; rep < 300; ++rep) {
        ScoreSet s;
        const int n = n_dist(rng);
        bool has_t = false, has_n = false;
        for (int i = 0; i < n; ++i) {
            double v = sc(rng);
            if (quant(rng)) v = std::round(v * 4.0) / 4.0;  // force ties
            const bool l = lab(rng);
            s.scores.push_back(v);
            s.labels.push_back(l);
            (l ? has_t : has_n) = true;
        }
        if (!has_t || !has_n) continue;
        const double e_got = eer(s), e_want = oracles::oracle_eer(s.scores, s.labels);
        CHECK(std::abs(e_got - e_want) < 1e-12);
        const double d_got = min_dcf(s, dcf);
        const double d_want =
            oracles::oracle_min_dcf(s.scores, s.labels, dcf.p_target, dcf.c_fa, dcf.c_miss);
        CHECK(std::abs(d_got - d_want) < 1e-12);
    }
}

TEST_CASE("as_norm: hand-computed example and oracle agreement") {
    // Cohort with known cosine scores against axis-aligned embeddings.
    std::vector<double> e = {1.0, 0.0};
    std::vector<double> t = {0.0, 1.0};
    Cohort cohort;
    cohort.embeddings = {{1.0, 0.0}, {0.0, 1.0}, {1.0, 1.0}};
    cohort.top_k = 2;
    // enroll scores vs cohort: {1, 0, 1/sqrt2} -> top2 {1, 1/sqrt2}
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    const double mu_e = (1.0 + inv_sqrt2) / 2.0;
    const double sd_e = std::abs(1.0 - inv_sqrt2) / 2.0;
    const double raw = 0.3;
    const double want = 0.5 * ((raw - mu_e) / sd_e + (raw - mu_e) / sd_e);  // symmetric
    CHECK(as_norm(raw, e, t, cohort) == doctest::Approx(want).epsilon(1e-12));

    std::mt19937_64 rng(7);
    std::normal_distribution<double> d(0.0, 1.0);
    for (int rep = 0; rep < 50; ++rep) {
        auto vec = [&] {
            std::vector<double> v(8);
            for (double& x : v) x = d(rng);
            return v;
        };
        std::vector<double> en = vec(), te = vec();
        Cohort c;
        for (int i = 0; i < 20; ++i) c.embeddings.push_back(vec());
        c.top_k = 5;
        const double r = d(rng);
        CHECK(as_norm(r, en, te, c) ==
              doctest::Approx(oracles::oracle_as_norm(r, en, te, c.embeddings, 5))
                  .epsilon(1e-10));
    }
}

TEST_CASE("as_norm: degenerate cohort hits the sigma floor, not a crash") {
    std::vector<double> e = {1.0, 0.0};
    Cohort c;
    c.embeddings = {{1.0, 0.0}, {2.0, 0.0}};  // all scores identical (=1)
    c.top_k = 2;
    const double z = as_norm(0.5, e, e, c);
    CHECK(std::isfinite(z));
    CHECK(z == doctest::Approx((0.5 - 1.0) / 1e-12).epsilon(1e-6));

    Cohort empty;
    CHECK_THROWS_AS(as_norm(0.5, e, e, empty), std::invalid_argument);
}

TEST_CASE("as_norm: top_k larger than the cohort uses the whole cohort") {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> d(0.0, 1.0);
    auto vec = [&] {
        std::vector<double> v(4);
        for (double& x : v) x = d(rng);
        return v;
    };
    std::vector<double> e = vec(), t = vec();
    Cohort c;
    for (int i = 0; i < 6; ++i) c.embeddings.push_back(vec());
    Cohort capped = c;
    c.top_k = 300;
    capped.top_k = 6;
    CHECK(as_norm(0.2, e, t, c) == as_norm(0.2, e, t, capped));
}

TEST_CASE("evaluate: end-to-end with missing embedding diagnostics") {
    std::map<std::string, std::vector<double>> embs = {
        {"a1", {1.0, 0.0}}, {"a2", {0.9, 0.1}}, {"b1", {0.0, 1.0}}, {"b2", {0.1, 0.9}}};
    TrialList trials = {
        {"a1", "a2", true}, {"b1", "b2", true}, {"a1", "b1", false}, {"a2", "b2", false}};
    EvalResult r = evaluate(trials, embs);
    CHECK(r.eer == doctest::Approx(0.0));
    CHECK(r.min_dcf == doctest::Approx(0.0));
    CHECK(r.scores.scores.size() == 4);

    trials.push_back({"a1", "zz", true});
    CHECK_THROWS_WITH_AS(evaluate(trials, embs), doctest::Contains("zz"), std::out_of_range);
}

TEST_CASE("trial list and score file round-trip") {
    const std::string tp = (std::filesystem::temp_directory_path() / "trials.txt").string();
    {
        std::ofstream f(tp);
        f << "1 a1 a2\n0 a1 b1\n\n1 b1 b2\n";
    }
    TrialList trials = read_trial_list(tp);
    REQUIRE(trials.size() == 3);
    CHECK(trials[0].target);
    CHECK_FALSE(trials[1].target);
    CHECK(trials[2].enroll == "b1");

    ScoreSet s;
    s.scores = {0.75, -0.1, 0.6};
    s.labels = {true, false, true};
    const std::string sp = (std::filesystem::temp_directory_path() / "scores.txt").string();
    write_score_file(sp, trials, s);
    {
        std::ifstream f(sp);
        std::string enroll, test;
        double score;
        int label;
        f >> enroll >> test >> score >> label;
        CHECK(enroll == "a1");
        CHECK(test == "a2");
        CHECK(score == doctest::Approx(0.75));
        CHECK(label == 1);
    }

    {
        std::ofstream f(tp);
        f << "2 a1 a2\n";
    }
    CHECK_THROWS_AS(read_trial_list(tp), std::runtime_error);
    std::remove(tp.c_str());
    std::remove(sp.c_str());
}
