#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sgdlab/boosting.hpp"
#include "sgdlab/sgd.hpp"
#include "sgdlab/testbed.hpp"

using namespace sgdlab;

namespace {

// A point with the prescribed full loss: scale a row-space offset from the
// solution set (quadratic scaling is exact for least squares).
Vec point_at_loss(const InterpLinearRegression& reg, const Vec& from, double target) {
    Vec proj = reg.project(from);
    Vec u = sub(from, proj);
    double base = reg.full_loss(add(proj, u));
    double s = std::sqrt(target / base);
    return add(proj, scaled(u, s));
}

}  // namespace

TEST_CASE("small-ball estimates") {
    SECTION("deterministic single sample: l == L") {
        ParabolaProblem prob(1.0);
        Rng rng(101);
        auto est = small_ball_estimate(prob, Vec{0.3, 1.0}, 1.0, 64, rng);
        CHECK(est.p_hat == 1.0);
        auto est0 = small_ball_estimate(prob, Vec{0.3, 1.0}, 0.0, 64, rng);
        CHECK(est0.p_hat == 1.0);
    }
    SECTION("two-point loss distribution is an exact Bernoulli(1/2)") {
        // on circle 1 but not circle 2: losses {0, 2L}
        ManifoldIntersection prob(Vec{0.0, 1.0}, {Vec{-1.0, 0.0}, Vec{2.0, 0.0}});
        Vec w{-1.0 + std::sqrt(2.0) * std::cos(0.3), std::sqrt(2.0) * std::sin(0.3)};
        REQUIRE(prob.loss(w, SampleId{0, {}}) <= 1e-20);
        Rng rng(102);
        auto est = small_ball_estimate(prob, w, 0.5, 4096, rng);
        double sigma = std::sqrt(0.25 / 4096.0);
        CHECK(std::abs(est.p_hat - 0.5) <= 4.0 * sigma);
    }
    SECTION("solution points are degenerate") {
        ParabolaProblem prob(1.0);
        Rng rng(103);
        CHECK_THROWS_AS(small_ball_estimate(prob, Vec{0.0, 0.0}, 0.5, 8, rng),
                        DegeneratePoint);
    }
}

TEST_CASE("Bernstein constants") {
    auto [c1, c2] = bernstein_constants(0.5, 0.2);
    CHECK(c1 == Catch::Approx(0.05));
    CHECK(c2 == Catch::Approx(0.05));
    auto [d1, d2] = bernstein_constants(1.0, 1.0);
    CHECK(d1 == 0.5);
    CHECK(d2 == 0.25);
    for (double tau : {0.1, 0.5, 1.0})
        for (double p : {0.1, 0.5, 1.0}) CHECK(bernstein_constants(tau, p).first <= 0.5);
    CHECK_THROWS_AS(bernstein_constants(0.0, 0.5), ConfigError);
}

TEST_CASE("Paley-Zygmund lower bound") {
    CHECK(paley_zygmund(2.0, 4.0, 0.0) == 1.0);  // deterministic: M2 = L^2
    CHECK(paley_zygmund(2.0, 4.0, 1.0) == 0.0);
    // two-point {0, 2L}: M2 = 2 L^2, bound (1-tau)^2/2 below the true 1/2
    for (double tau : {0.0, 0.25, 0.5, 0.75}) {
        double b = paley_zygmund(1.0, 2.0, tau);
        CHECK(b == Catch::Approx((1.0 - tau) * (1.0 - tau) / 2.0));
        CHECK(b <= 0.5 + 1e-12);
    }
}

TEST_CASE("Paley-Zygmund bound is valid on the testbed") {
    Rng rng(104);
    auto reg = make_interp_regression(8, 20, rng);
    for (int rep = 0; rep < 50; ++rep) {
        Vec w = rng.normal_vec(20);
        double l = reg.full_loss(w);
        if (l < kEpsFloor) continue;
        // exact second moment and exact small-ball frequency for finite sums
        KahanSum m2;
        SampleId z;
        for (std::size_t i = 0; i < 8; ++i) {
            z.index = i;
            double li = reg.loss(w, z);
            m2.add(li * li);
        }
        double second = m2.value() / 8.0;
        for (double tau : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            std::size_t hits = 0;
            for (std::size_t i = 0; i < 8; ++i) {
                z.index = i;
                if (reg.loss(w, z) >= tau * l) ++hits;
            }
            double exact = static_cast<double>(hits) / 8.0;
            CHECK(paley_zygmund(l, second, tau) <= exact + 1e-12);
        }
    }
}

TEST_CASE("detection frequency obeys the Bernstein route") {
    // two-point losses {0, 2L}: p = 1/2 at tau = 1/2 -> c1 = 1/8, c2 = 1/8
    ManifoldIntersection prob(Vec{0.0, 1.0}, {Vec{-1.0, 0.0}, Vec{2.0, 0.0}});
    Vec w{-1.0 + std::sqrt(2.0) * std::cos(0.3), std::sqrt(2.0) * std::sin(0.3)};
    double l = prob.full_loss(w);
    REQUIRE(l > kEpsFloor);
    auto [c1, c2] = bernstein_constants(0.5, 0.5);
    const std::size_t m = 64;
    Rng rng(105);
    std::size_t hits = 0;
    const int reps = 1000;
    for (int rep = 0; rep < reps; ++rep) {
        KahanSum s;
        for (std::size_t j = 0; j < m; ++j) s.add(prob.loss(w, prob.sample(rng)));
        if (s.value() / static_cast<double>(m) >= c1 * l) ++hits;
    }
    double freq = static_cast<double>(hits) / reps;
    double target = 1.0 - std::exp(-c2 * static_cast<double>(m));
    double sigma = std::sqrt(freq * (1.0 - freq) / reps);
    CHECK(freq >= target - 3.0 * sigma - 1e-12);
}

TEST_CASE("rejection sampling basics") {
    Rng rng(106);
    auto reg = make_interp_regression(8, 24, rng);
    Vec anchor = rng.normal_vec(24);

    SECTION("a solution-set candidate is admitted and chosen") {
        std::vector<Vec> cands{reg.project(anchor)};
        auto res = rejection_sample(reg, cands, 16, 2.0, 0.01, rng);
        REQUIRE(res.admissible.size() == 1);
        CHECK(res.admissible[0] == 0);
        CHECK(res.chosen == 0);
        CHECK(res.empirical_means[0] <= 1e-20);
    }
    SECTION("uniformly bad candidates leave the set empty") {
        double lambda = 2.0, eps = 0.01;
        std::vector<Vec> cands;
        for (int i = 0; i < 4; ++i)
            cands.push_back(point_at_loss(reg, add(anchor, Vec(24, 0.1 * i)),
                                          10.0 * lambda * eps));
        auto res = rejection_sample(reg, cands, 32, lambda, eps, rng);
        CHECK(res.empty());
        CHECK_FALSE(res.chosen.has_value());
    }
    SECTION("preconditions") {
        std::vector<Vec> cands{anchor};
        CHECK_THROWS_AS(rejection_sample(reg, {}, 8, 2.0, 0.1, rng), ConfigError);
        CHECK_THROWS_AS(rejection_sample(reg, cands, 0, 2.0, 0.1, rng), ConfigError);
        CHECK_THROWS_AS(rejection_sample(reg, cands, 8, 1.0, 0.1, rng), ConfigError);
    }
}

TEST_CASE("planted-mix boosting meets the lemma frequency") {
    Rng rng(107);
    auto reg = make_interp_regression(8, 24, rng);
    const double lambda = 2.0, eps = 1e-3;
    const std::size_t k = 16;

    // measure the small-ball constants on a representative bad point
    Vec probe = point_at_loss(reg, rng.normal_vec(24), 1.0);
    Rng sb_rng(108);
    auto sb = small_ball_estimate(reg, probe, 0.5, 2000, sb_rng);
    auto [c1, c2] = bernstein_constants(sb.tau, sb.p_hat);
    const std::size_t m =
        static_cast<std::size_t>(std::ceil(std::log(20.0 * k) / c2));
    double bound = rejection_success_bound(k, m, lambda, c2);

    const int reps = 200;
    int success = 0;
    for (int rep = 0; rep < reps; ++rep) {
        std::vector<Vec> cands;
        for (std::size_t i = 0; i < k; ++i) {
            double target = (i % 2 == 0) ? 0.5 * eps : 10.0 * lambda * eps / c1;
            Vec from = rng.normal_vec(24);
            cands.push_back(point_at_loss(reg, from, target));
        }
        Rng rep_rng = Rng(600).child(rep);
        auto res = rejection_sample(reg, cands, m, lambda, eps, rep_rng, c2);
        // membership is exactly the empirical-mean filter
        for (std::size_t i = 0; i < k; ++i) {
            bool in = std::find(res.admissible.begin(), res.admissible.end(), i) !=
                      res.admissible.end();
            CHECK(in == (res.empirical_means[i] <= lambda * eps));
        }
        if (res.chosen) {
            bool chosen_in = std::find(res.admissible.begin(), res.admissible.end(),
                                       *res.chosen) != res.admissible.end();
            CHECK(chosen_in);
            for (std::size_t i : res.admissible)
                CHECK(res.empirical_means[*res.chosen] <= res.empirical_means[i]);
        }
        bool ok = !res.empty();
        for (std::size_t i : res.admissible)
            ok = ok && reg.full_loss(cands[i]) <= lambda * eps / c1 + 1e-12;
        if (ok) ++success;
    }
    double freq = static_cast<double>(success) / reps;
    double sigma = std::sqrt(std::max(freq * (1 - freq), 0.25 / reps) / reps);
    CHECK(freq >= bound - 3.0 * sigma);
}

TEST_CASE("boost_sgd end to end") {
    Rng rng(109);
    auto reg = make_interp_regression(6, 18, rng);
    Vec w0 = rng.normal_vec(18);
    const double eps = 1e-4, lambda = 2.0;

    SECTION("always-good runner yields a zero-loss selection") {
        CandidateRunner runner = [&](std::size_t, Rng&) { return reg.project(w0); };
        Rng master(110);
        auto run = boost_sgd(reg, runner, 8, 16, lambda, eps, master, 0.125, 0.125);
        CHECK(reg.full_loss(run.selected) <= 1e-18);
        REQUIRE(run.certified_loss_bound.has_value());
        CHECK(*run.certified_loss_bound == Catch::Approx(lambda * eps / 0.125));
    }
    SECTION("all-rejected runner raises the typed failure") {
        CandidateRunner runner = [&](std::size_t, Rng&) {
            return point_at_loss(reg, w0, 1.0);
        };
        Rng master(111);
        CHECK_THROWS_AS(boost_sgd(reg, runner, 4, 16, lambda, eps, master), AllRejected);
    }
    SECTION("half-successful SGD runner boosts to near-certainty") {
        double beta = reg.sample_smoothness();
        CandidateRunner runner = [&](std::size_t, Rng& r) {
            if (r.uniform01() < 0.5) return point_at_loss(reg, w0, 1.0);  // failed trial
            SGDConfig cfg;
            cfg.eta = 0.5 / beta;
            cfg.iters = 400;
            cfg.seed = r.child(7).seed();
            return run_sgd(reg, w0, cfg).final_w;
        };
        int success = 0;
        const int meta = 100;
        for (int i = 0; i < meta; ++i) {
            Rng master = Rng(112).child(i);
            try {
                auto run = boost_sgd(reg, runner, 16, 32, lambda, eps, master, 0.125);
                if (reg.full_loss(run.selected) <= *run.certified_loss_bound) ++success;
            } catch (const AllRejected&) {
            }
        }
        CHECK(success >= 95);
    }
}
