#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sgdlab/testbed.hpp"
#include "support/oracles.hpp"

using namespace sgdlab;

TEST_CASE("parabola projection: points on and off the curve") {
    auto [x0, y0] = parabola_project(1.0, 0.0, 0.0);
    CHECK(x0 == 0.0);
    CHECK(y0 == 0.0);

    // (0,1): roots {0, +-1/sqrt2}, squared distances {1, 3/4, 3/4}; the tie
    // breaks toward the positive root.
    auto [x1, y1] = parabola_project(1.0, 0.0, 1.0);
    CHECK(x1 == Catch::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
    CHECK(y1 == Catch::Approx(0.5).epsilon(1e-12));

    // (2,-5): unique real root of 2x^3 + 11x - 2 = 0 (bisection oracle).
    auto [x2, y2] = parabola_project(1.0, 2.0, -5.0);
    CHECK(x2 == Catch::Approx(0.180744604479350).epsilon(1e-9));
    CHECK(std::abs(2.0 * x2 * x2 * x2 + 11.0 * x2 - 2.0) < 1e-12);
    CHECK(y2 == Catch::Approx(x2 * x2));
}

TEST_CASE("parabola projection matches a brute-force scan") {
    Rng rng(11);
    for (int i = 0; i < 200; ++i) {
        double a = rng.uniform(0.25, 3.0);
        double u = rng.uniform(-2.0, 2.0);
        double v = rng.uniform(-2.0, 2.0);
        auto [x, y] = parabola_project(a, u, v);
        double xo = oracle::parabola_nearest_x(a, u, v);
        double mine = (x - u) * (x - u) + (y - v) * (y - v);
        double theirs = (xo - u) * (xo - u) + (a * xo * xo - v) * (a * xo * xo - v);
        // equal minima up to scan resolution; ties may differ in sign
        CHECK(mine <= theirs + 1e-9);
    }
}

TEST_CASE("parabola root finder agrees with the sign-scan enumeration") {
    Rng rng(12);
    for (int i = 0; i < 100; ++i) {
        double a = rng.uniform(0.25, 3.0);
        double u = rng.uniform(-2.0, 2.0);
        double v = rng.uniform(-2.0, 2.0);
        auto roots = parabola_projection_roots(a, u, v);
        auto scan = oracle::cubic_roots_scan(2.0 * a * a, 1.0 - 2.0 * a * v, -u);
        REQUIRE(roots.size() == scan.size());
        for (std::size_t j = 0; j < roots.size(); ++j)
            CHECK(roots[j] == Catch::Approx(scan[j]).margin(1e-8));
    }
}

TEST_CASE("quasar-convexity violation witnesses") {
    // (a=1, x=1, gamma=0.5): alignment 0.25 - 0.5 = -0.25
    auto w = quasar_violation_witness(1.0, 1.0, {0.5});
    REQUIRE(w.has_value());
    CHECK(w->inner == Catch::Approx(-0.25));
    CHECK(w->point[0] == 0.0);
    CHECK(w->point[1] == 0.5);

    // boundary gamma = a x^2 is not a violation
    CHECK_FALSE(quasar_violation_witness(1.0, 1.0, {1.0}).has_value());

    // (a=2, x=0.5, gamma=0.25): 0.0625 - 0.125 = -0.0625
    auto w2 = quasar_violation_witness(2.0, 0.5, {0.25});
    REQUIRE(w2.has_value());
    CHECK(w2->inner == Catch::Approx(-0.0625));
}

TEST_CASE("quasar violation exists for every parabola point with |x| >= 0.1") {
    const double a = 1.0;
    for (int i = 0; i <= 200; ++i) {
        double x = -2.0 + 4.0 * i / 200.0;
        if (std::abs(x) < 0.1) continue;
        std::vector<double> grid;
        for (int k = 1; k < 64; ++k) grid.push_back(a * x * x * k / 64.0);
        auto w = quasar_violation_witness(a, x, grid);
        REQUIRE(w.has_value());
        CHECK(w->inner < 0.0);  // exact sign
    }
}

TEST_CASE("parabola PL ratio on the grid is at least 1") {
    ParabolaProblem prob(1.0);
    double worst = std::numeric_limits<double>::infinity();
    Vec g(2);
    for (int i = 0; i < 200; ++i) {
        for (int j = 0; j < 200; ++j) {
            Vec w{-2.0 + 4.0 * i / 199.0, -2.0 + 4.0 * j / 199.0};
            double l = prob.full_loss(w);
            if (l < kEpsFloor) continue;
            prob.full_grad(w, g);
            double ratio = dot(g, g) / (2.0 * l);
            worst = std::min(worst, ratio);
            // analytic ratio 1 + 4 a^2 x^2
            CHECK(ratio == Catch::Approx(1.0 + 4.0 * w[0] * w[0]).epsilon(1e-9));
        }
    }
    CHECK(worst >= 1.0 - 1e-9);
}

TEST_CASE("parabola projector optimality against random curve points") {
    ParabolaProblem prob(1.0);
    Rng rng(13);
    for (int i = 0; i < 1000; ++i) {
        Vec w{rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)};
        Vec p = prob.project(w);
        double dp = dist(w, p);
        for (int j = 0; j < 1000; ++j) {
            double x = rng.uniform(-2.0, 2.0);
            Vec q{x, x * x};
            CHECK(dp <= dist(w, q) + 1e-12);
        }
    }
}

TEST_CASE("regression projector closed-form cases") {
    Matrix x(1, 2);
    x(0, 0) = 1.0;
    x(0, 1) = 0.0;
    Vec y{0.0};

    Vec p = regression_projector(x, y, Vec{3.0, 7.0});
    CHECK(p[0] == Catch::Approx(0.0).margin(1e-14));
    CHECK(p[1] == Catch::Approx(7.0));

    // fixed point for w already in S
    Vec p2 = regression_projector(x, y, Vec{0.0, -4.0});
    CHECK(p2[0] == Catch::Approx(0.0).margin(1e-14));
    CHECK(p2[1] == Catch::Approx(-4.0));

    // least-norm solution of (w1 + w2)/sqrt(2) = sqrt(2)
    Matrix x3(1, 2);
    x3(0, 0) = x3(0, 1) = 1.0 / std::sqrt(2.0);
    Vec p3 = regression_projector(x3, Vec{std::sqrt(2.0)}, Vec{0.0, 0.0});
    CHECK(p3[0] == Catch::Approx(1.0).epsilon(1e-12));
    CHECK(p3[1] == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("regression projector satisfies the normal equations") {
    Rng rng(14);
    auto prob = make_interp_regression(6, 24, rng);
    for (int i = 0; i < 50; ++i) {
        Vec w = rng.normal_vec(24);
        Vec p = prob.project(w);
        for (std::size_t r = 0; r < 6; ++r)
            CHECK(std::abs(prob.residual(p, r)) < 1e-10);
        // w - p lies in the row space: re-projecting p moves nothing
        Vec pp = prob.project(p);
        CHECK(dist(p, pp) < 1e-10);
    }
}

TEST_CASE("rank-deficient designs are rejected") {
    Matrix x(2, 3);
    x(0, 0) = 1.0;
    x(1, 0) = 1.0;  // duplicated rows
    CHECK_THROWS_AS(regression_projector(x, Vec{0.0, 0.0}, Vec{1.0, 1.0, 1.0}),
                    RankDeficient);
}

TEST_CASE("manifold intersection: gradient norm identity") {
    ManifoldIntersection prob(Vec{1.0, 0.0},
                              {Vec{0.0, 0.0}, Vec{2.5, 0.5}, Vec{-1.0, 1.5}});
    Rng rng(15);
    Vec g(2);
    for (int i = 0; i < 10000; ++i) {
        Vec w{rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)};
        SampleId z = prob.sample(rng);
        double l = prob.loss(w, z);
        prob.grad(w, z, g);
        CHECK(std::abs(dot(g, g) - 2.0 * l) <= 1e-10);
    }
}

TEST_CASE("manifold intersection: two circles share two points") {
    // circles centered on the x-axis through (0,1) also pass through (0,-1)
    ManifoldIntersection prob(Vec{0.0, 1.0}, {Vec{-1.0, 0.0}, Vec{2.0, 0.0}});
    REQUIRE(prob.solutions().size() == 2);
    Vec below = prob.project(Vec{0.3, -2.0});
    CHECK(below[1] == Catch::Approx(-1.0));
    Vec above = prob.project(Vec{-0.2, 3.0});
    CHECK(above[1] == Catch::Approx(1.0));
    CHECK(prob.full_loss(prob.solutions()[1]) < 1e-24);
}

TEST_CASE("regression sampled smoothness equals the row norm") {
    Rng rng(16);
    auto prob = make_interp_regression(5, 12, rng);
    const Matrix& x = prob.design();
    for (std::size_t i = 0; i < 5; ++i) {
        double row2 = 0.0;
        Vec xi(12);
        for (std::size_t j = 0; j < 12; ++j) {
            xi[j] = x(i, j);
            row2 += xi[j] * xi[j];
        }
        SampleId z;
        z.index = i;
        // quotient along the row direction attains ||x_i||^2 exactly
        Vec w = rng.normal_vec(12);
        Vec w2 = w;
        axpy(0.37, xi, w2);
        Vec g1 = prob.grad_vec(w, z);
        Vec g2 = prob.grad_vec(w2, z);
        double q = dist(g1, g2) / dist(w, w2);
        CHECK(q == Catch::Approx(row2).epsilon(1e-8));
        // and no direction exceeds it
        for (int rep = 0; rep < 20; ++rep) {
            Vec d = rng.on_sphere(12);
            Vec w3 = add(w, d);
            Vec g3 = prob.grad_vec(w3, z);
            CHECK(dist(g1, g3) <= row2 + 1e-8);
        }
    }
}
