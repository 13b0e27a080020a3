#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>

#include "sgdlab/network.hpp"
#include "sgdlab/regularity.hpp"
#include "support/oracles.hpp"

using namespace sgdlab;

namespace {

NetworkSpec tanh_net(std::size_t input_dim, std::vector<std::size_t> hidden) {
    NetworkSpec s;
    s.input_dim = input_dim;
    s.hidden = std::move(hidden);
    s.activation = Activation::tanh_fn;
    return s;
}

// central differences of the scalar output, per weight
Vec fd_forward_grad(const NetworkSpec& spec, const Vec& w, const Vec& x, double h) {
    Vec g(w.size());
    Vec wp = w;
    for (std::size_t i = 0; i < w.size(); ++i) {
        wp[i] = w[i] + h;
        double fp = forward(spec, wp, x);
        wp[i] = w[i] - h;
        double fm = forward(spec, wp, x);
        wp[i] = w[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace

TEST_CASE("init_weights is deterministic and standard normal") {
    auto spec = tanh_net(8, {32});
    Vec a = init_weights(spec, 1234);
    Vec b = init_weights(spec, 1234);
    CHECK(a == b);
    CHECK(init_weights(spec, 1235) != a);

    NetworkSpec big = tanh_net(1000, {1000});
    Vec w = init_weights(big, 7);  // 1,001,000 draws
    KahanSum sum;
    for (double x : w) sum.add(x);
    double n = static_cast<double>(w.size());
    double mean = sum.value() / n;
    CHECK(mean >= -0.005);
    CHECK(mean <= 0.005);
    KahanSum sq;
    for (double x : w) sq.add((x - mean) * (x - mean));
    double var = sq.value() / (n - 1.0);
    CHECK(var >= 0.995);
    CHECK(var <= 1.005);
}

TEST_CASE("forward: degenerate and linear cases") {
    SECTION("identity activation with zero weights") {
        NetworkSpec s = tanh_net(4, {6});
        s.activation = Activation::identity;
        Vec w(s.param_count(), 0.0);
        CHECK(forward(s, w, Vec{1.0, -2.0, 0.5, 3.0}) == 0.0);
    }
    SECTION("one-layer identity net is the scaled linear map") {
        NetworkSpec s = tanh_net(5, {});
        s.activation = Activation::identity;
        REQUIRE(s.layer_count() == 1);
        Vec w = init_weights(s, 3);
        Vec x{0.1, -0.4, 0.7, 0.2, -0.9};
        double direct = 0.0;
        for (std::size_t j = 0; j < 5; ++j) direct += w[j] * x[j];
        direct /= std::sqrt(5.0);
        CHECK(forward(s, w, x) == Catch::Approx(direct).margin(1e-12));
    }
    SECTION("tanh propagates zero input to zero output") {
        auto s = tanh_net(6, {16, 16});
        Vec w = init_weights(s, 4);
        CHECK(forward(s, w, Vec(6, 0.0)) == 0.0);
    }
}

TEST_CASE("grad_params: closed form and finite differences") {
    SECTION("one-layer identity gradient is x/sqrt(m0)") {
        NetworkSpec s = tanh_net(4, {});
        s.activation = Activation::identity;
        Vec w = init_weights(s, 5);
        Vec x{1.0, 2.0, -3.0, 0.5};
        Vec g = grad_params_vec(s, w, x);
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(g[j] == Catch::Approx(x[j] / 2.0).margin(1e-15));
    }
    SECTION("two-layer tanh net passes the finite-difference check") {
        auto s = tanh_net(4, {8});
        Vec w = init_weights(s, 6);
        Vec x{0.3, -0.1, 0.5, 0.2};
        Vec g = grad_params_vec(s, w, x);
        Vec fo = fd_forward_grad(s, w, x, 1e-5);
        CHECK(dist(g, fo) / std::max(1.0, norm2(g)) <= 1e-5);
    }
    SECTION("zeroed output layer kills upstream blocks only") {
        auto s = tanh_net(3, {5});
        Vec w = init_weights(s, 7);
        Vec x{0.4, -0.6, 0.1};
        Vec g_full = grad_params_vec(s, w, x);
        Vec w0 = w;
        for (std::size_t i = 15; i < 20; ++i) w0[i] = 0.0;  // W2 block
        Vec g_zero = grad_params_vec(s, w0, x);
        for (std::size_t i = 0; i < 15; ++i) CHECK(g_zero[i] == 0.0);
        for (std::size_t i = 15; i < 20; ++i) CHECK(g_zero[i] == g_full[i]);
    }
}

TEST_CASE("hvp: zero Hessian for linear nets, symmetric otherwise") {
    NetworkSpec lin = tanh_net(6, {});
    lin.activation = Activation::identity;
    Vec wl = init_weights(lin, 8);
    Rng rng(61);
    Vec x = rng.on_sphere(6);
    Vec v = rng.normal_vec(6);
    Vec hv = hvp(lin, wl, x, v);
    CHECK(norm2(hv) <= 1e-10);

    auto s = tanh_net(5, {10});
    Vec w = init_weights(s, 9);
    Vec xs = rng.on_sphere(5);
    for (int rep = 0; rep < 5; ++rep) {
        Vec v1 = rng.normal_vec(s.param_count());
        Vec v2 = rng.normal_vec(s.param_count());
        double a = dot(hvp(s, w, xs, v1), v2);
        double b = dot(hvp(s, w, xs, v2), v1);
        CHECK(a == Catch::Approx(b).margin(1e-6 * (1.0 + std::abs(a))));
    }
    // linearity in v
    Vec v1 = rng.normal_vec(s.param_count());
    Vec h1 = hvp(s, w, xs, v1);
    Vec h2 = hvp(s, w, xs, scaled(v1, 2.0));
    CHECK(dist(h2, scaled(h1, 2.0)) <= 1e-6 * (1.0 + norm2(h1)));
}

TEST_CASE("operator norm estimation") {
    SECTION("diagonal quadratic hook recovers max |d_i|") {
        Vec d{0.3, -1.7, 0.9, 1.2, -0.2};
        auto apply = [&](const Vec& v) {
            Vec out(v.size());
            for (std::size_t i = 0; i < v.size(); ++i) out[i] = d[i] * v[i];
            return out;
        };
        auto res = power_iteration(apply, power_start(5), 1e-12, 10000);
        CHECK(res.converged);
        CHECK(res.value == Catch::Approx(1.7).epsilon(1e-6));
    }
    SECTION("pure linear network has zero operator norm") {
        NetworkSpec lin = tanh_net(4, {});
        lin.activation = Activation::identity;
        Vec w = init_weights(lin, 10);
        auto est = hessian_opnorm(lin, w, Vec{0.5, -0.5, 0.5, 0.5}, 1e-8, 200);
        CHECK(est.converged);
        CHECK(est.value <= 1e-9);
    }
    SECTION("estimate decreases with width") {
        Rng rng(62);
        Vec x = rng.on_sphere(16);
        double prev = std::numeric_limits<double>::infinity();
        for (std::size_t m : {64u, 256u, 1024u}) {
            auto s = tanh_net(16, {m});
            Vec w = init_weights(s, 11);
            auto est = hessian_opnorm(s, w, x, 1e-7, 400);
            CHECK(est.value <= prev * 1.1);  // monotone up to 10% noise
            prev = est.value;
        }
    }
}

TEST_CASE("NTK assembly and minimum eigenvalue") {
    Rng rng(63);
    SECTION("single point: 1x1 gram of the gradient") {
        auto s = tanh_net(6, {12});
        Vec w = init_weights(s, 12);
        Dataset d = make_desk_dataset(1, 6, rng);
        Matrix k = ntk_assemble(s, w, d);
        REQUIRE(k.rows == 1);
        Vec g = grad_params_vec(s, w, d.input(0));
        CHECK(k(0, 0) == Catch::Approx(dot(g, g)));
        CHECK(k(0, 0) >= 0.0);
    }
    SECTION("duplicated point makes the kernel singular") {
        auto s = tanh_net(6, {12});
        Vec w = init_weights(s, 13);
        Dataset d;
        d.inputs = Matrix(2, 6);
        Vec x = rng.on_sphere(6);
        for (std::size_t j = 0; j < 6; ++j) d.inputs(0, j) = d.inputs(1, j) = x[j];
        d.labels = {1.0, 1.0};
        Matrix k = ntk_assemble(s, w, d);
        double lmin = min_eig(k, 1e-10);
        CHECK(lmin <= 1e-8 * inf_norm(k));
    }
    SECTION("one-layer identity net on orthonormal inputs gives a diagonal kernel") {
        NetworkSpec s = tanh_net(4, {});
        s.activation = Activation::identity;
        Vec w = init_weights(s, 14);
        Dataset d;
        d.inputs = Matrix(4, 4);
        for (std::size_t i = 0; i < 4; ++i) d.inputs(i, i) = 1.0;  // e_i
        d.labels = Vec(4, 1.0);
        Matrix k = ntk_assemble(s, w, d);
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(k(i, i) == Catch::Approx(0.25).margin(1e-12));  // 1/m0
            for (std::size_t j = 0; j < 4; ++j)
                if (i != j) CHECK(std::abs(k(i, j)) <= 1e-10);
        }
    }
    SECTION("min_eig matches a dense Jacobi oracle on random PSD matrices") {
        for (int rep = 0; rep < 10; ++rep) {
            Matrix a(6, 6);
            for (auto& v : a.data) v = rng.normal();
            Matrix k = gram_rows(a);
            double lib = min_eig(k, 1e-12);
            double jac = oracle::jacobi_eigenvalues(k).front();
            CHECK(lib == Catch::Approx(jac).margin(1e-8));
        }
        CHECK(min_eig(Matrix{[] {
                          Matrix m(2, 2);
                          m(0, 0) = 1.0;
                          m(1, 1) = 2.0;
                          return m;
                      }()},
                      1e-12) == Catch::Approx(1.0));
        Matrix eye(3, 3);
        for (std::size_t i = 0; i < 3; ++i) eye(i, i) = 1.0;
        CHECK(min_eig(eye, 1e-12) == Catch::Approx(1.0));
    }
    SECTION("generic desk dataset keeps the kernel positive") {
        auto s = tanh_net(32, {256});
        Vec w = init_weights(s, 15);
        Dataset d = make_desk_dataset(16, 32, rng);
        Matrix k = ntk_assemble(s, w, d);
        CHECK(min_eig(k, 1e-10) > 0.0);
    }
}

TEST_CASE("NN least-squares problem") {
    Rng rng(64);
    auto s = tanh_net(8, {24});
    Vec w0 = init_weights(s, 16);
    Dataset d = make_desk_dataset(12, 8, rng);

    SECTION("planted labels interpolate at the anchor") {
        Dataset planted = d;
        for (std::size_t i = 0; i < planted.size(); ++i)
            planted.labels[i] = forward(s, w0, planted.input(i));
        NNProblem prob(s, w0, planted);
        CHECK(prob.full_loss(w0) == 0.0);
    }
    SECTION("sample gradients pass the finite-difference check") {
        NNProblem prob(s, w0, d);
        for (int rep = 0; rep < 5; ++rep) {
            Vec w = w0;
            axpy(0.1, rng.normal_vec(w.size()), w);
            SampleId z = prob.sample(rng);
            CHECK(fd_grad_check(prob, w, z, 1e-5) <= 1e-5);
        }
    }
    SECTION("full loss equals the assembled residual objective") {
        NNProblem prob(s, w0, d);
        Vec w = w0;
        axpy(0.3, rng.normal_vec(w.size()), w);
        KahanSum s2;
        for (std::size_t i = 0; i < d.size(); ++i) {
            double r = forward(s, w, d.input(i)) - d.labels[i];
            s2.add(2.0 * r * r / static_cast<double>(d.size()));
        }
        CHECK(prob.full_loss(w) == Catch::Approx(0.5 * s2.value()).epsilon(1e-12));
    }
}

TEST_CASE("deep gradcheck: two and three hidden layers") {
    Rng rng(65);
    for (std::vector<std::size_t> hidden : {std::vector<std::size_t>{8, 8},
                                            std::vector<std::size_t>{8, 8, 8}}) {
        auto s = tanh_net(4, hidden);
        Dataset d = make_desk_dataset(6, 4, rng);
        Vec w0 = init_weights(s, 17);
        NNProblem prob(s, w0, d);
        for (int rep = 0; rep < 10; ++rep) {
            Vec w = w0;
            axpy(0.2, rng.normal_vec(w.size()), w);
            CHECK(fd_grad_check(prob, w, prob.sample(rng), 1e-5) <= 1e-5);
        }
    }
}

TEST_CASE("moment bound along the ball: sampled gradients obey 2 beta l") {
    Rng rng(66);
    auto s = tanh_net(16, {128});
    Vec w0 = init_weights(s, 18);
    Dataset d = make_desk_dataset(8, 16, rng);
    NNProblem prob(s, w0, d);

    EstimatorOptions opts;
    opts.n_probes = 16;
    opts.quorum = 8;
    auto region = RegionSpec::ball(w0, 0.5);
    Rng beta_rng(19);
    auto beta = estimate_sample_beta(prob, region, opts, beta_rng);

    double worst = 0.0;
    for (int rep = 0; rep < 200; ++rep) {
        Vec w = sample_in_region(prob, region, rng);
        SampleId z = prob.sample(rng);
        double l = prob.loss(w, z);
        if (l < kEpsFloor) continue;
        Vec g = prob.grad_vec(w, z);
        worst = std::max(worst, dot(g, g) / (2.0 * beta.value * l));
    }
    CHECK(worst <= 1.05);
}

TEST_CASE("weights flatten/unflatten and checkpoints round-trip") {
    auto s = tanh_net(5, {7, 3});
    Vec flat = init_weights(s, 20);
    NetworkWeights w = NetworkWeights::unflatten(s, flat);
    REQUIRE(w.layers.size() == 3);
    CHECK(w.layers[0].rows == 7);
    CHECK(w.layers[0].cols == 5);
    CHECK(w.layers[1].rows == 3);
    CHECK(w.layers[1].cols == 7);
    CHECK(w.layers[2].rows == 1);
    CHECK(w.layers[2].cols == 3);
    CHECK(w.flatten() == flat);

    std::string path = "ckpt_test.bin";
    save_weights(path, s, flat, 20);
    Checkpoint ck = load_weights(path);
    CHECK(ck.flat == flat);
    CHECK(ck.seed == 20);
    REQUIRE(ck.shapes.size() == 3);
    CHECK(ck.shapes[0] == std::pair<std::uint32_t, std::uint32_t>{7, 5});
    std::remove(path.c_str());
}
