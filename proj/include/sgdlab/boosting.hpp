#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "sgdlab/problem.hpp"

namespace sgdlab {

struct SmallBallEstimate {
    double tau = 0.0;
    double p_hat = 0.0;   // empirical frequency of l(w,z) >= tau L(w)
    std::size_t n_samples = 0;
    Vec point;
};

inline SmallBallEstimate small_ball_estimate(const StochasticProblem& problem, const Vec& w,
                                             double tau, std::size_t n, Rng& rng) {
    if (n < 1) throw ConfigError("small_ball_estimate: n >= 1");
    double l = problem.full_loss(w);
    if (l < kEpsFloor) throw DegeneratePoint("small_ball_estimate: loss below the floor");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        SampleId z = problem.sample(rng);
        if (problem.loss(w, z) >= tau * l) ++hits;
    }
    SmallBallEstimate out;
    out.tau = tau;
    out.p_hat = static_cast<double>(hits) / static_cast<double>(n);
    out.n_samples = n;
    out.point = w;
    return out;
}

/// Bernstein route from the small-ball property to the detection bound:
/// c1 = p tau / 2, c2 = p / 4.
inline std::pair<double, double> bernstein_constants(double tau, double p) {
    if (!(tau > 0 && tau <= 1)) throw ConfigError("bernstein_constants: tau in (0,1]");
    if (!(p > 0 && p <= 1)) throw ConfigError("bernstein_constants: p in (0,1]");
    return {p * tau / 2.0, p / 4.0};
}

/// Paley-Zygmund lower bound (1-tau)^2 L^2 / E[l^2], clamped to [0,1].
inline double paley_zygmund(double l_val, double second_moment, double tau) {
    if (!(second_moment > 0)) throw ConfigError("paley_zygmund: second moment must be positive");
    if (!(tau >= 0 && tau <= 1)) throw ConfigError("paley_zygmund: tau in [0,1]");
    double b = (1.0 - tau) * (1.0 - tau) * l_val * l_val / second_moment;
    return std::clamp(b, 0.0, 1.0);
}

struct BoostResult {
    std::vector<std::size_t> admissible;  // I, ascending
    Vec empirical_means;                  // per candidate
    std::optional<std::size_t> chosen;    // smallest mean in I, ties -> lowest index
    std::size_t k = 0;
    std::size_t m = 0;
    double lambda = 0.0;
    double eps = 0.0;
    // 1 - exp(-k/16) - k exp(-c2 m) - lambda^(-k/4), when c2 is supplied.
    std::optional<double> success_bound;

    bool empty() const { return admissible.empty(); }
};

inline double rejection_success_bound(std::size_t k, std::size_t m, double lambda, double c2) {
    double kd = static_cast<double>(k);
    return 1.0 - std::exp(-kd / 16.0) - kd * std::exp(-c2 * static_cast<double>(m)) -
           std::pow(lambda, -kd / 4.0);
}

/// Filters candidates by small-batch empirical loss: i is admissible when
/// the mean of m fresh samples of l(w_i, .) is at most lambda*eps. Each
/// candidate draws from its own derived stream (independence across
/// candidates). An empty admissible set is a valid, flagged outcome.
inline BoostResult rejection_sample(const StochasticProblem& problem,
                                    const std::vector<Vec>& candidates, std::size_t m,
                                    double lambda, double eps, Rng& rng,
                                    std::optional<double> c2 = std::nullopt) {
    if (candidates.empty()) throw ConfigError("rejection_sample: k >= 1");
    if (m < 1) throw ConfigError("rejection_sample: m >= 1");
    if (!(lambda > 1)) throw ConfigError("rejection_sample: lambda > 1");
    if (!(eps > 0)) throw ConfigError("rejection_sample: eps > 0");

    BoostResult res;
    res.k = candidates.size();
    res.m = m;
    res.lambda = lambda;
    res.eps = eps;
    res.empirical_means.resize(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        Rng stream = rng.child(i);
        KahanSum sum;
        for (std::size_t j = 0; j < m; ++j)
            sum.add(problem.loss(candidates[i], problem.sample(stream)));
        double mean = sum.value() / static_cast<double>(m);
        res.empirical_means[i] = mean;
        if (mean <= lambda * eps) res.admissible.push_back(i);
    }
    for (std::size_t i : res.admissible) {
        if (!res.chosen || res.empirical_means[i] < res.empirical_means[*res.chosen])
            res.chosen = i;  // strict <: ties stay with the lowest index
    }
    if (c2) res.success_bound = rejection_success_bound(res.k, m, lambda, *c2);
    return res;
}

using CandidateRunner = std::function<Vec(std::size_t trial, Rng& rng)>;

struct BoostRun {
    BoostResult result;
    Vec selected;
    // lambda eps / c1, when the small-ball constants are supplied.
    std::optional<double> certified_loss_bound;
};

/// Runs k independent base trials (fresh derived streams), then boosts by
/// rejection sampling. Throws AllRejected when every candidate is filtered.
inline BoostRun boost_sgd(const StochasticProblem& problem, const CandidateRunner& runner,
                          std::size_t k, std::size_t m, double lambda, double eps, Rng& rng,
                          std::optional<double> c1 = std::nullopt,
                          std::optional<double> c2 = std::nullopt) {
    if (k < 1) throw ConfigError("boost_sgd: k >= 1");
    Rng run_master = rng.child(1);
    Rng eval_master = rng.child(2);
    std::vector<Vec> candidates(k);
    for (std::size_t i = 0; i < k; ++i) {
        Rng stream = run_master.child(i);
        candidates[i] = runner(i, stream);
    }
    BoostRun out;
    out.result = rejection_sample(problem, candidates, m, lambda, eps, eval_master, c2);
    if (out.result.empty()) throw AllRejected("rejection sampling admitted no candidate");
    out.selected = candidates[*out.result.chosen];
    if (c1) out.certified_loss_bound = lambda * eps / *c1;
    return out;
}

}  // namespace sgdlab
