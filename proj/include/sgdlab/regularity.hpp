#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "sgdlab/problem.hpp"

namespace sgdlab {

// ---------------------------------------------------------------------------
// Pointwise defining ratios. Every estimator below is a min/max of one of
// these over probes, so a reported constant can be reproduced by
// re-evaluating the ratio at its witness.
// ---------------------------------------------------------------------------

/// ||grad L(w)||^2 / (2 L(w)).
inline double pl_ratio(const StochasticProblem& problem, const Vec& w) {
    double l = problem.full_loss(w);
    if (l < kEpsFloor) throw DegeneratePoint("pl_ratio: loss below the floor");
    Vec g = problem.full_grad_vec(w);
    return dot(g, g) / (2.0 * l);
}

/// 2 L(w) / dist^2(w, S).
inline double qg_ratio(const StochasticProblem& problem, const Vec& w) {
    double l = problem.full_loss(w);
    if (l < kEpsFloor) throw DegeneratePoint("qg_ratio: loss below the floor");
    double d = dist_to_solution(problem, w);
    if (d <= 0) throw DegeneratePoint("qg_ratio: point is on the solution set");
    return 2.0 * l / (d * d);
}

/// <grad L(w), w - proj(w)> / L(w).
inline double aiming_ratio(const StochasticProblem& problem, const Vec& w) {
    double l = problem.full_loss(w);
    if (l < kEpsFloor) throw DegeneratePoint("aiming_ratio: loss below the floor");
    Vec g = problem.full_grad_vec(w);
    Vec to = sub(w, problem.project(w));
    return dot(g, to) / l;
}

struct Witness {
    std::vector<Vec> points;
    std::optional<std::uint64_t> sample_index;
};

struct Estimate {
    double value = 0.0;
    Witness witness;
    std::size_t n_valid = 0;
    std::size_t n_probes = 0;
};

struct EstimatorOptions {
    std::size_t n_probes = 1024;
    // Estimators fail loudly below this many valid probes; silent vacuous
    // extrema over empty probe sets are the main estimator hazard.
    std::size_t quorum = 32;
    std::size_t n_solutions = 64;  // uniform aiming only
};

namespace detail {

template <typename Ratio>
Estimate min_ratio_estimate(const StochasticProblem& problem, const RegionSpec& region,
                            const EstimatorOptions& opts, Rng& rng, Ratio ratio) {
    if (opts.n_probes < 1) throw ConfigError("estimator needs n_probes >= 1");
    region.validate(problem);
    Estimate est;
    est.n_probes = opts.n_probes;
    est.value = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < opts.n_probes; ++i) {
        Vec w = sample_in_region(problem, region, rng);
        double r;
        try {
            r = ratio(w);
        } catch (const DegeneratePoint&) {
            continue;  // vacuous on S; counted as skipped
        }
        ++est.n_valid;
        if (r < est.value) {
            est.value = r;
            est.witness.points = {w};
        }
    }
    if (est.n_valid < std::min(opts.quorum, opts.n_probes))
        throw NoValidProbe("only " + std::to_string(est.n_valid) + " valid probes");
    return est;
}

}  // namespace detail

/// alpha_PL = min over region probes of ||grad L||^2 / (2 L).
inline Estimate estimate_pl(const StochasticProblem& problem, const RegionSpec& region,
                            const EstimatorOptions& opts, Rng& rng) {
    return detail::min_ratio_estimate(problem, region, opts, rng,
                                      [&](const Vec& w) { return pl_ratio(problem, w); });
}

/// alpha_QG = min over region probes of 2 L / dist^2(., S).
inline Estimate estimate_qg(const StochasticProblem& problem, const RegionSpec& region,
                            const EstimatorOptions& opts, Rng& rng) {
    if (!problem.has_projector()) throw MissingProjector("estimate_qg needs a projector");
    return detail::min_ratio_estimate(problem, region, opts, rng,
                                      [&](const Vec& w) { return qg_ratio(problem, w); });
}

/// theta = min over region probes of <grad L, w - proj(w)> / L.
inline Estimate estimate_aiming(const StochasticProblem& problem, const RegionSpec& region,
                                const EstimatorOptions& opts, Rng& rng) {
    if (!problem.has_projector()) throw MissingProjector("estimate_aiming needs a projector");
    return detail::min_ratio_estimate(problem, region, opts, rng,
                                      [&](const Vec& w) { return aiming_ratio(problem, w); });
}

/// Uniform-aiming deficit at a probe pair: max(0, (theta L - <grad L, w-v>) / dist).
inline double uniform_aiming_deficit(const StochasticProblem& problem, double theta,
                                     const Vec& w, const Vec& v) {
    double l = problem.full_loss(w);
    if (l < kEpsFloor) throw DegeneratePoint("uniform aiming: loss below the floor");
    double d = dist_to_solution(problem, w);
    if (d <= 1e-12) throw DegeneratePoint("uniform aiming: point is on the solution set");
    Vec g = problem.full_grad_vec(w);
    Vec wv = sub(w, v);
    return std::max(0.0, (theta * l - dot(g, wv)) / d);
}

/// rho = max over probe pairs (w, v in S cap region) of the aiming deficit;
/// solutions are generated by projecting region samples.
inline Estimate estimate_uniform_aiming(const StochasticProblem& problem,
                                        const RegionSpec& region, double theta,
                                        const EstimatorOptions& opts, Rng& rng) {
    if (!problem.has_projector())
        throw MissingProjector("estimate_uniform_aiming needs a projector");
    region.validate(problem);

    std::vector<Vec> solutions;
    for (std::size_t j = 0; j < opts.n_solutions; ++j) {
        Vec v = problem.project(sample_in_region(problem, region, rng));
        if (region.contains(problem, v)) solutions.push_back(std::move(v));
    }
    if (solutions.empty())
        throw NoSolutionInRegion("no projected sample landed in the region");

    Estimate est;
    est.n_probes = opts.n_probes;
    est.value = 0.0;
    bool have_witness = false;
    for (std::size_t i = 0; i < opts.n_probes; ++i) {
        Vec w = sample_in_region(problem, region, rng);
        bool probe_valid = false;
        for (const Vec& v : solutions) {
            double deficit;
            try {
                deficit = uniform_aiming_deficit(problem, theta, w, v);
            } catch (const DegeneratePoint&) {
                break;  // the probe w itself is vacuous
            }
            probe_valid = true;
            if (!have_witness || deficit > est.value) {
                est.value = deficit;
                est.witness.points = {w, v};
                have_witness = true;
            }
        }
        if (probe_valid) ++est.n_valid;
    }
    if (est.n_valid < std::min(opts.quorum, opts.n_probes))
        throw NoValidProbe("uniform aiming: not enough valid probes");
    return est;
}

namespace detail {

// Perturbation scales from 1e-4 up to the region diameter.
inline std::vector<double> beta_scales(double diameter) {
    return {1e-4, 1e-2 * diameter, 1e-1 * diameter, diameter};
}

// The reported constant is always a plain two-point difference quotient
// ||g(w+) - g(w-)|| / ||w+ - w-||, so it reproduces at its witness. The
// direction is chosen adaptively: power iteration on the central-difference
// Hessian at scale s, seeded with the gradient direction, climbs to the
// locally steepest quotient instead of paying the ~1/sqrt(d) alignment loss
// of a random direction.
template <typename GradFn>
Estimate max_quotient_estimate(const StochasticProblem& problem, const RegionSpec& region,
                               const EstimatorOptions& opts, Rng& rng, GradFn grad_at,
                               bool with_sample) {
    region.validate(problem);
    Estimate est;
    est.n_probes = opts.n_probes;
    est.value = 0.0;
    bool have = false;
    const double diameter = 2.0 * region.radius;
    const std::size_t d = problem.dim();
    for (std::size_t i = 0; i < opts.n_probes; ++i) {
        Vec w = sample_in_region(problem, region, rng);
        SampleId z;
        if (with_sample) z = problem.sample(rng);
        Vec g0 = grad_at(w, z);
        Vec dir = rng.on_sphere(d);
        double gn = norm2(g0);
        if (gn > 0) {
            for (std::size_t j = 0; j < d; ++j) dir[j] = 0.5 * dir[j] + g0[j] / gn;
            double dn = norm2(dir);
            for (auto& x : dir) x /= dn;
        }
        bool probe_used = false;
        for (double s : beta_scales(diameter)) {
            Vec v = dir;
            double prev = -1.0;
            for (int it = 0; it < 48; ++it) {
                Vec wp = w, wm = w;
                axpy(s, v, wp);
                axpy(-s, v, wm);
                if (!region.contains(problem, wp) || !region.contains(problem, wm)) break;
                Vec gp = grad_at(wp, z);
                Vec gm = grad_at(wm, z);
                Vec diff = sub(gp, gm);
                double q = norm2(diff) / (2.0 * s);
                probe_used = true;
                if (!have || q > est.value) {
                    est.value = q;
                    est.witness.points = {wp, wm};
                    if (with_sample) est.witness.sample_index = z.index;
                    have = true;
                }
                if (q == 0.0 || std::abs(q - prev) <= 1e-4 * q) break;
                prev = q;
                for (auto& x : diff) x /= (2.0 * s * q);
                v = std::move(diff);
            }
        }
        if (probe_used) ++est.n_valid;
    }
    if (est.n_valid < std::min(opts.quorum, opts.n_probes))
        throw NoValidProbe("beta estimator: not enough in-region pairs");
    return est;
}

}  // namespace detail

/// Sample-gradient Lipschitz constant: max difference quotient of
/// grad l(., z) over in-region pairs.
inline Estimate estimate_sample_beta(const StochasticProblem& problem, const RegionSpec& region,
                                     const EstimatorOptions& opts, Rng& rng) {
    return detail::max_quotient_estimate(
        problem, region, opts, rng,
        [&](const Vec& w, const SampleId& z) { return problem.grad_vec(w, z); }, true);
}

/// Full-gradient Lipschitz constant: same quotient on grad L.
inline Estimate estimate_full_beta(const StochasticProblem& problem, const RegionSpec& region,
                                   const EstimatorOptions& opts, Rng& rng) {
    return detail::max_quotient_estimate(
        problem, region, opts, rng,
        [&](const Vec& w, const SampleId&) { return problem.full_grad_vec(w); }, false);
}

/// Exact finite-sum strong-growth ratio E||grad l(w,z)||^2 / ||grad L(w)||^2.
inline double strong_growth_ratio(const StochasticProblem& problem, const Vec& w) {
    auto n = problem.sample_count();
    if (!n || *n == 0) throw Error("strong_growth_ratio needs a finite sum");
    Vec g(problem.dim());
    KahanSum second;
    SampleId z;
    for (std::size_t i = 0; i < *n; ++i) {
        z.index = i;
        problem.grad(w, z, g);
        second.add(dot(g, g));
    }
    Vec full = problem.full_grad_vec(w);
    double denom = dot(full, full);
    if (std::sqrt(denom) < 1e-10)
        throw DegenerateGradient("strong_growth_ratio: full gradient vanishes");
    return (second.value() / static_cast<double>(*n)) / denom;
}

/// theta = 2 - 5 L r / (3 alpha), valid for r < 6 alpha / (5 L).
inline double local_aiming_theta(double hess_lip, double alpha, double r) {
    if (!(alpha > 0) || !(r > 0)) throw ConfigError("local_aiming_theta: alpha, r > 0");
    if (hess_lip > 0 && !(r < 6.0 * alpha / (5.0 * hess_lip)))
        throw RadiusTooLarge("radius breaks r < 6 alpha / (5 L)");
    return 2.0 - 5.0 * hess_lip * r / (3.0 * alpha);
}

/// Nonlinear least squares constants theta = 2 - r L sqrt(beta)/alpha and
/// rho = 8 r^2 L sqrt(beta), valid for L <= 2 alpha / (r sqrt(beta)).
inline std::pair<double, double> lsq_aiming_params(double jac_lip, double beta, double alpha,
                                                   double r) {
    if (!(alpha > 0) || !(r > 0) || !(beta >= 0))
        throw ConfigError("lsq_aiming_params: bad constants");
    double sb = std::sqrt(beta);
    if (jac_lip > 0 && sb > 0 && !(jac_lip <= 2.0 * alpha / (r * sb)))
        throw JacobianTooRough("Jacobian Lipschitz constant breaks L <= 2 alpha/(r sqrt(beta))");
    return {2.0 - r * jac_lip * sb / alpha, 8.0 * r * r * jac_lip * sb};
}

/// Hessian Lipschitz constant of L by third-difference quotients
/// ||grad L(w+hv) - 2 grad L(w) + grad L(w-hv)|| / h^2, with the direction
/// set containing the to-projection and gradient directions.
inline double estimate_hessian_lipschitz(const StochasticProblem& problem,
                                         const RegionSpec& region, std::size_t n_probes,
                                         Rng& rng) {
    region.validate(problem);
    const std::size_t d = problem.dim();
    double best = 0.0;
    for (std::size_t i = 0; i < n_probes; ++i) {
        Vec w = sample_in_region(problem, region, rng);
        double h = std::sqrt(std::sqrt(std::numeric_limits<double>::epsilon())) *
                   (1.0 + norm_inf(w));
        std::vector<Vec> dirs;
        dirs.push_back(rng.on_sphere(d));
        Vec g = problem.full_grad_vec(w);
        double gn = norm2(g);
        if (gn > 0) dirs.push_back(scaled(g, 1.0 / gn));
        if (problem.has_projector()) {
            Vec to = sub(w, problem.project(w));
            double tn = norm2(to);
            if (tn > 0) dirs.push_back(scaled(to, 1.0 / tn));
        }
        for (const Vec& v : dirs) {
            Vec wp = w, wm = w;
            axpy(h, v, wp);
            axpy(-h, v, wm);
            Vec gp = problem.full_grad_vec(wp);
            Vec gm = problem.full_grad_vec(wm);
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                double t = gp[j] - 2.0 * g[j] + gm[j];
                s += t * t;
            }
            best = std::max(best, std::sqrt(s) / (h * h));
        }
    }
    return best;
}

/// Max over sampled (w, proj(w)) of
///   |L(w) + 1/2 <grad L(w), proj(w) - w>| - (5 L_hess / 12) ||w - proj(w)||^3.
/// Nonpositive up to tolerance when the cubic-remainder bound holds.
inline double cubic_remainder_check(const StochasticProblem& problem, double hess_lip,
                                    const RegionSpec& region, std::size_t n_pairs, Rng& rng) {
    if (!problem.has_projector())
        throw MissingProjector("cubic_remainder_check needs a projector");
    region.validate(problem);
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n_pairs; ++i) {
        Vec w = sample_in_region(problem, region, rng);
        Vec wbar = problem.project(w);
        Vec g = problem.full_grad_vec(w);
        double l = problem.full_loss(w);
        double lhs = std::abs(l + 0.5 * dot(g, sub(wbar, w)));
        double r3 = std::pow(dist(w, wbar), 3.0);
        worst = std::max(worst, lhs - (5.0 * hess_lip / 12.0) * r3);
    }
    return worst;
}

/// Estimated constants with witnesses for one problem/region.
struct RegularityReport {
    std::optional<Estimate> alpha_pl;
    std::optional<Estimate> alpha_qg;
    std::optional<Estimate> theta_aiming;
    std::optional<Estimate> rho_uniform;
    std::optional<Estimate> beta_sample;
    std::optional<Estimate> beta_bar_full;
    std::optional<double> strong_growth_B;
    RegionSpec region;
    std::size_t n_probes = 0;
};

}  // namespace sgdlab
