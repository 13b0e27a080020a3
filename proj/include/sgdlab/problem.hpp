#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>

#include "sgdlab/common.hpp"
#include "sgdlab/rng.hpp"
#include "sgdlab/vec.hpp"

namespace sgdlab {

/// Opaque sample token: an index into [n] for finite sums, a drawn parameter
/// vector otherwise. One abstraction covers both sampling regimes.
struct SampleId {
    std::uint64_t index = 0;
    Vec params;  // empty for finite sums
};

/// A stochastic interpolation objective L(w) = E_z l(w, z) with nonnegative
/// per-sample losses. Implementations must be pure in (w, z); RNG state is
/// owned by the caller.
class StochasticProblem {
public:
    virtual ~StochasticProblem() = default;

    virtual std::size_t dim() const = 0;
    virtual SampleId sample(Rng& rng) const = 0;
    virtual double loss(const Vec& w, const SampleId& z) const = 0;
    virtual void grad(const Vec& w, const SampleId& z, Vec& out) const = 0;

    /// Exact average of the per-sample losses for finite sums.
    virtual double full_loss(const Vec& w) const = 0;

    virtual bool has_projector() const { return false; }

    /// A nearest point of the solution set S; single-valued and
    /// deterministic even where the metric projection is set-valued.
    virtual Vec project(const Vec& /*w*/) const {
        throw MissingProjector("problem exposes no projector");
    }

    virtual std::optional<std::size_t> sample_count() const { return std::nullopt; }

    Vec grad_vec(const Vec& w, const SampleId& z) const {
        Vec g(dim(), 0.0);
        grad(w, z, g);
        return g;
    }

    /// Full gradient of L; exact (compensated) mean over samples for finite
    /// sums. Problems with a cheaper closed form override this.
    virtual void full_grad(const Vec& w, Vec& out) const {
        auto n = sample_count();
        if (!n || *n == 0)
            throw Error("full_grad needs a finite sum or an override");
        std::vector<KahanSum> acc(dim());
        Vec g(dim());
        for (std::size_t i = 0; i < *n; ++i) {
            SampleId z;
            z.index = i;
            grad(w, z, g);
            for (std::size_t j = 0; j < dim(); ++j) acc[j].add(g[j]);
        }
        for (std::size_t j = 0; j < dim(); ++j)
            out[j] = acc[j].value() / static_cast<double>(*n);
    }

    Vec full_grad_vec(const Vec& w) const {
        Vec g(dim(), 0.0);
        full_grad(w, g);
        return g;
    }
};

/// Region of interest: a ball B_r(center) or the tube {dist(w,S) <= r}.
struct RegionSpec {
    enum class Kind { ball, tube };

    Kind kind = Kind::ball;
    Vec center;     // ball: the center; tube: optional sampling anchor
    double radius = 0.0;

    static RegionSpec ball(Vec c, double r) {
        RegionSpec s;
        s.kind = Kind::ball;
        s.center = std::move(c);
        s.radius = r;
        return s;
    }
    static RegionSpec tube(double r, Vec anchor = {}) {
        RegionSpec s;
        s.kind = Kind::tube;
        s.center = std::move(anchor);
        s.radius = r;
        return s;
    }

    void validate(const StochasticProblem& problem) const {
        if (!(radius > 0)) throw ConfigError("region radius must be positive");
        if (kind == Kind::tube && !problem.has_projector())
            throw MissingProjector("tube region needs a projector for membership");
        if (kind == Kind::ball && center.size() != problem.dim())
            throw ConfigError("ball center dimension mismatch");
    }

    bool contains(const StochasticProblem& problem, const Vec& w) const {
        if (kind == Kind::ball) return dist(w, center) <= radius;
        return dist(w, problem.project(w)) <= radius;
    }
};

/// dist(w, S) via the problem's projector.
inline double dist_to_solution(const StochasticProblem& problem, const Vec& w) {
    if (!problem.has_projector())
        throw MissingProjector("dist_to_solution: no projector");
    return dist(w, problem.project(w));
}

/// Uniform probe in the region. Tubes are sampled by drawing uniformly in
/// B_{2r}(anchor) and filtering by dist(.,S) <= r, anchor = project(center
/// or origin).
inline Vec sample_in_region(const StochasticProblem& problem, const RegionSpec& region,
                            Rng& rng, std::size_t max_attempts = 1024) {
    if (region.kind == RegionSpec::Kind::ball)
        return rng.in_ball(region.center, region.radius);
    Vec anchor = region.center.empty() ? Vec(problem.dim(), 0.0) : region.center;
    anchor = problem.project(anchor);
    for (std::size_t a = 0; a < max_attempts; ++a) {
        Vec w = rng.in_ball(anchor, 2.0 * region.radius);
        if (dist_to_solution(problem, w) <= region.radius) return w;
    }
    throw NoValidProbe("tube sampling failed after " + std::to_string(max_attempts) +
                       " attempts");
}

/// Max relative error, over coordinates, between the analytic sample
/// gradient and central finite differences of the loss with step h.
/// The denominator is max(1, ||grad||).
inline double fd_grad_check(const StochasticProblem& problem, const Vec& w,
                            const SampleId& z, double step) {
    if (!(step > 0)) throw Error("fd_grad_check: step must be positive");
    Vec g = problem.grad_vec(w, z);
    if (!all_finite(g)) throw NonFiniteValue("gradient not finite");
    double denom = std::max(1.0, norm2(g));
    Vec wp = w;
    double worst = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        wp[i] = w[i] + step;
        double lp = problem.loss(wp, z);
        wp[i] = w[i] - step;
        double lm = problem.loss(wp, z);
        wp[i] = w[i];
        if (!is_finite(lp) || !is_finite(lm)) throw NonFiniteValue("loss not finite");
        double fd = (lp - lm) / (2.0 * step);
        worst = std::max(worst, std::abs(fd - g[i]) / denom);
    }
    return worst;
}

struct McLoss {
    double estimate = 0.0;
    double standard_error = 0.0;
};

/// Monte Carlo estimate of L(w). When the problem is a finite sum and
/// n_samples equals the sample count, the draw is exhaustive and the
/// estimate equals full_loss exactly.
inline McLoss mc_full_loss(const StochasticProblem& problem, const Vec& w,
                           std::size_t n_samples, Rng& rng) {
    if (n_samples < 2) throw Error("mc_full_loss: n_samples must be >= 2");
    auto count = problem.sample_count();
    const bool exhaustive = count && *count == n_samples;
    Vec losses(n_samples);
    KahanSum sum;
    for (std::size_t i = 0; i < n_samples; ++i) {
        SampleId z;
        if (exhaustive)
            z.index = i;
        else
            z = problem.sample(rng);
        double l = problem.loss(w, z);
        if (!is_finite(l)) throw NonFiniteValue("mc_full_loss: loss not finite");
        losses[i] = l;
        sum.add(l);
    }
    double n = static_cast<double>(n_samples);
    McLoss out;
    out.estimate = sum.value() / n;
    KahanSum sq;  // second pass: exactly zero spread for constant losses
    for (double l : losses) {
        double d = l - out.estimate;
        sq.add(d * d);
    }
    out.standard_error = std::sqrt(sq.value() / (n - 1.0) / n);
    return out;
}

}  // namespace sgdlab
