#pragma once

#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sgdlab/problem.hpp"

namespace sgdlab {

struct SGDConfig {
    double eta = 0.1;
    std::size_t iters = 100;  // T
    std::size_t batch = 1;
    std::uint64_t seed = 0;
    std::vector<RegionSpec> monitors;
    std::size_t record_every = 1;
    // When supplied, the trajectory carries the eta < theta/beta validity flag.
    std::optional<double> theta;
    std::optional<double> beta;

    void validate() const {
        if (!(eta > 0)) throw InvalidStepsize("eta must be positive");
        if (iters < 1) throw ConfigError("iteration budget T must be >= 1");
        if (batch < 1) throw ConfigError("batch must be >= 1");
        if (record_every < 1) throw ConfigError("record_every must be >= 1");
    }
};

struct TrajectoryPoint {
    std::size_t t = 0;
    double loss = 0.0;
    std::optional<double> dist;       // absent without a projector
    double drift = 0.0;               // ||w_t - w_0||
    std::vector<char> inside;         // per monitor, at this recorded step
};

struct Trajectory {
    std::vector<TrajectoryPoint> points;
    std::vector<std::optional<std::size_t>> escape_time;  // per monitor
    std::vector<RegionSpec> monitors;
    Vec final_w;
    std::uint64_t seed = 0;
    bool diverged = false;
    bool stepsize_valid = true;
    double initial_loss = 0.0;
};

namespace detail {

inline void record_point(const StochasticProblem& problem, const Vec& w0, const Vec& w,
                         std::size_t t, const std::vector<RegionSpec>& monitors,
                         Trajectory& traj) {
    TrajectoryPoint p;
    p.t = t;
    p.loss = problem.full_loss(w);
    if (problem.has_projector()) p.dist = dist_to_solution(problem, w);
    p.drift = dist(w, w0);
    p.inside.reserve(monitors.size());
    for (const auto& m : monitors)
        p.inside.push_back(m.contains(problem, w) ? 1 : 0);
    traj.points.push_back(std::move(p));
}

// Escape is checked every step even though recording is strided.
inline void update_escapes(const StochasticProblem& problem, const Vec& w, std::size_t t,
                           const std::vector<RegionSpec>& monitors, Trajectory& traj) {
    for (std::size_t j = 0; j < monitors.size(); ++j)
        if (!traj.escape_time[j] && !monitors[j].contains(problem, w))
            traj.escape_time[j] = t;
}

}  // namespace detail

/// Plain SGD: w_{t+1} = w_t - eta * g_t with g_t the mean gradient over the
/// minibatch. Finite-sum minibatches are drawn without replacement within a
/// step, so batch = n reproduces full-batch GD step for step; batch = 1 is
/// the single-sample recursion.
inline Trajectory run_sgd(const StochasticProblem& problem, const Vec& w0,
                          const SGDConfig& config) {
    config.validate();
    for (const auto& m : config.monitors) m.validate(problem);

    Trajectory traj;
    traj.monitors = config.monitors;
    traj.seed = config.seed;
    traj.escape_time.assign(config.monitors.size(), std::nullopt);
    traj.initial_loss = problem.full_loss(w0);
    if (config.theta && config.beta)
        traj.stepsize_valid = config.eta < *config.theta / *config.beta;

    const double blowup = 1e12 * std::max(traj.initial_loss, kEpsFloor);
    Rng rng(config.seed);
    Vec w = w0;
    detail::update_escapes(problem, w, 0, config.monitors, traj);
    detail::record_point(problem, w0, w, 0, config.monitors, traj);

    auto count = problem.sample_count();
    const bool full_batch = count && config.batch >= *count;
    std::vector<std::size_t> indices;
    if (count) {
        indices.resize(*count);
        std::iota(indices.begin(), indices.end(), 0);
    }

    Vec g(problem.dim()), gsum(problem.dim());
    for (std::size_t t = 0; t < config.iters; ++t) {
        if (full_batch) {
            problem.full_grad(w, gsum);
        } else {
            std::fill(gsum.begin(), gsum.end(), 0.0);
            SampleId z;
            for (std::size_t b = 0; b < config.batch; ++b) {
                if (count) {
                    std::size_t j = b + rng.index(*count - b);
                    std::swap(indices[b], indices[j]);
                    z.index = indices[b];
                } else {
                    z = problem.sample(rng);
                }
                problem.grad(w, z, g);
                axpy(1.0, g, gsum);
            }
            if (config.batch > 1)
                for (auto& x : gsum) x /= static_cast<double>(config.batch);
        }
        axpy(-config.eta, gsum, w);

        if (!all_finite(w)) {
            traj.diverged = true;
            break;
        }
        detail::update_escapes(problem, w, t + 1, config.monitors, traj);
        if ((t + 1) % config.record_every == 0 || t + 1 == config.iters) {
            detail::record_point(problem, w0, w, t + 1, config.monitors, traj);
            if (traj.points.back().loss > blowup) {
                traj.diverged = true;
                break;
            }
        }
    }
    traj.final_w = std::move(w);
    return traj;
}

/// Deterministic full-gradient comparator with the same record schema.
inline Trajectory run_gd(const StochasticProblem& problem, const Vec& w0, double eta,
                         std::size_t iters, std::vector<RegionSpec> monitors = {},
                         std::size_t record_every = 1) {
    SGDConfig cfg;
    cfg.eta = eta;
    cfg.iters = iters;
    cfg.batch = problem.sample_count().value_or(1);
    cfg.monitors = std::move(monitors);
    cfg.record_every = record_every;
    if (!problem.sample_count())
        throw Error("run_gd needs a finite sum (or use run_sgd with a batch)");
    return run_sgd(problem, w0, cfg);
}

struct ContractionSample {
    double ratio_mean = 0.0;
    double ratio_stderr = 0.0;
    std::size_t n = 0;
};

/// Monte Carlo estimate of E dist^2(w - eta grad l(w,z), S) / dist^2(w, S).
inline ContractionSample one_step_contraction_mc(const StochasticProblem& problem, const Vec& w,
                                                 double eta, std::size_t n_samples, Rng& rng) {
    if (!problem.has_projector())
        throw MissingProjector("one_step_contraction_mc needs a projector");
    double d0 = dist_to_solution(problem, w);
    if (d0 < 1e-8) throw DegeneratePoint("one_step_contraction_mc: point is on S");
    Vec ratios(n_samples);
    Vec g(problem.dim());
    KahanSum sum;
    for (std::size_t i = 0; i < n_samples; ++i) {
        SampleId z = problem.sample(rng);
        problem.grad(w, z, g);
        Vec wp = w;
        axpy(-eta, g, wp);
        double d1 = dist_to_solution(problem, wp);
        ratios[i] = (d1 * d1) / (d0 * d0);
        sum.add(ratios[i]);
    }
    ContractionSample out;
    out.n = n_samples;
    out.ratio_mean = sum.value() / static_cast<double>(n_samples);
    if (n_samples > 1) {
        KahanSum sq;
        for (double r : ratios) {
            double d = r - out.ratio_mean;
            sq.add(d * d);
        }
        out.ratio_stderr = std::sqrt(sq.value() / static_cast<double>(n_samples - 1) /
                                     static_cast<double>(n_samples));
    }
    return out;
}

/// Exhaustive finite-sum expectation of the one-step contraction ratio; no
/// Monte Carlo noise.
inline double one_step_contraction_exact(const StochasticProblem& problem, const Vec& w,
                                         double eta) {
    if (!problem.has_projector())
        throw MissingProjector("one_step_contraction_exact needs a projector");
    auto n = problem.sample_count();
    if (!n) throw Error("one_step_contraction_exact needs a finite sum");
    double d0 = dist_to_solution(problem, w);
    if (d0 < 1e-8) throw DegeneratePoint("one_step_contraction_exact: point is on S");
    Vec g(problem.dim());
    KahanSum sum;
    SampleId z;
    for (std::size_t i = 0; i < *n; ++i) {
        z.index = i;
        problem.grad(w, z, g);
        Vec wp = w;
        axpy(-eta, g, wp);
        double d1 = dist_to_solution(problem, wp);
        sum.add((d1 * d1) / (d0 * d0));
    }
    return sum.value() / static_cast<double>(*n);
}

// ---------------------------------------------------------------------------
// Trajectory CSV: fixed header; optional fields become empty cells. The
// inside_ball / inside_tube columns reflect the first monitor of each kind.
// ---------------------------------------------------------------------------

inline std::string format_double(double x) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

inline void write_trajectory_csv(const Trajectory& traj, std::ostream& os) {
    os << "t,loss,dist,drift,inside_ball,inside_tube\n";
    std::optional<std::size_t> ball_idx, tube_idx;
    for (std::size_t j = 0; j < traj.monitors.size(); ++j) {
        if (traj.monitors[j].kind == RegionSpec::Kind::ball && !ball_idx) ball_idx = j;
        if (traj.monitors[j].kind == RegionSpec::Kind::tube && !tube_idx) tube_idx = j;
    }
    for (const auto& p : traj.points) {
        os << p.t << ',' << format_double(p.loss) << ',';
        if (p.dist) os << format_double(*p.dist);
        os << ',' << format_double(p.drift) << ',';
        if (ball_idx) os << int(p.inside[*ball_idx]);
        os << ',';
        if (tube_idx) os << int(p.inside[*tube_idx]);
        os << '\n';
    }
}

inline void write_trajectory_csv(const Trajectory& traj, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw Error("cannot open trajectory CSV for writing: " + path);
    write_trajectory_csv(traj, os);
}

}  // namespace sgdlab
