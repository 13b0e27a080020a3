#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sgdlab/sgd.hpp"

namespace sgdlab {

inline void check_stepsize(double alpha, double theta, double beta, double eta) {
    if (!(alpha > 0) || !(theta > 0) || !(beta > 0))
        throw ConfigError("rate constants must be positive");
    if (!(eta > 0) || !(eta < theta / beta))
        throw InvalidStepsize("need 0 < eta < theta/beta");
}

/// One-step contraction factor q = 1 - alpha eta (theta - beta eta).
inline double theoretical_factor(double alpha, double theta, double beta, double eta) {
    check_stepsize(alpha, theta, beta, eta);
    return 1.0 - alpha * eta * (theta - beta * eta);
}

/// Iterations to reach dist^2 <= eps dist0^2 with failure budget delta2:
/// ceil( log(1/(delta2 eps)) / (alpha eta (theta - beta eta)) ).
inline std::uint64_t iteration_bound(double alpha, double theta, double beta, double eta,
                                     double eps, double delta2) {
    check_stepsize(alpha, theta, beta, eta);
    if (!(eps > 0) || !(delta2 > 0)) throw ConfigError("eps, delta2 must be positive");
    double rate = alpha * eta * (theta - beta * eta);
    double raw = std::log(1.0 / (delta2 * eps)) / rate;
    if (raw <= 0) return 0;
    return static_cast<std::uint64_t>(std::ceil(raw));
}

/// Closed-form linear rates at iteration t, plus the first t from which the
/// large-stepsize rate beats (or ties) each alternative: 0 when its exponent
/// dominates, +inf otherwise (pure exponentials never cross).
struct Table1Rates {
    double this_work = 1.0;       // exp(-t theta^2 / kappa)
    double pl_small_step = 1.0;   // exp(-t / (kappa kappa_bar))
    double strong_growth = 1.0;   // exp(-t / (B kappa_bar))
    double crossover_pl_small_step = 0.0;
    double crossover_strong_growth = 0.0;

    std::map<std::string, double> as_map() const {
        return {{"this_work", this_work},
                {"pl_small_step", pl_small_step},
                {"strong_growth", strong_growth},
                {"crossover_pl_small_step", crossover_pl_small_step},
                {"crossover_strong_growth", crossover_strong_growth}};
    }
};

inline Table1Rates table1_rates(double kappa, double kappa_bar, double b_growth, double theta,
                                double t) {
    if (!(kappa > 0) || !(kappa_bar > 0) || !(b_growth > 0) || !(theta > 0))
        throw ConfigError("table1_rates: parameters must be positive");
    Table1Rates r;
    const double c_this = theta * theta / kappa;
    const double c_pl = 1.0 / (kappa * kappa_bar);
    const double c_sg = 1.0 / (b_growth * kappa_bar);
    r.this_work = std::exp(-t * c_this);
    r.pl_small_step = std::exp(-t * c_pl);
    r.strong_growth = std::exp(-t * c_sg);
    const double inf = std::numeric_limits<double>::infinity();
    r.crossover_pl_small_step = (c_this >= c_pl) ? 0.0 : inf;
    r.crossover_strong_growth = (c_this >= c_sg) ? 0.0 : inf;
    return r;
}

enum class FitQuantity { loss, dist2 };

struct RateFit {
    double per_step_factor = 1.0;
    std::pair<std::size_t, std::size_t> window = {0, 0};
    double r_squared = 1.0;
    FitQuantity quantity = FitQuantity::loss;
    std::size_t n_points = 0;
};

/// Least-squares slope of log(quantity) against t over the recorded points
/// in the window, exponentiated to a per-step factor.
inline RateFit fit_rate(const Trajectory& traj, FitQuantity quantity,
                        std::pair<std::size_t, std::size_t> window) {
    std::vector<double> ts, logs;
    for (const auto& p : traj.points) {
        if (p.t < window.first || p.t > window.second) continue;
        double v;
        if (quantity == FitQuantity::loss) {
            v = p.loss;
        } else {
            if (!p.dist) continue;
            v = (*p.dist) * (*p.dist);
        }
        if (!(v > kEpsFloor)) continue;
        ts.push_back(static_cast<double>(p.t));
        logs.push_back(std::log(v));
    }
    if (ts.size() < 5)
        throw InsufficientData("fit_rate: fewer than 5 usable points in the window");
    const double n = static_cast<double>(ts.size());
    double mt = 0, ml = 0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        mt += ts[i];
        ml += logs[i];
    }
    mt /= n;
    ml /= n;
    double sxx = 0, sxy = 0, syy = 0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        double dt = ts[i] - mt, dl = logs[i] - ml;
        sxx += dt * dt;
        sxy += dt * dl;
        syy += dl * dl;
    }
    RateFit fit;
    fit.quantity = quantity;
    fit.window = window;
    fit.n_points = ts.size();
    double slope = (sxx > 0) ? sxy / sxx : 0.0;
    fit.per_step_factor = std::exp(slope);
    if (syy > 0) {
        double ssres = 0;
        for (std::size_t i = 0; i < ts.size(); ++i) {
            double e = logs[i] - (ml + slope * (ts[i] - mt));
            ssres += e * e;
        }
        fit.r_squared = std::max(0.0, 1.0 - ssres / syy);
    }
    return fit;
}

/// Default window: the last 60% of recorded steps that are inside every
/// monitor and above 100x the loss floor. Skips the transient and the
/// numerical floor.
inline std::pair<std::size_t, std::size_t> default_fit_window(const Trajectory& traj,
                                                              FitQuantity quantity) {
    std::vector<std::size_t> usable;
    for (const auto& p : traj.points) {
        double v;
        if (quantity == FitQuantity::loss) {
            v = p.loss;
        } else {
            if (!p.dist) continue;
            v = (*p.dist) * (*p.dist);
        }
        if (!(v > 100.0 * kEpsFloor)) continue;
        bool inside = true;
        for (char f : p.inside) inside = inside && f;
        if (inside) usable.push_back(p.t);
    }
    if (usable.empty()) throw InsufficientData("default_fit_window: no usable points");
    std::size_t start = usable[usable.size() - std::max<std::size_t>(1, (usable.size() * 6) / 10)];
    return {start, usable.back()};
}

struct EscapeTheory {
    double rho = 0.0;
    double theta = 1.0;
    double beta = 1.0;
    double eta = 0.1;
    double alpha = 1.0;
    double radius = 1.0;
    double delta1 = 0.1;
};

struct EscapeTally {
    double empirical = 0.0;
    double bound = 0.0;
    std::size_t n_escaped = 0;
    std::size_t n_runs = 0;
};

/// Fraction of runs whose monitor was escaped, against the explicit bound
/// (1 + 4 rho / ((theta - beta eta) alpha r)) * delta1.
inline EscapeTally escape_tally(const std::vector<Trajectory>& runs, std::size_t monitor_index,
                                const EscapeTheory& th) {
    EscapeTally tally;
    tally.n_runs = runs.size();
    for (const auto& traj : runs) {
        if (monitor_index >= traj.escape_time.size())
            throw MonitorMissing("trajectory lacks the tallied monitor");
        if (traj.escape_time[monitor_index]) ++tally.n_escaped;
    }
    if (!runs.empty())
        tally.empirical = static_cast<double>(tally.n_escaped) / static_cast<double>(runs.size());
    double margin = (th.theta - th.beta * th.eta) * th.alpha * th.radius;
    if (!(margin > 0)) throw ConfigError("escape_tally: need theta - beta eta > 0");
    tally.bound = (1.0 + 4.0 * th.rho / margin) * th.delta1;
    return tally;
}

}  // namespace sgdlab
