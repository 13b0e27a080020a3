#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "sgdlab/common.hpp"
#include "sgdlab/rng.hpp"

namespace sgdlab {

/// Nonnegative multiplicative noise with unit mean. Restricted to families
/// where the conditional recursion hypothesis is provable by hand.
struct MultNoise {
    enum class Kind { constant, two_point, uniform };

    Kind kind = Kind::constant;
    double a = 0.0;  // two_point: {a, 2-a} equiprobable; uniform: [1-a, 1+a]

    void validate() const {
        switch (kind) {
            case Kind::constant: return;
            case Kind::two_point:
                if (!(a >= 0.0 && a <= 2.0))
                    throw ConfigError("two-point noise needs a in [0,2]");
                return;
            case Kind::uniform:
                if (!(a >= 0.0 && a <= 1.0))
                    throw ConfigError("uniform noise needs a in [0,1]");
                return;
        }
    }

    double draw(Rng& rng) const {
        switch (kind) {
            case Kind::constant: return 1.0;
            case Kind::two_point: return rng.uniform01() < 0.5 ? a : 2.0 - a;
            case Kind::uniform: return rng.uniform(1.0 - a, 1.0 + a);
        }
        return 1.0;
    }
};

/// Synthetic chain U_{t+1} = q U_t xi_t + zeta_t eta_t with E xi = E eta = 1,
/// which satisfies E[U_{t+1} 1_{tau>t} | U_{1:t}] <= q U_t 1_{tau>t} + zeta_t
/// by construction.
struct ChainSpec {
    bool u0_uniform = false;
    double u0 = 1.0;       // point mass, or the lower endpoint when uniform
    double u0_hi = 1.0;    // upper endpoint when uniform
    MultNoise xi;          // on the contracted term
    MultNoise eta_noise;   // on the drift term
    double q = 1.0;        // contraction in (0, 1]
    double zeta = 0.0;     // constant drift unless a schedule is given
    std::vector<double> zeta_schedule;
    double threshold = 1.0;   // u
    std::size_t horizon = 100;
    std::size_t trials = 1000;

    void validate() const {
        if (!(q > 0.0 && q <= 1.0)) throw ConfigError("chain contraction q in (0,1]");
        if (!(threshold > 0.0)) throw ConfigError("chain threshold u must be positive");
        if (!(u0 >= 0.0) || (u0_uniform && !(u0_hi >= u0)))
            throw ConfigError("chain U0 must be nonnegative");
        if (zeta < 0.0) throw ConfigError("chain drift must be nonnegative");
        for (double z : zeta_schedule)
            if (z < 0.0) throw ConfigError("chain drift must be nonnegative");
        xi.validate();
        eta_noise.validate();
    }

    double zeta_at(std::size_t t) const {
        if (zeta_schedule.empty()) return zeta;
        return zeta_schedule[std::min(t, zeta_schedule.size() - 1)];
    }

    double mean_u0() const { return u0_uniform ? 0.5 * (u0 + u0_hi) : u0; }

    double draw_u0(Rng& rng) const { return u0_uniform ? rng.uniform(u0, u0_hi) : u0; }
};

struct ChainResult {
    std::vector<Vec> u;                            // trials x (horizon+1)
    std::vector<std::optional<std::size_t>> tau;   // first t with U_t > threshold
};

inline ChainResult simulate_chain(const ChainSpec& spec, Rng& rng) {
    spec.validate();
    ChainResult res;
    res.u.resize(spec.trials);
    res.tau.assign(spec.trials, std::nullopt);
    for (std::size_t trial = 0; trial < spec.trials; ++trial) {
        Rng stream = rng.child(trial);
        Vec& u = res.u[trial];
        u.resize(spec.horizon + 1);
        u[0] = spec.draw_u0(stream);
        if (u[0] > spec.threshold) res.tau[trial] = 0;
        for (std::size_t t = 0; t < spec.horizon; ++t) {
            u[t + 1] = spec.q * u[t] * spec.xi.draw(stream) +
                       spec.zeta_at(t) * spec.eta_noise.draw(stream);
            if (!res.tau[trial] && u[t + 1] > spec.threshold) res.tau[trial] = t + 1;
        }
    }
    return res;
}

struct StopBoundCheck {
    double empirical = 0.0;  // P(tau <= t)
    double bound = 0.0;      // (E U0 + sum_{i<t} zeta_i) / u
    double sigma = 0.0;      // binomial standard error of the empirical rate
    bool pass = false;       // one-sided with 3 sigma slack
};

/// Theorem-style stopping bound: P(tau <= t) <= (E U0 + sum zeta_i)/u. Only
/// tau enters the tally; U values past tau are never used.
inline StopBoundCheck check_stop_bound(const ChainSpec& spec, std::size_t t, Rng& rng) {
    if (t > spec.horizon) throw ConfigError("check_stop_bound: t beyond the horizon");
    ChainResult sim = simulate_chain(spec, rng);
    std::size_t stopped = 0;
    for (const auto& tau : sim.tau)
        if (tau && *tau <= t) ++stopped;
    StopBoundCheck out;
    double n = static_cast<double>(spec.trials);
    out.empirical = static_cast<double>(stopped) / n;
    double drift = 0.0;
    for (std::size_t i = 0; i < t; ++i) drift += spec.zeta_at(i);
    out.bound = (spec.mean_u0() + drift) / spec.threshold;
    out.sigma = std::sqrt(out.empirical * (1.0 - out.empirical) / n);
    out.pass = out.empirical <= out.bound + 3.0 * out.sigma;
    return out;
}

struct ContractionBoundCheck {
    std::size_t t_star = 0;       // ceil((1/(1-q)) log(1/(delta2 eps)))
    double empirical = 0.0;       // P(U_{t*} <= eps U_0)
    double target = 0.0;          // 1 - delta1 - delta2
    double sigma = 0.0;
    bool pass = false;
};

/// Contraction-time bound: with E U0 <= delta1 u and zero drift, the chain
/// satisfies U_t <= eps U_0 after t* steps with probability at least
/// 1 - delta1 - delta2.
inline ContractionBoundCheck check_contraction_bound(const ChainSpec& spec, double eps,
                                                     double delta1, double delta2, Rng& rng) {
    spec.validate();
    if (!(spec.q < 1.0)) throw PreconditionViolated("contraction bound needs q < 1");
    if (spec.zeta != 0.0 || !spec.zeta_schedule.empty())
        throw PreconditionViolated("contraction bound needs zero drift");
    if (!(spec.mean_u0() <= delta1 * spec.threshold))
        throw PreconditionViolated("contraction bound needs E U0 <= delta1 u");
    if (!(eps > 0 && eps < 1) || !(delta2 > 0 && delta2 < 1) || !(delta1 > 0))
        throw ConfigError("check_contraction_bound: bad (eps, delta1, delta2)");

    ContractionBoundCheck out;
    out.t_star = static_cast<std::size_t>(
        std::ceil(std::log(1.0 / (delta2 * eps)) / (1.0 - spec.q)));
    ChainSpec run = spec;
    run.horizon = std::max(spec.horizon, out.t_star);
    ChainResult sim = simulate_chain(run, rng);
    std::size_t ok = 0;
    for (const auto& u : sim.u)
        if (u[out.t_star] <= eps * u[0]) ++ok;
    double n = static_cast<double>(run.trials);
    out.empirical = static_cast<double>(ok) / n;
    out.target = 1.0 - delta1 - delta2;
    out.sigma = std::sqrt(out.empirical * (1.0 - out.empirical) / n);
    out.pass = out.empirical >= out.target - 3.0 * out.sigma;
    return out;
}

}  // namespace sgdlab
