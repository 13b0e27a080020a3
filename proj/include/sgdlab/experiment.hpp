#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sgdlab/boosting.hpp"
#include "sgdlab/network.hpp"
#include "sgdlab/rates.hpp"
#include "sgdlab/regularity.hpp"
#include "sgdlab/sgd.hpp"
#include "sgdlab/stoptime.hpp"
#include "sgdlab/testbed.hpp"

namespace sgdlab {

using json = nlohmann::json;

inline constexpr const char* kToolVersion = "sgdlab 0.1.0";
inline constexpr int kSummarySchemaVersion = 1;

// ---------------------------------------------------------------------------
// Config handling. One declarative JSON file per experiment; unknown keys are
// rejected so typos fail loudly instead of silently running defaults.
// ---------------------------------------------------------------------------

namespace detail {

inline void reject_unknown_keys(const json& obj, const std::set<std::string>& allowed,
                                const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

inline Vec to_vec(const json& arr, const std::string& where) {
    if (!arr.is_array()) throw ConfigError(where + " must be an array of numbers");
    Vec v;
    for (const auto& x : arr) v.push_back(x.get<double>());
    return v;
}

}  // namespace detail

struct ExperimentConfig {
    std::string kind;
    std::uint64_t seed = 0;
    std::string out_dir = "runs";
    json raw;

    const json& section(const std::string& name) const {
        static const json empty = json::object();
        auto it = raw.find(name);
        return it == raw.end() ? empty : *it;
    }
};

inline ExperimentConfig parse_config(const json& j) {
    detail::reject_unknown_keys(
        j,
        {"experiment", "seed", "out_dir", "problem", "region", "sgd", "estimator", "boost",
         "stoptime", "rates", "width_scan", "contraction"},
        "config");
    ExperimentConfig cfg;
    if (!j.contains("experiment")) throw ConfigError("config needs an 'experiment' kind");
    cfg.kind = j.at("experiment").get<std::string>();
    static const std::set<std::string> kinds{"verify",  "train",    "contraction",
                                             "width-scan", "boost", "stoptime", "rates"};
    if (!kinds.count(cfg.kind)) throw ConfigError("unknown experiment kind '" + cfg.kind + "'");
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();
    cfg.raw = j;
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config parse failure: ") + e.what());
    }
    return parse_config(j);
}

inline std::string config_hash(const json& j) {
    std::string s = j.dump();  // keys are stored sorted, so the dump is canonical
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// Problem and region construction.
// ---------------------------------------------------------------------------

struct BuiltProblem {
    std::unique_ptr<StochasticProblem> problem;
    Vec anchor;  // resolution target for region center "anchor"
    std::optional<NetworkSpec> net_spec;
    std::optional<Dataset> dataset;
};

inline BuiltProblem build_problem(const json& cfg, std::uint64_t master_seed) {
    detail::reject_unknown_keys(cfg,
                                {"kind", "a", "n", "d", "common", "centers", "input_dim",
                                 "hidden", "activation", "n_data", "labels"},
                                "problem");
    if (!cfg.contains("kind")) throw ConfigError("problem needs a 'kind'");
    std::string kind = cfg.at("kind").get<std::string>();
    BuiltProblem out;
    Rng rng = Rng(master_seed).child(0xDA7A);

    if (kind == "parabola") {
        double a = cfg.value("a", 1.0);
        if (!(a > 0)) throw ConfigError("parabola curvature must be positive");
        out.problem = std::make_unique<ParabolaProblem>(a);
        out.anchor = Vec{0.0, 0.0};
    } else if (kind == "regression") {
        std::size_t n = cfg.value("n", 8);
        std::size_t d = cfg.value("d", 32);
        if (n >= d) throw ConfigError("interpolating regression needs n < d");
        auto reg = std::make_unique<InterpLinearRegression>(make_interp_regression(n, d, rng));
        out.anchor = reg->project(Vec(d, 0.0));
        out.problem = std::move(reg);
    } else if (kind == "circles") {
        Vec common = cfg.contains("common") ? detail::to_vec(cfg.at("common"), "problem.common")
                                            : Vec{1.0, 0.0};
        std::vector<Vec> centers;
        if (cfg.contains("centers")) {
            for (const auto& c : cfg.at("centers"))
                centers.push_back(detail::to_vec(c, "problem.centers[]"));
        } else {
            centers = {Vec{0.0, 0.0}, Vec{2.5, 0.5}};
        }
        out.anchor = common;
        out.problem = std::make_unique<ManifoldIntersection>(common, std::move(centers));
    } else if (kind == "network") {
        NetworkSpec spec;
        spec.input_dim = cfg.value("input_dim", 32);
        spec.hidden = cfg.value("hidden", std::vector<std::size_t>{512});
        std::string act = cfg.value("activation", std::string("tanh"));
        if (act == "tanh")
            spec.activation = Activation::tanh_fn;
        else if (act == "sigmoid")
            spec.activation = Activation::sigmoid_fn;
        else if (act == "identity")
            spec.activation = Activation::identity;
        else
            throw ConfigError("unknown activation '" + act + "'");
        spec.validate();
        std::size_t n_data = cfg.value("n_data", 16);
        Rng data_rng = Rng(master_seed).child(0xDA7A);
        Dataset data = make_desk_dataset(n_data, spec.input_dim, data_rng);
        Vec w0 = init_weights(spec, Rng(master_seed).child(0x1A17).seed());
        std::string labels = cfg.value("labels", std::string("alternating"));
        if (labels == "planted") {
            for (std::size_t i = 0; i < data.size(); ++i)
                data.labels[i] = forward(spec, w0, data.input(i));
        } else if (labels != "alternating") {
            throw ConfigError("labels must be 'alternating' or 'planted'");
        }
        out.anchor = w0;
        out.net_spec = spec;
        out.dataset = data;
        out.problem = std::make_unique<NNProblem>(spec, w0, std::move(data));
    } else {
        throw ConfigError("unknown problem kind '" + kind + "'");
    }
    return out;
}

inline RegionSpec build_region(const json& cfg, const BuiltProblem& built) {
    detail::reject_unknown_keys(cfg, {"kind", "center", "radius"}, "region");
    std::string kind = cfg.value("kind", std::string("ball"));
    double radius = cfg.value("radius", 1.0);
    Vec center;
    if (!cfg.contains("center") || cfg.at("center") == "anchor") {
        center = built.anchor;
    } else if (cfg.at("center") == "origin") {
        center = Vec(built.problem->dim(), 0.0);
    } else {
        center = detail::to_vec(cfg.at("center"), "region.center");
    }
    RegionSpec region = (kind == "tube") ? RegionSpec::tube(radius, center)
                                         : RegionSpec::ball(std::move(center), radius);
    if (kind != "tube" && kind != "ball") throw ConfigError("region kind must be ball or tube");
    region.validate(*built.problem);
    return region;
}

// ---------------------------------------------------------------------------
// Run records and serialization.
// ---------------------------------------------------------------------------

struct CheckResult {
    std::string name;
    bool pass = false;
    double value = 0.0;
    double threshold = 0.0;
};

struct RunRecord {
    std::string config_hash;
    std::string tool_version = kToolVersion;
    double wall_time_s = 0.0;
    std::uint64_t seed = 0;
    std::string kind;
    json outputs = json::object();
    std::vector<CheckResult> checks;
    std::string run_dir;

    bool all_pass() const {
        for (const auto& c : checks)
            if (!c.pass) return false;
        return true;
    }

    json to_json() const {
        json j;
        j["schema_version"] = kSummarySchemaVersion;
        j["config_hash"] = config_hash;
        j["tool_version"] = tool_version;
        j["wall_time_s"] = wall_time_s;
        j["seed"] = seed;
        j["experiment"] = kind;
        j["outputs"] = outputs;
        json checks_json = json::array();
        for (const auto& c : checks)
            checks_json.push_back({{"name", c.name},
                                   {"pass", c.pass},
                                   {"value", c.value},
                                   {"threshold", c.threshold}});
        j["checks"] = checks_json;
        return j;
    }
};

inline json estimate_to_json(const Estimate& e) {
    json j;
    j["value"] = e.value;
    j["n_valid"] = e.n_valid;
    j["n_probes"] = e.n_probes;
    json pts = json::array();
    for (const auto& p : e.witness.points) pts.push_back(p);
    j["witness"] = pts;
    if (e.witness.sample_index) j["witness_sample"] = *e.witness.sample_index;
    return j;
}

inline json report_to_json(const RegularityReport& r) {
    json j;
    if (r.alpha_pl) j["alpha_pl"] = estimate_to_json(*r.alpha_pl);
    if (r.alpha_qg) j["alpha_qg"] = estimate_to_json(*r.alpha_qg);
    if (r.theta_aiming) j["theta_aiming"] = estimate_to_json(*r.theta_aiming);
    if (r.rho_uniform) j["rho_uniform"] = estimate_to_json(*r.rho_uniform);
    if (r.beta_sample) j["beta_sample"] = estimate_to_json(*r.beta_sample);
    if (r.beta_bar_full) j["beta_bar_full"] = estimate_to_json(*r.beta_bar_full);
    if (r.strong_growth_B) j["strong_growth_B"] = *r.strong_growth_B;
    j["region"] = {{"kind", r.region.kind == RegionSpec::Kind::ball ? "ball" : "tube"},
                   {"radius", r.region.radius}};
    j["n_probes"] = r.n_probes;
    return j;
}

// ---------------------------------------------------------------------------
// Command drivers. Each returns a RunRecord; persist() writes the summary
// JSON and any CSVs into out_dir/<config-hash>/.
// ---------------------------------------------------------------------------

namespace detail {

struct Stopwatch {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

inline EstimatorOptions estimator_options(const json& cfg) {
    reject_unknown_keys(cfg, {"n_probes", "quorum", "n_solutions", "estimates", "uniform_theta"},
                        "estimator");
    EstimatorOptions opts;
    opts.n_probes = cfg.value("n_probes", 1024);
    opts.quorum = cfg.value("quorum", 32);
    opts.n_solutions = cfg.value("n_solutions", 64);
    return opts;
}

}  // namespace detail

inline RunRecord cmd_verify(const ExperimentConfig& cfg) {
    detail::Stopwatch clock;
    RunRecord rec;
    rec.kind = cfg.kind;
    rec.seed = cfg.seed;
    rec.config_hash = config_hash(cfg.raw);

    BuiltProblem built = build_problem(cfg.section("problem"), cfg.seed);
    RegionSpec region = build_region(cfg.section("region"), built);
    const json& est_cfg = cfg.section("estimator");
    EstimatorOptions opts = detail::estimator_options(est_cfg);

    std::vector<std::string> wanted =
        est_cfg.value("estimates", std::vector<std::string>{"pl", "qg", "aiming",
                                                            "uniform_aiming", "beta",
                                                            "beta_bar"});
    const StochasticProblem& prob = *built.problem;
    bool has_proj = prob.has_projector();
    RegularityReport report;
    report.region = region;
    report.n_probes = opts.n_probes;

    Rng master(cfg.seed);
    auto stream = [&](std::uint64_t tag) { return master.child(tag); };

    for (const std::string& name : wanted) {
        if (name == "pl") {
            Rng r = stream(1);
            report.alpha_pl = estimate_pl(prob, region, opts, r);
        } else if (name == "qg") {
            Rng r = stream(2);
            report.alpha_qg = estimate_qg(prob, region, opts, r);
        } else if (name == "aiming") {
            Rng r = stream(3);
            report.theta_aiming = estimate_aiming(prob, region, opts, r);
        } else if (name == "uniform_aiming") {
            double theta = est_cfg.value("uniform_theta", 1.0);
            Rng r = stream(4);
            report.rho_uniform = estimate_uniform_aiming(prob, region, theta, opts, r);
        } else if (name == "beta") {
            Rng r = stream(5);
            report.beta_sample = estimate_sample_beta(prob, region, opts, r);
        } else if (name == "beta_bar") {
            Rng r = stream(6);
            report.beta_bar_full = estimate_full_beta(prob, region, opts, r);
        } else if (name == "strong_growth") {
            Rng r = stream(7);
            for (int attempt = 0; attempt < 64; ++attempt) {
                Vec w = sample_in_region(prob, region, r);
                try {
                    report.strong_growth_B = strong_growth_ratio(prob, w);
                    break;
                } catch (const DegenerateGradient&) {
                } catch (const Error&) {
                    break;
                }
            }
        } else {
            throw ConfigError("unknown estimate '" + name + "'");
        }
    }
    (void)has_proj;
    rec.outputs["regularity"] = report_to_json(report);

    // built-in checks: quorum reached and witnesses reproduce their constants
    auto check_estimate = [&](const char* name, const Estimate& e, double reproduced) {
        double rel = std::abs(reproduced - e.value) / std::max(1e-300, std::abs(e.value));
        rec.checks.push_back({std::string(name) + "_witness", rel <= 1e-8, rel, 1e-8});
    };
    if (report.alpha_pl)
        check_estimate("alpha_pl", *report.alpha_pl,
                       pl_ratio(prob, report.alpha_pl->witness.points[0]));
    if (report.alpha_qg)
        check_estimate("alpha_qg", *report.alpha_qg,
                       qg_ratio(prob, report.alpha_qg->witness.points[0]));
    if (report.theta_aiming)
        check_estimate("theta_aiming", *report.theta_aiming,
                       aiming_ratio(prob, report.theta_aiming->witness.points[0]));
    if (report.rho_uniform && report.rho_uniform->value > 0)
        check_estimate("rho_uniform", *report.rho_uniform,
                       uniform_aiming_deficit(prob, est_cfg.value("uniform_theta", 1.0),
                                              report.rho_uniform->witness.points[0],
                                              report.rho_uniform->witness.points[1]));

    rec.wall_time_s = clock.seconds();
    return rec;
}

namespace detail {

// Start point at a prescribed distance from S (projector problems) or at a
// prescribed offset from the anchor.
inline Vec resolve_start(const StochasticProblem& prob, const Vec& anchor, const json& sgd_cfg,
                         double radius, Rng& rng) {
    if (sgd_cfg.contains("init_dist_scale")) {
        double scale = sgd_cfg.at("init_dist_scale").get<double>();
        if (!prob.has_projector())
            throw MissingProjector("init_dist_scale needs a projector");
        Vec probe = anchor;
        axpy(1.0, rng.on_sphere(prob.dim()), probe);
        Vec proj = prob.project(probe);
        Vec u = sub(probe, proj);
        double nu = norm2(u);
        if (nu == 0.0) throw Error("degenerate start direction");
        Vec w0 = proj;
        axpy(scale * radius / nu, u, w0);
        return w0;
    }
    if (sgd_cfg.contains("init_offset")) {
        Vec w0 = anchor;
        axpy(sgd_cfg.at("init_offset").get<double>(), rng.on_sphere(prob.dim()), w0);
        return w0;
    }
    return anchor;
}

}  // namespace detail

// CSV payloads waiting for persist(); a single writer per run.
inline std::vector<Trajectory>& trajectory_store() {
    static std::vector<Trajectory> store;
    return store;
}

inline RunRecord cmd_train(const ExperimentConfig& cfg) {
    detail::Stopwatch clock;
    RunRecord rec;
    rec.kind = cfg.kind;
    rec.seed = cfg.seed;
    rec.config_hash = config_hash(cfg.raw);

    BuiltProblem built = build_problem(cfg.section("problem"), cfg.seed);
    const StochasticProblem& prob = *built.problem;
    RegionSpec region = build_region(cfg.section("region"), built);

    const json& sgd_cfg = cfg.section("sgd");
    detail::reject_unknown_keys(
        sgd_cfg,
        {"eta", "eta_scale", "iters", "iters_bound", "batch", "record_every", "runs",
         "gd_comparator", "init_dist_scale", "init_offset"},
        "sgd");

    // measured constants drive relative stepsizes, budgets, and rate checks
    EstimatorOptions opts = detail::estimator_options(cfg.section("estimator"));
    Rng master(cfg.seed);
    std::optional<double> alpha_hat, theta_hat, rho_hat;
    double beta_hat = 1.0;
    bool have_constants = false;
    {
        Rng r = master.child(11);
        beta_hat = estimate_sample_beta(prob, region, opts, r).value;
        if (prob.has_projector()) {
            Rng r2 = master.child(12);
            alpha_hat = estimate_qg(prob, region, opts, r2).value;
            Rng r3 = master.child(13);
            theta_hat = estimate_aiming(prob, region, opts, r3).value;
            Rng r4 = master.child(14);
            rho_hat =
                estimate_uniform_aiming(prob, region, std::min(*theta_hat, 1.0), opts, r4).value;
            have_constants = true;
        }
    }

    double eta;
    if (sgd_cfg.contains("eta"))
        eta = sgd_cfg.at("eta").get<double>();
    else
        eta = sgd_cfg.value("eta_scale", 0.5) / beta_hat;

    std::size_t iters;
    if (sgd_cfg.contains("iters_bound")) {
        const json& b = sgd_cfg.at("iters_bound");
        detail::reject_unknown_keys(b, {"eps", "delta2", "multiplier"}, "sgd.iters_bound");
        if (!have_constants) throw MissingProjector("iters_bound needs measured constants");
        iters = static_cast<std::size_t>(
            b.value("multiplier", 1.0) *
            static_cast<double>(iteration_bound(*alpha_hat, *theta_hat, beta_hat, eta,
                                                b.at("eps").get<double>(),
                                                b.at("delta2").get<double>())));
    } else {
        iters = sgd_cfg.value("iters", 1000);
    }

    SGDConfig run_cfg;
    run_cfg.eta = eta;
    run_cfg.iters = std::max<std::size_t>(iters, 1);
    run_cfg.batch = sgd_cfg.value("batch", 1);
    run_cfg.record_every = sgd_cfg.value("record_every", 1);
    if (theta_hat) {
        run_cfg.theta = theta_hat;
        run_cfg.beta = beta_hat;
    }

    // independent runs: per-run derived streams, so the worker count set via
    // SGDLAB_THREADS never changes the numbers
    const std::size_t runs = sgd_cfg.value("runs", 1);
    std::vector<Trajectory> trajectories(runs);
    parallel_for_index(runs, [&](std::size_t i) {
        Rng seed_rng = master.child(1000 + i);
        Vec w0 = detail::resolve_start(prob, built.anchor, sgd_cfg, region.radius, seed_rng);
        SGDConfig c = run_cfg;
        c.seed = seed_rng.child(1).seed();
        c.monitors.push_back(RegionSpec::ball(w0, region.radius));
        trajectories[i] = run_sgd(prob, w0, c);
    });
    bool any_diverged = false;
    json run_summaries = json::array();
    Vec first_start;
    for (std::size_t i = 0; i < runs; ++i) {
        const Trajectory& traj = trajectories[i];
        if (i == 0) first_start = traj.monitors[0].center;  // the run's start point
        any_diverged = any_diverged || traj.diverged;
        json s;
        s["seed"] = traj.seed;
        s["initial_loss"] = traj.initial_loss;
        s["final_loss"] = traj.points.back().loss;
        if (traj.points.back().dist) s["final_dist"] = *traj.points.back().dist;
        s["diverged"] = traj.diverged;
        s["stepsize_valid"] = traj.stepsize_valid;
        s["escaped"] = traj.escape_time[0].has_value();
        run_summaries.push_back(s);
    }

    json out;
    out["eta"] = eta;
    out["iters"] = run_cfg.iters;
    out["beta_hat"] = beta_hat;
    if (alpha_hat) out["alpha_hat"] = *alpha_hat;
    if (theta_hat) out["theta_hat"] = *theta_hat;
    if (rho_hat) out["rho_hat"] = *rho_hat;
    out["runs"] = run_summaries;
    out["stepsize_warning"] = theta_hat ? !(eta < *theta_hat / beta_hat) : false;

    // rate fit on the first run, against the theoretical factor
    const Trajectory& lead = trajectories.front();
    FitQuantity q = prob.has_projector() ? FitQuantity::dist2 : FitQuantity::loss;
    try {
        auto window = default_fit_window(lead, q);
        RateFit fit = fit_rate(lead, q, window);
        out["fit"] = {{"per_step_factor", fit.per_step_factor},
                      {"r_squared", fit.r_squared},
                      {"window", {fit.window.first, fit.window.second}},
                      {"quantity", q == FitQuantity::loss ? "loss" : "dist2"},
                      {"n_points", fit.n_points}};
        if (have_constants && eta < *theta_hat / beta_hat) {
            double qf = theoretical_factor(*alpha_hat, *theta_hat, beta_hat, eta);
            out["theoretical_factor"] = qf;
            rec.checks.push_back(
                {"fit_factor_dominated", fit.per_step_factor <= qf + 0.02,
                 fit.per_step_factor, qf + 0.02});
        }
    } catch (const InsufficientData&) {
        out["fit"] = nullptr;
    }

    if (run_summaries.size() > 1 && have_constants && rho_hat && theta_hat) {
        EscapeTheory th;
        th.rho = *rho_hat;
        th.theta = *theta_hat;
        th.beta = beta_hat;
        th.eta = eta;
        th.alpha = *alpha_hat;
        th.radius = region.radius;
        th.delta1 = sgd_cfg.value("init_dist_scale", 0.1);
        auto tally = escape_tally(trajectories, 0, th);
        double sigma = std::sqrt(std::max(tally.bound * (1 - tally.bound), 1e-12) /
                                 static_cast<double>(tally.n_runs));
        out["escape"] = {{"empirical", tally.empirical}, {"bound", tally.bound}};
        rec.checks.push_back({"escape_within_bound",
                              tally.empirical <= tally.bound + 3.0 * sigma, tally.empirical,
                              tally.bound + 3.0 * sigma});
    }

    // rates-summary block: empirical decay of the lead run against the
    // closed-form table rates from the measured constants
    if (have_constants && !lead.points.empty()) {
        double kappa = beta_hat / *alpha_hat;
        Rng rb = master.child(15);
        double beta_bar = estimate_full_beta(prob, region, opts, rb).value;
        double kappa_bar = beta_bar / *alpha_hat;
        std::optional<double> b_growth;
        try {
            b_growth = strong_growth_ratio(prob, first_start);
        } catch (const Error&) {
        }
        json rows = json::array();
        double base = 0.0;
        for (const auto& p : lead.points) {
            double v = p.dist ? (*p.dist) * (*p.dist) : p.loss;
            if (p.t == 0) base = std::max(v, kEpsFloor);
            auto rates = table1_rates(kappa, kappa_bar, b_growth.value_or(1.0), *theta_hat,
                                      static_cast<double>(p.t));
            rows.push_back({{"t", p.t},
                            {"empirical", v / base},
                            {"this_work", rates.this_work},
                            {"pl_small_step", rates.pl_small_step},
                            {"strong_growth", rates.strong_growth}});
        }
        json summary{{"kappa", kappa}, {"kappa_bar", kappa_bar}, {"rows", rows}};
        if (b_growth) summary["B"] = *b_growth;
        out["rates_comparison"] = summary;
    }

    // optional full-batch comparator with the identical stepsize
    if (sgd_cfg.value("gd_comparator", false)) {
        Trajectory gd = run_gd(prob, first_start, eta, run_cfg.iters, {}, run_cfg.record_every);
        json g;
        g["final_loss"] = gd.points.back().loss;
        g["diverged"] = gd.diverged;
        try {
            RateFit gfit = fit_rate(gd, FitQuantity::loss, default_fit_window(gd, FitQuantity::loss));
            g["fit_factor"] = gfit.per_step_factor;
        } catch (const InsufficientData&) {
        }
        out["gd"] = g;
        trajectories.push_back(std::move(gd));
    }

    rec.checks.push_back({"no_divergence", !any_diverged, any_diverged ? 1.0 : 0.0, 0.0});
    rec.outputs["train"] = out;
    rec.wall_time_s = clock.seconds();

    // trajectories ride along for persist()
    rec.outputs["n_trajectories"] = trajectories.size();
    trajectory_store() = std::move(trajectories);
    return rec;
}

inline RunRecord cmd_contraction(const ExperimentConfig& cfg) {
    detail::Stopwatch clock;
    RunRecord rec;
    rec.kind = cfg.kind;
    rec.seed = cfg.seed;
    rec.config_hash = config_hash(cfg.raw);

    BuiltProblem built = build_problem(cfg.section("problem"), cfg.seed);
    const StochasticProblem& prob = *built.problem;
    RegionSpec region = build_region(cfg.section("region"), built);
    const json& c = cfg.section("contraction");
    detail::reject_unknown_keys(c, {"n_probes", "eta_scales"}, "contraction");
    const std::size_t n_probes = c.value("n_probes", 50);
    std::vector<double> eta_scales = c.value("eta_scales", std::vector<double>{0.1, 0.3, 0.5});

    EstimatorOptions opts = detail::estimator_options(cfg.section("estimator"));
    Rng master(cfg.seed);
    Rng r1 = master.child(1), r2 = master.child(2), r3 = master.child(3);
    double alpha = estimate_qg(prob, region, opts, r1).value;
    double theta = estimate_aiming(prob, region, opts, r2).value;
    double beta = estimate_sample_beta(prob, region, opts, r3).value;

    json sweeps = json::array();
    bool all_ok = true;
    double worst_slack = -1e300;
    Rng probe_rng = master.child(4);
    std::vector<Vec> probes;
    while (probes.size() < n_probes) {
        Vec w = sample_in_region(prob, region, probe_rng);
        if (prob.full_loss(w) >= kEpsFloor) probes.push_back(std::move(w));
    }
    for (double scale : eta_scales) {
        double eta = scale / beta;
        double bound = 1.0 - alpha * eta * (theta - beta * eta);
        double worst = -1e300;
        for (const Vec& w : probes) {
            double ratio = one_step_contraction_exact(prob, w, eta);
            worst = std::max(worst, ratio - bound);
        }
        all_ok = all_ok && worst <= 1e-6;
        worst_slack = std::max(worst_slack, worst);
        sweeps.push_back({{"eta", eta}, {"bound", bound}, {"worst_excess", worst}});
    }
    rec.outputs["contraction"] = {{"alpha_hat", alpha}, {"theta_hat", theta},
                                  {"beta_hat", beta},   {"sweeps", sweeps}};
    rec.checks.push_back({"exact_contraction_bounded", all_ok, worst_slack, 1e-6});
    rec.wall_time_s = clock.seconds();
    return rec;
}

inline RunRecord cmd_width_scan(const ExperimentConfig& cfg) {
    detail::Stopwatch clock;
    RunRecord rec;
    rec.kind = cfg.kind;
    rec.seed = cfg.seed;
    rec.config_hash = config_hash(cfg.raw);

    const json& ws = cfg.section("width_scan");
    detail::reject_unknown_keys(ws,
                                {"widths", "hidden_layers", "input_dim", "n_data", "radius",
                                 "pl_probes", "opnorm_tol", "opnorm_max_iter"},
                                "width_scan");
    std::vector<std::size_t> widths =
        ws.value("widths", std::vector<std::size_t>{64, 128, 256, 512, 1024, 2048});
    const std::size_t layers = ws.value("hidden_layers", 1);
    const std::size_t input_dim = ws.value("input_dim", 32);
    const std::size_t n_data = ws.value("n_data", 16);
    const double radius = ws.value("radius", 1.0);
    const std::size_t pl_probes = ws.value("pl_probes", 128);
    const double tol = ws.value("opnorm_tol", 1e-7);
    const std::size_t max_iter = ws.value("opnorm_max_iter", 400);

    Rng master(cfg.seed);
    Rng data_rng = master.child(0xDA7A);
    Dataset data = make_desk_dataset(n_data, input_dim, data_rng);

    json rows = json::array();
    std::vector<double> log_m, log_norm;
    bool lambda_all_positive = true;
    double last_pl = 0.0, last_lambda_scaled = 0.0;
    for (std::size_t m : widths) {
        NetworkSpec spec;
        spec.input_dim = input_dim;
        spec.hidden.assign(layers, m);
        Vec w0 = init_weights(spec, master.child(0x1A17).seed());
        auto opnorm = hessian_opnorm(spec, w0, data.input(0), tol, max_iter);
        Matrix k = ntk_assemble(spec, w0, data);
        double lambda_raw = min_eig(k, 1e-10);
        // kernel of the residual map F with 1/2||F||^2 = (1/n) sum (f-y)^2
        double lambda_scaled = 2.0 * lambda_raw / static_cast<double>(n_data);
        lambda_all_positive = lambda_all_positive && lambda_raw > 0.0;

        NNProblem nn(spec, w0, data);
        EstimatorOptions opts;
        opts.n_probes = pl_probes;
        opts.quorum = std::min<std::size_t>(32, pl_probes);
        Rng pl_rng = master.child(0x9120 + m);
        double pl = estimate_pl(nn, RegionSpec::ball(w0, radius), opts, pl_rng).value;

        rows.push_back({{"m", m},
                        {"hessian_opnorm", opnorm.value},
                        {"opnorm_converged", opnorm.converged},
                        {"lambda0", lambda_raw},
                        {"lambda0_scaled", lambda_scaled},
                        {"pl_estimate", pl}});
        log_m.push_back(std::log(static_cast<double>(m)));
        log_norm.push_back(std::log(std::max(opnorm.value, 1e-300)));
        last_pl = pl;
        last_lambda_scaled = lambda_scaled;
    }

    // least-squares slope of log ||H|| against log m
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < log_m.size(); ++i) {
        mx += log_m[i];
        my += log_norm[i];
    }
    mx /= log_m.size();
    my /= log_m.size();
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < log_m.size(); ++i) {
        sxx += (log_m[i] - mx) * (log_m[i] - mx);
        sxy += (log_m[i] - mx) * (log_norm[i] - my);
    }
    double slope = sxy / sxx;

    rec.outputs["width_scan"] = {{"rows", rows}, {"slope", slope}};
    rec.checks.push_back({"slope_in_band", slope >= -0.65 && slope <= -0.35, slope, -0.5});
    rec.checks.push_back(
        {"ntk_positive", lambda_all_positive, lambda_all_positive ? 1.0 : 0.0, 1.0});
    rec.checks.push_back({"pl_vs_lambda0", last_pl >= 0.3 * last_lambda_scaled, last_pl,
                          0.3 * last_lambda_scaled});
    rec.wall_time_s = clock.seconds();
    return rec;
}

inline RunRecord cmd_boost(const ExperimentConfig& cfg) {
    detail::Stopwatch clock;
    RunRecord rec;
    rec.kind = cfg.kind;
    rec.seed = cfg.seed;
    rec.config_hash = config_hash(cfg.raw);

    BuiltProblem built = build_problem(cfg.section("problem"), cfg.seed);
    const StochasticProblem& prob = *built.problem;
    if (!prob.has_projector())
        throw MissingProjector("the boost experiment plants candidates via the projector");

    const json& bc = cfg.section("boost");
    detail::reject_unknown_keys(
        bc, {"k", "m", "lambda", "eps", "tau", "repetitions", "bad_scale", "good_scale"},
        "boost");
    const std::size_t k = bc.value("k", 16);
    const double lambda = bc.value("lambda", 2.0);
    const double eps = bc.value("eps", 1e-3);
    const double tau = bc.value("tau", 0.5);
    const std::size_t reps = bc.value("repetitions", 200);
    const double good_scale = bc.value("good_scale", 0.5);
    const double bad_scale = bc.value("bad_scale", 10.0);

    Rng master(cfg.seed);
    auto point_at_loss = [&](Rng& rng, double target) {
        for (int attempt = 0; attempt < 64; ++attempt) {
            Vec from = rng.normal_vec(prob.dim());
            Vec proj = prob.project(from);
            Vec u = sub(from, proj);
            Vec probe = add(proj, u);
            double base = prob.full_loss(probe);
            if (base < kEpsFloor) continue;
            double s = std::sqrt(target / base);
            return add(proj, scaled(u, s));
        }
        throw Error("could not plant a candidate at the target loss");
    };

    // small-ball constants measured on a representative unit-loss point
    Rng sb_rng = master.child(1);
    Vec probe = point_at_loss(sb_rng, 1.0);
    auto sb = small_ball_estimate(prob, probe, tau, 2000, sb_rng);
    auto [c1, c2] = bernstein_constants(sb.tau, sb.p_hat);
    std::size_t m = bc.value("m", 0);
    if (m == 0)
        m = static_cast<std::size_t>(std::ceil(std::log(20.0 * static_cast<double>(k)) / c2));
    double bound = rejection_success_bound(k, m, lambda, c2);

    std::size_t success = 0;
    json last = json::object();
    for (std::size_t rep = 0; rep < reps; ++rep) {
        Rng rep_rng = master.child(100 + rep);
        std::vector<Vec> cands;
        cands.reserve(k);
        for (std::size_t i = 0; i < k; ++i) {
            double target = (i % 2 == 0) ? good_scale * eps : bad_scale * lambda * eps / c1;
            cands.push_back(point_at_loss(rep_rng, target));
        }
        auto res = rejection_sample(prob, cands, m, lambda, eps, rep_rng, c2);
        bool ok = !res.empty();
        for (std::size_t i : res.admissible)
            ok = ok && prob.full_loss(cands[i]) <= lambda * eps / c1 + 1e-12;
        if (ok) ++success;
        if (rep + 1 == reps) {
            last["admissible"] = res.admissible;
            last["empirical_means"] = res.empirical_means;
            if (res.chosen) last["chosen"] = *res.chosen;
            last["success_bound"] = res.success_bound ? json(*res.success_bound) : json();
        }
    }
    double freq = static_cast<double>(success) / static_cast<double>(reps);
    double sigma = std::sqrt(std::max(freq * (1 - freq), 0.25 / static_cast<double>(reps)) /
                             static_cast<double>(reps));

    rec.outputs["boost"] = {{"tau", sb.tau},
                            {"p_hat", sb.p_hat},
                            {"c1", c1},
                            {"c2", c2},
                            {"k", k},
                            {"m", m},
                            {"lambda", lambda},
                            {"eps", eps},
                            {"success_frequency", freq},
                            {"lemma_bound", bound},
                            {"last_repetition", last}};
    rec.checks.push_back(
        {"boost_success_frequency", freq >= bound - 3.0 * sigma, freq, bound - 3.0 * sigma});
    rec.wall_time_s = clock.seconds();
    return rec;
}

inline std::vector<ChainSpec> default_chain_grid() {
    std::vector<ChainSpec> grid;
    for (double q : {0.75, 0.9}) {
        for (int noise = 0; noise < 3; ++noise) {
            for (double zeta : {0.0, 0.001}) {
                ChainSpec spec;
                spec.q = q;
                spec.u0 = 1.0;
                spec.threshold = 10.0;
                spec.zeta = zeta;
                spec.horizon = 120;
                spec.trials = 10000;
                if (noise == 1) {
                    spec.xi.kind = MultNoise::Kind::two_point;
                    spec.xi.a = 0.0;  // {0, 2}
                } else if (noise == 2) {
                    spec.xi.kind = MultNoise::Kind::uniform;
                    spec.xi.a = 1.0;  // [0, 2]
                }
                if (zeta > 0) {
                    spec.eta_noise.kind = MultNoise::Kind::uniform;
                    spec.eta_noise.a = 0.5;
                }
                grid.push_back(spec);
            }
        }
    }
    return grid;
}

struct StoptimeRow {
    std::size_t spec_index = 0;
    StopBoundCheck stop;
    std::optional<ContractionBoundCheck> contraction;
};

inline RunRecord cmd_stoptime(const ExperimentConfig& cfg) {
    detail::Stopwatch clock;
    RunRecord rec;
    rec.kind = cfg.kind;
    rec.seed = cfg.seed;
    rec.config_hash = config_hash(cfg.raw);

    const json& sc = cfg.section("stoptime");
    detail::reject_unknown_keys(sc, {"eps", "delta1", "delta2", "t_check"}, "stoptime");
    const double eps = sc.value("eps", 0.01);
    const double delta1 = sc.value("delta1", 0.1);
    const double delta2 = sc.value("delta2", 0.1);

    std::vector<ChainSpec> grid = default_chain_grid();
    Rng master(cfg.seed);
    json rows = json::array();
    json curves = json::array();
    bool all_pass = true;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        ChainSpec spec = grid[i];
        std::size_t t_check = sc.value("t_check", spec.horizon);
        Rng r1 = master.child(2 * i);
        StopBoundCheck stop = check_stop_bound(spec, t_check, r1);
        json row{{"spec", i},
                 {"q", spec.q},
                 {"zeta", spec.zeta},
                 {"stop_empirical", stop.empirical},
                 {"stop_bound", stop.bound},
                 {"stop_pass", stop.pass}};
        all_pass = all_pass && stop.pass;
        if (spec.q < 1.0 && spec.zeta == 0.0) {
            ChainSpec edge = spec;
            edge.u0 = delta1 * spec.threshold;  // precondition boundary
            Rng r2 = master.child(2 * i + 1);
            auto con = check_contraction_bound(edge, eps, delta1, delta2, r2);
            row["contraction_t"] = con.t_star;
            row["contraction_empirical"] = con.empirical;
            row["contraction_target"] = con.target;
            row["contraction_pass"] = con.pass;
            all_pass = all_pass && con.pass;
        }
        rows.push_back(row);

        // per-spec curve: empirical P(tau <= t) against the running bound
        Rng rc_ = master.child(2 * i);  // same stream as the check above
        ChainResult sim = simulate_chain(spec, rc_);
        json curve = json::array();
        double drift = 0.0;
        for (std::size_t t = 0; t <= spec.horizon; t += 5) {
            std::size_t stopped = 0;
            for (const auto& tau : sim.tau)
                if (tau && *tau <= t) ++stopped;
            curve.push_back(
                {{"t", t},
                 {"empirical", double(stopped) / double(spec.trials)},
                 {"bound", (spec.mean_u0() + drift) / spec.threshold}});
            for (std::size_t s = t; s < std::min(t + 5, spec.horizon); ++s)
                drift += spec.zeta_at(s);
        }
        curves.push_back(curve);
    }
    rec.outputs["stoptime"] = {{"grid_size", grid.size()}, {"rows", rows},
                               {"curves", curves}};
    rec.checks.push_back({"stoptime_grid", all_pass, all_pass ? 1.0 : 0.0, 1.0});
    rec.wall_time_s = clock.seconds();
    return rec;
}

inline RunRecord cmd_rates(const ExperimentConfig& cfg) {
    detail::Stopwatch clock;
    RunRecord rec;
    rec.kind = cfg.kind;
    rec.seed = cfg.seed;
    rec.config_hash = config_hash(cfg.raw);

    const json& rc = cfg.section("rates");
    detail::reject_unknown_keys(rc, {"kappa", "kappa_bar", "B", "theta", "t_max", "t_step"},
                                "rates");
    const double kappa = rc.value("kappa", 10.0);
    const double kappa_bar = rc.value("kappa_bar", 10.0);
    const double b_growth = rc.value("B", 10.0);
    const double theta = rc.value("theta", 1.0);
    const double t_max = rc.value("t_max", 100.0);
    const double t_step = rc.value("t_step", 1.0);

    json rows = json::array();
    bool monotone = true;
    Table1Rates prev;
    for (double t = 0.0; t <= t_max; t += t_step) {
        auto r = table1_rates(kappa, kappa_bar, b_growth, theta, t);
        rows.push_back({{"t", t},
                        {"this_work", r.this_work},
                        {"pl_small_step", r.pl_small_step},
                        {"strong_growth", r.strong_growth}});
        if (t > 0.0)
            monotone = monotone && r.this_work < prev.this_work &&
                       r.pl_small_step < prev.pl_small_step &&
                       r.strong_growth < prev.strong_growth;
        prev = r;
    }
    auto final_rates = table1_rates(kappa, kappa_bar, b_growth, theta, t_max);
    rec.outputs["rates"] = {{"rows", rows},
                            {"final", final_rates.as_map()},
                            {"dominates_pl", final_rates.crossover_pl_small_step == 0.0}};
    rec.checks.push_back({"rates_monotone", monotone, monotone ? 1.0 : 0.0, 1.0});
    bool expect_dom = theta * theta * kappa_bar > 1.0;
    rec.checks.push_back({"dominance_iff_theta2_kbar",
                          (final_rates.crossover_pl_small_step == 0.0) == expect_dom, 0.0, 0.0});
    rec.wall_time_s = clock.seconds();
    return rec;
}

inline RunRecord run_experiment(const ExperimentConfig& cfg) {
    if (cfg.kind == "verify") return cmd_verify(cfg);
    if (cfg.kind == "train") return cmd_train(cfg);
    if (cfg.kind == "contraction") return cmd_contraction(cfg);
    if (cfg.kind == "width-scan") return cmd_width_scan(cfg);
    if (cfg.kind == "boost") return cmd_boost(cfg);
    if (cfg.kind == "stoptime") return cmd_stoptime(cfg);
    if (cfg.kind == "rates") return cmd_rates(cfg);
    throw ConfigError("unknown experiment kind '" + cfg.kind + "'");
}

// Writes summary JSON plus per-run CSVs into out_dir/<config-hash>/.
inline std::string persist(const ExperimentConfig& cfg, RunRecord& rec) {
    namespace fs = std::filesystem;
    fs::path dir = fs::path(cfg.out_dir) / rec.config_hash;
    fs::create_directories(dir);

    if (rec.kind == "train" || rec.kind == "contraction") {
        auto& trajs = trajectory_store();
        for (std::size_t i = 0; i < trajs.size(); ++i) {
            fs::path p = dir / ("traj_" + std::to_string(i) + ".csv");
            write_trajectory_csv(trajs[i], p.string());
        }
        trajs.clear();
        if (rec.outputs.contains("train") &&
            rec.outputs["train"].contains("rates_comparison")) {
            std::ofstream os(dir / "rates_comparison.csv");
            os << "t,empirical,this_work,pl_small_step,strong_growth\n";
            for (const auto& row : rec.outputs["train"]["rates_comparison"]["rows"])
                os << row["t"].get<std::size_t>() << ','
                   << format_double(row["empirical"].get<double>()) << ','
                   << format_double(row["this_work"].get<double>()) << ','
                   << format_double(row["pl_small_step"].get<double>()) << ','
                   << format_double(row["strong_growth"].get<double>()) << '\n';
        }
    }
    if (rec.kind == "rates" && rec.outputs.contains("rates")) {
        std::ofstream os(dir / "rates.csv");
        os << "t,empirical,this_work,pl_small_step,strong_growth\n";
        for (const auto& row : rec.outputs["rates"]["rows"])
            os << row["t"].get<double>() << ",," << format_double(row["this_work"].get<double>()) << ','
               << format_double(row["pl_small_step"].get<double>()) << ','
               << format_double(row["strong_growth"].get<double>()) << '\n';
    }
    if (rec.kind == "width-scan" && rec.outputs.contains("width_scan")) {
        std::ofstream os(dir / "width_scan.csv");
        os << "m,hessian_opnorm,lambda0,lambda0_scaled,pl_estimate\n";
        for (const auto& row : rec.outputs["width_scan"]["rows"])
            os << row["m"].get<std::size_t>() << ',' << format_double(row["hessian_opnorm"].get<double>())
               << ',' << format_double(row["lambda0"].get<double>()) << ','
               << format_double(row["lambda0_scaled"].get<double>()) << ','
               << format_double(row["pl_estimate"].get<double>()) << '\n';
    }
    if (rec.kind == "stoptime" && rec.outputs.contains("stoptime")) {
        std::ofstream os(dir / "stoptime.csv");
        os << "spec,stop_empirical,stop_bound,contraction_empirical,contraction_target\n";
        for (const auto& row : rec.outputs["stoptime"]["rows"]) {
            os << row["spec"].get<std::size_t>() << ','
               << format_double(row["stop_empirical"].get<double>()) << ','
               << format_double(row["stop_bound"].get<double>()) << ',';
            if (row.contains("contraction_empirical"))
                os << format_double(row["contraction_empirical"].get<double>()) << ','
                   << format_double(row["contraction_target"].get<double>());
            else
                os << ',';
            os << '\n';
        }
        const auto& curves = rec.outputs["stoptime"]["curves"];
        for (std::size_t i = 0; i < curves.size(); ++i) {
            std::ofstream cs(dir / ("stoptime_spec" + std::to_string(i) + ".csv"));
            cs << "t,empirical,bound\n";
            for (const auto& pt : curves[i])
                cs << pt["t"].get<std::size_t>() << ','
                   << format_double(pt["empirical"].get<double>()) << ','
                   << format_double(pt["bound"].get<double>()) << '\n';
        }
    }

    rec.run_dir = dir.string();
    std::ofstream os(dir / "summary.json");
    if (!os) throw Error("cannot write summary JSON in " + dir.string());
    os << rec.to_json().dump(2) << '\n';
    return dir.string();
}

}  // namespace sgdlab
