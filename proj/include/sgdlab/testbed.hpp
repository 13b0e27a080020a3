#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include "sgdlab/linalg.hpp"
#include "sgdlab/problem.hpp"

namespace sgdlab {

// ---------------------------------------------------------------------------
// Cubic machinery for the parabola projection.
//
// The nearest point of {(x, a x^2)} to (u, v) has x solving
//   2 a^2 x^3 + (1 - 2 a v) x - u = 0.
// Solved by safeguarded bisection+Newton on each monotone interval; Cardano
// branches cancel catastrophically near triple roots.
// ---------------------------------------------------------------------------

namespace detail {

inline double cubic_refine(double a2, double p, double q, double lo, double hi) {
    // f(x) = a2*x^3 + p*x + q, monotone on [lo, hi] with a sign change.
    auto f = [&](double x) { return a2 * x * x * x + p * x + q; };
    double flo = f(lo);
    double x = 0.5 * (lo + hi);
    for (int it = 0; it < 200; ++it) {
        double fx = f(x);
        if (fx == 0.0) return x;
        if ((fx > 0) == (flo > 0)) {
            lo = x;
            flo = fx;
        } else {
            hi = x;
        }
        double d = 3.0 * a2 * x * x + p;
        double xn = (d != 0.0) ? x - fx / d : 0.5 * (lo + hi);
        if (!(xn > lo && xn < hi)) xn = 0.5 * (lo + hi);
        if (std::abs(xn - x) <= 1e-16 * (1.0 + std::abs(xn))) return xn;
        x = xn;
    }
    return x;
}

}  // namespace detail

/// All real roots of 2 a^2 x^3 + (1 - 2 a v) x - u = 0, ascending.
inline std::vector<double> parabola_projection_roots(double a, double u, double v) {
    const double a2 = 2.0 * a * a;
    const double p = 1.0 - 2.0 * a * v;
    const double q = -u;
    // Cauchy-style root bound for the monic form x^3 + (p/a2) x + (q/a2)
    const double bound = 1.0 + std::max(std::abs(p / a2), std::abs(q / a2));
    auto f = [&](double x) { return a2 * x * x * x + p * x + q; };

    std::vector<double> brackets;  // interval endpoints, monotone pieces
    if (p >= 0) {
        brackets = {-bound, bound};
    } else {
        double xc = std::sqrt(-p / (3.0 * a2));
        brackets = {-bound, -xc, xc, bound};
    }
    std::vector<double> roots;
    for (std::size_t i = 0; i + 1 < brackets.size(); ++i) {
        double lo = brackets[i], hi = brackets[i + 1];
        double flo = f(lo), fhi = f(hi);
        if (flo == 0.0) roots.push_back(lo);
        if ((flo > 0) != (fhi > 0)) roots.push_back(detail::cubic_refine(a2, p, q, lo, hi));
    }
    if (f(bound) == 0.0) roots.push_back(bound);
    std::sort(roots.begin(), roots.end());
    roots.erase(std::unique(roots.begin(), roots.end(),
                            [](double x, double y) { return std::abs(x - y) <= 1e-14 * (1.0 + std::abs(x)); }),
                roots.end());
    return roots;
}

/// Nearest point of the parabola {(x, a x^2)} to (u, v); ties broken toward
/// the root with the largest x.
inline std::pair<double, double> parabola_project(double a, double u, double v) {
    std::vector<double> roots = parabola_projection_roots(a, u, v);
    double best_x = roots.front();
    auto sq = [&](double x) {
        double dx = x - u, dy = a * x * x - v;
        return dx * dx + dy * dy;
    };
    double best = sq(best_x);
    for (std::size_t i = 1; i < roots.size(); ++i) {  // ascending: later = larger x
        double d = sq(roots[i]);
        double tol = 1e-12 * (1.0 + best);
        if (d <= best + tol) {
            best = std::min(best, d);
            best_x = roots[i];
        }
    }
    return {best_x, a * best_x * best_x};
}

struct QuasarWitness {
    Vec point;     // (0, gamma)
    double inner;  // <grad L(point), point - (x, a x^2)> = gamma^2 - gamma a x^2
};

/// Scans the supplied gamma grid for a point z = (0, gamma) witnessing the
/// failure of quasar-convexity relative to (x, a x^2): 0 < gamma < a x^2 and
/// the alignment gamma^2 - gamma a x^2 strictly negative.
inline std::optional<QuasarWitness> quasar_violation_witness(double a, double x,
                                                             const std::vector<double>& grid) {
    const double ax2 = a * x * x;
    for (double gamma : grid) {
        if (!(gamma > 0.0 && gamma < ax2)) continue;
        double inner = gamma * gamma - gamma * ax2;
        if (inner < 0.0) return QuasarWitness{Vec{0.0, gamma}, inner};
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Appendix-style single-sample parabola objective L(x,y) = 1/2 (y - a x^2)^2.
// ---------------------------------------------------------------------------
class ParabolaProblem final : public StochasticProblem {
public:
    explicit ParabolaProblem(double a) : a_(a) {}

    double curvature() const { return a_; }
    std::size_t dim() const override { return 2; }
    std::optional<std::size_t> sample_count() const override { return 1; }
    SampleId sample(Rng&) const override { return SampleId{}; }

    double loss(const Vec& w, const SampleId&) const override {
        double e = w[1] - a_ * w[0] * w[0];
        return 0.5 * e * e;
    }
    void grad(const Vec& w, const SampleId&, Vec& out) const override {
        double e = w[1] - a_ * w[0] * w[0];
        out[0] = -2.0 * a_ * w[0] * e;
        out[1] = e;
    }
    double full_loss(const Vec& w) const override { return loss(w, SampleId{}); }
    void full_grad(const Vec& w, Vec& out) const override { grad(w, SampleId{}, out); }

    bool has_projector() const override { return true; }
    Vec project(const Vec& w) const override {
        auto [x, y] = parabola_project(a_, w[0], w[1]);
        return Vec{x, y};
    }

private:
    double a_;
};

// ---------------------------------------------------------------------------
// Interpolating linear regression: n < d, full row rank, S = {w : Xw = y}.
// ---------------------------------------------------------------------------

/// Orthogonal projection onto {w : Xw = y}: w - X^T (X X^T)^{-1} (Xw - y).
/// Throws RankDeficient when cond(X X^T) > 1e12.
inline Vec regression_projector(const Matrix& x, const Vec& y, const Vec& w) {
    Matrix gram = gram_rows(x);
    double hi = max_eig_sym(gram, 1e-12);
    double lo;
    try {
        lo = min_eig_sym(gram, 1e-12);
    } catch (const NotConverged& e) {
        lo = e.last_estimate;
    }
    if (!(lo > 0.0) || hi / lo > 1e12)
        throw RankDeficient("X X^T condition number above 1e12");
    Vec r(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
        double s = -y[i];
        for (std::size_t j = 0; j < x.cols; ++j) s += x(i, j) * w[j];
        r[i] = s;
    }
    Vec s = cholesky_solve(gram, r);
    Vec out = w;
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < x.cols; ++j) out[j] -= x(i, j) * s[i];
    return out;
}

class InterpLinearRegression final : public StochasticProblem {
public:
    InterpLinearRegression(Matrix x, Vec y) : x_(std::move(x)), y_(std::move(y)) {
        gram_ = gram_rows(x_);
        double hi = max_eig_sym(gram_, 1e-12);
        double lo;
        try {
            lo = min_eig_sym(gram_, 1e-12);
        } catch (const NotConverged& e) {
            lo = e.last_estimate;
        }
        if (!(lo > 0.0) || hi / lo > 1e12)
            throw RankDeficient("regression design is rank deficient");
    }

    const Matrix& design() const { return x_; }
    const Vec& targets() const { return y_; }

    std::size_t dim() const override { return x_.cols; }
    std::optional<std::size_t> sample_count() const override { return x_.rows; }
    SampleId sample(Rng& rng) const override {
        SampleId z;
        z.index = rng.index(x_.rows);
        return z;
    }

    double residual(const Vec& w, std::size_t i) const {
        double s = -y_[i];
        for (std::size_t j = 0; j < x_.cols; ++j) s += x_(i, j) * w[j];
        return s;
    }

    double loss(const Vec& w, const SampleId& z) const override {
        double r = residual(w, z.index);
        return 0.5 * r * r;
    }
    void grad(const Vec& w, const SampleId& z, Vec& out) const override {
        double r = residual(w, z.index);
        for (std::size_t j = 0; j < x_.cols; ++j) out[j] = r * x_(z.index, j);
    }
    double full_loss(const Vec& w) const override {
        KahanSum s;
        for (std::size_t i = 0; i < x_.rows; ++i) {
            double r = residual(w, i);
            s.add(0.5 * r * r);
        }
        return s.value() / static_cast<double>(x_.rows);
    }

    bool has_projector() const override { return true; }
    Vec project(const Vec& w) const override {
        Vec r(x_.rows);
        for (std::size_t i = 0; i < x_.rows; ++i) r[i] = residual(w, i);
        Vec s = cholesky_solve(gram_, r);
        Vec out = w;
        for (std::size_t i = 0; i < x_.rows; ++i)
            for (std::size_t j = 0; j < x_.cols; ++j) out[j] -= x_(i, j) * s[i];
        return out;
    }

    /// max_i ||x_i||^2; the exact sample-gradient Lipschitz constant.
    double sample_smoothness() const {
        double m = 0.0;
        for (std::size_t i = 0; i < x_.rows; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < x_.cols; ++j) s += x_(i, j) * x_(i, j);
            m = std::max(m, s);
        }
        return m;
    }

    /// lambda_max(X^T X)/n = lambda_max(X X^T)/n; the full-gradient constant.
    double full_smoothness() const {
        return max_eig_sym(gram_, 1e-12) / static_cast<double>(x_.rows);
    }

    /// Smallest nonzero eigenvalue of X^T X / n; the exact quadratic-growth
    /// constant on the row space.
    double growth_constant() const {
        return min_eig_sym(gram_, 1e-12) / static_cast<double>(x_.rows);
    }

private:
    Matrix x_;
    Vec y_;
    Matrix gram_;
};

/// Default instance generator: rows i.i.d. uniform on the unit sphere
/// (so ||x_i|| <= C = 1) and targets from a planted solution.
inline InterpLinearRegression make_interp_regression(std::size_t n, std::size_t d, Rng& rng) {
    Matrix x(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        Vec row = rng.on_sphere(d);
        for (std::size_t j = 0; j < d; ++j) x(i, j) = row[j];
    }
    Vec planted = rng.normal_vec(d);
    Vec y(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += x(i, j) * planted[j];
        y[i] = s;
    }
    return InterpLinearRegression(std::move(x), std::move(y));
}

// ---------------------------------------------------------------------------
// Circles in the plane sharing common points; l(w,z) = 1/2 dist^2(w, Q_z)
// satisfies ||grad l||^2 = 2 l exactly away from the centers.
// ---------------------------------------------------------------------------
class ManifoldIntersection final : public StochasticProblem {
public:
    /// Builds circles through `common` with the given centers. The second
    /// intersection point of the first two circles is kept as a solution
    /// when it lies on every circle.
    ManifoldIntersection(Vec common, std::vector<Vec> centers)
        : centers_(std::move(centers)) {
        radii_.reserve(centers_.size());
        for (const auto& c : centers_) radii_.push_back(dist(common, c));
        solutions_.push_back(common);
        if (centers_.size() >= 2) {
            const Vec& c0 = centers_[0];
            const Vec& c1 = centers_[1];
            Vec u = sub(c1, c0);
            double n = norm2(u);
            if (n > 0) {
                for (auto& t : u) t /= n;
                double proj = (common[0] - c0[0]) * u[0] + (common[1] - c0[1]) * u[1];
                Vec q{c0[0] + proj * u[0], c0[1] + proj * u[1]};
                Vec mirror{2.0 * q[0] - common[0], 2.0 * q[1] - common[1]};
                bool on_all = dist(mirror, common) > 1e-9;
                for (std::size_t i = 0; i < centers_.size() && on_all; ++i)
                    on_all = std::abs(dist(mirror, centers_[i]) - radii_[i]) <= 1e-12;
                if (on_all) solutions_.push_back(mirror);
            }
        }
    }

    std::size_t dim() const override { return 2; }
    std::optional<std::size_t> sample_count() const override { return centers_.size(); }
    SampleId sample(Rng& rng) const override {
        SampleId z;
        z.index = rng.index(centers_.size());
        return z;
    }

    double loss(const Vec& w, const SampleId& z) const override {
        double g = dist(w, centers_[z.index]) - radii_[z.index];
        return 0.5 * g * g;
    }
    void grad(const Vec& w, const SampleId& z, Vec& out) const override {
        const Vec& c = centers_[z.index];
        double d = dist(w, c);
        if (d == 0.0) {  // projection cone apex; any subgradient works
            out[0] = out[1] = 0.0;
            return;
        }
        double g = (d - radii_[z.index]) / d;
        out[0] = g * (w[0] - c[0]);
        out[1] = g * (w[1] - c[1]);
    }
    double full_loss(const Vec& w) const override {
        KahanSum s;
        SampleId z;
        for (std::size_t i = 0; i < centers_.size(); ++i) {
            z.index = i;
            s.add(loss(w, z));
        }
        return s.value() / static_cast<double>(centers_.size());
    }

    bool has_projector() const override { return true; }
    Vec project(const Vec& w) const override {
        const Vec* best = &solutions_.front();
        double bd = dist2(w, *best);
        for (const auto& s : solutions_) {
            double d = dist2(w, s);
            if (d < bd) {
                bd = d;
                best = &s;
            }
        }
        return *best;
    }

    const std::vector<Vec>& solutions() const { return solutions_; }

private:
    std::vector<Vec> centers_;
    std::vector<double> radii_;
    std::vector<Vec> solutions_;
};

}  // namespace sgdlab
