#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "sgdlab/common.hpp"
#include "sgdlab/vec.hpp"

namespace sgdlab {

// Row-major dense matrix. Everything here runs on desk-scale dense problems
// (n up to a few dozen); no sparsity, no blocking.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Vec data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

inline Vec matvec(const Matrix& a, const Vec& x) {
    Vec y(a.rows, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols; ++j) s += a(i, j) * x[j];
        y[i] = s;
    }
    return y;
}

// A * A^T for row-major A.
inline Matrix gram_rows(const Matrix& a) {
    Matrix g(a.rows, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = i; j < a.rows; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * a(j, k);
            g(i, j) = s;
            g(j, i) = s;
        }
    }
    return g;
}

// Max row sum of |entries|; upper-bounds the spectral radius of a symmetric
// matrix (Gershgorin).
inline double inf_norm(const Matrix& a) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols; ++j) s += std::abs(a(i, j));
        m = std::max(m, s);
    }
    return m;
}

// Cholesky solve for SPD systems. Throws RankDeficient when a pivot
// collapses relative to the largest diagonal entry.
inline Vec cholesky_solve(Matrix a, Vec b) {
    const std::size_t n = a.rows;
    double max_diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, a(i, i));
    for (std::size_t j = 0; j < n; ++j) {
        double d = a(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
        if (!(d > 1e-12 * max_diag))
            throw RankDeficient("cholesky pivot collapsed at column " + std::to_string(j));
        d = std::sqrt(d);
        a(j, j) = d;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
            a(i, j) = s / d;
        }
    }
    // forward then backward substitution
    for (std::size_t i = 0; i < n; ++i) {
        double s = b[i];
        for (std::size_t k = 0; k < i; ++k) s -= a(i, k) * b[k];
        b[i] = s / a(i, i);
    }
    for (std::size_t ii = n; ii-- > 0;) {
        double s = b[ii];
        for (std::size_t k = ii + 1; k < n; ++k) s -= a(k, ii) * b[k];
        b[ii] = s / a(ii, ii);
    }
    return b;
}

struct PowerIterResult {
    double value = 0.0;   // |Rayleigh quotient| at the last iterate
    Vec vector;
    bool converged = false;
    std::size_t iters = 0;
};

// Power iteration on a symmetric operator given as a matvec callback.
// Stops when successive Rayleigh estimates differ by less than tol.
inline PowerIterResult power_iteration(const std::function<Vec(const Vec&)>& apply,
                                       Vec v0, double tol, std::size_t max_iter) {
    PowerIterResult res;
    double n0 = norm2(v0);
    if (n0 == 0.0) return res;
    for (auto& x : v0) x /= n0;
    double prev = 0.0;
    for (std::size_t it = 0; it < max_iter; ++it) {
        Vec av = apply(v0);
        double rayleigh = dot(v0, av);
        double an = norm2(av);
        res.value = std::abs(rayleigh);
        res.iters = it + 1;
        if (an == 0.0) {  // operator annihilates the iterate: eigenvalue 0
            res.value = 0.0;
            res.vector = v0;
            res.converged = true;
            return res;
        }
        for (auto& x : av) x /= an;
        v0 = std::move(av);
        if (it > 0 && std::abs(res.value - prev) < tol) {
            res.vector = v0;
            res.converged = true;
            return res;
        }
        prev = res.value;
    }
    res.vector = v0;
    return res;
}

// Deterministic, mildly irregular start vector for power iterations.
inline Vec power_start(std::size_t n) {
    Vec v(n);
    for (std::size_t i = 0; i < n; ++i)
        v[i] = 1.0 + 0.37 * std::sin(static_cast<double>(i) * 2.399963);
    return v;
}

// Smallest eigenvalue of a symmetric matrix via power iteration on
// shift*I - K, with the shift taken from the infinity-norm (Gershgorin)
// bound. Stops on the eigenpair residual ||Kv - lambda v|| <= tol*||K||.
inline double min_eig_sym(const Matrix& k, double tol, std::size_t max_iter = 100000) {
    const std::size_t n = k.rows;
    const double shift = inf_norm(k);
    if (shift == 0.0) return 0.0;
    Vec v = power_start(n);
    double nv = norm2(v);
    for (auto& x : v) x /= nv;
    double lam = 0.0;
    for (std::size_t it = 0; it < max_iter; ++it) {
        Vec kv = matvec(k, v);
        lam = dot(v, kv);  // Rayleigh quotient of K at the current iterate
        double resid = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double r = kv[i] - lam * v[i];
            resid += r * r;
        }
        if (std::sqrt(resid) <= tol * shift) return lam;
        // one shifted power step
        for (std::size_t i = 0; i < n; ++i) kv[i] = shift * v[i] - kv[i];
        double an = norm2(kv);
        if (an == 0.0) return lam;  // v is an exact eigenvector of K at `shift`
        for (std::size_t i = 0; i < n; ++i) v[i] = kv[i] / an;
    }
    throw NotConverged("min_eig power iteration stalled", lam);
}

inline double max_eig_sym(const Matrix& k, double tol, std::size_t max_iter = 100000) {
    const std::size_t n = k.rows;
    const double scale = inf_norm(k);
    if (scale == 0.0) return 0.0;
    Vec v = power_start(n);
    double nv = norm2(v);
    for (auto& x : v) x /= nv;
    double lam = 0.0;
    for (std::size_t it = 0; it < max_iter; ++it) {
        Vec kv = matvec(k, v);
        lam = dot(v, kv);
        double resid = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double r = kv[i] - lam * v[i];
            resid += r * r;
        }
        if (std::sqrt(resid) <= tol * scale) return std::abs(lam);
        double an = norm2(kv);
        if (an == 0.0) return 0.0;
        for (std::size_t i = 0; i < n; ++i) v[i] = kv[i] / an;
    }
    throw NotConverged("max_eig power iteration stalled", lam);
}

}  // namespace sgdlab
