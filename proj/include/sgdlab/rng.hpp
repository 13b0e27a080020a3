#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "sgdlab/vec.hpp"

namespace sgdlab {

namespace detail {
// splitmix64 finalizer; used only to derive child stream seeds.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}
}  // namespace detail

// Deterministic RNG. mt19937_64 is fully specified by the standard and the
// transforms below avoid std::*_distribution, so streams are reproducible
// across platforms, not just across runs.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : gen_(seed), seed_(seed) {}

    std::uint64_t seed() const { return seed_; }

    // Child stream derivation rule: seed' = mix64(mix64(seed) ^ mix64(tag+1)).
    Rng child(std::uint64_t tag) const {
        return Rng(detail::mix64(detail::mix64(seed_) ^ detail::mix64(tag + 1)));
    }

    // [0, 1)
    double uniform01() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double a, double b) { return a + (b - a) * uniform01(); }

    std::size_t index(std::size_t n) {
        // modulo bias < 2^-40 for n below ~1e6; fine for sample counts here
        return static_cast<std::size_t>(gen_() % n);
    }

    // Box-Muller (cosine branch).
    double normal() {
        double u1 = 1.0 - uniform01();  // (0, 1]
        double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    Vec normal_vec(std::size_t d) {
        Vec v(d);
        for (auto& x : v) x = normal();
        return v;
    }

    Vec on_sphere(std::size_t d) {
        Vec v = normal_vec(d);
        double n = norm2(v);
        while (n == 0.0) {  // measure-zero, but be safe
            v = normal_vec(d);
            n = norm2(v);
        }
        for (auto& x : v) x /= n;
        return v;
    }

    // Exactly uniform in the ball: random direction, radius r*U^(1/d).
    Vec in_ball(const Vec& center, double radius) {
        std::size_t d = center.size();
        Vec v = on_sphere(d);
        double r = radius * std::pow(uniform01(), 1.0 / static_cast<double>(d));
        for (std::size_t i = 0; i < d; ++i) v[i] = center[i] + r * v[i];
        return v;
    }

private:
    std::mt19937_64 gen_;
    std::uint64_t seed_;
};

}  // namespace sgdlab
