#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace sgdlab {

// Ratios with a loss in the denominator are skipped below this floor;
// the regularity conditions are vacuous on the solution set.
inline constexpr double kEpsFloor = 1e-14;

inline bool is_finite(double x) { return std::isfinite(x); }

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MissingProjector : Error { using Error::Error; };
struct NonFiniteValue : Error { using Error::Error; };
struct NoValidProbe : Error { using Error::Error; };
struct NoSolutionInRegion : Error { using Error::Error; };
struct DegenerateGradient : Error { using Error::Error; };
struct DegeneratePoint : Error { using Error::Error; };
struct RadiusTooLarge : Error { using Error::Error; };
struct JacobianTooRough : Error { using Error::Error; };
struct RankDeficient : Error { using Error::Error; };
struct InvalidStepsize : Error { using Error::Error; };
struct InsufficientData : Error { using Error::Error; };
struct MonitorMissing : Error { using Error::Error; };
struct AllRejected : Error { using Error::Error; };
struct PreconditionViolated : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

struct NotConverged : Error {
    double last_estimate;
    explicit NotConverged(const std::string& what, double last)
        : Error(what), last_estimate(last) {}
};

// Worker count for embarrassingly parallel loops. Results never depend on it;
// every trial owns a derived RNG stream.
inline unsigned thread_count() {
    if (const char* env = std::getenv("SGDLAB_THREADS")) {
        long n = std::strtol(env, nullptr, 10);
        if (n >= 1) return static_cast<unsigned>(n);
    }
    return 1;
}

}  // namespace sgdlab

#include <future>
#include <vector>

namespace sgdlab {

// Index-parallel map with a deterministic, order-independent result layout.
template <typename Fn>
void parallel_for_index(std::size_t n, Fn&& fn) {
    unsigned workers = thread_count();
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    workers = std::min<std::size_t>(workers, n);
    std::vector<std::future<void>> futures;
    futures.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        futures.push_back(std::async(std::launch::async, [&, w] {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        }));
    }
    for (auto& f : futures) f.get();
}

}  // namespace sgdlab
