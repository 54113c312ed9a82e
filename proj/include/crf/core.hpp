#pragma once

#include <algorithm>
#include <complex>
#include <cstddef>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace crf {

using cplx = std::complex<double>;

inline constexpr double pi = 3.14159265358979323846;

// ── Errors ───────────────────────────────────────────────────────────────────

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or non-finite input data.
class InvalidInput : public Error {
public:
    using Error::Error;
};

/// Run configuration out of range or unknown key (CLI exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Metric singular or not positive definite where a metric is required.
class DegenerateMetric : public Error {
public:
    DegenerateMetric(const std::string& what, std::size_t point)
        : Error(what), point_(point) {}
    std::size_t point() const { return point_; }

private:
    std::size_t point_;
};

/// ω̂_t + ddbar φ stopped being positive definite at some grid point.
class PositivityLoss : public Error {
public:
    PositivityLoss(std::size_t point, double eigenvalue)
        : Error("positivity lost at grid point " + std::to_string(point) +
                " (eigenvalue " + std::to_string(eigenvalue) + ")"),
          point_(point), eigenvalue_(eigenvalue) {}
    std::size_t point() const { return point_; }
    double eigenvalue() const { return eigenvalue_; }

private:
    std::size_t point_;
    double eigenvalue_;
};

/// Time step underflow during the flow.
class FlowBreakdown : public Error {
public:
    using Error::Error;
};

/// Background data violating its construction invariants.
class InvalidBackground : public Error {
public:
    InvalidBackground(const std::string& what, double measured = 0.0)
        : Error(what), measured_(measured) {}
    /// Scenario-specific measurement attached to the failure (e.g. κ_max).
    double measured() const { return measured_; }

private:
    double measured_;
};

/// Newton solver did not converge (CLI exit code 4).
class SolverFailure : public Error {
public:
    SolverFailure(const std::string& what, std::vector<double> history)
        : Error(what), history_(std::move(history)) {}
    const std::vector<double>& residual_history() const { return history_; }

private:
    std::vector<double> history_;
};

// ── Data parallelism ─────────────────────────────────────────────────────────

/// Width of data-parallel loops; CRF_THREADS caps it.
inline int thread_count() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw <= 0) hw = 1;
    if (const char* env = std::getenv("CRF_THREADS")) {
        int cap = std::atoi(env);
        if (cap >= 1) hw = std::min(hw, cap);
    }
    return hw;
}

/// Runs body(begin, end) over contiguous chunks of [0, n). Chunks write
/// disjoint outputs; reductions that need a fixed summation order must not
/// go through here.
template <class Body>
void parallel_for(std::size_t n, Body&& body) {
    const int threads = thread_count();
    constexpr std::size_t min_chunk = 4096;
    if (threads <= 1 || n < 2 * min_chunk) {
        body(std::size_t{0}, n);
        return;
    }
    const std::size_t chunks =
        std::min<std::size_t>(static_cast<std::size_t>(threads), n / min_chunk);
    std::vector<std::thread> pool;
    pool.reserve(chunks - 1);
    const std::size_t step = (n + chunks - 1) / chunks;
    for (std::size_t c = 1; c < chunks; ++c) {
        const std::size_t b = c * step;
        const std::size_t e = std::min(n, b + step);
        if (b < e) pool.emplace_back([&body, b, e] { body(b, e); });
    }
    body(std::size_t{0}, std::min(n, step));
    for (auto& t : pool) t.join();
}

}  // namespace crf
