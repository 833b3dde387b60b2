#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace gridfit {

using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Vec12 = Eigen::Matrix<double, 12, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat6x12 = Eigen::Matrix<double, 6, 12>;
using Mat12 = Eigen::Matrix<double, 12, 12>;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failure of a solve at a particular operating point. Callers that
/// iterate over operating points (the estimator) may skip and continue;
/// everything else is a hard input error.
struct SolveError : Error {
    explicit SolveError(const std::string& msg) : Error(msg) {}
};

#define GRIDFIT_DEFINE_ERROR(NAME, BASE)                                       \
    struct NAME : BASE {                                                       \
        explicit NAME(const std::string& msg) : BASE(#NAME ": " + msg) {}      \
    }

GRIDFIT_DEFINE_ERROR(SingularMatrix, SolveError);
GRIDFIT_DEFINE_ERROR(NotConverged, SolveError);
GRIDFIT_DEFINE_ERROR(Diverged, SolveError);
GRIDFIT_DEFINE_ERROR(ZeroVoltage, SolveError);
GRIDFIT_DEFINE_ERROR(ZeroMagnitude, SolveError);
GRIDFIT_DEFINE_ERROR(ZIterationDiverged, SolveError);
GRIDFIT_DEFINE_ERROR(StepUnderflow, SolveError);
GRIDFIT_DEFINE_ERROR(OracleNotConverged, SolveError);
GRIDFIT_DEFINE_ERROR(IndexOutOfRange, Error);
GRIDFIT_DEFINE_ERROR(MissingReading, Error);
GRIDFIT_DEFINE_ERROR(UnknownConnection, Error);
GRIDFIT_DEFINE_ERROR(NoProgress, Error);
GRIDFIT_DEFINE_ERROR(InvalidCut, Error);
GRIDFIT_DEFINE_ERROR(MissingQuasiSourceData, Error);
GRIDFIT_DEFINE_ERROR(OwnershipConflict, Error);
GRIDFIT_DEFINE_ERROR(ZeroCurrent, Error);
GRIDFIT_DEFINE_ERROR(ZeroTruth, Error);
GRIDFIT_DEFINE_ERROR(DegenerateInitial, Error);
GRIDFIT_DEFINE_ERROR(ParseError, Error);
GRIDFIT_DEFINE_ERROR(IoError, Error);

#undef GRIDFIT_DEFINE_ERROR

// ---------------------------------------------------------------------------
// Threads
// ---------------------------------------------------------------------------

/// Worker count: GRIDFIT_THREADS env var wins, then the explicit request,
/// then hardware concurrency.
inline int resolve_threads(int requested = 0) {
    if (const char* env = std::getenv("GRIDFIT_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    if (requested > 0) return requested;
    unsigned hc = std::thread::hardware_concurrency();
    return hc > 0 ? static_cast<int>(hc) : 1;
}

/// Runs fn(i) for i in [0, n). Results must be written to caller-owned
/// per-index slots; chunking is static so the output is identical for any
/// worker count.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                         int threads = 0) {
    threads = resolve_threads(threads);
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::size_t workers = std::min<std::size_t>(threads, n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::exception_ptr first_error;
    std::mutex err_mutex;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Seeded RNG streams
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derives an independent substream seed from a base seed and stream tags.
inline std::uint64_t substream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                               std::uint64_t c = 0) {
    std::uint64_t h = splitmix64(seed ^ 0x6a09e667f3bcc908ULL);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    h = splitmix64(h ^ c);
    return h;
}

// ---------------------------------------------------------------------------
// Text helpers
// ---------------------------------------------------------------------------

/// Decimal text with 17 significant digits; round-trips doubles exactly.
inline std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// FNV-1a 64-bit content hash, used for manifest input/output fingerprints.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace gridfit
