#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace thinkgen {

/// Error families map onto CLI exit codes (config 1, data 2, numeric 3).
enum class ErrorKind { kConfig = 1, kData = 2, kNumeric = 3 };

class Error : public std::runtime_error {
   public:
    Error(ErrorKind kind, std::string code, const std::string& detail)
        : std::runtime_error(code + ": " + detail), kind_(kind), code_(std::move(code)) {}

    ErrorKind kind() const { return kind_; }
    /// Short machine-readable tag, e.g. "UnknownWord" or "ShapeMismatch".
    const std::string& code() const { return code_; }

   private:
    ErrorKind kind_;
    std::string code_;
};

inline Error config_error(std::string code, const std::string& detail) {
    return Error(ErrorKind::kConfig, std::move(code), detail);
}
inline Error data_error(std::string code, const std::string& detail) {
    return Error(ErrorKind::kData, std::move(code), detail);
}
inline Error numeric_error(std::string code, const std::string& detail) {
    return Error(ErrorKind::kNumeric, std::move(code), detail);
}

// splitmix64 finalizer; used for counter-based seed derivation.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_name(std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Derive an independent sub-stream seed from (seed, stream name, counter).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t counter = 0) {
    return mix64(mix64(seed ^ hash_name(stream)) + mix64(counter + 0x632be59bd9b4e019ULL));
}

/// Seeded generator with distribution code written out here so streams are
/// reproducible independent of the standard library implementation.
class Rng {
   public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return static_cast<std::size_t>(v % n);
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        // Box-Muller, one draw per call.
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    template <typename Vec>
    void shuffle(Vec& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

   private:
    std::mt19937_64 engine_;
};

}  // namespace thinkgen

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <functional>
#include <thread>
#include <vector>

namespace thinkgen {

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Work is handed out
/// by index, so fn must only touch per-index state.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
    const std::size_t w = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
    if (w <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr err;
    std::mutex err_mu;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < w; ++t)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lk(err_mu);
                    if (!err) err = std::current_exception();
                }
            }
        });
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

inline int default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

}  // namespace thinkgen
