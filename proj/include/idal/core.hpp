#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace idal {

// ---------------------------------------------------------------------------
// Error types. Every failure carries a message naming the offending input.

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : Error {
    using Error::Error;
};
struct HeaderError : IoError {
    using IoError::IoError;
};
struct UnsupportedError : IoError {
    using IoError::IoError;
};
struct GeometryError : Error {
    using Error::Error;
};
struct InvariantError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct TrainingError : Error {
    using Error::Error;
};
// Thrown when an unregularized logistic fit diverges on separable classes.
struct SeparationError : TrainingError {
    using TrainingError::TrainingError;
};

template <class... Parts>
std::string msg(Parts&&... parts) {
    std::ostringstream os;
    (os << ... << parts);
    return os.str();
}

// ---------------------------------------------------------------------------
// Deterministic randomness. All stochastic code draws from RandomStream so
// results are reproducible bit-for-bit across runs and thread counts.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Fans a master seed out to independent per-stage / per-item seeds.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

class RandomStream {
  public:
    explicit RandomStream(std::uint64_t seed) : state_(splitmix64(seed ^ 0xd1b54a32d192ed03ULL)) {}

    std::uint64_t next_u64() {
        state_ = splitmix64(state_);
        return state_;
    }

    // Uniform in [0, 1).
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

    // Box-Muller; deterministic across platforms, unlike std::normal_distribution.
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = next_double();
        const double u2 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

  private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// FNV-1a content hashing, used for provenance fingerprints in file headers.

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a(s.data(), s.size(), h);
}

inline std::string hash_hex(std::uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Minimal dense row-major matrix.

template <class T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> values;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), values(r * c, fill) {}

    T& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    const T& at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    T* row(std::size_t r) { return values.data() + r * cols; }
    const T* row(std::size_t r) const { return values.data() + r * cols; }
    bool empty() const { return rows == 0 || cols == 0; }
};

// ---------------------------------------------------------------------------
// Chunked parallel loop. Work items must be independent; determinism of the
// overall result is the caller's responsibility (use per-item derived seeds).

inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body) {
    const int t = std::min<std::size_t>(static_cast<std::size_t>(resolve_threads(threads)), n == 0 ? 1 : n);
    if (t <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(t));
    std::exception_ptr first_error;
    std::mutex err_mutex;
    for (int w = 0; w < t; ++w) {
        pool.emplace_back([&, w]() {
            const std::size_t lo = n * static_cast<std::size_t>(w) / static_cast<std::size_t>(t);
            const std::size_t hi = n * static_cast<std::size_t>(w + 1) / static_cast<std::size_t>(t);
            try {
                for (std::size_t i = lo; i < hi; ++i) body(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace idal
