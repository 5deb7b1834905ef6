#pragma once

#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace pbns {

using i64 = std::int64_t;
using u64 = std::uint64_t;

/// Base error for everything raised by this library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Bad or inconsistent configuration (CLI exit code 2).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// Malformed or inconsistent input data (CLI exit code 3).
struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(msg) {}
};

/// Numeric failure during computation (CLI exit code 4).
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

inline std::string strformat(const char* fmt, ...) {
    va_list args;
    va_start(args, fmt);
    va_list args2;
    va_copy(args2, args);
    int n = std::vsnprintf(nullptr, 0, fmt, args);
    va_end(args);
    std::string out(n > 0 ? static_cast<size_t>(n) : 0, '\0');
    if (n > 0) std::vsnprintf(out.data(), out.size() + 1, fmt, args2);
    va_end(args2);
    return out;
}

/// FNV-1a over raw bytes. Used for content hashes in checkpoints and manifests.
inline u64 fnv1a(const void* data, size_t len, u64 seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    u64 h = seed;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline u64 fnv1a(const std::vector<double>& v, u64 seed = 0xcbf29ce484222325ull) {
    return fnv1a(v.data(), v.size() * sizeof(double), seed);
}

inline u64 fnv1a(const std::vector<i64>& v, u64 seed = 0xcbf29ce484222325ull) {
    return fnv1a(v.data(), v.size() * sizeof(i64), seed);
}

inline std::string hash_hex(u64 h) { return strformat("%016llx", static_cast<unsigned long long>(h)); }

/// Deterministic RNG used everywhere. Wraps mt19937_64 with hand-rolled
/// distributions so results do not depend on the standard library's
/// distribution internals.
class Rng {
  public:
    explicit Rng(u64 seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    u64 next_u64() {
        // splitmix64
        u64 z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    i64 index(i64 n) { return static_cast<i64>(next_u64() % static_cast<u64>(n)); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (i64 i = static_cast<i64>(v.size()) - 1; i > 0; --i) {
            i64 j = static_cast<i64>(next_u64() % static_cast<u64>(i + 1));
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
        }
    }

  private:
    u64 state_;
};

}  // namespace pbns
