#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace fedpart {

// ---- error hierarchy -------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration or malformed user input. CLI maps this to exit 2.
struct ConfigError : Error {
    using Error::Error;
};

// Structural mismatch between tensors / parameter sets / masks.
struct ShapeError : Error {
    using Error::Error;
};

// Non-finite value produced during evaluation; carries the offending node id.
struct NumericError : Error {
    int node_id;
    NumericError(const std::string& msg, int node) : Error(msg), node_id(node) {}
};

struct IoError : Error {
    using Error::Error;
};

// ---- seed derivation -------------------------------------------------------
//
// All randomness flows from a single master seed through this mixing chain,
// so reruns (and alternate-language implementations) agree bit for bit:
//
//   splitmix64(x): x += 0x9E3779B97F4A7C15
//                  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9
//                  x = (x ^ (x >> 27)) * 0x94D049BB133111EB
//                  return x ^ (x >> 31)
//   fnv1a64(s):    64-bit FNV-1a over the bytes of s
//   derive(seed, t...): fold s = splitmix64(s ^ t) over the tags in order,
//                       string tags hashed with fnv1a64 first.

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline uint64_t derive_seed(uint64_t seed) { return seed; }

template <typename T, typename... Rest>
uint64_t derive_seed(uint64_t seed, T tag, Rest... rest) {
    uint64_t t;
    if constexpr (std::is_convertible_v<T, std::string_view>)
        t = fnv1a64(std::string_view(tag));
    else
        t = static_cast<uint64_t>(tag);
    return derive_seed(splitmix64(seed ^ t), rest...);
}

// ---- portable RNG ----------------------------------------------------------
//
// mt19937_64's output sequence is pinned by the standard; the distributions
// are not, so uniform/normal/gamma are implemented here directly.

class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1) with 53 random bits
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    uint64_t below(uint64_t n) {
        // rejection sampling to avoid modulo bias
        uint64_t lim = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = eng_();
        } while (x >= lim);
        return x % n;
    }

    double normal() {
        // Box-Muller; caches the second variate
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Marsaglia-Tsang for alpha >= 1, boosted for alpha < 1
    double gamma(double alpha) {
        if (alpha < 1.0) {
            double u;
            do {
                u = uniform();
            } while (u <= 0.0);
            return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
        }
        double d = alpha - 1.0 / 3.0;
        double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace fedpart
