#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace coot {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid or inconsistent configuration / user input.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf or other numeric breakdown during computation.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

namespace detail {
inline void str_impl(std::ostringstream&) {}
template <typename T, typename... Rest>
void str_impl(std::ostringstream& os, const T& v, const Rest&... rest) {
    os << v;
    str_impl(os, rest...);
}
} // namespace detail

template <typename... Args>
std::string str(const Args&... args) {
    std::ostringstream os;
    detail::str_impl(os, args...);
    return os.str();
}

#define COOT_CHECK(cond, ...)                                                  \
    do {                                                                       \
        if (!(cond)) throw ::coot::Error(::coot::str(__VA_ARGS__));            \
    } while (0)

#define COOT_CHECK_CFG(cond, ...)                                              \
    do {                                                                       \
        if (!(cond)) throw ::coot::ConfigError(::coot::str(__VA_ARGS__));      \
    } while (0)

// Deterministic, platform-independent RNG (splitmix64 core). The standard
// <random> distributions are implementation-defined, which would break the
// byte-identical-output contracts, so all sampling goes through this.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    static std::uint64_t mix(std::uint64_t x) {
        x += 0x9E3779B97F4A7C15ULL;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        return x ^ (x >> 31);
    }

    // Independent stream derived from (seed, stream, substream, subsub).
    static Rng derive(std::uint64_t seed, std::uint64_t stream,
                      std::uint64_t substream = 0, std::uint64_t subsub = 0) {
        std::uint64_t h = mix(seed ^ 0xD1B54A32D192ED03ULL);
        h = mix(h ^ (stream + 0x9E3779B97F4A7C15ULL));
        h = mix(h ^ (substream + 0x165667B19E3779F9ULL));
        h = mix(h ^ (subsub + 0x27D4EB2F165667C5ULL));
        return Rng(h);
    }

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi], inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        COOT_CHECK(hi >= lo, "uniform_int: empty range [", lo, ", ", hi, "]");
        std::uint64_t span = std::uint64_t(hi - lo) + 1;
        return lo + std::int64_t(next_u64() % span);
    }

    // Standard normal via Box-Muller.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = std::size_t(uniform_int(0, std::int64_t(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace coot
