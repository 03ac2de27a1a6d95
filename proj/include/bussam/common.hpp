#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace bussam {

// Invalid module/layer wiring: bad shapes at construction time, divisibility
// violations, out-of-range hyperparameters.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Wrong use of a valid object (non-scalar loss, mismatched runtime shapes).
class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input files, unwritable outputs.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf detected after a primitive while finite checking is enabled.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline void check_shape_valid(const Shape& s, const char* where) {
    if (s.empty() || s.size() > 4)
        throw ConfigError(std::string(where) + ": rank must be 1..4, got rank " +
                          std::to_string(s.size()));
    for (int d : s)
        if (d < 1)
            throw ConfigError(std::string(where) + ": non-positive dim in " + shape_str(s));
}

// Stable 64-bit string hash (FNV-1a), used to derive per-parameter RNG streams
// so ablated models share bitwise-identical tensors for common parameter names.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::mt19937_64 rng_for(std::uint64_t seed, const std::string& name) {
    return std::mt19937_64(seed ^ fnv1a(name));
}

}  // namespace bussam
