#pragma once

// Shared error types, seeded RNG substreams and numeric formatting used by
// every feq module. Exit codes follow the CLI contract: 0 success, 2 schema,
// 3 convergence, 4 numeric range, 5 resource.

#include <cstdint>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace feq {

class Error : public std::runtime_error {
public:
    Error(int exit_code, const std::string& msg)
        : std::runtime_error(msg), exit_code_(exit_code) {}
    int exit_code() const noexcept { return exit_code_; }

private:
    int exit_code_;
};

/// Bad configuration, dimension mismatch, violated precondition.
class SchemaError : public Error {
public:
    explicit SchemaError(const std::string& msg) : Error(2, msg) {}
};

/// Iteration failed to converge within the allotted budget.
class ConvergenceError : public Error {
public:
    explicit ConvergenceError(const std::string& msg) : Error(3, msg) {}
};

/// Overflow, blow-up or non-finite value during computation.
class NumericRangeError : public Error {
public:
    explicit NumericRangeError(const std::string& msg) : Error(4, msg) {}
};

/// Requested problem size exceeds a configured cap.
class ResourceError : public Error {
public:
    explicit ResourceError(const std::string& msg) : Error(5, msg) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG substreams.
//
// All randomness in a run flows from one master seed through named substreams
// so that parallel work (Ulam cells, SDE paths) is bit-identical to the
// sequential order.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Seed for substream `name` at `index`, derived from the master seed.
inline std::uint64_t substream_seed(std::uint64_t master, std::string_view name,
                                    std::uint64_t index) {
    return splitmix64(splitmix64(master ^ fnv1a(name)) ^ index);
}

inline std::mt19937_64 make_rng(std::uint64_t master, std::string_view name,
                                std::uint64_t index) {
    return std::mt19937_64(substream_seed(master, name, index));
}

// ---------------------------------------------------------------------------
// Formatting. CSV outputs must be byte-identical across runs, so all doubles
// go through one shortest-roundtrip formatter.

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace feq
