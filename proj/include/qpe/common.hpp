#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace qpe {

/// Thrown when a plan, trace or config violates a structural invariant.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Thrown when an estimator or feature is evaluated on degenerate input
/// (zero denominators, empty driver sets, t_end == t_start).
struct DegenerateInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Thrown for malformed configuration files or parameter values.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Thrown when a serialized artifact does not match the expected schema version.
struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Version stamp shared by feature schemas and model files.
inline constexpr int kSchemaVersion = 1;

/// splitmix64 finalizer; used to derive independent per-stream seeds from one
/// master seed so that families/queries can be generated in any order.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

using Rng = std::mt19937_64;

}  // namespace qpe
