#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace qkdsim {

/// Time quantities are carried as real-valued picoseconds throughout.
using Picoseconds = double;

using ChannelId = std::uint32_t;

/// All stochastic stages draw from this engine; seeds come from derive_seed().
using Rng = std::mt19937_64;

inline constexpr double kPsPerSecond = 1e12;

/// Invalid configuration or argument values (CLI exit code 2).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A caller broke an operation's precondition (unsorted input, wrong table...).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Per-stage seed derivation: splitmix64 over (root, FNV-1a(stage), index).
/// Stable across platforms; documented in the README.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stage, std::uint64_t index = 0);

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace qkdsim
