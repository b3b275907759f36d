#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace refrank {

std::array<std::uint8_t, 32> sha256(std::string_view data);
std::string sha256_hex(std::string_view data);

// First 8 digest bytes as a little-endian u64; used to derive PRNG seeds
// from (seed, text) pairs so streams are reproducible across platforms.
std::uint64_t seed_from(std::uint64_t seed, std::string_view tag, std::string_view text);

std::string to_lower(std::string_view s);
std::string trim(std::string_view s);

// mt19937_64 + Box-Muller. std::normal_distribution output is
// implementation-defined; this stream is not. Each next() consumes exactly
// two engine draws.
class GaussianStream {
public:
    explicit GaussianStream(std::uint64_t seed) : rng_(seed) {}

    double next_uniform() {  // [0, 1)
        return static_cast<double>(rng_() >> 11) * 0x1.0p-53;
    }

    double next();  // standard normal

private:
    std::mt19937_64 rng_;
};

std::string format_g(double v, int significant_digits);

// Shortest decimal form that round-trips to the same double (std::to_chars).
std::string format_shortest(double v);

}  // namespace refrank
