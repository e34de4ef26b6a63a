#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace kivi {

/// Explicitly passed random stream. Child streams are derived from the
/// seed and a key, never from the parent's consumption state, so a split
/// yields the same stream no matter how many draws the parent has made.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t seed() const noexcept { return seed_; }

    Rng split(std::string_view key) const;
    Rng split(std::uint64_t index) const;

    double normal();
    double uniform();  // [0, 1)
    double uniform(double lo, double hi);
    std::uint64_t next_u64();
    std::size_t index(std::size_t n);  // uniform in [0, n)

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t key) noexcept;

}  // namespace kivi
