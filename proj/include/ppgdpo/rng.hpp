#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace ppgdpo {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Mixes a run seed with a list of counters (purpose tag, epoch, episode, ...) into one key.
inline std::uint64_t stream_key(std::uint64_t seed, std::initializer_list<std::uint64_t> counters) {
    std::uint64_t h = splitmix64(seed);
    for (std::uint64_t c : counters) h = splitmix64(h ^ splitmix64(c + 0x632BE59BD9B4E019ULL));
    return h;
}

// Purpose tags keep streams for different consumers disjoint.
namespace tag {
inline constexpr std::uint64_t market = 1;
inline constexpr std::uint64_t misaligned = 2;
inline constexpr std::uint64_t rotation = 3;
inline constexpr std::uint64_t init = 4;
inline constexpr std::uint64_t theta = 5;
inline constexpr std::uint64_t noise = 6;
inline constexpr std::uint64_t start = 7;
inline constexpr std::uint64_t costate = 8;
inline constexpr std::uint64_t distill = 9;
inline constexpr std::uint64_t ppo = 10;
inline constexpr std::uint64_t query = 11;
}  // namespace tag

/// Counter-keyed random stream: the draws for a given key never depend on how many other
/// streams exist, so batch size and worker count do not change sample paths.
class Stream {
public:
    explicit Stream(std::uint64_t key) : eng_(key) {}
    Stream(std::uint64_t seed, std::initializer_list<std::uint64_t> counters) : eng_(stream_key(seed, counters)) {}

    double normal() { return normal_(eng_); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(eng_); }
    std::uint64_t bits() { return eng_(); }
    std::mt19937_64& engine() { return eng_; }

private:
    std::mt19937_64 eng_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace ppgdpo
