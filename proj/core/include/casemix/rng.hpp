#pragma once

#include <cstdint>
#include <random>

namespace casemix {

/// SplitMix64 finalizer; decorrelates nearby integers.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Independent generator for one unit of work (a replicate, a run) so that
/// results never depend on scheduling order.
inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t salt = 0) {
    const std::uint64_t s = splitmix64(splitmix64(seed ^ splitmix64(salt)) ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
    std::seed_seq seq{static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32)};
    return std::mt19937_64(seq);
}

}  // namespace casemix
