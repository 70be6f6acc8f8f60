#pragma once

#include <cstdint>
#include <random>

namespace evoloss {

using Rng = std::mt19937_64;

// splitmix64 step; used to derive independent seed streams from a run seed.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Mixes an arbitrary number of stream identifiers into one seed, so that
// (run_seed, generation, candidate) and similar tuples get disjoint streams.
inline std::uint64_t mix_seed(std::uint64_t seed) {
    std::uint64_t s = seed;
    return splitmix64(s);
}

template <typename... Rest>
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t next, Rest... rest) {
    std::uint64_t s = seed + 0x632be59bd9b4e019ULL * (next + 1);
    return mix_seed(splitmix64(s), rest...);
}

template <typename... Ids>
inline Rng make_rng(std::uint64_t seed, Ids... ids) {
    return Rng(mix_seed(seed, static_cast<std::uint64_t>(ids)...));
}

}  // namespace evoloss
