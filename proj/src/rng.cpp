#include "stochctl/rng.hpp"

#include <cmath>
#include <numbers>

namespace stochctl {

std::uint64_t mix64(std::uint64_t z)
{
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double uniform_at(std::uint64_t seed, std::uint64_t stream, std::uint64_t index, std::uint64_t lane)
{
    std::uint64_t h = mix64(seed);
    h = mix64(h ^ stream);
    h = mix64(h ^ (index * 2 + lane));
    // (0,1): never exactly zero so log() below stays finite.
    return (static_cast<double>(h >> 11) + 0.5) * 0x1.0p-53;
}

double normal_at(std::uint64_t seed, std::uint64_t stream, std::uint64_t index)
{
    const double u1 = uniform_at(seed, stream, index, 0);
    const double u2 = uniform_at(seed, stream, index, 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double CounterRng::uniform() { return uniform_at(seed_, stream_ ^ 0x5bd1e995ULL, counter_++, 0); }

double CounterRng::normal() { return normal_at(seed_, stream_ ^ 0x27d4eb2fULL, counter_++); }

int CounterRng::integer(int lo, int hi)
{
    const double u = uniform();
    int v = lo + static_cast<int>(std::floor(u * (hi - lo + 1)));
    return v > hi ? hi : v;
}

} // namespace stochctl
