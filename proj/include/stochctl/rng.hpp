#pragma once

#include <cstdint>

namespace stochctl {

// Counter-based draws: every value is a pure function of its key, so results
// do not depend on the order in which paths or steps are generated.
std::uint64_t mix64(std::uint64_t z);
double uniform_at(std::uint64_t seed, std::uint64_t stream, std::uint64_t index, std::uint64_t lane);
double normal_at(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

// Sequential convenience wrapper over the same hash for drawing test instances.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();
    // Uniform integer in [lo, hi].
    int integer(int lo, int hi);

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
};

} // namespace stochctl
