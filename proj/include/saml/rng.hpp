#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "saml/tensor.hpp"

namespace saml {

/// Counter-based pseudo-random generator (splitmix64 finalizer over a
/// seed + counter pair). The same seed yields the same stream on every
/// platform; independent streams are derived with fork().
class SeededRng {
public:
    explicit SeededRng(uint64_t seed) : seed_(seed) {}

    uint64_t seed() const { return seed_; }

    uint64_t next_u64();
    double next_double(); // [0, 1)
    float normal();       // standard normal via Box-Muller
    int uniform_int(int n); // [0, n)

    SeededRng fork(uint64_t stream) const;
    SeededRng fork(std::string_view label) const;

    void fill_normal(Tensor & t, float stddev);
    std::vector<int> permutation(int n);

private:
    uint64_t seed_ = 0;
    uint64_t counter_ = 0;
};

} // namespace saml
