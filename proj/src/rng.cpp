#include "saml/rng.hpp"

#include <cmath>

#include "saml/error.hpp"

namespace saml {

namespace {

constexpr uint64_t GOLDEN = 0x9e3779b97f4a7c15ULL;

uint64_t mix64(uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace

uint64_t SeededRng::next_u64() {
    ++counter_;
    return mix64(seed_ + counter_ * GOLDEN);
}

double SeededRng::next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

float SeededRng::normal() {
    // One draw per call; uses two uniforms, no cached second value.
    const double u1 = next_double();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log1p(-u1));
    return static_cast<float>(r * std::cos(2.0 * M_PI * u2));
}

int SeededRng::uniform_int(int n) {
    if (n <= 0) {
        throw IndexError("uniform_int: n must be positive");
    }
    const double u = next_double();
    const int v = static_cast<int>(u * n);
    return v >= n ? n - 1 : v;
}

SeededRng SeededRng::fork(uint64_t stream) const {
    return SeededRng(mix64(seed_ ^ mix64(stream + 0x632be59bd9b4e019ULL)));
}

SeededRng SeededRng::fork(std::string_view label) const {
    return fork(fnv1a(label));
}

void SeededRng::fill_normal(Tensor & t, float stddev) {
    for (int64_t i = 0; i < t.numel(); ++i) {
        t[i] = normal() * stddev;
    }
}

std::vector<int> SeededRng::permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) {
        p[i] = i;
    }
    for (int i = n - 1; i > 0; --i) {
        const int j = uniform_int(i + 1);
        std::swap(p[i], p[j]);
    }
    return p;
}

} // namespace saml
