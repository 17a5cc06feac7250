#include "otok/rng.hpp"

#include <cmath>
#include <numbers>

namespace otok {

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream) : key_(mix64(seed ^ mix64(stream + 0x5851F42D4C957F2DULL))) {}

Rng Rng::restore(std::uint64_t key, std::uint64_t counter) {
    Rng r;
    r.key_ = key;
    r.counter_ = counter;
    return r;
}

std::uint64_t Rng::next_u64() { return mix64(key_ ^ mix64(counter_++)); }

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
    // Box-Muller; u1 drawn from (0, 1] so the log is finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::int64_t Rng::uniform_int(std::int64_t bound) {
    if (bound <= 0) {
        throw Error("uniform_int bound must be positive");
    }
    const auto b = static_cast<std::uint64_t>(bound);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % b;
    std::uint64_t v = next_u64();
    while (v >= limit) {
        v = next_u64();
    }
    return static_cast<std::int64_t>(v % b);
}

Rng Rng::split(std::uint64_t stream_id) const {
    Rng child;
    child.key_ = mix64(key_ ^ mix64(~stream_id));
    return child;
}

Tensor Rng::normal_tensor(const Shape& shape, Real stddev) {
    std::vector<Real> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) {
        x = stddev * normal();
    }
    return Tensor::from(shape, std::move(v));
}

Tensor Rng::uniform_tensor(const Shape& shape, Real lo, Real hi) {
    std::vector<Real> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) {
        x = lo + (hi - lo) * uniform();
    }
    return Tensor::from(shape, std::move(v));
}

}  // namespace otok
