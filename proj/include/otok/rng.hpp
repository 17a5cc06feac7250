#pragma once

#include <cstdint>
#include <vector>

#include "otok/tensor.hpp"

namespace otok {

// Counter-based generator: output i is a bijective mix of (key, i), so a stream
// is fully described by two integers and child streams never overlap the parent.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);

    std::uint64_t next_u64();
    double uniform();                               // [0, 1)
    double normal();                                // standard normal
    std::int64_t uniform_int(std::int64_t bound);   // [0, bound)

    Rng split(std::uint64_t stream_id) const;

    Tensor normal_tensor(const Shape& shape, Real stddev = 1.0);
    Tensor uniform_tensor(const Shape& shape, Real lo, Real hi);

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }
    static Rng restore(std::uint64_t key, std::uint64_t counter);

    bool operator==(const Rng&) const = default;

private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace otok
