#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "d2pcca/diffmath/tensor.hpp"

namespace d2pcca::model {

// Source of standard-normal reparameterization noise.
class NoiseSource {
public:
    virtual ~NoiseSource() = default;
    virtual diff::Tensor normal(const diff::Shape& shape) = 0;
};

// Seeded Gaussian draws. rewind() restarts the stream, which freezes the
// noise across repeated evaluations (finite-difference checks, matched draws).
class GaussianNoise final : public NoiseSource {
public:
    explicit GaussianNoise(std::uint64_t seed) : seed_(seed), rng_(seed) {}

    diff::Tensor normal(const diff::Shape& shape) override;
    void rewind() { rng_.seed(seed_); }

    std::string state() const;
    void set_state(const std::string& state);

private:
    std::uint64_t seed_;
    std::mt19937_64 rng_;
};

// Always zero: turns sampling paths into posterior-mean paths.
class ZeroNoise final : public NoiseSource {
public:
    diff::Tensor normal(const diff::Shape& shape) override { return diff::Tensor(shape); }
};

}  // namespace d2pcca::model
