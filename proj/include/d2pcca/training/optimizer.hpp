#pragma once

#include <cstdint>
#include <vector>

#include "d2pcca/diffmath/tape.hpp"

namespace d2pcca::training {

using diff::Parameter;
using diff::Tensor;

struct OptimizerConfig {
    double learning_rate = 3e-4;
    double beta1 = 0.96;
    double beta2 = 0.999;
    double clip_norm = 10.0;
    double weight_decay = 2.0;  // decoupled: p <- p (1 - lr * wd) each step
    double epsilon = 1e-8;

    void validate() const;
};

// beta(e) = initial + (1 - initial) * min(1, e / ramp_epochs).
struct AnnealSchedule {
    double initial = 0.01;
    std::size_t ramp_epochs = 100;

    void validate() const;
};

double kl_weight(const AnnealSchedule& schedule, std::size_t epoch);

// Euclidean norm over every entry of every tensor.
double global_norm(const std::vector<Tensor>& grads);

// Adam with bias correction, global-norm gradient clipping, and decoupled
// weight decay. Moment buffers mirror the parameter shapes.
class ClippedAdam {
public:
    ClippedAdam(OptimizerConfig config, std::vector<Parameter*> params);

    // Applies one update and returns the gradient norm before clipping.
    double step(const std::vector<Tensor>& grads);

    const OptimizerConfig& config() const { return config_; }
    const std::vector<Parameter*>& parameters() const { return params_; }
    std::uint64_t steps() const { return steps_; }
    const std::vector<Tensor>& first_moments() const { return m_; }
    const std::vector<Tensor>& second_moments() const { return v_; }

    // Reinstates saved optimizer state; shapes must match the parameters.
    void restore(std::uint64_t steps, std::vector<Tensor> first, std::vector<Tensor> second);

private:
    OptimizerConfig config_;
    std::vector<Parameter*> params_;
    std::vector<Tensor> m_, v_;
    std::uint64_t steps_ = 0;
};

}  // namespace d2pcca::training
