#include "d2pcca/training/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "d2pcca/errors.hpp"

namespace d2pcca::training {

void OptimizerConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("optimizer: learning rate must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("optimizer: beta1 must lie in (0, 1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("optimizer: beta2 must lie in (0, 1)");
    if (!(clip_norm > 0.0)) throw ConfigError("optimizer: clip norm must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("optimizer: weight decay must be non-negative");
    if (!(epsilon > 0.0)) throw ConfigError("optimizer: epsilon must be positive");
    if (learning_rate * weight_decay >= 1.0)
        throw ConfigError("optimizer: learning rate times weight decay must stay below 1");
}

void AnnealSchedule::validate() const {
    if (!(initial > 0.0 && initial <= 1.0)) throw ConfigError("annealing: initial beta must lie in (0, 1]");
}

double kl_weight(const AnnealSchedule& schedule, std::size_t epoch) {
    if (schedule.ramp_epochs == 0 || epoch >= schedule.ramp_epochs) return 1.0;
    const double frac = static_cast<double>(epoch) / static_cast<double>(schedule.ramp_epochs);
    return schedule.initial + (1.0 - schedule.initial) * frac;
}

double global_norm(const std::vector<Tensor>& grads) {
    double sq = 0.0;
    for (const Tensor& g : grads)
        for (double v : g.values()) sq += v * v;
    return std::sqrt(sq);
}

ClippedAdam::ClippedAdam(OptimizerConfig config, std::vector<Parameter*> params)
    : config_(config), params_(std::move(params)) {
    config_.validate();
    for (const Parameter* p : params_) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
    }
}

double ClippedAdam::step(const std::vector<Tensor>& grads) {
    if (grads.size() != params_.size())
        throw ShapeError("ClippedAdam: got " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params_.size()) + " parameters");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (grads[i].shape() != params_[i]->value.shape())
            throw ShapeError("ClippedAdam: gradient shape mismatch for " + params_[i]->name);
        if (!grads[i].all_finite()) throw NumericalError("ClippedAdam: non-finite gradient for " + params_[i]->name);
    }
    const double norm = global_norm(grads);
    const bool clip = norm > config_.clip_norm;
    const double factor = clip ? config_.clip_norm / norm : 1.0;

    ++steps_;
    const double t = static_cast<double>(steps_);
    const double correction1 = 1.0 - std::pow(config_.beta1, t);
    const double correction2 = 1.0 - std::pow(config_.beta2, t);
    const double shrink = 1.0 - config_.learning_rate * config_.weight_decay;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto p = params_[i]->value.values();
        auto m = m_[i].values();
        auto v = v_[i].values();
        const auto g = grads[i].values();
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double gk = clip ? g[k] * factor : g[k];
            m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * gk;
            v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * gk * gk;
            const double update = (m[k] / correction1) / (std::sqrt(v[k] / correction2) + config_.epsilon);
            p[k] = p[k] * shrink - config_.learning_rate * update;
        }
    }
    return norm;
}

void ClippedAdam::restore(std::uint64_t steps, std::vector<Tensor> first, std::vector<Tensor> second) {
    if (first.size() != params_.size() || second.size() != params_.size())
        throw ShapeError("ClippedAdam::restore: moment count does not match parameter count");
    for (std::size_t i = 0; i < params_.size(); ++i)
        if (first[i].shape() != params_[i]->value.shape() || second[i].shape() != params_[i]->value.shape())
            throw ShapeError("ClippedAdam::restore: moment shape mismatch for " + params_[i]->name);
    steps_ = steps;
    m_ = std::move(first);
    v_ = std::move(second);
}

}  // namespace d2pcca::training
