#pragma once

#include <functional>
#include <span>

#include "d2pcca/diffmath/tape.hpp"

namespace d2pcca::diff {

// Largest |analytic - central difference| / max(1, |central difference|)
// over every coordinate of `point`. `f` must build a scalar on the tape it is given.
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& point, double epsilon = 1e-5);

// Same measure over every coordinate of every parameter. Parameters are
// perturbed in place and restored before returning.
double grad_check(const std::function<Var(Tape&)>& f, std::span<Parameter* const> params, double epsilon = 1e-5);

}  // namespace d2pcca::diff
