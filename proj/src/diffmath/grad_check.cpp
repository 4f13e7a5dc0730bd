#include "d2pcca/diffmath/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "d2pcca/errors.hpp"

namespace d2pcca::diff {

namespace {

double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

double checked(double v, const char* where) {
    if (!std::isfinite(v)) throw NumericalError(std::string("grad_check: non-finite objective at ") + where);
    return v;
}

}  // namespace

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& point, double epsilon) {
    Tensor analytic;
    {
        Tape tape;
        Var x = tape.leaf(point);
        Var y = f(tape, x);
        checked(y.value().item(), "the base point");
        tape.backward(y);
        analytic = tape.grad(x);
    }
    auto eval = [&](const Tensor& at) {
        Tape tape;
        Var x = tape.leaf(at);
        return checked(f(tape, x).value().item(), "a perturbed point");
    };
    double worst = 0.0;
    Tensor probe = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        probe[i] = point[i] + epsilon;
        const double up = eval(probe);
        probe[i] = point[i] - epsilon;
        const double down = eval(probe);
        probe[i] = point[i];
        worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * epsilon)));
    }
    return worst;
}

double grad_check(const std::function<Var(Tape&)>& f, std::span<Parameter* const> params, double epsilon) {
    std::vector<Tensor> analytic;
    {
        Tape tape;
        Var y = f(tape);
        checked(y.value().item(), "the base point");
        tape.backward(y);
        for (Parameter* p : params) analytic.push_back(tape.grad(*p));
    }
    auto eval = [&] {
        Tape tape;
        return checked(f(tape).value().item(), "a perturbed point");
    };
    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& value = params[k]->value;
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double base = value[i];
            value[i] = base + epsilon;
            const double up = eval();
            value[i] = base - epsilon;
            const double down = eval();
            value[i] = base;
            worst = std::max(worst, relative_error(analytic[k][i], (up - down) / (2.0 * epsilon)));
        }
    }
    return worst;
}

}  // namespace d2pcca::diff
