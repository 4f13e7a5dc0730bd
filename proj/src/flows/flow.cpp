#include "d2pcca/flows/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "d2pcca/errors.hpp"

namespace d2pcca::flows {

using diff::Shape;

namespace {

void require_latent(const char* op, const Shape& s, std::size_t dim) {
    if (s.size() != 2 || s[1] != dim)
        throw ShapeError(std::string(op) + ": expected (batch, " + std::to_string(dim) + ") input, got " +
                         diff::to_string(s));
}

}  // namespace

void AffineArFlow::collect(std::vector<Parameter*>& out) {
    for (Parameter* p : {&w_in, &b_in, &w_shift, &b_shift, &w_scale, &b_scale}) out.push_back(p);
}

AffineArFlow make_affine_ar_flow(const std::string& name, std::size_t dim, std::size_t hidden,
                                 std::vector<std::size_t> order, std::mt19937_64& rng) {
    if (dim == 0 || hidden == 0) throw ShapeError("make_affine_ar_flow: dimensions must be positive");
    if (order.size() != dim) throw ShapeError("make_affine_ar_flow: ordering length differs from dimension");
    std::vector<std::size_t> rank(dim, dim);
    for (std::size_t r = 0; r < dim; ++r) {
        if (order[r] >= dim || rank[order[r]] != dim) throw ShapeError("make_affine_ar_flow: ordering is not a permutation");
        rank[order[r]] = r;
    }
    // Input k has degree rank(k) + 1; hidden units cycle through degrees 1..dim-1.
    // Hidden unit h sees inputs with degree <= deg(h); output k sees hidden units with deg(h) < rank(k) + 1.
    std::vector<std::size_t> hidden_degree(hidden);
    for (std::size_t h = 0; h < hidden; ++h) hidden_degree[h] = dim > 1 ? 1 + h % (dim - 1) : dim;
    AffineArFlow f;
    f.order = std::move(order);
    f.mask_in = Tensor(Shape{dim, hidden});
    f.mask_out = Tensor(Shape{hidden, dim});
    for (std::size_t k = 0; k < dim; ++k)
        for (std::size_t h = 0; h < hidden; ++h) {
            f.mask_in.at(k, h) = rank[k] + 1 <= hidden_degree[h] ? 1.0 : 0.0;
            f.mask_out.at(h, k) = hidden_degree[h] < rank[k] + 1 ? 1.0 : 0.0;
        }
    const double limit = std::sqrt(6.0 / static_cast<double>(dim + hidden));
    std::uniform_real_distribution<double> u(-limit, limit);
    Tensor w(Shape{dim, hidden});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = u(rng) * f.mask_in[i];
    f.w_in = Parameter{name + ".w_in", std::move(w)};
    f.b_in = Parameter{name + ".b_in", Tensor(Shape{hidden})};
    f.w_shift = Parameter{name + ".w_shift", Tensor(Shape{hidden, dim})};
    f.b_shift = Parameter{name + ".b_shift", Tensor(Shape{dim})};
    f.w_scale = Parameter{name + ".w_scale", Tensor(Shape{hidden, dim})};
    f.b_scale = Parameter{name + ".b_scale", Tensor(Shape{dim})};
    return f;
}

void FlowStack::collect(std::vector<Parameter*>& out) {
    for (auto& l : layers) l.collect(out);
}

FlowStack make_flow_stack(const std::string& name, std::size_t dim, std::size_t layers, std::size_t hidden,
                          std::mt19937_64& rng) {
    FlowStack stack;
    std::vector<std::size_t> order(dim);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t k = 0; k < layers; ++k) {
        stack.layers.push_back(make_affine_ar_flow(name + "." + std::to_string(k), dim, hidden, order, rng));
        std::reverse(order.begin(), order.end());
    }
    return stack;
}

Conditioner conditioner(Tape& tape, const AffineArFlow& f, Var u) {
    require_latent("flow conditioner", u.shape(), f.dim());
    const Var hidden = relu(matmul(u, tape.param(f.w_in) * tape.constant(f.mask_in)) + tape.param(f.b_in));
    const Var mask = tape.constant(f.mask_out);
    const Var shift = matmul(hidden, tape.param(f.w_shift) * mask) + tape.param(f.b_shift);
    const Var raw = matmul(hidden, tape.param(f.w_scale) * mask) + tape.param(f.b_scale);
    return {shift, clamp(raw, -kLogScaleBound, kLogScaleBound)};
}

FlowOutput flow_forward(Tape& tape, const AffineArFlow& f, Var u) {
    const Conditioner c = conditioner(tape, f, u);
    return {u * exp(c.log_scale) + c.shift, sum_last(c.log_scale)};
}

FlowOutput flow_forward(Tape& tape, const FlowStack& stack, Var u) {
    if (stack.layers.empty()) throw ShapeError("flow_forward: empty flow stack");
    FlowOutput out = flow_forward(tape, stack.layers.front(), u);
    for (std::size_t k = 1; k < stack.layers.size(); ++k) {
        const FlowOutput next = flow_forward(tape, stack.layers[k], out.z);
        out = {next.z, out.log_det + next.log_det};
    }
    return out;
}

FlowOutput flow_forward(Tape& tape, const FlowStack& stack, const Tensor& u) {
    return flow_forward(tape, stack, tape.constant(u));
}

Tensor flow_inverse(const AffineArFlow& f, const Tensor& z) {
    require_latent("flow_inverse", z.shape(), f.dim());
    const std::size_t B = z.dim(0);
    Tensor u(z.shape());
    // Coordinate order[r] only needs coordinates of lower rank, which are already final.
    for (std::size_t r = 0; r < f.dim(); ++r) {
        Tape tape;
        const Conditioner c = conditioner(tape, f, tape.constant(u));
        const Tensor& shift = c.shift.value();
        const Tensor& s = c.log_scale.value();
        const std::size_t k = f.order[r];
        for (std::size_t b = 0; b < B; ++b) u.at(b, k) = (z.at(b, k) - shift.at(b, k)) * std::exp(-s.at(b, k));
    }
    return u;
}

Tensor flow_inverse(const FlowStack& stack, const Tensor& z) {
    Tensor u = z;
    for (std::size_t k = stack.layers.size(); k-- > 0;) u = flow_inverse(stack.layers[k], u);
    return u;
}

}  // namespace d2pcca::flows
