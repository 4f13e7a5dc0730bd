#pragma once

#include <random>
#include <string>
#include <vector>

#include "d2pcca/diffmath/tape.hpp"

namespace d2pcca::flows {

using diff::Parameter;
using diff::Tape;
using diff::Tensor;
using diff::Var;

inline constexpr double kLogScaleBound = 7.0;
inline constexpr std::size_t kDefaultHidden = 70;
inline constexpr std::size_t kDefaultLayers = 5;

// Affine autoregressive bijection z_k = u_k exp(s_k(u_<k)) + m_k(u_<k), where
// "<k" is taken along `order` and the conditioner is a masked one-hidden-layer
// relu network (MADE). Log-scales are clamped to [-7, 7].
struct AffineArFlow {
    std::vector<std::size_t> order;  // order[r] is the coordinate with rank r
    Parameter w_in, b_in;            // (L, H), (H)
    Parameter w_shift, b_shift;      // (H, L), (L)
    Parameter w_scale, b_scale;      // (H, L), (L)
    Tensor mask_in;                  // (L, H)
    Tensor mask_out;                 // (H, L)

    std::size_t dim() const { return order.size(); }
    std::size_t hidden() const { return b_in.value.size(); }
    void collect(std::vector<Parameter*>& out);
};

// Output heads start at zero, so a fresh layer is the identity map.
AffineArFlow make_affine_ar_flow(const std::string& name, std::size_t dim, std::size_t hidden,
                                 std::vector<std::size_t> order, std::mt19937_64& rng);

// Layer k uses the identity ordering for even k and the reversed ordering for odd k.
struct FlowStack {
    std::vector<AffineArFlow> layers;

    std::size_t dim() const { return layers.empty() ? 0 : layers.front().dim(); }
    void collect(std::vector<Parameter*>& out);
};

FlowStack make_flow_stack(const std::string& name, std::size_t dim, std::size_t layers, std::size_t hidden,
                          std::mt19937_64& rng);

struct Conditioner {
    Var shift;      // (B, L)
    Var log_scale;  // (B, L), clamped
};
Conditioner conditioner(Tape& tape, const AffineArFlow& flow, Var u);

struct FlowOutput {
    Var z;        // (B, L)
    Var log_det;  // (B)
};
FlowOutput flow_forward(Tape& tape, const AffineArFlow& flow, Var u);
FlowOutput flow_forward(Tape& tape, const FlowStack& stack, Var u);

// Value-only helpers on (B, L) tensors.
FlowOutput flow_forward(Tape& tape, const FlowStack& stack, const Tensor& u);
Tensor flow_inverse(const AffineArFlow& flow, const Tensor& z);
Tensor flow_inverse(const FlowStack& stack, const Tensor& z);

}  // namespace d2pcca::flows
