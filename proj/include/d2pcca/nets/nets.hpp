#pragma once

#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "d2pcca/diffmath/tape.hpp"

namespace d2pcca::nets {

using diff::Parameter;
using diff::Tape;
using diff::Tensor;
using diff::Var;

// Lower bound added to (or clamped onto) every variance head.
inline constexpr double kVarianceFloor = 1e-5;

enum class Activation { Relu, Tanh, Sigmoid, Softplus, Identity };

const char* to_string(Activation a);
Activation activation_from_string(std::string_view name);
Var activate(Var x, Activation a);

// Affine map x W + b with W of shape (in, out) and b of shape (out).
struct Linear {
    Parameter weight;
    Parameter bias;

    std::size_t in() const { return weight.value.dim(0); }
    std::size_t out() const { return weight.value.dim(1); }
    Var apply(Tape& tape, Var x) const;
    void collect(std::vector<Parameter*>& out);
};

// Glorot-uniform weights, zero bias.
Linear make_linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng);

// n affine layers, each followed by its activation.
struct Mlp {
    std::vector<Linear> layers;
    std::vector<Activation> activations;

    std::size_t in() const { return layers.front().in(); }
    std::size_t out() const { return layers.back().out(); }
    void collect(std::vector<Parameter*>& out);
};

// widths = {input, hidden..., output}; one activation per layer.
Mlp make_mlp(const std::string& name, const std::vector<std::size_t>& widths, const std::vector<Activation>& acts,
             std::mt19937_64& rng);

Var mlp_eval(Tape& tape, const Mlp& mlp, Var input);

// Diagonal Gaussian parameters recorded on a tape.
struct Gaussian {
    Var mean;
    Var var;
};

enum class GateVariant { Gru, Lstm };

const char* to_string(GateVariant v);
GateVariant gate_variant_from_string(std::string_view name);

// Gated transition for one chain:
//   h = MLP(z, relu, I), g = MLP(z, relu, sigmoid), S = softplus(relu(h) Ws + bs)
//   gru:  G = g * h + (1 - g) * (z Wl + bl)
//   lstm: G = g * h + w * (z Wl + bl),  w = MLP(z, relu, sigmoid)
struct TransitionNet {
    GateVariant variant = GateVariant::Gru;
    Mlp h, g, w;
    Linear shortcut;
    Linear s_head;

    std::size_t dim() const { return shortcut.in(); }
    void collect(std::vector<Parameter*>& out);
};

std::size_t transition_hidden_width(std::size_t chain_dim);

TransitionNet make_transition(const std::string& name, std::size_t chain_dim, GateVariant variant,
                              std::mt19937_64& rng);

Gaussian gated_transition(Tape& tape, const TransitionNet& net, Var z_prev);

// Emission for one set: trunk = MLP([z0, zj], relu, relu), mean = trunk Wm + bm,
// variance = max(exp(min(trunk Wv + bv, 50)), floor).
struct EmissionNet {
    Mlp trunk;
    Linear mean_head;
    Linear logvar_head;

    std::size_t obs_dim() const { return mean_head.out(); }
    void collect(std::vector<Parameter*>& out);
};

inline constexpr std::size_t kEmissionHidden = 32;
inline constexpr double kMaxLogVariance = 50.0;

EmissionNet make_emission(const std::string& name, std::size_t shared_dim, std::size_t own_dim, std::size_t obs_dim,
                          std::mt19937_64& rng);

Gaussian emission(Tape& tape, const EmissionNet& net, Var z0, Var zj);

// Single-layer GRU run from the last step to the first.
struct BackwardEncoder {
    Parameter w_input;   // (input, 3H): update, reset, candidate
    Parameter u_gates;   // (H, 2H): update, reset
    Parameter u_cand;    // (H, H)
    Parameter bias;      // (3H)

    std::size_t input_dim() const { return w_input.value.dim(0); }
    std::size_t hidden() const { return u_cand.value.dim(0); }
    void collect(std::vector<Parameter*>& out);
};

inline constexpr std::size_t kEncoderHidden = 64;

BackwardEncoder make_encoder(const std::string& name, std::size_t input_dim, std::size_t hidden,
                             std::mt19937_64& rng);

// One GRU update of `h` on input `x`.
Var gru_cell(Tape& tape, const BackwardEncoder& enc, Var x, Var h);

// x[t] has shape (batch, input). Returns h[t] for every t; h[t] depends on x[t..T-1] only.
std::vector<Var> encode_backward(Tape& tape, const BackwardEncoder& enc, const std::vector<Var>& x);

// h* = 0.5 tanh(z Wt + bt) + 0.5 h_r, mean = h* Wp + bp, variance = softplus(h* Wq + bq) + floor.
struct CombinerNet {
    Linear tanh_layer;
    Linear mean_head;
    Linear var_head;

    std::size_t latent_dim() const { return tanh_layer.in(); }
    std::size_t hidden() const { return tanh_layer.out(); }
    void collect(std::vector<Parameter*>& out);
};

CombinerNet make_combiner(const std::string& name, std::size_t latent_dim, std::size_t hidden, std::mt19937_64& rng);

Var combine_hidden(Var tanh_out, Var h_r);
Gaussian combine(Tape& tape, const CombinerNet& net, Var z_prev, Var h_r);

// Random orthogonal (n, n) matrix, sign-normalized QR of a Gaussian draw.
Tensor orthogonal(std::size_t n, std::mt19937_64& rng);

}  // namespace d2pcca::nets
