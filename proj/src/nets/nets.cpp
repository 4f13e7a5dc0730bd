#include "d2pcca/nets/nets.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "d2pcca/errors.hpp"

namespace d2pcca::nets {

using diff::Shape;

namespace {

void require_width(const char* op, Var x, std::size_t expected, const char* what) {
    const Shape& s = x.shape();
    if (s.empty() || s.back() != expected)
        throw ShapeError(std::string(op) + ": " + what + " width " + (s.empty() ? "0" : std::to_string(s.back())) +
                         " does not match expected " + std::to_string(expected));
}

Tensor glorot(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-limit, limit);
    Tensor w(Shape{in, out});
    for (double& v : w.values()) v = u(rng);
    return w;
}

void copy_block(Tensor& dst, const Tensor& src, std::size_t col_offset) {
    for (std::size_t r = 0; r < src.rows(); ++r)
        for (std::size_t c = 0; c < src.cols(); ++c) dst.at(r, col_offset + c) = src.at(r, c);
}

}  // namespace

const char* to_string(Activation a) {
    switch (a) {
        case Activation::Relu: return "relu";
        case Activation::Tanh: return "tanh";
        case Activation::Sigmoid: return "sigmoid";
        case Activation::Softplus: return "softplus";
        case Activation::Identity: return "identity";
    }
    return "identity";
}

Activation activation_from_string(std::string_view name) {
    if (name == "relu") return Activation::Relu;
    if (name == "tanh") return Activation::Tanh;
    if (name == "sigmoid") return Activation::Sigmoid;
    if (name == "softplus") return Activation::Softplus;
    if (name == "identity") return Activation::Identity;
    throw ConfigError("unknown activation '" + std::string(name) + "'");
}

Var activate(Var x, Activation a) {
    switch (a) {
        case Activation::Relu: return relu(x);
        case Activation::Tanh: return tanh(x);
        case Activation::Sigmoid: return sigmoid(x);
        case Activation::Softplus: return softplus(x);
        case Activation::Identity: return x;
    }
    return x;
}

Var Linear::apply(Tape& tape, Var x) const {
    require_width("linear", x, in(), "input");
    return matmul(x, tape.param(weight)) + tape.param(bias);
}

void Linear::collect(std::vector<Parameter*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
}

Linear make_linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
    return Linear{Parameter{name + ".weight", glorot(in, out, rng)}, Parameter{name + ".bias", Tensor(Shape{out})}};
}

void Mlp::collect(std::vector<Parameter*>& out) {
    for (auto& l : layers) l.collect(out);
}

Mlp make_mlp(const std::string& name, const std::vector<std::size_t>& widths, const std::vector<Activation>& acts,
             std::mt19937_64& rng) {
    if (widths.size() < 2 || acts.size() != widths.size() - 1)
        throw ShapeError("make_mlp: need one activation per layer and at least one layer");
    Mlp m;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
        m.layers.push_back(make_linear(name + "." + std::to_string(i), widths[i], widths[i + 1], rng));
    m.activations = acts;
    return m;
}

Var mlp_eval(Tape& tape, const Mlp& mlp, Var input) {
    if (mlp.layers.empty()) throw ShapeError("mlp_eval: empty network");
    for (std::size_t i = 1; i < mlp.layers.size(); ++i)
        if (mlp.layers[i].in() != mlp.layers[i - 1].out())
            throw ShapeError("mlp_eval: layer " + std::to_string(i) + " input width " +
                             std::to_string(mlp.layers[i].in()) + " does not match previous output width " +
                             std::to_string(mlp.layers[i - 1].out()));
    require_width("mlp_eval", input, mlp.in(), "input");
    Var x = input;
    for (std::size_t i = 0; i < mlp.layers.size(); ++i) x = activate(mlp.layers[i].apply(tape, x), mlp.activations[i]);
    return x;
}

const char* to_string(GateVariant v) { return v == GateVariant::Gru ? "gru" : "lstm"; }

GateVariant gate_variant_from_string(std::string_view name) {
    if (name == "gru") return GateVariant::Gru;
    if (name == "lstm") return GateVariant::Lstm;
    throw ConfigError("unknown transition variant '" + std::string(name) + "' (expected gru or lstm)");
}

void TransitionNet::collect(std::vector<Parameter*>& out) {
    h.collect(out);
    g.collect(out);
    if (variant == GateVariant::Lstm) w.collect(out);
    shortcut.collect(out);
    s_head.collect(out);
}

std::size_t transition_hidden_width(std::size_t chain_dim) { return std::max<std::size_t>(16, 4 * chain_dim); }

TransitionNet make_transition(const std::string& name, std::size_t d, GateVariant variant, std::mt19937_64& rng) {
    const std::size_t hid = transition_hidden_width(d);
    TransitionNet net;
    net.variant = variant;
    net.h = make_mlp(name + ".h", {d, hid, d}, {Activation::Relu, Activation::Identity}, rng);
    net.g = make_mlp(name + ".g", {d, hid, d}, {Activation::Relu, Activation::Sigmoid}, rng);
    net.g.layers.back().bias.value.fill(-1.0);
    if (variant == GateVariant::Lstm)
        net.w = make_mlp(name + ".w", {d, hid, d}, {Activation::Relu, Activation::Sigmoid}, rng);
    net.shortcut = make_linear(name + ".shortcut", d, d, rng);
    net.s_head = make_linear(name + ".s", d, d, rng);
    return net;
}

Gaussian gated_transition(Tape& tape, const TransitionNet& net, Var z_prev) {
    require_width("gated_transition", z_prev, net.dim(), "latent");
    const Var h = mlp_eval(tape, net.h, z_prev);
    const Var g = mlp_eval(tape, net.g, z_prev);
    const Var lin = net.shortcut.apply(tape, z_prev);
    const Var keep = net.variant == GateVariant::Gru ? add_scalar(-g, 1.0) : mlp_eval(tape, net.w, z_prev);
    const Var mean = g * h + keep * lin;
    const Var var = add_scalar(softplus(net.s_head.apply(tape, relu(h))), kVarianceFloor);
    return {mean, var};
}

void EmissionNet::collect(std::vector<Parameter*>& out) {
    trunk.collect(out);
    mean_head.collect(out);
    logvar_head.collect(out);
}

EmissionNet make_emission(const std::string& name, std::size_t shared_dim, std::size_t own_dim, std::size_t obs_dim,
                          std::mt19937_64& rng) {
    EmissionNet net;
    net.trunk = make_mlp(name + ".trunk", {shared_dim + own_dim, kEmissionHidden, kEmissionHidden},
                         {Activation::Relu, Activation::Relu}, rng);
    net.mean_head = make_linear(name + ".mean", kEmissionHidden, obs_dim, rng);
    net.logvar_head = make_linear(name + ".logvar", kEmissionHidden, obs_dim, rng);
    return net;
}

Gaussian emission(Tape& tape, const EmissionNet& net, Var z0, Var zj) {
    const Var hx = mlp_eval(tape, net.trunk, diff::concat({z0, zj}));
    const Var mean = net.mean_head.apply(tape, hx);
    // The upper clamp on the log-variance only guards exp against overflow.
    const Var log_var = clamp(net.logvar_head.apply(tape, hx), -std::numeric_limits<double>::infinity(), kMaxLogVariance);
    const Var var = clamp(exp(log_var), kVarianceFloor, std::numeric_limits<double>::infinity());
    return {mean, var};
}

void BackwardEncoder::collect(std::vector<Parameter*>& out) {
    out.push_back(&w_input);
    out.push_back(&u_gates);
    out.push_back(&u_cand);
    out.push_back(&bias);
}

Tensor orthogonal(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Eigen::MatrixXd g(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = nd(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index c = 0; c < q.cols(); ++c)
        if (r(c, c) < 0.0) q.col(c) *= -1.0;
    Tensor out(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    return out;
}

BackwardEncoder make_encoder(const std::string& name, std::size_t input_dim, std::size_t hidden,
                             std::mt19937_64& rng) {
    BackwardEncoder enc;
    Tensor w(Shape{input_dim, 3 * hidden});
    for (std::size_t k = 0; k < 3; ++k) copy_block(w, glorot(input_dim, hidden, rng), k * hidden);
    Tensor u(Shape{hidden, 2 * hidden});
    copy_block(u, orthogonal(hidden, rng), 0);
    copy_block(u, orthogonal(hidden, rng), hidden);
    enc.w_input = Parameter{name + ".w_input", std::move(w)};
    enc.u_gates = Parameter{name + ".u_gates", std::move(u)};
    enc.u_cand = Parameter{name + ".u_cand", orthogonal(hidden, rng)};
    enc.bias = Parameter{name + ".bias", Tensor(Shape{3 * hidden})};
    return enc;
}

Var gru_cell(Tape& tape, const BackwardEncoder& enc, Var x, Var h) {
    const std::size_t H = enc.hidden();
    require_width("gru_cell", x, enc.input_dim(), "input");
    require_width("gru_cell", h, H, "hidden");
    const Var xw = matmul(x, tape.param(enc.w_input)) + tape.param(enc.bias);
    const Var hu = matmul(h, tape.param(enc.u_gates));
    const Var update = sigmoid(slice(xw, 0, H) + slice(hu, 0, H));
    const Var reset = sigmoid(slice(xw, H, 2 * H) + slice(hu, H, 2 * H));
    const Var cand = tanh(slice(xw, 2 * H, 3 * H) + matmul(reset * h, tape.param(enc.u_cand)));
    return add_scalar(-update, 1.0) * cand + update * h;
}

std::vector<Var> encode_backward(Tape& tape, const BackwardEncoder& enc, const std::vector<Var>& x) {
    if (x.empty()) throw ShapeError("encode_backward: sequence must have at least one step");
    const Shape& s = x.front().shape();
    if (s.size() != 2) throw ShapeError("encode_backward: inputs must be (batch, features) matrices");
    Var h = tape.constant(Tensor(Shape{s[0], enc.hidden()}));
    std::vector<Var> out(x.size());
    for (std::size_t t = x.size(); t-- > 0;) {
        h = gru_cell(tape, enc, x[t], h);
        out[t] = h;
    }
    return out;
}

void CombinerNet::collect(std::vector<Parameter*>& out) {
    tanh_layer.collect(out);
    mean_head.collect(out);
    var_head.collect(out);
}

CombinerNet make_combiner(const std::string& name, std::size_t latent_dim, std::size_t hidden, std::mt19937_64& rng) {
    return CombinerNet{make_linear(name + ".tanh", latent_dim, hidden, rng),
                       make_linear(name + ".mean", hidden, latent_dim, rng),
                       make_linear(name + ".var", hidden, latent_dim, rng)};
}

Var combine_hidden(Var tanh_out, Var h_r) { return scale(tanh_out, 0.5) + scale(h_r, 0.5); }

Gaussian combine(Tape& tape, const CombinerNet& net, Var z_prev, Var h_r) {
    require_width("combine", h_r, net.hidden(), "encoder state");
    const Var h_star = combine_hidden(tanh(net.tanh_layer.apply(tape, z_prev)), h_r);
    return {net.mean_head.apply(tape, h_star),
            add_scalar(softplus(net.var_head.apply(tape, h_star)), kVarianceFloor)};
}

}  // namespace d2pcca::nets
