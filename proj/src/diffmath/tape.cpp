#include "d2pcca/diffmath/tape.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>

#include "d2pcca/errors.hpp"

namespace d2pcca::diff {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// 0: equal shapes, 1: b broadcasts over a's leading axis, 2: a broadcasts over b's.
int broadcast_mode(Op op, const Shape& a, const Shape& b) {
    if (a == b) return 0;
    auto tail_matches = [](const Shape& big, const Shape& small) {
        if (big.size() == small.size() + 1) return std::equal(small.begin(), small.end(), big.begin() + 1);
        if (big.size() == small.size() && !big.empty() && small[0] == 1 && big[0] != 1)
            return std::equal(small.begin() + 1, small.end(), big.begin() + 1);
        return false;
    };
    if (tail_matches(a, b)) return 1;
    if (tail_matches(b, a)) return 2;
    throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

void require_rank2(Op op, const Shape& s, const char* which) {
    if (s.size() != 2)
        throw ShapeError(std::string(op_name(op)) + ": " + which + " operand must be a matrix, got " + to_string(s));
}

Shape last_axis_resized(const Shape& s, std::size_t n) {
    Shape out = s;
    if (out.empty()) out.push_back(n);
    else out.back() = n;
    return out;
}

}  // namespace

const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Constant: return "constant";
        case Op::MatMul: return "matmul";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::Scale: return "scale";
        case Op::AddScalar: return "add_scalar";
        case Op::Concat: return "concat";
        case Op::Slice: return "slice";
        case Op::Sum: return "sum";
        case Op::SumLast: return "sum_last";
        case Op::Mean: return "mean";
        case Op::Sigmoid: return "sigmoid";
        case Op::Tanh: return "tanh";
        case Op::Relu: return "relu";
        case Op::Softplus: return "softplus";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Sqrt: return "sqrt";
        case Op::Square: return "square";
        case Op::SquareNorm: return "square_norm";
        case Op::Clamp: return "clamp";
    }
    return "unknown";
}

double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus_value(double x) {
    // x + log(1 + e^-x) for positive x keeps large inputs finite.
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    const double y = std::log1p(std::exp(x));
    // exp underflows below about -745; keep the result strictly positive.
    return y > 0.0 ? y : std::numeric_limits<double>::denorm_min();
}

const Tensor& Var::value() const {
    if (!tape_) throw ShapeError("value() on an unbound Var");
    return tape_->value(*this);
}

const Tensor& Tape::value(Var v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) throw ShapeError("Var does not belong to this tape");
    return nodes_[v.id()].value;
}

Var Tape::leaf(Tensor value) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    backward_done_ = false;
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::constant(Tensor value) {
    Node n;
    n.op = Op::Constant;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    backward_done_ = false;
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::param(const Parameter& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var(this, it->second);
    Var v = leaf(p.value);
    param_ids_.emplace(&p, v.id());
    return v;
}

Var Tape::record(Op op, std::vector<std::uint32_t> inputs, double a, double b, std::size_t i0, std::size_t i1) {
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.a = a;
    n.b = b;
    n.i0 = i0;
    n.i1 = i1;
    for (auto id : n.inputs)
        if (id >= nodes_.size()) throw ShapeError(std::string(op_name(op)) + ": input is not on this tape");
    n.value = evaluate(n);
    nodes_.push_back(std::move(n));
    backward_done_ = false;
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Tensor Tape::evaluate(const Node& node) const {
    auto in = [&](std::size_t k) -> const Tensor& { return nodes_[node.inputs[k]].value; };
    auto unary = [&](auto&& fn) {
        const Tensor& x = in(0);
        Tensor out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = fn(x[i]);
        return out;
    };
    auto binary = [&](auto&& fn) {
        const Tensor& x = in(0);
        const Tensor& y = in(1);
        const int mode = broadcast_mode(node.op, x.shape(), y.shape());
        const Shape& shape = mode == 2 ? y.shape() : x.shape();
        Tensor out(shape);
        const std::size_t nx = x.size(), ny = y.size();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(x[i % nx], y[i % ny]);
        return out;
    };

    switch (node.op) {
        case Op::Leaf:
        case Op::Constant:
            return node.value;
        case Op::MatMul: {
            const Tensor& x = in(0);
            const Tensor& y = in(1);
            require_rank2(node.op, x.shape(), "left");
            require_rank2(node.op, y.shape(), "right");
            if (x.dim(1) != y.dim(0))
                throw ShapeError("matmul: inner dimensions differ for shapes " + to_string(x.shape()) + " and " +
                                 to_string(y.shape()));
            Tensor out(Shape{x.dim(0), y.dim(1)});
            MutMap(out.data(), x.dim(0), y.dim(1)).noalias() =
                ConstMap(x.data(), x.dim(0), x.dim(1)) * ConstMap(y.data(), y.dim(0), y.dim(1));
            return out;
        }
        case Op::Add: return binary([](double u, double v) { return u + v; });
        case Op::Sub: return binary([](double u, double v) { return u - v; });
        case Op::Mul: return binary([](double u, double v) { return u * v; });
        case Op::Div:
            for (double v : in(1).values())
                if (v == 0.0) throw DomainError("div: division by zero");
            return binary([](double u, double v) { return u / v; });
        case Op::Scale: return unary([c = node.a](double u) { return c * u; });
        case Op::AddScalar: return unary([c = node.a](double u) { return u + c; });
        case Op::Concat: {
            const Tensor& first = in(0);
            if (first.rank() == 0) throw ShapeError("concat: scalar operands are not supported");
            const std::size_t rows = first.rows();
            std::size_t cols = 0;
            for (std::size_t k = 0; k < node.inputs.size(); ++k) {
                const Tensor& part = in(k);
                if (part.rank() != first.rank() || part.rows() != rows)
                    throw ShapeError("concat: incompatible shapes " + to_string(first.shape()) + " and " +
                                     to_string(part.shape()));
                cols += part.cols();
            }
            Tensor out(last_axis_resized(first.shape(), cols));
            std::size_t offset = 0;
            for (std::size_t k = 0; k < node.inputs.size(); ++k) {
                const Tensor& part = in(k);
                const std::size_t c = part.cols();
                for (std::size_t r = 0; r < rows; ++r)
                    std::copy_n(part.data() + r * c, c, out.data() + r * cols + offset);
                offset += c;
            }
            return out;
        }
        case Op::Slice: {
            const Tensor& x = in(0);
            if (x.rank() == 0 || node.i0 >= node.i1 || node.i1 > x.cols())
                throw ShapeError("slice: range [" + std::to_string(node.i0) + ", " + std::to_string(node.i1) +
                                 ") invalid for shape " + to_string(x.shape()));
            const std::size_t rows = x.rows(), cols = x.cols(), w = node.i1 - node.i0;
            Tensor out(last_axis_resized(x.shape(), w));
            for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.data() + r * cols + node.i0, w, out.data() + r * w);
            return out;
        }
        case Op::Sum: {
            double s = 0.0;
            for (double v : in(0).values()) s += v;
            return Tensor::scalar(s);
        }
        case Op::SumLast: {
            const Tensor& x = in(0);
            if (x.rank() == 0) throw ShapeError("sum_last: scalar operand");
            Shape shape(x.shape().begin(), x.shape().end() - 1);
            Tensor out(shape);
            const std::size_t cols = x.cols();
            for (std::size_t r = 0; r < out.size(); ++r) {
                double s = 0.0;
                for (std::size_t c = 0; c < cols; ++c) s += x[r * cols + c];
                out[r] = s;
            }
            return out;
        }
        case Op::Mean: {
            const Tensor& x = in(0);
            double s = 0.0;
            for (double v : x.values()) s += v;
            return Tensor::scalar(s / static_cast<double>(x.size()));
        }
        case Op::Sigmoid: return unary(sigmoid_value);
        case Op::Tanh: return unary([](double u) { return std::tanh(u); });
        case Op::Relu: return unary([](double u) { return u > 0.0 ? u : 0.0; });
        case Op::Softplus: return unary(softplus_value);
        case Op::Exp: {
            Tensor out = unary([](double u) { return std::exp(u); });
            if (!out.all_finite()) throw DomainError("exp: overflow");
            return out;
        }
        case Op::Log:
            for (double v : in(0).values())
                if (!(v > 0.0)) throw DomainError("log: non-positive argument " + std::to_string(v));
            return unary([](double u) { return std::log(u); });
        case Op::Sqrt:
            for (double v : in(0).values())
                if (!(v >= 0.0)) throw DomainError("sqrt: negative argument " + std::to_string(v));
            return unary([](double u) { return std::sqrt(u); });
        case Op::Square: return unary([](double u) { return u * u; });
        case Op::SquareNorm: {
            double s = 0.0;
            for (double v : in(0).values()) s += v * v;
            return Tensor::scalar(s);
        }
        case Op::Clamp:
            return unary([lo = node.a, hi = node.b](double u) { return u < lo ? lo : (u > hi ? hi : u); });
    }
    throw ShapeError("unknown op");
}

void Tape::accumulate(std::uint32_t id, const Tensor& g) {
    if (!has_adjoint_[id]) {
        adjoints_[id] = g;
        has_adjoint_[id] = true;
        return;
    }
    Tensor& dst = adjoints_[id];
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

void Tape::propagate(const Node& node, const Tensor& g) {
    auto in = [&](std::size_t k) -> const Tensor& { return nodes_[node.inputs[k]].value; };
    auto elementwise = [&](auto&& deriv) {
        const Tensor& x = in(0);
        Tensor gx(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] = g[i] * deriv(x[i], node.value[i]);
        accumulate(node.inputs[0], gx);
    };
    // Reduces an output-shaped gradient onto an operand that may have been broadcast.
    auto reduce_to = [&](std::size_t k, auto&& contrib) {
        const Tensor& x = in(k);
        Tensor gx(x.shape());
        const std::size_t nx = x.size();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i % nx] += contrib(i);
        accumulate(node.inputs[k], gx);
    };

    switch (node.op) {
        case Op::Leaf:
        case Op::Constant:
            return;
        case Op::MatMul: {
            const Tensor& x = in(0);
            const Tensor& y = in(1);
            const ConstMap gm(g.data(), g.dim(0), g.dim(1));
            Tensor gx(x.shape()), gy(y.shape());
            MutMap(gx.data(), x.dim(0), x.dim(1)).noalias() = gm * ConstMap(y.data(), y.dim(0), y.dim(1)).transpose();
            MutMap(gy.data(), y.dim(0), y.dim(1)).noalias() = ConstMap(x.data(), x.dim(0), x.dim(1)).transpose() * gm;
            accumulate(node.inputs[0], gx);
            accumulate(node.inputs[1], gy);
            return;
        }
        case Op::Add:
            reduce_to(0, [&](std::size_t i) { return g[i]; });
            reduce_to(1, [&](std::size_t i) { return g[i]; });
            return;
        case Op::Sub:
            reduce_to(0, [&](std::size_t i) { return g[i]; });
            reduce_to(1, [&](std::size_t i) { return -g[i]; });
            return;
        case Op::Mul: {
            const Tensor& x = in(0);
            const Tensor& y = in(1);
            reduce_to(0, [&](std::size_t i) { return g[i] * y[i % y.size()]; });
            reduce_to(1, [&](std::size_t i) { return g[i] * x[i % x.size()]; });
            return;
        }
        case Op::Div: {
            const Tensor& x = in(0);
            const Tensor& y = in(1);
            reduce_to(0, [&](std::size_t i) { return g[i] / y[i % y.size()]; });
            reduce_to(1, [&](std::size_t i) {
                const double d = y[i % y.size()];
                return -g[i] * x[i % x.size()] / (d * d);
            });
            return;
        }
        case Op::Scale:
            elementwise([c = node.a](double, double) { return c; });
            return;
        case Op::AddScalar:
            elementwise([](double, double) { return 1.0; });
            return;
        case Op::Concat: {
            const std::size_t rows = node.value.rows(), cols = node.value.cols();
            std::size_t offset = 0;
            for (std::size_t k = 0; k < node.inputs.size(); ++k) {
                const Tensor& part = in(k);
                const std::size_t c = part.cols();
                Tensor gp(part.shape());
                for (std::size_t r = 0; r < rows; ++r) std::copy_n(g.data() + r * cols + offset, c, gp.data() + r * c);
                accumulate(node.inputs[k], gp);
                offset += c;
            }
            return;
        }
        case Op::Slice: {
            const Tensor& x = in(0);
            Tensor gx(x.shape());
            const std::size_t rows = x.rows(), cols = x.cols(), w = node.i1 - node.i0;
            for (std::size_t r = 0; r < rows; ++r) std::copy_n(g.data() + r * w, w, gx.data() + r * cols + node.i0);
            accumulate(node.inputs[0], gx);
            return;
        }
        case Op::Sum: {
            Tensor gx(in(0).shape(), g.item());
            accumulate(node.inputs[0], gx);
            return;
        }
        case Op::SumLast: {
            const Tensor& x = in(0);
            Tensor gx(x.shape());
            const std::size_t cols = x.cols();
            for (std::size_t i = 0; i < x.size(); ++i) gx[i] = g[i / cols];
            accumulate(node.inputs[0], gx);
            return;
        }
        case Op::Mean: {
            const Tensor& x = in(0);
            Tensor gx(x.shape(), g.item() / static_cast<double>(x.size()));
            accumulate(node.inputs[0], gx);
            return;
        }
        case Op::Sigmoid:
            elementwise([](double, double y) { return y * (1.0 - y); });
            return;
        case Op::Tanh:
            elementwise([](double, double y) { return 1.0 - y * y; });
            return;
        case Op::Relu:
            elementwise([](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
            return;
        case Op::Softplus:
            elementwise([](double x, double) { return sigmoid_value(x); });
            return;
        case Op::Exp:
            elementwise([](double, double y) { return y; });
            return;
        case Op::Log:
            elementwise([](double x, double) { return 1.0 / x; });
            return;
        case Op::Sqrt:
            elementwise([](double, double y) {
                if (y == 0.0) throw DomainError("sqrt: derivative undefined at zero");
                return 0.5 / y;
            });
            return;
        case Op::Square:
            elementwise([](double x, double) { return 2.0 * x; });
            return;
        case Op::SquareNorm: {
            const Tensor& x = in(0);
            Tensor gx(x.shape());
            const double s = g.item();
            for (std::size_t i = 0; i < x.size(); ++i) gx[i] = 2.0 * x[i] * s;
            accumulate(node.inputs[0], gx);
            return;
        }
        case Op::Clamp:
            elementwise([lo = node.a, hi = node.b](double x, double) { return x >= lo && x <= hi ? 1.0 : 0.0; });
            return;
    }
}

void Tape::backward(Var loss) {
    if (loss.tape() != this || loss.id() >= nodes_.size()) throw ShapeError("backward: loss is not on this tape");
    if (nodes_[loss.id()].value.size() != 1)
        throw ShapeError("backward: loss must be scalar, got shape " + to_string(nodes_[loss.id()].value.shape()));
    adjoints_.assign(nodes_.size(), Tensor());
    has_adjoint_.assign(nodes_.size(), false);
    accumulate(loss.id(), Tensor(nodes_[loss.id()].value.shape(), 1.0));
    for (std::size_t k = loss.id() + 1; k-- > 0;) {
        if (!has_adjoint_[k]) continue;
        propagate(nodes_[k], adjoints_[k]);
    }
    backward_done_ = true;
}

Tensor Tape::grad(Var v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) throw ShapeError("grad: Var is not on this tape");
    if (!backward_done_) throw ShapeError("grad: backward() has not been run since the last recording");
    if (v.id() < has_adjoint_.size() && has_adjoint_[v.id()]) return adjoints_[v.id()];
    return Tensor(nodes_[v.id()].value.shape(), 0.0);
}

Tensor Tape::grad(const Parameter& p) const {
    auto it = param_ids_.find(&p);
    if (it == param_ids_.end()) return Tensor(p.value.shape(), 0.0);
    return grad(Var(const_cast<Tape*>(this), it->second));
}

bool Tape::replay_matches() const {
    for (const Node& n : nodes_) {
        if (n.op == Op::Leaf || n.op == Op::Constant) continue;
        if (!evaluate(n).identical(n.value)) return false;
    }
    return true;
}

namespace {

Tape& same_tape(Op op, Var a, Var b) {
    if (!a.valid() || a.tape() != b.tape())
        throw ShapeError(std::string(op_name(op)) + ": operands live on different tapes");
    return *a.tape();
}

Tape& tape_of(Op op, Var a) {
    if (!a.valid()) throw ShapeError(std::string(op_name(op)) + ": unbound operand");
    return *a.tape();
}

}  // namespace

Var matmul(Var a, Var b) { return same_tape(Op::MatMul, a, b).record(Op::MatMul, {a.id(), b.id()}); }
Var operator+(Var a, Var b) { return same_tape(Op::Add, a, b).record(Op::Add, {a.id(), b.id()}); }
Var operator-(Var a, Var b) { return same_tape(Op::Sub, a, b).record(Op::Sub, {a.id(), b.id()}); }
Var operator*(Var a, Var b) { return same_tape(Op::Mul, a, b).record(Op::Mul, {a.id(), b.id()}); }
Var operator/(Var a, Var b) { return same_tape(Op::Div, a, b).record(Op::Div, {a.id(), b.id()}); }
Var operator-(Var a) { return scale(a, -1.0); }
Var scale(Var a, double c) { return tape_of(Op::Scale, a).record(Op::Scale, {a.id()}, c); }
Var add_scalar(Var a, double c) { return tape_of(Op::AddScalar, a).record(Op::AddScalar, {a.id()}, c); }

Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat: no operands");
    std::vector<std::uint32_t> ids;
    ids.reserve(parts.size());
    for (const Var& p : parts) {
        if (p.tape() != parts[0].tape()) throw ShapeError("concat: operands live on different tapes");
        ids.push_back(p.id());
    }
    return tape_of(Op::Concat, parts[0]).record(Op::Concat, std::move(ids));
}

Var slice(Var a, std::size_t begin, std::size_t end) {
    return tape_of(Op::Slice, a).record(Op::Slice, {a.id()}, 0.0, 0.0, begin, end);
}

Var sum(Var a) { return tape_of(Op::Sum, a).record(Op::Sum, {a.id()}); }
Var sum_last(Var a) { return tape_of(Op::SumLast, a).record(Op::SumLast, {a.id()}); }
Var mean(Var a) { return tape_of(Op::Mean, a).record(Op::Mean, {a.id()}); }
Var sigmoid(Var a) { return tape_of(Op::Sigmoid, a).record(Op::Sigmoid, {a.id()}); }
Var tanh(Var a) { return tape_of(Op::Tanh, a).record(Op::Tanh, {a.id()}); }
Var relu(Var a) { return tape_of(Op::Relu, a).record(Op::Relu, {a.id()}); }
Var softplus(Var a) { return tape_of(Op::Softplus, a).record(Op::Softplus, {a.id()}); }
Var exp(Var a) { return tape_of(Op::Exp, a).record(Op::Exp, {a.id()}); }
Var log(Var a) { return tape_of(Op::Log, a).record(Op::Log, {a.id()}); }
Var sqrt(Var a) { return tape_of(Op::Sqrt, a).record(Op::Sqrt, {a.id()}); }
Var square(Var a) { return tape_of(Op::Square, a).record(Op::Square, {a.id()}); }
Var square_norm(Var a) { return tape_of(Op::SquareNorm, a).record(Op::SquareNorm, {a.id()}); }

Var clamp(Var a, double lo, double hi) {
    if (!(lo <= hi)) throw DomainError("clamp: lower bound exceeds upper bound");
    return tape_of(Op::Clamp, a).record(Op::Clamp, {a.id()}, lo, hi);
}

}  // namespace d2pcca::diff
