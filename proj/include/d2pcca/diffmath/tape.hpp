#pragma once

#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "d2pcca/diffmath/tensor.hpp"

namespace d2pcca::diff {

// A named trainable array. Networks own Parameters; a Tape reads them
// through leaf nodes and reports gradients back per Parameter.
struct Parameter {
    std::string name;
    Tensor value;
};

enum class Op : std::uint8_t {
    Leaf,
    Constant,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Concat,
    Slice,
    Sum,
    SumLast,
    Mean,
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Square,
    SquareNorm,
    Clamp,
};

const char* op_name(Op op);

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid as long as the tape.
class Var {
public:
    Var() = default;

    Tape* tape() const noexcept { return tape_; }
    std::uint32_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }

private:
    friend class Tape;
    Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::uint32_t id_ = 0;
};

// Operation record for reverse-mode differentiation. Nodes are appended in
// evaluation order, so a reverse index sweep is a reverse topological order.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = delete;
    Tape& operator=(Tape&&) = delete;

    Var leaf(Tensor value);
    Var constant(Tensor value);
    // One leaf per Parameter per tape; repeated calls return the same Var.
    Var param(const Parameter& p);

    const Tensor& value(Var v) const;
    std::size_t size() const noexcept { return nodes_.size(); }

    // Fills adjoints of every node reachable from `loss`; previous adjoints are discarded.
    void backward(Var loss);

    // Adjoint of a node after backward(); exact zeros when unreachable.
    Tensor grad(Var v) const;
    Tensor grad(const Parameter& p) const;

    // Recomputes every non-leaf node from its recorded inputs and reports
    // whether all outputs match the recorded ones bit for bit.
    bool replay_matches() const;

    // Recording entry point used by the free-function operators.
    Var record(Op op, std::vector<std::uint32_t> inputs, double a = 0.0, double b = 0.0, std::size_t i0 = 0,
               std::size_t i1 = 0);

private:
    struct Node {
        Op op = Op::Leaf;
        std::vector<std::uint32_t> inputs;
        double a = 0.0, b = 0.0;
        std::size_t i0 = 0, i1 = 0;
        Tensor value;
    };

    Tensor evaluate(const Node& node) const;
    void accumulate(std::uint32_t id, const Tensor& g);
    void propagate(const Node& node, const Tensor& g);

    std::deque<Node> nodes_;
    std::vector<Tensor> adjoints_;
    std::vector<bool> has_adjoint_;
    std::unordered_map<const Parameter*, std::uint32_t> param_ids_;
    bool backward_done_ = false;
};

// Primitive operations. Binary elementwise ops accept equal shapes, or one
// operand whose shape equals the other's without (or with unit) leading axis.
Var matmul(Var a, Var b);
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var concat(std::span<const Var> parts);
Var slice(Var a, std::size_t begin, std::size_t end);  // along the last axis
Var sum(Var a);
Var sum_last(Var a);  // reduce the last axis
Var mean(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
Var softplus(Var a);
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var square(Var a);
Var square_norm(Var a);
Var clamp(Var a, double lo, double hi);

inline Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }

// Scalar reference implementations shared by the tape and by value-only code.
double sigmoid_value(double x);
double softplus_value(double x);

}  // namespace d2pcca::diff
