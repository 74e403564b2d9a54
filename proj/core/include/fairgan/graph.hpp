#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fairgan/tensor.hpp"

namespace fairgan {

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid for the tape's lifetime.
class Value {
public:
    Value() = default;
    Value(Tape* tape, int id) : tape_(tape), id_(id) {}

    int id() const { return id_; }
    Tape* tape() const { return tape_; }
    bool valid() const { return tape_ != nullptr && id_ >= 0; }

    const Tensor& t() const;
    const std::vector<int>& shape() const { return t().shape; }

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

// Reverse-mode automatic differentiation over an eagerly evaluated trace.
//
// Each operation appends a node and computes its value immediately. The
// backward pass is itself graph construction: cotangents are ordinary nodes,
// so gradients are differentiable and gradient penalties that differentiate
// through a gradient (R1) fall out without special casing.
//
// A tape is single-threaded; independent tapes are independent.
class Tape {
public:
    enum class Op : uint8_t {
        Leaf,
        Add, Sub, Mul, Div,
        Scale, AddScalar,
        MatMul,
        Conv2d, Conv2dGx, Conv2dGk,
        Leaky, Tanh, Sigmoid, Softplus, Exp, Log,
        Softmax,
        RowSum, ColSum, BcastRows, BcastCols, BcastFull,
        Sum, Mean, SqNorm,
        Reshape,
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- leaves ----
    Value constant(Tensor t);
    Value constant_scalar(double x);
    // Differentiable input; retrieve its cotangent with grad().
    Value input(Tensor t, bool differentiable = false);
    // Leaf bound to external storage: backward() accumulates into bound.grad.
    Value param(Tensor& bound);

    // ---- elementwise (same shape) ----
    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value mul(Value a, Value b);
    Value div(Value a, Value b);

    Value scale(Value a, double c);
    Value add_scalar(Value a, double c);
    Value neg(Value a) { return scale(a, -1.0); }

    // ---- linear algebra ----
    Value matmul(Value a, Value b, bool trans_a = false, bool trans_b = false);
    // x @ W + b with b broadcast across rows; b has shape {K} or {1,K}.
    Value affine(Value x, Value w, Value b);

    // ---- convolution (NCHW x FCKhKw) ----
    Value conv2d(Value x, Value k, int stride, int pad);
    // Adjoint of conv2d w.r.t. its input; doubles as transposed convolution.
    Value conv2d_transpose(Value g, Value k, int stride, int pad,
                           std::vector<int> out_shape);

    // ---- nonlinearities ----
    Value leaky_relu(Value a, double slope);
    Value relu(Value a) { return leaky_relu(a, 0.0); }
    Value tanh(Value a);
    Value sigmoid(Value a);
    Value softplus(Value a);
    Value exp(Value a);
    Value log(Value a);
    Value softmax(Value a);  // row-wise on {N,K}

    // ---- structure ----
    Value row_sum(Value a);                       // {N,K} -> {N,1}
    Value col_sum(Value a);                       // {N,K} -> {1,K}
    Value broadcast_rows(Value rowvec, int rows); // {K}|{1,K} -> {rows,K}
    Value broadcast_cols(Value colvec, int cols); // {N,1} -> {N,cols}
    Value broadcast_full(Value scalar, std::vector<int> shape);
    Value reshape(Value a, std::vector<int> shape);

    // ---- reductions to scalar {1} ----
    Value sum(Value a);
    Value mean(Value a);
    Value squared_norm(Value a);

    // ---- differentiation ----
    // Accumulates d(out)/d(p) into every bound leaf's Tensor::grad.
    // out must be scalar.
    void backward(Value out);
    // Builds d(out)/d(wrt) as new tape nodes and returns it; wrt must be a
    // differentiable leaf or intermediate. Result is itself differentiable.
    Value grad(Value out, Value wrt);

    const Tensor& value_of(int id) const { return nodes_[id].val; }
    double scalar(Value v) const;
    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Op op = Op::Leaf;
        int in0 = -1, in1 = -1;
        Tensor val;
        double c0 = 0.0;      // scale factor / shift / leaky slope
        int i0 = 0, i1 = 0;   // matmul transpose flags; conv stride and pad
        bool diff = false;    // reachable from a differentiable leaf
        Tensor* bound = nullptr;
    };

    int push(Node n, const char* opname);
    Value make_binary(Op op, Value a, Value b, const char* name);
    Value make_unary(Op op, Value a, const char* name, double c0 = 0.0);
    void check_same_tape(Value v) const;

    // Shared cotangent construction for backward() and grad().
    std::vector<int> build_cotangents(Value out);

    std::vector<Node> nodes_;
};

const char* op_name(Tape::Op op);

}  // namespace fairgan
