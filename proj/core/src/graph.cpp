#include "fairgan/graph.hpp"

#include <algorithm>
#include <cmath>

namespace fairgan {

const Tensor& Value::t() const { return tape_->value_of(id_); }

const char* op_name(Tape::Op op) {
    switch (op) {
        case Tape::Op::Leaf: return "leaf";
        case Tape::Op::Add: return "add";
        case Tape::Op::Sub: return "sub";
        case Tape::Op::Mul: return "mul";
        case Tape::Op::Div: return "div";
        case Tape::Op::Scale: return "scale";
        case Tape::Op::AddScalar: return "add_scalar";
        case Tape::Op::MatMul: return "matmul";
        case Tape::Op::Conv2d: return "conv2d";
        case Tape::Op::Conv2dGx: return "conv2d_transpose";
        case Tape::Op::Conv2dGk: return "conv2d_kernel_grad";
        case Tape::Op::Leaky: return "leaky_relu";
        case Tape::Op::Tanh: return "tanh";
        case Tape::Op::Sigmoid: return "sigmoid";
        case Tape::Op::Softplus: return "softplus";
        case Tape::Op::Exp: return "exp";
        case Tape::Op::Log: return "log";
        case Tape::Op::Softmax: return "softmax";
        case Tape::Op::RowSum: return "row_sum";
        case Tape::Op::ColSum: return "col_sum";
        case Tape::Op::BcastRows: return "broadcast_rows";
        case Tape::Op::BcastCols: return "broadcast_cols";
        case Tape::Op::BcastFull: return "broadcast_full";
        case Tape::Op::Sum: return "sum";
        case Tape::Op::Mean: return "mean";
        case Tape::Op::SqNorm: return "squared_norm";
        case Tape::Op::Reshape: return "reshape";
    }
    return "?";
}

namespace {

void require_rank2(const Tensor& t, const char* who) {
    if (t.rank() != 2) {
        throw ConfigError(std::string(who) + " expects a rank-2 tensor, got shape (" +
                          t.shape_str() + ")");
    }
}

// y[n,f,oh,ow] = sum_{c,a,b} x[n,c,oh*s-p+a,ow*s-p+b] * k[f,c,a,b]
Tensor eval_conv2d(const Tensor& x, const Tensor& k, int s, int p) {
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int F = k.shape[0], KH = k.shape[2], KW = k.shape[3];
    const int OH = (H + 2 * p - KH) / s + 1;
    const int OW = (W + 2 * p - KW) / s + 1;
    Tensor y({N, F, OH, OW});
    const size_t xn = static_cast<size_t>(C) * H * W;
    const size_t yn = static_cast<size_t>(F) * OH * OW;
    for (int n = 0; n < N; ++n) {
        for (int f = 0; f < F; ++f) {
            for (int oh = 0; oh < OH; ++oh) {
                for (int ow = 0; ow < OW; ++ow) {
                    double acc = 0.0;
                    for (int c = 0; c < C; ++c) {
                        const double* xp = &x.v[n * xn + (static_cast<size_t>(c)) * H * W];
                        const double* kp = &k.v[((static_cast<size_t>(f) * C + c)) * KH * KW];
                        for (int a = 0; a < KH; ++a) {
                            const int i = oh * s - p + a;
                            if (i < 0 || i >= H) continue;
                            for (int b = 0; b < KW; ++b) {
                                const int j = ow * s - p + b;
                                if (j < 0 || j >= W) continue;
                                acc += xp[static_cast<size_t>(i) * W + j] * kp[a * KW + b];
                            }
                        }
                    }
                    y.v[n * yn + (static_cast<size_t>(f) * OH + oh) * OW + ow] = acc;
                }
            }
        }
    }
    return y;
}

// Adjoint of conv2d w.r.t. x: scatter g back through the kernel.
Tensor eval_conv2d_gx(const Tensor& g, const Tensor& k, int s, int p,
                      const std::vector<int>& xshape) {
    const int N = g.shape[0], F = g.shape[1], OH = g.shape[2], OW = g.shape[3];
    const int C = xshape[1], H = xshape[2], W = xshape[3];
    const int KH = k.shape[2], KW = k.shape[3];
    Tensor xg(xshape);
    const size_t gn = static_cast<size_t>(F) * OH * OW;
    const size_t xn = static_cast<size_t>(C) * H * W;
    for (int n = 0; n < N; ++n) {
        for (int f = 0; f < F; ++f) {
            for (int oh = 0; oh < OH; ++oh) {
                for (int ow = 0; ow < OW; ++ow) {
                    const double gv = g.v[n * gn + (static_cast<size_t>(f) * OH + oh) * OW + ow];
                    if (gv == 0.0) continue;
                    for (int c = 0; c < C; ++c) {
                        double* xp = &xg.v[n * xn + static_cast<size_t>(c) * H * W];
                        const double* kp = &k.v[(static_cast<size_t>(f) * C + c) * KH * KW];
                        for (int a = 0; a < KH; ++a) {
                            const int i = oh * s - p + a;
                            if (i < 0 || i >= H) continue;
                            for (int b = 0; b < KW; ++b) {
                                const int j = ow * s - p + b;
                                if (j < 0 || j >= W) continue;
                                xp[static_cast<size_t>(i) * W + j] += gv * kp[a * KW + b];
                            }
                        }
                    }
                }
            }
        }
    }
    return xg;
}

// Adjoint of conv2d w.r.t. k.
Tensor eval_conv2d_gk(const Tensor& x, const Tensor& g, int s, int p,
                      const std::vector<int>& kshape) {
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int F = g.shape[1], OH = g.shape[2], OW = g.shape[3];
    const int KH = kshape[2], KW = kshape[3];
    Tensor kg(kshape);
    const size_t xn = static_cast<size_t>(C) * H * W;
    const size_t gn = static_cast<size_t>(F) * OH * OW;
    for (int n = 0; n < N; ++n) {
        for (int f = 0; f < F; ++f) {
            for (int oh = 0; oh < OH; ++oh) {
                for (int ow = 0; ow < OW; ++ow) {
                    const double gv = g.v[n * gn + (static_cast<size_t>(f) * OH + oh) * OW + ow];
                    if (gv == 0.0) continue;
                    for (int c = 0; c < C; ++c) {
                        const double* xp = &x.v[n * xn + static_cast<size_t>(c) * H * W];
                        double* kp = &kg.v[(static_cast<size_t>(f) * C + c) * KH * KW];
                        for (int a = 0; a < KH; ++a) {
                            const int i = oh * s - p + a;
                            if (i < 0 || i >= H) continue;
                            for (int b = 0; b < KW; ++b) {
                                const int j = ow * s - p + b;
                                if (j < 0 || j >= W) continue;
                                kp[a * KW + b] += gv * xp[static_cast<size_t>(i) * W + j];
                            }
                        }
                    }
                }
            }
        }
    }
    return kg;
}

}  // namespace

// ---------------------------------------------------------------------------
// node construction
// ---------------------------------------------------------------------------

int Tape::push(Node n, const char* opname) {
    if (!n.val.all_finite()) {
        throw NumericalError(std::string(opname) + " produced non-finite values");
    }
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size() - 1);
}

void Tape::check_same_tape(Value v) const {
    if (v.tape() != this || v.id() < 0 || v.id() >= static_cast<int>(nodes_.size())) {
        throw UsageError("value does not belong to this tape");
    }
}

Value Tape::constant(Tensor t) {
    Node n;
    n.val = std::move(t);
    return Value(this, push(std::move(n), "constant"));
}

Value Tape::constant_scalar(double x) {
    return constant(Tensor({1}, {x}));
}

Value Tape::input(Tensor t, bool differentiable) {
    Node n;
    n.val = std::move(t);
    n.diff = differentiable;
    return Value(this, push(std::move(n), "input"));
}

Value Tape::param(Tensor& bound) {
    Node n;
    n.val = bound;  // copy of current values
    n.diff = true;
    n.bound = &bound;
    return Value(this, push(std::move(n), "param"));
}

Value Tape::make_binary(Op op, Value a, Value b, const char* name) {
    check_same_tape(a);
    check_same_tape(b);
    const Tensor& ta = a.t();
    const Tensor& tb = b.t();
    if (!ta.same_shape(tb)) {
        throw ConfigError(std::string(name) + ": shape mismatch (" + ta.shape_str() +
                          ") vs (" + tb.shape_str() + ")");
    }
    Node n;
    n.op = op;
    n.in0 = a.id();
    n.in1 = b.id();
    n.diff = nodes_[a.id()].diff || nodes_[b.id()].diff;
    n.val = Tensor(ta.shape);
    const size_t m = ta.numel();
    switch (op) {
        case Op::Add: for (size_t i = 0; i < m; ++i) n.val.v[i] = ta.v[i] + tb.v[i]; break;
        case Op::Sub: for (size_t i = 0; i < m; ++i) n.val.v[i] = ta.v[i] - tb.v[i]; break;
        case Op::Mul: for (size_t i = 0; i < m; ++i) n.val.v[i] = ta.v[i] * tb.v[i]; break;
        case Op::Div: for (size_t i = 0; i < m; ++i) n.val.v[i] = ta.v[i] / tb.v[i]; break;
        default: throw UsageError("make_binary: bad op");
    }
    return Value(this, push(std::move(n), name));
}

Value Tape::add(Value a, Value b) { return make_binary(Op::Add, a, b, "add"); }
Value Tape::sub(Value a, Value b) { return make_binary(Op::Sub, a, b, "sub"); }
Value Tape::mul(Value a, Value b) { return make_binary(Op::Mul, a, b, "mul"); }
Value Tape::div(Value a, Value b) { return make_binary(Op::Div, a, b, "div"); }

Value Tape::make_unary(Op op, Value a, const char* name, double c0) {
    check_same_tape(a);
    const Tensor& ta = a.t();
    Node n;
    n.op = op;
    n.in0 = a.id();
    n.c0 = c0;
    n.diff = nodes_[a.id()].diff;
    n.val = Tensor(ta.shape);
    const size_t m = ta.numel();
    switch (op) {
        case Op::Scale:
            for (size_t i = 0; i < m; ++i) n.val.v[i] = ta.v[i] * c0;
            break;
        case Op::AddScalar:
            for (size_t i = 0; i < m; ++i) n.val.v[i] = ta.v[i] + c0;
            break;
        case Op::Leaky:
            for (size_t i = 0; i < m; ++i) {
                const double x = ta.v[i];
                n.val.v[i] = x > 0.0 ? x : c0 * x;
            }
            break;
        case Op::Tanh:
            for (size_t i = 0; i < m; ++i) n.val.v[i] = std::tanh(ta.v[i]);
            break;
        case Op::Sigmoid:
            for (size_t i = 0; i < m; ++i) {
                const double x = ta.v[i];
                // evaluate on the non-overflowing branch
                n.val.v[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                      : std::exp(x) / (1.0 + std::exp(x));
            }
            break;
        case Op::Softplus:
            for (size_t i = 0; i < m; ++i) {
                const double x = ta.v[i];
                n.val.v[i] = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
            }
            break;
        case Op::Exp:
            for (size_t i = 0; i < m; ++i) n.val.v[i] = std::exp(ta.v[i]);
            break;
        case Op::Log:
            for (size_t i = 0; i < m; ++i) n.val.v[i] = std::log(ta.v[i]);
            break;
        default: throw UsageError("make_unary: bad op");
    }
    return Value(this, push(std::move(n), name));
}

Value Tape::scale(Value a, double c) { return make_unary(Op::Scale, a, "scale", c); }
Value Tape::add_scalar(Value a, double c) { return make_unary(Op::AddScalar, a, "add_scalar", c); }
Value Tape::leaky_relu(Value a, double slope) { return make_unary(Op::Leaky, a, "leaky_relu", slope); }
Value Tape::tanh(Value a) { return make_unary(Op::Tanh, a, "tanh"); }
Value Tape::sigmoid(Value a) { return make_unary(Op::Sigmoid, a, "sigmoid"); }
Value Tape::softplus(Value a) { return make_unary(Op::Softplus, a, "softplus"); }
Value Tape::exp(Value a) { return make_unary(Op::Exp, a, "exp"); }
Value Tape::log(Value a) { return make_unary(Op::Log, a, "log"); }

Value Tape::matmul(Value a, Value b, bool trans_a, bool trans_b) {
    check_same_tape(a);
    check_same_tape(b);
    const Tensor& ta = a.t();
    const Tensor& tb = b.t();
    require_rank2(ta, "matmul");
    require_rank2(tb, "matmul");
    const int m = trans_a ? ta.cols() : ta.rows();
    const int ka = trans_a ? ta.rows() : ta.cols();
    const int kb = trans_b ? tb.cols() : tb.rows();
    const int p = trans_b ? tb.rows() : tb.cols();
    if (ka != kb) {
        throw ConfigError("matmul: inner dimensions disagree (" + ta.shape_str() + ")" +
                          (trans_a ? "^T" : "") + " x (" + tb.shape_str() + ")" +
                          (trans_b ? "^T" : ""));
    }
    Node n;
    n.op = Op::MatMul;
    n.in0 = a.id();
    n.in1 = b.id();
    n.i0 = trans_a ? 1 : 0;
    n.i1 = trans_b ? 1 : 0;
    n.diff = nodes_[a.id()].diff || nodes_[b.id()].diff;
    n.val = Tensor({m, p});
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < p; ++j) {
            double acc = 0.0;
            for (int t = 0; t < ka; ++t) {
                const double av = trans_a ? ta.at(t, i) : ta.at(i, t);
                const double bv = trans_b ? tb.at(j, t) : tb.at(t, j);
                acc += av * bv;
            }
            n.val.at(i, j) = acc;
        }
    }
    return Value(this, push(std::move(n), "matmul"));
}

Value Tape::affine(Value x, Value w, Value b) {
    Value y = matmul(x, w);
    const Tensor& tb = b.t();
    const int k = y.t().cols();
    const int expect = static_cast<int>(tb.numel());
    if (expect != k || (tb.rank() == 2 && tb.rows() != 1)) {
        throw ConfigError("affine: bias shape (" + tb.shape_str() + ") incompatible with width " +
                          std::to_string(k));
    }
    return add(y, broadcast_rows(b, y.t().rows()));
}

Value Tape::conv2d(Value x, Value k, int stride, int pad) {
    check_same_tape(x);
    check_same_tape(k);
    const Tensor& tx = x.t();
    const Tensor& tk = k.t();
    if (tx.rank() != 4 || tk.rank() != 4) {
        throw ConfigError("conv2d expects NCHW input and FCKhKw kernel");
    }
    if (tx.shape[1] != tk.shape[1]) {
        throw ConfigError("conv2d: channel mismatch, input (" + tx.shape_str() +
                          ") vs kernel (" + tk.shape_str() + ")");
    }
    if (stride < 1 || stride > 2) throw ConfigError("conv2d: stride must be 1 or 2");
    const int H = tx.shape[2], W = tx.shape[3];
    const int KH = tk.shape[2], KW = tk.shape[3];
    if ((H + 2 * pad - KH) < 0 || (H + 2 * pad - KH) % stride != 0 ||
        (W + 2 * pad - KW) < 0 || (W + 2 * pad - KW) % stride != 0) {
        throw ConfigError("conv2d: geometry (" + tx.shape_str() + ") with kernel (" +
                          tk.shape_str() + "), stride " + std::to_string(stride) + ", pad " +
                          std::to_string(pad) + " does not tile exactly");
    }
    Node n;
    n.op = Op::Conv2d;
    n.in0 = x.id();
    n.in1 = k.id();
    n.i0 = stride;
    n.i1 = pad;
    n.diff = nodes_[x.id()].diff || nodes_[k.id()].diff;
    n.val = eval_conv2d(tx, tk, stride, pad);
    return Value(this, push(std::move(n), "conv2d"));
}

Value Tape::conv2d_transpose(Value g, Value k, int stride, int pad,
                             std::vector<int> out_shape) {
    check_same_tape(g);
    check_same_tape(k);
    const Tensor& tg = g.t();
    const Tensor& tk = k.t();
    if (tg.rank() != 4 || tk.rank() != 4 || out_shape.size() != 4) {
        throw ConfigError("conv2d_transpose expects rank-4 tensors");
    }
    if (tg.shape[1] != tk.shape[0]) {
        throw ConfigError("conv2d_transpose: channel mismatch, input (" + tg.shape_str() +
                          ") vs kernel (" + tk.shape_str() + ")");
    }
    if (out_shape[0] != tg.shape[0] || out_shape[1] != tk.shape[1]) {
        throw ConfigError("conv2d_transpose: output shape inconsistent with inputs");
    }
    const int OH = (out_shape[2] + 2 * pad - tk.shape[2]) / stride + 1;
    const int OW = (out_shape[3] + 2 * pad - tk.shape[3]) / stride + 1;
    if (OH != tg.shape[2] || OW != tg.shape[3]) {
        throw ConfigError("conv2d_transpose: output shape does not invert the forward geometry");
    }
    Node n;
    n.op = Op::Conv2dGx;
    n.in0 = g.id();
    n.in1 = k.id();
    n.i0 = stride;
    n.i1 = pad;
    n.diff = nodes_[g.id()].diff || nodes_[k.id()].diff;
    n.val = eval_conv2d_gx(tg, tk, stride, pad, out_shape);
    return Value(this, push(std::move(n), "conv2d_transpose"));
}

Value Tape::softmax(Value a) {
    check_same_tape(a);
    const Tensor& ta = a.t();
    require_rank2(ta, "softmax");
    Node n;
    n.op = Op::Softmax;
    n.in0 = a.id();
    n.diff = nodes_[a.id()].diff;
    n.val = Tensor(ta.shape);
    const int R = ta.rows(), K = ta.cols();
    for (int r = 0; r < R; ++r) {
        double mx = ta.at(r, 0);
        for (int c = 1; c < K; ++c) mx = std::max(mx, ta.at(r, c));
        double z = 0.0;
        for (int c = 0; c < K; ++c) z += std::exp(ta.at(r, c) - mx);
        for (int c = 0; c < K; ++c) n.val.at(r, c) = std::exp(ta.at(r, c) - mx) / z;
    }
    return Value(this, push(std::move(n), "softmax"));
}

Value Tape::row_sum(Value a) {
    check_same_tape(a);
    const Tensor& ta = a.t();
    require_rank2(ta, "row_sum");
    Node n;
    n.op = Op::RowSum;
    n.in0 = a.id();
    n.diff = nodes_[a.id()].diff;
    n.val = Tensor({ta.rows(), 1});
    for (int r = 0; r < ta.rows(); ++r) {
        double acc = 0.0;
        for (int c = 0; c < ta.cols(); ++c) acc += ta.at(r, c);
        n.val.v[r] = acc;
    }
    return Value(this, push(std::move(n), "row_sum"));
}

Value Tape::col_sum(Value a) {
    check_same_tape(a);
    const Tensor& ta = a.t();
    require_rank2(ta, "col_sum");
    Node n;
    n.op = Op::ColSum;
    n.in0 = a.id();
    n.diff = nodes_[a.id()].diff;
    n.val = Tensor({1, ta.cols()});
    for (int c = 0; c < ta.cols(); ++c) {
        double acc = 0.0;
        for (int r = 0; r < ta.rows(); ++r) acc += ta.at(r, c);
        n.val.v[c] = acc;
    }
    return Value(this, push(std::move(n), "col_sum"));
}

Value Tape::broadcast_rows(Value rowvec, int rows) {
    check_same_tape(rowvec);
    const Tensor& tv = rowvec.t();
    if (!(tv.rank() == 1 || (tv.rank() == 2 && tv.rows() == 1))) {
        throw ConfigError("broadcast_rows expects shape {K} or {1,K}, got (" + tv.shape_str() + ")");
    }
    const int k = static_cast<int>(tv.numel());
    Node n;
    n.op = Op::BcastRows;
    n.in0 = rowvec.id();
    n.diff = nodes_[rowvec.id()].diff;
    n.val = Tensor({rows, k});
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < k; ++c) n.val.at(r, c) = tv.v[c];
    }
    return Value(this, push(std::move(n), "broadcast_rows"));
}

Value Tape::broadcast_cols(Value colvec, int cols) {
    check_same_tape(colvec);
    const Tensor& tv = colvec.t();
    if (tv.rank() != 2 || tv.cols() != 1) {
        throw ConfigError("broadcast_cols expects shape {N,1}, got (" + tv.shape_str() + ")");
    }
    const int rows = tv.rows();
    Node n;
    n.op = Op::BcastCols;
    n.in0 = colvec.id();
    n.diff = nodes_[colvec.id()].diff;
    n.val = Tensor({rows, cols});
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) n.val.at(r, c) = tv.v[r];
    }
    return Value(this, push(std::move(n), "broadcast_cols"));
}

Value Tape::broadcast_full(Value scalar, std::vector<int> shape) {
    check_same_tape(scalar);
    if (scalar.t().numel() != 1) throw UsageError("broadcast_full expects a scalar");
    Node n;
    n.op = Op::BcastFull;
    n.in0 = scalar.id();
    n.diff = nodes_[scalar.id()].diff;
    n.val = full(std::move(shape), scalar.t().v[0]);
    return Value(this, push(std::move(n), "broadcast_full"));
}

Value Tape::reshape(Value a, std::vector<int> shape) {
    check_same_tape(a);
    const Tensor& ta = a.t();
    if (Tensor::numel_of(shape) != ta.numel()) {
        throw ConfigError("reshape: element count mismatch (" + ta.shape_str() + ")");
    }
    Node n;
    n.op = Op::Reshape;
    n.in0 = a.id();
    n.diff = nodes_[a.id()].diff;
    n.val = Tensor(std::move(shape), ta.v);
    return Value(this, push(std::move(n), "reshape"));
}

Value Tape::sum(Value a) {
    check_same_tape(a);
    const Tensor& ta = a.t();
    Node n;
    n.op = Op::Sum;
    n.in0 = a.id();
    n.diff = nodes_[a.id()].diff;
    double acc = 0.0;
    for (double x : ta.v) acc += x;
    n.val = Tensor({1}, {acc});
    return Value(this, push(std::move(n), "sum"));
}

Value Tape::mean(Value a) {
    check_same_tape(a);
    const Tensor& ta = a.t();
    Node n;
    n.op = Op::Mean;
    n.in0 = a.id();
    n.diff = nodes_[a.id()].diff;
    double acc = 0.0;
    for (double x : ta.v) acc += x;
    n.val = Tensor({1}, {acc / static_cast<double>(ta.numel())});
    return Value(this, push(std::move(n), "mean"));
}

Value Tape::squared_norm(Value a) {
    check_same_tape(a);
    const Tensor& ta = a.t();
    Node n;
    n.op = Op::SqNorm;
    n.in0 = a.id();
    n.diff = nodes_[a.id()].diff;
    double acc = 0.0;
    for (double x : ta.v) acc += x * x;
    n.val = Tensor({1}, {acc});
    return Value(this, push(std::move(n), "squared_norm"));
}

double Tape::scalar(Value v) const {
    check_same_tape(v);
    if (v.t().numel() != 1) throw UsageError("scalar() on a non-scalar value");
    return v.t().v[0];
}

// ---------------------------------------------------------------------------
// differentiation
// ---------------------------------------------------------------------------

std::vector<int> Tape::build_cotangents(Value out) {
    check_same_tape(out);
    if (out.t().numel() != 1) {
        throw UsageError("backward/grad require a scalar output, got shape (" +
                         out.t().shape_str() + ")");
    }
    const int out_id = out.id();
    std::vector<int> adj(nodes_.size(), -1);
    adj[out_id] = constant_scalar(1.0).id();

    auto accumulate = [&](int target, Value contrib) {
        if (adj[target] < 0) {
            adj[target] = contrib.id();
        } else {
            adj[target] = add(Value(this, adj[target]), contrib).id();
        }
    };

    for (int i = out_id; i >= 0; --i) {
        if (adj[i] < 0) continue;
        // Snapshot: nodes_ may grow while we append gradient nodes.
        const Op op = nodes_[i].op;
        const int in0 = nodes_[i].in0;
        const int in1 = nodes_[i].in1;
        const double c0 = nodes_[i].c0;
        const int i0 = nodes_[i].i0;
        const int i1 = nodes_[i].i1;
        if (op == Op::Leaf) continue;

        Value g(this, adj[i]);
        Value y(this, i);
        Value a(this, in0);
        Value b(this, in1);
        const bool da = in0 >= 0 && nodes_[in0].diff;
        const bool db = in1 >= 0 && nodes_[in1].diff;

        switch (op) {
            case Op::Add:
                if (da) accumulate(in0, g);
                if (db) accumulate(in1, g);
                break;
            case Op::Sub:
                if (da) accumulate(in0, g);
                if (db) accumulate(in1, neg(g));
                break;
            case Op::Mul:
                if (da) accumulate(in0, mul(g, b));
                if (db) accumulate(in1, mul(g, a));
                break;
            case Op::Div:
                // y = a / b: da -> g/b, db -> -g*a/b^2
                if (da) accumulate(in0, div(g, b));
                if (db) accumulate(in1, neg(div(mul(g, a), mul(b, b))));
                break;
            case Op::Scale:
                if (da) accumulate(in0, scale(g, c0));
                break;
            case Op::AddScalar:
                if (da) accumulate(in0, g);
                break;
            case Op::MatMul: {
                const bool ta = i0 != 0, tb = i1 != 0;
                if (da) {
                    accumulate(in0, ta ? matmul(b, g, tb, true)
                                       : matmul(g, b, false, !tb));
                }
                if (db) {
                    accumulate(in1, tb ? matmul(g, a, true, ta)
                                       : matmul(a, g, !ta, false));
                }
                break;
            }
            case Op::Conv2d: {
                if (da) {
                    Node n;
                    n.op = Op::Conv2dGx;
                    n.in0 = g.id();
                    n.in1 = in1;
                    n.i0 = i0;
                    n.i1 = i1;
                    n.diff = nodes_[g.id()].diff || nodes_[in1].diff;
                    n.val = eval_conv2d_gx(g.t(), nodes_[in1].val, i0, i1, nodes_[in0].val.shape);
                    accumulate(in0, Value(this, push(std::move(n), "conv2d_transpose")));
                }
                if (db) {
                    Node n;
                    n.op = Op::Conv2dGk;
                    n.in0 = in0;
                    n.in1 = g.id();
                    n.i0 = i0;
                    n.i1 = i1;
                    n.diff = nodes_[in0].diff || nodes_[g.id()].diff;
                    n.val = eval_conv2d_gk(nodes_[in0].val, g.t(), i0, i1, nodes_[in1].val.shape);
                    accumulate(in1, Value(this, push(std::move(n), "conv2d_kernel_grad")));
                }
                break;
            }
            case Op::Conv2dGx: {
                // y = gx(a, b): linear in both; adjoints swap back through
                // conv2d and the kernel-gradient op.
                if (da) accumulate(in0, conv2d(g, b, i0, i1));
                if (db) {
                    Node n;
                    n.op = Op::Conv2dGk;
                    n.in0 = g.id();
                    n.in1 = in0;
                    n.i0 = i0;
                    n.i1 = i1;
                    n.diff = nodes_[g.id()].diff || nodes_[in0].diff;
                    n.val = eval_conv2d_gk(g.t(), nodes_[in0].val, i0, i1, nodes_[in1].val.shape);
                    accumulate(in1, Value(this, push(std::move(n), "conv2d_kernel_grad")));
                }
                break;
            }
            case Op::Conv2dGk: {
                // y = gk(a, b) with a in the input slot and b in the cotangent slot.
                if (da) {
                    Node n;
                    n.op = Op::Conv2dGx;
                    n.in0 = in1;
                    n.in1 = g.id();
                    n.i0 = i0;
                    n.i1 = i1;
                    n.diff = nodes_[in1].diff || nodes_[g.id()].diff;
                    n.val = eval_conv2d_gx(nodes_[in1].val, g.t(), i0, i1, nodes_[in0].val.shape);
                    accumulate(in0, Value(this, push(std::move(n), "conv2d_transpose")));
                }
                if (db) accumulate(in1, conv2d(a, g, i0, i1));
                break;
            }
            case Op::Leaky: {
                // The derivative mask is piecewise constant; treating it as a
                // constant is exact almost everywhere, which keeps the node
                // usable under double backward.
                const Tensor& x = nodes_[in0].val;
                Tensor mask(x.shape);
                for (size_t t = 0; t < x.numel(); ++t) mask.v[t] = x.v[t] > 0.0 ? 1.0 : c0;
                if (da) accumulate(in0, mul(g, constant(std::move(mask))));
                break;
            }
            case Op::Tanh:
                // g * (1 - y^2)
                if (da) accumulate(in0, mul(g, add_scalar(neg(mul(y, y)), 1.0)));
                break;
            case Op::Sigmoid:
                // g * y * (1 - y)
                if (da) accumulate(in0, mul(g, mul(y, add_scalar(neg(y), 1.0))));
                break;
            case Op::Softplus:
                if (da) accumulate(in0, mul(g, sigmoid(a)));
                break;
            case Op::Exp:
                if (da) accumulate(in0, mul(g, y));
                break;
            case Op::Log:
                if (da) accumulate(in0, div(g, a));
                break;
            case Op::Softmax: {
                // J^T g = y * (g - rowsum(g * y))
                if (da) {
                    Value dot = row_sum(mul(g, y));
                    Value spread = broadcast_cols(dot, y.t().cols());
                    accumulate(in0, mul(y, sub(g, spread)));
                }
                break;
            }
            case Op::RowSum:
                if (da) accumulate(in0, broadcast_cols(g, nodes_[in0].val.cols()));
                break;
            case Op::ColSum:
                if (da) accumulate(in0, broadcast_rows(g, nodes_[in0].val.rows()));
                break;
            case Op::BcastRows: {
                if (da) {
                    Value cs = col_sum(g);
                    const Tensor& src = nodes_[in0].val;
                    accumulate(in0, src.rank() == 1 ? reshape(cs, src.shape) : cs);
                }
                break;
            }
            case Op::BcastCols:
                if (da) accumulate(in0, row_sum(g));
                break;
            case Op::BcastFull:
                if (da) accumulate(in0, sum(g));
                break;
            case Op::Sum:
                if (da) accumulate(in0, broadcast_full(g, nodes_[in0].val.shape));
                break;
            case Op::Mean:
                if (da) {
                    const double inv = 1.0 / static_cast<double>(nodes_[in0].val.numel());
                    accumulate(in0, broadcast_full(scale(g, inv), nodes_[in0].val.shape));
                }
                break;
            case Op::SqNorm:
                if (da) accumulate(in0, scale(mul(broadcast_full(g, nodes_[in0].val.shape), a), 2.0));
                break;
            case Op::Reshape:
                if (da) accumulate(in0, reshape(g, nodes_[in0].val.shape));
                break;
            case Op::Leaf:
                break;
        }
    }
    return adj;
}

void Tape::backward(Value out) {
    std::vector<int> adj = build_cotangents(out);
    for (size_t i = 0; i < adj.size(); ++i) {
        if (adj[i] < 0) continue;
        Tensor* bound = nodes_[i].bound;
        if (bound == nullptr) continue;
        const Tensor& g = nodes_[adj[i]].val;
        bound->ensure_grad();
        for (size_t t = 0; t < g.numel(); ++t) bound->grad[t] += g.v[t];
    }
}

Value Tape::grad(Value out, Value wrt) {
    check_same_tape(wrt);
    if (!nodes_[wrt.id()].diff) {
        throw UsageError("grad: target value is not differentiable");
    }
    std::vector<int> adj = build_cotangents(out);
    if (wrt.id() >= static_cast<int>(adj.size()) || adj[wrt.id()] < 0) {
        return constant(Tensor(wrt.t().shape));  // unreachable: zero gradient
    }
    return Value(this, adj[wrt.id()]);
}

}  // namespace fairgan
