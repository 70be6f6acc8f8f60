#include "evoloss/autodiff.hpp"

#include <cfloat>
#include <cmath>
#include <stdexcept>

#include "evoloss/expr.hpp"

namespace evoloss::ad {

namespace {

void require(bool cond, const char* msg) {
    if (!cond) throw std::runtime_error(std::string("autodiff contract violation: ") + msg);
}

}  // namespace

Var Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor v, bool requires_grad) {
    Node n;
    n.op = OpKind::Leaf;
    n.requires_grad = requires_grad;
    n.value = std::move(v);
    return push(std::move(n));
}

Var Tape::constant(Tensor v) {
    Node n;
    n.op = OpKind::Const;
    n.value = std::move(v);
    return push(std::move(n));
}

Var Tape::constant_scalar(double v) {
    Tensor t(1, 1);
    t(0, 0) = v;
    return constant(std::move(t));
}

Var Tape::unary(OpKind k, Var a, Tensor v) {
    Node n;
    n.op = k;
    n.a = a.idx;
    n.requires_grad = node(a).requires_grad;
    n.value = std::move(v);
    return push(std::move(n));
}

Var Tape::binary(OpKind k, Var a, Var b, Tensor v) {
    Node n;
    n.op = k;
    n.a = a.idx;
    n.b = b.idx;
    n.requires_grad = node(a).requires_grad || node(b).requires_grad;
    n.value = std::move(v);
    return push(std::move(n));
}

namespace {

void check_same_shape(const Tensor& x, const Tensor& y) {
    require(x.rows() == y.rows() && x.cols() == y.cols(), "elementwise shape mismatch");
}

}  // namespace

Var Tape::add(Var a, Var b) {
    check_same_shape(value(a), value(b));
    return binary(OpKind::Add, a, b, value(a) + value(b));
}

Var Tape::sub(Var a, Var b) {
    check_same_shape(value(a), value(b));
    return binary(OpKind::Sub, a, b, value(a) - value(b));
}

Var Tape::mul(Var a, Var b) {
    check_same_shape(value(a), value(b));
    return binary(OpKind::Mul, a, b, value(a).cwiseProduct(value(b)));
}

Var Tape::div(Var a, Var b) {
    check_same_shape(value(a), value(b));
    return binary(OpKind::Div, a, b, value(a).cwiseQuotient(value(b)));
}

Var Tape::neg(Var a) { return unary(OpKind::Neg, a, -value(a)); }

Var Tape::add_const(Var a, double c) {
    Var v = unary(OpKind::AddC, a, value(a).array() + c);
    nodes_.back().c0 = c;
    return v;
}

Var Tape::mul_const(Var a, double c) {
    Var v = unary(OpKind::MulC, a, value(a) * c);
    nodes_.back().c0 = c;
    return v;
}

Var Tape::sqrt(Var a) { return unary(OpKind::Sqrt, a, value(a).array().sqrt()); }
Var Tape::exp(Var a) { return unary(OpKind::Exp, a, value(a).array().exp()); }
Var Tape::log(Var a) { return unary(OpKind::Log, a, value(a).array().log()); }
Var Tape::abs(Var a) { return unary(OpKind::Abs, a, value(a).array().abs()); }

Var Tape::sign(Var a) {
    return unary(OpKind::Sign, a,
                 value(a).unaryExpr([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }));
}

Var Tape::step(Var a) {
    return unary(OpKind::Step, a, value(a).unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; }));
}

Var Tape::sat(Var a) {
    return unary(OpKind::Sat, a, value(a).unaryExpr([](double x) {
        return x > kSatBound ? kSatBound : (x < -kSatBound ? -kSatBound : x);
    }));
}

Var Tape::clamp(Var a, double lo, double hi) {
    Var v = unary(OpKind::Clamp, a, value(a).unaryExpr([lo, hi](double x) {
        return x < lo ? lo : (x > hi ? hi : x);
    }));
    nodes_.back().c0 = lo;
    nodes_.back().c1 = hi;
    return v;
}

Var Tape::relu(Var a) { return unary(OpKind::Relu, a, value(a).cwiseMax(0.0)); }

Var Tape::sigmoid(Var a) {
    return unary(OpKind::Sigmoid, a, value(a).unaryExpr([](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }));
}

Var Tape::softplus(Var a) {
    return unary(OpKind::Softplus, a,
                 value(a).unaryExpr([](double x) { return evoloss::softplus(x); }));
}

Var Tape::softmax_rows(Var a) {
    const Tensor& x = value(a);
    Tensor out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double m = x.row(r).maxCoeff();
        Eigen::RowVectorXd e = (x.row(r).array() - m).exp();
        out.row(r) = e / e.sum();
    }
    return unary(OpKind::SoftmaxRows, a, std::move(out));
}

Var Tape::matmul(Var a, Var b) {
    require(value(a).cols() == value(b).rows(), "matmul inner dimension mismatch");
    return binary(OpKind::MatMul, a, b, value(a) * value(b));
}

Var Tape::transpose(Var a) { return unary(OpKind::Transpose, a, value(a).transpose()); }

Var Tape::add_row_vec(Var m, Var r) {
    require(value(r).rows() == 1 && value(r).cols() == value(m).cols(),
            "add_row_vec expects a 1 x cols row vector");
    return binary(OpKind::AddRowVec, m, r, value(m).rowwise() + value(r).row(0));
}

Var Tape::col_sum(Var m) { return unary(OpKind::ColSum, m, value(m).colwise().sum()); }
Var Tape::row_sum(Var m) { return unary(OpKind::RowSum, m, value(m).rowwise().sum()); }

Var Tape::broadcast_rows(Var r, int n) {
    require(value(r).rows() == 1, "broadcast_rows expects a row vector");
    Var v = unary(OpKind::BroadcastRows, r, value(r).replicate(n, 1));
    nodes_.back().i0 = n;
    return v;
}

Var Tape::broadcast_cols(Var c, int m) {
    require(value(c).cols() == 1, "broadcast_cols expects a column vector");
    Var v = unary(OpKind::BroadcastCols, c, value(c).replicate(1, m));
    nodes_.back().i0 = m;
    return v;
}

Var Tape::scalar_mul(Var s, Var t) {
    require(value(s).rows() == 1 && value(s).cols() == 1, "scalar_mul expects a 1x1 scalar");
    return binary(OpKind::ScalarMul, s, t, scalar(s) * value(t));
}

Var Tape::sum_all(Var a) {
    Tensor t(1, 1);
    t(0, 0) = value(a).sum();
    return unary(OpKind::SumAll, a, std::move(t));
}

Var Tape::mean_all(Var a) {
    const double n = static_cast<double>(value(a).size());
    return mul_const(sum_all(a), 1.0 / n);
}

Var Tape::column(Var m, int j) {
    require(j >= 0 && j < value(m).cols(), "column index out of range");
    Var v = unary(OpKind::Column, m, value(m).col(j));
    nodes_.back().i0 = j;
    return v;
}

Var Tape::place_column(Var c, int j, int cols) {
    require(value(c).cols() == 1, "place_column expects a column vector");
    require(j >= 0 && j < cols, "place_column index out of range");
    Tensor out = Tensor::Zero(value(c).rows(), cols);
    out.col(j) = value(c);
    Var v = unary(OpKind::PlaceColumn, c, std::move(out));
    nodes_.back().i0 = j;
    nodes_.back().i1 = cols;
    return v;
}

std::vector<Var> Tape::grad(Var output, std::span<const Var> inputs, bool create_graph) {
    (void)create_graph;  // adjoints are always graph nodes; values are identical
    require(output.valid(), "grad output is invalid");
    require(value(output).rows() == 1 && value(output).cols() == 1, "grad output must be scalar");

    const std::int32_t out_idx = output.idx;
    std::vector<Var> adj(static_cast<std::size_t>(out_idx) + 1, Var{});

    auto accum = [&](std::int32_t parent, Var contribution) {
        if (parent < 0 || !nodes_[static_cast<std::size_t>(parent)].requires_grad) return;
        Var& slot = adj[static_cast<std::size_t>(parent)];
        slot = slot.valid() ? add(slot, contribution) : contribution;
    };

    if (nodes_[static_cast<std::size_t>(out_idx)].requires_grad) {
        adj[static_cast<std::size_t>(out_idx)] = constant_scalar(1.0);
    }

    for (std::int32_t i = out_idx; i >= 0; --i) {
        Var g = adj[static_cast<std::size_t>(i)];
        if (!g.valid()) continue;
        // Copy what we need: pushing adjoint nodes may reallocate nodes_.
        const Node& cur = nodes_[static_cast<std::size_t>(i)];
        const OpKind op = cur.op;
        const std::int32_t ai = cur.a;
        const std::int32_t bi = cur.b;
        const double c0 = cur.c0;
        const double c1 = cur.c1;
        const std::int32_t i0 = cur.i0;
        const Var A{ai};
        const Var B{bi};
        const Var O{i};

        switch (op) {
            case OpKind::Leaf:
            case OpKind::Const:
                break;
            case OpKind::Add:
                accum(ai, g);
                accum(bi, g);
                break;
            case OpKind::Sub:
                accum(ai, g);
                accum(bi, neg(g));
                break;
            case OpKind::Mul:
                accum(ai, mul(g, B));
                accum(bi, mul(g, A));
                break;
            case OpKind::Div:
                accum(ai, div(g, B));
                accum(bi, neg(div(mul(g, O), B)));
                break;
            case OpKind::Neg:
                accum(ai, neg(g));
                break;
            case OpKind::AddC:
                accum(ai, g);
                break;
            case OpKind::MulC:
                accum(ai, mul_const(g, c0));
                break;
            case OpKind::Sqrt:
                accum(ai, div(mul_const(g, 0.5), O));
                break;
            case OpKind::Exp:
                accum(ai, mul(g, O));
                break;
            case OpKind::Log:
                accum(ai, div(g, A));
                break;
            case OpKind::Abs:
                accum(ai, mul(g, sign(A)));
                break;
            case OpKind::Sign:
            case OpKind::Step:
            case OpKind::SatGate:
            case OpKind::ClampGate:
                break;  // derivative 0 (subgradient convention)
            case OpKind::Sat: {
                Var gate = unary(OpKind::SatGate, A, value(A).unaryExpr([](double x) {
                    return (x > -kSatBound && x < kSatBound) ? 1.0 : 0.0;
                }));
                accum(ai, mul(g, gate));
                break;
            }
            case OpKind::Clamp: {
                Var gate = unary(OpKind::ClampGate, A, value(A).unaryExpr([c0, c1](double x) {
                    return (x > c0 && x < c1) ? 1.0 : 0.0;
                }));
                accum(ai, mul(g, gate));
                break;
            }
            case OpKind::Relu:
                accum(ai, mul(g, step(A)));
                break;
            case OpKind::Sigmoid:
                accum(ai, mul(g, mul(O, add_const(neg(O), 1.0))));
                break;
            case OpKind::Softplus:
                accum(ai, mul(g, sigmoid(A)));
                break;
            case OpKind::SoftmaxRows: {
                Var inner = row_sum(mul(g, O));
                accum(ai, mul(O, sub(g, broadcast_cols(inner, static_cast<int>(value(O).cols())))));
                break;
            }
            case OpKind::MatMul:
                accum(ai, matmul(g, transpose(B)));
                accum(bi, matmul(transpose(A), g));
                break;
            case OpKind::Transpose:
                accum(ai, transpose(g));
                break;
            case OpKind::AddRowVec:
                accum(ai, g);
                accum(bi, col_sum(g));
                break;
            case OpKind::ColSum:
                accum(ai, broadcast_rows(g, static_cast<int>(value(A).rows())));
                break;
            case OpKind::RowSum:
                accum(ai, broadcast_cols(g, static_cast<int>(value(A).cols())));
                break;
            case OpKind::BroadcastRows:
                accum(ai, col_sum(g));
                break;
            case OpKind::BroadcastCols:
                accum(ai, row_sum(g));
                break;
            case OpKind::ScalarMul:
                accum(ai, sum_all(mul(g, B)));
                accum(bi, scalar_mul(A, g));
                break;
            case OpKind::SumAll:
                accum(ai, scalar_mul(g, constant(Tensor::Ones(value(A).rows(), value(A).cols()))));
                break;
            case OpKind::Column:
                accum(ai, place_column(g, i0, static_cast<int>(value(A).cols())));
                break;
            case OpKind::PlaceColumn:
                accum(ai, column(g, i0));
                break;
        }
    }

    std::vector<Var> out;
    out.reserve(inputs.size());
    for (Var in : inputs) {
        require(in.valid(), "grad input is invalid");
        Var g = in.idx <= out_idx ? adj[static_cast<std::size_t>(in.idx)] : Var{};
        if (!g.valid()) {
            g = constant(Tensor::Zero(value(in).rows(), value(in).cols()));
        }
        out.push_back(g);
    }
    return out;
}

double finite_difference_check(const std::function<double(const Eigen::VectorXd&)>& fn,
                               const Eigen::VectorXd& point, double h,
                               const Eigen::VectorXd& analytic) {
    double max_err = 0.0;
    Eigen::VectorXd x = point;
    for (Eigen::Index i = 0; i < point.size(); ++i) {
        x(i) = point(i) + h;
        const double fp = fn(x);
        x(i) = point(i) - h;
        const double fm = fn(x);
        x(i) = point(i);
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic(i);
        const double diff = std::fabs(numeric - a);
        const double err = std::fabs(a) < 1e-8 ? diff : diff / std::fabs(a);
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace evoloss::ad
