#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace evoloss::ad {

using Tensor = Eigen::MatrixXd;

// Handle into a Tape. Only valid for the tape that created it, until the next
// clear().
struct Var {
    std::int32_t idx = -1;
    bool valid() const { return idx >= 0; }
};

enum class OpKind : std::uint8_t {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddC,
    MulC,
    Sqrt,
    Exp,
    Log,
    Abs,
    Sign,
    Step,
    Sat,
    SatGate,
    Clamp,
    ClampGate,
    Relu,
    Sigmoid,
    Softplus,
    SoftmaxRows,
    MatMul,
    Transpose,
    AddRowVec,
    ColSum,
    RowSum,
    BroadcastRows,
    BroadcastCols,
    ScalarMul,
    SumAll,
    Column,
    PlaceColumn,
};

// Eager define-by-run computation graph. Every op computes its value at
// construction; grad() builds the adjoints as further graph nodes, so the
// returned gradients can themselves be differentiated (reverse-over-reverse).
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void clear() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }
    void reserve(std::size_t n) { nodes_.reserve(n); }

    Var leaf(Tensor v, bool requires_grad = true);
    Var constant(Tensor v);
    Var constant_scalar(double v);

    const Tensor& value(Var v) const { return nodes_[static_cast<std::size_t>(v.idx)].value; }
    double scalar(Var v) const { return value(v)(0, 0); }
    bool requires_grad(Var v) const {
        return nodes_[static_cast<std::size_t>(v.idx)].requires_grad;
    }

    // Elementwise; shapes must match.
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);
    Var neg(Var a);
    Var add_const(Var a, double c);
    Var mul_const(Var a, double c);
    Var sqrt(Var a);
    Var exp(Var a);
    Var log(Var a);
    Var abs(Var a);
    Var sign(Var a);       // sign(0) = 0; derivative 0 everywhere
    Var step(Var a);       // 1 where x > 0 else 0; derivative 0
    Var sat(Var a);        // clamp to +-1e100 (operator-output saturation)
    Var clamp(Var a, double lo, double hi);
    Var relu(Var a);
    Var sigmoid(Var a);
    Var softplus(Var a);   // stable, floored at DBL_MIN
    Var softmax_rows(Var a);

    // Linear algebra / shape ops.
    Var matmul(Var a, Var b);
    Var transpose(Var a);
    Var add_row_vec(Var m, Var r);           // (n x m) + broadcast (1 x m)
    Var col_sum(Var m);                      // -> 1 x m
    Var row_sum(Var m);                      // -> n x 1
    Var broadcast_rows(Var r, int n);        // (1 x m) -> n x m
    Var broadcast_cols(Var c, int m);        // (n x 1) -> n x m
    Var scalar_mul(Var s, Var t);            // (1 x 1) * tensor
    Var sum_all(Var a);                      // -> 1 x 1
    Var mean_all(Var a);
    Var column(Var m, int j);                // -> n x 1
    Var place_column(Var c, int j, int cols);  // (n x 1) -> n x cols, zeros elsewhere

    // Reverse accumulation of d(output)/d(input) for each input. output must be
    // a 1x1 scalar. Inputs that do not participate get a zero gradient of the
    // input's shape. With create_graph the returned Vars can be fed back into
    // grad() for higher-order derivatives.
    std::vector<Var> grad(Var output, std::span<const Var> inputs, bool create_graph = false);

private:
    struct Node {
        OpKind op = OpKind::Const;
        std::int32_t a = -1;
        std::int32_t b = -1;
        double c0 = 0.0;
        double c1 = 0.0;
        std::int32_t i0 = 0;
        std::int32_t i1 = 0;
        bool requires_grad = false;
        Tensor value;
    };

    Var push(Node n);
    Var unary(OpKind k, Var a, Tensor v);
    Var binary(OpKind k, Var a, Var b, Tensor v);
    const Node& node(Var v) const { return nodes_[static_cast<std::size_t>(v.idx)]; }

    std::vector<Node> nodes_;
};

// Max relative discrepancy between an analytic gradient and central finite
// differences of fn at point, with an absolute fallback for tiny entries.
double finite_difference_check(const std::function<double(const Eigen::VectorXd&)>& fn,
                               const Eigen::VectorXd& point, double h,
                               const Eigen::VectorXd& analytic);

}  // namespace evoloss::ad
