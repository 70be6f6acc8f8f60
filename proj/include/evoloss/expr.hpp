#pragma once

#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "evoloss/rng.hpp"

namespace evoloss {

// Protection constant for sqrt/ln, shared with the network evaluation path.
inline constexpr double kProtectEps = 1e-7;

// Saturation bound applied to every operator output. Mathematically the
// function set is closed over the reals, but nested Square/Mul chains can
// overflow double precision; saturating keeps every evaluation finite.
inline constexpr double kSatBound = 1e100;

enum class Op : int { Add = 0, Sub, Mul, Aq, Square, Abs, SqrtP, LnP };
inline constexpr int kNumOps = 8;

enum class Terminal : int { PredY = 0, TrueY, PlusOne, MinusOne };
inline constexpr int kNumTerminals = 4;

int op_arity(Op op);
bool op_commutative(Op op);
const char* op_token(Op op);
const char* terminal_token(Terminal t);

struct ExprNode {
    bool is_op = false;
    Op op = Op::Add;
    Terminal term = Terminal::PredY;
    std::vector<std::unique_ptr<ExprNode>> children;

    static std::unique_ptr<ExprNode> make_terminal(Terminal t);
    static std::unique_ptr<ExprNode> make_op(Op op, std::vector<std::unique_ptr<ExprNode>> ch);
    std::unique_ptr<ExprNode> clone() const;
};

// A symbolic loss candidate: an ordered expression tree over the operator and
// terminal sets. Child order is significant (Sub and Aq are non-commutative).
class LossExpr {
public:
    LossExpr() = default;
    explicit LossExpr(std::unique_ptr<ExprNode> root) : root_(std::move(root)) {}

    LossExpr(const LossExpr& other) : root_(other.root_ ? other.root_->clone() : nullptr) {}
    LossExpr& operator=(const LossExpr& other) {
        if (this != &other) root_ = other.root_ ? other.root_->clone() : nullptr;
        return *this;
    }
    LossExpr(LossExpr&&) = default;
    LossExpr& operator=(LossExpr&&) = default;

    bool empty() const { return root_ == nullptr; }
    const ExprNode& root() const { return *root_; }
    ExprNode& root() { return *root_; }
    std::unique_ptr<ExprNode>& root_ptr() { return root_; }

    int node_count() const;
    int depth() const;  // single terminal has depth 0

private:
    std::unique_ptr<ExprNode> root_;
};

// Protected operator semantics (Aq, SqrtP, LnP) with output saturation.
// Finite inputs always produce finite output.
double eval_operator(Op op, std::span<const double> args);

// Symbolic evaluation of the whole tree at a (y, f) point. No wrapper applied.
double eval_expr(const LossExpr& expr, double y, double f);

// Numerically stable softplus, floored at the smallest positive normal so the
// non-negativity wrapper stays strictly positive even when the raw loss
// underflows exp().
double softplus(double x);

enum class GenMethod { Grow, Full };

// Random tree generation. Full places every leaf at exactly depth_limit; Grow
// bounds depth by depth_limit. depth_limit >= 1.
LossExpr generate_tree(Rng& rng, GenMethod method, int depth_limit);

// Deterministic structural key: commutative operands sorted, all-constant
// subtrees folded to a numeric literal. Equal keys imply equal semantics.
std::string canonical_key(const LossExpr& expr);

// Prefix s-expression form, e.g. "(sq (sub y f))".
std::string serialize(const LossExpr& expr);

struct ParseError : std::runtime_error {
    std::size_t position;
    ParseError(std::size_t pos, const std::string& msg)
        : std::runtime_error(msg + " at position " + std::to_string(pos)), position(pos) {}
};

LossExpr parse_expr(const std::string& text);

struct RequiredArguments {
    bool has_f = false;
    bool has_y = false;
};

RequiredArguments contains_required_arguments(const LossExpr& expr);

}  // namespace evoloss
