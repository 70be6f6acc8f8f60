#include "evoloss/expr.hpp"

#include <algorithm>
#include <cassert>
#include <cctype>
#include <cfloat>
#include <cmath>
#include <cstdio>
#include <optional>

namespace evoloss {

namespace {

double saturate(double v) {
    if (v > kSatBound) return kSatBound;
    if (v < -kSatBound) return -kSatBound;
    return v;
}

}  // namespace

int op_arity(Op op) {
    switch (op) {
        case Op::Add:
        case Op::Sub:
        case Op::Mul:
        case Op::Aq:
            return 2;
        case Op::Square:
        case Op::Abs:
        case Op::SqrtP:
        case Op::LnP:
            return 1;
    }
    return 0;
}

bool op_commutative(Op op) { return op == Op::Add || op == Op::Mul; }

const char* op_token(Op op) {
    switch (op) {
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Aq: return "aq";
        case Op::Square: return "sq";
        case Op::Abs: return "abs";
        case Op::SqrtP: return "sqrt";
        case Op::LnP: return "ln";
    }
    return "?";
}

const char* terminal_token(Terminal t) {
    switch (t) {
        case Terminal::PredY: return "f";
        case Terminal::TrueY: return "y";
        case Terminal::PlusOne: return "1";
        case Terminal::MinusOne: return "-1";
    }
    return "?";
}

std::unique_ptr<ExprNode> ExprNode::make_terminal(Terminal t) {
    auto n = std::make_unique<ExprNode>();
    n->is_op = false;
    n->term = t;
    return n;
}

std::unique_ptr<ExprNode> ExprNode::make_op(Op op, std::vector<std::unique_ptr<ExprNode>> ch) {
    assert(static_cast<int>(ch.size()) == op_arity(op));
    auto n = std::make_unique<ExprNode>();
    n->is_op = true;
    n->op = op;
    n->children = std::move(ch);
    return n;
}

std::unique_ptr<ExprNode> ExprNode::clone() const {
    auto n = std::make_unique<ExprNode>();
    n->is_op = is_op;
    n->op = op;
    n->term = term;
    n->children.reserve(children.size());
    for (const auto& c : children) n->children.push_back(c->clone());
    return n;
}

namespace {

int count_nodes(const ExprNode& n) {
    int c = 1;
    for (const auto& ch : n.children) c += count_nodes(*ch);
    return c;
}

int node_depth(const ExprNode& n) {
    int d = 0;
    for (const auto& ch : n.children) d = std::max(d, 1 + node_depth(*ch));
    return d;
}

}  // namespace

int LossExpr::node_count() const { return root_ ? count_nodes(*root_) : 0; }
int LossExpr::depth() const { return root_ ? node_depth(*root_) : 0; }

double eval_operator(Op op, std::span<const double> args) {
    assert(static_cast<int>(args.size()) == op_arity(op));
    double v = 0.0;
    switch (op) {
        case Op::Add: v = args[0] + args[1]; break;
        case Op::Sub: v = args[0] - args[1]; break;
        case Op::Mul: v = args[0] * args[1]; break;
        case Op::Aq: v = args[0] / std::sqrt(1.0 + args[1] * args[1]); break;
        case Op::Square: v = args[0] * args[0]; break;
        case Op::Abs: v = std::fabs(args[0]); break;
        case Op::SqrtP: v = std::sqrt(std::fabs(args[0]) + kProtectEps); break;
        case Op::LnP: v = std::log(std::fabs(args[0]) + kProtectEps); break;
    }
    return saturate(v);
}

namespace {

double eval_node(const ExprNode& n, double y, double f) {
    if (!n.is_op) {
        switch (n.term) {
            case Terminal::PredY: return f;
            case Terminal::TrueY: return y;
            case Terminal::PlusOne: return 1.0;
            case Terminal::MinusOne: return -1.0;
        }
    }
    double args[2];
    const int a = op_arity(n.op);
    for (int i = 0; i < a; ++i) args[i] = eval_node(*n.children[i], y, f);
    return eval_operator(n.op, std::span<const double>(args, static_cast<std::size_t>(a)));
}

}  // namespace

double eval_expr(const LossExpr& expr, double y, double f) {
    return eval_node(expr.root(), y, f);
}

double softplus(double x) {
    double v;
    if (x > 0.0) {
        v = x + std::log1p(std::exp(-x));
    } else {
        v = std::log1p(std::exp(x));
    }
    return std::max(v, DBL_MIN);
}

namespace {

std::unique_ptr<ExprNode> generate_node(Rng& rng, GenMethod method, int depth_limit, int depth) {
    std::uniform_int_distribution<int> term_pick(0, kNumTerminals - 1);
    if (depth >= depth_limit) {
        return ExprNode::make_terminal(static_cast<Terminal>(term_pick(rng)));
    }
    bool pick_op;
    if (method == GenMethod::Full) {
        pick_op = true;
    } else {
        // Grow draws uniformly over the combined function + terminal set.
        std::uniform_int_distribution<int> pick(0, kNumOps + kNumTerminals - 1);
        pick_op = pick(rng) < kNumOps;
        if (!pick_op) return ExprNode::make_terminal(static_cast<Terminal>(term_pick(rng)));
    }
    std::uniform_int_distribution<int> op_pick(0, kNumOps - 1);
    const Op op = static_cast<Op>(op_pick(rng));
    std::vector<std::unique_ptr<ExprNode>> ch;
    for (int i = 0; i < op_arity(op); ++i) {
        ch.push_back(generate_node(rng, method, depth_limit, depth + 1));
    }
    return ExprNode::make_op(op, std::move(ch));
}

}  // namespace

LossExpr generate_tree(Rng& rng, GenMethod method, int depth_limit) {
    assert(depth_limit >= 1);
    return LossExpr(generate_node(rng, method, depth_limit, 0));
}

namespace {

struct KeyResult {
    std::string key;
    std::optional<double> const_value;  // set when the subtree is all-constant
};

std::string format_const(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

KeyResult canonical_node(const ExprNode& n) {
    if (!n.is_op) {
        switch (n.term) {
            case Terminal::PredY: return {"f", std::nullopt};
            case Terminal::TrueY: return {"y", std::nullopt};
            case Terminal::PlusOne: return {"1", 1.0};
            case Terminal::MinusOne: return {"-1", -1.0};
        }
    }
    std::vector<KeyResult> ch;
    ch.reserve(n.children.size());
    bool all_const = true;
    for (const auto& c : n.children) {
        ch.push_back(canonical_node(*c));
        all_const = all_const && ch.back().const_value.has_value();
    }
    if (all_const) {
        double args[2];
        for (std::size_t i = 0; i < ch.size(); ++i) args[i] = *ch[i].const_value;
        const double v = eval_operator(n.op, std::span<const double>(args, ch.size()));
        return {format_const(v), v};
    }
    if (op_commutative(n.op) && ch[0].key > ch[1].key) std::swap(ch[0], ch[1]);
    std::string key = "(";
    key += op_token(n.op);
    for (const auto& c : ch) {
        key += ' ';
        key += c.key;
    }
    key += ')';
    return {std::move(key), std::nullopt};
}

}  // namespace

std::string canonical_key(const LossExpr& expr) {
    return canonical_node(expr.root()).key;
}

namespace {

void serialize_node(const ExprNode& n, std::string& out) {
    if (!n.is_op) {
        out += terminal_token(n.term);
        return;
    }
    out += '(';
    out += op_token(n.op);
    for (const auto& c : n.children) {
        out += ' ';
        serialize_node(*c, out);
    }
    out += ')';
}

struct Parser {
    const std::string& text;
    std::size_t pos = 0;

    void skip_ws() {
        while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    }

    std::string next_token() {
        const std::size_t start = pos;
        while (pos < text.size() && !std::isspace(static_cast<unsigned char>(text[pos])) &&
               text[pos] != '(' && text[pos] != ')') {
            ++pos;
        }
        if (pos == start) throw ParseError(start, "expected a token");
        return text.substr(start, pos - start);
    }

    std::unique_ptr<ExprNode> parse_node() {
        skip_ws();
        if (pos >= text.size()) throw ParseError(pos, "unexpected end of input");
        if (text[pos] == '(') {
            const std::size_t open = pos;
            ++pos;
            skip_ws();
            const std::size_t tok_pos = pos;
            const std::string tok = next_token();
            std::optional<Op> op;
            for (int i = 0; i < kNumOps; ++i) {
                if (tok == op_token(static_cast<Op>(i))) op = static_cast<Op>(i);
            }
            if (!op) throw ParseError(tok_pos, "unknown operator '" + tok + "'");
            std::vector<std::unique_ptr<ExprNode>> ch;
            while (true) {
                skip_ws();
                if (pos >= text.size()) throw ParseError(open, "unclosed '('");
                if (text[pos] == ')') break;
                ch.push_back(parse_node());
            }
            ++pos;  // consume ')'
            if (static_cast<int>(ch.size()) != op_arity(*op)) {
                throw ParseError(open, std::string("operator '") + op_token(*op) + "' expects " +
                                           std::to_string(op_arity(*op)) + " arguments, got " +
                                           std::to_string(ch.size()));
            }
            return ExprNode::make_op(*op, std::move(ch));
        }
        if (text[pos] == ')') throw ParseError(pos, "unexpected ')'");
        const std::size_t tok_pos = pos;
        const std::string tok = next_token();
        for (int i = 0; i < kNumTerminals; ++i) {
            if (tok == terminal_token(static_cast<Terminal>(i))) {
                return ExprNode::make_terminal(static_cast<Terminal>(i));
            }
        }
        throw ParseError(tok_pos, "unknown symbol '" + tok + "'");
    }
};

}  // namespace

std::string serialize(const LossExpr& expr) {
    std::string out;
    serialize_node(expr.root(), out);
    return out;
}

LossExpr parse_expr(const std::string& text) {
    Parser p{text};
    auto root = p.parse_node();
    p.skip_ws();
    if (p.pos != text.size()) throw ParseError(p.pos, "trailing input after expression");
    return LossExpr(std::move(root));
}

namespace {

void scan_terminals(const ExprNode& n, RequiredArguments& out) {
    if (!n.is_op) {
        if (n.term == Terminal::PredY) out.has_f = true;
        if (n.term == Terminal::TrueY) out.has_y = true;
        return;
    }
    for (const auto& c : n.children) scan_terminals(*c, out);
}

}  // namespace

RequiredArguments contains_required_arguments(const LossExpr& expr) {
    RequiredArguments out;
    scan_terminals(expr.root(), out);
    return out;
}

}  // namespace evoloss
