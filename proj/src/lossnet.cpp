#include "evoloss/lossnet.hpp"

#include <nlohmann/json.hpp>
#include <stdexcept>

namespace evoloss {

using json = nlohmann::json;

std::size_t MetaLoss::parameter_count() const {
    std::size_t n = 0;
    for (const Tensor& b : phi_blocks()) n += static_cast<std::size_t>(b.size());
    return n;
}

double MetaLoss::forward(const Tensor& y, const Tensor& f) const {
    if (y.rows() != f.rows() || y.cols() != f.cols()) {
        throw std::runtime_error("MetaLoss::forward: y/f shape mismatch");
    }
    ad::Tape tape;
    std::vector<ad::Var> phi;
    phi.reserve(phi_blocks().size());
    for (const Tensor& b : phi_blocks()) phi.push_back(tape.constant(b));
    ad::Var yv = tape.constant(y);
    ad::Var fv = tape.constant(f);
    return tape.scalar(forward_graph(tape, phi, yv, fv));
}

std::vector<double> MetaLoss::phi_flat() const {
    std::vector<double> out;
    for (const Tensor& b : phi_blocks()) {
        for (Eigen::Index r = 0; r < b.rows(); ++r) {
            for (Eigen::Index c = 0; c < b.cols(); ++c) out.push_back(b(r, c));
        }
    }
    return out;
}

void MetaLoss::set_phi_flat(std::span<const double> flat) {
    std::vector<Tensor> blocks = phi_blocks();
    std::size_t i = 0;
    for (Tensor& b : blocks) {
        for (Eigen::Index r = 0; r < b.rows(); ++r) {
            for (Eigen::Index c = 0; c < b.cols(); ++c) {
                if (i >= flat.size()) throw std::runtime_error("set_phi_flat: too few values");
                b(r, c) = flat[i++];
            }
        }
    }
    if (i != flat.size()) throw std::runtime_error("set_phi_flat: too many values");
    set_phi_blocks(std::move(blocks));
}

bool MetaLoss::phi_finite() const {
    for (const Tensor& b : phi_blocks()) {
        if (!b.allFinite()) return false;
    }
    return true;
}

MetaLossNetwork MetaLossNetwork::build(const LossExpr& expr, bool wrapper_on) {
    MetaLossNetwork net;
    net.wrapper_on_ = wrapper_on;
    net.source_ = expr;
    net.source_key_ = canonical_key(expr);
    int next_weight = 0;

    // Post-order flattening; children get smaller indices than their parent,
    // one visit counted per node and per edge.
    auto flatten = [&](auto&& self, const ExprNode& n) -> int {
        NetNode nn;
        nn.is_op = n.is_op;
        nn.op = n.op;
        nn.term = n.term;
        for (std::size_t i = 0; i < n.children.size(); ++i) {
            nn.child[i] = self(self, *n.children[i]);
            nn.weight[i] = next_weight++;
            ++net.build_visits_;
        }
        ++net.build_visits_;
        net.nodes_.push_back(nn);
        return static_cast<int>(net.nodes_.size()) - 1;
    };
    flatten(flatten, expr.root());
    net.blocks_.assign(static_cast<std::size_t>(next_weight), Tensor::Ones(1, 1));
    return net;
}

MetaLossNetwork MetaLossNetwork::from_expr(const LossExpr& expr, Rng& rng, bool wrapper_on) {
    MetaLossNetwork net = build(expr, wrapper_on);
    std::normal_distribution<double> dist(1.0, 1e-3);
    for (Tensor& b : net.blocks_) b(0, 0) = dist(rng);
    return net;
}

MetaLossNetwork MetaLossNetwork::unit_from_expr(const LossExpr& expr, bool wrapper_on) {
    return build(expr, wrapper_on);
}

void MetaLossNetwork::set_phi_blocks(std::vector<Tensor> blocks) {
    if (blocks.size() != blocks_.size()) {
        throw std::runtime_error("MetaLossNetwork: phi block count mismatch");
    }
    for (const Tensor& b : blocks) {
        if (b.rows() != 1 || b.cols() != 1) {
            throw std::runtime_error("MetaLossNetwork: phi blocks must be scalars");
        }
    }
    blocks_ = std::move(blocks);
}

namespace {

ad::Var graph_table_op(ad::Tape& t, Op op, ad::Var a, ad::Var b) {
    switch (op) {
        case Op::Add: return t.sat(t.add(a, b));
        case Op::Sub: return t.sat(t.sub(a, b));
        case Op::Mul: return t.sat(t.mul(a, b));
        case Op::Aq:
            return t.sat(t.div(a, t.sqrt(t.add_const(t.mul(b, b), 1.0))));
        case Op::Square: return t.sat(t.mul(a, a));
        case Op::Abs: return t.sat(t.abs(a));
        case Op::SqrtP: return t.sat(t.sqrt(t.add_const(t.abs(a), kProtectEps)));
        case Op::LnP: return t.sat(t.log(t.add_const(t.abs(a), kProtectEps)));
    }
    throw std::logic_error("unknown operator");
}

}  // namespace

ad::Var MetaLossNetwork::forward_graph(ad::Tape& tape, std::span<const ad::Var> phi, ad::Var y,
                                       ad::Var f) const {
    if (phi.size() != blocks_.size()) {
        throw std::runtime_error("MetaLossNetwork::forward_graph: phi count mismatch");
    }
    const Eigen::Index n = tape.value(y).rows();
    const Eigen::Index n_outputs = tape.value(y).cols();
    if (tape.value(f).rows() != n || tape.value(f).cols() != n_outputs) {
        throw std::runtime_error("MetaLossNetwork::forward_graph: y/f shape mismatch");
    }

    ad::Var total;
    for (Eigen::Index c = 0; c < n_outputs; ++c) {
        ad::Var yc = tape.column(y, static_cast<int>(c));
        ad::Var fc = tape.column(f, static_cast<int>(c));
        std::vector<ad::Var> vals(nodes_.size());
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const NetNode& nn = nodes_[i];
            if (!nn.is_op) {
                switch (nn.term) {
                    case Terminal::PredY: vals[i] = fc; break;
                    case Terminal::TrueY: vals[i] = yc; break;
                    case Terminal::PlusOne:
                        vals[i] = tape.constant(Tensor::Constant(n, 1, 1.0));
                        break;
                    case Terminal::MinusOne:
                        vals[i] = tape.constant(Tensor::Constant(n, 1, -1.0));
                        break;
                }
                continue;
            }
            ad::Var a = tape.scalar_mul(phi[static_cast<std::size_t>(nn.weight[0])],
                                        vals[static_cast<std::size_t>(nn.child[0])]);
            ad::Var b;
            if (op_arity(nn.op) == 2) {
                b = tape.scalar_mul(phi[static_cast<std::size_t>(nn.weight[1])],
                                    vals[static_cast<std::size_t>(nn.child[1])]);
            }
            vals[i] = graph_table_op(tape, nn.op, a, b);
        }
        ad::Var out = vals.back();
        if (wrapper_on_) out = tape.softplus(out);
        total = total.valid() ? tape.add(total, out) : out;
    }
    return tape.mean_all(total);
}

double MetaLossNetwork::forward_batch(const Tensor& y, const Tensor& f) const {
    if (y.rows() != f.rows() || y.cols() != f.cols()) {
        throw std::runtime_error("MetaLossNetwork::forward_batch: y/f shape mismatch");
    }
    double acc = 0.0;
    std::vector<double> vals(nodes_.size());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
        double sample = 0.0;
        for (Eigen::Index c = 0; c < y.cols(); ++c) {
            for (std::size_t i = 0; i < nodes_.size(); ++i) {
                const NetNode& nn = nodes_[i];
                if (!nn.is_op) {
                    switch (nn.term) {
                        case Terminal::PredY: vals[i] = f(r, c); break;
                        case Terminal::TrueY: vals[i] = y(r, c); break;
                        case Terminal::PlusOne: vals[i] = 1.0; break;
                        case Terminal::MinusOne: vals[i] = -1.0; break;
                    }
                    continue;
                }
                double args[2];
                const int arity = op_arity(nn.op);
                for (int k = 0; k < arity; ++k) {
                    args[k] = blocks_[static_cast<std::size_t>(nn.weight[k])](0, 0) *
                              vals[static_cast<std::size_t>(nn.child[k])];
                }
                vals[i] = eval_operator(nn.op, std::span<const double>(args, arity));
            }
            double out = vals.back();
            if (wrapper_on_) out = softplus(out);
            sample += out;
        }
        acc += sample;
    }
    return acc / static_cast<double>(y.rows());
}

std::string MetaLossNetwork::export_json() const {
    json j;
    j["expression"] = serialize(source_);
    j["wrapper"] = wrapper_on_;
    j["phi"] = phi_flat();
    return j.dump(2);
}

MetaLossNetwork MetaLossNetwork::import_json(const std::string& text) {
    json j = json::parse(text);
    if (!j.contains("expression") || !j.contains("wrapper") || !j.contains("phi")) {
        throw std::runtime_error("loss import: expected keys expression, wrapper, phi");
    }
    LossExpr expr = parse_expr(j["expression"].get<std::string>());
    MetaLossNetwork net = build(expr, j["wrapper"].get<bool>());
    std::vector<double> phi = j["phi"].get<std::vector<double>>();
    net.set_phi_flat(phi);
    return net;
}

}  // namespace evoloss
