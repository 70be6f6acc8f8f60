#pragma once

#include <span>
#include <string>
#include <vector>

#include "evoloss/autodiff.hpp"
#include "evoloss/expr.hpp"
#include "evoloss/learner.hpp"
#include "evoloss/rng.hpp"

namespace evoloss {

using ad::Tensor;

// A trainable loss: maps (y, f) batches to a scalar, parameterized by a set of
// weight blocks. Implemented by the expression-derived network and by the
// fixed feed-forward loss used for comparison.
class MetaLoss {
public:
    virtual ~MetaLoss() = default;

    virtual std::size_t parameter_count() const;
    virtual const std::vector<Tensor>& phi_blocks() const = 0;
    virtual void set_phi_blocks(std::vector<Tensor> blocks) = 0;

    // Scalar batch-mean loss; y and f are (batch x C) Vars on the tape,
    // phi one Var per block in phi_blocks() order.
    virtual ad::Var forward_graph(ad::Tape& tape, std::span<const ad::Var> phi, ad::Var y,
                                  ad::Var f) const = 0;

    // Convenience numeric evaluation at the current phi.
    double forward(const Tensor& y, const Tensor& f) const;

    std::vector<double> phi_flat() const;
    void set_phi_flat(std::span<const double> flat);
    bool phi_finite() const;
};

// A task loss used directly as the training loss (the no-meta-learning case).
class TaskLossWrapper final : public MetaLoss {
public:
    explicit TaskLossWrapper(TaskLossKind kind) : kind_(kind) {}

    std::size_t parameter_count() const override { return 0; }
    const std::vector<Tensor>& phi_blocks() const override { return empty_; }
    void set_phi_blocks(std::vector<Tensor>) override {}
    ad::Var forward_graph(ad::Tape& tape, std::span<const ad::Var> phi, ad::Var y,
                          ad::Var f) const override {
        (void)phi;
        return task_loss_graph(tape, kind_, y, f);
    }

private:
    TaskLossKind kind_;
    std::vector<Tensor> empty_;
};

// The edge-parameterized DAG form of a symbolic loss. Structure mirrors the
// reversed expression tree; each tree edge carries one weight that multiplies
// the value flowing from child to parent. parameter_count = node_count - 1.
class MetaLossNetwork final : public MetaLoss {
public:
    // Weights drawn i.i.d. from N(1, 1e-3).
    static MetaLossNetwork from_expr(const LossExpr& expr, Rng& rng, bool wrapper_on);

    // Unit form (phi identically 1), used by search without local optimization.
    static MetaLossNetwork unit_from_expr(const LossExpr& expr, bool wrapper_on);

    std::size_t parameter_count() const override { return blocks_.size(); }
    const std::vector<Tensor>& phi_blocks() const override { return blocks_; }
    void set_phi_blocks(std::vector<Tensor> blocks) override;

    ad::Var forward_graph(ad::Tape& tape, std::span<const ad::Var> phi, ad::Var y,
                          ad::Var f) const override;

    // Fast numeric forward over a (batch x C) pair, batch mean.
    double forward_batch(const Tensor& y, const Tensor& f) const;

    bool wrapper_on() const { return wrapper_on_; }
    const LossExpr& source() const { return source_; }
    const std::string& source_key() const { return source_key_; }

    // Node + edge visits performed while building the network; linear in tree
    // size by construction, exposed so tests can check it.
    std::size_t build_visits() const { return build_visits_; }

    std::string export_json() const;
    static MetaLossNetwork import_json(const std::string& text);

private:
    struct NetNode {
        bool is_op = false;
        Op op = Op::Add;
        Terminal term = Terminal::PredY;
        int child[2] = {-1, -1};
        int weight[2] = {-1, -1};  // phi index of the edge from each child
    };

    MetaLossNetwork() = default;
    static MetaLossNetwork build(const LossExpr& expr, bool wrapper_on);

    std::vector<NetNode> nodes_;  // topological order, children before parents
    std::vector<Tensor> blocks_;  // 1x1 scalar per edge
    bool wrapper_on_ = true;
    LossExpr source_;
    std::string source_key_;
    std::size_t build_visits_ = 0;
};

}  // namespace evoloss
