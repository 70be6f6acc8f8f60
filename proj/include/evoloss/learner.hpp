#pragma once

#include <span>
#include <vector>

#include "evoloss/autodiff.hpp"
#include "evoloss/rng.hpp"

namespace evoloss {

using ad::Tensor;

enum class Head { Identity, Sigmoid, Softmax };
enum class TaskLossKind { Mse, Bce, Cce };
enum class PerfMetricKind { Mse, ErrorRate };

// Head / task-loss / metric pairings are fixed.
TaskLossKind loss_for_head(Head head);
PerfMetricKind metric_for_loss(TaskLossKind kind);

// Clamp applied to predicted probabilities inside the logs of BCE/CCE.
inline constexpr double kProbClamp = 1e-7;

Tensor glorot_uniform(Rng& rng, int fan_in, int fan_out);

struct MlpCache {
    std::vector<Tensor> post;  // post[0] = input, post[l] = activation after layer l
    std::vector<Tensor> pre;   // pre-activation per layer
    Tensor output;             // after head
};

// Plain fully connected network with ReLU hidden layers. Parameters are stored
// as [W0, b0, W1, b1, ...] (biases omitted when disabled).
class Mlp {
public:
    Mlp(std::vector<int> layer_sizes, Head head, bool with_bias = true);
    static Mlp glorot(std::vector<int> layer_sizes, Head head, Rng& rng, bool with_bias = true);

    Head head() const { return head_; }
    TaskLossKind task_loss_kind() const { return loss_for_head(head_); }
    int d_in() const { return sizes_.front(); }
    int d_out() const { return sizes_.back(); }
    bool with_bias() const { return with_bias_; }
    const std::vector<int>& layer_sizes() const { return sizes_; }

    std::vector<Tensor>& params() { return params_; }
    const std::vector<Tensor>& params() const { return params_; }
    std::size_t parameter_count() const;
    bool finite() const;

    Tensor forward(const Tensor& X) const;
    Tensor forward_cached(const Tensor& X, MlpCache& cache) const;

    // Backprop of dL/d(params) given dL/d(output-after-head); cache must come
    // from forward_cached on the same parameters.
    std::vector<Tensor> backward(const MlpCache& cache, const Tensor& d_output) const;

    // Graph forward with explicit parameter Vars (same order as params()).
    ad::Var forward_graph(ad::Tape& tape, std::span<const ad::Var> params, ad::Var X) const;

    void sgd_step(std::span<const Tensor> grads, double alpha);

private:
    std::vector<int> sizes_;
    Head head_;
    bool with_bias_;
    std::vector<Tensor> params_;
};

double task_loss(TaskLossKind kind, const Tensor& y, const Tensor& f);
ad::Var task_loss_graph(ad::Tape& tape, TaskLossKind kind, ad::Var y, ad::Var f);

// MSE for regression; argmax error rate for classification (threshold 0.5 when
// there is a single output column). Ties resolve to the lower index.
double performance_metric(PerfMetricKind kind, const Tensor& y, const Tensor& f);

}  // namespace evoloss
