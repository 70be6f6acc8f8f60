#include "evoloss/learner.hpp"

#include <cassert>
#include <cmath>
#include <stdexcept>

namespace evoloss {

TaskLossKind loss_for_head(Head head) {
    switch (head) {
        case Head::Identity: return TaskLossKind::Mse;
        case Head::Sigmoid: return TaskLossKind::Bce;
        case Head::Softmax: return TaskLossKind::Cce;
    }
    throw std::logic_error("unknown head");
}

PerfMetricKind metric_for_loss(TaskLossKind kind) {
    return kind == TaskLossKind::Mse ? PerfMetricKind::Mse : PerfMetricKind::ErrorRate;
}

Tensor glorot_uniform(Rng& rng, int fan_in, int fan_out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor w(fan_in, fan_out);
    for (int r = 0; r < fan_in; ++r) {
        for (int c = 0; c < fan_out; ++c) w(r, c) = dist(rng);
    }
    return w;
}

Mlp::Mlp(std::vector<int> layer_sizes, Head head, bool with_bias)
    : sizes_(std::move(layer_sizes)), head_(head), with_bias_(with_bias) {
    if (sizes_.size() < 2) throw std::invalid_argument("Mlp needs at least two layer sizes");
    for (int s : sizes_) {
        if (s < 1) throw std::invalid_argument("Mlp layer sizes must be positive");
    }
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
        params_.push_back(Tensor::Zero(sizes_[l], sizes_[l + 1]));
        if (with_bias_) params_.push_back(Tensor::Zero(1, sizes_[l + 1]));
    }
}

Mlp Mlp::glorot(std::vector<int> layer_sizes, Head head, Rng& rng, bool with_bias) {
    Mlp m(std::move(layer_sizes), head, with_bias);
    std::size_t p = 0;
    for (std::size_t l = 0; l + 1 < m.sizes_.size(); ++l) {
        m.params_[p++] = glorot_uniform(rng, m.sizes_[l], m.sizes_[l + 1]);
        if (with_bias) ++p;  // biases stay zero
    }
    return m;
}

std::size_t Mlp::parameter_count() const {
    std::size_t n = 0;
    for (const Tensor& p : params_) n += static_cast<std::size_t>(p.size());
    return n;
}

bool Mlp::finite() const {
    for (const Tensor& p : params_) {
        if (!p.allFinite()) return false;
    }
    return true;
}

namespace {

Tensor apply_head(Head head, const Tensor& pre) {
    switch (head) {
        case Head::Identity:
            return pre;
        case Head::Sigmoid:
            return pre.unaryExpr([](double x) {
                return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            });
        case Head::Softmax: {
            Tensor out(pre.rows(), pre.cols());
            for (Eigen::Index r = 0; r < pre.rows(); ++r) {
                const double m = pre.row(r).maxCoeff();
                Eigen::RowVectorXd e = (pre.row(r).array() - m).exp();
                out.row(r) = e / e.sum();
            }
            return out;
        }
    }
    throw std::logic_error("unknown head");
}

}  // namespace

Tensor Mlp::forward(const Tensor& X) const {
    MlpCache cache;
    return forward_cached(X, cache);
}

Tensor Mlp::forward_cached(const Tensor& X, MlpCache& cache) const {
    if (X.cols() != d_in()) throw std::runtime_error("Mlp forward: input width mismatch");
    const std::size_t n_layers = sizes_.size() - 1;
    cache.post.assign(1, X);
    cache.pre.clear();
    std::size_t p = 0;
    for (std::size_t l = 0; l < n_layers; ++l) {
        Tensor pre = cache.post.back() * params_[p++];
        if (with_bias_) pre.rowwise() += params_[p++].row(0);
        cache.pre.push_back(pre);
        if (l + 1 < n_layers) {
            cache.post.push_back(pre.cwiseMax(0.0));
        } else {
            cache.post.push_back(pre);  // head applied separately
        }
    }
    cache.output = apply_head(head_, cache.pre.back());
    return cache.output;
}

std::vector<Tensor> Mlp::backward(const MlpCache& cache, const Tensor& d_output) const {
    const std::size_t n_layers = sizes_.size() - 1;
    Tensor d_pre;
    const Tensor& f = cache.output;
    switch (head_) {
        case Head::Identity:
            d_pre = d_output;
            break;
        case Head::Sigmoid:
            d_pre = d_output.cwiseProduct(f.cwiseProduct((1.0 - f.array()).matrix()));
            break;
        case Head::Softmax: {
            Eigen::VectorXd inner = d_output.cwiseProduct(f).rowwise().sum();
            d_pre = f.cwiseProduct(d_output - inner.replicate(1, f.cols()));
            break;
        }
    }

    std::vector<Tensor> grads(params_.size());
    for (std::size_t l = n_layers; l-- > 0;) {
        const std::size_t pw = with_bias_ ? 2 * l : l;
        grads[pw] = cache.post[l].transpose() * d_pre;
        if (with_bias_) grads[pw + 1] = d_pre.colwise().sum();
        if (l > 0) {
            Tensor d_post = d_pre * params_[pw].transpose();
            d_pre = d_post.cwiseProduct(
                cache.pre[l - 1].unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; }));
        }
    }
    return grads;
}

ad::Var Mlp::forward_graph(ad::Tape& tape, std::span<const ad::Var> params, ad::Var X) const {
    assert(params.size() == params_.size());
    const std::size_t n_layers = sizes_.size() - 1;
    ad::Var h = X;
    std::size_t p = 0;
    for (std::size_t l = 0; l < n_layers; ++l) {
        ad::Var pre = tape.matmul(h, params[p++]);
        if (with_bias_) pre = tape.add_row_vec(pre, params[p++]);
        if (l + 1 < n_layers) {
            h = tape.relu(pre);
        } else {
            h = pre;
        }
    }
    switch (head_) {
        case Head::Identity: return h;
        case Head::Sigmoid: return tape.sigmoid(h);
        case Head::Softmax: return tape.softmax_rows(h);
    }
    throw std::logic_error("unknown head");
}

void Mlp::sgd_step(std::span<const Tensor> grads, double alpha) {
    assert(grads.size() == params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        params_[i] -= alpha * grads[i];
    }
}

double task_loss(TaskLossKind kind, const Tensor& y, const Tensor& f) {
    if (y.rows() != f.rows() || y.cols() != f.cols()) {
        throw std::runtime_error("task_loss: shape mismatch");
    }
    const double n = static_cast<double>(y.size());
    switch (kind) {
        case TaskLossKind::Mse:
            return (y - f).squaredNorm() / n;
        case TaskLossKind::Bce: {
            auto fc = f.array().min(1.0 - kProbClamp).max(kProbClamp);
            return -((y.array() * fc.log()) + ((1.0 - y.array()) * (1.0 - fc).log())).mean();
        }
        case TaskLossKind::Cce: {
            auto fc = f.array().min(1.0 - kProbClamp).max(kProbClamp);
            return -(y.array() * fc.log()).sum() / static_cast<double>(y.rows());
        }
    }
    throw std::logic_error("unknown task loss kind");
}

ad::Var task_loss_graph(ad::Tape& tape, TaskLossKind kind, ad::Var y, ad::Var f) {
    switch (kind) {
        case TaskLossKind::Mse: {
            ad::Var d = tape.sub(y, f);
            return tape.mean_all(tape.mul(d, d));
        }
        case TaskLossKind::Bce: {
            ad::Var lf = tape.log(tape.clamp(f, kProbClamp, 1.0 - kProbClamp));
            ad::Var l1f = tape.log(
                tape.clamp(tape.add_const(tape.neg(f), 1.0), kProbClamp, 1.0 - kProbClamp));
            ad::Var one_minus_y = tape.add_const(tape.neg(y), 1.0);
            ad::Var term = tape.add(tape.mul(y, lf), tape.mul(one_minus_y, l1f));
            return tape.neg(tape.mean_all(term));
        }
        case TaskLossKind::Cce: {
            ad::Var lf = tape.log(tape.clamp(f, kProbClamp, 1.0 - kProbClamp));
            const double n = static_cast<double>(tape.value(y).rows());
            return tape.mul_const(tape.sum_all(tape.mul(y, lf)), -1.0 / n);
        }
    }
    throw std::logic_error("unknown task loss kind");
}

double performance_metric(PerfMetricKind kind, const Tensor& y, const Tensor& f) {
    if (y.rows() != f.rows() || y.cols() != f.cols()) {
        throw std::runtime_error("performance_metric: shape mismatch");
    }
    if (kind == PerfMetricKind::Mse) {
        return (y - f).squaredNorm() / static_cast<double>(y.size());
    }
    const Eigen::Index n = y.rows();
    Eigen::Index wrong = 0;
    for (Eigen::Index r = 0; r < n; ++r) {
        Eigen::Index py = 0;
        Eigen::Index pf = 0;
        if (y.cols() == 1) {
            py = y(r, 0) > 0.5 ? 1 : 0;
            pf = f(r, 0) > 0.5 ? 1 : 0;
        } else {
            y.row(r).maxCoeff(&py);
            f.row(r).maxCoeff(&pf);
        }
        if (py != pf) ++wrong;
    }
    return static_cast<double>(wrong) / static_cast<double>(n);
}

}  // namespace evoloss
