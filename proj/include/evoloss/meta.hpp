#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "evoloss/gp.hpp"
#include "evoloss/learner.hpp"
#include "evoloss/lossnet.hpp"
#include "evoloss/tasks.hpp"

namespace evoloss {

struct MetaConfig {
    int s_meta = 500;
    int s_base = 100;
    int s_base_eval = 500;
    double alpha = 1e-3;
    double eta = 1e-3;
    int batch_size = 100;
    int unroll_window = 1;  // gradient-tracked base steps per meta step

    void validate() const;
};

struct LearnerSpec {
    std::vector<int> hidden = {40, 40};
    bool with_bias = true;
};

Mlp make_base_learner(const LearnerSpec& spec, const Task& task, Rng& rng);

struct FitnessReport {
    double fitness = 0.0;  // +inf sentinel on divergence
    std::vector<double> per_task;
    bool diverged = false;
    double wall_seconds = 0.0;
};

// The fixed two-hidden-layer feed-forward loss (2 -> 50 -> 50 -> 1, ReLU, no
// biases, softplus output) applied per output and summed.
class Ml3Network final : public MetaLoss {
public:
    static Ml3Network glorot_init(Rng& rng);

    const std::vector<Tensor>& phi_blocks() const override { return blocks_; }
    void set_phi_blocks(std::vector<Tensor> blocks) override;
    ad::Var forward_graph(ad::Tape& tape, std::span<const ad::Var> phi, ad::Var y,
                          ad::Var f) const override;

    std::string export_json() const;
    static Ml3Network import_json(const std::string& text);

private:
    std::vector<Tensor> blocks_;  // W1 2x50, W2 50x50, W3 50x1
};

// Unrolled-differentiation local search: optimizes the loss's weights in place
// by differentiating the task loss through the tracked base SGD step(s).
// Reports divergence on any non-finite value; phi keeps the last finite state
// in that case.
struct InnerOptResult {
    bool diverged = false;
};

InnerOptResult inner_optimize(MetaLoss& loss, const std::vector<Task>& tasks,
                              const LearnerSpec& spec, const MetaConfig& cfg, std::uint64_t seed);

// Trains a fresh learner per task with the loss frozen and reports the mean
// final performance metric. Every failure maps to the +inf sentinel.
FitnessReport evaluate_fitness(const MetaLoss& loss, const std::vector<Task>& tasks,
                               const LearnerSpec& spec, const MetaConfig& cfg, std::uint64_t seed);

struct CurvePoint {
    int step = 0;
    double metric = 0.0;
};

// Trains a fresh learner for s_base_eval steps, logging the performance metric
// on a fixed evaluation batch at step 0, every log_interval steps, and at the
// final step.
std::vector<CurvePoint> meta_test(const MetaLoss& loss, const Task& task, const LearnerSpec& spec,
                                  const MetaConfig& cfg, int log_interval, std::uint64_t seed);

enum class Method { Baseline, Random, GpLfl, Ml3, EvoMAL };

const char* method_name(Method m);
std::optional<Method> method_from_name(const std::string& name);

// Loss-file (de)serialization shared by the runner and the CLI.
std::string export_loss(const MetaLoss& loss);
std::unique_ptr<MetaLoss> import_loss(const std::string& text);

struct MethodRunParams {
    Method method = Method::Baseline;
    GpConfig gp;
    MetaConfig meta;
    LearnerSpec learner;
    bool wrapper = true;
    std::uint64_t seed = 0;
    int workers = 1;
    int curve_interval = 50;
};

struct TaskCurve {
    std::string task_name;
    std::string split;  // "train" or "test"
    std::vector<CurvePoint> points;
};

struct MethodResult {
    std::optional<SearchResult> search;
    std::string loss_export;  // empty for Baseline
    FitnessReport fitness;    // final loss on the training tasks (Baseline included)
    std::vector<TaskCurve> curves;
    double train_final_metric = 0.0;  // mean final curve value per split
    double test_final_metric = 0.0;
    int evaluations = 0;
    double wall_seconds = 0.0;
};

MethodResult run_method(const MethodRunParams& params, const MetaDataset& data);

// Evaluator used by the evolutionary methods; exposed for tests.
class NetworkFitnessEvaluator final : public CandidateEvaluator {
public:
    NetworkFitnessEvaluator(const std::vector<Task>& tasks, const LearnerSpec& spec,
                            const MetaConfig& cfg, bool wrapper, bool local_search)
        : tasks_(tasks), spec_(spec), cfg_(cfg), wrapper_(wrapper), local_search_(local_search) {}

    EvalOutcome evaluate(const LossExpr& expr, std::uint64_t eval_seed) const override;

private:
    const std::vector<Task>& tasks_;
    LearnerSpec spec_;
    MetaConfig cfg_;
    bool wrapper_;
    bool local_search_;
};

}  // namespace evoloss
