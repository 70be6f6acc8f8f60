#include "evoloss/meta.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <stdexcept>

namespace evoloss {

using json = nlohmann::json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void MetaConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw std::invalid_argument("meta." + field + ": " + why);
    };
    if (s_meta < 0) fail("s_meta", "must be >= 0");
    if (s_base < 1) fail("s_base", "must be >= 1");
    if (s_base_eval < 1) fail("s_base_eval", "must be >= 1");
    if (!(alpha > 0.0)) fail("alpha", "must be > 0");
    if (eta < 0.0) fail("eta", "must be >= 0");
    if (batch_size < 1) fail("batch_size", "must be >= 1");
    if (unroll_window < 1) fail("unroll_window", "must be >= 1");
    if (unroll_window > s_base) fail("unroll_window", "must be <= s_base");
}

Mlp make_base_learner(const LearnerSpec& spec, const Task& task, Rng& rng) {
    std::vector<int> sizes;
    sizes.push_back(task.d_in);
    for (int h : spec.hidden) sizes.push_back(h);
    sizes.push_back(task.n_outputs);
    return Mlp::glorot(std::move(sizes), head_for_kind(task.kind), rng, spec.with_bias);
}

Ml3Network Ml3Network::glorot_init(Rng& rng) {
    Ml3Network net;
    net.blocks_.push_back(glorot_uniform(rng, 2, 50));
    net.blocks_.push_back(glorot_uniform(rng, 50, 50));
    net.blocks_.push_back(glorot_uniform(rng, 50, 1));
    return net;
}

void Ml3Network::set_phi_blocks(std::vector<Tensor> blocks) {
    if (blocks.size() != 3 || blocks[0].rows() != 2 || blocks[0].cols() != 50 ||
        blocks[1].rows() != 50 || blocks[1].cols() != 50 || blocks[2].rows() != 50 ||
        blocks[2].cols() != 1) {
        throw std::runtime_error("Ml3Network: wrong phi block shapes");
    }
    blocks_ = std::move(blocks);
}

ad::Var Ml3Network::forward_graph(ad::Tape& tape, std::span<const ad::Var> phi, ad::Var y,
                                  ad::Var f) const {
    if (phi.size() != 3) throw std::runtime_error("Ml3Network: expected 3 phi blocks");
    const int n_outputs = static_cast<int>(tape.value(y).cols());
    ad::Var total;
    for (int c = 0; c < n_outputs; ++c) {
        ad::Var yc = tape.column(y, c);
        ad::Var fc = tape.column(f, c);
        ad::Var x = tape.add(tape.place_column(yc, 0, 2), tape.place_column(fc, 1, 2));
        ad::Var h1 = tape.relu(tape.matmul(x, phi[0]));
        ad::Var h2 = tape.relu(tape.matmul(h1, phi[1]));
        ad::Var out = tape.softplus(tape.matmul(h2, phi[2]));
        total = total.valid() ? tape.add(total, out) : out;
    }
    return tape.mean_all(total);
}

std::string Ml3Network::export_json() const {
    json j;
    j["type"] = "ml3";
    j["phi"] = phi_flat();
    return j.dump(2);
}

Ml3Network Ml3Network::import_json(const std::string& text) {
    json j = json::parse(text);
    if (!j.contains("phi")) throw std::runtime_error("ml3 loss import: missing phi");
    Ml3Network net;
    net.blocks_ = {Tensor::Zero(2, 50), Tensor::Zero(50, 50), Tensor::Zero(50, 1)};
    net.set_phi_flat(j["phi"].get<std::vector<double>>());
    return net;
}

namespace {

// One base SGD step with the loss weights frozen: numeric learner forward,
// d(loss)/df from a small graph over the loss network only, manual backprop
// through the learner (the chain-rule decomposition of the loss gradient).
bool train_step_fast(Mlp& learner, const MetaLoss& loss, const Batch& batch, double alpha,
                     ad::Tape& tape, MlpCache& cache) {
    const Tensor& f = learner.forward_cached(batch.X, cache);
    tape.clear();
    std::vector<ad::Var> phi;
    phi.reserve(loss.phi_blocks().size());
    for (const Tensor& b : loss.phi_blocks()) phi.push_back(tape.constant(b));
    ad::Var fv = tape.leaf(f, true);
    ad::Var yv = tape.constant(batch.y);
    ad::Var m = loss.forward_graph(tape, phi, yv, fv);
    if (!std::isfinite(tape.scalar(m))) return false;
    ad::Var df = tape.grad(m, std::span<const ad::Var>(&fv, 1))[0];
    const Tensor& d = tape.value(df);
    if (!d.allFinite()) return false;
    learner.sgd_step(learner.backward(cache, d), alpha);
    return true;
}

bool train_frozen(Mlp& learner, const MetaLoss& loss, const Task& task, int steps,
                  const MetaConfig& cfg, Rng& rng) {
    ad::Tape tape;
    MlpCache cache;
    for (int s = 0; s < steps; ++s) {
        const Batch batch = task.sample(cfg.batch_size, rng);
        if (!train_step_fast(learner, loss, batch, cfg.alpha, tape, cache)) return false;
    }
    return learner.finite();
}

}  // namespace

InnerOptResult inner_optimize(MetaLoss& loss, const std::vector<Task>& tasks,
                              const LearnerSpec& spec, const MetaConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (tasks.empty()) throw std::invalid_argument("inner_optimize: no tasks");
    if (loss.parameter_count() == 0) return {};  // nothing to optimize

    Rng rng = make_rng(seed, 0x1Au);
    const int window = std::min(cfg.unroll_window, cfg.s_base);
    const int untracked = cfg.s_base - window;

    ad::Tape tape;
    ad::Tape fast_tape;
    MlpCache cache;

    for (int meta_step = 0; meta_step < cfg.s_meta; ++meta_step) {
        tape.clear();
        std::vector<ad::Var> phi_vars;
        phi_vars.reserve(loss.phi_blocks().size());
        for (const Tensor& b : loss.phi_blocks()) phi_vars.push_back(tape.leaf(b, true));

        ad::Var total_task_loss;
        for (const Task& task : tasks) {
            Mlp learner = make_base_learner(spec, task, rng);

            for (int s = 0; s < untracked; ++s) {
                const Batch batch = task.sample(cfg.batch_size, rng);
                if (!train_step_fast(learner, loss, batch, cfg.alpha, fast_tape, cache)) {
                    return {true};
                }
            }
            if (!learner.finite()) return {true};

            // Tracked steps: theta becomes a graph function of phi.
            std::vector<ad::Var> theta;
            theta.reserve(learner.params().size());
            for (const Tensor& p : learner.params()) theta.push_back(tape.leaf(p, true));

            Batch batch;
            for (int s = 0; s < window; ++s) {
                batch = task.sample(cfg.batch_size, rng);
                ad::Var x = tape.constant(batch.X);
                ad::Var y = tape.constant(batch.y);
                ad::Var f = learner.forward_graph(tape, theta, x);
                ad::Var m = loss.forward_graph(tape, phi_vars, y, f);
                if (!std::isfinite(tape.scalar(m))) return {true};
                std::vector<ad::Var> grads = tape.grad(m, theta, /*create_graph=*/true);
                for (std::size_t i = 0; i < theta.size(); ++i) {
                    theta[i] = tape.sub(theta[i], tape.mul_const(grads[i], cfg.alpha));
                    if (!tape.value(theta[i]).allFinite()) return {true};
                }
            }

            ad::Var f_new = learner.forward_graph(tape, theta, tape.constant(batch.X));
            ad::Var l_task =
                task_loss_graph(tape, task.task_loss_kind(), tape.constant(batch.y), f_new);
            if (!std::isfinite(tape.scalar(l_task))) return {true};
            total_task_loss = total_task_loss.valid() ? tape.add(total_task_loss, l_task) : l_task;
        }

        const std::vector<ad::Var> phi_grads = tape.grad(total_task_loss, phi_vars);
        std::vector<Tensor> blocks = loss.phi_blocks();
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const Tensor& g = tape.value(phi_grads[i]);
            if (!g.allFinite()) return {true};
            blocks[i] -= cfg.eta * g;
            if (!blocks[i].allFinite()) return {true};
        }
        loss.set_phi_blocks(std::move(blocks));
    }
    return {};
}

FitnessReport evaluate_fitness(const MetaLoss& loss, const std::vector<Task>& tasks,
                               const LearnerSpec& spec, const MetaConfig& cfg, std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    FitnessReport report;
    report.per_task.assign(tasks.size(), kInf);
    try {
        cfg.validate();
        if (tasks.empty()) throw std::invalid_argument("evaluate_fitness: no tasks");
        if (!loss.phi_finite()) throw std::runtime_error("non-finite loss weights");
        double sum = 0.0;
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            Rng rng = make_rng(seed, 0xF1u, static_cast<std::uint64_t>(i));
            Mlp learner = make_base_learner(spec, tasks[i], rng);
            if (!train_frozen(learner, loss, tasks[i], cfg.s_base_eval, cfg, rng)) {
                throw std::runtime_error("training diverged");
            }
            const Batch batch = tasks[i].sample(cfg.batch_size, rng);
            const double metric =
                performance_metric(tasks[i].perf_metric_kind(), batch.y, learner.forward(batch.X));
            if (!std::isfinite(metric)) throw std::runtime_error("non-finite metric");
            report.per_task[i] = metric;
            sum += metric;
        }
        report.fitness = sum / static_cast<double>(tasks.size());
    } catch (const std::exception&) {
        report.fitness = kInf;
        report.diverged = true;
    }
    report.wall_seconds = seconds_since(t0);
    return report;
}

std::vector<CurvePoint> meta_test(const MetaLoss& loss, const Task& task, const LearnerSpec& spec,
                                  const MetaConfig& cfg, int log_interval, std::uint64_t seed) {
    cfg.validate();
    if (log_interval < 1) throw std::invalid_argument("meta_test: log_interval must be >= 1");

    Rng rng = make_rng(seed, 0x7Eu);
    Rng eval_rng = make_rng(seed, 0x7Fu);
    const Batch eval_batch = task.sample(cfg.batch_size, eval_rng);
    const PerfMetricKind metric_kind = task.perf_metric_kind();

    std::vector<CurvePoint> curve;
    Mlp learner = make_base_learner(spec, task, rng);
    bool diverged = !loss.phi_finite();

    ad::Tape tape;
    MlpCache cache;
    auto log_point = [&](int step) {
        double metric = kInf;
        if (!diverged) {
            metric = performance_metric(metric_kind, eval_batch.y, learner.forward(eval_batch.X));
            if (!std::isfinite(metric)) metric = kInf;
        }
        curve.push_back({step, metric});
    };

    log_point(0);
    for (int s = 1; s <= cfg.s_base_eval; ++s) {
        if (!diverged) {
            const Batch batch = task.sample(cfg.batch_size, rng);
            if (!train_step_fast(learner, loss, batch, cfg.alpha, tape, cache) ||
                !learner.finite()) {
                diverged = true;
            }
        }
        if (s % log_interval == 0 || s == cfg.s_base_eval) log_point(s);
    }
    return curve;
}

const char* method_name(Method m) {
    switch (m) {
        case Method::Baseline: return "baseline";
        case Method::Random: return "random";
        case Method::GpLfl: return "gp-lfl";
        case Method::Ml3: return "ml3";
        case Method::EvoMAL: return "evomal";
    }
    return "?";
}

std::optional<Method> method_from_name(const std::string& name) {
    for (Method m : {Method::Baseline, Method::Random, Method::GpLfl, Method::Ml3, Method::EvoMAL}) {
        if (name == method_name(m)) return m;
    }
    return std::nullopt;
}

std::string export_loss(const MetaLoss& loss) {
    if (const auto* net = dynamic_cast<const MetaLossNetwork*>(&loss)) return net->export_json();
    if (const auto* ml3 = dynamic_cast<const Ml3Network*>(&loss)) return ml3->export_json();
    throw std::runtime_error("export_loss: this loss kind has no file form");
}

std::unique_ptr<MetaLoss> import_loss(const std::string& text) {
    json j = json::parse(text);
    if (j.contains("expression")) {
        return std::make_unique<MetaLossNetwork>(MetaLossNetwork::import_json(text));
    }
    if (j.value("type", "") == "ml3") {
        return std::make_unique<Ml3Network>(Ml3Network::import_json(text));
    }
    throw std::runtime_error("import_loss: unrecognized loss file (expected 'expression' or type 'ml3')");
}

EvalOutcome NetworkFitnessEvaluator::evaluate(const LossExpr& expr, std::uint64_t eval_seed) const {
    Rng init_rng(mix_seed(eval_seed, 0x11u));
    MetaLossNetwork net = local_search_ ? MetaLossNetwork::from_expr(expr, init_rng, wrapper_)
                                        : MetaLossNetwork::unit_from_expr(expr, wrapper_);
    if (local_search_) {
        const InnerOptResult r = inner_optimize(net, tasks_, spec_, cfg_, mix_seed(eval_seed, 0x22u));
        if (r.diverged) {
            return {kInf, net.phi_flat(), true};
        }
    }
    const FitnessReport rep = evaluate_fitness(net, tasks_, spec_, cfg_, mix_seed(eval_seed, 0x33u));
    return {rep.fitness, net.phi_flat(), rep.diverged};
}

namespace {

void append_curves(MethodResult& result, const MetaLoss& loss, const std::vector<Task>& tasks,
                   const char* split, const MethodRunParams& p) {
    double sum_final = 0.0;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        TaskCurve tc;
        tc.task_name = tasks[i].name;
        tc.split = split;
        tc.points = meta_test(loss, tasks[i], p.learner, p.meta, p.curve_interval,
                              mix_seed(p.seed, split[0] == 't' && split[1] == 'r' ? 0x100u : 0x200u,
                                       static_cast<std::uint64_t>(i)));
        sum_final += tc.points.back().metric;
        result.curves.push_back(std::move(tc));
    }
    const double mean_final = sum_final / static_cast<double>(tasks.size());
    if (std::string(split) == "train") {
        result.train_final_metric = mean_final;
    } else {
        result.test_final_metric = mean_final;
    }
}

}  // namespace

MethodResult run_method(const MethodRunParams& p, const MetaDataset& data) {
    const auto t0 = std::chrono::steady_clock::now();
    p.gp.validate();
    p.meta.validate();
    if (data.train_tasks.empty()) throw std::invalid_argument("run_method: no training tasks");

    MethodResult result;
    std::unique_ptr<MetaLoss> final_loss;

    switch (p.method) {
        case Method::Baseline: {
            final_loss = std::make_unique<TaskLossWrapper>(data.train_tasks[0].task_loss_kind());
            result.fitness =
                evaluate_fitness(*final_loss, data.train_tasks, p.learner, p.meta, p.seed);
            result.evaluations = 0;
            break;
        }
        case Method::Random: {
            // Same evaluation budget as the evolutionary search.
            const int budget = p.gp.population_size * p.gp.generations;
            if (budget < 1) throw std::invalid_argument("random search: empty evaluation budget");
            Rng rng = make_rng(p.seed, 0x9Eu);
            const int depth_span = p.gp.max_init_depth - p.gp.min_init_depth + 1;
            double best_fitness = kInf;
            std::unique_ptr<MetaLossNetwork> best;
            FitnessReport best_report;
            best_report.fitness = kInf;
            best_report.diverged = true;
            for (int b = 0; b < budget; ++b) {
                const int depth = p.gp.min_init_depth + (b / 2) % depth_span;
                const GenMethod method = (b % 2 == 0) ? GenMethod::Full : GenMethod::Grow;
                LossExpr expr =
                    enforce_arguments_constraint(generate_tree(rng, method, depth), rng);
                auto net = std::make_unique<MetaLossNetwork>(
                    MetaLossNetwork::unit_from_expr(expr, p.wrapper));
                const FitnessReport rep =
                    evaluate_fitness(*net, data.train_tasks, p.learner, p.meta,
                                     mix_seed(p.seed, 0xAu, static_cast<std::uint64_t>(b)));
                if (rep.fitness < best_fitness || best == nullptr) {
                    best_fitness = rep.fitness;
                    best = std::move(net);
                    best_report = rep;
                }
            }
            result.evaluations = budget;
            result.fitness = best_report;
            final_loss = std::move(best);
            break;
        }
        case Method::GpLfl:
        case Method::EvoMAL: {
            const bool local_search = p.method == Method::EvoMAL;
            NetworkFitnessEvaluator evaluator(data.train_tasks, p.learner, p.meta, p.wrapper,
                                              local_search);
            SearchResult search = evolve(p.gp, evaluator, p.seed, p.workers);
            auto net = std::make_unique<MetaLossNetwork>(
                MetaLossNetwork::unit_from_expr(search.best, p.wrapper));
            net->set_phi_flat(search.best_phi);
            result.evaluations = search.total_evaluations;
            result.fitness.fitness = search.best_fitness;
            result.fitness.diverged = !std::isfinite(search.best_fitness);
            final_loss = std::move(net);
            result.search = std::move(search);
            break;
        }
        case Method::Ml3: {
            Rng rng = make_rng(p.seed, 0x31u);
            auto net = std::make_unique<Ml3Network>(Ml3Network::glorot_init(rng));
            inner_optimize(*net, data.train_tasks, p.learner, p.meta, mix_seed(p.seed, 0x32u));
            result.fitness =
                evaluate_fitness(*net, data.train_tasks, p.learner, p.meta, mix_seed(p.seed, 0x33u));
            result.evaluations = 1;
            final_loss = std::move(net);
            break;
        }
    }

    if (p.method != Method::Baseline) result.loss_export = export_loss(*final_loss);
    append_curves(result, *final_loss, data.train_tasks, "train", p);
    if (!data.test_tasks.empty()) append_curves(result, *final_loss, data.test_tasks, "test", p);
    result.wall_seconds = seconds_since(t0);
    return result;
}

}  // namespace evoloss
