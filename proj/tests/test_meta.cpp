#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "evoloss/meta.hpp"

using namespace evoloss;
using evoloss::ad::Tape;
using evoloss::ad::Var;

namespace {

MetaConfig tiny_meta() {
    MetaConfig cfg;
    cfg.s_meta = 3;
    cfg.s_base = 5;
    cfg.s_base_eval = 40;
    cfg.batch_size = 16;
    return cfg;
}

LearnerSpec tiny_learner() {
    LearnerSpec spec;
    spec.hidden = {8};
    return spec;
}

std::vector<Task> one_sine_task(std::uint64_t seed) {
    Rng rng(seed);
    return sample_sine_tasks(rng, 1, {-2.0, 2.0});
}

// The one-step unrolled objective computed without any second-order autodiff:
// first-order gradient of the meta-loss, a numeric SGD step, then the numeric
// task loss. Serves as the independent reference for hypergradient checks.
double unrolled_objective(const MetaLossNetwork& net, const Mlp& start, const Batch& train,
                          const Batch& eval, double alpha) {
    Mlp learner = start;
    MlpCache cache;
    const Tensor f = learner.forward_cached(train.X, cache);
    Tape tape;
    std::vector<Var> phi;
    for (const Tensor& b : net.phi_blocks()) phi.push_back(tape.constant(b));
    Var fv = tape.leaf(f);
    Var m = net.forward_graph(tape, phi, tape.constant(train.y), fv);
    const Tensor dMdf = tape.value(tape.grad(m, std::vector<Var>{fv})[0]);
    learner.sgd_step(learner.backward(cache, dMdf), alpha);
    return task_loss(TaskLossKind::Mse, eval.y, learner.forward(eval.X));
}

// Analytic hypergradient through the tracked step, the same construction
// inner_optimize uses.
std::vector<double> analytic_hypergradient(const MetaLossNetwork& net, const Mlp& start,
                                           const Batch& train, const Batch& eval, double alpha) {
    Tape tape;
    std::vector<Var> phi;
    for (const Tensor& b : net.phi_blocks()) phi.push_back(tape.leaf(b, true));
    std::vector<Var> theta;
    for (const Tensor& p : start.params()) theta.push_back(tape.leaf(p, true));

    Var f = start.forward_graph(tape, theta, tape.constant(train.X));
    Var m = net.forward_graph(tape, phi, tape.constant(train.y), f);
    std::vector<Var> grads = tape.grad(m, theta, /*create_graph=*/true);
    std::vector<Var> theta_new;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        theta_new.push_back(tape.sub(theta[i], tape.mul_const(grads[i], alpha)));
    }
    Var f_new = start.forward_graph(tape, theta_new, tape.constant(eval.X));
    Var l = task_loss_graph(tape, TaskLossKind::Mse, tape.constant(eval.y), f_new);
    std::vector<Var> hg = tape.grad(l, phi);
    std::vector<double> out;
    for (Var g : hg) out.push_back(tape.scalar(g));
    return out;
}

}  // namespace

TEST_CASE("meta config validation names the field") {
    MetaConfig cfg;
    cfg.unroll_window = 200;  // > s_base
    try {
        cfg.validate();
        FAIL("expected a validation error");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("unroll_window") != std::string::npos);
    }
    MetaConfig ok;
    CHECK_NOTHROW(ok.validate());
    MetaConfig zero_eta;
    zero_eta.eta = 0.0;
    CHECK_NOTHROW(zero_eta.validate());
}

TEST_CASE("base learner matches the task dimensions") {
    Rng rng(1);
    std::vector<Task> tasks = one_sine_task(2);
    LearnerSpec spec;
    spec.hidden = {40, 40};
    Mlp m = make_base_learner(spec, tasks[0], rng);
    CHECK(m.layer_sizes() == std::vector<int>{1, 40, 40, 1});
    CHECK(m.head() == Head::Identity);
}

TEST_CASE("fixed feed-forward loss has exactly 2650 parameters") {
    Rng rng(5);
    Ml3Network net = Ml3Network::glorot_init(rng);
    CHECK(net.parameter_count() == 2650);  // 2*50 + 50*50 + 50*1, no biases
    // Softplus output keeps the loss strictly positive.
    Tensor y(4, 1), f(4, 1);
    y << 0.1, -0.5, 1.2, 0.0;
    f << 0.3, 0.2, -1.0, 0.9;
    CHECK(net.forward(y, f) > 0.0);

    Ml3Network back = Ml3Network::import_json(net.export_json());
    CHECK(back.phi_flat() == net.phi_flat());
}

TEST_CASE("hypergradient matches finite differences of the unrolled objective") {
    Rng rng(31);
    std::uniform_real_distribution<double> point(-2.0, 2.0);
    int checked = 0;
    for (int inst = 0; inst < 25; ++inst) {
        const LossExpr e =
            enforce_arguments_constraint(generate_tree(rng, GenMethod::Grow, 4), rng);
        MetaLossNetwork net = MetaLossNetwork::from_expr(e, rng, true);
        if (net.parameter_count() == 0) continue;
        Mlp start = Mlp::glorot({2, 8, 1}, Head::Identity, rng);
        Batch train, eval;
        train.X = Tensor::NullaryExpr(16, 2, [&] { return point(rng); });
        train.y = Tensor::NullaryExpr(16, 1, [&] { return point(rng); });
        eval.X = Tensor::NullaryExpr(16, 2, [&] { return point(rng); });
        eval.y = Tensor::NullaryExpr(16, 1, [&] { return point(rng); });
        const double alpha = 1e-2;

        const std::vector<double> analytic = analytic_hypergradient(net, start, train, eval, alpha);
        const std::size_t n = net.parameter_count();
        Eigen::VectorXd p(static_cast<int>(n)), a(static_cast<int>(n));
        const std::vector<double> phi0 = net.phi_flat();
        for (std::size_t j = 0; j < n; ++j) {
            p(static_cast<int>(j)) = phi0[j];
            a(static_cast<int>(j)) = analytic[j];
        }
        auto fn = [&](const Eigen::VectorXd& x) {
            MetaLossNetwork local = net;
            std::vector<double> w(n);
            for (std::size_t j = 0; j < n; ++j) w[j] = x(static_cast<int>(j));
            local.set_phi_flat(w);
            return unrolled_objective(local, start, train, eval, alpha);
        };
        CHECK(ad::finite_difference_check(fn, p, 1e-5, a) < 1e-3);
        ++checked;
    }
    CHECK(checked >= 20);
}

TEST_CASE("loss gradient decomposes through the prediction") {
    // Full-graph d(M)/d(theta) equals dM/df chained through the manual learner
    // backward pass.
    Rng rng(41);
    std::uniform_real_distribution<double> point(-2.0, 2.0);
    for (int inst = 0; inst < 10; ++inst) {
        const LossExpr e =
            enforce_arguments_constraint(generate_tree(rng, GenMethod::Grow, 4), rng);
        MetaLossNetwork net = MetaLossNetwork::from_expr(e, rng, true);
        Mlp learner = Mlp::glorot({1, 8, 1}, Head::Identity, rng);
        Batch b;
        b.X = Tensor::NullaryExpr(16, 1, [&] { return point(rng); });
        b.y = Tensor::NullaryExpr(16, 1, [&] { return point(rng); });

        Tape tape;
        std::vector<Var> phi;
        for (const Tensor& w : net.phi_blocks()) phi.push_back(tape.constant(w));
        std::vector<Var> theta;
        for (const Tensor& p : learner.params()) theta.push_back(tape.leaf(p, true));
        Var f = learner.forward_graph(tape, theta, tape.constant(b.X));
        Var m = net.forward_graph(tape, phi, tape.constant(b.y), f);
        std::vector<Var> direct = tape.grad(m, theta);

        MlpCache cache;
        const Tensor fv = learner.forward_cached(b.X, cache);
        Tape small;
        std::vector<Var> phi2;
        for (const Tensor& w : net.phi_blocks()) phi2.push_back(small.constant(w));
        Var fv2 = small.leaf(fv);
        Var m2 = net.forward_graph(small, phi2, small.constant(b.y), fv2);
        const Tensor dMdf = small.value(small.grad(m2, std::vector<Var>{fv2})[0]);
        std::vector<Tensor> chained = learner.backward(cache, dMdf);

        REQUIRE(chained.size() == direct.size());
        for (std::size_t i = 0; i < direct.size(); ++i) {
            const Tensor& d = tape.value(direct[i]);
            const double scale = std::max(1e-12, d.cwiseAbs().maxCoeff());
            CHECK((d - chained[i]).cwiseAbs().maxCoeff() / scale < 1e-6);
        }
    }
}

TEST_CASE("zero learning rate leaves phi exactly unchanged") {
    Rng rng(51);
    MetaLossNetwork net =
        MetaLossNetwork::from_expr(parse_expr("(sq (sub y f))"), rng, true);
    const std::vector<double> before = net.phi_flat();
    MetaConfig cfg = tiny_meta();
    cfg.eta = 0.0;
    const InnerOptResult r = inner_optimize(net, one_sine_task(3), tiny_learner(), cfg, 9);
    CHECK_FALSE(r.diverged);
    CHECK(net.phi_flat() == before);
}

TEST_CASE("local search actually moves phi and stays finite") {
    Rng rng(53);
    MetaLossNetwork net = MetaLossNetwork::from_expr(parse_expr("(sq (sub y f))"), rng, true);
    const std::vector<double> before = net.phi_flat();
    const InnerOptResult r = inner_optimize(net, one_sine_task(4), tiny_learner(), tiny_meta(), 9);
    CHECK_FALSE(r.diverged);
    CHECK(net.phi_finite());
    CHECK(net.phi_flat() != before);
}

TEST_CASE("a loss with zero gradient teaches nothing") {
    // (f - f) * y is identically zero with zero df-gradient, so the learner
    // never moves and the evaluation curve stays flat.
    MetaLossNetwork net =
        MetaLossNetwork::unit_from_expr(parse_expr("(mul (sub f f) y)"), /*wrapper_on=*/false);
    const std::vector<Task> tasks = one_sine_task(5);
    const std::vector<CurvePoint> curve =
        meta_test(net, tasks[0], tiny_learner(), tiny_meta(), 10, 77);
    REQUIRE(curve.size() > 2);
    for (const CurvePoint& p : curve) CHECK(p.metric == curve.front().metric);
}

TEST_CASE("divergence yields the sentinel, not a crash") {
    // Non-finite weights are rejected up front.
    MetaLossNetwork broken = MetaLossNetwork::unit_from_expr(parse_expr("(sq (sub y f))"), false);
    broken.set_phi_flat(
        std::vector<double>{1.0, std::numeric_limits<double>::quiet_NaN(), 1.0});
    const FitnessReport nan_rep =
        evaluate_fitness(broken, one_sine_task(6), tiny_learner(), tiny_meta(), 5);
    CHECK(nan_rep.diverged);
    CHECK(std::isinf(nan_rep.fitness));
    for (double v : nan_rep.per_task) CHECK(std::isinf(v));

    // An explosive step size sends the learner to non-finite parameters.
    MetaLossNetwork net = MetaLossNetwork::unit_from_expr(parse_expr("(sq (sub y f))"), false);
    MetaConfig wild = tiny_meta();
    wild.alpha = 1e200;
    const FitnessReport rep = evaluate_fitness(net, one_sine_task(6), tiny_learner(), wild, 5);
    CHECK(rep.diverged);
    CHECK(std::isinf(rep.fitness));

    MetaLossNetwork opt = MetaLossNetwork::unit_from_expr(parse_expr("(sq (sub y f))"), false);
    const InnerOptResult r = inner_optimize(opt, one_sine_task(6), tiny_learner(), wild, 5);
    CHECK(r.diverged);
    CHECK(opt.phi_finite());  // the bad update is never applied
}

TEST_CASE("fitness evaluation is deterministic and leaves the loss const") {
    Rng rng(61);
    MetaLossNetwork net = MetaLossNetwork::from_expr(parse_expr("(abs (sub y f))"), rng, true);
    const std::vector<double> before = net.phi_flat();
    const std::vector<Task> tasks = one_sine_task(7);
    const FitnessReport a = evaluate_fitness(net, tasks, tiny_learner(), tiny_meta(), 13);
    const FitnessReport b = evaluate_fitness(net, tasks, tiny_learner(), tiny_meta(), 13);
    CHECK(a.fitness == b.fitness);
    CHECK(a.per_task == b.per_task);
    CHECK(net.phi_flat() == before);
    CHECK(std::isfinite(a.fitness));
}

TEST_CASE("meta_test curve bookkeeping") {
    MetaLossNetwork net = MetaLossNetwork::unit_from_expr(parse_expr("(sq (sub y f))"), false);
    const std::vector<Task> tasks = one_sine_task(8);
    MetaConfig cfg = tiny_meta();
    cfg.s_base_eval = 100;
    const std::vector<CurvePoint> c10 = meta_test(net, tasks[0], tiny_learner(), cfg, 10, 3);
    CHECK(c10.size() == 11);  // 0,10,...,100
    CHECK(c10.front().step == 0);
    CHECK(c10.back().step == 100);
    const std::vector<CurvePoint> c7 = meta_test(net, tasks[0], tiny_learner(), cfg, 7, 3);
    CHECK(c7.back().step == 100);  // final step logged even off the interval
    CHECK(c7.size() == 16);

    const std::vector<CurvePoint> again = meta_test(net, tasks[0], tiny_learner(), cfg, 10, 3);
    REQUIRE(again.size() == c10.size());
    for (std::size_t i = 0; i < again.size(); ++i) CHECK(again[i].metric == c10[i].metric);
}

TEST_CASE("squared error trains the sine learner") {
    MetaLossNetwork net = MetaLossNetwork::unit_from_expr(parse_expr("(sq (sub y f))"), false);
    const std::vector<Task> tasks = one_sine_task(9);
    MetaConfig cfg = tiny_meta();
    cfg.s_base_eval = 300;
    const std::vector<CurvePoint> curve = meta_test(net, tasks[0], tiny_learner(), cfg, 50, 5);
    CHECK(curve.back().metric < curve.front().metric);  // it learns
    CHECK(std::isfinite(curve.back().metric));
}

TEST_CASE("candidate evaluator paths") {
    const std::vector<Task> tasks = one_sine_task(10);
    const LearnerSpec spec = tiny_learner();
    MetaConfig cfg = tiny_meta();
    const LossExpr expr = parse_expr("(sq (sub y f))");

    NetworkFitnessEvaluator plain(tasks, spec, cfg, true, /*local_search=*/false);
    const EvalOutcome po = plain.evaluate(expr, 123);
    CHECK(std::isfinite(po.fitness));
    for (double w : po.phi) CHECK(w == 1.0);  // unit form, no local search

    NetworkFitnessEvaluator searched(tasks, spec, cfg, true, /*local_search=*/true);
    const EvalOutcome so = searched.evaluate(expr, 123);
    CHECK(std::isfinite(so.fitness));
    bool any_moved = false;
    for (double w : so.phi) any_moved = any_moved || w != 1.0;
    CHECK(any_moved);

    const EvalOutcome so2 = searched.evaluate(expr, 123);
    CHECK(so2.fitness == so.fitness);  // same eval seed, same outcome
}

TEST_CASE("loss export dispatch") {
    Rng rng(71);
    MetaLossNetwork net = MetaLossNetwork::from_expr(parse_expr("(abs (sub y f))"), rng, true);
    std::unique_ptr<MetaLoss> back = import_loss(export_loss(net));
    CHECK(dynamic_cast<MetaLossNetwork*>(back.get()) != nullptr);
    CHECK(back->phi_flat() == net.phi_flat());

    Ml3Network ml3 = Ml3Network::glorot_init(rng);
    std::unique_ptr<MetaLoss> back2 = import_loss(export_loss(ml3));
    CHECK(dynamic_cast<Ml3Network*>(back2.get()) != nullptr);
    CHECK(back2->phi_flat() == ml3.phi_flat());

    CHECK_THROWS_AS(import_loss("{\"something\": 1}"), std::runtime_error);
}

TEST_CASE("method names round trip") {
    for (Method m : {Method::Baseline, Method::Random, Method::GpLfl, Method::Ml3, Method::EvoMAL}) {
        CHECK(method_from_name(method_name(m)) == m);
    }
    CHECK_FALSE(method_from_name("nonsense").has_value());
}

TEST_CASE("baseline method runs end to end") {
    MethodRunParams p;
    p.method = Method::Baseline;
    p.meta = tiny_meta();
    p.learner = tiny_learner();
    p.seed = 17;
    p.curve_interval = 10;

    MetaDataset data;
    Rng tr(1), te(2);
    data.train_tasks = sample_sine_tasks(tr, 2, {-2.0, 2.0});
    data.test_tasks = sample_sine_tasks(te, 2, {-5.0, 5.0});
    const MethodResult r = run_method(p, data);
    CHECK(r.loss_export.empty());
    CHECK_FALSE(r.search.has_value());
    CHECK(r.evaluations == 0);
    CHECK(r.curves.size() == 4);  // 2 train + 2 test
    CHECK(std::isfinite(r.fitness.fitness));
    CHECK(std::isfinite(r.test_final_metric));
}
