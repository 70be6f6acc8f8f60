#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "evoloss/lossnet.hpp"

using namespace evoloss;
using evoloss::ad::Tape;
using evoloss::ad::Var;

namespace {

Tensor col(std::initializer_list<double> vals) {
    Tensor t(static_cast<int>(vals.size()), 1);
    int i = 0;
    for (double v : vals) t(i++, 0) = v;
    return t;
}

}  // namespace

TEST_CASE("one weight per tree edge") {
    CHECK(MetaLossNetwork::unit_from_expr(parse_expr("(sq (sub y f))"), false).parameter_count() ==
          3);
    CHECK(MetaLossNetwork::unit_from_expr(parse_expr("(add y f)"), false).parameter_count() == 2);
    CHECK(MetaLossNetwork::unit_from_expr(parse_expr("y"), false).parameter_count() == 0);
    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
        const LossExpr e = generate_tree(rng, GenMethod::Grow, 6);
        CHECK(MetaLossNetwork::unit_from_expr(e, true).parameter_count() ==
              static_cast<std::size_t>(e.node_count() - 1));
    }
}

TEST_CASE("initial weights are tightly clustered around one") {
    Rng rng(7);
    std::vector<double> all;
    while (all.size() < 10000) {
        const LossExpr e = generate_tree(rng, GenMethod::Full, 5);
        MetaLossNetwork net = MetaLossNetwork::from_expr(e, rng, true);
        for (double w : net.phi_flat()) all.push_back(w);
    }
    double mean = 0.0;
    for (double w : all) mean += w;
    mean /= static_cast<double>(all.size());
    double var = 0.0;
    for (double w : all) var += (w - mean) * (w - mean);
    var /= static_cast<double>(all.size());
    CHECK(mean == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(var == doctest::Approx(1e-6).epsilon(0.1));
}

TEST_CASE("unit form reproduces the symbolic expression") {
    Rng rng(11);
    std::uniform_real_distribution<double> point(-10.0, 10.0);
    for (int i = 0; i < 300; ++i) {
        const LossExpr e = generate_tree(rng, GenMethod::Grow, 6);
        MetaLossNetwork net = MetaLossNetwork::unit_from_expr(e, /*wrapper_on=*/false);
        Tensor y(4, 1), f(4, 1);
        double mean = 0.0;
        for (int k = 0; k < 4; ++k) {
            y(k, 0) = point(rng);
            f(k, 0) = point(rng);
            mean += eval_expr(e, y(k, 0), f(k, 0));
        }
        mean /= 4.0;
        const double got = net.forward_batch(y, f);
        CHECK(got == doctest::Approx(mean).epsilon(1e-9));
    }
}

TEST_CASE("graph forward equals the numeric batch forward") {
    Rng rng(13);
    std::uniform_real_distribution<double> point(-5.0, 5.0);
    for (int i = 0; i < 100; ++i) {
        const LossExpr e = generate_tree(rng, GenMethod::Grow, 5);
        MetaLossNetwork net = MetaLossNetwork::from_expr(e, rng, true);
        Tensor y(6, 1), f(6, 1);
        for (int k = 0; k < 6; ++k) {
            y(k, 0) = point(rng);
            f(k, 0) = point(rng);
        }
        CHECK(net.forward(y, f) == doctest::Approx(net.forward_batch(y, f)).epsilon(1e-12));
    }
}

TEST_CASE("softplus wrapper values") {
    // (mul (sub f f) y) is identically zero before the wrapper.
    MetaLossNetwork zero =
        MetaLossNetwork::unit_from_expr(parse_expr("(mul (sub f f) y)"), /*wrapper_on=*/true);
    CHECK(zero.forward(col({2.0}), col({3.0})) == doctest::Approx(std::log(2.0)));

    // Constant one before the wrapper.
    MetaLossNetwork one = MetaLossNetwork::unit_from_expr(parse_expr("(add 1 (mul (sub f f) y))"),
                                                          /*wrapper_on=*/true);
    CHECK(one.forward(col({0.5}), col({0.5})) ==
          doctest::Approx(std::log(1.0 + std::exp(1.0))));

    // Wrapper keeps outputs strictly positive even for very negative raw loss.
    MetaLossNetwork raw = MetaLossNetwork::unit_from_expr(parse_expr("(sub f y)"), true);
    CHECK(raw.forward(col({1e4}), col({0.0})) > 0.0);
}

TEST_CASE("multiple outputs sum per-column applications") {
    const LossExpr e = parse_expr("(sq (sub y f))");
    MetaLossNetwork net = MetaLossNetwork::unit_from_expr(e, /*wrapper_on=*/false);
    Tensor y(2, 3), f(2, 3);
    y << 1, 0, 0, 0, 1, 0;
    f << 0.7, 0.2, 0.1, 0.3, 0.4, 0.3;
    double expect = 0.0;
    for (int r = 0; r < 2; ++r) {
        for (int c = 0; c < 3; ++c) expect += (y(r, c) - f(r, c)) * (y(r, c) - f(r, c));
    }
    expect /= 2.0;  // batch mean of per-row sums
    CHECK(net.forward_batch(y, f) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(net.forward(y, f) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("weights scale the edges multiplicatively") {
    // (add y f) with weights (a, b) computes a*y + b*f.
    MetaLossNetwork net = MetaLossNetwork::unit_from_expr(parse_expr("(add y f)"), false);
    net.set_phi_flat(std::vector<double>{2.0, 5.0});
    const double got = net.forward_batch(col({3.0}), col({7.0}));
    CHECK((got == doctest::Approx(2.0 * 3.0 + 5.0 * 7.0) ||
           got == doctest::Approx(5.0 * 3.0 + 2.0 * 7.0)));
}

TEST_CASE("gradients with respect to phi and f match finite differences") {
    Rng rng(29);
    std::uniform_real_distribution<double> point(-2.0, 2.0);
    for (int i = 0; i < 30; ++i) {
        const LossExpr e = generate_tree(rng, GenMethod::Grow, 4);
        MetaLossNetwork net = MetaLossNetwork::from_expr(e, rng, true);
        if (net.parameter_count() == 0) continue;
        Tensor y(3, 1), f(3, 1);
        for (int k = 0; k < 3; ++k) {
            y(k, 0) = point(rng);
            f(k, 0) = point(rng);
        }

        Tape tape;
        std::vector<Var> phi;
        for (const Tensor& b : net.phi_blocks()) phi.push_back(tape.leaf(b));
        Var fv = tape.leaf(f);
        Var out = net.forward_graph(tape, phi, tape.constant(y), fv);
        std::vector<Var> inputs = phi;
        inputs.push_back(fv);
        std::vector<Var> grads = tape.grad(out, inputs);

        const std::size_t n_phi = net.parameter_count();
        Eigen::VectorXd p(static_cast<int>(n_phi) + 3);
        Eigen::VectorXd analytic(p.size());
        for (std::size_t j = 0; j < n_phi; ++j) {
            p(static_cast<int>(j)) = net.phi_blocks()[j](0, 0);
            analytic(static_cast<int>(j)) = tape.scalar(grads[j]);
        }
        for (int k = 0; k < 3; ++k) {
            p(static_cast<int>(n_phi) + k) = f(k, 0);
            analytic(static_cast<int>(n_phi) + k) = tape.value(grads[n_phi])(k, 0);
        }

        auto fn = [&](const Eigen::VectorXd& x) {
            MetaLossNetwork local = net;
            std::vector<double> w(n_phi);
            for (std::size_t j = 0; j < n_phi; ++j) w[j] = x(static_cast<int>(j));
            local.set_phi_flat(w);
            Tensor fl = f;
            for (int k = 0; k < 3; ++k) fl(k, 0) = x(static_cast<int>(n_phi) + k);
            return local.forward(y, fl);
        };
        CHECK(ad::finite_difference_check(fn, p, 1e-6, analytic) < 1e-4);
    }
}

TEST_CASE("network construction is linear in tree size") {
    Rng rng(31);
    for (int i = 0; i < 50; ++i) {
        const LossExpr e = generate_tree(rng, GenMethod::Grow, 7);
        MetaLossNetwork net = MetaLossNetwork::unit_from_expr(e, true);
        const std::size_t n = static_cast<std::size_t>(e.node_count());
        CHECK(net.build_visits() == n + (n - 1));
    }
}

TEST_CASE("export/import round trip preserves structure and weights") {
    Rng rng(37);
    const LossExpr e = parse_expr("(ln (aq (sq (sub y f)) (abs f)))");
    MetaLossNetwork net = MetaLossNetwork::from_expr(e, rng, true);
    MetaLossNetwork back = MetaLossNetwork::import_json(net.export_json());
    CHECK(serialize(back.source()) == serialize(net.source()));
    CHECK(back.wrapper_on() == net.wrapper_on());
    const auto a = net.phi_flat();
    const auto b = back.phi_flat();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("phi block validation") {
    MetaLossNetwork net = MetaLossNetwork::unit_from_expr(parse_expr("(add y f)"), false);
    CHECK_THROWS_AS(net.set_phi_blocks(std::vector<Tensor>{Tensor::Ones(1, 1)}),
                    std::runtime_error);
    CHECK_THROWS_AS(net.set_phi_flat(std::vector<double>{1.0, 2.0, 3.0}), std::runtime_error);
    net.set_phi_flat(std::vector<double>{1.0, std::numeric_limits<double>::quiet_NaN()});
    CHECK_FALSE(net.phi_finite());
}
