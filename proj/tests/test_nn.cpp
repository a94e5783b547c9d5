#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "strode/nn.hpp"

using Catch::Approx;
using namespace strode;

namespace {

double fd_scalar(const std::function<double(double)>& f, double x, double h = 1e-5) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

}  // namespace

TEST_CASE("activation values and derivatives agree with finite differences") {
    const std::vector<Activation> acts = {Activation::Identity, Activation::Tanh,
                                          Activation::ReLU, Activation::LeakyReLU,
                                          Activation::Softplus};
    for (Activation a : acts) {
        for (double x : {-2.0, -0.3, 0.4, 1.7}) {
            auto f = [a](double v) { return act_f(a, v); };
            REQUIRE(act_df(a, x) == Approx(fd_scalar(f, x)).margin(1e-8));
        }
    }
    REQUIRE(act_f(Activation::ReLU, -1.0) == 0.0);
    REQUIRE(act_f(Activation::LeakyReLU, -2.0) == Approx(-2.0 * kLeakySlope));
    // softplus stays finite and accurate far into both tails
    REQUIRE(softplus(800.0) == Approx(800.0));
    REQUIRE(softplus(-800.0) == Approx(0.0).margin(1e-300));
    REQUIRE(sigmoid(-800.0) >= 0.0);
}

TEST_CASE("tape activation matches plain evaluation and its derivative") {
    for (Activation a : {Activation::Tanh, Activation::Softplus, Activation::LeakyReLU}) {
        const double x0 = 0.37;
        const ad::DiffValue x = ad::seed_tangent(ad::input({x0}), 0);
        const ad::DiffValue y = activation(x, a);
        REQUIRE(y.value() == act_f(a, x0));
        REQUIRE(y.tangent_value() == Approx(act_df(a, x0)));
    }
}

TEST_CASE("name round trips") {
    for (Activation a : {Activation::Identity, Activation::Tanh, Activation::ReLU,
                         Activation::LeakyReLU, Activation::Softplus}) {
        REQUIRE(activation_from_name(activation_name(a)) == a);
    }
    for (SignConstraint c :
         {SignConstraint::Free, SignConstraint::NonPositive, SignConstraint::NonNegative}) {
        REQUIRE(constraint_from_name(constraint_name(c)) == c);
    }
    REQUIRE_THROWS_AS(activation_from_name("swish"), IoError);
    REQUIRE_THROWS_AS(constraint_from_name("positive"), IoError);
}

TEST_CASE("constrained initialization respects sign boxes") {
    Rng rng(11);
    const ConstrainedMLP net = ConstrainedMLP::make(
        {{4, 8, Activation::Tanh, SignConstraint::NonPositive},
         {8, 8, Activation::Tanh, SignConstraint::NonNegative},
         {8, 1, Activation::Softplus, SignConstraint::Free}},
        rng);
    REQUIRE(net.input_dim() == 4);
    REQUIRE(net.output_dim() == 1);
    for (double w : net.layers[0].weight.data()) REQUIRE(w <= 0.0);
    for (double w : net.layers[1].weight.data()) REQUIRE(w >= 0.0);
    for (double b : net.layers[0].bias.data()) REQUIRE(b == 0.0);

    REQUIRE_THROWS_AS(ConstrainedMLP::make({{4, 8, Activation::Tanh, SignConstraint::Free},
                                            {7, 1, Activation::Tanh, SignConstraint::Free}},
                                           rng),
                      DimensionError);
    REQUIRE_THROWS_AS(ConstrainedMLP::make({}, rng), ParameterError);
}

TEST_CASE("forward on tape equals straight-line eval") {
    Rng rng(29);
    ConstrainedMLP net = ConstrainedMLP::make(
        {{3, 5, Activation::Tanh, SignConstraint::Free},
         {5, 2, Activation::Identity, SignConstraint::Free}},
        rng);
    net.randomize(rng, 0.8, 0.3);
    const std::vector<double> x = {0.2, -1.1, 0.8};
    const std::vector<double> ref = net.eval(x);
    const ad::DiffValue out = net.forward(ad::input(x));
    REQUIRE(out.size() == 2);
    REQUIRE(out.data()[0] == ref[0]);
    REQUIRE(out.data()[1] == ref[1]);

    REQUIRE_THROWS_AS(net.forward(ad::input({1.0})), DimensionError);
    REQUIRE_THROWS_AS(net.eval(std::vector<double>{1.0}), DimensionError);
}

TEST_CASE("parameter gradients of a net loss match finite differences") {
    Rng rng(7);
    ConstrainedMLP net = ConstrainedMLP::make(
        {{2, 4, Activation::Tanh, SignConstraint::Free},
         {4, 1, Activation::Softplus, SignConstraint::Free}},
        rng);
    net.randomize(rng, 1.0, 0.5);
    const std::vector<double> x = {0.7, -0.4};

    auto build = [&]() { return net.forward(ad::input(x)); };
    const ad::DiffValue loss = build();
    ad::backward(loss);

    for (const auto& p : net.parameters("net")) {
        auto& data = p.node->data;
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double keep = data[i];
            const double h = 1e-5;
            data[i] = keep + h;
            const double up = build().value();
            data[i] = keep - h;
            const double dn = build().value();
            data[i] = keep;
            const double fd = (up - dn) / (2.0 * h);
            REQUIRE(p.node->grad[i] == Approx(fd).margin(1e-6));
        }
    }
}

TEST_CASE("dual-number input derivative matches finite differences") {
    Rng rng(13);
    ConstrainedMLP net = ConstrainedMLP::make(
        {{3, 6, Activation::Tanh, SignConstraint::Free},
         {6, 1, Activation::Softplus, SignConstraint::Free}},
        rng);
    net.randomize(rng, 0.9, 0.2);
    const std::vector<double> x = {0.15, -0.6, 1.2};
    for (int k = 0; k < 3; ++k) {
        auto [val, der] = net.eval_with_input_derivative(x, k);
        REQUIRE(val[0] == net.eval(x)[0]);
        auto f = [&](double v) {
            std::vector<double> probe = x;
            probe[k] = v;
            return net.eval(probe)[0];
        };
        REQUIRE(der[0] == Approx(fd_scalar(f, x[k])).margin(1e-7));
        REQUIRE(forward_derivative_value(net, x, k) == der[0]);

        // tape route: value must agree exactly with the dual-number route
        const ad::DiffValue d = forward_derivative(net, ad::input(x), k);
        REQUIRE(d.value() == Approx(der[0]).margin(1e-12));
    }
    REQUIRE_THROWS_AS(net.eval_with_input_derivative(x, 5), DimensionError);
}

TEST_CASE("forward_derivative requires scalar output") {
    Rng rng(3);
    const ConstrainedMLP net = ConstrainedMLP::make(
        {{2, 3, Activation::Tanh, SignConstraint::Free}}, rng);
    REQUIRE_THROWS_AS(forward_derivative(net, ad::input({1.0, 2.0}), 0), ContractError);
}

TEST_CASE("projection clamps violators to exactly zero and is idempotent") {
    Rng rng(5);
    ConstrainedMLP net = ConstrainedMLP::make(
        {{2, 3, Activation::Tanh, SignConstraint::NonPositive},
         {3, 1, Activation::Identity, SignConstraint::NonNegative}},
        rng);
    // Push weights across their boundaries by hand.
    net.layers[0].weight.mutable_data()[0] = 0.25;
    net.layers[1].weight.mutable_data()[1] = -0.5;
    net.project_weights();
    REQUIRE(net.layers[0].weight.data()[0] == 0.0);
    REQUIRE(net.layers[1].weight.data()[1] == 0.0);
    const std::vector<double> snap(net.layers[0].weight.data().begin(),
                                   net.layers[0].weight.data().end());
    net.project_weights();
    for (std::size_t i = 0; i < snap.size(); ++i) {
        REQUIRE(net.layers[0].weight.data()[i] == snap[i]);
    }
}

TEST_CASE("dropout plan freezes one mask per interior boundary") {
    Rng rng(17);
    ConstrainedMLP net = ConstrainedMLP::make(
        {{2, 16, Activation::Tanh, SignConstraint::Free},
         {16, 16, Activation::Tanh, SignConstraint::Free},
         {16, 1, Activation::Identity, SignConstraint::Free}},
        rng);
    net.randomize(rng, 0.8, 0.1);
    const DropoutPlan plan = make_dropout_plan(net, 0.5, rng);
    REQUIRE(plan.active());
    REQUIRE(plan.masks.size() == 2);
    bool dropped = false, kept = false;
    for (const auto& mask : plan.masks) {
        for (double m : mask) {
            REQUIRE((m == 0.0 || m == Approx(2.0)));
            dropped = dropped || m == 0.0;
            kept = kept || m != 0.0;
        }
    }
    REQUIRE(dropped);
    REQUIRE(kept);

    // Same plan, same function: two forwards agree bitwise.
    const std::vector<double> x = {0.4, -0.9};
    const double v1 = net.forward(ad::input(x), &plan).value();
    const double v2 = net.forward(ad::input(x), &plan).value();
    REQUIRE(v1 == v2);
    // The dropped-out function differs from the plain one for this seed.
    REQUIRE(v1 != net.forward(ad::input(x)).value());

    REQUIRE_THROWS_AS(make_dropout_plan(net, 1.0, rng), ParameterError);
    const DropoutPlan off = make_dropout_plan(net, 0.0, rng);
    REQUIRE_FALSE(off.active());
}

TEST_CASE("dropout op masks and rescales") {
    Rng rng(23);
    const ad::DiffValue x = ad::input({1.0, 1.0, 1.0, 1.0});
    const ad::DiffValue y = dropout(x, 0.5, rng, true);
    for (double v : y.data()) REQUIRE((v == 0.0 || v == Approx(2.0)));
    const ad::DiffValue same = dropout(x, 0.5, rng, false);
    REQUIRE(same.node().get() == x.node().get());
    REQUIRE_THROWS_AS(dropout(x, -0.1, rng, true), ParameterError);
}

TEST_CASE("sgd step moves against the gradient; empty grads freeze") {
    ad::DiffValue w = ad::parameter({1.0, 2.0}, 2, 1);
    w.node()->grad = {0.5, -1.0};
    std::vector<NamedParam> params = {{"w", w.node()}};
    sgd_step(params, 0.1);
    REQUIRE(w.data()[0] == Approx(0.95));
    REQUIRE(w.data()[1] == Approx(2.1));

    w.node()->grad.clear();
    sgd_step(params, 0.1);
    REQUIRE(w.data()[0] == Approx(0.95));  // untouched without a gradient
}

TEST_CASE("adam first step has the analytic magnitude") {
    // With m-hat = g and v-hat = g^2, step one moves by lr * |g| / (|g| + eps).
    ad::DiffValue w = ad::parameter({1.0}, 1, 1);
    w.node()->grad = {0.25};
    std::vector<NamedParam> params = {{"w", w.node()}};
    AdamState st;
    adam_step(params, st, 1e-3);
    const double expected = 1.0 - 1e-3 * 0.25 / (0.25 + 1e-8);
    REQUIRE(w.data()[0] == Approx(expected).epsilon(1e-12));
    REQUIRE(st.step_count == 1);

    // A skipped parameter still decays its moments.
    w.node()->grad.clear();
    adam_step(params, st, 1e-3);
    REQUIRE(st.step_count == 2);
    REQUIRE(w.data()[0] < expected);  // momentum keeps moving it slightly
}

TEST_CASE("non-finite gradients are rejected with the parameter path") {
    ad::DiffValue w = ad::parameter({1.0}, 1, 1);
    w.node()->grad = {std::numeric_limits<double>::quiet_NaN()};
    std::vector<NamedParam> params = {{"enc.layer0.weight", w.node()}};
    try {
        sgd_step(params, 0.1);
        FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
        REQUIRE(std::string(e.what()).find("enc.layer0.weight") != std::string::npos);
    }
}

TEST_CASE("json round trip preserves the function") {
    Rng rng(41);
    ConstrainedMLP net = ConstrainedMLP::make(
        {{2, 4, Activation::Tanh, SignConstraint::NonPositive},
         {4, 1, Activation::Softplus, SignConstraint::Free}},
        rng);
    net.randomize(rng, 0.7, 0.2);
    const ConstrainedMLP back = ConstrainedMLP::from_json(net.to_json());
    REQUIRE(back.layers.size() == 2);
    REQUIRE(back.layers[0].constraint == SignConstraint::NonPositive);
    const std::vector<double> x = {0.33, -0.8};
    REQUIRE(back.eval(x)[0] == net.eval(x)[0]);

    nlohmann::ordered_json bad = net.to_json();
    bad["0"]["weights"][0] = nlohmann::ordered_json::array({1.0});  // ragged row
    REQUIRE_THROWS_AS(ConstrainedMLP::from_json(bad), IoError);
}

TEST_CASE("named parameter paths are stable") {
    Rng rng(2);
    const ConstrainedMLP net = ConstrainedMLP::make(
        {{2, 3, Activation::Tanh, SignConstraint::Free},
         {3, 1, Activation::Identity, SignConstraint::Free}},
        rng);
    const auto params = net.parameters("enc");
    REQUIRE(params.size() == 4);
    REQUIRE(params[0].path == "enc.layer0.weight");
    REQUIRE(params[1].path == "enc.layer0.bias");
    REQUIRE(params[3].path == "enc.layer1.bias");
}
