#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "gradcheck.hpp"
#include "tecde/errors.hpp"
#include "tecde/ndiff.hpp"

using namespace tecde;
using namespace tecde::nd;
using tecde::testing::central_difference;
using tecde::testing::relative_error;
using Var = Tape::Var;

namespace {

std::vector<double> random_vector(Rng& rng, int n, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
    return v;
}

Param random_param(Rng& rng, int rows, int cols) {
    return Param{rows, cols, random_vector(rng, rows * cols)};
}

// Checks d/dx of sum(w * op(x)) against central differences.
void check_unary(const std::function<Var(Tape&, Var)>& op, std::vector<double> x,
                 double mu = 1.0) {
    Rng rng(3);
    std::vector<double> w;
    {
        Tape probe;
        w = random_vector(rng, static_cast<int>(probe.value(op(probe, probe.input(x))).size()));
    }
    const auto loss = [&] {
        Tape t(false);
        const auto& y = t.value(op(t, t.input(x)));
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
        return s;
    };
    Tape t;
    const Var in = t.input(x);
    t.backward(op(t, in), w);
    std::vector<double*> coords;
    for (auto& v : x) coords.push_back(&v);
    auto fd = central_difference(loss, coords);
    for (auto& g : fd) g *= mu;
    EXPECT_LT(relative_error(t.grad(in), fd), 1e-8);
}

}  // namespace

TEST(TapePrimitives, Tanh) {
    check_unary([](Tape& t, Var x) { return t.tanh(x); }, {-1.3, 0.2, 0.7});
}

TEST(TapePrimitives, ReluAwayFromKink) {
    check_unary([](Tape& t, Var x) { return t.relu(x); }, {-1.3, 0.2, 0.7, -0.05});
}

TEST(TapePrimitives, Softmax) {
    check_unary([](Tape& t, Var x) { return t.softmax(x); }, {-1.3, 0.2, 0.7, 2.0});
}

TEST(TapePrimitives, MulConstScaleElement) {
    const std::vector<double> c{2.0, 0.0, -0.5};
    check_unary([&](Tape& t, Var x) { return t.mul_const(x, c); }, {0.3, -0.2, 1.1});
    check_unary([](Tape& t, Var x) { return t.scale(x, -3.5); }, {0.3, -0.2, 1.1});
    check_unary([](Tape& t, Var x) { return t.element(x, 1); }, {0.3, -0.2, 1.1});
}

TEST(TapePrimitives, MatvecConst) {
    const std::vector<double> v{0.5, -1.5, 2.0};
    check_unary([&](Tape& t, Var m) { return t.matvec_const(m, v, 2); },
                {0.1, 0.2, 0.3, -0.4, 0.5, -0.6});
}

TEST(TapePrimitives, LossTerms) {
    check_unary([](Tape& t, Var x) { return t.squared_error(x, 0.25); }, {1.7});
    check_unary([](Tape& t, Var x) { return t.neg_log_prob(t.softmax(x), 2); }, {0.1, -0.4, 0.3, 0.9});
}

TEST(TapePrimitives, GradReverseNegatesAndScales) {
    check_unary([](Tape& t, Var x) { return t.grad_reverse(t.tanh(x), 0.3); }, {0.4, -0.8}, -0.3);
    Tape t;
    const Var x = t.input({1.0, 2.0});
    const Var y = t.grad_reverse(x, 0.7);
    EXPECT_EQ(t.value(y), t.value(x));
    t.backward(y, std::vector<double>{1.0, -2.0});
    EXPECT_DOUBLE_EQ(t.grad(x)[0], -0.7);
    EXPECT_DOUBLE_EQ(t.grad(x)[1], 1.4);
}

TEST(TapePrimitives, LincombAddSum) {
    Rng rng(5);
    std::vector<double> a = random_vector(rng, 3), b = random_vector(rng, 3);
    const std::vector<double> coeffs{0.5, -2.0};
    const auto build = [&](Tape& t, Var& va, Var& vb) {
        va = t.input(a);
        vb = t.input(b);
        const std::vector<Var> xs{va, vb};
        const Var l = t.lincomb(xs, coeffs);
        const Var s = t.add(t.tanh(l), t.scale(va, 3.0));
        const std::vector<Var> parts{t.element(s, 0), t.element(s, 2), t.squared_error(t.element(vb, 1), 0.3)};
        return t.sum(parts);
    };
    const auto loss = [&] {
        Tape t(false);
        Var va, vb;
        return t.scalar(build(t, va, vb));
    };
    Tape t;
    Var va, vb;
    t.backward(build(t, va, vb));
    std::vector<double*> coords;
    for (auto& v : a) coords.push_back(&v);
    for (auto& v : b) coords.push_back(&v);
    auto g = t.grad(va);
    const auto gb = t.grad(vb);
    g.insert(g.end(), gb.begin(), gb.end());
    EXPECT_LT(relative_error(g, central_difference(loss, coords)), 1e-8);
}

TEST(TapePrimitives, AffineParamGradients) {
    Rng rng(7);
    Param w = random_param(rng, 3, 4), b = random_param(rng, 3, 1);
    std::vector<double> x = random_vector(rng, 4);
    const auto build = [&](Tape& t, Var& vx) {
        vx = t.input(x);
        return t.sum(std::vector<Var>{t.element(t.tanh(t.affine(w, b, vx)), 0),
                                      t.element(t.affine(w, b, vx), 2)});
    };
    const auto loss = [&] {
        Tape t(false);
        Var vx;
        return t.scalar(build(t, vx));
    };
    Tape t;
    Var vx;
    t.backward(build(t, vx));
    std::vector<double*> coords;
    std::vector<double> g;
    for (auto* p : {&w, &b}) {
        for (auto& v : p->value) coords.push_back(&v);
        const auto pg = t.param_grad(*p);
        g.insert(g.end(), pg.begin(), pg.end());
    }
    for (auto& v : x) coords.push_back(&v);
    const auto gx = t.grad(vx);
    g.insert(g.end(), gx.begin(), gx.end());
    EXPECT_LT(relative_error(g, central_difference(loss, coords)), 1e-8);
}

TEST(Tape, SharedNodeGradientsAccumulate) {
    Tape t;
    const Var x = t.input({3.0});
    const Var y = t.add(t.add(x, x), t.scale(x, 4.0));
    t.backward(y);
    EXPECT_EQ(t.grad(x)[0], 6.0);
}

TEST(Tape, BackwardOnlyOnce) {
    Tape t;
    const Var x = t.input({1.0});
    const Var y = t.tanh(x);
    t.backward(y);
    EXPECT_TRUE(t.consumed());
    EXPECT_THROW(t.backward(y), UsageError);
    Tape frozen(false);
    const Var z = frozen.tanh(frozen.input({1.0}));
    EXPECT_THROW(frozen.backward(z), UsageError);
}

TEST(Tape, NegLogProbClampCounted) {
    Tape t;
    const Var p = t.input({0.0, 1.0});
    const Var l = t.neg_log_prob(p, 0);
    EXPECT_NEAR(t.scalar(l), -std::log(1e-12), 1e-9);
    EXPECT_EQ(t.clamped(), 1);
    t.backward(l);
    EXPECT_EQ(t.grad(p)[0], 0.0);
}

TEST(Mlp, GlorotInitialization) {
    Rng rng(11);
    const auto net = make_mlp({5, 16, 3}, Activation::tanh, 0.0, rng);
    ASSERT_EQ(net.weights.size(), 2u);
    EXPECT_EQ(net.weights[0].rows, 16);
    EXPECT_EQ(net.weights[0].cols, 5);
    EXPECT_EQ(net.biases[1].rows, 3);
    EXPECT_EQ(net.parameter_count(), 16u * 5 + 16 + 3 * 16 + 3);
    for (std::size_t l = 0; l < 2; ++l) {
        const double bound = std::sqrt(6.0 / (net.sizes[l] + net.sizes[l + 1]));
        for (double w : net.weights[l].value) EXPECT_LE(std::abs(w), bound);
        for (double b : net.biases[l].value) EXPECT_EQ(b, 0.0);
    }
    EXPECT_TRUE(net.finite());
    Rng again(11);
    EXPECT_EQ(make_mlp({5, 16, 3}, Activation::tanh, 0.0, again), net);
}

TEST(Mlp, ParameterGradientsMatchFiniteDifferences) {
    Rng rng(13);
    for (auto act : {Activation::identity, Activation::tanh, Activation::softmax}) {
        auto net = make_mlp({4, 6, 3}, act, 0.0, rng);
        for (auto* p : net.params()) {
            for (auto& v : p->value) v += 0.1 * (rng.uniform() - 0.5);
        }
        const auto x = random_vector(rng, 4);
        const std::vector<double> w{0.3, -1.2, 0.8};
        auto eval = mlp_forward(net, x);
        const auto grads = backward(eval, net, w);
        EXPECT_THROW(backward(eval, net, w), UsageError);
        const auto loss = [&] {
            const auto y = mlp_forward(net, x).output;
            return w[0] * y[0] + w[1] * y[1] + w[2] * y[2];
        };
        std::vector<double*> coords;
        std::vector<double> g;
        for (std::size_t l = 0; l < net.weights.size(); ++l) {
            for (auto& v : net.weights[l].value) coords.push_back(&v);
            g.insert(g.end(), grads.weights[l].begin(), grads.weights[l].end());
            for (auto& v : net.biases[l].value) coords.push_back(&v);
            g.insert(g.end(), grads.biases[l].begin(), grads.biases[l].end());
        }
        EXPECT_LT(relative_error(g, central_difference(loss, coords)), 1e-7);
    }
}

TEST(Mlp, DropoutMaskValues) {
    Rng rng(17);
    const auto net = make_mlp({3, 200, 2}, Activation::identity, 0.1, rng);
    int dropped = 0, total = 0;
    for (int i = 0; i < 50; ++i) {
        const auto mask = sample_mask(net, rng);
        ASSERT_EQ(mask.layers.size(), 1u);
        for (double m : mask.layers[0]) {
            EXPECT_TRUE(m == 0.0 || m == 1.0 / 0.9);
            dropped += m == 0.0;
            ++total;
        }
    }
    const double rate = static_cast<double>(dropped) / total;
    EXPECT_NEAR(rate, 0.1, 3 * std::sqrt(0.09 / total));
    const auto half = sample_mask(net, 0.5, rng);
    for (double m : half.layers[0]) EXPECT_TRUE(m == 0.0 || m == 2.0);
}

TEST(Mlp, MaskedForwardZeroesDroppedUnits) {
    Rng rng(19);
    const auto net = make_mlp({2, 4, 1}, Activation::identity, 0.5, rng);
    DropoutMask none{{std::vector<double>(4, 0.0)}};
    const auto y = mlp_forward(net, {0.3, -0.7}, &none).output;
    EXPECT_EQ(y[0], net.biases[1].value[0]);
}

TEST(OptState, EarlyStoppingPatience) {
    OptState opt;
    EXPECT_TRUE(opt.observe(1.0));
    EXPECT_TRUE(opt.observe(0.5));
    for (int i = 0; i < 4; ++i) {
        EXPECT_FALSE(opt.observe(0.6));
        EXPECT_FALSE(opt.should_stop());
    }
    EXPECT_FALSE(opt.observe(0.5));
    EXPECT_TRUE(opt.should_stop());
    EXPECT_FALSE(opt.observe(0.7));
    EXPECT_LE(opt.bad_epochs, opt.patience);
    EXPECT_TRUE(opt.observe(0.1));
    EXPECT_EQ(opt.bad_epochs, 0);
}

TEST(Sgd, StepAndNonFiniteGuard) {
    Param a{1, 2, {1.0, 2.0}}, b{1, 1, {3.0}};
    std::vector<Param*> ps{&a, &b};
    OptState opt;
    opt.lr = 0.5;
    sgd_step(ps, {{2.0, -2.0}, {1.0}}, opt);
    EXPECT_EQ(a.value, (std::vector<double>{0.0, 3.0}));
    EXPECT_EQ(b.value[0], 2.5);
    EXPECT_THROW(sgd_step(ps, {{1.0, 1.0}, {std::nan("")}}, opt), NumericError);
    EXPECT_EQ(a.value, (std::vector<double>{0.0, 3.0}));
}

TEST(Checkpoint, RoundTripsBitExactly) {
    Rng rng(23);
    auto a = make_mlp({3, 5, 2}, Activation::softmax, 0.1, rng);
    auto b = make_mlp({2, 4, 4, 1}, Activation::tanh, 0.0, rng);
    for (auto* p : a.params()) for (auto& v : p->value) v += 1e-3 * rng.uniform();
    std::vector<NamedNet> nets{{"first", &a}, {"second", &b}};
    std::ostringstream out;
    write_networks(out, nets);
    std::istringstream in(out.str());
    const std::vector<std::string> names{"first", "second"};
    const auto back = read_networks(in, names);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0], a);
    EXPECT_EQ(back[1], b);
    std::ostringstream again;
    std::vector<NamedNet> nets2{{"first", &back[0]}, {"second", &back[1]}};
    write_networks(again, nets2);
    EXPECT_EQ(again.str(), out.str());
}

TEST(Checkpoint, RejectsMismatchedOrTruncated) {
    Rng rng(29);
    const auto a = make_mlp({3, 5, 2}, Activation::identity, 0.0, rng);
    std::vector<NamedNet> nets{{"net", &a}};
    std::ostringstream out;
    write_networks(out, nets);
    const std::vector<std::string> wrong{"other"};
    std::istringstream in1(out.str());
    EXPECT_THROW(read_networks(in1, wrong), IoError);
    const std::vector<std::string> right{"net"};
    std::istringstream in2(out.str().substr(0, out.str().size() / 2));
    EXPECT_THROW(read_networks(in2, right), IoError);
    std::istringstream in3("not-a-checkpoint\n");
    EXPECT_THROW(read_networks(in3, right), IoError);
}
