#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <sstream>

#include "gradcheck.hpp"
#include "tecde/errors.hpp"
#include "tecde/tecde_model.hpp"

using namespace tecde;
using namespace tecde::model;
using tecde::testing::central_difference;
using tecde::testing::relative_error;

namespace {

ModelConfig small_config(int channels = 3) {
    ModelConfig cfg;
    cfg.latent_dim = 4;
    cfg.hidden_width = 8;
    cfg.max_step = 0.05;
    cfg.encoder_channels = channels;
    cfg.decoder_time_channel = true;
    return cfg;
}

data::ControlPath random_path(Rng& rng, int knots, int channels, double t0 = 0.0, double t1 = 1.0) {
    std::vector<double> times{t0};
    for (int i = 1; i + 1 < knots; ++i) times.push_back(t0 + (t1 - t0) * (i + 0.3 * rng.uniform()) / (knots - 1));
    times.push_back(t1);
    std::vector<double> values;
    for (int i = 0; i < knots * channels; ++i) values.push_back(rng.uniform() - 0.5);
    return data::ControlPath(times, values, channels);
}

void shrink(TecdeParams& p, double factor) {
    for (auto* q : p.params()) for (auto& v : q->value) v *= factor;
}

// dz/ds = F(z) v with F(z) = reshape(W z + b, l x C).
Eigen::VectorXd linear_exact(const nd::Mlp& field, const std::vector<double>& slope,
                             const Eigen::VectorXd& z0, double T) {
    const int l = static_cast<int>(z0.size());
    const int C = static_cast<int>(slope.size());
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(l, l);
    Eigen::VectorXd c = Eigen::VectorXd::Zero(l);
    const auto& W = field.weights[0].value;
    const auto& b = field.biases[0].value;
    for (int i = 0; i < l; ++i) {
        for (int ch = 0; ch < C; ++ch) {
            const int row = i * C + ch;
            for (int j = 0; j < l; ++j) M(i, j) += W[row * l + j] * slope[ch];
            c(i) += b[row] * slope[ch];
        }
    }
    // Augmented system [z; 1] keeps the affine term inside one exponential.
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(l + 1, l + 1);
    A.topLeftCorner(l, l) = M;
    A.topRightCorner(l, 1) = c;
    Eigen::VectorXd y(l + 1);
    y << z0, 1.0;
    return ((A * T).exp() * y).head(l);
}

double rk4_error(const nd::Mlp& field, const std::vector<double>& slope,
                 const std::vector<double>& z0, double T, int steps) {
    Tape tape(false);
    const Var z = rk4_piece(tape, field, nullptr, tape.input(z0), slope, T / steps, steps);
    const auto exact = linear_exact(field, slope, Eigen::Map<const Eigen::VectorXd>(z0.data(), z0.size()), T);
    double err = 0.0;
    for (std::size_t i = 0; i < z0.size(); ++i) err = std::max(err, std::abs(tape.value(z)[i] - exact(i)));
    return err;
}

}  // namespace

TEST(ModelConfig, Validation) {
    ModelConfig c;
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.latent_dim, 8);
    EXPECT_EQ(c.decoder_channels(), 2);
    c.decoder_time_channel = true;
    EXPECT_EQ(c.decoder_channels(), 3);
    c.latent_dim = 0;
    EXPECT_THROW(c.validate(), ArgumentError);
    c = {};
    c.max_step = 0.0;
    EXPECT_THROW(c.validate(), ArgumentError);
    c = {};
    c.dropout = 1.0;
    EXPECT_THROW(c.validate(), ArgumentError);
}

TEST(InitParams, Shapes) {
    Rng rng(1);
    const auto p = init_params(ModelConfig{}, rng);
    const int l = 8, C = data::kEncoderChannels;
    EXPECT_EQ(p.initial_map.sizes, (std::vector<int>{C, 128, l}));
    EXPECT_EQ(p.encoder_field.sizes, (std::vector<int>{l, 128, l * C}));
    EXPECT_EQ(p.decoder_field.sizes, (std::vector<int>{l, 128, l * 2}));
    EXPECT_EQ(p.outcome_head.out_dim(), 1);
    EXPECT_EQ(p.treatment_head.out_dim(), kTreatmentClasses);
    EXPECT_EQ(p.treatment_head.output, nd::Activation::softmax);
    EXPECT_EQ(p.encoder_field.output, nd::Activation::tanh);
    EXPECT_TRUE(p.finite());
    EXPECT_EQ(TecdeParams::network_names().size(), p.networks().size());

    ModelConfig lin;
    lin.linear_ablation = true;
    const auto q = init_params(lin, rng);
    EXPECT_EQ(q.encoder_field.sizes, (std::vector<int>{l, l * C}));
    EXPECT_EQ(q.decoder_field.hidden_layers(), 0);
}

TEST(Solver, Rk4FourthOrder) {
    Rng rng(3);
    for (int inst = 0; inst < 10; ++inst) {
        const int l = 3, C = 2;
        auto field = nd::make_mlp({l, l * C}, nd::Activation::identity, 0.0, rng);
        for (auto& b : field.biases[0].value) b = rng.uniform() - 0.5;
        const std::vector<double> slope{1.0 + rng.uniform(), rng.uniform() - 0.5};
        std::vector<double> z0{rng.uniform(), rng.uniform() - 0.5, 0.3};
        const double e1 = rk4_error(field, slope, z0, 1.0, 4);
        const double e2 = rk4_error(field, slope, z0, 1.0, 8);
        const double ratio = e1 / e2;
        EXPECT_GE(ratio, 8.0) << "instance " << inst;
        EXPECT_LE(ratio, 32.0) << "instance " << inst;
    }
}

TEST(Encoder, FirstLatentIsInitialMap) {
    Rng rng(5);
    const auto cfg = small_config();
    const auto p = init_params(cfg, rng);
    const auto path = random_path(rng, 4, 3);
    const auto lp = encode(p, path);
    const auto expected = nd::mlp_forward(p.initial_map, path.evaluate(0.0)).output;
    EXPECT_EQ(lp.z.front(), expected);
    EXPECT_EQ(lp.times, path.times());
}

TEST(Encoder, ReportsKnotsAndStopsAtEveryKnot) {
    Rng rng(7);
    auto cfg = small_config();
    for (double h : {0.5, 0.05, 0.01}) {
        cfg.max_step = h;
        Rng r2(7);
        const auto p = init_params(cfg, r2);
        const auto path = random_path(rng, 6, 3);
        const double t = 0.5 * (path.times()[3] + path.times()[4]);
        const auto lp = encode(p, path, 0.0, t);
        std::vector<double> expected(path.times().begin(), path.times().begin() + 4);
        expected.push_back(t);
        EXPECT_EQ(lp.times, expected) << "max_step " << h;
        for (const auto& s : lp.steps) {
            EXPECT_LE(s.t1 - s.t0, h + 1e-12);
            for (double k : path.times()) {
                EXPECT_FALSE(k > s.t0 + 1e-12 && k < s.t1 - 1e-12) << "step crosses knot " << k;
            }
        }
        for (double k : expected) {
            EXPECT_NE(std::find(lp.segment_bounds.begin(), lp.segment_bounds.end(), k),
                      lp.segment_bounds.end());
        }
    }
}

TEST(Encoder, MatchesFineEulerIntegration) {
    Rng rng(9);
    auto cfg = small_config();
    cfg.max_step = 0.01;
    const auto p = init_params(cfg, rng);
    const auto path = random_path(rng, 4, 3);
    const auto lp = encode(p, path);

    std::vector<double> z = nd::mlp_forward(p.initial_map, path.evaluate(0.0)).output;
    const int n = 200000;
    const double h = 1.0 / n;
    const int l = cfg.latent_dim, C = 3;
    for (int i = 0; i < n; ++i) {
        const double t = i * h;
        const auto f = nd::mlp_forward(p.encoder_field, z).output;
        const auto dx = path.derivative(t);
        for (int a = 0; a < l; ++a) {
            double s = 0.0;
            for (int c = 0; c < C; ++c) s += f[a * C + c] * dx[c];
            z[a] += h * s;
        }
    }
    for (int a = 0; a < l; ++a) EXPECT_NEAR(lp.z.back()[a], z[a], 1e-4);
}

TEST(Encoder, RejectsWrongChannelsAndDomain) {
    Rng rng(11);
    const auto p = init_params(small_config(), rng);
    const auto wrong = random_path(rng, 3, 2);
    EXPECT_THROW(encode(p, wrong), ArgumentError);
    const auto path = random_path(rng, 3, 3);
    EXPECT_THROW(encode(p, path, 0.0, 1.5), ArgumentError);
}

TEST(Encoder, NonFiniteLatentRaises) {
    Rng rng(13);
    auto p = init_params(small_config(), rng);
    p.encoder_field.biases.back().value[0] = std::nan("");
    const auto path = random_path(rng, 3, 3);
    EXPECT_THROW(encode(p, path), NumericError);
}

TEST(Decoder, QueryValidation) {
    Rng rng(15);
    const auto p = init_params(small_config(), rng);
    const auto plan = random_path(rng, 3, 3, 0.2, 0.4);
    const std::vector<double> z(4, 0.1);
    const std::vector<double> bad_order{0.3, 0.25};
    EXPECT_THROW(decode(p, z, plan, bad_order), ArgumentError);
    const std::vector<double> beyond{0.5};
    EXPECT_THROW(decode(p, z, plan, beyond), ArgumentError);
    const std::vector<double> before{0.1};
    EXPECT_THROW(decode(p, z, plan, before), ArgumentError);
    const auto two = random_path(rng, 3, 2, 0.2, 0.4);
    const std::vector<double> ok{0.3};
    EXPECT_THROW(decode(p, z, two, ok), ArgumentError);
    const std::vector<double> q{0.2, 0.3, 0.3, 0.4};
    const auto lp = decode(p, z, plan, q);
    EXPECT_EQ(lp.times, q);
    EXPECT_EQ(lp.z.front(), z);
    EXPECT_EQ(lp.z[1], lp.z[2]);
}

TEST(Decoder, TapeAndValueOverloadsAgree) {
    Rng rng(17);
    const auto p = init_params(small_config(), rng);
    const auto plan = random_path(rng, 4, 3, 0.1, 0.3);
    const std::vector<double> z{0.1, -0.2, 0.3, 0.0};
    const std::vector<double> q{0.15, 0.3};
    const auto v = decode(p, z, plan, q);
    Tape tape;
    const auto t = decode(tape, p, tape.input(z), plan, q);
    EXPECT_EQ(v.z, t.z);
    EXPECT_EQ(predict_outcome(p, v.z[1]), tape.scalar(predict_outcome(tape, p, t.vars[1])));
}

TEST(Decoder, InversionRoundTrip) {
    Rng rng(19);
    for (int inst = 0; inst < 5; ++inst) {
        auto cfg = small_config();
        cfg.max_step = 0.01;
        auto p = init_params(cfg, rng);
        shrink(p, 0.5);
        const auto plan = random_path(rng, 5, 3, 0.2, 0.5);
        std::vector<double> z0;
        for (int i = 0; i < 4; ++i) z0.push_back(rng.uniform() - 0.5);
        const std::vector<double> q{0.5};
        const auto fwd = decode(p, z0, plan, q);
        const auto back = invert_decode(p, fwd.z.back(), plan);
        for (int i = 0; i < 4; ++i) EXPECT_NEAR(back[i], z0[i], 1e-6);
    }
}

TEST(Model, EncodeDecodeHeadsGradient) {
    Rng rng(21);
    auto cfg = small_config();
    cfg.max_step = 0.2;
    auto p = init_params(cfg, rng);
    const auto path = random_path(rng, 3, 3);
    const auto plan = random_path(rng, 3, 3, 1.0, 1.2);
    const std::vector<double> q{1.1, 1.2};
    const double mu = 0.4;
    // which = 0: full loss; 1: outcome terms only; 2: treatment term only.
    const auto build = [&](Tape& tape, int which) {
        const auto enc = encode(tape, p, path, 0.0, 1.0);
        const auto dec = decode(tape, p, enc.vars.back(), plan, q);
        const Var y = predict_outcome(tape, p, enc.vars[1]);
        const Var yd = predict_decoder_outcome(tape, p, dec.vars.back());
        const Var pa = predict_treatment(tape, p, tape.grad_reverse(enc.vars.back(), mu));
        std::vector<Var> terms;
        if (which != 2) {
            terms.push_back(tape.squared_error(y, 0.2));
            terms.push_back(tape.squared_error(yd, -0.1));
        }
        if (which != 1) terms.push_back(tape.neg_log_prob(pa, 2));
        return tape.sum(terms);
    };
    Tape tape;
    tape.backward(build(tape, 0));
    std::vector<double*> coords;
    std::vector<double> g, route;
    for (auto* net : p.networks()) {
        const double r = net == &p.treatment_head ? 1.0 : -mu;
        for (auto* prm : net->params()) {
            const auto pg = tape.param_grad(*prm);
            for (std::size_t i = 0; i < prm->value.size(); ++i) {
                coords.push_back(&prm->value[i]);
                g.push_back(pg[i]);
                route.push_back(r);
            }
        }
    }
    const auto loss_of = [&](int which) {
        return [&, which] {
            Tape t(false);
            return t.scalar(build(t, which));
        };
    };
    const auto fd_outcome = central_difference(loss_of(1), coords);
    const auto fd_treatment = central_difference(loss_of(2), coords);
    std::vector<double> expected(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) expected[i] = fd_outcome[i] + route[i] * fd_treatment[i];
    EXPECT_LT(relative_error(g, expected), 1e-5);
}

TEST(Checkpoint, RoundTripsBitExactly) {
    Rng rng(23);
    auto cfg = small_config(data::kEncoderChannels);
    cfg.dropout = 0.1;
    const auto p = init_params(cfg, rng);
    std::ostringstream out;
    write_checkpoint(out, p);
    std::istringstream in(out.str());
    const auto back = read_checkpoint(in);
    EXPECT_EQ(back, p);
    std::ostringstream again;
    write_checkpoint(again, back);
    EXPECT_EQ(again.str(), out.str());

    std::istringstream bad("config latent_dim 4 color blue\n");
    EXPECT_THROW(read_checkpoint(bad), IoError);
}
