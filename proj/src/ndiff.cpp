#include "tecde/ndiff.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "tecde/dataset.hpp"
#include "tecde/errors.hpp"

namespace tecde::nd {

std::size_t Tape::check(Var v) const {
    if (v < 0 || static_cast<std::size_t>(v) >= nodes_.size()) {
        throw UsageError("Tape: variable does not belong to this tape");
    }
    return static_cast<std::size_t>(v);
}

Tape::Var Tape::push(std::vector<double> value, std::function<void(Tape&, const Node&)> back) {
    nodes_.push_back({std::move(value), {}, record_ ? std::move(back) : nullptr});
    return static_cast<Var>(nodes_.size() - 1);
}

std::vector<double>& Tape::grad_ref(Var v) {
    auto& n = nodes_[static_cast<std::size_t>(v)];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

std::vector<double>& Tape::param_grad_ref(const Param& p) {
    auto& g = param_grads_[&p];
    if (g.empty()) g.assign(p.size(), 0.0);
    return g;
}

double Tape::scalar(Var v) const {
    const auto& x = value(v);
    if (x.size() != 1) throw UsageError("Tape::scalar: variable is not a scalar");
    return x[0];
}

Tape::Var Tape::input(std::vector<double> value) { return push(std::move(value), nullptr); }

Tape::Var Tape::affine(const Param& w, const Param& b, Var x) {
    const auto& xv = value(x);
    if (static_cast<int>(xv.size()) != w.cols || b.rows != w.rows) {
        throw ArgumentError("affine: dimension mismatch (input " + std::to_string(xv.size()) +
                            ", weight " + std::to_string(w.rows) + "x" + std::to_string(w.cols) +
                            ")");
    }
    std::vector<double> y(b.value);
    for (int r = 0; r < w.rows; ++r) {
        const double* row = w.value.data() + static_cast<std::size_t>(r) * w.cols;
        double acc = 0.0;
        for (int c = 0; c < w.cols; ++c) acc += row[c] * xv[c];
        y[r] += acc;
    }
    return push(std::move(y), [&w, &b, x](Tape& t, const Node& n) {
        const auto& xv = t.nodes_[x].value;
        auto& gw = t.param_grad_ref(w);
        auto& gb = t.param_grad_ref(b);
        auto& gx = t.grad_ref(x);
        for (int r = 0; r < w.rows; ++r) {
            const double g = n.grad[r];
            if (g == 0.0) continue;
            gb[r] += g;
            const double* row = w.value.data() + static_cast<std::size_t>(r) * w.cols;
            double* grow = gw.data() + static_cast<std::size_t>(r) * w.cols;
            for (int c = 0; c < w.cols; ++c) {
                grow[c] += g * xv[c];
                gx[c] += g * row[c];
            }
        }
    });
}

Tape::Var Tape::relu(Var x) {
    auto y = value(x);
    for (auto& v : y) v = v > 0.0 ? v : 0.0;
    return push(std::move(y), [x](Tape& t, const Node& n) {
        auto& gx = t.grad_ref(x);
        for (std::size_t i = 0; i < gx.size(); ++i) {
            if (n.value[i] > 0.0) gx[i] += n.grad[i];
        }
    });
}

Tape::Var Tape::tanh(Var x) {
    auto y = value(x);
    for (auto& v : y) v = std::tanh(v);
    return push(std::move(y), [x](Tape& t, const Node& n) {
        auto& gx = t.grad_ref(x);
        for (std::size_t i = 0; i < gx.size(); ++i) {
            gx[i] += n.grad[i] * (1.0 - n.value[i] * n.value[i]);
        }
    });
}

Tape::Var Tape::softmax(Var x) {
    auto y = value(x);
    const double top = *std::max_element(y.begin(), y.end());
    double total = 0.0;
    for (auto& v : y) {
        v = std::exp(v - top);
        total += v;
    }
    for (auto& v : y) v /= total;
    return push(std::move(y), [x](Tape& t, const Node& n) {
        double dot = 0.0;
        for (std::size_t i = 0; i < n.value.size(); ++i) dot += n.grad[i] * n.value[i];
        auto& gx = t.grad_ref(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += n.value[i] * (n.grad[i] - dot);
    });
}

Tape::Var Tape::mul_const(Var x, std::span<const double> c) {
    auto y = value(x);
    if (c.size() != y.size()) throw ArgumentError("mul_const: length mismatch");
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= c[i];
    return push(std::move(y), [x, c = std::vector<double>(c.begin(), c.end())](Tape& t,
                                                                              const Node& n) {
        auto& gx = t.grad_ref(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += n.grad[i] * c[i];
    });
}

Tape::Var Tape::lincomb(std::span<const Var> xs, std::span<const double> coeffs) {
    if (xs.empty() || xs.size() != coeffs.size()) throw ArgumentError("lincomb: bad operands");
    const std::size_t len = value(xs[0]).size();
    std::vector<double> y(len, 0.0);
    for (std::size_t j = 0; j < xs.size(); ++j) {
        const auto& v = value(xs[j]);
        if (v.size() != len) throw ArgumentError("lincomb: length mismatch");
        for (std::size_t i = 0; i < len; ++i) y[i] += coeffs[j] * v[i];
    }
    return push(std::move(y), [xs = std::vector<Var>(xs.begin(), xs.end()),
                               cs = std::vector<double>(coeffs.begin(), coeffs.end())](
                                  Tape& t, const Node& n) {
        for (std::size_t j = 0; j < xs.size(); ++j) {
            auto& g = t.grad_ref(xs[j]);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += cs[j] * n.grad[i];
        }
    });
}

Tape::Var Tape::add(Var a, Var b) {
    const Var xs[] = {a, b};
    const double cs[] = {1.0, 1.0};
    return lincomb(xs, cs);
}

Tape::Var Tape::scale(Var x, double s) {
    const Var xs[] = {x};
    const double cs[] = {s};
    return lincomb(xs, cs);
}

Tape::Var Tape::matvec_const(Var m, std::span<const double> v, int rows) {
    const auto& mv = value(m);
    const auto cols = v.size();
    if (rows <= 0 || mv.size() != static_cast<std::size_t>(rows) * cols) {
        throw ArgumentError("matvec_const: shape mismatch");
    }
    std::vector<double> y(static_cast<std::size_t>(rows), 0.0);
    for (int r = 0; r < rows; ++r) {
        const double* row = mv.data() + static_cast<std::size_t>(r) * cols;
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += row[c] * v[c];
        y[r] = acc;
    }
    return push(std::move(y), [m, v = std::vector<double>(v.begin(), v.end())](Tape& t,
                                                                              const Node& n) {
        auto& gm = t.grad_ref(m);
        const std::size_t cols = v.size();
        for (std::size_t r = 0; r < n.grad.size(); ++r) {
            double* grow = gm.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) grow[c] += n.grad[r] * v[c];
        }
    });
}

Tape::Var Tape::grad_reverse(Var x, double mu) {
    return push(value(x), [x, mu](Tape& t, const Node& n) {
        auto& gx = t.grad_ref(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] -= mu * n.grad[i];
    });
}

Tape::Var Tape::element(Var x, int i) {
    const auto& xv = value(x);
    if (i < 0 || static_cast<std::size_t>(i) >= xv.size()) {
        throw ArgumentError("element: index out of range");
    }
    return push({xv[static_cast<std::size_t>(i)]}, [x, i](Tape& t, const Node& n) {
        t.grad_ref(x)[static_cast<std::size_t>(i)] += n.grad[0];
    });
}

Tape::Var Tape::squared_error(Var x, double target) {
    const double d = value(x).at(0) - target;
    return push({d * d}, [x, d](Tape& t, const Node& n) { t.grad_ref(x)[0] += 2.0 * d * n.grad[0]; });
}

Tape::Var Tape::neg_log_prob(Var p, int label, double floor) {
    const auto& pv = value(p);
    if (label < 0 || static_cast<std::size_t>(label) >= pv.size()) {
        throw ArgumentError("neg_log_prob: label out of range");
    }
    const double q = pv[static_cast<std::size_t>(label)];
    const bool clamp = !(q > floor);
    if (clamp) ++clamped_;
    const double used = clamp ? floor : q;
    return push({-std::log(used)}, [p, label, used, clamp](Tape& t, const Node& n) {
        if (!clamp) t.grad_ref(p)[static_cast<std::size_t>(label)] -= n.grad[0] / used;
    });
}

Tape::Var Tape::sum(std::span<const Var> xs) {
    std::vector<double> cs(xs.size(), 1.0);
    return lincomb(xs, cs);
}

void Tape::backward(Var out, std::span<const double> seed) {
    if (consumed_) throw UsageError("Tape::backward: tape already consumed");
    if (!record_) throw UsageError("Tape::backward: tape was not recording");
    const auto top = check(out);
    if (seed.size() != nodes_[top].value.size()) {
        throw ArgumentError("Tape::backward: seed length mismatch");
    }
    consumed_ = true;
    auto& g = grad_ref(out);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (std::size_t k = top + 1; k-- > 0;) {
        const Node& n = nodes_[k];
        if (n.back && !n.grad.empty()) n.back(*this, n);
    }
}

std::vector<double> Tape::grad(Var v) const {
    const auto& n = nodes_[check(v)];
    return n.grad.empty() ? std::vector<double>(n.value.size(), 0.0) : n.grad;
}

std::vector<double> Tape::param_grad(const Param& p) const {
    const auto it = param_grads_.find(&p);
    return it == param_grads_.end() ? std::vector<double>(p.size(), 0.0) : it->second;
}

std::size_t Mlp::parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : params()) n += p->size();
    return n;
}

std::vector<Param*> Mlp::params() {
    std::vector<Param*> out;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        out.push_back(&weights[i]);
        out.push_back(&biases[i]);
    }
    return out;
}

std::vector<const Param*> Mlp::params() const {
    std::vector<const Param*> out;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        out.push_back(&weights[i]);
        out.push_back(&biases[i]);
    }
    return out;
}

bool Mlp::finite() const {
    for (const auto* p : params()) {
        for (const double v : p->value) {
            if (!std::isfinite(v)) return false;
        }
    }
    return true;
}

Mlp make_mlp(std::vector<int> sizes, Activation output, double dropout, Rng& rng) {
    if (sizes.size() < 2) throw ArgumentError("make_mlp: need at least input and output sizes");
    for (const int s : sizes) {
        if (s <= 0) throw ArgumentError("make_mlp: layer sizes must be positive");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ArgumentError("make_mlp: dropout outside [0, 1)");
    Mlp net;
    net.sizes = std::move(sizes);
    net.output = output;
    net.dropout = dropout;
    for (std::size_t l = 0; l + 1 < net.sizes.size(); ++l) {
        const int in = net.sizes[l];
        const int out = net.sizes[l + 1];
        const double limit = std::sqrt(6.0 / (in + out));
        Param w{out, in, std::vector<double>(static_cast<std::size_t>(in) * out)};
        for (auto& v : w.value) v = limit * (2.0 * rng.uniform() - 1.0);
        net.weights.push_back(std::move(w));
        net.biases.push_back(Param{out, 1, std::vector<double>(static_cast<std::size_t>(out), 0.0)});
    }
    return net;
}

DropoutMask sample_mask(const Mlp& net, Rng& rng) { return sample_mask(net, net.dropout, rng); }

DropoutMask sample_mask(const Mlp& net, double rate, Rng& rng) {
    DropoutMask mask;
    if (rate <= 0.0) return mask;
    const double keep = 1.0 / (1.0 - rate);
    for (int l = 1; l + 1 < static_cast<int>(net.sizes.size()); ++l) {
        std::vector<double> m(static_cast<std::size_t>(net.sizes[l]));
        for (auto& v : m) v = rng.uniform() < rate ? 0.0 : keep;
        mask.layers.push_back(std::move(m));
    }
    return mask;
}

Tape::Var mlp_forward(Tape& tape, const Mlp& net, Tape::Var x, const DropoutMask* mask) {
    if (static_cast<int>(tape.value(x).size()) != net.in_dim()) {
        throw ArgumentError("mlp_forward: input has " + std::to_string(tape.value(x).size()) +
                            " entries, network expects " + std::to_string(net.in_dim()));
    }
    const bool masked = mask != nullptr && !mask->empty();
    if (masked && static_cast<int>(mask->layers.size()) != net.hidden_layers()) {
        throw ArgumentError("mlp_forward: mask layer count mismatch");
    }
    Tape::Var h = x;
    const auto layers = net.weights.size();
    for (std::size_t l = 0; l < layers; ++l) {
        h = tape.affine(net.weights[l], net.biases[l], h);
        if (l + 1 < layers) {
            h = tape.relu(h);
            if (masked) {
                if (mask->layers[l].size() != tape.value(h).size()) {
                    throw ArgumentError("mlp_forward: mask width mismatch");
                }
                h = tape.mul_const(h, mask->layers[l]);
            }
        }
    }
    switch (net.output) {
        case Activation::identity:
            return h;
        case Activation::tanh:
            return tape.tanh(h);
        case Activation::softmax:
            return tape.softmax(h);
    }
    return h;
}

MlpEval mlp_forward(const Mlp& net, std::vector<double> input, const DropoutMask* mask) {
    MlpEval e;
    e.input = e.tape.input(std::move(input));
    e.out = mlp_forward(e.tape, net, e.input, mask);
    e.output = e.tape.value(e.out);
    return e;
}

MlpGrads backward(MlpEval& eval, const Mlp& net, std::span<const double> output_gradient) {
    eval.tape.backward(eval.out, output_gradient);
    MlpGrads g;
    g.input = eval.tape.grad(eval.input);
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
        g.weights.push_back(eval.tape.param_grad(net.weights[l]));
        g.biases.push_back(eval.tape.param_grad(net.biases[l]));
    }
    return g;
}

bool OptState::observe(double validation_loss) {
    if (validation_loss < best) {
        best = validation_loss;
        bad_epochs = 0;
        return true;
    }
    bad_epochs = std::min(bad_epochs + 1, patience);
    return false;
}

void sgd_step(std::span<Param* const> params, const std::vector<std::vector<double>>& grads,
              const OptState& opt) {
    if (params.size() != grads.size()) throw ArgumentError("sgd_step: params/grads mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].size() != params[i]->size()) {
            throw ArgumentError("sgd_step: gradient shape mismatch");
        }
        for (const double g : grads[i]) {
            if (!std::isfinite(g)) throw NumericError("sgd_step: non-finite gradient");
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& v = params[i]->value;
        for (std::size_t j = 0; j < v.size(); ++j) v[j] -= opt.lr * grads[i][j];
    }
}

namespace {

const char* activation_name(Activation a) {
    switch (a) {
        case Activation::identity:
            return "identity";
        case Activation::tanh:
            return "tanh";
        case Activation::softmax:
            return "softmax";
    }
    return "identity";
}

Activation activation_from(const std::string& s) {
    if (s == "identity") return Activation::identity;
    if (s == "tanh") return Activation::tanh;
    if (s == "softmax") return Activation::softmax;
    throw IoError("checkpoint: unknown activation '" + s + "'");
}

}  // namespace

void write_networks(std::ostream& out, std::span<const NamedNet> nets) {
    out << kCheckpointSchema << '\n';
    out << "networks " << nets.size() << '\n';
    for (const auto& [name, net] : nets) {
        out << "net " << name << ' ' << activation_name(net->output) << ' '
            << data::format_double(net->dropout) << ' ' << net->sizes.size();
        for (const int s : net->sizes) out << ' ' << s;
        out << '\n';
        for (const auto* p : net->params()) {
            out << "tensor " << p->rows << ' ' << p->cols;
            for (const double v : p->value) out << ' ' << data::format_double(v);
            out << '\n';
        }
    }
}

std::vector<Mlp> read_networks(std::istream& in, std::span<const std::string> names) {
    std::string line;
    int lineno = 0;
    auto next = [&]() -> std::istringstream {
        if (!std::getline(in, line)) {
            throw IoError("checkpoint: unexpected end of file after line " + std::to_string(lineno));
        }
        ++lineno;
        return std::istringstream(line);
    };
    auto fail = [&](const std::string& what) {
        return IoError("checkpoint line " + std::to_string(lineno) + ": " + what);
    };
    {
        auto ls = next();
        std::string schema;
        ls >> schema;
        if (schema != kCheckpointSchema) throw fail("unsupported schema '" + schema + "'");
    }
    std::size_t count = 0;
    {
        auto ls = next();
        std::string tag;
        ls >> tag >> count;
        if (tag != "networks" || !ls) throw fail("expected network count");
        if (count != names.size()) throw fail("network count mismatch");
    }
    std::vector<Mlp> nets;
    for (std::size_t k = 0; k < count; ++k) {
        auto ls = next();
        std::string tag, name, act;
        double dropout = 0.0;
        std::size_t layers = 0;
        ls >> tag >> name >> act >> dropout >> layers;
        if (tag != "net" || !ls) throw fail("expected network header");
        if (name != names[k]) throw fail("expected network '" + names[k] + "', found '" + name + "'");
        Mlp net;
        net.output = activation_from(act);
        net.dropout = dropout;
        net.sizes.resize(layers);
        for (auto& s : net.sizes) ls >> s;
        if (!ls || layers < 2) throw fail("bad layer sizes");
        for (std::size_t l = 0; l + 1 < layers; ++l) {
            for (int which = 0; which < 2; ++which) {
                auto ts = next();
                Param p;
                ts >> tag >> p.rows >> p.cols;
                const int want_rows = net.sizes[l + 1];
                const int want_cols = which == 0 ? net.sizes[l] : 1;
                if (tag != "tensor" || p.rows != want_rows || p.cols != want_cols) {
                    throw fail("tensor shape does not match layer sizes");
                }
                p.value.resize(static_cast<std::size_t>(p.rows) * p.cols);
                for (auto& v : p.value) {
                    std::string tok;
                    if (!(ts >> tok)) throw fail("truncated tensor");
                    v = std::stod(tok);
                }
                (which == 0 ? net.weights : net.biases).push_back(std::move(p));
            }
        }
        nets.push_back(std::move(net));
    }
    return nets;
}

}  // namespace tecde::nd
