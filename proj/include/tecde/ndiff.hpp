#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tecde/rng.hpp"

namespace tecde::nd {

// Dense row-major tensor with shape (rows, cols); biases use cols = 1.
struct Param {
    int rows = 0;
    int cols = 0;
    std::vector<double> value;

    std::size_t size() const { return value.size(); }
    friend bool operator==(const Param&, const Param&) = default;
};

class Tape {
public:
    using Var = int;

    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    bool recording() const { return record_; }
    std::size_t size() const { return nodes_.size(); }

    Var input(std::vector<double> value);
    const std::vector<double>& value(Var v) const { return nodes_[check(v)].value; }
    double scalar(Var v) const;

    // W·x + b with W of shape (out, in).
    Var affine(const Param& w, const Param& b, Var x);
    Var relu(Var x);
    Var tanh(Var x);
    Var softmax(Var x);
    // Elementwise product with a constant vector (dropout masks).
    Var mul_const(Var x, std::span<const double> c);
    // Sum of coeffs[i] * xs[i]; all operands share one length.
    Var lincomb(std::span<const Var> xs, std::span<const double> coeffs);
    Var add(Var a, Var b);
    Var scale(Var x, double s);
    // Reshape x (length rows*cols, row-major) to a matrix and multiply by a
    // constant vector of length cols.
    Var matvec_const(Var m, std::span<const double> v, int rows);
    // Identity forward; backward multiplies the incoming gradient by -mu.
    Var grad_reverse(Var x, double mu);
    Var element(Var x, int i);
    // (x[0] - target)^2.
    Var squared_error(Var x, double target);
    // -log(max(p[label], floor)).
    Var neg_log_prob(Var p, int label, double floor = 1e-12);
    Var sum(std::span<const Var> xs);

    // Reverse sweep from `out`. Allowed once per tape.
    void backward(Var out, std::span<const double> seed);
    void backward(Var out) { backward(out, std::vector<double>(value(out).size(), 1.0)); }
    bool consumed() const { return consumed_; }

    // Gradients after backward(); zero vectors for untouched nodes/params.
    std::vector<double> grad(Var v) const;
    std::vector<double> param_grad(const Param& p) const;
    const std::unordered_map<const Param*, std::vector<double>>& param_grads() const {
        return param_grads_;
    }
    // Number of probabilities clamped by neg_log_prob.
    int clamped() const { return clamped_; }

private:
    struct Node {
        std::vector<double> value;
        std::vector<double> grad;
        std::function<void(Tape&, const Node&)> back;
    };
    Var push(std::vector<double> value, std::function<void(Tape&, const Node&)> back);
    std::size_t check(Var v) const;
    std::vector<double>& grad_ref(Var v);
    std::vector<double>& param_grad_ref(const Param& p);

    std::vector<Node> nodes_;
    std::unordered_map<const Param*, std::vector<double>> param_grads_;
    bool record_ = true;
    bool consumed_ = false;
    int clamped_ = 0;
};

enum class Activation { identity, tanh, softmax };

struct Mlp {
    std::vector<int> sizes;  // input, hidden..., output
    std::vector<Param> weights;
    std::vector<Param> biases;
    Activation output = Activation::identity;
    double dropout = 0.0;  // on hidden units

    int in_dim() const { return sizes.front(); }
    int out_dim() const { return sizes.back(); }
    int hidden_layers() const { return static_cast<int>(sizes.size()) - 2; }
    std::size_t parameter_count() const;
    std::vector<Param*> params();
    std::vector<const Param*> params() const;
    bool finite() const;
    friend bool operator==(const Mlp&, const Mlp&) = default;
};

// Weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero.
Mlp make_mlp(std::vector<int> sizes, Activation output, double dropout, Rng& rng);

// One multiplier vector per hidden layer: 0 for dropped units, 1/(1-rate)
// for survivors.
struct DropoutMask {
    std::vector<std::vector<double>> layers;
    bool empty() const { return layers.empty(); }
};
DropoutMask sample_mask(const Mlp& net, Rng& rng);
DropoutMask sample_mask(const Mlp& net, double rate, Rng& rng);

Tape::Var mlp_forward(Tape& tape, const Mlp& net, Tape::Var x, const DropoutMask* mask = nullptr);

struct MlpEval {
    std::vector<double> output;
    Tape tape;
    Tape::Var input = -1;
    Tape::Var out = -1;
};
MlpEval mlp_forward(const Mlp& net, std::vector<double> input, const DropoutMask* mask = nullptr);

struct MlpGrads {
    std::vector<double> input;
    std::vector<std::vector<double>> weights;
    std::vector<std::vector<double>> biases;
};
// Throws UsageError when the tape was already consumed.
MlpGrads backward(MlpEval& eval, const Mlp& net, std::span<const double> output_gradient);

struct OptState {
    double lr = 1e-4;
    int epoch = 0;
    int patience = 5;
    double best = std::numeric_limits<double>::infinity();
    int bad_epochs = 0;

    // Records a validation loss; returns true on a new best.
    bool observe(double validation_loss);
    bool should_stop() const { return bad_epochs >= patience; }
};

// p <- p - lr * g. Throws NumericError on a non-finite gradient before
// touching any parameter.
void sgd_step(std::span<Param* const> params, const std::vector<std::vector<double>>& grads,
              const OptState& opt);

// Named collection of networks for checkpointing.
struct NamedNet {
    std::string name;
    const Mlp* net;
};
inline constexpr const char* kCheckpointSchema = "tecde-checkpoint/1";
void write_networks(std::ostream& out, std::span<const NamedNet> nets);
// Reads networks in file order; names must match `names`.
std::vector<Mlp> read_networks(std::istream& in, std::span<const std::string> names);

}  // namespace tecde::nd
