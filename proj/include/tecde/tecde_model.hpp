#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "tecde/dataset.hpp"
#include "tecde/ndiff.hpp"
#include "tecde/rng.hpp"

namespace tecde::model {

using nd::Tape;
using Var = Tape::Var;

inline constexpr int kTreatmentClasses = 4;

struct ModelConfig {
    int latent_dim = 8;
    int hidden_width = 128;
    double max_step = 0.5;  // normalized time units
    bool decoder_time_channel = false;
    bool linear_ablation = false;
    double dropout = 0.0;
    int encoder_channels = data::kEncoderChannels;

    int decoder_channels() const { return decoder_time_channel ? 3 : 2; }
    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// g_eta, f_theta, f_phi, h_nu (encoder and decoder copies) and h_alpha.
struct TecdeParams {
    ModelConfig config;
    nd::Mlp initial_map;
    nd::Mlp encoder_field;
    nd::Mlp decoder_field;
    nd::Mlp outcome_head;
    nd::Mlp decoder_outcome_head;
    nd::Mlp treatment_head;

    static const std::vector<std::string>& network_names();
    std::vector<nd::Mlp*> networks();
    std::vector<const nd::Mlp*> networks() const;
    std::vector<nd::Param*> params();
    bool finite() const;
    friend bool operator==(const TecdeParams&, const TecdeParams&) = default;
};

TecdeParams init_params(const ModelConfig& cfg, Rng& rng);

// One dropout mask per network, drawn once per sequence pass.
struct Masks {
    nd::DropoutMask initial, encoder, decoder, outcome, decoder_outcome, treatment;
};
Masks sample_masks(const TecdeParams& params, Rng& rng);

struct SolverStep {
    double t0 = 0.0;
    double t1 = 0.0;
};

struct LatentPath {
    enum class Source { encoder, decoder, inverse };
    Source source = Source::encoder;
    std::vector<double> times;             // report times
    std::vector<std::vector<double>> z;    // latent at each report time
    std::vector<Var> vars;                 // tape handles (tape overloads)
    std::vector<double> segment_bounds;    // integration breakpoints
    std::vector<SolverStep> steps;         // every RK4 step taken
};

// Tape-level encoder: z(t0) = g_eta(path(t0)); RK4 on dz = f_theta(z) dX up
// to t, reporting the latent at every knot in [t0, t] and at t.
LatentPath encode(Tape& tape, const TecdeParams& params, const data::ControlPath& path, double t0,
                  double t, const Masks* masks = nullptr);
LatentPath encode(const TecdeParams& params, const data::ControlPath& path, double t0, double t,
                  const Masks* masks = nullptr);
// Whole path.
LatentPath encode(const TecdeParams& params, const data::ControlPath& path,
                  const Masks* masks = nullptr);

// Decoder from z at plan.t_first(): RK4 on dz = f_phi(z) dA, reporting the
// latent at each query time (nondecreasing, within the plan's domain).
LatentPath decode(Tape& tape, const TecdeParams& params, Var z, const data::ControlPath& plan,
                  std::span<const double> query_times, const Masks* masks = nullptr);
LatentPath decode(const TecdeParams& params, std::span<const double> z,
                  const data::ControlPath& plan, std::span<const double> query_times,
                  const Masks* masks = nullptr);

// Runs the decoder dynamics backward from plan.t_last() to plan.t_first().
std::vector<double> invert_decode(const TecdeParams& params, std::span<const double> z_end,
                                  const data::ControlPath& plan, const Masks* masks = nullptr);

Var predict_outcome(Tape& tape, const TecdeParams& params, Var z, const Masks* masks = nullptr);
Var predict_decoder_outcome(Tape& tape, const TecdeParams& params, Var z,
                            const Masks* masks = nullptr);
Var predict_treatment(Tape& tape, const TecdeParams& params, Var z, const Masks* masks = nullptr);
double predict_outcome(const TecdeParams& params, std::span<const double> z);
double predict_decoder_outcome(const TecdeParams& params, std::span<const double> z);
std::vector<double> predict_treatment(const TecdeParams& params, std::span<const double> z);

// Generic fixed-step RK4 for dz/ds = field(z) * slope on one linear piece,
// used by the encoder/decoder and exposed for solver tests. `h` may be
// negative for backward integration.
Var rk4_piece(Tape& tape, const nd::Mlp& field, const nd::DropoutMask* mask, Var z,
              std::span<const double> slope, double h, int steps);

void write_checkpoint(std::ostream& out, const TecdeParams& params);
TecdeParams read_checkpoint(std::istream& in);

}  // namespace tecde::model
