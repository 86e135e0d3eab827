#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tecde/dataset.hpp"
#include "tecde/tecde_model.hpp"

namespace tecde::train {

using model::Tape;
using model::Var;

enum class MuMode { scheduled, zero, constant };

struct TrainConfig {
    int epochs = 100;          // encoder phase
    int decoder_epochs = 100;  // decoder phase
    int batch_size = 32;
    double lr = 1e-4;
    double decoder_lr = 1e-4;
    MuMode mu_mode = MuMode::scheduled;
    double mu_constant = 1.0;
    int patience = 5;
    std::uint64_t seed = 1;
    int decoder_horizon = 5;  // successors supervised per branch point

    void validate() const;
};

struct EpochStats {
    int phase = 1;
    int epoch = 0;
    double mu = 0.0;
    double train_ly = 0.0;
    double train_la = 0.0;
    double train_objective = 0.0;
    double val_ly = 0.0;
    double val_la = 0.0;
    bool improved = false;
};

struct LossReport {
    std::vector<EpochStats> history;
    double best_encoder_val = 0.0;
    double best_decoder_val = 0.0;
    int encoder_epochs_run = 0;
    int decoder_epochs_run = 0;
    int skipped_sequences = 0;  // fewer than two observations
    int clamped_probabilities = 0;
};

// (1/k) sum (y - yhat)^2; throws ArgumentError when k = 0.
double outcome_loss(std::span<const double> predictions, std::span<const double> targets);
// Mean -log p[label], probabilities clamped at 1e-12; `clamped` counts hits.
double treatment_loss(std::span<const std::vector<double>> probabilities,
                      std::span<const int> labels, int* clamped = nullptr);
// L_y - mu * L_a.
double combined_objective(double ly, double la, double mu);
// 2 / (1 + exp(-10 p)) - 1 with p = epoch / total.
double mu_schedule(int epoch, int total_epochs);
double mu_for_epoch(const TrainConfig& cfg, int epoch);

// Tape handles for one sequence. The treatment head sees the latent through
// a gradient-reversal node scaled by mu, so backpropagating ly + la routes
// +dL_a into h_alpha and -mu dL_a into the encoder.
struct SequenceTerms {
    Var ly = -1;      // encoder one-step outcome MSE
    Var la = -1;      // treatment cross entropy
    Var ly_dec = -1;  // decoder n-step outcome MSE
    int encoder_terms = 0;
    int decoder_terms = 0;
};

struct TermOptions {
    bool encoder = true;
    bool decoder = false;
    int decoder_horizon = 5;
    double mu = 0.0;
};

// Builds the loss terms for one patient on `tape`. Latents for the decoder
// are taken from the same encoder pass, so gradients flow end to end.
SequenceTerms sequence_terms(Tape& tape, const model::TecdeParams& params,
                             const data::PatientRecord& record, const data::Normalizer& norm,
                             const TermOptions& opt, const model::Masks* masks = nullptr);

// Decoder loss from precomputed (frozen) encoder latents.
Var decoder_terms(Tape& tape, const model::TecdeParams& params, const data::PatientRecord& record,
                  const data::Normalizer& norm, std::span<const std::vector<double>> latents,
                  int horizon, int* count, const model::Masks* masks = nullptr);

struct TrainResult {
    model::TecdeParams params;
    LossReport report;
};

using EpochCallback = std::function<void(const EpochStats&, const model::TecdeParams&)>;

// Two-phase training: encoder (g_eta, f_theta, h_nu, h_alpha) with the
// routed adversarial objective, then the decoder (f_phi, decoder head) on
// factual n-step windows with the encoder frozen. Early stopping on
// validation outcome loss; the best parameters of each phase are kept.
TrainResult train(model::TecdeParams init, const data::Dataset& train_set,
                  const data::Dataset& val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

// Validation-style losses without gradients.
struct EvalLosses {
    double ly = 0.0;
    double la = 0.0;
    int sequences = 0;
};
EvalLosses encoder_losses(const model::TecdeParams& params, const data::Dataset& ds);
double decoder_loss(const model::TecdeParams& params, const data::Dataset& ds, int horizon);

}  // namespace tecde::train
