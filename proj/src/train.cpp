#include "tecde/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tecde/errors.hpp"
#include "tecde/log.hpp"

namespace tecde::train {

namespace {

constexpr double kProbFloor = 1e-12;

double normalized_outcome(const data::Normalizer& norm, double y) {
    return norm.normalize(y, data::Channel::outcome);
}

Var mean_of(Tape& tape, const std::vector<Var>& xs) {
    std::vector<double> cs(xs.size(), 1.0 / static_cast<double>(xs.size()));
    return tape.lincomb(xs, cs);
}

std::vector<nd::Param*> encoder_params(model::TecdeParams& p) {
    std::vector<nd::Param*> out;
    for (auto* net : {&p.initial_map, &p.encoder_field, &p.outcome_head, &p.treatment_head}) {
        for (auto* q : net->params()) out.push_back(q);
    }
    return out;
}

std::vector<nd::Param*> decoder_params(model::TecdeParams& p) {
    std::vector<nd::Param*> out;
    for (auto* net : {&p.decoder_field, &p.decoder_outcome_head}) {
        for (auto* q : net->params()) out.push_back(q);
    }
    return out;
}

void accumulate(std::vector<std::vector<double>>& acc, const Tape& tape,
                const std::vector<nd::Param*>& params, double weight) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto it = tape.param_grads().find(params[i]);
        if (it == tape.param_grads().end()) continue;
        for (std::size_t j = 0; j < acc[i].size(); ++j) acc[i][j] += weight * it->second[j];
    }
}

std::vector<std::vector<double>> zero_grads(const std::vector<nd::Param*>& params) {
    std::vector<std::vector<double>> g;
    for (const auto* p : params) g.emplace_back(p->size(), 0.0);
    return g;
}

void require_finite(double v, int phase, int epoch, std::size_t step, const char* what) {
    if (!std::isfinite(v)) {
        std::ostringstream msg;
        msg << "non-finite " << what << " in phase " << phase << ", epoch " << epoch << ", step "
            << step;
        throw NumericError(msg.str());
    }
}

std::vector<std::vector<std::vector<double>>> frozen_latents(const model::TecdeParams& params,
                                                             const data::Dataset& ds) {
    std::vector<std::vector<std::vector<double>>> out;
    out.reserve(ds.records.size());
    for (const auto& r : ds.records) {
        const auto path = data::build_control_path(r.obs, ds.header.norm);
        out.push_back(model::encode(params, path).z);
    }
    return out;
}

double decoder_loss_frozen(const model::TecdeParams& params, const data::Dataset& ds,
                           const std::vector<std::vector<std::vector<double>>>& latents,
                           int horizon) {
    double total = 0.0;
    int used = 0;
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        Tape tape(false);
        int count = 0;
        const Var l = decoder_terms(tape, params, ds.records[i], ds.header.norm, latents[i], horizon,
                                    &count);
        if (count == 0) continue;
        total += tape.scalar(l);
        ++used;
    }
    return used == 0 ? 0.0 : total / used;
}

std::vector<std::size_t> shuffled(std::vector<std::size_t> idx, std::uint64_t seed) {
    Rng rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    return idx;
}

}  // namespace

void TrainConfig::validate() const {
    if (epochs <= 0 || decoder_epochs <= 0) throw ArgumentError("train.epochs must be positive");
    if (batch_size <= 0) throw ArgumentError("train.batch must be positive");
    if (!(lr >= 0.0) || !(decoder_lr >= 0.0)) throw ArgumentError("train.lr must be nonnegative");
    if (patience <= 0) throw ArgumentError("train.patience must be positive");
    if (decoder_horizon <= 0) throw ArgumentError("train.decoder_horizon must be positive");
    if (mu_mode == MuMode::constant && mu_constant < 0.0) {
        throw ArgumentError("train.mu must be nonnegative");
    }
}

double outcome_loss(std::span<const double> predictions, std::span<const double> targets) {
    if (predictions.size() != targets.size()) throw ArgumentError("outcome_loss: length mismatch");
    if (predictions.empty()) throw ArgumentError("outcome_loss: no observations");
    double s = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const double d = predictions[i] - targets[i];
        s += d * d;
    }
    return s / static_cast<double>(predictions.size());
}

double treatment_loss(std::span<const std::vector<double>> probabilities,
                      std::span<const int> labels, int* clamped) {
    if (probabilities.size() != labels.size()) throw ArgumentError("treatment_loss: length mismatch");
    if (labels.empty()) throw ArgumentError("treatment_loss: no observations");
    double s = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto& p = probabilities[i];
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= p.size()) {
            throw ArgumentError("treatment_loss: label out of range");
        }
        double q = p[static_cast<std::size_t>(labels[i])];
        if (!(q > kProbFloor)) {
            q = kProbFloor;
            if (clamped) ++*clamped;
        }
        s -= std::log(q);
    }
    return s / static_cast<double>(labels.size());
}

double combined_objective(double ly, double la, double mu) { return ly - mu * la; }

double mu_schedule(int epoch, int total_epochs) {
    if (total_epochs <= 0 || epoch < 0) throw ArgumentError("mu_schedule: bad epoch");
    const double p = static_cast<double>(epoch) / total_epochs;
    return 2.0 / (1.0 + std::exp(-10.0 * p)) - 1.0;
}

double mu_for_epoch(const TrainConfig& cfg, int epoch) {
    switch (cfg.mu_mode) {
        case MuMode::scheduled:
            return mu_schedule(epoch, cfg.epochs);
        case MuMode::zero:
            return 0.0;
        case MuMode::constant:
            return cfg.mu_constant;
    }
    return 0.0;
}

Var decoder_terms(Tape& tape, const model::TecdeParams& params, const data::PatientRecord& record,
                  const data::Normalizer& norm, std::span<const std::vector<double>> latents,
                  int horizon, int* count, const model::Masks* masks) {
    const auto m = record.obs.size();
    std::vector<Var> per_branch;
    int terms = 0;
    for (std::size_t k = 0; k + 1 < m; ++k) {
        const Var z = tape.input(latents[k]);
        const std::size_t last = std::min(m - 1, k + static_cast<std::size_t>(horizon));
        std::vector<double> queries;
        for (std::size_t j = k + 1; j <= last; ++j) {
            queries.push_back(norm.normalize(record.obs.records[j].t, data::Channel::time));
        }
        const auto plan = data::build_factual_plan_path(record.dense, record.obs.records[k].t,
                                                        record.obs.records[last].t, norm,
                                                        params.config.decoder_time_channel);
        const auto dec = model::decode(tape, params, z, plan, queries, masks);
        for (std::size_t j = 0; j < dec.vars.size(); ++j) {
            const Var y = model::predict_decoder_outcome(tape, params, dec.vars[j], masks);
            per_branch.push_back(tape.squared_error(
                y, normalized_outcome(norm, record.obs.records[k + 1 + j].y)));
            ++terms;
        }
    }
    if (count) *count = terms;
    if (per_branch.empty()) return tape.input({0.0});
    return mean_of(tape, per_branch);
}

SequenceTerms sequence_terms(Tape& tape, const model::TecdeParams& params,
                             const data::PatientRecord& record, const data::Normalizer& norm,
                             const TermOptions& opt, const model::Masks* masks) {
    SequenceTerms out;
    const auto m = record.obs.size();
    if (m < 2) return out;
    const auto path = data::build_control_path(record.obs, norm);
    const auto enc = model::encode(tape, params, path, path.t_first(), path.t_last(), masks);
    if (enc.vars.size() != m) throw StateError("sequence_terms: latent count mismatch");

    if (opt.encoder) {
        std::vector<Var> sq;
        std::vector<Var> ce;
        for (std::size_t k = 0; k < m; ++k) {
            if (k + 1 < m) {
                const Var y = model::predict_outcome(tape, params, enc.vars[k], masks);
                sq.push_back(tape.squared_error(
                    y, normalized_outcome(norm, record.obs.records[k + 1].y)));
            }
            const auto& a = record.obs.records[k].a;
            const int label = data::treatment_class({a[0], a[1]});
            const Var zr = tape.grad_reverse(enc.vars[k], opt.mu);
            const Var p = model::predict_treatment(tape, params, zr, masks);
            ce.push_back(tape.neg_log_prob(p, label, kProbFloor));
        }
        out.ly = mean_of(tape, sq);
        out.la = mean_of(tape, ce);
        out.encoder_terms = static_cast<int>(sq.size());
    }
    if (opt.decoder) {
        // Decode from the encoder's tape handles so gradients reach the encoder.
        std::vector<Var> per_branch;
        for (std::size_t k = 0; k + 1 < m; ++k) {
            const std::size_t last = std::min(m - 1, k + static_cast<std::size_t>(opt.decoder_horizon));
            std::vector<double> queries;
            for (std::size_t j = k + 1; j <= last; ++j) queries.push_back(path.times()[j]);
            const auto plan = data::build_factual_plan_path(
                record.dense, record.obs.records[k].t, record.obs.records[last].t, norm,
                params.config.decoder_time_channel);
            const auto dec = model::decode(tape, params, enc.vars[k], plan, queries, masks);
            for (std::size_t j = 0; j < dec.vars.size(); ++j) {
                const Var y = model::predict_decoder_outcome(tape, params, dec.vars[j], masks);
                per_branch.push_back(tape.squared_error(
                    y, normalized_outcome(norm, record.obs.records[k + 1 + j].y)));
            }
        }
        out.ly_dec = mean_of(tape, per_branch);
        out.decoder_terms = static_cast<int>(per_branch.size());
    }
    return out;
}

EvalLosses encoder_losses(const model::TecdeParams& params, const data::Dataset& ds) {
    EvalLosses out;
    for (const auto& r : ds.records) {
        if (r.obs.size() < 2) continue;
        Tape tape(false);
        const auto t = sequence_terms(tape, params, r, ds.header.norm, {});
        out.ly += tape.scalar(t.ly);
        out.la += tape.scalar(t.la);
        ++out.sequences;
    }
    if (out.sequences > 0) {
        out.ly /= out.sequences;
        out.la /= out.sequences;
    }
    return out;
}

double decoder_loss(const model::TecdeParams& params, const data::Dataset& ds, int horizon) {
    return decoder_loss_frozen(params, ds, frozen_latents(params, ds), horizon);
}

TrainResult train(model::TecdeParams init, const data::Dataset& train_set,
                  const data::Dataset& val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
    cfg.validate();
    if (train_set.records.empty() || val_set.records.empty()) {
        throw ArgumentError("train: training and validation splits must be nonempty");
    }
    TrainResult result;
    auto& report = result.report;
    model::TecdeParams params = std::move(init);
    const auto& norm = train_set.header.norm;
    const bool dropout = params.config.dropout > 0.0;

    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < train_set.records.size(); ++i) {
        if (train_set.records[i].obs.size() >= 2) eligible.push_back(i);
    }
    report.skipped_sequences = static_cast<int>(train_set.records.size() - eligible.size());
    if (report.skipped_sequences > 0) {
        log::warn("{} training sequences have fewer than two observations and are excluded",
                  report.skipped_sequences);
    }
    if (eligible.empty()) throw ArgumentError("train: no sequence has two observations");

    // Phase 1: encoder with the routed adversarial objective.
    {
        nd::OptState opt{.lr = cfg.lr, .patience = cfg.patience};
        auto trainable = encoder_params(params);
        model::TecdeParams best = params;
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            opt.epoch = epoch;
            const double mu = mu_for_epoch(cfg, epoch);
            const auto order = shuffled(eligible, substream_seed(cfg.seed, 101, epoch));
            double sum_ly = 0.0, sum_la = 0.0;
            for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
                const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
                const double weight = 1.0 / static_cast<double>(stop - start);
                auto grads = zero_grads(trainable);
                for (std::size_t b = start; b < stop; ++b) {
                    const auto& rec = train_set.records[order[b]];
                    model::Masks masks;
                    if (dropout) {
                        Rng mrng(substream_seed(cfg.seed, 201, epoch * 1000003ULL + order[b]));
                        masks = model::sample_masks(params, mrng);
                    }
                    Tape tape;
                    TermOptions opts;
                    opts.mu = mu;
                    const auto t = sequence_terms(tape, params, rec, norm, opts,
                                                  dropout ? &masks : nullptr);
                    const double ly = tape.scalar(t.ly);
                    const double la = tape.scalar(t.la);
                    require_finite(ly, 1, epoch, b, "outcome loss");
                    require_finite(la, 1, epoch, b, "treatment loss");
                    sum_ly += ly;
                    sum_la += la;
                    report.clamped_probabilities += tape.clamped();
                    const Var total = tape.add(t.ly, t.la);
                    tape.backward(total);
                    accumulate(grads, tape, trainable, weight);
                }
                nd::sgd_step(trainable, grads, opt);
            }
            const auto val = encoder_losses(params, val_set);
            require_finite(val.ly, 1, epoch, 0, "validation loss");
            EpochStats st;
            st.phase = 1;
            st.epoch = epoch;
            st.mu = mu;
            st.train_ly = sum_ly / order.size();
            st.train_la = sum_la / order.size();
            st.train_objective = combined_objective(st.train_ly, st.train_la, mu);
            st.val_ly = val.ly;
            st.val_la = val.la;
            st.improved = opt.observe(val.ly);
            if (st.improved) best = params;
            report.history.push_back(st);
            report.encoder_epochs_run = epoch + 1;
            log::debug("phase 1 epoch {} mu {:.4f} train L_y {:.6g} L_a {:.4f} val L_y {:.6g}",
                       epoch, mu, st.train_ly, st.train_la, st.val_ly);
            if (on_epoch) on_epoch(st, params);
            if (opt.should_stop()) break;
        }
        params = std::move(best);
        report.best_encoder_val = opt.best;
    }

    // Phase 2: decoder on factual continuations, encoder frozen.
    {
        params.decoder_outcome_head = params.outcome_head;
        nd::OptState opt{.lr = cfg.decoder_lr, .patience = cfg.patience};
        auto trainable = decoder_params(params);
        const auto train_latents = frozen_latents(params, train_set);
        const auto val_latents = frozen_latents(params, val_set);
        model::TecdeParams best = params;
        for (int epoch = 0; epoch < cfg.decoder_epochs; ++epoch) {
            opt.epoch = epoch;
            const auto order = shuffled(eligible, substream_seed(cfg.seed, 102, epoch));
            double sum_ly = 0.0;
            for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
                const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
                const double weight = 1.0 / static_cast<double>(stop - start);
                auto grads = zero_grads(trainable);
                for (std::size_t b = start; b < stop; ++b) {
                    const auto i = order[b];
                    model::Masks masks;
                    if (dropout) {
                        Rng mrng(substream_seed(cfg.seed, 202, epoch * 1000003ULL + i));
                        masks = model::sample_masks(params, mrng);
                    }
                    Tape tape;
                    int count = 0;
                    const Var l = decoder_terms(tape, params, train_set.records[i], norm,
                                                train_latents[i], cfg.decoder_horizon, &count,
                                                dropout ? &masks : nullptr);
                    const double lv = tape.scalar(l);
                    require_finite(lv, 2, epoch, b, "decoder loss");
                    sum_ly += lv;
                    tape.backward(l);
                    accumulate(grads, tape, trainable, weight);
                }
                nd::sgd_step(trainable, grads, opt);
            }
            const double val = decoder_loss_frozen(params, val_set, val_latents, cfg.decoder_horizon);
            require_finite(val, 2, epoch, 0, "validation loss");
            EpochStats st;
            st.phase = 2;
            st.epoch = epoch;
            st.train_ly = sum_ly / order.size();
            st.train_objective = st.train_ly;
            st.val_ly = val;
            st.improved = opt.observe(val);
            if (st.improved) best = params;
            report.history.push_back(st);
            report.decoder_epochs_run = epoch + 1;
            log::debug("phase 2 epoch {} train L_y {:.6g} val L_y {:.6g}", epoch, st.train_ly, val);
            if (on_epoch) on_epoch(st, params);
            if (opt.should_stop()) break;
        }
        params = std::move(best);
        report.best_decoder_val = opt.best;
    }
    result.params = std::move(params);
    return result;
}

}  // namespace tecde::train
