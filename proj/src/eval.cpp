#include "tecde/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "tecde/errors.hpp"

namespace tecde::eval {

namespace {

const std::vector<double>& labels_for(const data::PatientRecord& r, int n, int plan) {
    const auto it = r.cf_labels.find(data::cf_label_key(n, plan));
    if (it == r.cf_labels.end()) {
        throw ArgumentError("missing counterfactual labels '" + data::cf_label_key(n, plan) +
                            "' for patient " + std::to_string(r.id));
    }
    return it->second;
}

double mean(std::span<const double> xs) {
    return xs.empty() ? 0.0 : std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
}

double pct_of_rmse(double mse) { return 100.0 * std::sqrt(mse) / sim::kMaxVolume; }

std::vector<double> average_ranks(std::span<const double> x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

// RMSE of the retained set after removing the `removed` entries ranked
// highest by `order` (indices sorted by descending rank key).
double retained_rmse(std::span<const double> errors, const std::vector<std::size_t>& order,
                     std::size_t removed) {
    double s = 0.0;
    const std::size_t kept = order.size() - removed;
    for (std::size_t i = removed; i < order.size(); ++i) s += errors[order[i]] * errors[order[i]];
    return std::sqrt(s / static_cast<double>(kept));
}

std::vector<std::size_t> descending(std::span<const double> key) {
    std::vector<std::size_t> idx(key.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return key[a] > key[b]; });
    return idx;
}

}  // namespace

double normalized_rmse(std::span<const double> predictions, std::span<const double> truths,
                       double v_max) {
    if (predictions.size() != truths.size()) throw ArgumentError("normalized_rmse: length mismatch");
    if (predictions.empty()) throw ArgumentError("normalized_rmse: empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const double d = predictions[i] - truths[i];
        s += d * d;
    }
    return 100.0 * std::sqrt(s / static_cast<double>(predictions.size())) / v_max;
}

std::vector<int> branch_points(const data::PatientRecord& record, int n) {
    if (n <= 0) throw ArgumentError("branch_points: horizon must be positive");
    std::vector<int> out;
    for (int k = 0; k + n < static_cast<int>(record.obs.size()); ++k) out.push_back(k);
    return out;
}

std::vector<std::vector<double>> Predictor::forecast_all(const data::PatientRecord& record,
                                                         const data::Normalizer& norm,
                                                         int n) const {
    std::vector<std::vector<double>> out;
    for (int plan = 0; plan < data::kNumPlans; ++plan) out.push_back(forecast(record, norm, n, plan));
    out.push_back(forecast(record, norm, n, kFactual));
    return out;
}

std::vector<std::vector<double>> ModelPredictor::forecast_all(const data::PatientRecord& record,
                                                              const data::Normalizer& norm,
                                                              int n) const {
    std::vector<std::vector<double>> out(data::kNumPlans + 1);
    const auto branches = branch_points(record, n);
    if (branches.empty()) return out;
    const auto path = data::build_control_path(record.obs, norm);
    const auto enc = model::encode(params_, path, masks_);
    const bool tc = params_.config.decoder_time_channel;
    for (const int k : branches) {
        const double t_k = record.obs.records[k].t;
        const double t_n = record.obs.records[k + n].t;
        const double q = norm.normalize(t_n, data::Channel::time);
        for (int plan = kFactual; plan < data::kNumPlans; ++plan) {
            const auto pp = plan == kFactual
                                ? data::build_factual_plan_path(record.dense, t_k, t_n, norm, tc)
                                : data::build_branch_plan_path(record.dense, t_k, t_n, plan, norm, tc);
            const auto dec = model::decode(params_, enc.z[k], pp, std::span<const double>(&q, 1), masks_);
            model::Tape tape(false);
            const auto zv = tape.input(dec.z[0]);
            const double y = tape.scalar(model::predict_decoder_outcome(tape, params_, zv, masks_));
            out[plan == kFactual ? data::kNumPlans : plan].push_back(
                norm.denormalize(y, data::Channel::outcome));
        }
    }
    return out;
}

std::vector<double> ModelPredictor::forecast(const data::PatientRecord& record,
                                             const data::Normalizer& norm, int n, int plan) const {
    if (plan < kFactual || plan >= data::kNumPlans) throw ArgumentError("forecast: bad plan");
    auto all = forecast_all(record, norm, n);
    return std::move(all[plan == kFactual ? data::kNumPlans : plan]);
}

std::vector<double> OraclePredictor::forecast(const data::PatientRecord& record,
                                              const data::Normalizer&, int n, int plan) const {
    const auto branches = branch_points(record, n);
    std::vector<double> out;
    if (plan == kFactual) {
        for (const int k : branches) out.push_back(record.obs.records[k + n].y);
        return out;
    }
    const auto& labels = labels_for(record, n, plan);
    if (labels.size() != branches.size()) throw StateError("oracle: label count mismatch");
    return labels;
}

std::vector<double> ConstantPredictor::forecast(const data::PatientRecord& record,
                                                const data::Normalizer&, int n, int) const {
    return std::vector<double>(branch_points(record, n).size(), value_);
}

HorizonResult horizon_eval(const Predictor& predictor, const data::Dataset& ds, int n) {
    HorizonResult res;
    res.n = n;
    double cf = 0.0, fact = 0.0, treated = 0.0, untreated = 0.0;
    for (const auto& r : ds.records) {
        const auto branches = branch_points(r, n);
        if (branches.empty()) {
            ++res.skipped;
            continue;
        }
        const auto all = predictor.forecast_all(r, ds.header.norm, n);
        double se = 0.0;
        int terms = 0;
        for (int plan = 0; plan < data::kNumPlans; ++plan) {
            const auto& truth = labels_for(r, n, plan);
            for (std::size_t b = 0; b < branches.size(); ++b) {
                const double d = all[plan][b] - truth[b];
                se += d * d;
                ++terms;
            }
        }
        double fse = 0.0;
        for (std::size_t b = 0; b < branches.size(); ++b) {
            const double d = all[data::kNumPlans][b] - r.obs.records[branches[b] + n].y;
            fse += d * d;
        }
        const double mse = se / terms;
        cf += mse;
        fact += fse / static_cast<double>(branches.size());
        if (r.dense.any_treatment()) {
            treated += mse;
            ++res.treated_patients;
        } else {
            untreated += mse;
        }
        ++res.patients;
        res.branches += static_cast<int>(branches.size());
    }
    if (res.patients == 0) throw ArgumentError("horizon_eval: no patient has enough observations");
    res.rmse = pct_of_rmse(cf / res.patients);
    res.rmse_factual = pct_of_rmse(fact / res.patients);
    if (res.treated_patients > 0) res.rmse_treated = pct_of_rmse(treated / res.treated_patients);
    const int untreated_patients = res.patients - res.treated_patients;
    if (untreated_patients > 0) res.rmse_untreated = pct_of_rmse(untreated / untreated_patients);
    return res;
}

int argmin_plan(std::span<const double> volumes) {
    if (volumes.empty()) throw ArgumentError("argmin_plan: empty input");
    int best = 0;
    for (int i = 1; i < static_cast<int>(volumes.size()); ++i) {
        if (volumes[i] < volumes[best]) best = i;
    }
    return best;
}

SelectionResult treatment_selection(const Predictor& predictor, const data::Dataset& ds, int n) {
    SelectionResult res;
    res.n = n;
    double acc = 0.0;
    int pooled = 0;
    for (const auto& r : ds.records) {
        const auto branches = branch_points(r, n);
        if (branches.empty()) continue;
        const auto all = predictor.forecast_all(r, ds.header.norm, n);
        std::array<const std::vector<double>*, data::kNumPlans> truth{};
        for (int p = 0; p < data::kNumPlans; ++p) truth[p] = &labels_for(r, n, p);
        int correct = 0;
        for (std::size_t b = 0; b < branches.size(); ++b) {
            std::array<double, data::kNumPlans> pred{}, gt{};
            for (int p = 0; p < data::kNumPlans; ++p) {
                pred[p] = all[p][b];
                gt[p] = (*truth[p])[b];
            }
            const int want = argmin_plan(gt);
            ++res.optimal_counts[want];
            if (argmin_plan(pred) == want) ++correct;
        }
        acc += static_cast<double>(correct) / branches.size();
        pooled += correct;
        res.branches += static_cast<int>(branches.size());
        ++res.patients;
    }
    if (res.patients == 0) throw ArgumentError("treatment_selection: no eligible patient");
    res.accuracy = acc / res.patients;
    res.branch_accuracy = static_cast<double>(pooled) / res.branches;
    return res;
}

UncertaintySample mc_dropout_predict(const model::TecdeParams& params,
                                     const data::PatientRecord& record,
                                     const data::Normalizer& norm, const McOptions& opt) {
    if (opt.passes < 2) throw ArgumentError("mc_dropout_predict: need at least two passes");
    const double rate = opt.rate_override >= 0.0 ? opt.rate_override : params.config.dropout;
    if (opt.rate_override < 0.0 && !(params.config.dropout > 0.0)) {
        throw ArgumentError("mc_dropout_predict: model was configured without dropout");
    }
    UncertaintySample out;
    out.passes = opt.passes;
    for (int p = 0; p < data::kNumPlans; ++p) {
        const auto& t = labels_for(record, opt.n, p);
        out.truth.insert(out.truth.end(), t.begin(), t.end());
    }
    const std::size_t len = out.truth.size();
    out.mean.assign(len, 0.0);
    out.variance.assign(len, 0.0);
    if (len == 0) return out;
    // Welford accumulation: identical passes give exactly zero variance.
    std::vector<double> m2(len, 0.0);
    for (int pass = 0; pass < opt.passes; ++pass) {
        Rng rng(substream_seed(opt.seed, static_cast<std::uint64_t>(record.id),
                               opt.pin_masks ? 0 : pass));
        model::Masks masks;
        masks.initial = nd::sample_mask(params.initial_map, rate, rng);
        masks.encoder = nd::sample_mask(params.encoder_field, rate, rng);
        masks.decoder = nd::sample_mask(params.decoder_field, rate, rng);
        masks.outcome = nd::sample_mask(params.outcome_head, rate, rng);
        masks.decoder_outcome = nd::sample_mask(params.decoder_outcome_head, rate, rng);
        masks.treatment = nd::sample_mask(params.treatment_head, rate, rng);
        const ModelPredictor predictor(params, &masks);
        const auto all = predictor.forecast_all(record, norm, opt.n);
        std::size_t i = 0;
        for (int p = 0; p < data::kNumPlans; ++p) {
            for (const double y : all[p]) {
                const double d = y - out.mean[i];
                out.mean[i] += d / (pass + 1);
                m2[i] += d * (y - out.mean[i]);
                ++i;
            }
        }
    }
    double se = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
        out.variance[i] = m2[i] / opt.passes;
        const double d = out.mean[i] - out.truth[i];
        se += d * d;
    }
    out.uncertainty = mean(out.variance);
    out.error = std::sqrt(se / static_cast<double>(len));
    return out;
}

std::vector<double> default_exclusion_grid(int steps, double max_fraction) {
    if (steps < 1) throw ArgumentError("exclusion grid needs at least one step");
    std::vector<double> g(static_cast<std::size_t>(steps) + 1);
    for (int i = 0; i <= steps; ++i) g[i] = max_fraction * i / steps;
    return g;
}

SparsificationResult sparsification(std::span<const double> uncertainties,
                                    std::span<const double> errors,
                                    std::span<const double> fractions) {
    if (uncertainties.size() != errors.size()) throw ArgumentError("sparsification: length mismatch");
    if (errors.empty()) throw ArgumentError("sparsification: empty input");
    if (fractions.empty()) throw ArgumentError("sparsification: empty fraction grid");
    SparsificationResult res;
    res.fractions.assign(fractions.begin(), fractions.end());
    const auto by_model = descending(uncertainties);
    const auto by_oracle = descending(errors);
    const std::size_t n = errors.size();
    for (const double f : fractions) {
        if (f < 0.0 || f >= 1.0) throw ArgumentError("sparsification: fraction outside [0, 1)");
        const auto removed = static_cast<std::size_t>(std::floor(f * static_cast<double>(n)));
        const double m = retained_rmse(errors, by_model, removed);
        const double o = retained_rmse(errors, by_oracle, removed);
        res.model_curve.push_back(m);
        res.oracle_curve.push_back(o);
        res.error_curve.push_back(m - o);
    }
    for (std::size_t i = 1; i < fractions.size(); ++i) {
        res.ause += 0.5 * (res.error_curve[i] + res.error_curve[i - 1]) *
                    (fractions[i] - fractions[i - 1]);
    }
    return res;
}

std::vector<EfficiencyPoint> data_efficiency(
    const std::function<double(const data::Dataset& subset)>& train_and_score,
    const data::Dataset& train_set, std::span<const int> sizes) {
    if (sizes.empty()) throw ArgumentError("data_efficiency: no sizes given");
    std::vector<EfficiencyPoint> out;
    for (const int size : sizes) {
        if (size <= 0 || size > static_cast<int>(train_set.records.size())) {
            throw ArgumentError("data_efficiency: size " + std::to_string(size) +
                                " exceeds the available " +
                                std::to_string(train_set.records.size()) + " records");
        }
        data::Dataset subset;
        subset.header = train_set.header;
        subset.header.patients = size;
        subset.records.assign(train_set.records.begin(), train_set.records.begin() + size);
        out.push_back({size, train_and_score(subset), 0.0});
    }
    const auto largest = std::max_element(out.begin(), out.end(),
                                          [](const auto& a, const auto& b) { return a.size < b.size; });
    const double ref = largest->rmse;
    for (auto& p : out) p.degradation = (p.rmse / ref - 1.0) * 100.0;
    return out;
}

std::vector<LatentRow> export_latents(const model::TecdeParams& params, const data::Dataset& ds,
                                      std::span<const double> times) {
    std::vector<LatentRow> rows;
    const auto& norm = ds.header.norm;
    for (const auto& r : ds.records) {
        const auto path = data::build_control_path(r.obs, norm);
        for (const double t : times) {
            const double tn = std::min(norm.normalize(t, data::Channel::time), path.t_last());
            const auto enc = model::encode(params, path, path.t_first(), std::max(tn, path.t_first()));
            LatentRow row;
            row.patient = r.id;
            row.t = t;
            row.z = enc.z.back();
            row.label = data::treatment_class(r.dense.treatment_on(static_cast<int>(std::floor(t))));
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

void write_latents_csv(const std::filesystem::path& path, std::span<const LatentRow> rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << "patient,t";
    const std::size_t dims = rows.empty() ? 0 : rows.front().z.size();
    for (std::size_t i = 0; i < dims; ++i) out << ",z" << i;
    out << ",label\n";
    for (const auto& r : rows) {
        out << r.patient << ',' << data::format_double(r.t);
        for (const double v : r.z) out << ',' << data::format_double(v);
        out << ',' << r.label << '\n';
    }
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

LabeledLatents observation_latents(const model::TecdeParams& params, const data::Dataset& ds) {
    LabeledLatents out;
    for (const auto& r : ds.records) {
        const auto path = data::build_control_path(r.obs, ds.header.norm);
        const auto enc = model::encode(params, path);
        for (std::size_t k = 0; k < r.obs.size(); ++k) {
            const auto& a = r.obs.records[k].a;
            out.z.push_back(enc.z[k]);
            out.labels.push_back(data::treatment_class({a[0], a[1]}));
        }
    }
    return out;
}

ProbeResult logistic_probe(const LabeledLatents& data, int classes, int iterations, double lr) {
    const std::size_t n = data.z.size();
    if (n < 4 || data.labels.size() != n) throw ArgumentError("logistic_probe: need >= 4 samples");
    const std::size_t d = data.z.front().size();
    const std::size_t n_train = n / 2;
    ProbeResult res;
    res.train_size = static_cast<int>(n_train);
    res.test_size = static_cast<int>(n - n_train);

    std::vector<double> mu(d, 0.0), sd(d, 0.0);
    for (std::size_t i = 0; i < n_train; ++i) {
        for (std::size_t j = 0; j < d; ++j) mu[j] += data.z[i][j];
    }
    for (auto& m : mu) m /= static_cast<double>(n_train);
    for (std::size_t i = 0; i < n_train; ++i) {
        for (std::size_t j = 0; j < d; ++j) sd[j] += std::pow(data.z[i][j] - mu[j], 2);
    }
    for (auto& s : sd) s = std::sqrt(s / static_cast<double>(n_train)) + 1e-12;
    auto feature = [&](std::size_t i, std::size_t j) { return (data.z[i][j] - mu[j]) / sd[j]; };

    // Full-batch gradient descent on the softmax cross entropy.
    const auto k = static_cast<std::size_t>(classes);
    std::vector<double> w(k * (d + 1), 0.0);
    std::vector<double> logits(k), grad(w.size());
    auto scores = [&](std::size_t i) {
        for (std::size_t c = 0; c < k; ++c) {
            double s = w[c * (d + 1) + d];
            for (std::size_t j = 0; j < d; ++j) s += w[c * (d + 1) + j] * feature(i, j);
            logits[c] = s;
        }
    };
    for (int it = 0; it < iterations; ++it) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t i = 0; i < n_train; ++i) {
            scores(i);
            const double top = *std::max_element(logits.begin(), logits.end());
            double z = 0.0;
            for (auto& l : logits) z += (l = std::exp(l - top));
            for (std::size_t c = 0; c < k; ++c) {
                const double g = logits[c] / z - (static_cast<int>(c) == data.labels[i] ? 1.0 : 0.0);
                for (std::size_t j = 0; j < d; ++j) grad[c * (d + 1) + j] += g * feature(i, j);
                grad[c * (d + 1) + d] += g;
            }
        }
        for (std::size_t q = 0; q < w.size(); ++q) w[q] -= lr * grad[q] / static_cast<double>(n_train);
    }
    std::vector<int> counts(k, 0);
    for (std::size_t i = 0; i < n_train; ++i) ++counts[static_cast<std::size_t>(data.labels[i])];
    const int majority = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    int correct = 0, majority_hits = 0;
    for (std::size_t i = n_train; i < n; ++i) {
        scores(i);
        const int pred = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
        if (pred == data.labels[i]) ++correct;
        if (majority == data.labels[i]) ++majority_hits;
    }
    res.accuracy = static_cast<double>(correct) / res.test_size;
    res.majority_rate = static_cast<double>(majority_hits) / res.test_size;
    return res;
}

double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw ArgumentError("spearman: need two aligned series");
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    const double mx = mean(rx), my = mean(ry);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

nlohmann::json to_json(const EvalReport& report) {
    using nlohmann::json;
    json j;
    j["setting"] = {{"gamma", report.setting.gamma},
                    {"kappa", report.setting.kappa},
                    {"seed", report.setting.seed},
                    {"train_patients", report.setting.train_patients},
                    {"test_patients", report.setting.test_patients}};
    j["horizons"] = json::array();
    for (const auto& h : report.horizons) {
        j["horizons"].push_back({{"n", h.n},
                                 {"rmse_pct", h.rmse},
                                 {"rmse_factual_pct", h.rmse_factual},
                                 {"rmse_treated_pct", h.rmse_treated},
                                 {"rmse_untreated_pct", h.rmse_untreated},
                                 {"patients", h.patients},
                                 {"treated_patients", h.treated_patients},
                                 {"branches", h.branches},
                                 {"skipped", h.skipped}});
    }
    j["treatment_selection"] = json::array();
    for (const auto& s : report.selection) {
        j["treatment_selection"].push_back({{"n", s.n},
                                            {"accuracy", s.accuracy},
                                            {"branch_accuracy", s.branch_accuracy},
                                            {"patients", s.patients},
                                            {"branches", s.branches},
                                            {"optimal_counts", s.optimal_counts}});
    }
    if (report.has_uncertainty) {
        const auto& u = report.uncertainty;
        j["uncertainty"] = {{"fractions", u.fractions},
                            {"exclusion_rmse", u.model_curve},
                            {"oracle_rmse", u.oracle_curve},
                            {"sparsification_error", u.error_curve},
                            {"ause", u.ause},
                            {"spearman_fraction_rmse", report.uncertainty_spearman}};
    }
    return j;
}

std::string csv_header() {
    return "gamma,kappa,seed,train_patients,test_patients,n,rmse_pct,rmse_factual_pct,"
           "rmse_treated_pct,rmse_untreated_pct,selection_accuracy,ause";
}

std::string csv_row(const EvalReport& report) {
    std::string rows;
    for (const auto& h : report.horizons) {
        std::string sel;
        for (const auto& s : report.selection) {
            if (s.n == h.n) sel = data::format_double(s.accuracy);
        }
        rows += data::format_double(report.setting.gamma) + ',' + report.setting.kappa + ',' +
                std::to_string(report.setting.seed) + ',' +
                std::to_string(report.setting.train_patients) + ',' +
                std::to_string(report.setting.test_patients) + ',' + std::to_string(h.n) + ',' +
                data::format_double(h.rmse) + ',' + data::format_double(h.rmse_factual) + ',' +
                data::format_double(h.rmse_treated) + ',' + data::format_double(h.rmse_untreated) +
                ',' + sel + ',' +
                (report.has_uncertainty ? data::format_double(report.uncertainty.ause) : "") + '\n';
    }
    return rows;
}

void write_report(const std::filesystem::path& json_path, const std::filesystem::path& csv_path,
                  const EvalReport& report) {
    {
        std::ofstream out(json_path, std::ios::binary);
        if (!out) throw IoError("cannot open '" + json_path.string() + "' for writing");
        out << to_json(report).dump(2) << '\n';
    }
    std::ofstream out(csv_path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + csv_path.string() + "' for writing");
    out << csv_header() << '\n' << csv_row(report);
}

}  // namespace tecde::eval
