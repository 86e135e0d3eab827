#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tecde/dataset.hpp"
#include "tecde/tecde_model.hpp"

namespace tecde::eval {

// 100 * sqrt(mean((y - yhat)^2)) / v_max.
double normalized_rmse(std::span<const double> predictions, std::span<const double> truths,
                       double v_max = sim::kMaxVolume);

// Branch points with at least n successors.
std::vector<int> branch_points(const data::PatientRecord& record, int n);

// Volume forecasts (cm^3) at t_{k+n} for every branch point k, under an
// evaluation plan (0..3) or the factual treatments (plan = kFactual).
inline constexpr int kFactual = -1;
class Predictor {
public:
    virtual ~Predictor() = default;
    virtual std::vector<double> forecast(const data::PatientRecord& record,
                                         const data::Normalizer& norm, int n, int plan) const = 0;
    // Plans 0..3 followed by the factual forecast: result[i][branch].
    virtual std::vector<std::vector<double>> forecast_all(const data::PatientRecord& record,
                                                          const data::Normalizer& norm,
                                                          int n) const;
};

class ModelPredictor : public Predictor {
public:
    explicit ModelPredictor(const model::TecdeParams& params, const model::Masks* masks = nullptr)
        : params_(params), masks_(masks) {}
    std::vector<double> forecast(const data::PatientRecord& record, const data::Normalizer& norm,
                                 int n, int plan) const override;
    std::vector<std::vector<double>> forecast_all(const data::PatientRecord& record,
                                                  const data::Normalizer& norm,
                                                  int n) const override;

private:
    const model::TecdeParams& params_;
    const model::Masks* masks_;
};

// Reads the ground truth stored with each record.
class OraclePredictor : public Predictor {
public:
    std::vector<double> forecast(const data::PatientRecord& record, const data::Normalizer& norm,
                                 int n, int plan) const override;
};

class ConstantPredictor : public Predictor {
public:
    explicit ConstantPredictor(double value) : value_(value) {}
    std::vector<double> forecast(const data::PatientRecord& record, const data::Normalizer& norm,
                                 int n, int plan) const override;

private:
    double value_;
};

struct HorizonResult {
    int n = 1;
    double rmse = 0.0;            // counterfactual, all four plans
    double rmse_factual = 0.0;    // factual plan against observed outcomes
    double rmse_treated = 0.0;    // counterfactual, treated patients
    double rmse_untreated = 0.0;  // counterfactual, never-treated patients
    int patients = 0;
    int treated_patients = 0;
    int branches = 0;
    int skipped = 0;  // patients without n successors
};

// Per-patient MSE, averaged over patients, square root, normalized.
HorizonResult horizon_eval(const Predictor& predictor, const data::Dataset& ds, int n);

struct SelectionResult {
    int n = 0;
    double accuracy = 0.0;  // per-patient fraction correct, averaged over patients
    double branch_accuracy = 0.0;  // pooled over branch points
    int patients = 0;
    int branches = 0;
    std::array<int, data::kNumPlans> optimal_counts{};  // ground-truth argmin frequencies
};

// argmin over plans with ties to the lowest plan index.
int argmin_plan(std::span<const double> volumes);
SelectionResult treatment_selection(const Predictor& predictor, const data::Dataset& ds, int n);

struct UncertaintySample {
    std::vector<double> mean;      // per (branch, plan), cm^3
    std::vector<double> variance;  // same layout
    std::vector<double> truth;     // ground-truth counterfactuals
    double uncertainty = 0.0;      // mean variance
    double error = 0.0;            // RMSE of the mean prediction (cm^3)
    int passes = 0;
};

struct McOptions {
    int passes = 50;
    int n = 1;
    std::uint64_t seed = 1;
    // Overrides the model's dropout rate for mask sampling when >= 0.
    double rate_override = -1.0;
    // Reuse one mask stream for every pass (replay/debugging).
    bool pin_masks = false;
};

// N forward passes with independent masks per pass (one mask set per
// network per pass). Throws ArgumentError when the model has no dropout
// and no override is given, or when passes < 2.
UncertaintySample mc_dropout_predict(const model::TecdeParams& params,
                                     const data::PatientRecord& record,
                                     const data::Normalizer& norm, const McOptions& opt);

struct SparsificationResult {
    std::vector<double> fractions;
    std::vector<double> model_curve;
    std::vector<double> oracle_curve;
    std::vector<double> error_curve;
    double ause = 0.0;
};

// steps + 1 equally spaced fractions from 0 to max_fraction.
std::vector<double> default_exclusion_grid(int steps = 100, double max_fraction = 0.99);
SparsificationResult sparsification(std::span<const double> uncertainties,
                                    std::span<const double> errors,
                                    std::span<const double> fractions);

struct EfficiencyPoint {
    int size = 0;
    double rmse = 0.0;
    double degradation = 0.0;  // percent vs the largest size
};
// Trains on the first `size` training records for each size and scores it.
std::vector<EfficiencyPoint> data_efficiency(
    const std::function<double(const data::Dataset& subset)>& train_and_score,
    const data::Dataset& train_set, std::span<const int> sizes);

struct LatentRow {
    int patient = 0;
    double t = 0.0;
    std::vector<double> z;
    int label = 0;
};
// Latent at each requested day (clipped to the last observation) with the
// treatment class administered on that day.
std::vector<LatentRow> export_latents(const model::TecdeParams& params, const data::Dataset& ds,
                                      std::span<const double> times);
void write_latents_csv(const std::filesystem::path& path, std::span<const LatentRow> rows);

// Latents at every observation with the treatment class at that time.
struct LabeledLatents {
    std::vector<std::vector<double>> z;
    std::vector<int> labels;
};
LabeledLatents observation_latents(const model::TecdeParams& params, const data::Dataset& ds);

// Multinomial logistic regression trained on the first half, accuracy on
// the second half (features standardized on the training half).
struct ProbeResult {
    double accuracy = 0.0;
    double majority_rate = 0.0;  // accuracy of predicting the training majority class
    int train_size = 0;
    int test_size = 0;
};
ProbeResult logistic_probe(const LabeledLatents& data, int classes = data::kNumPlans,
                           int iterations = 300, double lr = 0.5);

double spearman(std::span<const double> x, std::span<const double> y);

struct EvalSetting {
    double gamma = 0.0;
    std::string kappa;
    std::uint64_t seed = 0;
    int train_patients = 0;
    int test_patients = 0;
};

struct EvalReport {
    EvalSetting setting;
    std::vector<HorizonResult> horizons;
    std::vector<SelectionResult> selection;
    bool has_uncertainty = false;
    SparsificationResult uncertainty;
    double uncertainty_spearman = 0.0;
};

nlohmann::json to_json(const EvalReport& report);
void write_report(const std::filesystem::path& json_path, const std::filesystem::path& csv_path,
                  const EvalReport& report);
std::string csv_header();
std::string csv_row(const EvalReport& report);

}  // namespace tecde::eval
