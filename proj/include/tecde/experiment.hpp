#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tecde/dataset.hpp"
#include "tecde/eval.hpp"
#include "tecde/tecde_model.hpp"
#include "tecde/train.hpp"

namespace tecde::exp {

inline constexpr std::string_view kVersion = "0.1.0";

struct EvalConfig {
    std::vector<int> horizons{1, 3, 5};
    int selection_horizon = 5;
    int dropout_passes = 50;
    int exclusion_steps = 100;
    double exclusion_max = 0.99;
    bool uncertainty = false;
    std::uint64_t seed = 1;
    friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct SweepConfig {
    std::vector<double> gammas{2.0, 10.0};
    std::vector<double> kappas{10.0};
    std::vector<std::uint64_t> seeds{1};
    friend bool operator==(const SweepConfig&, const SweepConfig&) = default;
};

// Every field has a default; see config_keys() for the accepted keys.
struct ExperimentConfig {
    data::SimConfig sim;
    int n_train = 500;
    int n_val = 100;
    int n_test = 500;
    double scale = 1.0;
    model::ModelConfig model;
    train::TrainConfig train;
    EvalConfig eval;
    SweepConfig sweep;

    ExperimentConfig();
    void validate() const;
    // Patient counts after applying `scale` (at least one per split).
    int scaled(int count) const;
    // Sets both simulation and training seeds.
    void set_seed(std::uint64_t seed);
    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&);
};

// Documented keys with their meaning, in manifest order.
struct KeyDoc {
    std::string_view key;
    std::string_view help;
};
const std::vector<KeyDoc>& config_keys();

// Throws ArgumentError naming the key for unknown keys or bad values.
void set_value(ExperimentConfig& cfg, std::string_view key, std::string_view value);
// key = value lines; '#' starts a comment. Errors carry the line number.
void parse_config(std::istream& in, ExperimentConfig& cfg, std::string_view source = "config");
ExperimentConfig load_config(const std::filesystem::path& path);
// All keys with their current values; parse_config(to_text(c)) == c.
std::string to_text(const ExperimentConfig& cfg);
std::string manifest_text(const ExperimentConfig& cfg);

struct Splits {
    data::Dataset train;
    data::Dataset val;
    data::Dataset test;
};
Splits simulate_splits(const ExperimentConfig& cfg);

model::TecdeParams initial_params(const ExperimentConfig& cfg);
train::TrainResult train_model(const ExperimentConfig& cfg, const data::Dataset& train_set,
                               const data::Dataset& val_set,
                               const train::EpochCallback& on_epoch = {});

std::string kappa_label(const sim::HawkesConfig& h);
eval::EvalReport evaluate(const ExperimentConfig& cfg, const eval::Predictor& predictor,
                          const data::Dataset& test, int train_patients,
                          const model::TecdeParams* params = nullptr);

void write_history_csv(const std::filesystem::path& path, const train::LossReport& report);
void write_checkpoint_file(const std::filesystem::path& path, const model::TecdeParams& params);
model::TecdeParams read_checkpoint_file(const std::filesystem::path& path);

struct SplitSummary {
    std::string split;
    int patients = 0;
    double treatment_rate = 0.0;   // fraction of patient-days with any treatment
    double chemo_rate = 0.0;
    double radio_rate = 0.0;
    double mean_observations = 0.0;
};
SplitSummary summarize(const data::Dataset& ds);
void write_summary_json(const std::filesystem::path& path, const std::vector<SplitSummary>& s);

// Simulate, train and evaluate one configuration. When `dir` is given,
// datasets, checkpoint, history, report and manifest are written there.
struct CellResult {
    ExperimentConfig config;
    bool ok = false;
    std::string error;
    int exit_code = 0;
    eval::EvalReport report;
};
CellResult run_cell(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& dir);

// Cells of the gamma x kappa x seed grid in input order.
std::vector<ExperimentConfig> sweep_cells(const ExperimentConfig& cfg);
std::string cell_name(const ExperimentConfig& cell);

struct SweepResult {
    std::vector<CellResult> cells;
    double trend_spearman = 0.0;  // gamma vs one-step RMSE over successful cells
    bool monotone_trend = false;
};
// Spearman of gamma against the mean first-horizon RMSE per gamma; the flag
// is set when that mean is nondecreasing in gamma (needs two gammas).
void compute_trend(SweepResult& result);
// Runs cells on up to `workers` threads; a failing cell is recorded and the
// remaining cells still run.
SweepResult run_sweep(const ExperimentConfig& cfg, const std::filesystem::path& dir, int workers);
void write_sweep_csv(const std::filesystem::path& path, const SweepResult& result);

// Per-run directory "<YYYYmmdd-HHMMSS>-s<seed>" under `root`, made unique.
std::filesystem::path make_run_dir(const std::filesystem::path& root, std::uint64_t seed);

}  // namespace tecde::exp
