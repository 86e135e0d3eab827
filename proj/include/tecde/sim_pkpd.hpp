#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "tecde/rng.hpp"
#include "tecde/staging.hpp"

namespace tecde::sim {

// Prior means/sds of the lung-cancer PK-PD model.
struct PkpdPriors {
    double rho_mean = 7.00e-5;
    double rho_sd = 7.23e-3;
    double carrying_capacity = 30.0;
    double beta_c_mean = 0.028;
    double beta_c_sd = 0.0007;
    double alpha_r_mean = 0.0398;
    double alpha_r_sd = 0.168;
    double alpha_beta_ratio = 10.0;
    double group_mean_factor = 1.1;
    double min_initial_diameter = 1.0;
    double max_initial_diameter = 6.0;
};

inline constexpr double kChemoDose = 5.0;     // mg/m^3 per administration
inline constexpr double kRadioFraction = 2.0; // Gy per administration
inline constexpr double kNoiseSd = 0.01;
inline constexpr double kMinVolume = 1e-4;    // cm^3, effective eradication
inline constexpr int kDiameterWindow = 15;    // days averaged for treatment assignment

struct PatientParams {
    double rho = 0.0;      // 1/day
    double K = 0.0;        // cm^3
    double beta_c = 0.0;   // per mg/m^3
    double alpha_r = 0.0;  // per Gy
    double beta_r = 0.0;   // per Gy^2
    int group = 1;         // heterogeneity group, 1..3
    double v0 = 0.0;       // cm^3
};

struct SimState {
    double t = 0.0;
    double v = 0.0;  // volume entering day t
    double c = 0.0;  // chemo concentration carried into day t
    int a_chemo = 0; // treatments administered on day t
    int a_radio = 0;
};

struct TreatmentPair {
    int chemo = 0;
    int radio = 0;
    friend bool operator==(const TreatmentPair&, const TreatmentPair&) = default;
};

// Per-day treatments for days [start_day, start_day + steps.size() - 1].
struct TreatmentPlan {
    int start_day = 0;
    std::vector<TreatmentPair> steps;

    int end_day() const { return start_day + static_cast<int>(steps.size()) - 1; }

    static TreatmentPlan sustained(int start_day, int end_day, TreatmentPair a);
};

// Ground-truth path on the daily grid. grid[i] is day i, i = 0..T.
// noise[i] drives the step from day i to day i+1.
struct DenseTrajectory {
    PatientParams params;
    double gamma_c = 0.0;
    double gamma_r = 0.0;
    std::vector<SimState> grid;
    std::vector<double> diameters;
    std::vector<double> dbar;
    std::vector<int> stages;
    std::vector<double> noise;
    std::vector<std::array<double, 2>> assignment_probs;

    int horizon() const { return static_cast<int>(grid.size()) - 1; }
    // Volume at fractional time t by linear interpolation of the grid.
    double volume_at(double t) const;
    // Treatment in effect at time t (administered on day floor(t)).
    TreatmentPair treatment_at(double t) const;
    int stage_at(double t) const;
    bool any_treatment() const;

    friend bool operator==(const DenseTrajectory&, const DenseTrajectory&);
};

PatientParams sample_patient(Rng& rng, int group, const PkpdPriors& priors = {});

// Uniform draw of the heterogeneity group followed by sample_patient.
PatientParams sample_patient(Rng& rng, const PkpdPriors& priors = {});

std::array<double, 2> treatment_probs(double dbar, double gamma_c, double gamma_r);

SimState step_dynamics(const SimState& state, const PatientParams& params, double noise);

DenseTrajectory simulate_factual(const PatientParams& params, double gamma_c, double gamma_r,
                                 int horizon, Rng& rng);

// Replays trajectory up to t_branch, then follows plan using the stored
// noise stream. Output covers days 0..end_day where end_day defaults to
// plan.end_day(); throws ArgumentError if the plan does not start at
// t_branch or does not reach end_day.
DenseTrajectory simulate_counterfactual(const DenseTrajectory& trajectory, int t_branch,
                                        const TreatmentPlan& plan,
                                        std::optional<int> end_day = std::nullopt);

}  // namespace tecde::sim
