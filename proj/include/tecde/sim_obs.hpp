#pragma once

#include <array>
#include <span>
#include <vector>

#include "tecde/rng.hpp"
#include "tecde/sim_pkpd.hpp"
#include "tecde/staging.hpp"

namespace tecde::sim {

inline constexpr double kBaseIntensity = 0.01;  // events/day in stage 0
inline constexpr double kKernelDecay = 2.0;     // 1/day

enum class KappaPolicy { constant, treatment_conditioned };

struct HawkesConfig {
    KappaPolicy policy = KappaPolicy::constant;
    double kappa = 1.0;
    double kappa_treated = 10.0;
    double kappa_untreated = 1.0;
    // Off turns the process into a stage-modulated Poisson process.
    bool self_excitation = true;

    // kappa in force on a day with the given treatment status.
    double kappa_for(bool treated) const;
    void validate() const;
    friend bool operator==(const HawkesConfig&, const HawkesConfig&) = default;
};

// Number of observed dimensions of X, A and Y; one counting channel each.
inline constexpr int kCovariateDims = 5;  // volume, stage, group one-hot (3)
inline constexpr int kTreatmentDims = 2;
inline constexpr int kCountChannels = kCovariateDims + kTreatmentDims + 1;

struct ObservationRecord {
    double t = 0.0;
    std::array<double, kCovariateDims> x{};
    std::array<int, kTreatmentDims> a{};
    double y = 0.0;
    std::array<int, kCountChannels> c{};

    friend bool operator==(const ObservationRecord&, const ObservationRecord&) = default;
};

struct ObservationSeries {
    int patient_id = 0;
    std::vector<ObservationRecord> records;

    std::size_t size() const { return records.size(); }
    std::vector<double> times() const;
    friend bool operator==(const ObservationSeries&, const ObservationSeries&) = default;
};

// Hawkes intensity with base 0.01 * kappa^stage and unit-height exponential
// kernel; events at or before tau (last stage change) are ignored.
double intensity_at(double t, std::span<const double> events, double tau, int stage, double kappa);

// Compensator of the intensity over [a, b] for a fixed stage/kappa, counting
// events in (tau, a]; used for time-rescaling checks.
double compensator(double a, double b, std::span<const double> events, double tau, int stage,
                   double kappa);

// Event times in (0, T] drawn by Ogata thinning. The intensity's base rate
// follows the trajectory's stage (and treatment, under the conditioned
// policy) as a step function on the daily grid.
std::vector<double> sample_event_times(const DenseTrajectory& traj, const HawkesConfig& cfg,
                                       Rng& rng);

// Builds a record at time t from the dense grid.
ObservationRecord record_at(const DenseTrajectory& traj, double t, int count);

// t = 0 observation plus the sampled events, with records and counting
// channels attached.
ObservationSeries sample_observations(const DenseTrajectory& traj, const HawkesConfig& cfg,
                                      Rng& rng, int patient_id = 0);

}  // namespace tecde::sim
