#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tecde/sim_obs.hpp"
#include "tecde/sim_pkpd.hpp"

namespace tecde::data {

inline constexpr std::string_view kSchema = "tecde-dataset/1";

// Encoder control channel layout:
//   [volume, stage, group1, group2, group3, a_chemo, a_radio, outcome,
//    count x kCountChannels, time]
inline constexpr int kEncoderChannels = sim::kCovariateDims + sim::kTreatmentDims + 1 +
                                        sim::kCountChannels + 1;
inline constexpr int kOutcomeChannel = sim::kCovariateDims + sim::kTreatmentDims;
inline constexpr int kTimeChannel = kEncoderChannels - 1;
std::vector<std::string> encoder_channel_names();

enum class Channel { volume, stage, group, treatment, outcome, count, time };
Channel channel_from_name(std::string_view name);  // throws ArgumentError

struct Normalizer {
    double volume_scale = sim::kMaxVolume;
    double time_scale = 60.0;
    double count_scale = 100.0;

    double scale(Channel ch) const;
    double normalize(double raw, Channel ch) const { return raw / scale(ch); }
    double denormalize(double value, Channel ch) const { return value * scale(ch); }
    double normalize(double raw, std::string_view channel) const {
        return normalize(raw, channel_from_name(channel));
    }
    double denormalize(double value, std::string_view channel) const {
        return denormalize(value, channel_from_name(channel));
    }
    friend bool operator==(const Normalizer&, const Normalizer&) = default;
};

enum class Interpolation { linear, rectilinear };

// Piecewise-linear path through knots (times strictly increasing,
// normalized units). Derivative uses the right-hand segment at knots and
// the last segment at the final knot.
class ControlPath {
public:
    ControlPath() = default;
    ControlPath(std::vector<double> times, std::vector<double> values, int channels,
                Interpolation kind = Interpolation::linear);

    int channels() const { return channels_; }
    std::size_t knots() const { return times_.size(); }
    const std::vector<double>& times() const { return times_; }
    double t_first() const { return times_.front(); }
    double t_last() const { return times_.back(); }
    std::span<const double> knot(std::size_t i) const;

    std::vector<double> evaluate(double t) const;
    std::vector<double> derivative(double t) const;
    // Slope of segment i (between knots i and i+1).
    std::vector<double> segment_slope(std::size_t i) const;
    // Index of the segment containing t under the right-derivative rule.
    std::size_t segment_of(double t) const;

    // Path restricted to its first k knots.
    ControlPath prefix(std::size_t k) const;

    friend bool operator==(const ControlPath&, const ControlPath&) = default;

private:
    std::vector<double> times_;
    std::vector<double> values_;
    int channels_ = 0;
    Interpolation kind_ = Interpolation::linear;
};

ControlPath build_control_path(const sim::ObservationSeries& obs, const Normalizer& norm);

// Dense per-day ground truth kept with each patient.
struct DenseSummary {
    std::vector<double> v;
    std::vector<sim::TreatmentPair> a;
    std::vector<int> stage;

    int horizon() const { return static_cast<int>(v.size()) - 1; }
    sim::TreatmentPair treatment_on(int day) const;
    bool any_treatment() const;
    friend bool operator==(const DenseSummary&, const DenseSummary&) = default;
};

// Evaluation plans {none, chemo, radio, both}; index = chemo + 2 * radio.
inline constexpr int kNumPlans = 4;
std::string_view plan_name(int plan);
sim::TreatmentPair plan_treatment(int plan);
inline int treatment_class(sim::TreatmentPair a) { return a.chemo + 2 * a.radio; }
std::string cf_label_key(int horizon_n, int plan);

// Decoder control path over [t_from, t_to] (days) for a per-day treatment
// sequence. The treatment channel is piecewise linear through the points
// (d, treatment administered on day d-1), so each day's dose ramps in over
// the day it acts; treatment before day 0 is none. Channels are
// [a_chemo, a_radio] plus normalized time when requested.
ControlPath build_plan_path(double t_from, double t_to,
                            const std::function<sim::TreatmentPair(int)>& treatment_on_day,
                            const Normalizer& norm, bool time_channel);

// Decoder plan path for branching at observation time t_branch and
// following `plan` from day floor(t_branch) + 1 onward.
ControlPath build_branch_plan_path(const DenseSummary& dense, double t_branch, double t_to,
                                   int plan, const Normalizer& norm, bool time_channel);
// Same with the factual treatments throughout.
ControlPath build_factual_plan_path(const DenseSummary& dense, double t_from, double t_to,
                                    const Normalizer& norm, bool time_channel);

struct PatientRecord {
    int id = 0;
    int group = 1;
    sim::ObservationSeries obs;
    DenseSummary dense;
    // "n<h>/<plan>" -> volume at t_{k+h} for every branch k with h successors.
    std::map<std::string, std::vector<double>> cf_labels;

    friend bool operator==(const PatientRecord&, const PatientRecord&) = default;
};

struct SimConfig {
    double gamma_c = 2.0;
    double gamma_r = 2.0;
    sim::HawkesConfig hawkes;
    int horizon = 60;
    std::uint64_t seed = 1;
    std::vector<int> cf_horizons{1, 3, 4, 5};
    double count_scale = 100.0;
};

struct DatasetHeader {
    std::string schema{kSchema};
    std::string split;
    double gamma_c = 0.0;
    double gamma_r = 0.0;
    sim::HawkesConfig hawkes;
    int horizon = 60;
    double delta = 1.0;
    std::uint64_t seed = 0;
    double v_max = sim::kMaxVolume;
    int patients = 0;
    Normalizer norm;
    std::vector<std::string> channels = encoder_channel_names();
    std::vector<int> cf_horizons{1, 3, 4, 5};

    friend bool operator==(const DatasetHeader&, const DatasetHeader&) = default;
};

struct Dataset {
    DatasetHeader header;
    std::vector<PatientRecord> records;
};

// Ground-truth counterfactual volumes for the evaluation plans.
std::map<std::string, std::vector<double>> counterfactual_labels(
    const sim::DenseTrajectory& traj, const sim::ObservationSeries& obs,
    std::span<const int> horizons);

PatientRecord make_record(const sim::DenseTrajectory& traj, const sim::ObservationSeries& obs,
                          std::span<const int> horizons);

// Simulates `count` patients for one split. Patient i uses its own seeded
// substream, so splits are independent and reproducible.
Dataset simulate_split(const SimConfig& cfg, std::string_view split, int split_index, int count);

void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& path);

// Text serialization helpers shared with checkpoint/report writers.
std::string format_double(double x);

}  // namespace tecde::data
