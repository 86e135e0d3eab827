#include "tecde/sim_obs.hpp"

#include <cmath>

#include "tecde/errors.hpp"

namespace tecde::sim {

double HawkesConfig::kappa_for(bool treated) const {
    if (policy == KappaPolicy::constant) return kappa;
    return treated ? kappa_treated : kappa_untreated;
}

void HawkesConfig::validate() const {
    const bool ok = policy == KappaPolicy::constant ? kappa >= 1.0
                                                     : kappa_treated >= 1.0 && kappa_untreated >= 1.0;
    if (!ok) throw ArgumentError("HawkesConfig: kappa must be >= 1");
}

std::vector<double> ObservationSeries::times() const {
    std::vector<double> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.t);
    return out;
}

double intensity_at(double t, std::span<const double> events, double tau, int stage, double kappa) {
    double lambda = kBaseIntensity * std::pow(kappa, stage);
    for (const double tm : events) {
        if (tm > tau && tm < t) lambda += std::exp(-kKernelDecay * (t - tm));
    }
    return lambda;
}

double compensator(double a, double b, std::span<const double> events, double tau, int stage,
                   double kappa) {
    double total = kBaseIntensity * std::pow(kappa, stage) * (b - a);
    for (const double tm : events) {
        if (tm > tau && tm <= a) {
            total += (std::exp(-kKernelDecay * (a - tm)) - std::exp(-kKernelDecay * (b - tm))) /
                     kKernelDecay;
        }
    }
    return total;
}

std::vector<double> sample_event_times(const DenseTrajectory& traj, const HawkesConfig& cfg,
                                       Rng& rng) {
    cfg.validate();
    const int horizon = traj.horizon();
    const auto base_rate = [&](int day) {
        const auto a = traj.treatment_at(day);
        const double kappa = cfg.kappa_for(a.chemo != 0 || a.radio != 0);
        return kBaseIntensity * std::pow(kappa, traj.stages[static_cast<std::size_t>(day)]);
    };

    std::vector<double> events;
    double t = 0.0;
    int day = 0;
    double excitation = 0.0;  // sum of kernels of events since the last stage change
    double base = base_rate(0);
    while (day < horizon) {
        const double boundary = day + 1;
        const double bound = base + excitation;
        const double candidate = t + rng.exponential(bound);
        if (candidate >= boundary) {
            excitation *= std::exp(-kKernelDecay * (boundary - t));
            t = boundary;
            ++day;
            if (day >= horizon) break;
            if (traj.stages[static_cast<std::size_t>(day)] !=
                traj.stages[static_cast<std::size_t>(day - 1)]) {
                excitation = 0.0;
            }
            base = base_rate(day);
            continue;
        }
        excitation *= std::exp(-kKernelDecay * (candidate - t));
        t = candidate;
        const double lambda = base + excitation;
        if (rng.uniform() * bound < lambda) {
            events.push_back(t);
            if (cfg.self_excitation) excitation += 1.0;
        }
    }
    return events;
}

ObservationRecord record_at(const DenseTrajectory& traj, double t, int count) {
    ObservationRecord r;
    r.t = t;
    const double v = traj.volume_at(t);
    r.x[0] = v;
    r.x[1] = traj.stage_at(t);
    for (int g = 0; g < 3; ++g) r.x[2 + g] = traj.params.group == g + 1 ? 1.0 : 0.0;
    const auto a = traj.treatment_at(t);
    r.a = {a.chemo, a.radio};
    r.y = v;
    r.c.fill(count);
    return r;
}

ObservationSeries sample_observations(const DenseTrajectory& traj, const HawkesConfig& cfg,
                                      Rng& rng, int patient_id) {
    ObservationSeries series;
    series.patient_id = patient_id;
    const auto events = sample_event_times(traj, cfg, rng);
    series.records.reserve(events.size() + 1);
    series.records.push_back(record_at(traj, 0.0, 1));
    for (const double t : events) {
        series.records.push_back(record_at(traj, t, static_cast<int>(series.records.size()) + 1));
    }
    return series;
}

}  // namespace tecde::sim
