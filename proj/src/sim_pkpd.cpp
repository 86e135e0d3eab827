#include "tecde/sim_pkpd.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tecde/errors.hpp"

namespace tecde::sim {

namespace {

double truncated_normal(Rng& rng, double mean, double sd) {
    for (;;) {
        const double x = rng.normal(mean, sd);
        if (x >= 0.0) return x;
    }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Mean diameter over the last kDiameterWindow days including day i.
double window_mean(const std::vector<double>& d, std::size_t i) {
    const std::size_t lo = i + 1 >= kDiameterWindow ? i + 1 - kDiameterWindow : 0;
    double sum = 0.0;
    for (std::size_t j = lo; j <= i; ++j) sum += d[j];
    return sum / static_cast<double>(i - lo + 1);
}

void record_derived(DenseTrajectory& traj, std::size_t i) {
    const double d = diameter_of_volume(traj.grid[i].v);
    traj.diameters[i] = d;
    traj.stages[i] = stage_of_diameter(d);
    traj.dbar[i] = window_mean(traj.diameters, i);
    traj.assignment_probs[i] = treatment_probs(traj.dbar[i], traj.gamma_c, traj.gamma_r);
}

void resize_derived(DenseTrajectory& traj, std::size_t n) {
    traj.grid.resize(n);
    traj.diameters.resize(n);
    traj.dbar.resize(n);
    traj.stages.resize(n);
    traj.assignment_probs.resize(n);
}

}  // namespace

int stage_of_diameter(double d) {
    if (!(d >= 0.0)) throw ArgumentError("stage_of_diameter: negative diameter");
    if (d <= 3.0) return 0;
    if (d <= 4.0) return 1;
    if (d <= 5.0) return 2;
    return 3;
}

TreatmentPlan TreatmentPlan::sustained(int start_day, int end_day, TreatmentPair a) {
    if (end_day < start_day) throw ArgumentError("TreatmentPlan: end before start");
    TreatmentPlan plan;
    plan.start_day = start_day;
    plan.steps.assign(static_cast<std::size_t>(end_day - start_day + 1), a);
    return plan;
}

double DenseTrajectory::volume_at(double t) const {
    const int last = horizon();
    if (t <= 0.0) return grid.front().v;
    if (t >= last) return grid.back().v;
    const auto j = static_cast<std::size_t>(std::floor(t));
    const double w = t - static_cast<double>(j);
    return grid[j].v + w * (grid[j + 1].v - grid[j].v);
}

TreatmentPair DenseTrajectory::treatment_at(double t) const {
    const int j = std::clamp(static_cast<int>(std::floor(t)), 0, horizon());
    return {grid[j].a_chemo, grid[j].a_radio};
}

int DenseTrajectory::stage_at(double t) const {
    const int j = std::clamp(static_cast<int>(std::floor(t)), 0, horizon());
    return stages[j];
}

bool DenseTrajectory::any_treatment() const {
    return std::any_of(grid.begin(), grid.end(),
                       [](const SimState& s) { return s.a_chemo != 0 || s.a_radio != 0; });
}

bool operator==(const DenseTrajectory& a, const DenseTrajectory& b) {
    auto same_state = [](const SimState& x, const SimState& y) {
        return x.t == y.t && x.v == y.v && x.c == y.c && x.a_chemo == y.a_chemo &&
               x.a_radio == y.a_radio;
    };
    const auto& p = a.params;
    const auto& q = b.params;
    return p.rho == q.rho && p.K == q.K && p.beta_c == q.beta_c && p.alpha_r == q.alpha_r &&
           p.beta_r == q.beta_r && p.group == q.group && p.v0 == q.v0 &&
           a.gamma_c == b.gamma_c && a.gamma_r == b.gamma_r &&
           std::equal(a.grid.begin(), a.grid.end(), b.grid.begin(), b.grid.end(), same_state) &&
           a.diameters == b.diameters && a.dbar == b.dbar && a.stages == b.stages &&
           a.noise == b.noise && a.assignment_probs == b.assignment_probs;
}

PatientParams sample_patient(Rng& rng, int group, const PkpdPriors& priors) {
    if (group < 1 || group > 3) {
        throw ArgumentError("sample_patient: group must be 1, 2 or 3, got " + std::to_string(group));
    }
    PatientParams p;
    p.group = group;
    p.rho = truncated_normal(rng, priors.rho_mean, priors.rho_sd);
    p.K = priors.carrying_capacity;
    const double beta_c_mean =
        group == 3 ? priors.group_mean_factor * priors.beta_c_mean : priors.beta_c_mean;
    p.beta_c = truncated_normal(rng, beta_c_mean, priors.beta_c_sd);
    const double alpha_r_mean =
        group == 1 ? priors.group_mean_factor * priors.alpha_r_mean : priors.alpha_r_mean;
    p.alpha_r = truncated_normal(rng, alpha_r_mean, priors.alpha_r_sd);
    p.beta_r = p.alpha_r / priors.alpha_beta_ratio;
    const double d0 = priors.min_initial_diameter +
                      (priors.max_initial_diameter - priors.min_initial_diameter) * rng.uniform();
    p.v0 = volume_of_diameter(d0);
    return p;
}

PatientParams sample_patient(Rng& rng, const PkpdPriors& priors) {
    const int group = 1 + static_cast<int>(std::min(2.0, std::floor(3.0 * rng.uniform())));
    return sample_patient(rng, group, priors);
}

std::array<double, 2> treatment_probs(double dbar, double gamma_c, double gamma_r) {
    const double centered = dbar - kMaxDiameter / 2.0;
    return {sigmoid(gamma_c / kMaxDiameter * centered), sigmoid(gamma_r / kMaxDiameter * centered)};
}

SimState step_dynamics(const SimState& s, const PatientParams& p, double noise) {
    if (!(s.v > 0.0)) throw StateError("step_dynamics: non-positive volume");
    constexpr double dt = 1.0;
    SimState next;
    next.t = s.t + dt;
    next.c = kChemoDose * s.a_chemo + s.c / 2.0;
    const double dose = kRadioFraction * s.a_radio;
    const double rate = p.rho * std::log(p.K / s.v) - p.beta_c * next.c -
                        (p.alpha_r * dose + p.beta_r * dose * dose) + noise;
    next.v = std::clamp(s.v * (1.0 + dt * rate), kMinVolume, kMaxVolume);
    return next;
}

DenseTrajectory simulate_factual(const PatientParams& params, double gamma_c, double gamma_r,
                                 int horizon, Rng& rng) {
    if (horizon <= 0) throw ArgumentError("simulate_factual: horizon must be positive");
    DenseTrajectory traj;
    traj.params = params;
    traj.gamma_c = gamma_c;
    traj.gamma_r = gamma_r;
    const auto n = static_cast<std::size_t>(horizon) + 1;
    resize_derived(traj, n);
    traj.noise.resize(n - 1);

    traj.grid[0].v = std::clamp(params.v0, kMinVolume, kMaxVolume);
    for (std::size_t i = 0; i < n; ++i) {
        record_derived(traj, i);
        auto& s = traj.grid[i];
        const auto [pc, pr] = traj.assignment_probs[i];
        s.a_chemo = rng.bernoulli(pc) ? 1 : 0;
        s.a_radio = rng.bernoulli(pr) ? 1 : 0;
        if (i + 1 < n) {
            traj.noise[i] = rng.normal(0.0, kNoiseSd);
            traj.grid[i + 1] = step_dynamics(s, params, traj.noise[i]);
        }
    }
    return traj;
}

DenseTrajectory simulate_counterfactual(const DenseTrajectory& trajectory, int t_branch,
                                        const TreatmentPlan& plan, std::optional<int> end_day) {
    const int horizon = trajectory.horizon();
    if (t_branch < 0 || t_branch > horizon) {
        throw ArgumentError("simulate_counterfactual: branch day outside grid");
    }
    if (plan.start_day != t_branch) {
        throw ArgumentError("simulate_counterfactual: plan must start at the branch day");
    }
    const int last = end_day.value_or(plan.end_day());
    if (last > horizon || last < t_branch) {
        throw ArgumentError("simulate_counterfactual: requested horizon outside grid");
    }
    if (plan.steps.empty() || plan.end_day() < last) {
        throw ArgumentError("simulate_counterfactual: plan shorter than requested horizon");
    }

    DenseTrajectory cf;
    cf.params = trajectory.params;
    cf.gamma_c = trajectory.gamma_c;
    cf.gamma_r = trajectory.gamma_r;
    const auto n = static_cast<std::size_t>(last) + 1;
    const auto branch = static_cast<std::size_t>(t_branch);
    resize_derived(cf, n);
    cf.noise.assign(trajectory.noise.begin(), trajectory.noise.begin() + (n - 1));

    for (std::size_t i = 0; i <= branch; ++i) {
        cf.grid[i] = trajectory.grid[i];
        cf.diameters[i] = trajectory.diameters[i];
        cf.dbar[i] = trajectory.dbar[i];
        cf.stages[i] = trajectory.stages[i];
        cf.assignment_probs[i] = trajectory.assignment_probs[i];
    }
    for (std::size_t i = branch; i < n; ++i) {
        if (i > branch) record_derived(cf, i);
        const auto a = plan.steps[i - branch];
        cf.grid[i].a_chemo = a.chemo;
        cf.grid[i].a_radio = a.radio;
        if (i + 1 < n) cf.grid[i + 1] = step_dynamics(cf.grid[i], cf.params, cf.noise[i]);
    }
    return cf;
}

}  // namespace tecde::sim
