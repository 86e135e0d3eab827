#pragma once

#include <cmath>

#include "tecde/dataset.hpp"
#include "tecde/sim_pkpd.hpp"
#include "tecde/tecde_model.hpp"

namespace tecde::testing {

// Untreated trajectory frozen at diameter d (cm) for `horizon` days.
inline sim::DenseTrajectory frozen_trajectory(double d, int horizon, int group = 2) {
    sim::DenseTrajectory traj;
    traj.params.K = 30.0;
    traj.params.group = group;
    traj.params.v0 = sim::volume_of_diameter(d);
    const auto n = static_cast<std::size_t>(horizon) + 1;
    traj.grid.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        traj.grid[i].t = static_cast<double>(i);
        traj.grid[i].v = traj.params.v0;
    }
    traj.diameters.assign(n, d);
    traj.dbar.assign(n, d);
    traj.stages.assign(n, sim::stage_of_diameter(d));
    traj.noise.assign(n - 1, 0.0);
    traj.assignment_probs.assign(n, {0.0, 0.0});
    return traj;
}

inline data::SimConfig small_sim(double gamma, double kappa, std::uint64_t seed) {
    data::SimConfig cfg;
    cfg.gamma_c = cfg.gamma_r = gamma;
    cfg.hawkes.kappa = kappa;
    cfg.seed = seed;
    return cfg;
}

// Zero-initialized biases can put every ReLU exactly on its kink (a dead
// first layer gives z = 0), where central differences are meaningless.
inline void jitter_biases(model::TecdeParams& p, Rng& rng, double scale = 0.1) {
    for (auto* net : p.networks())
        for (auto& b : net->biases)
            for (auto& v : b.value) v += scale * (2.0 * rng.uniform() - 1.0);
}

}  // namespace tecde::testing
