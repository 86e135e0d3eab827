#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "helpers.hpp"
#include "tecde/errors.hpp"
#include "tecde/sim_obs.hpp"
#include "tecde/stats.hpp"

using namespace tecde;
using namespace tecde::sim;
using tecde::testing::frozen_trajectory;

namespace {

// Thinning against a bound ten times the current intensity, with the
// excitation recomputed from the full event history at each candidate.
int brute_force_count(double mu, double horizon, Rng& rng) {
    std::vector<double> events;
    const auto lambda = [&](double t) {
        double l = mu;
        for (double tm : events) l += std::exp(-2.0 * (t - tm));
        return l;
    };
    double t = 0.0;
    while (true) {
        const double bound = 10.0 * lambda(t);
        t += -std::log(1.0 - rng.uniform()) / bound;
        if (t > horizon) break;
        if (rng.uniform() * bound < lambda(t)) events.push_back(t);
    }
    return static_cast<int>(events.size());
}

std::vector<double> rescaled_gaps(const std::vector<double>& events, int stage, double kappa) {
    std::vector<double> gaps;
    double prev = 0.0;
    for (double t : events) {
        gaps.push_back(compensator(prev, t, events, -1.0, stage, kappa));
        prev = t;
    }
    return gaps;
}

double mean_events(double d, double kappa, int runs, std::uint64_t seed) {
    const auto traj = frozen_trajectory(d, 60);
    HawkesConfig cfg;
    cfg.kappa = kappa;
    Rng rng(seed);
    double total = 0.0;
    for (int i = 0; i < runs; ++i) total += static_cast<double>(sample_event_times(traj, cfg, rng).size());
    return total / runs;
}

}  // namespace

TEST(Staging, Examples) {
    EXPECT_EQ(stage_of_diameter(3.5), 1);
    EXPECT_EQ(stage_of_diameter(3.0), 0);
    EXPECT_EQ(stage_of_diameter(12.0), 3);
    EXPECT_EQ(stage_of_diameter(0.0), 0);
    EXPECT_EQ(stage_of_diameter(4.0), 1);
    EXPECT_EQ(stage_of_diameter(4.5), 2);
    EXPECT_EQ(stage_of_diameter(5.0), 2);
    EXPECT_EQ(stage_of_diameter(5.01), 3);
    EXPECT_THROW(stage_of_diameter(-0.1), ArgumentError);
}

TEST(Intensity, Examples) {
    EXPECT_DOUBLE_EQ(intensity_at(3.0, {}, 0.0, 2, 10.0), 1.0);
    for (int stage = 0; stage < kNumStages; ++stage) {
        EXPECT_DOUBLE_EQ(intensity_at(3.0, {}, 0.0, stage, 1.0), 0.01);
    }
    const std::vector<double> ev{2.0 - 1e-9};
    EXPECT_NEAR(intensity_at(2.0, ev, 0.0, 0, 1.0), 1.01, 1e-8);
}

TEST(Intensity, EventsBeforeStageChangeIgnored) {
    const std::vector<double> ev{1.0, 2.0};
    EXPECT_DOUBLE_EQ(intensity_at(3.0, ev, 1.5, 0, 1.0), 0.01 + std::exp(-2.0));
    EXPECT_DOUBLE_EQ(intensity_at(3.0, ev, 2.0, 0, 1.0), 0.01);
}

TEST(Compensator, MatchesNumericalIntegral) {
    const std::vector<double> ev{0.3, 0.9, 1.0};
    const double a = 1.0, b = 2.7;
    const int n = 20000;
    double s = 0.0;
    for (int i = 0; i <= n; ++i) {
        const double t = a + (b - a) * i / n;
        const double w = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
        double l = 0.01 * 5.0;
        for (double tm : ev) l += std::exp(-2.0 * (t - tm));
        s += w * l;
    }
    s *= (b - a) / n / 3.0;
    EXPECT_NEAR(compensator(a, b, ev, -1.0, 1, 5.0), s, 1e-10);
}

TEST(HawkesConfig, RejectsKappaBelowOne) {
    HawkesConfig cfg;
    cfg.kappa = 0.5;
    EXPECT_THROW(cfg.validate(), ArgumentError);
    cfg.kappa = 1.0;
    EXPECT_NO_THROW(cfg.validate());
    cfg.policy = KappaPolicy::treatment_conditioned;
    cfg.kappa_untreated = 0.9;
    EXPECT_THROW(cfg.validate(), ArgumentError);
}

TEST(SampleEvents, MeanCountMatchesClosedForm) {
    // Stage-0 base rate 0.01 with unit exponential kernel of decay 2:
    // E[N(T)] = mu (2T - (1 - exp(-T))).
    const double mu = 0.01, T = 60.0;
    const double expected = mu * (2.0 * T - (1.0 - std::exp(-T)));
    EXPECT_NEAR(expected, 1.19, 1e-12);
    EXPECT_NEAR(mean_events(2.0, 1.0, 200000, 7), expected, 0.02 * expected);
}

TEST(SampleEvents, MeanCountMatchesBruteForceThinning) {
    const int runs = 200000;
    Rng rng(8);
    double brute = 0.0;
    for (int i = 0; i < runs; ++i) brute += brute_force_count(0.01, 60.0, rng);
    brute /= runs;
    EXPECT_NEAR(mean_events(2.0, 1.0, runs, 9), brute, 0.02 * brute);
}

TEST(SampleEvents, TimeRescalingIsExponential) {
    const auto traj = frozen_trajectory(4.5, 60);  // stage 2
    HawkesConfig cfg;
    cfg.kappa = 10.0;
    Rng rng(21);
    std::vector<double> gaps;
    for (int i = 0; i < 200; ++i) {
        const auto ev = sample_event_times(traj, cfg, rng);
        const auto g = rescaled_gaps(ev, 2, 10.0);
        gaps.insert(gaps.end(), g.begin(), g.end());
    }
    const auto ks = stats::ks_exponential(gaps);
    EXPECT_GT(ks.p_value, 0.01) << "D = " << ks.statistic << " n = " << ks.n;
}

TEST(SampleEvents, WithoutExcitationIsPoisson) {
    // Rate 1/day keeps the censored final gap negligible.
    const auto traj = frozen_trajectory(4.5, 60);  // stage 2
    HawkesConfig cfg;
    cfg.kappa = 10.0;
    cfg.self_excitation = false;
    Rng rng(22);
    std::vector<double> gaps;
    for (int i = 0; i < 200; ++i) {
        double prev = 0.0;
        for (double t : sample_event_times(traj, cfg, rng)) {
            gaps.push_back(t - prev);
            prev = t;
        }
    }
    EXPECT_GT(stats::ks_exponential(gaps).p_value, 0.01);
}

TEST(SampleEvents, MeanCountIncreasesWithKappa) {
    const double m1 = mean_events(3.5, 1.0, 5000, 31);
    const double m5 = mean_events(3.5, 5.0, 5000, 31);
    const double m10 = mean_events(3.5, 10.0, 5000, 31);
    EXPECT_LT(m1, m5);
    EXPECT_LT(m5, m10);
}

TEST(SampleEvents, TerminatesForLargestIntensity) {
    const auto traj = frozen_trajectory(12.0, 60);  // stage 3
    HawkesConfig cfg;
    cfg.kappa = 10.0;
    Rng rng(41);
    for (int i = 0; i < 20; ++i) {
        const auto ev = sample_event_times(traj, cfg, rng);
        EXPECT_GT(ev.size(), 0u);
        EXPECT_LT(ev.size(), 10000u);
        for (double t : ev) {
            EXPECT_GT(t, 0.0);
            EXPECT_LE(t, 60.0);
        }
    }
}

TEST(SampleEvents, TreatedDaysObservedMoreOften) {
    HawkesConfig cfg;
    cfg.policy = KappaPolicy::treatment_conditioned;
    cfg.kappa_treated = 10.0;
    cfg.kappa_untreated = 1.0;
    double ev_treated = 0, ev_untreated = 0, days_treated = 0, days_untreated = 0;
    for (int i = 0; i < 500; ++i) {
        Rng rng(substream_seed(51, i));
        const auto traj = simulate_factual(sample_patient(rng), 4, 4, 60, rng);
        for (int d = 0; d < 60; ++d) {
            const auto a = traj.treatment_at(d);
            ((a.chemo || a.radio) ? days_treated : days_untreated) += 1;
        }
        for (double t : sample_event_times(traj, cfg, rng)) {
            const auto a = traj.treatment_at(t);
            ((a.chemo || a.radio) ? ev_treated : ev_untreated) += 1;
        }
    }
    EXPECT_GT(ev_treated / days_treated, ev_untreated / days_untreated);
}

TEST(SampleObservations, RecordsMatchDenseGrid) {
    HawkesConfig cfg;
    cfg.kappa = 10.0;
    for (int i = 0; i < 100; ++i) {
        Rng rng(substream_seed(61, i));
        const auto traj = simulate_factual(sample_patient(rng), 6, 6, 60, rng);
        const auto series = sample_observations(traj, cfg, rng, i);
        ASSERT_GE(series.size(), 1u);
        EXPECT_EQ(series.patient_id, i);
        EXPECT_EQ(series.records.front().t, 0.0);
        for (std::size_t k = 0; k < series.size(); ++k) {
            const auto& r = series.records[k];
            if (k > 0) {
                EXPECT_GT(r.t, series.records[k - 1].t);
                for (int c = 0; c < kCountChannels; ++c) {
                    EXPECT_GE(r.c[c], series.records[k - 1].c[c]);
                }
            }
            const double lo = std::floor(r.t);
            const auto j = static_cast<std::size_t>(lo);
            const double w = r.t - lo;
            const double v = j + 1 < traj.grid.size()
                                 ? traj.grid[j].v + w * (traj.grid[j + 1].v - traj.grid[j].v)
                                 : traj.grid[j].v;
            EXPECT_NEAR(r.y, v, 1e-12 * v);
            EXPECT_NEAR(r.x[0], v, 1e-12 * v);
            EXPECT_EQ(r.x[1], traj.stages[j]);
            EXPECT_EQ(r.a[0], traj.grid[j].a_chemo);
            EXPECT_EQ(r.a[1], traj.grid[j].a_radio);
            for (int g = 0; g < 3; ++g) EXPECT_EQ(r.x[2 + g], traj.params.group == g + 1 ? 1.0 : 0.0);
            for (int c = 0; c < kCountChannels; ++c) EXPECT_EQ(r.c[c], static_cast<int>(k) + 1);
        }
    }
}

TEST(SampleObservations, Deterministic) {
    HawkesConfig cfg;
    cfg.kappa = 5.0;
    Rng a(71), b(71);
    const auto ta = simulate_factual(sample_patient(a), 4, 4, 60, a);
    const auto tb = simulate_factual(sample_patient(b), 4, 4, 60, b);
    EXPECT_EQ(sample_observations(ta, cfg, a).records, sample_observations(tb, cfg, b).records);
}
