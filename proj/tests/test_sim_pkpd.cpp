#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "tecde/errors.hpp"
#include "tecde/sim_pkpd.hpp"
#include "tecde/staging.hpp"
#include "tecde/stats.hpp"

using namespace tecde;
using namespace tecde::sim;

namespace {

// Mean of N(mu, sd) truncated to [0, inf).
double truncated_normal_mean(double mu, double sd) {
    const double a = -mu / sd;
    const double phi = std::exp(-0.5 * a * a) / std::sqrt(2.0 * M_PI);
    const double tail = 0.5 * std::erfc(a / std::sqrt(2.0));
    return mu + sd * phi / tail;
}

double treatment_correlation(double gamma, std::uint64_t seed, int patients) {
    std::vector<double> d, a;
    for (int i = 0; i < patients; ++i) {
        Rng rng(substream_seed(seed, i));
        const auto p = sample_patient(rng);
        const auto traj = simulate_factual(p, gamma, gamma, 60, rng);
        for (int t = 0; t <= 60; ++t) {
            d.push_back(traj.diameters[t]);
            a.push_back(traj.grid[t].a_chemo);
        }
    }
    return stats::pearson(d, a);
}

}  // namespace

TEST(SamplePatient, CarryingCapacityIsConstant) {
    Rng rng(3);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_patient(rng, 2).K, 30.0);
}

TEST(SamplePatient, RadioRatioFixed) {
    Rng rng(4);
    for (int i = 0; i < 1000; ++i) {
        const auto p = sample_patient(rng);
        EXPECT_EQ(p.beta_r, p.alpha_r / 10.0);
        EXPECT_DOUBLE_EQ(p.beta_r * 10.0, p.alpha_r);
    }
}

TEST(SamplePatient, ParametersNonNegativeAndVolumeBounded) {
    Rng rng(5);
    for (int i = 0; i < 5000; ++i) {
        const auto p = sample_patient(rng);
        EXPECT_GE(p.rho, 0.0);
        EXPECT_GE(p.beta_c, 0.0);
        EXPECT_GE(p.alpha_r, 0.0);
        EXPECT_GT(p.v0, 0.0);
        EXPECT_LE(p.v0, kMaxVolume);
        EXPECT_GE(p.group, 1);
        EXPECT_LE(p.group, 3);
    }
}

TEST(SamplePatient, GroupOneAlphaMeanMatchesTruncatedNormal) {
    Rng rng(11);
    const int n = 100000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double a = sample_patient(rng, 1).alpha_r;
        s += a;
        s2 += a * a;
    }
    const double m = s / n;
    const double se = std::sqrt((s2 / n - m * m) / n);
    EXPECT_NEAR(m, truncated_normal_mean(1.1 * 0.0398, 0.168), 3.0 * se);
}

TEST(SamplePatient, GroupThreeScalesChemoMean) {
    Rng rng(12);
    const int n = 20000;
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += sample_patient(rng, 3).beta_c;
    EXPECT_NEAR(s / n, 1.1 * 0.028, 4.0 * 0.0007 / std::sqrt(n));
}

TEST(SamplePatient, RejectsInvalidGroup) {
    Rng rng(1);
    EXPECT_THROW(sample_patient(rng, 0), ArgumentError);
    EXPECT_THROW(sample_patient(rng, 4), ArgumentError);
}

TEST(TreatmentProbs, CenterGivesHalf) {
    for (double g : {0.0, 2.0, 10.0}) {
        const auto p = treatment_probs(6.5, g, g);
        EXPECT_EQ(p[0], 0.5);
        EXPECT_EQ(p[1], 0.5);
    }
}

TEST(TreatmentProbs, ZeroGammaGivesHalf) {
    for (double d : {0.0, 3.0, 13.0}) EXPECT_EQ(treatment_probs(d, 0.0, 0.0)[0], 0.5);
}

TEST(TreatmentProbs, MaximalDiameterStrongConfounding) {
    // 10/13 * (13 - 6.5) = 5; sigmoid(5) = 0.99330714907571527
    const auto p = treatment_probs(13.0, 10.0, 10.0);
    EXPECT_NEAR(p[0], 0.99330714907571527, 1e-15);
    EXPECT_NEAR(p[1], 0.99330714907571527, 1e-15);
}

TEST(StepDynamics, UntreatedGrowsBelowCapacity) {
    PatientParams p{0.01, 30.0, 0.028, 0.04, 0.004, 2, 1.0};
    SimState s{0, 5.0, 0.0, 0, 0};
    EXPECT_GT(step_dynamics(s, p, 0.0).v, s.v);
}

TEST(StepDynamics, ChemoConcentrationRecurrence) {
    PatientParams p{0.01, 30.0, 0.028, 0.04, 0.004, 2, 1.0};
    SimState s{0, 5.0, 5.0, 1, 0};
    EXPECT_EQ(step_dynamics(s, p, 0.0).c, 7.5);
}

TEST(StepDynamics, CapacityIsFixedPoint) {
    PatientParams p{0.01, 30.0, 0.028, 0.04, 0.004, 2, 1.0};
    SimState s{0, 30.0, 0.0, 0, 0};
    EXPECT_EQ(step_dynamics(s, p, 0.0).v, 30.0);
}

TEST(StepDynamics, ClampsToBounds) {
    PatientParams p{0.0, 30.0, 10.0, 0.04, 0.004, 2, 1.0};
    SimState s{0, 5.0, 0.0, 1, 1};
    EXPECT_EQ(step_dynamics(s, p, 0.0).v, kMinVolume);
    SimState big{0, 1000.0, 0.0, 0, 0};
    EXPECT_EQ(step_dynamics(big, p, 1.0).v, kMaxVolume);
}

TEST(StepDynamics, RejectsNonPositiveVolume) {
    PatientParams p{0.01, 30.0, 0.028, 0.04, 0.004, 2, 1.0};
    EXPECT_THROW(step_dynamics(SimState{0, 0.0, 0.0, 0, 0}, p, 0.0), StateError);
}

TEST(SimulateFactual, ShapeAndDerivedSeries) {
    Rng rng(8);
    const auto p = sample_patient(rng);
    const auto traj = simulate_factual(p, 4, 4, 60, rng);
    ASSERT_EQ(traj.grid.size(), 61u);
    ASSERT_EQ(traj.noise.size(), 60u);
    for (std::size_t i = 0; i < traj.grid.size(); ++i) {
        EXPECT_NEAR(traj.diameters[i], std::cbrt(6.0 * traj.grid[i].v / M_PI), 1e-12);
        EXPECT_EQ(traj.stages[i], stage_of_diameter(traj.diameters[i]));
        EXPECT_GE(traj.grid[i].c, 0.0);
    }
}

TEST(SimulateFactual, ZeroGammaTreatsHalfTheTime) {
    int treated = 0, days = 0;
    for (int i = 0; days < 10000; ++i) {
        Rng rng(substream_seed(21, i));
        const auto traj = simulate_factual(sample_patient(rng), 0, 0, 60, rng);
        for (const auto& s : traj.grid) {
            treated += s.a_chemo;
            ++days;
        }
    }
    const double sd = std::sqrt(0.25 / days);
    EXPECT_NEAR(static_cast<double>(treated) / days, 0.5, 3 * sd);
}

TEST(SimulateFactual, Deterministic) {
    Rng a(99), b(99);
    const auto pa = sample_patient(a);
    const auto pb = sample_patient(b);
    EXPECT_TRUE(simulate_factual(pa, 10, 10, 60, a) == simulate_factual(pb, 10, 10, 60, b));
}

TEST(SimulateFactual, VolumesStayClamped) {
    for (int i = 0; i < 300; ++i) {
        Rng rng(substream_seed(5, i));
        const auto traj = simulate_factual(sample_patient(rng), 10, 10, 60, rng);
        for (const auto& s : traj.grid) {
            EXPECT_GE(s.v, kMinVolume);
            EXPECT_LE(s.v, kMaxVolume);
        }
    }
}

// The curve flattens between 8 and 10, so adjacent settings are compared
// against the spread of independent replicates.
TEST(SimulateFactual, ConfoundingNondecreasingInGamma) {
    const int replicates = 5;
    std::vector<double> means, ses;
    for (double g : {2.0, 4.0, 6.0, 8.0, 10.0}) {
        std::vector<double> r;
        for (int k = 0; k < replicates; ++k) r.push_back(treatment_correlation(g, 100 + k, 500));
        const double m = stats::mean(r);
        double ss = 0.0;
        for (double x : r) ss += (x - m) * (x - m);
        means.push_back(m);
        ses.push_back(std::sqrt(ss / (replicates - 1) / replicates));
    }
    for (std::size_t i = 1; i < means.size(); ++i) {
        const double tol = 2.0 * std::hypot(ses[i], ses[i - 1]);
        EXPECT_GE(means[i], means[i - 1] - tol) << "step " << i;
    }
}

TEST(SimulateFactual, StrongConfoundingExceedsWeak) {
    for (std::uint64_t seed : {1, 2, 3}) {
        EXPECT_GT(treatment_correlation(10, seed, 500), treatment_correlation(2, seed, 500));
    }
}

TEST(SimulateCounterfactual, FactualPlanReplaysBitExactly) {
    for (int i = 0; i < 50; ++i) {
        Rng rng(substream_seed(31, i));
        const auto traj = simulate_factual(sample_patient(rng), 6, 6, 60, rng);
        const int branch = i % 60;
        TreatmentPlan plan;
        plan.start_day = branch;
        for (int d = branch; d <= 60; ++d) plan.steps.push_back({traj.grid[d].a_chemo, traj.grid[d].a_radio});
        const auto cf = simulate_counterfactual(traj, branch, plan);
        EXPECT_TRUE(cf == traj);
    }
}

TEST(SimulateCounterfactual, UntreatedNoiseFreeGrowsTowardCapacity) {
    for (int i = 0; i < 100; ++i) {
        Rng rng(substream_seed(41, i));
        PatientParams p = sample_patient(rng);
        if (p.rho <= 0.0) continue;
        auto traj = simulate_factual(p, 10, 10, 60, rng);
        std::fill(traj.noise.begin(), traj.noise.end(), 0.0);
        const auto cf = simulate_counterfactual(traj, 0, TreatmentPlan::sustained(0, 60, {}));
        for (int d = 1; d <= 60; ++d) {
            if (cf.grid[d - 1].v < p.K) {
                EXPECT_GT(cf.grid[d].v, cf.grid[d - 1].v) << "patient " << i << " day " << d;
                EXPECT_LE(cf.grid[d].v, p.K);
            }
        }
    }
}

TEST(SimulateCounterfactual, BothTreatmentsMinimizeVolume) {
    for (int i = 0; i < 30; ++i) {
        Rng rng(substream_seed(51, i));
        PatientParams p = sample_patient(rng);
        if (p.alpha_r <= 0.0 || p.beta_c <= 0.0) continue;
        const auto traj = simulate_factual(p, 4, 4, 60, rng);
        const int branch = 10;
        std::vector<double> finals;
        for (TreatmentPair a : {TreatmentPair{0, 0}, TreatmentPair{1, 0}, TreatmentPair{0, 1},
                                TreatmentPair{1, 1}}) {
            finals.push_back(
                simulate_counterfactual(traj, branch, TreatmentPlan::sustained(branch, branch + 5, a))
                    .grid.back()
                    .v);
        }
        EXPECT_LE(finals[3], finals[0]);
        EXPECT_LE(finals[3], finals[1]);
        EXPECT_LE(finals[3], finals[2]);
    }
}

TEST(SimulateCounterfactual, RejectsShortPlan) {
    Rng rng(61);
    const auto traj = simulate_factual(sample_patient(rng), 2, 2, 60, rng);
    EXPECT_THROW(simulate_counterfactual(traj, 10, TreatmentPlan::sustained(10, 12, {}), 20),
                 ArgumentError);
    EXPECT_THROW(simulate_counterfactual(traj, 61, TreatmentPlan::sustained(61, 62, {})),
                 ArgumentError);
}

TEST(Staging, VolumeDiameterRoundTrip) {
    for (int i = 1; i <= 1300; ++i) {
        const double d = i * 0.01;
        EXPECT_NEAR(diameter_of_volume(volume_of_diameter(d)), d, 1e-12 * d);
    }
}
