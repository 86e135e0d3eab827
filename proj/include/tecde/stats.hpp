#pragma once

#include <span>
#include <vector>

namespace tecde::stats {

double mean(std::span<const double> x);
double pearson(std::span<const double> x, std::span<const double> y);

// Kolmogorov limiting survival function Q(lambda) = 2 sum (-1)^{k-1} exp(-2 k^2 lambda^2).
double kolmogorov_q(double lambda);

struct KsResult {
    double statistic = 0.0;
    double p_value = 0.0;
    std::size_t n = 0;
};
// One-sample KS test against Exp(1), p-value with the Stephens small-sample
// correction (sqrt(n) + 0.12 + 0.11 / sqrt(n)) * D.
KsResult ks_exponential(std::vector<double> samples);

}  // namespace tecde::stats
