#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "latf/rng.hpp"

namespace latf {

// Percentile bootstrap over resampled unit means.
std::pair<double, double> bootstrap_ci(const std::vector<double>& per_unit,
                                       int n_resamples, double level, Rng& rng);

// Two-sided p-value for the mean paired difference under random sign
// flips: exact enumeration up to 20 pairs, 1e5 Monte Carlo flips beyond.
double paired_permutation_test(const std::vector<double>& metric_a,
                               const std::vector<double>& metric_b,
                               uint64_t mc_seed = 0);

constexpr int kExactPermutationLimit = 20;   // 2^20 sign patterns
constexpr int kMonteCarloFlips = 100000;
constexpr int kBootstrapResamples = 10000;

}  // namespace latf
