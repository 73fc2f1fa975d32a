#include "latf/stats.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace latf {

std::pair<double, double> bootstrap_ci(const std::vector<double>& per_unit,
                                       int n_resamples, double level, Rng& rng) {
  if (per_unit.empty())
    throw std::invalid_argument("bootstrap_ci: no units");
  if (n_resamples < 1)
    throw std::invalid_argument("bootstrap_ci: need at least one resample");
  if (level <= 0.0 || level >= 1.0)
    throw std::invalid_argument("bootstrap_ci: level must lie in (0,1)");
  size_t n = per_unit.size();
  std::vector<double> stats(static_cast<size_t>(n_resamples));
  for (int r = 0; r < n_resamples; ++r) {
    double sum = 0.0;
    for (size_t i = 0; i < n; ++i) sum += per_unit[rng.below(n)];
    stats[static_cast<size_t>(r)] = sum / static_cast<double>(n);
  }
  std::sort(stats.begin(), stats.end());
  double alpha = (1.0 - level) / 2.0;
  auto at_quantile = [&](double q) {
    double pos = q * static_cast<double>(n_resamples - 1);
    size_t idx = static_cast<size_t>(std::llround(pos));
    idx = std::min(idx, stats.size() - 1);
    return stats[idx];
  };
  return {at_quantile(alpha), at_quantile(1.0 - alpha)};
}

double paired_permutation_test(const std::vector<double>& metric_a,
                               const std::vector<double>& metric_b,
                               uint64_t mc_seed) {
  if (metric_a.size() != metric_b.size())
    throw std::invalid_argument("paired_permutation_test: length mismatch (" +
                                std::to_string(metric_a.size()) + " vs " +
                                std::to_string(metric_b.size()) + ")");
  if (metric_a.empty())
    throw std::invalid_argument("paired_permutation_test: no pairs");
  size_t n = metric_a.size();
  std::vector<double> diff(n);
  for (size_t i = 0; i < n; ++i) diff[i] = metric_a[i] - metric_b[i];
  double observed = 0.0;
  for (double d : diff) observed += d;
  double obs_abs = std::abs(observed);  // |mean| comparison via |sum|

  if (n <= static_cast<size_t>(kExactPermutationLimit)) {
    uint64_t patterns = uint64_t{1} << n;
    uint64_t hits = 0;
    for (uint64_t mask = 0; mask < patterns; ++mask) {
      double s = 0.0;
      for (size_t i = 0; i < n; ++i)
        s += (mask >> i) & 1 ? -diff[i] : diff[i];
      if (std::abs(s) >= obs_abs) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(patterns);
  }

  Rng rng(derive_seed(mc_seed, {tag("perm_test")}));
  uint64_t hits = 0;
  for (int r = 0; r < kMonteCarloFlips; ++r) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i)
      s += rng.below(2) ? -diff[i] : diff[i];
    if (std::abs(s) >= obs_abs) ++hits;
  }
  return static_cast<double>(hits + 1) / static_cast<double>(kMonteCarloFlips + 1);
}

}  // namespace latf
