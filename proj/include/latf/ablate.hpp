#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "latf/harness.hpp"

namespace latf {

struct AblationGrid {
  std::vector<double> taus{1.0};
  std::vector<int> rollout_counts{5};
  std::vector<int> rollout_lens{5};
};

struct AblationRow {
  double tau = 0.0;
  int m_rollouts = 0;
  int rollout_len = 0;
  MetricsReport report;
};

// Evaluation-only sweep of a trained lookahead model over the grid; no
// retraining. Each grid point reuses the same evaluation seed, so the
// point matching the bundle's training settings reproduces a plain
// evaluate() bit-for-bit. When `rollout_log` is given, the rollout sets
// drawn for the first example of the dataset are appended per grid
// point ("t<TAB>m<TAB>tokens...").
std::vector<AblationRow> ablation_sweep(const ModelBundle& bundle,
                                        const Dataset& ds,
                                        const AblationGrid& grid, uint64_t seed,
                                        std::ostream* rollout_log = nullptr);

}  // namespace latf
