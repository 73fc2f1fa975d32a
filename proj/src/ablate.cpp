#include "latf/ablate.hpp"

#include <ostream>
#include <stdexcept>

namespace latf {

std::vector<AblationRow> ablation_sweep(const ModelBundle& bundle,
                                        const Dataset& ds,
                                        const AblationGrid& grid, uint64_t seed,
                                        std::ostream* rollout_log) {
  if (bundle.kind != ModelKind::lookahead)
    throw std::invalid_argument("ablation_sweep: checkpoint is not a lookahead model");
  if (grid.taus.empty() || grid.rollout_counts.empty() || grid.rollout_lens.empty())
    throw std::invalid_argument("ablation_sweep: empty grid");
  for (double tau : grid.taus)
    if (tau < 0.0)
      throw std::invalid_argument("ablation_sweep: negative temperature");

  std::vector<AblationRow> rows;
  for (double tau : grid.taus) {
    for (int m : grid.rollout_counts) {
      for (int n : grid.rollout_lens) {
        LookaheadConfig cfg = bundle.lookcfg;
        cfg.tau = tau;
        cfg.n_rollouts = m;
        cfg.rollout_len = n;
        cfg.validate();
        AblationRow row;
        row.tau = tau;
        row.m_rollouts = m;
        row.rollout_len = n;
        row.report = evaluate(bundle, ds, cfg, seed);
        if (rollout_log && !ds.examples.empty()) {
          // log what the model saw for the first example at this point
          const Example& ex = ds.examples.front();
          TokenSequence z = build_z(ex);
          uint64_t ex_seed =
              derive_seed(seed, {tag("ex"), example_content_hash(ex)});
          int first = prompt_rows(ex);
          int last_row = ex.has_soft_targets()
                             ? first + static_cast<int>(ex.target.size()) - 1
                             : static_cast<int>(z.size()) - 2;
          (*rollout_log) << "# tau=" << format_double(tau) << " M=" << m
                         << " N=" << n << "\n";
          for (int r = first; r <= last_row; ++r) {
            int t = r + 1;
            TokenSequence prefix(z.begin(), z.begin() + t);
            uint64_t pos_seed =
                derive_seed(ex_seed, {tag("pos"), static_cast<uint64_t>(t)});
            RolloutSet rollouts =
                sample_rollout_set(bundle.proposal_model(), prefix, cfg, pos_seed);
            dump_rollouts(*rollout_log, rollouts);
          }
        }
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

}  // namespace latf
