#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "latf/model.hpp"

namespace latf {

struct LookaheadConfig {
  int n_rollouts = 5;    // M
  int rollout_len = 5;   // N
  double tau = 1.0;      // proposal temperature
  bool resample_per_step = true;  // freeze rollouts only when debugging

  void validate() const;
  void to_manifest(Manifest& m, const std::string& prefix = "") const;
  static LookaheadConfig from_manifest(const Manifest& m,
                                       const std::string& prefix = "");
};

// The sampled continuations attended to for one prediction step.
struct RolloutSet {
  int prefix_len = 0;
  std::vector<TokenSequence> strings;  // M rows of N token ids
  uint64_t proposal_seed = 0;
};

// M iid continuations of the prefix drawn from the proposal model.
RolloutSet sample_rollout_set(const Model& proposal, const TokenSequence& prefix,
                              const LookaheadConfig& cfg, uint64_t seed);

// Flattened layout over prefix + M rollout blocks: the prefix is stored
// once; rollout token i of every block carries position prefix_len + i.
struct FlatLayout {
  std::vector<int> ids;
  std::vector<int> positions;
  int prefix_len = 0;
  int n_rollouts = 0;
  int rollout_len = 0;

  int size() const { return static_cast<int>(ids.size()); }
};

FlatLayout build_flat_layout(const TokenSequence& prefix, const RolloutSet& rollouts);

// Appends the flattened sequence to a batch: shared-prefix causal mask
// for the lower layers, full attention for the lookahead layers.
void add_flat_sequence(BatchInput& batch, const FlatLayout& flat,
                       MaskPtr cached_mask = nullptr);

// Layer-L embeddings of the flattened layout (the causal half only).
// Bit-identical to encoding each concatenated string prefix+rollout_m
// separately and reading off the blocks.
Tensor encode_shared_prefix_and_rollouts(const BoundModel& m,
                                         const TokenSequence& prefix,
                                         const RolloutSet& rollouts);

// One bidirectional layer applied to flattened embeddings.
Tensor bidirectional_layer(const BoundModel& m, int layer_idx, const Tensor& x);

// p(. | prefix, S_t): softmax of the output head at the last prefix
// position after the full stack. A stochastic estimate; distinct
// RolloutSets give distinct distributions.
std::vector<double> lookahead_next_token_distribution(const Model& m,
                                                      const TokenSequence& prefix,
                                                      const RolloutSet& rollouts);

// Warm start: embeddings, the L causal layers and the final norm are
// copied from the base model; the new layers get fresh attention and
// hidden weights but zero output projections, so the extended model is
// exactly the base model through its residual paths.
Model init_from_base(const Model& base, const ModelConfig& cfg, uint64_t seed);

// sum over positions t = start..len-1 of log p(x_t | x_{0:t}, S_t), one
// fresh RolloutSet per position derived from `seed`. The first token is
// never scored (there is no prediction embedding for an empty prefix).
double sequence_log_prob(const Model& m, const Model& proposal,
                         const TokenSequence& sequence, const LookaheadConfig& cfg,
                         uint64_t seed, int start = 1);

// Debug dump: "t<TAB>m<TAB>tok tok ..." per rollout string.
void dump_rollouts(std::ostream& os, const RolloutSet& rollouts);

}  // namespace latf
