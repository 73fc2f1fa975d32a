#include "latf/lookahead.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

#include "latf/kernels.hpp"

namespace latf {

void LookaheadConfig::validate() const {
  if (n_rollouts < 1) throw std::invalid_argument("lookahead: M must be >= 1");
  if (rollout_len < 1) throw std::invalid_argument("lookahead: N must be >= 1");
  if (tau < 0.0) throw std::invalid_argument("lookahead: tau must be >= 0");
}

void LookaheadConfig::to_manifest(Manifest& m, const std::string& prefix) const {
  m.set(prefix + "rollouts", static_cast<int64_t>(n_rollouts));
  m.set(prefix + "rollout_len", static_cast<int64_t>(rollout_len));
  m.set(prefix + "tau", tau);
  m.set(prefix + "resample_per_step", static_cast<int64_t>(resample_per_step ? 1 : 0));
}

LookaheadConfig LookaheadConfig::from_manifest(const Manifest& m,
                                               const std::string& prefix) {
  LookaheadConfig c;
  c.n_rollouts = static_cast<int>(m.get_int(prefix + "rollouts"));
  c.rollout_len = static_cast<int>(m.get_int(prefix + "rollout_len"));
  c.tau = m.get_double(prefix + "tau");
  c.resample_per_step = m.get_int(prefix + "resample_per_step") != 0;
  c.validate();
  return c;
}

RolloutSet sample_rollout_set(const Model& proposal, const TokenSequence& prefix,
                              const LookaheadConfig& cfg, uint64_t seed) {
  cfg.validate();
  RolloutSet out;
  out.prefix_len = static_cast<int>(prefix.size());
  out.proposal_seed = seed;
  out.strings.reserve(static_cast<size_t>(cfg.n_rollouts));
  Rng rng(seed);
  Decoder primed(proposal);
  for (int id : prefix) primed.push(id);
  for (int m = 0; m < cfg.n_rollouts; ++m) {
    Decoder dec = primed.fork();
    TokenSequence s;
    s.reserve(static_cast<size_t>(cfg.rollout_len));
    for (int i = 0; i < cfg.rollout_len; ++i) {
      int id = sample_token(dec.logits(), cfg.tau, rng);
      s.push_back(id);
      if (i + 1 < cfg.rollout_len) dec.push(id);
    }
    out.strings.push_back(std::move(s));
  }
  return out;
}

FlatLayout build_flat_layout(const TokenSequence& prefix, const RolloutSet& rollouts) {
  if (rollouts.prefix_len != static_cast<int>(prefix.size()))
    throw std::invalid_argument("flat layout: rollouts were sampled for a prefix of length " +
                                std::to_string(rollouts.prefix_len) + ", got " +
                                std::to_string(prefix.size()));
  if (rollouts.strings.empty())
    throw std::invalid_argument("flat layout: empty rollout set");
  FlatLayout flat;
  flat.prefix_len = rollouts.prefix_len;
  flat.n_rollouts = static_cast<int>(rollouts.strings.size());
  flat.rollout_len = static_cast<int>(rollouts.strings.front().size());
  flat.ids = prefix;
  flat.positions.resize(prefix.size());
  for (size_t i = 0; i < prefix.size(); ++i) flat.positions[i] = static_cast<int>(i);
  for (const TokenSequence& s : rollouts.strings) {
    if (static_cast<int>(s.size()) != flat.rollout_len)
      throw std::invalid_argument("flat layout: ragged rollout set");
    for (int i = 0; i < flat.rollout_len; ++i) {
      flat.ids.push_back(s[static_cast<size_t>(i)]);
      flat.positions.push_back(flat.prefix_len + i);  // independent of m
    }
  }
  return flat;
}

void add_flat_sequence(BatchInput& batch, const FlatLayout& flat, MaskPtr cached_mask) {
  MaskPtr lower = cached_mask
                      ? std::move(cached_mask)
                      : flat_causal_mask(flat.prefix_len, flat.n_rollouts,
                                         flat.rollout_len);
  batch.add_sequence(flat.ids, flat.positions, std::move(lower), nullptr);
}

Tensor encode_shared_prefix_and_rollouts(const BoundModel& m,
                                         const TokenSequence& prefix,
                                         const RolloutSet& rollouts) {
  FlatLayout flat = build_flat_layout(prefix, rollouts);
  if (flat.size() > m.cfg->max_len)
    throw std::invalid_argument("flattened layout of " +
                                std::to_string(flat.size()) +
                                " tokens exceeds max_len " +
                                std::to_string(m.cfg->max_len));
  BatchInput in;
  add_flat_sequence(in, flat);
  return encode_layers(m, in, m.cfg->n_causal_layers);
}

Tensor bidirectional_layer(const BoundModel& m, int layer_idx, const Tensor& x) {
  if (layer_idx < m.cfg->n_causal_layers ||
      layer_idx >= m.cfg->total_layers())
    throw std::invalid_argument("bidirectional_layer: layer " +
                                std::to_string(layer_idx) +
                                " is not a lookahead layer");
  std::vector<AttnSpan> spans{{0, x.dim(0), nullptr}};
  return apply_layer(m, layer_idx, x, spans);
}

std::vector<double> lookahead_next_token_distribution(const Model& m,
                                                      const TokenSequence& prefix,
                                                      const RolloutSet& rollouts) {
  if (prefix.empty())
    throw std::invalid_argument("lookahead distribution: empty prefix");
  BoundModel b = bind_model(m, false);
  FlatLayout flat = build_flat_layout(prefix, rollouts);
  if (flat.size() > m.cfg.max_len)
    throw std::invalid_argument("flattened layout of " +
                                std::to_string(flat.size()) +
                                " tokens exceeds max_len " +
                                std::to_string(m.cfg.max_len));
  BatchInput in;
  add_flat_sequence(in, flat);
  Tensor x = encode(b, in);
  Tensor last = gather_rows(x, {flat.prefix_len - 1});
  Tensor logits = linear(last, b.tok_emb);
  std::vector<double> probs(logits.vec().size());
  kernels::softmax_masked(logits.data(), nullptr,
                          static_cast<int>(probs.size()), probs.data());
  return probs;
}

Model init_from_base(const Model& base, const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (base.cfg.n_lookahead_layers != 0)
    throw std::invalid_argument("init_from_base: base model must be causal-only");
  if (cfg.n_causal_layers != base.cfg.n_causal_layers ||
      cfg.vocab_size != base.cfg.vocab_size ||
      cfg.d_model != base.cfg.d_model || cfg.d_ffn != base.cfg.d_ffn ||
      cfg.n_head != base.cfg.n_head)
    throw std::invalid_argument(
        "init_from_base: lookahead config does not extend the base config");
  if (cfg.n_lookahead_layers < 1)
    throw std::invalid_argument("init_from_base: no lookahead layers requested");

  Model fresh = Model::init(cfg, seed);  // supplies the new random layers
  ParamStore ps;
  for (const auto& e : fresh.params.entries()) {
    if (base.params.has(e.name)) {
      const auto& src = base.params.at(e.name);  // copied layers, embeddings, final norm
      ps.add(e.name, src.shape, *src.data);
    } else if (e.name.find(".wo") != std::string::npos ||
               e.name.find(".ffn.w2") != std::string::npos ||
               e.name.find(".ffn.b2") != std::string::npos) {
      // zero output projections: the new layer starts as the identity
      ps.add_zeros(e.name, e.shape);
    } else {
      ps.add(e.name, e.shape, *e.data);
    }
  }
  return Model(cfg, std::move(ps));
}

double sequence_log_prob(const Model& m, const Model& proposal,
                         const TokenSequence& sequence, const LookaheadConfig& cfg,
                         uint64_t seed, int start) {
  cfg.validate();
  if (start < 1)
    throw std::invalid_argument("sequence_log_prob: start must be >= 1");
  double total = 0.0;
  for (int t = start; t < static_cast<int>(sequence.size()); ++t) {
    TokenSequence prefix(sequence.begin(), sequence.begin() + t);
    uint64_t step_seed = derive_seed(seed, {tag("rollout"), static_cast<uint64_t>(t)});
    RolloutSet rollouts = sample_rollout_set(proposal, prefix, cfg, step_seed);
    std::vector<double> dist = lookahead_next_token_distribution(m, prefix, rollouts);
    total += std::log(dist[static_cast<size_t>(sequence[static_cast<size_t>(t)])]);
  }
  return total;
}

void dump_rollouts(std::ostream& os, const RolloutSet& rollouts) {
  for (size_t m = 0; m < rollouts.strings.size(); ++m) {
    os << rollouts.prefix_len << "\t" << (m + 1) << "\t";
    const TokenSequence& s = rollouts.strings[m];
    for (size_t i = 0; i < s.size(); ++i) {
      if (i) os << " ";
      os << s[i];
    }
    os << "\n";
  }
}

}  // namespace latf
