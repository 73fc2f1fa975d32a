#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "latf/data.hpp"
#include "latf/params.hpp"
#include "latf/rng.hpp"
#include "latf/tensor.hpp"

namespace latf {

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 0;
  int d_ffn = 0;
  int n_head = 1;
  int n_causal_layers = 0;
  int n_lookahead_layers = 0;
  double dropout_p = 0.0;
  int max_len = 128;

  int total_layers() const { return n_causal_layers + n_lookahead_layers; }
  int head_dim() const { return d_model / n_head; }
  void validate() const;

  void to_manifest(Manifest& m, const std::string& prefix = "") const;
  static ModelConfig from_manifest(const Manifest& m,
                                   const std::string& prefix = "");
};

// p(s): interleaved sin/cos at wavelengths 10000^(2i/D); identical for
// every rollout copy of a position.
std::vector<double> positional_encoding(int position, int d_model);
std::vector<double> positional_table(int max_len, int d_model);

// Parameter tensors plus the (constant) positional table.
struct Model {
  ModelConfig cfg;
  ParamStore params;
  std::vector<double> pos_table;

  Model() = default;
  Model(ModelConfig cfg_, ParamStore params_);
  // Fresh model, weights uniform in +-1/sqrt(d_model), norm gains 1.
  static Model init(const ModelConfig& cfg, uint64_t seed);
};

// Leaf-tensor view of a Model's parameters for one computation graph.
struct BoundModel {
  const ModelConfig* cfg = nullptr;
  const std::vector<double>* pos_table = nullptr;
  struct Layer {
    Tensor wq, wk, wv, wo;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  };
  Tensor tok_emb;
  std::vector<Layer> layers;
  Tensor lnf_g, lnf_b;
  std::vector<Tensor> leaves;  // aligned with params.entries()
};

BoundModel bind_model(const Model& m, bool requires_grad);

// One batch of independent sequences flattened into [rows x d]. Layers
// below n_causal_layers use lower_spans' masks, the rest upper_spans'.
struct BatchInput {
  std::vector<int> ids, positions;
  std::vector<AttnSpan> lower_spans, upper_spans;

  int rows() const { return static_cast<int>(ids.size()); }
  // Appends one sequence; upper_mask defaults to full attention.
  void add_sequence(const std::vector<int>& seq_ids,
                    const std::vector<int>& seq_positions, MaskPtr lower_mask,
                    MaskPtr upper_mask = nullptr);
};

// Full encoder stack: embeddings, all layers, final normalization.
// When train is set, dropout draws from rng.
Tensor encode(const BoundModel& m, const BatchInput& in, bool train = false,
              Rng* rng = nullptr);
// Stack truncated after `n_layers` layers, without final normalization
// (the hand-off point between the causal and bidirectional halves).
Tensor encode_layers(const BoundModel& m, const BatchInput& in, int n_layers,
                     bool train = false, Rng* rng = nullptr);

// One encoder layer applied to [rows x d] embeddings under the given
// attention spans.
Tensor apply_layer(const BoundModel& m, int layer_idx, const Tensor& x,
                   const std::vector<AttnSpan>& spans, bool train = false,
                   Rng* rng = nullptr);

// Single layer applied to given embeddings (single sequence, causal
// mask); for probing and tests.
Tensor causal_layer(const BoundModel& m, int layer_idx, const Tensor& x);

// e(0) for one sequence at positions 0..len-1.
Tensor embed_tokens(const BoundModel& m, const TokenSequence& ids);

// Logits o . e(L') at the final position of the prefix.
std::vector<double> next_token_logits(const Model& m, const TokenSequence& prefix);

// Seq2seq loss on z = source # target $: sum over the target-and-
// terminator predictions of -log p. Differentiable when `bound` was
// bound with requires_grad.
Tensor seq2seq_loss(const BoundModel& bound, const Example& ex,
                    bool train = false, Rng* rng = nullptr);
double seq2seq_loss_value(const Model& m, const Example& ex);

// ---------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------

// Token-at-a-time decoder over a causal-only model. Produces logits that
// match next_token_logits bit-for-bit (the row kernels are shared).
class Decoder {
 public:
  explicit Decoder(const Model& m);
  void push(int token_id);
  int length() const { return len_; }
  const std::vector<double>& logits() const;  // after at least one push
  Decoder fork() const { return *this; }

 private:
  const Model* m_;
  int len_ = 0;
  // per layer: cached key/value rows, [len x d] grown as tokens arrive
  std::vector<std::vector<double>> k_cache_, v_cache_;
  std::vector<double> logits_;
  std::vector<double> scratch_;
  bool has_logits_ = false;
};

// q_tau(. | prefix) proportional to q^(1/tau); tau == 0 is the greedy
// limit with ties broken toward the lowest token id.
int sample_token(const std::vector<double>& logits, double tau, Rng& rng);
std::vector<double> temper_distribution(const std::vector<double>& logits,
                                        double tau);

// Ancestral sampling of exactly n_tokens continuation tokens. '$' is an
// ordinary token here; sampling always runs to length n_tokens.
TokenSequence sample_continuation(const Model& m, const TokenSequence& prefix,
                                  int n_tokens, double tau, Rng& rng);

}  // namespace latf
