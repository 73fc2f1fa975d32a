#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "latf/rng.hpp"

namespace latf {

namespace detail {

struct Node {
  std::vector<int> shape;
  std::shared_ptr<std::vector<double>> data;
  std::vector<double> grad;  // allocated on first use, same size as data
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;  // grad-requiring inputs
  std::function<void(Node&)> backward_fn;      // null for leaves

  int64_t numel() const { return static_cast<int64_t>(data->size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data->size(), 0.0);
  }
};

}  // namespace detail

std::string shape_str(const std::vector<int>& shape);

// Value handle into a reverse-mode computation graph. Copies are cheap
// and share the underlying buffer. Data is treated as immutable once an
// op has produced it; leaves may alias external storage (parameters).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value,
                     bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  // Leaf sharing external storage (no copy); used to bind parameters.
  static Tensor share(std::vector<int> shape,
                      std::shared_ptr<std::vector<double>> data,
                      bool requires_grad);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return node_->numel(); }
  double* data() { return node_->data->data(); }
  const double* data() const { return node_->data->data(); }
  const std::vector<double>& vec() const { return *node_->data; }
  bool requires_grad() const { return node_->requires_grad; }

  // scalar convenience
  double value() const;

  // Accumulated gradient; throws if no backward pass has populated it.
  const std::vector<double>& grad() const;
  void zero_grad() { node_->grad.clear(); }

  // Reverse-mode accumulation from this scalar; `seed` weights the pass.
  void backward(double seed = 1.0) const;

  std::shared_ptr<detail::Node> node_;  // ops reach in directly
};

// ---------------------------------------------------------------------
// attention masks / layout
// ---------------------------------------------------------------------

// Row-major allowed matrix for one sequence: allowed[q * size + k] != 0
// iff query position q may attend to key position k.
struct AttnMask {
  int size = 0;
  std::vector<uint8_t> allowed;
};

using MaskPtr = std::shared_ptr<const AttnMask>;

MaskPtr causal_mask(int size);
// Shared-prefix layout: `prefix_len` prefix tokens followed by
// `n_rollouts` blocks of `rollout_len` tokens each. Prefix rows are
// causal; rollout rows see the whole prefix plus their own block
// causally, never a sibling block.
MaskPtr flat_causal_mask(int prefix_len, int n_rollouts, int rollout_len);

// One sequence inside a batched [rows x d] tensor. mask == nullptr means
// full bidirectional attention.
struct AttnSpan {
  int offset = 0;
  int len = 0;
  MaskPtr mask;
};

// ---------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// y = x . w^T with x:[r x din], w:[dout x din]. The projection form used
// throughout the model code.
Tensor linear(const Tensor& x, const Tensor& w);
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_rowvec(const Tensor& x, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor sum(const Tensor& x);
Tensor gather_rows(const Tensor& x, std::vector<int> rows);

// out[i,:] = table[ids[i],:] + pos_table[positions[i] * d .. ]
Tensor embed_rows(const Tensor& table, const std::vector<int>& ids,
                  const std::vector<double>& pos_table, int max_len,
                  const std::vector<int>& positions);

// Row-wise masked softmax; mask entries are excluded before
// exponentiation and are exactly 0.0 in the output. A fully masked row
// is an error. mask.size() must equal logits.numel(); a 1-D tensor is
// treated as a single row.
Tensor masked_softmax(const Tensor& logits, const std::vector<uint8_t>& mask);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

// squared-ReLU activation, elementwise
Tensor activation(const Tensor& x);

Tensor log_softmax(const Tensor& x);

// -log p[target] of a log-distribution row (shape [n] or [1 x n]).
Tensor cross_entropy(const Tensor& log_probs, int target);
// -sum_i target[i] * log_probs[i]; target must sum to 1.
Tensor cross_entropy(const Tensor& log_probs,
                     const std::vector<double>& target);

// Fused row losses over raw logits [s x v]: per-row log-softmax then
// cross-entropy, summed to a scalar. Targets are hard ids or soft
// distribution rows (row-major s x v).
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets);
Tensor cross_entropy_rows(const Tensor& logits,
                          const std::vector<double>& soft_targets);

// Inverted-dropout; draws one keep decision per element from `rng`.
// p == 0 returns the input unchanged.
Tensor dropout(const Tensor& x, double p, Rng& rng);

// Fused multi-head attention over a batch of independent sequences in
// q/k/v:[rows x d]. Head h occupies columns [h*dh, (h+1)*dh). For each
// sequence and head: scores = scale * q k^T, masked softmax rows, then
// the weighted value sum. Attention-weight dropout applies when
// dropout_p > 0 and rng != nullptr, drawn row-by-row over allowed
// entries.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const std::vector<AttnSpan>& spans, int n_head, double scale,
                 double dropout_p, Rng* rng);

constexpr double kLayerNormEps = 1e-5;

}  // namespace latf
