#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "latf/data.hpp"
#include "latf/lookahead.hpp"
#include "latf/model.hpp"

namespace latf {

enum class ModelKind { base, lookahead };

std::string kind_name(ModelKind k);
ModelKind kind_from_name(const std::string& name);

struct ExperimentConfig {
  std::string task = "sat";  // sat | infill | tsv
  ModelConfig model;
  LookaheadConfig lookahead;
  int epochs = 100;
  int lookahead_epochs = 0;  // 0 -> ceil(0.2 * epochs)
  double learning_rate = 0.02;
  int batch_size = 64;
  uint64_t seed = 0;

  int effective_lookahead_epochs() const {
    return lookahead_epochs > 0
               ? lookahead_epochs
               : static_cast<int>((epochs + 4) / 5);  // ceil(0.2 * epochs)
  }

  void save(const std::string& path) const;
  // vocab_size stays 0 until a dataset supplies it
  static ExperimentConfig load(const std::string& path);
};

// A checkpoint directory's contents: the model, and for lookahead kinds
// the frozen proposal model plus the rollout settings it was trained
// with.
struct ModelBundle {
  ModelKind kind = ModelKind::base;
  Model model;
  std::optional<Model> proposal;
  LookaheadConfig lookcfg;
  uint64_t vocab_hash = 0;

  const Model& proposal_model() const;
};

void save_bundle(const ModelBundle& bundle, const std::string& dir,
                 const Manifest& extra);
ModelBundle load_bundle(const std::string& dir);

struct ExampleScore {
  uint64_t hash = 0;
  double loss_sum = 0.0;
  int tokens = 0;
  int correct = 0;
};

struct MetricsReport {
  std::vector<ExampleScore> per_example;  // canonical (hash-sorted) order
  double loss_per_token = 0.0;
  double accuracy = 0.0;
  double ci_low = 0.0, ci_high = 0.0;  // bootstrap CI of the loss
  int64_t total_tokens = 0;
  double wall_seconds = 0.0;
};

// Pure function of (bundle, dataset, eval_cfg, seed): token-level mean
// loss over scored positions (soft cross-entropy when the example
// carries oracle conditionals, gold negative log-likelihood otherwise)
// and argmax accuracy (against the oracle argmax for soft targets, the
// gold token otherwise). Lookahead bundles draw one RolloutSet per
// position from a stream keyed by (seed, example content, position), so
// dataset order cannot change any reported number.
MetricsReport evaluate(const ModelBundle& bundle, const Dataset& ds,
                       const LookaheadConfig& eval_cfg, uint64_t seed);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double valid_accuracy = 0.0;
};

struct TrainResult {
  ModelBundle bundle;  // best-validation parameters
  std::vector<EpochLog> log;
  int best_epoch = 0;
  int64_t steps = 0;  // optimizer steps taken
};

// Adam training of the seq2seq loss (hard targets) or the soft
// cross-entropy (oracle-conditional targets). Lookahead training samples
// a fresh RolloutSet per scored position each epoch from the frozen
// proposal. Deterministic given cfg.seed.
TrainResult train_model(ModelKind kind, const ExperimentConfig& cfg,
                        const Datasets& data, const ModelBundle* base_bundle,
                        std::ostream* progress = nullptr);

// metrics csv (fixed column set)
std::string metrics_csv_header();
std::string metrics_csv_row(const std::string& run_id, const std::string& split,
                            const ModelBundle& bundle, int m_rollouts,
                            int rollout_len, double tau, uint64_t seed,
                            const MetricsReport& report);

std::string layers_string(const ModelBundle& bundle);

}  // namespace latf
