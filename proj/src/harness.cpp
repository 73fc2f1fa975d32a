#include "latf/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "latf/adam.hpp"
#include "latf/kernels.hpp"
#include "latf/stats.hpp"

#include <limits>

namespace fs = std::filesystem;

namespace latf {

std::string kind_name(ModelKind k) {
  return k == ModelKind::base ? "base" : "lookahead";
}

ModelKind kind_from_name(const std::string& name) {
  if (name == "base") return ModelKind::base;
  if (name == "lookahead") return ModelKind::lookahead;
  throw std::invalid_argument("unknown model kind '" + name + "'");
}

const Model& ModelBundle::proposal_model() const {
  if (!proposal)
    throw std::logic_error("bundle has no proposal model");
  return *proposal;
}

// ---------------------------------------------------------------------
// experiment config file
// ---------------------------------------------------------------------

void ExperimentConfig::save(const std::string& path) const {
  Manifest m;
  m.set("task", task);
  m.set("d_model", static_cast<int64_t>(model.d_model));
  m.set("d_ffn", static_cast<int64_t>(model.d_ffn));
  m.set("n_head", static_cast<int64_t>(model.n_head));
  m.set("n_causal_layers", static_cast<int64_t>(model.n_causal_layers));
  m.set("n_lookahead_layers", static_cast<int64_t>(model.n_lookahead_layers));
  m.set("dropout_p", model.dropout_p);
  m.set("max_len", static_cast<int64_t>(model.max_len));
  m.set("epochs", static_cast<int64_t>(epochs));
  if (lookahead_epochs > 0)
    m.set("lookahead_epochs", static_cast<int64_t>(lookahead_epochs));
  m.set("learning_rate", learning_rate);
  m.set("batch_size", static_cast<int64_t>(batch_size));
  m.set("rollouts", static_cast<int64_t>(lookahead.n_rollouts));
  m.set("rollout_len", static_cast<int64_t>(lookahead.rollout_len));
  m.set("tau", lookahead.tau);
  if (seed) m.set("seed", seed);
  m.save(path);
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  Manifest m = Manifest::load(path);
  ExperimentConfig c;
  c.task = m.get_or("task", "sat");
  c.model.d_model = static_cast<int>(m.get_int("d_model"));
  c.model.d_ffn = static_cast<int>(m.get_int("d_ffn"));
  c.model.n_head = static_cast<int>(m.get_int("n_head"));
  c.model.n_causal_layers = static_cast<int>(m.get_int("n_causal_layers"));
  c.model.n_lookahead_layers =
      static_cast<int>(std::stoll(m.get_or("n_lookahead_layers", "0")));
  c.model.dropout_p = std::stod(m.get_or("dropout_p", "0.1"));
  c.model.max_len = static_cast<int>(std::stoll(m.get_or("max_len", "128")));
  c.epochs = static_cast<int>(m.get_int("epochs"));
  c.lookahead_epochs =
      static_cast<int>(std::stoll(m.get_or("lookahead_epochs", "0")));
  c.learning_rate = m.get_double("learning_rate");
  c.batch_size = static_cast<int>(std::stoll(m.get_or("batch_size", "64")));
  c.lookahead.n_rollouts = static_cast<int>(std::stoll(m.get_or("rollouts", "5")));
  c.lookahead.rollout_len =
      static_cast<int>(std::stoll(m.get_or("rollout_len", "5")));
  c.lookahead.tau = std::stod(m.get_or("tau", "1"));
  if (m.has("seed")) c.seed = m.get_u64("seed");
  return c;
}

// ---------------------------------------------------------------------
// bundle io
// ---------------------------------------------------------------------

void save_bundle(const ModelBundle& bundle, const std::string& dir,
                 const Manifest& extra) {
  fs::create_directories(dir);
  ParamStore combined = bundle.model.params.clone();
  if (bundle.kind == ModelKind::lookahead) {
    const Model& prop = bundle.proposal_model();
    for (const auto& e : prop.params.entries())
      combined.add("proposal." + e.name, e.shape, *e.data);
  }
  save_checkpoint(combined, (fs::path(dir) / "checkpoint.latf").string());

  Manifest m;
  m.set("format_version", static_cast<int64_t>(kCheckpointVersion));
  m.set("kind", kind_name(bundle.kind));
  bundle.model.cfg.to_manifest(m);
  if (bundle.kind == ModelKind::lookahead) {
    bundle.proposal_model().cfg.to_manifest(m, "proposal.");
    bundle.lookcfg.to_manifest(m);
  }
  m.set("vocab_hash", bundle.vocab_hash);
  for (const auto& [k, v] : extra.items()) m.set(k, v);
  m.save((fs::path(dir) / "manifest.txt").string());
}

ModelBundle load_bundle(const std::string& dir) {
  fs::path ckpt = fs::path(dir) / "checkpoint.latf";
  fs::path mani = fs::path(dir) / "manifest.txt";
  if (!fs::exists(ckpt))
    throw std::runtime_error("no checkpoint at " + ckpt.string());
  Manifest m = Manifest::load(mani.string());
  ParamStore combined = load_checkpoint(ckpt.string());

  ModelBundle out;
  out.kind = kind_from_name(m.get("kind"));
  out.vocab_hash = m.get_u64("vocab_hash");
  ModelConfig cfg = ModelConfig::from_manifest(m);
  ParamStore model_ps, prop_ps;
  for (const auto& e : combined.entries()) {
    if (e.name.rfind("proposal.", 0) == 0)
      prop_ps.add(e.name.substr(9), e.shape, *e.data);
    else
      model_ps.add(e.name, e.shape, *e.data);
  }
  out.model = Model(cfg, std::move(model_ps));
  if (out.kind == ModelKind::lookahead) {
    ModelConfig pcfg = ModelConfig::from_manifest(m, "proposal.");
    out.proposal = Model(pcfg, std::move(prop_ps));
    out.lookcfg = LookaheadConfig::from_manifest(m);
  }
  return out;
}

// ---------------------------------------------------------------------
// scoring
// ---------------------------------------------------------------------

namespace {

constexpr int kChunkExamples = 16;

struct ScoredRow {
  int row = 0;          // row in the encoded batch
  int example = 0;      // index within the chunk
  int hard_target = -1;
  const std::vector<double>* soft_target = nullptr;
};

int argmax_index(const double* v, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// mask cache keyed by sequence length (plain causal) or prefix length
// (flat shared-prefix layout)
struct MaskCache {
  std::map<int, MaskPtr> causal;
  std::map<int, MaskPtr> flat;  // keyed by prefix_len; M,N fixed per run
  int m_rollouts = 0, rollout_len = 0;

  MaskPtr causal_of(int len) {
    auto it = causal.find(len);
    if (it != causal.end()) return it->second;
    MaskPtr m = causal_mask(len);
    causal.emplace(len, m);
    return m;
  }
  MaskPtr flat_of(int prefix_len) {
    auto it = flat.find(prefix_len);
    if (it != flat.end()) return it->second;
    MaskPtr m = flat_causal_mask(prefix_len, m_rollouts, rollout_len);
    flat.emplace(prefix_len, m);
    return m;
  }
};

std::vector<int> iota_positions(int n) {
  std::vector<int> p(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
  return p;
}

// Adds one example's scored sequences to the batch. For base models one
// sequence; for lookahead one flattened sequence per scored position,
// each with its own rollout set. Returns scored-row descriptors.
void add_example(const ModelBundle& bundle, const Example& ex,
                 const LookaheadConfig& lookcfg,
                 uint64_t rollout_seed_base, int example_slot,
                 MaskCache& masks, BatchInput& in,
                 std::vector<ScoredRow>& scored) {
  TokenSequence z = build_z(ex);
  int zlen = static_cast<int>(z.size());
  int first = prompt_rows(ex);
  int last_row = ex.has_soft_targets()
                     ? first + static_cast<int>(ex.target.size()) - 1
                     : zlen - 2;

  if (bundle.kind == ModelKind::base) {
    int offset = in.rows();
    if (zlen > bundle.model.cfg.max_len)
      throw std::invalid_argument("sequence of length " + std::to_string(zlen) +
                                  " exceeds max_len " +
                                  std::to_string(bundle.model.cfg.max_len));
    in.add_sequence(z, iota_positions(zlen), masks.causal_of(zlen));
    for (int r = first; r <= last_row; ++r) {
      ScoredRow s;
      s.row = offset + r;
      s.example = example_slot;
      if (ex.has_soft_targets())
        s.soft_target = &ex.soft_targets[static_cast<size_t>(r - first)];
      else
        s.hard_target = z[static_cast<size_t>(r) + 1];
      scored.push_back(s);
    }
    return;
  }

  const Model& proposal = bundle.proposal_model();
  for (int r = first; r <= last_row; ++r) {
    int t = r + 1;  // prefix length for this prediction
    TokenSequence prefix(z.begin(), z.begin() + t);
    uint64_t seed =
        derive_seed(rollout_seed_base, {tag("pos"), static_cast<uint64_t>(t)});
    RolloutSet rollouts = sample_rollout_set(proposal, prefix, lookcfg, seed);
    FlatLayout flat = build_flat_layout(prefix, rollouts);
    if (flat.size() > bundle.model.cfg.max_len)
      throw std::invalid_argument("flattened layout of " +
                                  std::to_string(flat.size()) +
                                  " tokens exceeds max_len " +
                                  std::to_string(bundle.model.cfg.max_len));
    int offset = in.rows();
    add_flat_sequence(in, flat, masks.flat_of(t));
    ScoredRow s;
    s.row = offset + t - 1;
    s.example = example_slot;
    if (ex.has_soft_targets())
      s.soft_target = &ex.soft_targets[static_cast<size_t>(r - first)];
    else
      s.hard_target = z[static_cast<size_t>(r) + 1];
    scored.push_back(s);
  }
}

}  // namespace

// ---------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------

MetricsReport evaluate(const ModelBundle& bundle, const Dataset& ds,
                       const LookaheadConfig& eval_cfg, uint64_t seed) {
  eval_cfg.validate();
  auto t0 = std::chrono::steady_clock::now();

  BoundModel bound = bind_model(bundle.model, false);
  MaskCache masks;
  masks.m_rollouts = eval_cfg.n_rollouts;
  masks.rollout_len = eval_cfg.rollout_len;

  MetricsReport report;
  report.per_example.reserve(ds.examples.size());

  int n = ds.size();
  int total_correct = 0;
  for (int start = 0; start < n; start += kChunkExamples) {
    int stop = std::min(n, start + kChunkExamples);
    BatchInput in;
    std::vector<ScoredRow> scored;
    std::vector<ExampleScore> chunk_scores;
    for (int i = start; i < stop; ++i) {
      const Example& ex = ds.examples[static_cast<size_t>(i)];
      ExampleScore sc;
      sc.hash = example_content_hash(ex);
      chunk_scores.push_back(sc);
      uint64_t ex_seed = derive_seed(seed, {tag("ex"), sc.hash});
      add_example(bundle, ex, eval_cfg, ex_seed, i - start, masks, in, scored);
    }
    Tensor x = encode(bound, in);
    std::vector<int> rows;
    rows.reserve(scored.size());
    for (const ScoredRow& s : scored) rows.push_back(s.row);
    Tensor logits = linear(gather_rows(x, rows), bound.tok_emb);
    int v = logits.dim(1);
    std::vector<double> logp(static_cast<size_t>(v));
    for (size_t si = 0; si < scored.size(); ++si) {
      const ScoredRow& s = scored[si];
      const double* row = logits.data() + si * static_cast<size_t>(v);
      double lse = kernels::logsumexp(row, v);
      ExampleScore& sc = chunk_scores[static_cast<size_t>(s.example)];
      int predicted = argmax_index(row, v);
      if (s.soft_target) {
        double term = lse;
        const std::vector<double>& t = *s.soft_target;
        for (int j = 0; j < v; ++j)
          if (t[static_cast<size_t>(j)] > 0.0)
            term -= t[static_cast<size_t>(j)] * row[j];
        sc.loss_sum += term;
        int oracle_best = argmax_index(t.data(), v);
        if (predicted == oracle_best) ++sc.correct;
      } else {
        sc.loss_sum += lse - row[s.hard_target];
        if (predicted == s.hard_target) ++sc.correct;
      }
      sc.tokens += 1;
    }
    for (ExampleScore& sc : chunk_scores) {
      report.per_example.push_back(sc);
      total_correct += sc.correct;
    }
  }

  // canonical order: independent of the dataset's on-disk ordering
  std::sort(report.per_example.begin(), report.per_example.end(),
            [](const ExampleScore& a, const ExampleScore& b) {
              if (a.hash != b.hash) return a.hash < b.hash;
              return a.loss_sum < b.loss_sum;
            });
  double loss_total = 0.0;
  int64_t tokens = 0;
  for (const ExampleScore& sc : report.per_example) {
    loss_total += sc.loss_sum;
    tokens += sc.tokens;
  }
  report.total_tokens = tokens;
  report.loss_per_token = tokens ? loss_total / static_cast<double>(tokens) : 0.0;
  report.accuracy =
      tokens ? static_cast<double>(total_correct) / static_cast<double>(tokens)
             : 0.0;
  if (!report.per_example.empty()) {
    std::vector<double> unit_losses;
    unit_losses.reserve(report.per_example.size());
    for (const ExampleScore& sc : report.per_example)
      unit_losses.push_back(sc.tokens ? sc.loss_sum / sc.tokens : 0.0);
    Rng rng(derive_seed(seed, {tag("bootstrap")}));
    auto [lo, hi] = bootstrap_ci(unit_losses, kBootstrapResamples, 0.95, rng);
    report.ci_low = lo;
    report.ci_high = hi;
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return report;
}

// ---------------------------------------------------------------------
// training
// ---------------------------------------------------------------------

TrainResult train_model(ModelKind kind, const ExperimentConfig& cfg,
                        const Datasets& data, const ModelBundle* base_bundle,
                        std::ostream* progress) {
  if (data.train.examples.empty())
    throw std::invalid_argument("train: empty training split");
  cfg.lookahead.validate();

  ModelBundle bundle;
  bundle.kind = kind;
  bundle.vocab_hash = data.vocab.content_hash();
  int epochs = cfg.epochs;
  if (kind == ModelKind::base) {
    ModelConfig mc = cfg.model;
    mc.vocab_size = data.vocab.size();
    if (mc.n_lookahead_layers != 0)
      throw std::invalid_argument("train: a base model cannot have lookahead layers");
    bundle.model = Model::init(mc, derive_seed(cfg.seed, {tag("init")}));
  } else {
    if (!base_bundle)
      throw std::invalid_argument("train: lookahead training needs a base checkpoint");
    if (base_bundle->kind != ModelKind::base)
      throw std::invalid_argument("train: the warm-start checkpoint must be a base model");
    if (base_bundle->vocab_hash != bundle.vocab_hash)
      throw std::invalid_argument("train: base checkpoint vocabulary does not match dataset");
    ModelConfig mc = cfg.model;
    mc.vocab_size = data.vocab.size();
    bundle.model =
        init_from_base(base_bundle->model, mc, derive_seed(cfg.seed, {tag("init")}));
    bundle.proposal = base_bundle->model;
    bundle.lookcfg = cfg.lookahead;
    epochs = cfg.effective_lookahead_epochs();
  }

  AdamState opt(bundle.model.params, cfg.learning_rate);
  std::vector<std::vector<double>> grads = zero_grads(bundle.model.params);

  MaskCache masks;
  masks.m_rollouts = cfg.lookahead.n_rollouts;
  masks.rollout_len = cfg.lookahead.rollout_len;

  TrainResult result;
  double best_valid = std::numeric_limits<double>::infinity();
  Model best_params = Model(bundle.model.cfg, bundle.model.params.clone());

  int n = data.train.size();
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, {tag("shuffle"), static_cast<uint64_t>(epoch)}));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    int64_t epoch_tokens = 0;
    for (int bstart = 0, batch_idx = 0; bstart < n;
         bstart += cfg.batch_size, ++batch_idx) {
      int bstop = std::min(n, bstart + cfg.batch_size);
      int batch_count = bstop - bstart;
      for (auto& g : grads) std::fill(g.begin(), g.end(), 0.0);

      for (int cstart = bstart, chunk_idx = 0; cstart < bstop;
           cstart += kChunkExamples, ++chunk_idx) {
        int cstop = std::min(bstop, cstart + kChunkExamples);
        BoundModel bound = bind_model(bundle.model, true);
        BatchInput in;
        std::vector<ScoredRow> scored;
        for (int i = cstart; i < cstop; ++i) {
          int ex_idx = order[static_cast<size_t>(i)];
          const Example& ex = data.train.examples[static_cast<size_t>(ex_idx)];
          uint64_t rollout_base =
              derive_seed(cfg.seed, {tag("rollout"), static_cast<uint64_t>(epoch),
                                     static_cast<uint64_t>(ex_idx)});
          add_example(bundle, ex, cfg.lookahead, rollout_base,
                      i - cstart, masks, in, scored);
        }
        Rng drop_rng(derive_seed(cfg.seed, {tag("dropout"), static_cast<uint64_t>(epoch),
                                            static_cast<uint64_t>(batch_idx),
                                            static_cast<uint64_t>(chunk_idx)}));
        Tensor x = encode(bound, in, true, &drop_rng);
        std::vector<int> rows;
        rows.reserve(scored.size());
        for (const ScoredRow& s : scored) rows.push_back(s.row);
        Tensor logits = linear(gather_rows(x, rows), bound.tok_emb);
        Tensor loss;
        if (!scored.empty() && scored.front().soft_target) {
          std::vector<double> soft;
          soft.reserve(scored.size() * static_cast<size_t>(logits.dim(1)));
          for (const ScoredRow& s : scored)
            soft.insert(soft.end(), s.soft_target->begin(), s.soft_target->end());
          loss = cross_entropy_rows(logits, soft);
        } else {
          std::vector<int> targets;
          targets.reserve(scored.size());
          for (const ScoredRow& s : scored) targets.push_back(s.hard_target);
          loss = cross_entropy_rows(logits, targets);
        }
        loss.backward();
        epoch_loss += loss.value();
        epoch_tokens += static_cast<int64_t>(scored.size());
        for (size_t li = 0; li < bound.leaves.size(); ++li) {
          const auto& leaf = bound.leaves[li];
          if (!leaf.node_->grad.empty()) {
            std::vector<double>& acc = grads[li];
            const std::vector<double>& g = leaf.node_->grad;
            for (size_t j = 0; j < acc.size(); ++j) acc[j] += g[j];
          }
        }
      }
      double inv = 1.0 / static_cast<double>(batch_count);
      for (auto& g : grads)
        for (double& v : g) v *= inv;
      adam_step(bundle.model.params, grads, opt);
      ++result.steps;
    }

    MetricsReport valid =
        evaluate(bundle, data.valid, cfg.lookahead,
                 derive_seed(cfg.seed, {tag("val"), static_cast<uint64_t>(epoch)}));
    EpochLog log;
    log.epoch = epoch;
    log.train_loss =
        epoch_tokens ? epoch_loss / static_cast<double>(epoch_tokens) : 0.0;
    log.valid_loss = valid.loss_per_token;
    log.valid_accuracy = valid.accuracy;
    result.log.push_back(log);
    if (progress)
      (*progress) << "epoch " << epoch << " train " << log.train_loss
                  << " valid " << log.valid_loss << " acc "
                  << log.valid_accuracy << "\n";
    if (valid.loss_per_token < best_valid) {
      best_valid = valid.loss_per_token;
      best_params = Model(bundle.model.cfg, bundle.model.params.clone());
      result.best_epoch = epoch;
    }
  }

  bundle.model = std::move(best_params);
  result.bundle = std::move(bundle);
  return result;
}

// ---------------------------------------------------------------------
// csv
// ---------------------------------------------------------------------

std::string layers_string(const ModelBundle& bundle) {
  const ModelConfig& c = bundle.model.cfg;
  if (c.n_lookahead_layers == 0) return std::to_string(c.n_causal_layers);
  return std::to_string(c.n_causal_layers) + "+" +
         std::to_string(c.n_lookahead_layers);
}

std::string metrics_csv_header() {
  return "run_id,split,model,layers,M,N,tau,seed,loss,accuracy,ci_low,ci_high";
}

std::string metrics_csv_row(const std::string& run_id, const std::string& split,
                            const ModelBundle& bundle, int m_rollouts,
                            int rollout_len, double tau, uint64_t seed,
                            const MetricsReport& report) {
  std::ostringstream os;
  os << run_id << "," << split << "," << kind_name(bundle.kind) << ","
     << layers_string(bundle) << "," << m_rollouts << "," << rollout_len << ","
     << format_double(tau) << "," << seed << ","
     << format_double(report.loss_per_token) << ","
     << format_double(report.accuracy) << "," << format_double(report.ci_low)
     << "," << format_double(report.ci_high);
  return os.str();
}

}  // namespace latf
