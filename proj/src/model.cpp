#include "latf/model.hpp"

#include <cmath>
#include <stdexcept>

#include "latf/kernels.hpp"

namespace latf {

namespace k = kernels;

void ModelConfig::validate() const {
  if (vocab_size <= 0) throw std::invalid_argument("config: vocab_size must be positive");
  if (d_model <= 0 || d_ffn <= 0) throw std::invalid_argument("config: widths must be positive");
  if (n_head <= 0 || d_model % n_head != 0)
    throw std::invalid_argument("config: d_model " + std::to_string(d_model) +
                                " not divisible by n_head " +
                                std::to_string(n_head));
  if (n_causal_layers < 0 || n_lookahead_layers < 0)
    throw std::invalid_argument("config: layer counts must be non-negative");
  if (dropout_p < 0.0 || dropout_p >= 1.0)
    throw std::invalid_argument("config: dropout_p must lie in [0,1)");
  if (max_len <= 0) throw std::invalid_argument("config: max_len must be positive");
}

void ModelConfig::to_manifest(Manifest& m, const std::string& prefix) const {
  m.set(prefix + "vocab_size", static_cast<int64_t>(vocab_size));
  m.set(prefix + "d_model", static_cast<int64_t>(d_model));
  m.set(prefix + "d_ffn", static_cast<int64_t>(d_ffn));
  m.set(prefix + "n_head", static_cast<int64_t>(n_head));
  m.set(prefix + "n_causal_layers", static_cast<int64_t>(n_causal_layers));
  m.set(prefix + "n_lookahead_layers", static_cast<int64_t>(n_lookahead_layers));
  m.set(prefix + "dropout_p", dropout_p);
  m.set(prefix + "max_len", static_cast<int64_t>(max_len));
}

ModelConfig ModelConfig::from_manifest(const Manifest& m,
                                       const std::string& prefix) {
  ModelConfig c;
  c.vocab_size = static_cast<int>(m.get_int(prefix + "vocab_size"));
  c.d_model = static_cast<int>(m.get_int(prefix + "d_model"));
  c.d_ffn = static_cast<int>(m.get_int(prefix + "d_ffn"));
  c.n_head = static_cast<int>(m.get_int(prefix + "n_head"));
  c.n_causal_layers = static_cast<int>(m.get_int(prefix + "n_causal_layers"));
  c.n_lookahead_layers =
      static_cast<int>(m.get_int(prefix + "n_lookahead_layers"));
  c.dropout_p = m.get_double(prefix + "dropout_p");
  c.max_len = static_cast<int>(m.get_int(prefix + "max_len"));
  c.validate();
  return c;
}

std::vector<double> positional_encoding(int position, int d_model) {
  if (position < 0) throw std::invalid_argument("positional_encoding: negative position");
  std::vector<double> p(static_cast<size_t>(d_model));
  for (int i = 0; 2 * i < d_model; ++i) {
    double wavelength = std::pow(10000.0, 2.0 * i / d_model);
    double angle = position / wavelength;
    p[static_cast<size_t>(2 * i)] = std::sin(angle);
    if (2 * i + 1 < d_model) p[static_cast<size_t>(2 * i + 1)] = std::cos(angle);
  }
  return p;
}

std::vector<double> positional_table(int max_len, int d_model) {
  std::vector<double> table(static_cast<size_t>(max_len) * d_model);
  for (int s = 0; s < max_len; ++s) {
    std::vector<double> p = positional_encoding(s, d_model);
    std::copy(p.begin(), p.end(), table.begin() + static_cast<size_t>(s) * d_model);
  }
  return table;
}

// ---------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------

namespace {

std::string layer_name(int li, const char* field) {
  return "layer" + std::to_string(li) + "." + field;
}

std::vector<double> uniform_values(int64_t n, double bound, Rng& rng) {
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return v;
}

}  // namespace

Model::Model(ModelConfig cfg_, ParamStore params_)
    : cfg(cfg_), params(std::move(params_)) {
  cfg.validate();
  pos_table = positional_table(cfg.max_len, cfg.d_model);
  // structural check: every expected tensor present with the right shape
  (void)bind_model(*this, false);
}

Model Model::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, {tag("model_init")}));
  double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  int d = cfg.d_model, f = cfg.d_ffn;
  ParamStore ps;
  ps.add("tok_emb", {cfg.vocab_size, d},
         uniform_values(static_cast<int64_t>(cfg.vocab_size) * d, bound, rng));
  for (int li = 0; li < cfg.total_layers(); ++li) {
    for (const char* w : {"wq", "wk", "wv", "wo"})
      ps.add(layer_name(li, w), {d, d},
             uniform_values(static_cast<int64_t>(d) * d, bound, rng));
    ps.add(layer_name(li, "ln1.g"), {d}, std::vector<double>(static_cast<size_t>(d), 1.0));
    ps.add_zeros(layer_name(li, "ln1.b"), {d});
    ps.add(layer_name(li, "ffn.w1"), {f, d},
           uniform_values(static_cast<int64_t>(f) * d, bound, rng));
    ps.add_zeros(layer_name(li, "ffn.b1"), {f});
    ps.add(layer_name(li, "ffn.w2"), {d, f},
           uniform_values(static_cast<int64_t>(d) * f, bound, rng));
    ps.add_zeros(layer_name(li, "ffn.b2"), {d});
    ps.add(layer_name(li, "ln2.g"), {d}, std::vector<double>(static_cast<size_t>(d), 1.0));
    ps.add_zeros(layer_name(li, "ln2.b"), {d});
  }
  ps.add("ln_f.g", {d}, std::vector<double>(static_cast<size_t>(d), 1.0));
  ps.add_zeros("ln_f.b", {d});
  return Model(cfg, std::move(ps));
}

BoundModel bind_model(const Model& m, bool requires_grad) {
  BoundModel b;
  b.cfg = &m.cfg;
  b.pos_table = &m.pos_table;
  b.leaves.reserve(static_cast<size_t>(m.params.size()));
  for (int i = 0; i < m.params.size(); ++i)
    b.leaves.push_back(m.params.bind(i, requires_grad));
  auto leaf = [&](const std::string& name) {
    return b.leaves[static_cast<size_t>(&m.params.at(name) -
                                        m.params.entries().data())];
  };
  auto expect = [&](const Tensor& t, std::vector<int> shape,
                    const std::string& name) {
    if (t.shape() != shape)
      throw std::invalid_argument("parameter " + name + " has shape " +
                                  shape_str(t.shape()) + ", expected " +
                                  shape_str(shape));
    return t;
  };
  int d = m.cfg.d_model, f = m.cfg.d_ffn;
  b.tok_emb = expect(leaf("tok_emb"), {m.cfg.vocab_size, d}, "tok_emb");
  for (int li = 0; li < m.cfg.total_layers(); ++li) {
    BoundModel::Layer L;
    L.wq = expect(leaf(layer_name(li, "wq")), {d, d}, layer_name(li, "wq"));
    L.wk = expect(leaf(layer_name(li, "wk")), {d, d}, layer_name(li, "wk"));
    L.wv = expect(leaf(layer_name(li, "wv")), {d, d}, layer_name(li, "wv"));
    L.wo = expect(leaf(layer_name(li, "wo")), {d, d}, layer_name(li, "wo"));
    L.ln1_g = expect(leaf(layer_name(li, "ln1.g")), {d}, layer_name(li, "ln1.g"));
    L.ln1_b = expect(leaf(layer_name(li, "ln1.b")), {d}, layer_name(li, "ln1.b"));
    L.ffn_w1 = expect(leaf(layer_name(li, "ffn.w1")), {f, d}, layer_name(li, "ffn.w1"));
    L.ffn_b1 = expect(leaf(layer_name(li, "ffn.b1")), {f}, layer_name(li, "ffn.b1"));
    L.ffn_w2 = expect(leaf(layer_name(li, "ffn.w2")), {d, f}, layer_name(li, "ffn.w2"));
    L.ffn_b2 = expect(leaf(layer_name(li, "ffn.b2")), {d}, layer_name(li, "ffn.b2"));
    L.ln2_g = expect(leaf(layer_name(li, "ln2.g")), {d}, layer_name(li, "ln2.g"));
    L.ln2_b = expect(leaf(layer_name(li, "ln2.b")), {d}, layer_name(li, "ln2.b"));
    b.layers.push_back(std::move(L));
  }
  b.lnf_g = expect(leaf("ln_f.g"), {d}, "ln_f.g");
  b.lnf_b = expect(leaf("ln_f.b"), {d}, "ln_f.b");
  return b;
}

// ---------------------------------------------------------------------
// batched forward
// ---------------------------------------------------------------------

void BatchInput::add_sequence(const std::vector<int>& seq_ids,
                              const std::vector<int>& seq_positions,
                              MaskPtr lower_mask, MaskPtr upper_mask) {
  if (seq_ids.size() != seq_positions.size())
    throw std::invalid_argument("add_sequence: ids/positions length mismatch");
  AttnSpan lower{rows(), static_cast<int>(seq_ids.size()), std::move(lower_mask)};
  AttnSpan upper{lower.offset, lower.len, std::move(upper_mask)};
  ids.insert(ids.end(), seq_ids.begin(), seq_ids.end());
  positions.insert(positions.end(), seq_positions.begin(), seq_positions.end());
  lower_spans.push_back(std::move(lower));
  upper_spans.push_back(std::move(upper));
}

Tensor apply_layer(const BoundModel& m, int layer_idx, const Tensor& x_in,
                   const std::vector<AttnSpan>& spans, bool train, Rng* rng) {
  if (layer_idx < 0 || layer_idx >= m.cfg->total_layers())
    throw std::invalid_argument("apply_layer: layer index out of range");
  const BoundModel::Layer& L = m.layers[static_cast<size_t>(layer_idx)];
  const ModelConfig& cfg = *m.cfg;
  double p = train ? cfg.dropout_p : 0.0;
  double att_scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));

  Tensor x = x_in;
  Tensor xn = layer_norm(x, L.ln1_g, L.ln1_b);
  Tensor q = linear(xn, L.wq);
  Tensor key = linear(xn, L.wk);
  Tensor val = linear(xn, L.wv);
  Tensor ctx = attention(q, key, val, spans, cfg.n_head, att_scale, p, rng);
  x = add(x, linear(ctx, L.wo));

  Tensor xn2 = layer_norm(x, L.ln2_g, L.ln2_b);
  Tensor h = activation(add_rowvec(linear(xn2, L.ffn_w1), L.ffn_b1));
  if (p > 0.0 && rng) h = dropout(h, p, *rng);
  Tensor f = add_rowvec(linear(h, L.ffn_w2), L.ffn_b2);
  return add(x, f);
}

Tensor encode_layers(const BoundModel& m, const BatchInput& in, int n_layers,
                     bool train, Rng* rng) {
  const ModelConfig& cfg = *m.cfg;
  if (n_layers < 0 || n_layers > cfg.total_layers())
    throw std::invalid_argument("encode_layers: bad layer count");
  Tensor x = embed_rows(m.tok_emb, in.ids, *m.pos_table, cfg.max_len, in.positions);
  for (int li = 0; li < n_layers; ++li) {
    const auto& spans =
        li < cfg.n_causal_layers ? in.lower_spans : in.upper_spans;
    x = apply_layer(m, li, x, spans, train, rng);
  }
  return x;
}

Tensor encode(const BoundModel& m, const BatchInput& in, bool train, Rng* rng) {
  Tensor x = encode_layers(m, in, m.cfg->total_layers(), train, rng);
  return layer_norm(x, m.lnf_g, m.lnf_b);
}

Tensor causal_layer(const BoundModel& m, int layer_idx, const Tensor& x) {
  if (x.ndim() != 2 || x.dim(1) != m.cfg->d_model)
    throw std::invalid_argument("causal_layer: embeddings must be [T x d_model]");
  std::vector<AttnSpan> spans{{0, x.dim(0), causal_mask(x.dim(0))}};
  return apply_layer(m, layer_idx, x, spans);
}

Tensor embed_tokens(const BoundModel& m, const TokenSequence& ids) {
  std::vector<int> positions(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<int>(i);
  return embed_rows(m.tok_emb, ids, *m.pos_table, m.cfg->max_len, positions);
}

std::vector<double> next_token_logits(const Model& m, const TokenSequence& prefix) {
  if (prefix.empty())
    throw std::invalid_argument("next_token_logits: prefix must be nonempty");
  BoundModel b = bind_model(m, false);
  BatchInput in;
  std::vector<int> positions(prefix.size());
  for (size_t i = 0; i < prefix.size(); ++i) positions[i] = static_cast<int>(i);
  in.add_sequence(prefix, positions, causal_mask(static_cast<int>(prefix.size())));
  Tensor x = encode(b, in);
  Tensor last = gather_rows(x, {static_cast<int>(prefix.size()) - 1});
  Tensor logits = linear(last, b.tok_emb);
  return logits.vec();
}

Tensor seq2seq_loss(const BoundModel& bound, const Example& ex, bool train,
                    Rng* rng) {
  TokenSequence z = build_z(ex);
  int zlen = static_cast<int>(z.size());
  if (zlen > bound.cfg->max_len)
    throw std::invalid_argument("seq2seq_loss: sequence of length " +
                                std::to_string(zlen) + " exceeds max_len " +
                                std::to_string(bound.cfg->max_len));
  BatchInput in;
  std::vector<int> positions(z.size());
  for (size_t i = 0; i < z.size(); ++i) positions[i] = static_cast<int>(i);
  in.add_sequence(z, positions, causal_mask(zlen));
  Tensor x = encode(bound, in, train, rng);
  // rows that predict the target tokens and the terminator
  int first = prompt_rows(ex);  // row |source| predicts z[|source|+1]
  std::vector<int> rows;
  std::vector<int> targets;
  for (int r = first; r < zlen - 1; ++r) {
    rows.push_back(r);
    targets.push_back(z[static_cast<size_t>(r) + 1]);
  }
  Tensor picked = gather_rows(x, rows);
  Tensor logits = linear(picked, bound.tok_emb);
  return cross_entropy_rows(logits, targets);
}

double seq2seq_loss_value(const Model& m, const Example& ex) {
  BoundModel b = bind_model(m, false);
  return seq2seq_loss(b, ex).value();
}

// ---------------------------------------------------------------------
// incremental decoder
// ---------------------------------------------------------------------

Decoder::Decoder(const Model& m) : m_(&m) {
  if (m.cfg.n_lookahead_layers != 0)
    throw std::invalid_argument(
        "Decoder: sampling runs on causal-only models");
  k_cache_.resize(static_cast<size_t>(m.cfg.n_causal_layers));
  v_cache_.resize(static_cast<size_t>(m.cfg.n_causal_layers));
}

const std::vector<double>& Decoder::logits() const {
  if (!has_logits_) throw std::logic_error("Decoder: no tokens pushed yet");
  return logits_;
}

void Decoder::push(int token_id) {
  const Model& m = *m_;
  const ModelConfig& cfg = m.cfg;
  int d = cfg.d_model, f = cfg.d_ffn, H = cfg.n_head, dh = cfg.head_dim();
  if (token_id < 0 || token_id >= cfg.vocab_size)
    throw std::invalid_argument("Decoder: token id out of range");
  if (len_ >= cfg.max_len)
    throw std::invalid_argument("Decoder: sequence exceeds max_len");
  double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  const double* emb = m.params.at("tok_emb").data->data();
  std::vector<double> x(static_cast<size_t>(d));
  {
    const double* trow = emb + static_cast<size_t>(token_id) * d;
    const double* prow = m.pos_table.data() + static_cast<size_t>(len_) * d;
    for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] = trow[j] + prow[j];
  }

  std::vector<double> xn(static_cast<size_t>(d));
  std::vector<double> qrow(static_cast<size_t>(d));
  std::vector<double> ctx(static_cast<size_t>(d));
  std::vector<double> hidden(static_cast<size_t>(f));
  double sigma;
  int t = len_ + 1;  // sequence length including this token
  scratch_.resize(static_cast<size_t>(t));

  for (int li = 0; li < cfg.n_causal_layers; ++li) {
    const auto& ps = m.params;
    auto W = [&](const char* field) {
      return ps.at("layer" + std::to_string(li) + "." + field).data->data();
    };
    std::vector<double>& kc = k_cache_[static_cast<size_t>(li)];
    std::vector<double>& vc = v_cache_[static_cast<size_t>(li)];
    kc.resize(static_cast<size_t>(t) * d);
    vc.resize(static_cast<size_t>(t) * d);

    k::layer_norm_row(x.data(), d, kLayerNormEps, xn.data(), &sigma);
    {
      const double* g = W("ln1.g");
      const double* bb = W("ln1.b");
      for (int j = 0; j < d; ++j) xn[static_cast<size_t>(j)] = g[j] * xn[static_cast<size_t>(j)] + bb[j];
    }
    const double* wq = W("wq");
    const double* wk = W("wk");
    const double* wv = W("wv");
    double* krow = kc.data() + static_cast<size_t>(len_) * d;
    double* vrow = vc.data() + static_cast<size_t>(len_) * d;
    for (int j = 0; j < d; ++j) {
      qrow[static_cast<size_t>(j)] = k::dot(xn.data(), wq + static_cast<size_t>(j) * d, d);
      krow[j] = k::dot(xn.data(), wk + static_cast<size_t>(j) * d, d);
      vrow[j] = k::dot(xn.data(), wv + static_cast<size_t>(j) * d, d);
    }
    std::fill(ctx.begin(), ctx.end(), 0.0);
    for (int h = 0; h < H; ++h) {
      int c0 = h * dh;
      for (int c = 0; c < t; ++c)
        scratch_[static_cast<size_t>(c)] =
            att_scale * k::dot(qrow.data() + c0, kc.data() + static_cast<size_t>(c) * d + c0, dh);
      k::softmax_masked(scratch_.data(), nullptr, t, scratch_.data());
      for (int c = 0; c < t; ++c) {
        double a = scratch_[static_cast<size_t>(c)];
        if (a != 0.0)
          k::axpy(a, vc.data() + static_cast<size_t>(c) * d + c0, ctx.data() + c0, dh);
      }
    }
    const double* wo = W("wo");
    for (int j = 0; j < d; ++j)
      x[static_cast<size_t>(j)] += k::dot(ctx.data(), wo + static_cast<size_t>(j) * d, d);

    k::layer_norm_row(x.data(), d, kLayerNormEps, xn.data(), &sigma);
    {
      const double* g = W("ln2.g");
      const double* bb = W("ln2.b");
      for (int j = 0; j < d; ++j) xn[static_cast<size_t>(j)] = g[j] * xn[static_cast<size_t>(j)] + bb[j];
    }
    const double* w1 = W("ffn.w1");
    const double* b1 = W("ffn.b1");
    const double* w2 = W("ffn.w2");
    const double* b2 = W("ffn.b2");
    for (int j = 0; j < f; ++j)
      hidden[static_cast<size_t>(j)] =
          k::act(k::dot(xn.data(), w1 + static_cast<size_t>(j) * d, d) + b1[j]);
    for (int j = 0; j < d; ++j)
      x[static_cast<size_t>(j)] += k::dot(hidden.data(), w2 + static_cast<size_t>(j) * f, f) + b2[j];
  }

  k::layer_norm_row(x.data(), d, kLayerNormEps, xn.data(), &sigma);
  {
    const double* g = m.params.at("ln_f.g").data->data();
    const double* bb = m.params.at("ln_f.b").data->data();
    for (int j = 0; j < d; ++j) xn[static_cast<size_t>(j)] = g[j] * xn[static_cast<size_t>(j)] + bb[j];
  }
  logits_.resize(static_cast<size_t>(cfg.vocab_size));
  for (int v = 0; v < cfg.vocab_size; ++v)
    logits_[static_cast<size_t>(v)] = k::dot(xn.data(), emb + static_cast<size_t>(v) * d, d);
  has_logits_ = true;
  ++len_;
}

// ---------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------

std::vector<double> temper_distribution(const std::vector<double>& logits,
                                        double tau) {
  if (tau < 0.0) throw std::invalid_argument("temperature must be non-negative");
  std::vector<double> out(logits.size(), 0.0);
  if (tau == 0.0) {
    int best = 0;
    for (size_t i = 1; i < logits.size(); ++i)
      if (logits[i] > logits[static_cast<size_t>(best)]) best = static_cast<int>(i);
    out[static_cast<size_t>(best)] = 1.0;
    return out;
  }
  std::vector<double> scaled(logits.size());
  double inv_tau = 1.0 / tau;
  for (size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] * inv_tau;
  k::softmax_masked(scaled.data(), nullptr, static_cast<int>(scaled.size()),
                    out.data());
  return out;
}

int sample_token(const std::vector<double>& logits, double tau, Rng& rng) {
  if (tau == 0.0) {
    int best = 0;
    for (size_t i = 1; i < logits.size(); ++i)
      if (logits[i] > logits[static_cast<size_t>(best)]) best = static_cast<int>(i);
    return best;
  }
  std::vector<double> probs = temper_distribution(logits, tau);
  double u = rng.real01();
  double acc = 0.0;
  for (size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size()) - 1;  // guard against rounding
}

TokenSequence sample_continuation(const Model& m, const TokenSequence& prefix,
                                  int n_tokens, double tau, Rng& rng) {
  if (tau < 0.0) throw std::invalid_argument("sample_continuation: tau must be >= 0");
  if (prefix.empty())
    throw std::invalid_argument("sample_continuation: prefix must be nonempty");
  Decoder dec(m);
  for (int id : prefix) dec.push(id);
  TokenSequence out;
  out.reserve(static_cast<size_t>(n_tokens));
  for (int i = 0; i < n_tokens; ++i) {
    int id = sample_token(dec.logits(), tau, rng);
    out.push_back(id);
    if (i + 1 < n_tokens) dec.push(id);
  }
  return out;
}

}  // namespace latf
