#include <cmath>
#include <cstring>

#include "doctest.h"
#include "latf/grad_check.hpp"
#include "latf/kernels.hpp"
#include "latf/model.hpp"

using namespace latf;

namespace {

ModelConfig tiny_config(int vocab = 4, int layers = 2) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.d_model = 8;
  cfg.d_ffn = 16;
  cfg.n_head = 2;
  cfg.n_causal_layers = layers;
  cfg.max_len = 32;
  return cfg;
}

Model zero_model(const ModelConfig& cfg) {
  Model m = Model::init(cfg, 1);
  for (int i = 0; i < m.params.size(); ++i) {
    auto& data = *m.params.entry(i).data;
    std::fill(data.begin(), data.end(), 0.0);
  }
  return m;
}

}  // namespace

TEST_CASE("positional encoding values") {
  auto p0 = positional_encoding(0, 4);
  CHECK(p0 == std::vector<double>{0.0, 1.0, 0.0, 1.0});

  auto p1 = positional_encoding(1, 4);
  CHECK(p1[0] == doctest::Approx(std::sin(1.0)).epsilon(1e-12));
  CHECK(p1[1] == doctest::Approx(std::cos(1.0)).epsilon(1e-12));
  CHECK(p1[2] == doctest::Approx(std::sin(0.01)).epsilon(1e-12));
  CHECK(p1[3] == doctest::Approx(std::cos(0.01)).epsilon(1e-12));
  CHECK(p1[0] == doctest::Approx(0.8415).epsilon(1e-3));
  CHECK(p1[3] == doctest::Approx(0.99995).epsilon(1e-6));
}

TEST_CASE("embedding structure") {
  ModelConfig cfg = tiny_config();
  cfg.d_model = 4;
  cfg.d_ffn = 8;
  Model m = zero_model(cfg);
  BoundModel b = bind_model(m, false);

  // zero table: embeddings equal the positional encodings
  Tensor e = embed_tokens(b, {0, 1, 2});
  for (int s = 0; s < 3; ++s) {
    auto p = positional_encoding(s, 4);
    for (int j = 0; j < 4; ++j)
      CHECK(e.vec()[static_cast<size_t>(s * 4 + j)] == p[static_cast<size_t>(j)]);
  }

  // repeated token at two positions differs exactly by p(1) - p(2)
  Model m2 = Model::init(cfg, 7);
  BoundModel b2 = bind_model(m2, false);
  Tensor e2 = embed_tokens(b2, {3, 3, 3});
  auto p1 = positional_encoding(1, 4), p2 = positional_encoding(2, 4);
  for (int j = 0; j < 4; ++j)
    CHECK(e2.vec()[static_cast<size_t>(4 + j)] -
              e2.vec()[static_cast<size_t>(8 + j)] ==
          doctest::Approx(p1[static_cast<size_t>(j)] -
                          p2[static_cast<size_t>(j)])
              .epsilon(1e-12));

  // ones-vector token embedding at position 0
  auto& emb = *m.params.at("tok_emb").data;
  std::fill(emb.begin(), emb.begin() + 4, 1.0);
  Tensor e3 = embed_tokens(bind_model(m, false), {0});
  CHECK(e3.vec() == std::vector<double>{1, 2, 1, 2});

  CHECK_THROWS_AS(
      embed_rows(b.tok_emb, {0}, m.pos_table, cfg.max_len, {cfg.max_len}),
      std::invalid_argument);
}

TEST_CASE("single position attends only to itself") {
  Rng rng(3);
  std::vector<double> qv(4), kv(4), vv(4);
  for (auto* p : {&qv, &kv, &vv})
    for (double& x : *p) x = rng.uniform(-1, 1);
  Tensor q = Tensor::from_data({1, 4}, qv);
  Tensor k = Tensor::from_data({1, 4}, kv);
  Tensor v = Tensor::from_data({1, 4}, vv);
  std::vector<AttnSpan> spans{{0, 1, causal_mask(1)}};
  Tensor out = attention(q, k, v, spans, 2, 0.7, 0.0, nullptr);
  CHECK(out.vec() == vv);  // alpha = 1 exactly
}

TEST_CASE("causal masks are lower-triangular with unit row sums") {
  MaskPtr m = causal_mask(5);
  Rng rng(9);
  std::vector<double> scores(25);
  for (double& s : scores) s = rng.uniform(-2, 2);
  Tensor probs = masked_softmax(Tensor::from_data({5, 5}, scores), m->allowed);
  for (int r = 0; r < 5; ++r) {
    double sum = 0.0;
    for (int c = 0; c < 5; ++c) {
      double a = probs.vec()[static_cast<size_t>(r * 5 + c)];
      if (c > r) CHECK(a == 0.0);
      sum += a;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("causality: perturbing a later position leaves earlier outputs bit-identical") {
  ModelConfig cfg = tiny_config(6, 3);
  Model m = Model::init(cfg, 21);
  BoundModel b = bind_model(m, false);
  Rng rng(5);

  // layer-level probe on random embeddings
  std::vector<double> base(6 * 8);
  for (double& x : base) x = rng.uniform(-1, 1);
  std::vector<double> bumped = base;
  for (int j = 0; j < 8; ++j)
    bumped[static_cast<size_t>(5 * 8 + j)] += rng.uniform(0.5, 1.5);
  Tensor out_a = causal_layer(b, 0, Tensor::from_data({6, 8}, base));
  Tensor out_b = causal_layer(b, 0, Tensor::from_data({6, 8}, bumped));
  CHECK(std::memcmp(out_a.data(), out_b.data(), sizeof(double) * 5 * 8) == 0);
  bool last_differs = false;
  for (int j = 0; j < 8; ++j)
    last_differs = last_differs ||
                   out_a.vec()[static_cast<size_t>(5 * 8 + j)] !=
                       out_b.vec()[static_cast<size_t>(5 * 8 + j)];
  CHECK(last_differs);

  // full-stack probe on token sequences sharing a four-token prefix
  for (int rep = 0; rep < 10; ++rep) {
    TokenSequence s1, s2;
    for (int i = 0; i < 4; ++i) {
      int id = static_cast<int>(rng.below(6));
      s1.push_back(id);
      s2.push_back(id);
    }
    s1.push_back(static_cast<int>(rng.below(6)));
    s2.push_back(static_cast<int>(rng.below(6)));
    BatchInput in1, in2;
    std::vector<int> pos{0, 1, 2, 3, 4};
    in1.add_sequence(s1, pos, causal_mask(5));
    in2.add_sequence(s2, pos, causal_mask(5));
    Tensor x1 = encode(b, in1);
    Tensor x2 = encode(b, in2);
    CHECK(std::memcmp(x1.data(), x2.data(), sizeof(double) * 4 * 8) == 0);
  }
}

TEST_CASE("next_token_logits distribution properties") {
  ModelConfig cfg = tiny_config(5, 2);
  Model m = Model::init(cfg, 13);
  auto logits = next_token_logits(m, {0, 3, 2});
  auto probs = temper_distribution(logits, 1.0);
  double sum = 0.0;
  for (double p : probs) sum += p;
  CHECK(std::abs(sum - 1.0) <= 1e-9);

  // zero weights everywhere except embeddings: uniform next-token law
  Model z = zero_model(cfg);
  Rng rng(2);
  auto& emb = *z.params.at("tok_emb").data;
  for (double& x : emb) x = rng.uniform(-1, 1);
  auto zl = next_token_logits(z, {1, 2});
  auto zp = temper_distribution(zl, 1.0);
  for (double p : zp) CHECK(p == doctest::Approx(0.2).epsilon(1e-12));

  // argmax invariant under adding a constant to every logit
  auto shifted = logits;
  for (double& v : shifted) v += 17.25;
  auto probs2 = temper_distribution(shifted, 1.0);
  size_t arg1 = 0, arg2 = 0;
  for (size_t i = 1; i < probs.size(); ++i) {
    if (probs[i] > probs[arg1]) arg1 = i;
    if (probs2[i] > probs2[arg2]) arg2 = i;
  }
  CHECK(arg1 == arg2);
}

TEST_CASE("seq2seq loss: uniform model and autoregressive consistency") {
  ModelConfig cfg = tiny_config(4, 2);
  Model uniform = zero_model(cfg);
  BoundModel ub = bind_model(uniform, false);
  Example ex;
  ex.source = {2};
  ex.target = {3, 2};
  // |target| + terminator = 3 scored predictions over a 4-symbol vocabulary
  CHECK(seq2seq_loss(ub, ex).value() ==
        doctest::Approx(3.0 * std::log(4.0)).epsilon(1e-12));

  Model m = Model::init(cfg, 77);
  BoundModel b = bind_model(m, false);
  TokenSequence z = build_z(ex);
  double manual = 0.0;
  for (size_t t = ex.source.size() + 1; t < z.size(); ++t) {
    TokenSequence prefix(z.begin(), z.begin() + static_cast<long>(t));
    auto logits = next_token_logits(m, prefix);
    double lse = kernels::logsumexp(logits.data(), static_cast<int>(logits.size()));
    manual += lse - logits[static_cast<size_t>(z[t])];
  }
  CHECK(seq2seq_loss(b, ex).value() == doctest::Approx(manual).epsilon(1e-12));

  ModelConfig small = cfg;
  small.max_len = 3;
  Model tiny = Model::init(small, 1);
  CHECK_THROWS_AS(seq2seq_loss(bind_model(tiny, false), ex),
                  std::invalid_argument);
}

TEST_CASE("seq2seq loss gradient matches finite differences over parameters") {
  ModelConfig cfg = tiny_config(4, 1);
  Model m = Model::init(cfg, 99);
  Example ex;
  ex.source = {2};
  ex.target = {3};

  BoundModel bound = bind_model(m, true);
  Tensor loss = seq2seq_loss(bound, ex);
  loss.backward();

  const double h = 1e-5;
  double worst = 0.0;
  for (int pi = 0; pi < m.params.size(); ++pi) {
    auto& data = *m.params.entry(pi).data;
    const auto& g = bound.leaves[static_cast<size_t>(pi)].node_->grad;
    REQUIRE(!g.empty());
    for (size_t j = 0; j < data.size(); ++j) {
      double keep = data[j];
      data[j] = keep + h;
      double up = seq2seq_loss_value(m, ex);
      data[j] = keep - h;
      double dn = seq2seq_loss_value(m, ex);
      data[j] = keep;
      double fd = (up - dn) / (2 * h);
      double denom = std::max({1.0, std::abs(fd), std::abs(g[j])});
      worst = std::max(worst, std::abs(fd - g[j]) / denom);
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("decoder logits match the batched forward bit-for-bit") {
  Rng seeds(1234);
  for (int rep = 0; rep < 12; ++rep) {
    ModelConfig cfg;
    cfg.vocab_size = 3 + static_cast<int>(seeds.below(5));
    cfg.n_head = 1 + static_cast<int>(seeds.below(2));
    cfg.d_model = cfg.n_head * (4 + static_cast<int>(seeds.below(3)) * 2);
    cfg.d_ffn = cfg.d_model * 2;
    cfg.n_causal_layers = 1 + static_cast<int>(seeds.below(3));
    cfg.max_len = 16;
    Model m = Model::init(cfg, seeds.next_u64());

    int len = 1 + static_cast<int>(seeds.below(6));
    TokenSequence seq;
    for (int i = 0; i < len; ++i)
      seq.push_back(
          static_cast<int>(seeds.below(static_cast<uint64_t>(cfg.vocab_size))));

    Decoder dec(m);
    for (int id : seq) dec.push(id);
    auto batched = next_token_logits(m, seq);
    REQUIRE(dec.logits().size() == batched.size());
    CHECK(std::memcmp(dec.logits().data(), batched.data(),
                      batched.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("sampling behaviour") {
  // one-hot proposal: every draw is the same token
  Rng r1(1), r2(2);
  std::vector<double> peaked{40.0, 0.0, -3.0};
  CHECK(sample_token(peaked, 1.0, r1) == 0);
  CHECK(sample_token(peaked, 1.0, r2) == 0);

  // tau = 0: greedy, ties break toward the lowest id
  std::vector<double> tied{1.0, 1.0, 0.0};
  CHECK(sample_token(tied, 0.0, r1) == 0);

  // tau = 1 equals the model law exactly
  std::vector<double> logits{0.4, -1.1, 2.0};
  auto q = temper_distribution(logits, 1.0);
  std::vector<double> direct(3);
  kernels::softmax_masked(logits.data(), nullptr, 3, direct.data());
  CHECK(std::memcmp(q.data(), direct.data(), 3 * sizeof(double)) == 0);

  // empirical frequency at tau = 1 for q = [0.8, 0.2]
  std::vector<double> l2{std::log(0.8), std::log(0.2)};
  Rng rng(2024);
  int hits = 0;
  for (int i = 0; i < 10000; ++i)
    if (sample_token(l2, 1.0, rng) == 0) ++hits;
  CHECK(std::abs(hits / 10000.0 - 0.8) < 0.02);

  // infinite-temperature limit approaches uniform
  auto hot = temper_distribution(l2, 1e6);
  CHECK(hot[0] == doctest::Approx(0.5).epsilon(1e-4));

  CHECK_THROWS_AS(temper_distribution(l2, -1.0), std::invalid_argument);
}

TEST_CASE("sample_continuation is reproducible and runs past the terminator") {
  ModelConfig cfg = tiny_config(4, 1);
  Model m = Model::init(cfg, 5);
  Rng a(77), b(77);
  TokenSequence s1 = sample_continuation(m, {2, 3}, 6, 1.0, a);
  TokenSequence s2 = sample_continuation(m, {2, 3}, 6, 1.0, b);
  CHECK(s1 == s2);
  CHECK(s1.size() == 6);  // '$' does not stop sampling

  Rng c(1);
  TokenSequence greedy1 = sample_continuation(m, {2, 3}, 4, 0.0, c);
  TokenSequence greedy2 = sample_continuation(m, {2, 3}, 4, 0.0, c);
  CHECK(greedy1 == greedy2);
}

TEST_CASE("model init validation and determinism") {
  ModelConfig bad = tiny_config();
  bad.n_head = 3;  // does not divide d_model = 8
  CHECK_THROWS_AS(Model::init(bad, 1), std::invalid_argument);

  ModelConfig cfg = tiny_config();
  Model a = Model::init(cfg, 42), b = Model::init(cfg, 42);
  for (int i = 0; i < a.params.size(); ++i)
    CHECK(*a.params.entry(i).data == *b.params.entry(i).data);
}
