#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "doctest.h"
#include "latf/adam.hpp"
#include "latf/kernels.hpp"
#include "latf/lookahead.hpp"
#include "reference_model.hpp"

using namespace latf;

namespace {

ModelConfig base_config(int vocab = 4, int layers = 2, int d = 8) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.d_model = d;
  cfg.d_ffn = 2 * d;
  cfg.n_head = 2;
  cfg.n_causal_layers = layers;
  cfg.max_len = 48;
  return cfg;
}

ModelConfig extend_config(const ModelConfig& base, int extra) {
  ModelConfig cfg = base;
  cfg.n_lookahead_layers = extra;
  return cfg;
}

TokenSequence random_prefix(Rng& rng, int len, int vocab) {
  TokenSequence s;
  for (int i = 0; i < len; ++i)
    s.push_back(static_cast<int>(rng.below(static_cast<uint64_t>(vocab))));
  return s;
}

}  // namespace

TEST_CASE("rollout set sampling") {
  ModelConfig cfg = base_config();
  Model base = Model::init(cfg, 3);
  LookaheadConfig lc;
  lc.n_rollouts = 3;
  lc.rollout_len = 4;
  TokenSequence prefix{1, 2, 0};

  RolloutSet a = sample_rollout_set(base, prefix, lc, 555);
  RolloutSet b = sample_rollout_set(base, prefix, lc, 555);
  CHECK(a.strings == b.strings);  // bit-identical under a fixed seed
  CHECK(a.prefix_len == 3);
  CHECK(a.strings.size() == 3);
  for (const auto& s : a.strings) CHECK(s.size() == 4);

  // M = 1 reduces to a single sample_continuation call on the same stream
  LookaheadConfig one = lc;
  one.n_rollouts = 1;
  RolloutSet single = sample_rollout_set(base, prefix, one, 777);
  Rng rng(777);
  TokenSequence direct = sample_continuation(base, prefix, 4, 1.0, rng);
  CHECK(single.strings[0] == direct);

  // deterministic proposal (tau = 0): all rows identical
  LookaheadConfig greedy = lc;
  greedy.tau = 0.0;
  RolloutSet g = sample_rollout_set(base, prefix, greedy, 1);
  CHECK(g.strings[0] == g.strings[1]);
  CHECK(g.strings[1] == g.strings[2]);
}

TEST_CASE("flattened layout positions are copy-independent") {
  RolloutSet rs;
  rs.prefix_len = 2;
  rs.strings = {{1, 0, 2}, {3, 3, 3}};
  FlatLayout flat = build_flat_layout({0, 1}, rs);
  CHECK(flat.ids == std::vector<int>{0, 1, 1, 0, 2, 3, 3, 3});
  CHECK(flat.positions == std::vector<int>{0, 1, 2, 3, 4, 2, 3, 4});
}

TEST_CASE("flattened encoder equals the naive per-copy construction bit-for-bit") {
  Rng rng(2025);
  for (int rep = 0; rep < 20; ++rep) {
    int d = 2 * (2 + static_cast<int>(rng.below(3)));  // 4, 6, 8
    ModelConfig cfg = base_config(3 + static_cast<int>(rng.below(3)),
                                  1 + static_cast<int>(rng.below(2)), d);
    Model m = Model::init(cfg, rng.next_u64());
    int t = 1 + static_cast<int>(rng.below(4));
    int M = 1 + static_cast<int>(rng.below(3));
    int N = 1 + static_cast<int>(rng.below(3));
    TokenSequence prefix = random_prefix(rng, t, cfg.vocab_size);
    LookaheadConfig lc;
    lc.n_rollouts = M;
    lc.rollout_len = N;
    RolloutSet rs = sample_rollout_set(m, prefix, lc, rng.next_u64());

    BoundModel b = bind_model(m, false);
    Tensor flat = encode_shared_prefix_and_rollouts(b, prefix, rs);
    auto naive = latf_testref::naive_concat_encoding(m, prefix, rs);

    // prefix block equals every copy's prefix rows; rollout blocks match
    for (int mm = 0; mm < M; ++mm) {
      for (int r = 0; r < t; ++r)
        CHECK(std::memcmp(flat.data() + static_cast<size_t>(r) * d,
                          naive[static_cast<size_t>(mm)][static_cast<size_t>(r)].data(),
                          sizeof(double) * static_cast<size_t>(d)) == 0);
      for (int i = 0; i < N; ++i) {
        const double* flat_row =
            flat.data() + static_cast<size_t>(t + mm * N + i) * d;
        CHECK(std::memcmp(flat_row,
                          naive[static_cast<size_t>(mm)][static_cast<size_t>(t + i)].data(),
                          sizeof(double) * static_cast<size_t>(d)) == 0);
      }
    }
  }
}

TEST_CASE("swapping rollouts permutes blocks and fixes the prefix") {
  ModelConfig cfg = base_config();
  Model m = Model::init(cfg, 8);
  BoundModel b = bind_model(m, false);
  TokenSequence prefix{0, 2, 1};
  LookaheadConfig lc;
  lc.n_rollouts = 2;
  lc.rollout_len = 3;
  RolloutSet rs = sample_rollout_set(m, prefix, lc, 4242);
  RolloutSet swapped = rs;
  std::swap(swapped.strings[0], swapped.strings[1]);

  Tensor a = encode_shared_prefix_and_rollouts(b, prefix, rs);
  Tensor c = encode_shared_prefix_and_rollouts(b, prefix, swapped);
  int d = cfg.d_model, t = 3, N = 3;
  CHECK(std::memcmp(a.data(), c.data(), sizeof(double) * static_cast<size_t>(t * d)) == 0);
  CHECK(std::memcmp(a.data() + static_cast<size_t>(t) * d,
                    c.data() + static_cast<size_t>(t + N) * d,
                    sizeof(double) * static_cast<size_t>(N * d)) == 0);
  CHECK(std::memcmp(a.data() + static_cast<size_t>(t + N) * d,
                    c.data() + static_cast<size_t>(t) * d,
                    sizeof(double) * static_cast<size_t>(N * d)) == 0);
}

TEST_CASE("bidirectional layer matches the M-copy reference within 1e-12") {
  Rng rng(909);
  for (int rep = 0; rep < 8; ++rep) {
    ModelConfig base = base_config(4, 1, 8);
    ModelConfig cfg = extend_config(base, 1);
    Model m = Model::init(cfg, rng.next_u64());
    int t = 1 + static_cast<int>(rng.below(3));
    int M = 1 + static_cast<int>(rng.below(3));
    int N = 1 + static_cast<int>(rng.below(2));
    TokenSequence prefix = random_prefix(rng, t, cfg.vocab_size);
    LookaheadConfig lc;
    lc.n_rollouts = M;
    lc.rollout_len = N;
    Model proposal = Model::init(base, rng.next_u64());
    RolloutSet rs = sample_rollout_set(proposal, prefix, lc, rng.next_u64());

    BoundModel b = bind_model(m, false);
    Tensor lower = encode_shared_prefix_and_rollouts(b, prefix, rs);
    Tensor flat_out = bidirectional_layer(b, 1, lower);

    // per-copy inputs replicated from the flattened lower output
    int d = cfg.d_model;
    std::vector<latf_testref::Matrix> copies(static_cast<size_t>(M));
    for (int mm = 0; mm < M; ++mm) {
      latf_testref::Matrix rows;
      for (int r = 0; r < t + N; ++r) {
        int src = r < t ? r : t + mm * N + (r - t);
        std::vector<double> row(static_cast<size_t>(d));
        std::memcpy(row.data(), lower.data() + static_cast<size_t>(src) * d,
                    sizeof(double) * static_cast<size_t>(d));
        rows.push_back(std::move(row));
      }
      copies[static_cast<size_t>(mm)] = std::move(rows);
    }
    auto ref = latf_testref::mcopy_bidirectional_layer(m, 1, copies, t);

    for (int mm = 0; mm < M; ++mm) {
      for (int r = 0; r < t + N; ++r) {
        int dst = r < t ? r : t + mm * N + (r - t);
        for (int j = 0; j < d; ++j) {
          double got = flat_out.vec()[static_cast<size_t>(dst) * d + static_cast<size_t>(j)];
          double want = ref.outputs[static_cast<size_t>(mm)][static_cast<size_t>(r)][static_cast<size_t>(j)];
          CHECK(std::abs(got - want) < 1e-12);
        }
      }
    }
  }
}

TEST_CASE("bidirectional attention reaches everything; causal does not") {
  ModelConfig cfg = extend_config(base_config(4, 1, 8), 1);
  Model m = Model::init(cfg, 31);
  BoundModel b = bind_model(m, false);
  TokenSequence prefix{0, 1, 2};
  RolloutSet rs;
  rs.prefix_len = 3;
  rs.strings = {{1, 2, 0}, {2, 2, 1}};

  Tensor lower = encode_shared_prefix_and_rollouts(b, prefix, rs);
  Tensor up = bidirectional_layer(b, 1, lower);

  RolloutSet bumped = rs;
  bumped.strings[1][2] = bumped.strings[1][2] == 0 ? 1 : 0;
  Tensor lower2 = encode_shared_prefix_and_rollouts(b, prefix, bumped);
  Tensor up2 = bidirectional_layer(b, 1, lower2);

  // causal half: prefix rows identical even though a rollout changed
  int d = cfg.d_model;
  CHECK(std::memcmp(lower.data(), lower2.data(), sizeof(double) * 3 * static_cast<size_t>(d)) == 0);
  // bidirectional half: prefix rows feel the perturbed rollout token
  bool differs = false;
  for (int j = 0; j < 3 * d; ++j)
    differs = differs || up.vec()[static_cast<size_t>(j)] != up2.vec()[static_cast<size_t>(j)];
  CHECK(differs);
}

TEST_CASE("warm start reproduces the base model exactly") {
  ModelConfig bcfg = base_config(4, 2, 8);
  Model base = Model::init(bcfg, 1001);
  ModelConfig lcfg = extend_config(bcfg, 1);
  Model look = init_from_base(base, lcfg, 2002);

  // copied tensors are bit-equal to the base checkpoint
  for (const auto& e : base.params.entries()) {
    const auto& mine = look.params.at(e.name);
    CHECK(std::memcmp(mine.data->data(), e.data->data(),
                      e.data->size() * sizeof(double)) == 0);
  }

  Rng rng(77);
  LookaheadConfig lc;
  lc.n_rollouts = 2;
  lc.rollout_len = 3;
  for (int rep = 0; rep < 25; ++rep) {
    TokenSequence prefix =
        random_prefix(rng, 1 + static_cast<int>(rng.below(5)), bcfg.vocab_size);
    RolloutSet rs = sample_rollout_set(base, prefix, lc, rng.next_u64());
    auto dist = lookahead_next_token_distribution(look, prefix, rs);
    auto logits = next_token_logits(base, prefix);
    std::vector<double> expect(logits.size());
    kernels::softmax_masked(logits.data(), nullptr,
                            static_cast<int>(logits.size()), expect.data());
    for (size_t i = 0; i < dist.size(); ++i)
      CHECK(std::abs(dist[i] - expect[i]) < 1e-12);
    double sum = 0.0;
    for (double p : dist) sum += p;
    CHECK(std::abs(sum - 1.0) <= 1e-9);

    auto again = lookahead_next_token_distribution(look, prefix, rs);
    CHECK(std::memcmp(again.data(), dist.data(), dist.size() * sizeof(double)) == 0);
  }

  CHECK_THROWS_AS(init_from_base(base, bcfg, 1), std::invalid_argument);
  ModelConfig wrong = extend_config(bcfg, 1);
  wrong.d_model = 16;
  wrong.d_ffn = 32;
  CHECK_THROWS_AS(init_from_base(base, wrong, 1), std::invalid_argument);
}

TEST_CASE("one training step breaks the warm-start identity") {
  ModelConfig bcfg = base_config(4, 1, 8);
  Model base = Model::init(bcfg, 11);
  Model look = init_from_base(base, extend_config(bcfg, 1), 12);

  TokenSequence prefix{2, 0, 3};
  LookaheadConfig lc;
  lc.n_rollouts = 2;
  lc.rollout_len = 2;
  RolloutSet rs = sample_rollout_set(base, prefix, lc, 99);

  BoundModel bound = bind_model(look, true);
  FlatLayout flat = build_flat_layout(prefix, rs);
  BatchInput in;
  add_flat_sequence(in, flat);
  Tensor x = encode(bound, in);
  Tensor logits = linear(gather_rows(x, {flat.prefix_len - 1}), bound.tok_emb);
  Tensor loss = cross_entropy_rows(logits, std::vector<int>{1});
  loss.backward();

  auto grads = zero_grads(look.params);
  for (size_t i = 0; i < bound.leaves.size(); ++i)
    if (!bound.leaves[i].node_->grad.empty()) grads[i] = bound.leaves[i].node_->grad;
  AdamState opt(look.params, 0.05);
  adam_step(look.params, grads, opt);

  auto dist = lookahead_next_token_distribution(look, prefix, rs);
  auto logits_base = next_token_logits(base, prefix);
  std::vector<double> base_dist(logits_base.size());
  kernels::softmax_masked(logits_base.data(), nullptr,
                          static_cast<int>(logits_base.size()), base_dist.data());
  double max_diff = 0.0;
  for (size_t i = 0; i < dist.size(); ++i)
    max_diff = std::max(max_diff, std::abs(dist[i] - base_dist[i]));
  CHECK(max_diff > 1e-6);
}

TEST_CASE("gradients flow through the full lookahead stack") {
  ModelConfig bcfg = base_config(4, 1, 6);
  bcfg.n_head = 1;
  Model base = Model::init(bcfg, 5);
  Model look = init_from_base(base, extend_config(bcfg, 1), 6);
  // shift the new layer off the exact identity point first
  Rng jit(3);
  for (int i = 0; i < look.params.size(); ++i) {
    auto& e = look.params.entry(i);
    if (e.name.rfind("layer1.", 0) == 0)
      for (double& v : *e.data) v += jit.uniform(-0.05, 0.05);
  }

  TokenSequence prefix{1, 3};
  LookaheadConfig lc;
  lc.n_rollouts = 2;
  lc.rollout_len = 2;
  RolloutSet rs = sample_rollout_set(base, prefix, lc, 17);

  auto loss_value = [&](const Model& mm) {
    BoundModel b = bind_model(mm, false);
    FlatLayout flat = build_flat_layout(prefix, rs);
    BatchInput in;
    add_flat_sequence(in, flat);
    Tensor x = encode(b, in);
    Tensor logits = linear(gather_rows(x, {flat.prefix_len - 1}), b.tok_emb);
    return cross_entropy_rows(logits, std::vector<int>{2}).value();
  };

  BoundModel bound = bind_model(look, true);
  FlatLayout flat = build_flat_layout(prefix, rs);
  BatchInput in;
  add_flat_sequence(in, flat);
  Tensor x = encode(bound, in);
  Tensor logits = linear(gather_rows(x, {flat.prefix_len - 1}), bound.tok_emb);
  Tensor loss = cross_entropy_rows(logits, std::vector<int>{2});
  loss.backward();

  const double h = 1e-5;
  double worst = 0.0;
  for (int pi = 0; pi < look.params.size(); ++pi) {
    auto& data = *look.params.entry(pi).data;
    const auto& g = bound.leaves[static_cast<size_t>(pi)].node_->grad;
    REQUIRE(!g.empty());
    for (size_t j = 0; j < data.size(); ++j) {
      double keep = data[j];
      data[j] = keep + h;
      double up = loss_value(look);
      data[j] = keep - h;
      double dn = loss_value(look);
      data[j] = keep;
      double fd = (up - dn) / (2 * h);
      double denom = std::max({1.0, std::abs(fd), std::abs(g[j])});
      worst = std::max(worst, std::abs(fd - g[j]) / denom);
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("permuting rollouts leaves the distribution unchanged to 1e-9") {
  ModelConfig bcfg = base_config(5, 2, 8);
  Model base = Model::init(bcfg, 21);
  Model look = init_from_base(base, extend_config(bcfg, 1), 22);
  // make the lookahead layer matter
  Rng jit(9);
  for (int i = 0; i < look.params.size(); ++i) {
    auto& e = look.params.entry(i);
    if (e.name.rfind("layer2.", 0) == 0)
      for (double& v : *e.data) v += jit.uniform(-0.2, 0.2);
  }

  TokenSequence prefix{0, 4, 2};
  LookaheadConfig lc;
  lc.n_rollouts = 3;
  lc.rollout_len = 3;
  RolloutSet rs = sample_rollout_set(base, prefix, lc, 5150);
  RolloutSet rotated = rs;
  std::rotate(rotated.strings.begin(), rotated.strings.begin() + 1,
              rotated.strings.end());

  auto a = lookahead_next_token_distribution(look, prefix, rs);
  auto b = lookahead_next_token_distribution(look, prefix, rotated);
  for (size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-9);
}

TEST_CASE("sequence_log_prob") {
  ModelConfig bcfg = base_config(4, 1, 8);
  Model base = Model::init(bcfg, 41);
  Model look = init_from_base(base, extend_config(bcfg, 1), 42);
  LookaheadConfig lc;
  lc.n_rollouts = 2;
  lc.rollout_len = 2;

  TokenSequence seq{1, 3, 0, 2};
  double lp1 = sequence_log_prob(look, base, seq, lc, 33);
  double lp2 = sequence_log_prob(look, base, seq, lc, 33);
  CHECK(lp1 == lp2);  // fixed seed, bit-identical
  CHECK(lp1 <= 0.0);  // every summand is a log-probability

  // a single scored position reduces to one distribution lookup
  TokenSequence pair{2, 1};
  double single = sequence_log_prob(look, base, pair, lc, 7);
  uint64_t step_seed = derive_seed(7, {tag("rollout"), uint64_t{1}});
  RolloutSet rs = sample_rollout_set(base, {2}, lc, step_seed);
  auto dist = lookahead_next_token_distribution(look, {2}, rs);
  CHECK(single == doctest::Approx(std::log(dist[1])).epsilon(1e-12));
}

TEST_CASE("rollout dump format") {
  RolloutSet rs;
  rs.prefix_len = 4;
  rs.strings = {{0, 1, 2}, {3, 3, 0}};
  std::ostringstream os;
  dump_rollouts(os, rs);
  CHECK(os.str() == "4\t1\t0 1 2\n4\t2\t3 3 0\n");
}

TEST_CASE("flattened layout beyond max_len is rejected") {
  ModelConfig bcfg = base_config(4, 1, 8);
  bcfg.max_len = 10;
  Model base = Model::init(bcfg, 50);
  BoundModel b = bind_model(base, false);
  RolloutSet rs;
  rs.prefix_len = 4;
  rs.strings = {{0, 0, 0, 0}, {1, 1, 1, 1}};  // 4 + 8 tokens > 10
  CHECK_THROWS_AS(encode_shared_prefix_and_rollouts(b, {0, 1, 2, 3}, rs),
                  std::invalid_argument);
}
