#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "latf/adam.hpp"
#include "latf/grad_check.hpp"
#include "latf/params.hpp"
#include "latf/rng.hpp"
#include "latf/tensor.hpp"

using namespace latf;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  int64_t n = 1;
  for (int e : shape) n *= e;
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = rng.uniform(-scale, scale);
  return Tensor::from_data(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("tensor shape invariants") {
  CHECK_THROWS(Tensor::from_data({2, 2}, {1.0, 2.0, 3.0}));
  Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.shape() == std::vector<int>{2, 3});
}

TEST_CASE("matmul identity and projector") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor out = matmul(eye, a);
  CHECK(out.vec() == std::vector<double>{1, 2, 3, 4});

  Tensor proj = Tensor::from_data({2, 2}, {1, 0, 0, 0});
  Tensor v = Tensor::from_data({2, 1}, {5, 7});
  CHECK(matmul(proj, v).vec() == std::vector<double>{5, 0});

  CHECK_THROWS_WITH_AS(matmul(a, Tensor::from_data({3, 1}, {1, 2, 3})),
                       doctest::Contains("[2 x 2]"), std::invalid_argument);
}

TEST_CASE("matmul gradient against finite differences") {
  Rng rng(11);
  for (int rep = 0; rep < 5; ++rep) {
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    double err = grad_check(
        [](const std::vector<Tensor>& in) { return sum(matmul(in[0], in[1])); },
        {a, b});
    CHECK(err < 1e-4);
  }
}

TEST_CASE("masked softmax values") {
  Tensor logits = Tensor::from_data({2}, {0.0, 0.0});
  Tensor out = masked_softmax(logits, {1, 1});
  CHECK(out.vec()[0] == doctest::Approx(0.5).epsilon(1e-12));

  Tensor two = Tensor::from_data({2}, {3.0, 1.0});
  Tensor picked = masked_softmax(two, {1, 0});
  CHECK(picked.vec()[0] == 1.0);
  CHECK(picked.vec()[1] == 0.0);  // excluded entries are exactly zero

  // direct evaluation oracle for the unmasked row
  Tensor three = Tensor::from_data({3}, {1.0, 2.0, 3.0});
  Tensor soft = masked_softmax(three, {1, 1, 1});
  double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(soft.vec()[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-10));
  CHECK(soft.vec()[1] == doctest::Approx(std::exp(2.0) / z).epsilon(1e-10));
  CHECK(soft.vec()[2] == doctest::Approx(std::exp(3.0) / z).epsilon(1e-10));
  CHECK(soft.vec()[0] == doctest::Approx(0.0900).epsilon(1e-2));
  CHECK(soft.vec()[2] == doctest::Approx(0.6652).epsilon(1e-2));

  CHECK_THROWS_AS(masked_softmax(two, {0, 0}), std::invalid_argument);
}

TEST_CASE("masked softmax rows sum to one with exact zeros") {
  Rng rng(23);
  for (int rep = 0; rep < 50; ++rep) {
    int rows = 1 + static_cast<int>(rng.below(4));
    int cols = 2 + static_cast<int>(rng.below(6));
    Tensor logits = random_tensor({rows, cols}, rng, 30.0);
    std::vector<uint8_t> mask(static_cast<size_t>(rows * cols));
    for (int r = 0; r < rows; ++r) {
      bool any = false;
      for (int c = 0; c < cols; ++c) {
        mask[static_cast<size_t>(r * cols + c)] = rng.below(2) ? 1 : 0;
        any = any || mask[static_cast<size_t>(r * cols + c)];
      }
      if (!any) mask[static_cast<size_t>(r * cols + rng.below(cols))] = 1;
    }
    Tensor out = masked_softmax(logits, mask);
    for (int r = 0; r < rows; ++r) {
      double s = 0.0;
      for (int c = 0; c < cols; ++c) {
        double y = out.vec()[static_cast<size_t>(r * cols + c)];
        if (!mask[static_cast<size_t>(r * cols + c)])
          CHECK(std::bit_cast<uint64_t>(y) == 0);  // exactly +0.0
        s += y;
      }
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("layer_norm examples") {
  Tensor gain = Tensor::from_data({3}, {1, 1, 1});
  Tensor bias = Tensor::from_data({3}, {0, 0, 0});
  Tensor constant = Tensor::from_data({3}, {1, 1, 1});
  Tensor zeroed = layer_norm(constant, gain, bias);
  for (double v : zeroed.vec()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));

  Tensor two = Tensor::from_data({2}, {-1.0, 1.0});
  Tensor g2 = Tensor::from_data({2}, {1, 1});
  Tensor b2 = Tensor::from_data({2}, {0, 0});
  Tensor normed = layer_norm(two, g2, b2);
  CHECK(normed.vec()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(normed.vec()[1] == doctest::Approx(1.0).epsilon(1e-4));

  Tensor gz = Tensor::from_data({2}, {0, 0});
  Tensor bb = Tensor::from_data({2}, {2.5, 2.5});
  Tensor flat = layer_norm(two, gz, bb);
  for (double v : flat.vec()) CHECK(v == 2.5);
}

TEST_CASE("cross entropy examples") {
  // uniform over 2 symbols
  Tensor lp = log_softmax(Tensor::from_data({2}, {0.0, 0.0}));
  CHECK(cross_entropy(lp, 0).value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(cross_entropy(lp, std::vector<double>{0.5, 0.5}).value() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // p = [0.9, 0.1], soft target [0.75, 0.25]
  Tensor lp2 = Tensor::from_data({2}, {std::log(0.9), std::log(0.1)});
  double expected = -(0.75 * std::log(0.9) + 0.25 * std::log(0.1));
  CHECK(cross_entropy(lp2, std::vector<double>{0.75, 0.25}).value() ==
        doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(0.6547).epsilon(1e-3));

  CHECK_THROWS_AS(cross_entropy(lp2, 5), std::invalid_argument);
  // not a log-distribution
  CHECK_THROWS_AS(cross_entropy(Tensor::from_data({2}, {0.0, 0.0}), 0),
                  std::invalid_argument);
}

TEST_CASE("adam examples") {
  ParamStore ps;
  ps.add("w", {2}, {0.0, 0.0});
  AdamState state(ps, 0.1);

  // zero gradient is the identity
  adam_step(ps, {{0.0, 0.0}}, state);
  CHECK(ps.at("w").data->at(0) == 0.0);
  CHECK(state.step_count == 1);

  // hand-evaluated first step: unit gradient moves by ~ -lr
  ParamStore ps2;
  ps2.add("w", {1}, {0.0});
  AdamState s2(ps2, 0.1);
  adam_step(ps2, {{1.0}}, s2);
  CHECK(ps2.at("w").data->at(0) == doctest::Approx(-0.1).epsilon(1e-6));

  adam_step(ps2, {{1.0}}, s2);
  CHECK(s2.step_count == 2);
}

TEST_CASE("grad_check worked examples") {
  // f(x) = x^2 at x = 3 (as the 1x1 product x . x)
  Tensor x = Tensor::from_data({1, 1}, {3.0});
  double err = grad_check(
      [](const std::vector<Tensor>& in) { return sum(matmul(in[0], in[0])); },
      {x});
  CHECK(err < 1e-8);

  // constant function
  double cerr = grad_check(
      [](const std::vector<Tensor>& in) {
        (void)in;
        return Tensor::scalar(4.0);
      },
      {x});
  CHECK(cerr == 0.0);

  // masked_softmax over matmul chain
  Rng rng(5);
  Tensor a = random_tensor({2, 3}, rng);
  Tensor b = random_tensor({3, 4}, rng);
  std::vector<uint8_t> mask{1, 1, 0, 1, 0, 1, 1, 1};
  double chain = grad_check(
      [mask](const std::vector<Tensor>& in) {
        Tensor prod = matmul(in[0], in[1]);
        Tensor weights = Tensor::from_data({4, 1}, {0.3, -0.2, 0.9, 0.4});
        return sum(matmul(masked_softmax(prod, mask), weights));
      },
      {a, b});
  CHECK(chain < 1e-4);
}

TEST_CASE("gradients of remaining ops") {
  Rng rng(7);
  auto check = [&](const char* name, auto fn, std::vector<Tensor> point) {
    INFO(name);
    CHECK(grad_check(fn, point) < 1e-4);
  };

  check("linear",
        [](const std::vector<Tensor>& in) { return sum(linear(in[0], in[1])); },
        {random_tensor({3, 4}, rng), random_tensor({2, 4}, rng)});
  check("add",
        [](const std::vector<Tensor>& in) { return sum(add(in[0], in[1])); },
        {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
  check("add_rowvec",
        [](const std::vector<Tensor>& in) {
          return sum(add_rowvec(in[0], in[1]));
        },
        {random_tensor({3, 4}, rng), random_tensor({4}, rng)});
  check("scale",
        [](const std::vector<Tensor>& in) { return sum(scale(in[0], -2.5)); },
        {random_tensor({5}, rng)});
  check("gather_rows",
        [](const std::vector<Tensor>& in) {
          return sum(gather_rows(in[0], {2, 0, 2}));
        },
        {random_tensor({3, 3}, rng)});
  check("layer_norm",
        [](const std::vector<Tensor>& in) {
          return sum(layer_norm(in[0], in[1], in[2]));
        },
        {random_tensor({3, 5}, rng), random_tensor({5}, rng),
         random_tensor({5}, rng)});
  check("activation",
        [](const std::vector<Tensor>& in) { return sum(activation(in[0])); },
        {random_tensor({4, 3}, rng)});
  check("log_softmax",
        [](const std::vector<Tensor>& in) {
          Tensor w = Tensor::from_data({3, 1}, {0.2, -0.4, 1.0});
          return sum(matmul(log_softmax(in[0]), w));
        },
        {random_tensor({2, 3}, rng)});
  check("cross_entropy_hard",
        [](const std::vector<Tensor>& in) {
          return cross_entropy(log_softmax(in[0]), 1);
        },
        {random_tensor({3}, rng)});
  check("cross_entropy_rows_soft",
        [](const std::vector<Tensor>& in) {
          return cross_entropy_rows(in[0],
                                    std::vector<double>{0.2, 0.3, 0.5, 1, 0, 0});
        },
        {random_tensor({2, 3}, rng)});
  check("embedding",
        [](const std::vector<Tensor>& in) {
          std::vector<double> pos(12, 0.25);
          return sum(embed_rows(in[0], {0, 2, 1, 2}, pos, 4, {0, 1, 2, 3}));
        },
        {random_tensor({3, 3}, rng)});
  check("attention",
        [](const std::vector<Tensor>& in) {
          std::vector<AttnSpan> spans{{0, 4, causal_mask(4)}};
          return sum(attention(in[0], in[1], in[2], spans, 2, 0.5, 0.0, nullptr));
        },
        {random_tensor({4, 4}, rng), random_tensor({4, 4}, rng),
         random_tensor({4, 4}, rng)});
  check("dropout_fixed_mask",
        [](const std::vector<Tensor>& in) {
          Rng drop(99);
          return sum(dropout(in[0], 0.3, drop));
        },
        {random_tensor({4, 4}, rng)});
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  Rng rng(31);
  ParamStore ps;
  std::vector<double> v1(12), v2(5);
  for (double& x : v1) x = rng.uniform(-3, 3);
  for (double& x : v2) x = rng.uniform(-3, 3);
  ps.add("block.weight", {3, 4}, v1);
  ps.add("block.bias", {5}, v2);

  std::string path =
      (std::filesystem::temp_directory_path() / "latf_ckpt_test.latf").string();
  save_checkpoint(ps, path);
  ParamStore back = load_checkpoint(path);
  REQUIRE(back.size() == ps.size());
  for (int i = 0; i < ps.size(); ++i) {
    CHECK(back.entry(i).name == ps.entry(i).name);
    CHECK(back.entry(i).shape == ps.entry(i).shape);
    REQUIRE(back.entry(i).data->size() == ps.entry(i).data->size());
    CHECK(std::memcmp(back.entry(i).data->data(), ps.entry(i).data->data(),
                      ps.entry(i).data->size() * sizeof(double)) == 0);
  }
  std::filesystem::remove(path);
}

TEST_CASE("dropout behaviour") {
  Rng rng(3);
  Tensor x = random_tensor({20, 20}, rng);
  Rng d1(42), d2(42);
  Tensor a = dropout(x, 0.4, d1);
  Tensor b = dropout(x, 0.4, d2);
  CHECK(a.vec() == b.vec());  // same stream, same mask

  // p = 0 is the identity
  Rng d3(1);
  CHECK(dropout(x, 0.0, d3).vec() == x.vec());

  // empirical drop rate
  int dropped = 0;
  for (double v : a.vec())
    if (v == 0.0) ++dropped;
  CHECK(std::abs(dropped / 400.0 - 0.4) < 0.08);
}
