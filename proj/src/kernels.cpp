#include "latf/kernels.hpp"

#include <cmath>
#include <cstring>
#include <limits>

namespace latf::kernels {

namespace {

// exp for non-positive arguments (softmax operates on s - max <= 0).
// Cody-Waite reduction plus a Taylor tail; relative error ~2e-13 over the
// domain. One scalar instantiation so every caller sees identical
// per-element results regardless of surrounding codegen.
__attribute__((noinline)) double exp_nonpos(double x) {
  if (x < -700.0) return 0.0;  // would underflow; vanishes inside a softmax
  const double log2e = 1.4426950408889634074;
  const double ln2_hi = 0x1.62e42fee00000p-1;
  const double ln2_lo = 0x1.a39ef35793c76p-33;
  double kd = std::floor(x * log2e + 0.5);
  double r = (x - kd * ln2_hi) - kd * ln2_lo;
  double p = 1.0 / 11;
  p = (1.0 / 10) * (1.0 + r * p);
  p = (1.0 / 9) * (1.0 + r * p);
  p = (1.0 / 8) * (1.0 + r * p);
  p = (1.0 / 7) * (1.0 + r * p);
  p = (1.0 / 6) * (1.0 + r * p);
  p = (1.0 / 5) * (1.0 + r * p);
  p = (1.0 / 4) * (1.0 + r * p);
  p = (1.0 / 3) * (1.0 + r * p);
  p = (1.0 / 2) * (1.0 + r * p);
  p = 1.0 + r * (1.0 + r * p);
  int64_t ki = static_cast<int64_t>(kd);
  uint64_t bits = static_cast<uint64_t>(1023 + ki) << 52;
  double two_k;
  std::memcpy(&two_k, &bits, sizeof(two_k));
  return p * two_k;
}

}  // namespace

// Single out-of-line instantiation: every caller (batched attention,
// sampling decoder, standalone op) goes through the same machine code,
// which is what makes the flattened-vs-naive comparisons bit-exact.
__attribute__((noinline)) int softmax_masked(const double* s,
                                             const uint8_t* allowed, int n,
                                             double* y) {
  double mx = -std::numeric_limits<double>::infinity();
  int count = 0;
  if (allowed) {
    for (int i = 0; i < n; ++i) {
      if (allowed[i]) {
        ++count;
        if (s[i] > mx) mx = s[i];
      }
    }
  } else {
    count = n;
    for (int i = 0; i < n; ++i) {
      if (s[i] > mx) mx = s[i];
    }
  }
  if (count == 0) return 0;

  // in-order accumulation over allowed entries; masked stay exactly 0.0
  double sum = 0.0;
  if (allowed) {
    for (int i = 0; i < n; ++i) {
      if (allowed[i]) {
        y[i] = exp_nonpos(s[i] - mx);
        sum += y[i];
      } else {
        y[i] = 0.0;
      }
    }
  } else {
    for (int i = 0; i < n; ++i) {
      y[i] = exp_nonpos(s[i] - mx);
      sum += y[i];
    }
  }
  double inv = 1.0 / sum;
  for (int i = 0; i < n; ++i) y[i] *= inv;
  return count;
}

__attribute__((noinline)) void layer_norm_row(const double* x, int n,
                                              double eps, double* xhat,
                                              double* sigma_out) {
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += x[i];
  mean /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i) {
    double d = x[i] - mean;
    var += d * d;
  }
  var /= n;
  double sigma = std::sqrt(var + eps);
  double inv = 1.0 / sigma;
  for (int i = 0; i < n; ++i) xhat[i] = (x[i] - mean) * inv;
  *sigma_out = sigma;
}

__attribute__((noinline)) double logsumexp(const double* s, int n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    if (s[i] > mx) mx = s[i];
  }
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += std::exp(s[i] - mx);
  return mx + std::log(sum);
}

}  // namespace latf::kernels
