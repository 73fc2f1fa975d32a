#pragma once

#include <cstdint>

// Row-level numeric kernels shared by the graph ops and the incremental
// decoder. Everything that contributes to a cross-path bit-exactness
// guarantee lives here, with a fixed accumulation order, so the same
// sequence of floating-point operations runs no matter which code path
// asked for it.
namespace latf::kernels {

// Fixed 4-lane accumulation: deterministic and vectorizer-friendly.
inline double dot(const double* a, const double* b, int n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// y += a * x, elementwise
inline void axpy(double a, const double* x, double* y, int n) {
  for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

// Masked, max-stabilized softmax of s[0..n) into y. Entries with
// allowed[i]==0 are excluded before exponentiation and come out exactly
// 0.0; allowed==nullptr means every entry participates. The normalizing
// sum runs over allowed entries in index order. Returns the number of
// allowed entries (0 signals a fully masked row; caller decides how to
// fail).
int softmax_masked(const double* s, const uint8_t* allowed, int n, double* y);

// xhat = (x - mean) / sqrt(var + eps); returns sigma via out-param.
void layer_norm_row(const double* x, int n, double eps, double* xhat,
                    double* sigma_out);

// activation: x * max(x, 0)  (squared ReLU; C1-smooth at the origin)
inline double act(double x) { return x > 0.0 ? x * x : 0.0; }
inline double act_grad(double x) { return x > 0.0 ? 2.0 * x : 0.0; }

// log(sum(exp(s))) over a row, max-stabilized, fixed order
double logsumexp(const double* s, int n);

}  // namespace latf::kernels
