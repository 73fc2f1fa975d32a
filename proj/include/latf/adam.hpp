#pragma once

#include <cstdint>
#include <vector>

#include "latf/params.hpp"

namespace latf {

// Bias-corrected Adam over a ParamStore. Moment buffers are laid out
// parallel to the store's entries.
struct AdamState {
  int64_t step_count = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  AdamState() = default;
  AdamState(const ParamStore& params, double lr_, double beta1_ = 0.9,
            double beta2_ = 0.999, double epsilon_ = 1e-8);
};

// One update step; grads[i] must match params.entry(i) in size.
void adam_step(ParamStore& params,
               const std::vector<std::vector<double>>& grads, AdamState& state);

// Gradient accumulator shaped like a ParamStore.
std::vector<std::vector<double>> zero_grads(const ParamStore& params);

}  // namespace latf
