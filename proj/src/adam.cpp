#include "latf/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace latf {

AdamState::AdamState(const ParamStore& params, double lr_, double beta1_,
                     double beta2_, double epsilon_)
    : lr(lr_), beta1(beta1_), beta2(beta2_), epsilon(epsilon_) {
  first_moment.reserve(static_cast<size_t>(params.size()));
  second_moment.reserve(static_cast<size_t>(params.size()));
  for (const auto& e : params.entries()) {
    first_moment.emplace_back(e.data->size(), 0.0);
    second_moment.emplace_back(e.data->size(), 0.0);
  }
}

std::vector<std::vector<double>> zero_grads(const ParamStore& params) {
  std::vector<std::vector<double>> g;
  g.reserve(static_cast<size_t>(params.size()));
  for (const auto& e : params.entries()) g.emplace_back(e.data->size(), 0.0);
  return g;
}

void adam_step(ParamStore& params,
               const std::vector<std::vector<double>>& grads,
               AdamState& state) {
  if (static_cast<int>(grads.size()) != params.size() ||
      static_cast<int>(state.first_moment.size()) != params.size())
    throw std::invalid_argument("adam_step: gradient/state layout mismatch");
  state.step_count += 1;
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  for (int i = 0; i < params.size(); ++i) {
    ParamStore::Entry& e = params.entry(i);
    const std::vector<double>& g = grads[static_cast<size_t>(i)];
    if (g.size() != e.data->size())
      throw std::invalid_argument("adam_step: gradient for " + e.name +
                                  " has wrong size");
    std::vector<double>& m = state.first_moment[static_cast<size_t>(i)];
    std::vector<double>& v = state.second_moment[static_cast<size_t>(i)];
    double* p = e.data->data();
    for (size_t j = 0; j < g.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      double mhat = m[j] / bc1;
      double vhat = v[j] / bc2;
      p[j] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

}  // namespace latf
