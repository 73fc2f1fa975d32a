#include "latf/grad_check.hpp"

#include <cmath>
#include <stdexcept>

namespace latf {

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& point, double h) {
  // working copies: differentiable leaves for the reverse pass
  std::vector<Tensor> leaves;
  leaves.reserve(point.size());
  for (const Tensor& t : point)
    leaves.push_back(Tensor::from_data(t.shape(), t.vec(), true));

  Tensor out = f(leaves);
  if (out.numel() != 1)
    throw std::invalid_argument("grad_check: f must return a scalar");
  if (!std::isfinite(out.value()))
    throw std::invalid_argument("grad_check: f evaluated to a non-finite value");
  out.backward();

  double worst = 0.0;
  for (size_t i = 0; i < leaves.size(); ++i) {
    const std::vector<double>& base = point[i].vec();
    // a leaf disconnected from the output keeps an empty grad: treat as 0
    std::vector<double> g_ad(base.size(), 0.0);
    if (!leaves[i].node_->grad.empty()) g_ad = leaves[i].node_->grad;

    for (size_t j = 0; j < base.size(); ++j) {
      auto eval_at = [&](double delta) {
        std::vector<Tensor> probe;
        probe.reserve(point.size());
        for (size_t p = 0; p < point.size(); ++p) {
          std::vector<double> vals = point[p].vec();
          if (p == i) vals[j] += delta;
          probe.push_back(Tensor::from_data(point[p].shape(), std::move(vals)));
        }
        double v = f(probe).value();
        if (!std::isfinite(v))
          throw std::invalid_argument(
              "grad_check: f evaluated to a non-finite value");
        return v;
      };
      double g_fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
      if (!std::isfinite(g_ad[j]) || !std::isfinite(g_fd))
        throw std::invalid_argument("grad_check: non-finite gradient");
      double denom = std::max({1.0, std::abs(g_ad[j]), std::abs(g_fd)});
      worst = std::max(worst, std::abs(g_ad[j] - g_fd) / denom);
    }
  }
  return worst;
}

}  // namespace latf
