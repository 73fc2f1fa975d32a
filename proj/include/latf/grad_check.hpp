#pragma once

#include <functional>
#include <vector>

#include "latf/tensor.hpp"

namespace latf {

// Compares the reverse-mode gradient of a scalar-valued function against
// central finite differences (step h) and returns the maximum over all
// coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|). The inputs are
// cloned internally; `f` must be a deterministic function of them.
// Non-finite values anywhere are an error.
double grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    const std::vector<Tensor>& point, double h = 1e-5);

}  // namespace latf
