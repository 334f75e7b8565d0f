#pragma once

#include <functional>
#include <vector>

#include "stylevox/tensor.hpp"

namespace sv {

// Finite-difference validation harness for anything differentiable. The
// callable maps leaf inputs to a single-element output; inputs must be f64.
// Returns max over all input coordinates of
//   |analytic - central_difference| / max(1, |central_difference|)
// with the given step.
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                  const std::vector<Tensor>& inputs, double step = 1e-5);

}  // namespace sv
