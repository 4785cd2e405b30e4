#pragma once

#include "refine/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace refine {

// First/second moment estimates for a fixed list of parameters.
struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::int64_t step = 0;
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.999;
  Scalar epsilon = 1e-8;
};

AdamState make_adam_state(std::span<const Tensor> params);

// One bias-corrected Adam update using the gradients accumulated on `params`.
// Parameters without a gradient are treated as having a zero gradient.
void adam_step(std::span<Tensor> params, AdamState& state, Scalar lr);

}  // namespace refine
