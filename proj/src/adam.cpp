#include "refine/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace refine {

AdamState make_adam_state(std::span<const Tensor> params) {
  AdamState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const auto& p : params) {
    s.m.push_back(Matrix::Zero(p.rows(), p.cols()));
    s.v.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
  return s;
}

void adam_step(std::span<Tensor> params, AdamState& state, Scalar lr) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw std::invalid_argument("adam_step: state tracks " + std::to_string(state.m.size()) +
                                " parameters, got " + std::to_string(params.size()));
  ++state.step;
  const auto t = static_cast<Scalar>(state.step);
  const Scalar c1 = 1.0 - std::pow(state.beta1, t);
  const Scalar c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.has_grad()) {
      state.m[i] *= state.beta1;
      state.v[i] *= state.beta2;
    } else {
      const Matrix g = p.grad();
      state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
      state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g.cwiseAbs2();
    }
    p.mutable_value().array() -=
        lr * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + state.epsilon);
  }
}

}  // namespace refine
