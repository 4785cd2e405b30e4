#pragma once

// Central finite-difference gradient checks against the reverse sweep.

#include "refine/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace refine::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

// `loss` must rebuild the scalar from `inputs` on each call. At most
// `max_per_input` entries of each input are probed (0 = all).
inline GradCheckResult gradcheck(const std::function<Tensor()>& loss, std::vector<Tensor> inputs, double h = 1e-5,
                                 std::size_t max_per_input = 0, std::uint64_t seed = 1) {
  for (auto& t : inputs) t.zero_grad();
  {
    ComputationRecord record;
    RecordScope scope(record);
    Tensor l = loss();
    record.backward(l);
  }
  std::vector<Matrix> analytic;
  for (const auto& t : inputs) analytic.push_back(t.grad());

  auto eval = [&] {
    NoRecordScope off;
    return loss().item();
  };
  GradCheckResult result;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Matrix& v = inputs[i].mutable_value();
    std::vector<Index> probe(static_cast<std::size_t>(v.size()));
    for (Index k = 0; k < v.size(); ++k) probe[static_cast<std::size_t>(k)] = k;
    if (max_per_input > 0 && probe.size() > max_per_input) {
      std::shuffle(probe.begin(), probe.end(), rng);
      probe.resize(max_per_input);
    }
    for (Index k : probe) {
      Scalar& x = v.data()[k];
      const Scalar saved = x;
      x = saved + h;
      const double up = eval();
      x = saved - h;
      const double down = eval();
      x = saved;
      const double numeric = (up - down) / (2.0 * h);
      result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic[i].data()[k], numeric));
      ++result.checked;
    }
  }
  return result;
}

inline Matrix random_matrix(Index rows, Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace refine::testing
