#pragma once

#include <cstdint>

#include "efficientspeech/rng.hpp"
#include "efficientspeech/tensor.hpp"

namespace es::test {

template <typename T = double>
Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Values in [lo, hi] kept at least `gap` away from zero (for kinked functions).
template <typename T = double>
Tensor<T> random_away_from_zero(Rng& rng, Shape shape, double gap = 1e-2) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) {
    double x = rng.uniform(-1.0, 1.0);
    if (std::abs(x) < gap) x = x < 0 ? -gap : gap;
    v = static_cast<T>(x);
  }
  return t;
}

}  // namespace es::test
