#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "efficientspeech/tensor.hpp"

namespace es {

// Central-difference estimate (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every coordinate
// of `x`. `x` is perturbed in place and restored before returning; `f` must read it.
template <typename T>
std::vector<T> finite_difference_gradient(const std::function<T()>& f, std::span<T> x, T eps = T(1e-5)) {
  std::vector<T> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T saved = x[i];
    x[i] = saved + eps;
    const T plus = f();
    x[i] = saved - eps;
    const T minus = f();
    x[i] = saved;
    grad[i] = (plus - minus) / (T(2) * eps);
  }
  return grad;
}

// Richardson-extrapolated central differences, (4 D(h/2) - D(h)) / 3. Fourth-order accurate,
// which allows a larger step and keeps round-off below the comparison tolerance.
template <typename T>
std::vector<T> richardson_gradient(const std::function<T()>& f, std::span<T> x, T h = T(1e-3)) {
  auto coarse = finite_difference_gradient<T>(f, x, h);
  auto fine = finite_difference_gradient<T>(f, x, h / T(2));
  for (std::size_t i = 0; i < fine.size(); ++i) fine[i] = (T(4) * fine[i] - coarse[i]) / T(3);
  return fine;
}

// Pure-function form for scalar functions of a vector.
template <typename T>
std::vector<T> finite_difference_gradient(const std::function<T(std::span<const T>)>& f,
                                          std::vector<T> x, T eps = T(1e-5)) {
  std::span<T> view(x);
  return finite_difference_gradient<T>([&] { return f(std::span<const T>(x)); }, view, eps);
}

// |a - b| / max(|a|, |b|, floor). Values smaller than `floor` are compared absolutely.
inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace es
