#pragma once

#include <cmath>
#include <functional>

#include "llrn/gradcheck.hpp"
#include "llrn/rng.hpp"
#include "llrn/tensor.hpp"

namespace llrn::test {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(scale * rng.normal());
  return t;
}

inline double fd_error(const Tensor<double>& analytic, Tensor<double>& param,
                       const std::function<double()>& loss, double step = 1e-5) {
  return gradcheck::relative_error(analytic, gradcheck::numeric_gradient(param, loss, step));
}

/// Sum of grad * f(x), the scalar whose gradient w.r.t. x is the backward of f given grad.
inline double weighted_sum(const Tensor<double>& out, const Tensor<double>& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * weights[i];
  return s;
}

}  // namespace llrn::test
