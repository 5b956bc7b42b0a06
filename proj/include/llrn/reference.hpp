#pragma once

// Serial, loop-for-loop implementations kept as oracles for the parallel
// kernels. Slow on purpose; only tests and the benchmark use them.

#include <cstddef>

#include "llrn/kernels.hpp"
#include "llrn/tensor.hpp"

namespace llrn::reference {

template <typename T>
void gemm(kernels::Transpose trans_a, kernels::Transpose trans_b, T alpha,
          kernels::MatrixView<const T> a, kernels::MatrixView<const T> b, T beta,
          kernels::MatrixView<T> c);

/// Direct seven-loop cross-correlation with zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride,
                 std::size_t pad);

template <typename T>
struct Conv2dGrads {
  Tensor<T> dx;
  Tensor<T> dkernel;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel,
                               const Tensor<T>& grad, std::size_t stride, std::size_t pad);

}  // namespace llrn::reference
