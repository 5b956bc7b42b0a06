#pragma once

// OpenMP-parallel compute kernels. Every kernel here has a serial
// counterpart in reference.hpp that the tests compare against.
//
// Work is split across threads by output rows, and each output element is
// accumulated in a fixed order, so results do not depend on thread count.

#include <cstddef>

namespace llrn::kernels {

/// Row-major matrix window: element (r, c) lives at data[r * ld + c].
template <typename T>
struct MatrixView {
  T* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t ld = 0;

  MatrixView() = default;
  MatrixView(T* d, std::size_t r, std::size_t c) : data(d), rows(r), cols(c), ld(c) {}
  MatrixView(T* d, std::size_t r, std::size_t c, std::size_t stride)
      : data(d), rows(r), cols(c), ld(stride) {}

  T& operator()(std::size_t r, std::size_t c) const { return data[r * ld + c]; }
};

enum class Transpose : bool { No = false, Yes = true };

/// c = alpha * op(a) * op(b) + beta * c. When beta == 0, c is overwritten
/// without being read.
template <typename T>
void gemm(Transpose trans_a, Transpose trans_b, T alpha, MatrixView<const T> a,
          MatrixView<const T> b, T beta, MatrixView<T> c);

/// Unrolls one (channels x height x width) image into a
/// (channels*k*k) x (out_h*out_w) column matrix for a k x k window.
template <typename T>
void im2col(const T* image, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kernel, std::size_t stride, std::size_t pad, std::size_t out_h,
            std::size_t out_w, T* columns);

/// Adjoint of im2col: scatters (adds) the column matrix back into image.
template <typename T>
void col2im(const T* columns, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kernel, std::size_t stride, std::size_t pad, std::size_t out_h,
            std::size_t out_w, T* image);

int max_threads();
void set_threads(int n);

}  // namespace llrn::kernels
