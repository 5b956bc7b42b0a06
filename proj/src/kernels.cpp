#include "llrn/kernels.hpp"

#include <algorithm>
#include <vector>

#include <omp.h>

namespace llrn::kernels {

namespace {

constexpr std::size_t kRowBlock = 4;
constexpr std::size_t kColBlock = 256;

// Materializes op(m) as a dense row-major matrix when it is transposed.
template <typename T>
MatrixView<const T> as_row_major(Transpose trans, MatrixView<const T> m, std::vector<T>& scratch) {
  if (trans == Transpose::No) return m;
  scratch.resize(m.rows * m.cols);
  const std::size_t rows = m.cols;
  const std::size_t cols = m.rows;
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) scratch[r * cols + c] = m(c, r);
  }
  return MatrixView<const T>(scratch.data(), rows, cols);
}

}  // namespace

template <typename T>
void gemm(Transpose trans_a, Transpose trans_b, T alpha, MatrixView<const T> a,
          MatrixView<const T> b, T beta, MatrixView<T> c) {
  std::vector<T> a_scratch, b_scratch;
  const auto A = as_row_major(trans_a, a, a_scratch);
  const auto B = as_row_major(trans_b, b, b_scratch);
  const std::size_t m = A.rows, k = A.cols, n = B.cols;
  const std::size_t row_blocks = (m + kRowBlock - 1) / kRowBlock;

#pragma omp parallel for schedule(static)
  for (std::size_t rb = 0; rb < row_blocks; ++rb) {
    const std::size_t i0 = rb * kRowBlock;
    const std::size_t i1 = std::min(m, i0 + kRowBlock);
    for (std::size_t i = i0; i < i1; ++i) {
      T* crow = &c(i, 0);
      if (beta == T{0}) {
        std::fill(crow, crow + n, T{0});
      } else if (beta != T{1}) {
        for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
      }
    }
    for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
      const std::size_t j1 = std::min(n, j0 + kColBlock);
      for (std::size_t p = 0; p < k; ++p) {
        const T* brow = &B(p, 0);
        for (std::size_t i = i0; i < i1; ++i) {
          const T aip = alpha * A(i, p);
          T* crow = &c(i, 0);
#pragma omp simd
          for (std::size_t j = j0; j < j1; ++j) crow[j] += aip * brow[j];
        }
      }
    }
  }
}

template <typename T>
void im2col(const T* image, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kernel, std::size_t stride, std::size_t pad, std::size_t out_h,
            std::size_t out_w, T* columns) {
  const std::size_t plane = out_h * out_w;
#pragma omp parallel for schedule(static)
  for (std::size_t ch = 0; ch < channels; ++ch) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        T* out = columns + ((ch * kernel + ky) * kernel + kx) * plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                          static_cast<std::ptrdiff_t>(pad);
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                            static_cast<std::ptrdiff_t>(pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(height) &&
                                ix < static_cast<std::ptrdiff_t>(width);
            out[oy * out_w + ox] =
                inside ? image[(ch * height + static_cast<std::size_t>(iy)) * width +
                               static_cast<std::size_t>(ix)]
                       : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* columns, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kernel, std::size_t stride, std::size_t pad, std::size_t out_h,
            std::size_t out_w, T* image) {
  const std::size_t plane = out_h * out_w;
  // Each thread owns whole input channels, so no two threads touch the same
  // image element.
#pragma omp parallel for schedule(static)
  for (std::size_t ch = 0; ch < channels; ++ch) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        const T* in = columns + ((ch * kernel + ky) * kernel + kx) * plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                          static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                            static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
            image[(ch * height + static_cast<std::size_t>(iy)) * width +
                  static_cast<std::size_t>(ix)] += in[oy * out_w + ox];
          }
        }
      }
    }
  }
}

int max_threads() { return omp_get_max_threads(); }

void set_threads(int n) { omp_set_num_threads(n); }

#define LLRN_INSTANTIATE(T)                                                                   \
  template void gemm<T>(Transpose, Transpose, T, MatrixView<const T>, MatrixView<const T>, T, \
                        MatrixView<T>);                                                       \
  template void im2col<T>(const T*, std::size_t, std::size_t, std::size_t, std::size_t,      \
                          std::size_t, std::size_t, std::size_t, std::size_t, T*);           \
  template void col2im<T>(const T*, std::size_t, std::size_t, std::size_t, std::size_t,      \
                          std::size_t, std::size_t, std::size_t, std::size_t, T*);

LLRN_INSTANTIATE(float)
LLRN_INSTANTIATE(double)

#undef LLRN_INSTANTIATE

}  // namespace llrn::kernels
