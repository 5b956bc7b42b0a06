#include "llrn/reference.hpp"

namespace llrn::reference {

using kernels::MatrixView;
using kernels::Transpose;

template <typename T>
void gemm(Transpose trans_a, Transpose trans_b, T alpha, MatrixView<const T> a,
          MatrixView<const T> b, T beta, MatrixView<T> c) {
  const bool ta = trans_a == Transpose::Yes;
  const bool tb = trans_b == Transpose::Yes;
  const std::size_t m = ta ? a.cols : a.rows;
  const std::size_t k = ta ? a.rows : a.cols;
  const std::size_t n = tb ? b.rows : b.cols;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T sum{0};
      for (std::size_t p = 0; p < k; ++p) {
        sum += (ta ? a(p, i) : a(i, p)) * (tb ? b(j, p) : b(p, j));
      }
      c(i, j) = beta == T{0} ? alpha * sum : alpha * sum + beta * c(i, j);
    }
  }
}

namespace {

std::size_t out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride,
                 std::size_t pad) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  const std::size_t oh = out_extent(h, k, stride, pad), ow = out_extent(w, k, stride, pad);
  Tensor<T> out({n, cout, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xo = 0; xo < ow; ++xo) {
          T sum{0};
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(y * stride + ky) -
                                static_cast<std::ptrdiff_t>(pad);
                const auto ix = static_cast<std::ptrdiff_t>(xo * stride + kx) -
                                static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
                    ix >= static_cast<std::ptrdiff_t>(w))
                  continue;
                sum += x.at(b, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) *
                       kernel.at(o, c, ky, kx);
              }
          out.at(b, o, y, xo) = sum;
        }
  return out;
}

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel,
                               const Tensor<T>& grad, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  const std::size_t oh = grad.dim(2), ow = grad.dim(3);
  Conv2dGrads<T> g{Tensor<T>::zeros_like(x), Tensor<T>::zeros_like(kernel)};
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xo = 0; xo < ow; ++xo) {
          const T go = grad.at(b, o, y, xo);
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(y * stride + ky) -
                                static_cast<std::ptrdiff_t>(pad);
                const auto ix = static_cast<std::ptrdiff_t>(xo * stride + kx) -
                                static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
                    ix >= static_cast<std::ptrdiff_t>(w))
                  continue;
                const auto uy = static_cast<std::size_t>(iy);
                const auto ux = static_cast<std::size_t>(ix);
                g.dx.at(b, c, uy, ux) += go * kernel.at(o, c, ky, kx);
                g.dkernel.at(o, c, ky, kx) += go * x.at(b, c, uy, ux);
              }
        }
  return g;
}

template void gemm<float>(Transpose, Transpose, float, MatrixView<const float>,
                          MatrixView<const float>, float, MatrixView<float>);
template void gemm<double>(Transpose, Transpose, double, MatrixView<const double>,
                           MatrixView<const double>, double, MatrixView<double>);
template Tensor<float> conv2d(const Tensor<float>&, const Tensor<float>&, std::size_t, std::size_t);
template Tensor<double> conv2d(const Tensor<double>&, const Tensor<double>&, std::size_t,
                               std::size_t);
template Conv2dGrads<float> conv2d_backward(const Tensor<float>&, const Tensor<float>&,
                                            const Tensor<float>&, std::size_t, std::size_t);
template Conv2dGrads<double> conv2d_backward(const Tensor<double>&, const Tensor<double>&,
                                             const Tensor<double>&, std::size_t, std::size_t);

}  // namespace llrn::reference
