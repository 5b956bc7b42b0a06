#include "llrn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "llrn/kernels.hpp"

namespace llrn::ops {

using kernels::MatrixView;
using kernels::Transpose;

namespace {

template <typename T>
MatrixView<const T> cview(const Tensor<T>& t) {
  return MatrixView<const T>(t.data(), t.rows(), t.cols());
}

template <typename T>
MatrixView<T> mview(Tensor<T>& t) {
  return MatrixView<T>(t.data(), t.rows(), t.cols());
}

std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                        const char* what) {
  if (stride == 0) throw DimensionError(std::string(what) + ": stride must be positive");
  if (in + 2 * pad < k) {
    throw DimensionError(std::string(what) + ": kernel " + std::to_string(k) +
                         " larger than padded input " + std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

// Views a rank-2 (n x d) or rank-4 (n x c x h x w) tensor as n x features x inner.
struct FeatureLayout {
  std::size_t batch = 0;
  std::size_t features = 0;
  std::size_t inner = 1;
};

template <typename T>
FeatureLayout feature_layout(const Tensor<T>& x, const char* what) {
  if (x.rank() == 2) return {x.dim(0), x.dim(1), 1};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
  throw DimensionError(std::string(what) + ": expected rank 2 or 4, got " +
                       shape_string(x.shape()));
}

}  // namespace

// ---------------------------------------------------------------- matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner extents differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor<T> c({a.dim(0), b.dim(1)});
  kernels::gemm(Transpose::No, Transpose::No, T{1}, cview(a), cview(b), T{0}, mview(c));
  return c;
}

template <typename T>
MatmulGrads<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& grad) {
  require_rank(grad, 2, "matmul_backward");
  if (grad.dim(0) != a.dim(0) || grad.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_backward: upstream gradient " + shape_string(grad.shape()) +
                         " does not match output");
  }
  MatmulGrads<T> g{Tensor<T>::zeros_like(a), Tensor<T>::zeros_like(b)};
  kernels::gemm(Transpose::No, Transpose::Yes, T{1}, cview(grad), cview(b), T{0}, mview(g.da));
  kernels::gemm(Transpose::Yes, Transpose::No, T{1}, cview(a), cview(grad), T{0}, mview(g.db));
  return g;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias) {
  require_rank(weight, 2, "linear");
  if (x.cols() != weight.dim(0)) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  Tensor<T> out({x.rows(), weight.dim(1)});
  kernels::gemm(Transpose::No, Transpose::No, T{1}, cview(x), cview(weight), T{0}, mview(out));
  if (bias != nullptr) {
    const std::size_t m = weight.dim(1);
    for (std::size_t i = 0; i < out.rows(); ++i) {
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += (*bias)[j];
    }
  }
  return out;
}

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& weight, bool has_bias,
                               const Tensor<T>& grad, bool need_dx) {
  LinearGrads<T> g;
  g.dweight = Tensor<T>::zeros_like(weight);
  kernels::gemm(Transpose::Yes, Transpose::No, T{1}, cview(x), cview(grad), T{0},
                mview(g.dweight));
  if (has_bias) {
    const std::size_t m = weight.dim(1);
    g.dbias = Tensor<T>({m});
    for (std::size_t i = 0; i < grad.rows(); ++i) {
      for (std::size_t j = 0; j < m; ++j) g.dbias[j] += grad[i * m + j];
    }
  }
  if (need_dx) {
    g.dx = Tensor<T>({x.rows(), x.cols()});
    kernels::gemm(Transpose::No, Transpose::Yes, T{1}, cview(grad), cview(weight), T{0},
                  mview(g.dx));
    g.dx.reshape(x.shape());
  }
  return g;
}

// ---------------------------------------------------------------- conv2d

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride,
                 std::size_t pad) {
  require_rank(x, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (kernel.dim(1) != x.dim(1)) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                         " input channels, input has " + std::to_string(x.dim(1)));
  }
  if (kernel.dim(2) != kernel.dim(3)) throw DimensionError("conv2d: kernel must be square");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  const std::size_t oh = conv_extent(h, k, stride, pad, "conv2d");
  const std::size_t ow = conv_extent(w, k, stride, pad, "conv2d");
  const std::size_t patch = cin * k * k, plane = oh * ow;

  Tensor<T> out({n, cout, oh, ow});
  std::vector<T> columns(patch * plane);
  const MatrixView<const T> kmat(kernel.data(), cout, patch);
  for (std::size_t b = 0; b < n; ++b) {
    kernels::im2col(x.data() + b * cin * h * w, cin, h, w, k, stride, pad, oh, ow,
                    columns.data());
    kernels::gemm(Transpose::No, Transpose::No, T{1}, kmat,
                  MatrixView<const T>(columns.data(), patch, plane), T{0},
                  MatrixView<T>(out.data() + b * cout * plane, cout, plane));
  }
  return out;
}

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel,
                               const Tensor<T>& grad, std::size_t stride, std::size_t pad,
                               bool need_dx) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  const std::size_t oh = conv_extent(h, k, stride, pad, "conv2d_backward");
  const std::size_t ow = conv_extent(w, k, stride, pad, "conv2d_backward");
  if (grad.shape() != Shape{n, cout, oh, ow}) {
    throw DimensionError("conv2d_backward: upstream gradient " + shape_string(grad.shape()) +
                         " does not match output");
  }
  const std::size_t patch = cin * k * k, plane = oh * ow;

  Conv2dGrads<T> g;
  g.dkernel = Tensor<T>::zeros_like(kernel);
  if (need_dx) g.dx = Tensor<T>::zeros_like(x);
  std::vector<T> columns(patch * plane);
  std::vector<T> dcolumns(need_dx ? patch * plane : 0);
  const MatrixView<const T> kmat(kernel.data(), cout, patch);
  const MatrixView<T> dkmat(g.dkernel.data(), cout, patch);
  for (std::size_t b = 0; b < n; ++b) {
    const MatrixView<const T> gmat(grad.data() + b * cout * plane, cout, plane);
    kernels::im2col(x.data() + b * cin * h * w, cin, h, w, k, stride, pad, oh, ow,
                    columns.data());
    kernels::gemm(Transpose::No, Transpose::Yes, T{1}, gmat,
                  MatrixView<const T>(columns.data(), patch, plane), T{1}, dkmat);
    if (need_dx) {
      kernels::gemm(Transpose::Yes, Transpose::No, T{1}, kmat, gmat, T{0},
                    MatrixView<T>(dcolumns.data(), patch, plane));
      kernels::col2im(dcolumns.data(), cin, h, w, k, stride, pad, oh, ow,
                      g.dx.data() + b * cin * h * w);
    }
  }
  return g;
}

template <typename T>
void add_channel_bias(Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n * c; ++i) {
    const T b = bias[i % c];
    T* p = x.data() + i * plane;
    for (std::size_t j = 0; j < plane; ++j) p[j] += b;
  }
}

template <typename T>
Tensor<T> channel_bias_backward(const Tensor<T>& grad) {
  const std::size_t n = grad.dim(0), c = grad.dim(1), plane = grad.dim(2) * grad.dim(3);
  Tensor<T> db({c});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* p = grad.data() + (b * c + ch) * plane;
      T sum{0};
      for (std::size_t j = 0; j < plane; ++j) sum += p[j];
      db[ch] += sum;
    }
  }
  return db;
}

// ---------------------------------------------------------------- pooling

template <typename T>
MaxPoolResult<T> maxpool2x2(const Tensor<T>& x) {
  require_rank(x, 4, "maxpool2x2");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw DimensionError("maxpool2x2: odd spatial extent " + shape_string(x.shape()));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  MaxPoolResult<T> r{Tensor<T>({n, c, oh, ow}), std::vector<std::uint32_t>(n * c * oh * ow)};
#pragma omp parallel for schedule(static)
  for (std::size_t map = 0; map < n * c; ++map) {
    const std::size_t in_base = map * h * w;
    const std::size_t out_base = map * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xo = 0; xo < ow; ++xo) {
        std::size_t best = in_base + (2 * y) * w + 2 * xo;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = in_base + (2 * y + dy) * w + 2 * xo + dx;
            if (x[idx] > x[best]) best = idx;  // strict: first max wins
          }
        }
        r.out[out_base + y * ow + xo] = x[best];
        r.argmax[out_base + y * ow + xo] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return r;
}

template <typename T>
Tensor<T> maxpool2x2_backward(const Tensor<T>& grad, std::span<const std::uint32_t> argmax,
                              const Shape& input_shape) {
  if (argmax.size() != grad.size()) {
    throw DimensionError("maxpool2x2_backward: argmax/grad size mismatch");
  }
  Tensor<T> dx(input_shape);
  for (std::size_t i = 0; i < grad.size(); ++i) dx[argmax[i]] += grad[i];
  return dx;
}

template <typename T>
Tensor<T> avgpool(const Tensor<T>& x, std::size_t kernel) {
  require_rank(x, 4, "avgpool");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (kernel == 0 || h % kernel != 0 || w % kernel != 0) {
    throw DimensionError("avgpool: kernel " + std::to_string(kernel) + " does not divide " +
                         shape_string(x.shape()));
  }
  if (kernel == 1) return x;
  const std::size_t oh = h / kernel, ow = w / kernel;
  const T inv = T{1} / static_cast<T>(kernel * kernel);
  Tensor<T> out({n, c, oh, ow});
#pragma omp parallel for schedule(static)
  for (std::size_t map = 0; map < n * c; ++map) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xo = 0; xo < ow; ++xo) {
        T sum{0};
        for (std::size_t dy = 0; dy < kernel; ++dy) {
          for (std::size_t dx = 0; dx < kernel; ++dx) {
            sum += x[map * h * w + (y * kernel + dy) * w + xo * kernel + dx];
          }
        }
        out[map * oh * ow + y * ow + xo] = sum * inv;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> avgpool_backward(const Tensor<T>& grad, std::size_t kernel, const Shape& input_shape) {
  if (kernel == 1) return grad.reshaped(input_shape);
  const std::size_t n = input_shape[0], c = input_shape[1], h = input_shape[2],
                    w = input_shape[3];
  const std::size_t oh = h / kernel, ow = w / kernel;
  if (grad.shape() != Shape{n, c, oh, ow}) {
    throw DimensionError("avgpool_backward: gradient " + shape_string(grad.shape()) +
                         " does not match pooled input");
  }
  const T inv = T{1} / static_cast<T>(kernel * kernel);
  Tensor<T> dx(input_shape);
#pragma omp parallel for schedule(static)
  for (std::size_t map = 0; map < n * c; ++map) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xi = 0; xi < w; ++xi) {
        dx[map * h * w + y * w + xi] = grad[map * oh * ow + (y / kernel) * ow + xi / kernel] * inv;
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------- batchnorm

template <typename T>
BatchNormParams<T> BatchNormParams<T>::identity(std::size_t features) {
  return {Tensor<T>({features}, T{1}), Tensor<T>({features}, T{0}),
          Tensor<T>({features}, T{0}), Tensor<T>({features}, T{1})};
}

template <typename T>
BatchNormResult<T> batchnorm(const Tensor<T>& x, BatchNormParams<T>& params, Mode mode) {
  const auto L = feature_layout(x, "batchnorm");
  if (L.features != params.features()) {
    throw DimensionError("batchnorm: " + std::to_string(L.features) + " features, params hold " +
                         std::to_string(params.features()));
  }
  if (mode == Mode::Train && L.batch < 2) {
    throw InputError("batchnorm: train mode needs a batch of at least 2, got " +
                     std::to_string(L.batch));
  }
  BatchNormResult<T> r{Tensor<T>(x.shape()), {Tensor<T>(x.shape()), std::vector<T>(L.features), mode}};
  const std::size_t count = L.batch * L.inner;
  const T eps = static_cast<T>(BatchNormParams<T>::kEps);
  const T momentum = static_cast<T>(BatchNormParams<T>::kMomentum);

#pragma omp parallel for schedule(static)
  for (std::size_t f = 0; f < L.features; ++f) {
    T mean, var;
    if (mode == Mode::Train) {
      double sum = 0.0;
      for (std::size_t b = 0; b < L.batch; ++b) {
        const T* p = x.data() + (b * L.features + f) * L.inner;
        for (std::size_t j = 0; j < L.inner; ++j) sum += p[j];
      }
      mean = static_cast<T>(sum / static_cast<double>(count));
      double sq = 0.0;
      for (std::size_t b = 0; b < L.batch; ++b) {
        const T* p = x.data() + (b * L.features + f) * L.inner;
        for (std::size_t j = 0; j < L.inner; ++j) {
          const double d = static_cast<double>(p[j] - mean);
          sq += d * d;
        }
      }
      var = static_cast<T>(sq / static_cast<double>(count));
      // Running variance uses the unbiased estimate, as in the original
      // batchnorm inference procedure.
      const T unbiased = var * static_cast<T>(count) / static_cast<T>(count - 1);
      params.running_mean[f] = (T{1} - momentum) * params.running_mean[f] + momentum * mean;
      params.running_var[f] = (T{1} - momentum) * params.running_var[f] + momentum * unbiased;
    } else {
      mean = params.running_mean[f];
      var = params.running_var[f];
    }
    const T inv_std = T{1} / std::sqrt(var + eps);
    r.cache.inv_std[f] = inv_std;
    const T g = params.gamma[f], be = params.beta[f];
    for (std::size_t b = 0; b < L.batch; ++b) {
      const std::size_t base = (b * L.features + f) * L.inner;
      for (std::size_t j = 0; j < L.inner; ++j) {
        const T xh = (x[base + j] - mean) * inv_std;
        r.cache.xhat[base + j] = xh;
        r.out[base + j] = g * xh + be;
      }
    }
  }
  return r;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const Tensor<T>& grad, const BatchNormParams<T>& params,
                                     const BatchNormCache<T>& cache) {
  require_same_shape(grad, cache.xhat, "batchnorm_backward");
  const auto L = feature_layout(grad, "batchnorm_backward");
  const T count = static_cast<T>(L.batch * L.inner);
  BatchNormGrads<T> g{Tensor<T>(grad.shape()), Tensor<T>({L.features}), Tensor<T>({L.features})};

#pragma omp parallel for schedule(static)
  for (std::size_t f = 0; f < L.features; ++f) {
    T sum_g{0}, sum_gx{0};
    for (std::size_t b = 0; b < L.batch; ++b) {
      const std::size_t base = (b * L.features + f) * L.inner;
      for (std::size_t j = 0; j < L.inner; ++j) {
        sum_g += grad[base + j];
        sum_gx += grad[base + j] * cache.xhat[base + j];
      }
    }
    g.dbeta[f] = sum_g;
    g.dgamma[f] = sum_gx;
    const T gamma = params.gamma[f], inv_std = cache.inv_std[f];
    for (std::size_t b = 0; b < L.batch; ++b) {
      const std::size_t base = (b * L.features + f) * L.inner;
      for (std::size_t j = 0; j < L.inner; ++j) {
        if (cache.mode == Mode::Train) {
          // dxhat = grad * gamma; dx = inv_std/N * (N dxhat - sum dxhat - xhat sum(dxhat xhat))
          g.dx[base + j] = gamma * inv_std / count *
                           (count * grad[base + j] - sum_g - cache.xhat[base + j] * sum_gx);
        } else {
          g.dx[base + j] = gamma * inv_std * grad[base + j];
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------- activations

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  Tensor<T> out(x.shape());
  const std::size_t n = x.size();
#pragma omp parallel for simd schedule(static)
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] >= T{0} ? x[i] : slope * x[i];
  return out;
}

template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& grad, const Tensor<T>& x, T slope) {
  require_same_shape(grad, x, "leaky_relu_backward");
  Tensor<T> dx(x.shape());
  const std::size_t n = x.size();
#pragma omp parallel for simd schedule(static)
  for (std::size_t i = 0; i < n; ++i) dx[i] = x[i] >= T{0} ? grad[i] : slope * grad[i];
  return dx;
}

template <typename T>
DropoutResult<T> dropout(const Tensor<T>& x, double rate, Rng& rng, Mode mode) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  DropoutResult<T> r;
  if (mode == Mode::Eval || rate == 0.0) {
    r.out = x;
    return r;
  }
  r.scale = static_cast<T>(1.0 / (1.0 - rate));
  r.mask.resize(x.size());
  r.out = Tensor<T>(x.shape());
  // Mask drawing stays serial so the stream is independent of thread count.
  for (std::size_t i = 0; i < x.size(); ++i) r.mask[i] = rng.uniform() >= rate ? 1 : 0;
  for (std::size_t i = 0; i < x.size(); ++i) r.out[i] = r.mask[i] ? x[i] * r.scale : T{0};
  return r;
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& grad, const DropoutResult<T>& forward) {
  if (forward.mask.empty()) return grad;
  if (forward.mask.size() != grad.size()) {
    throw DimensionError("dropout_backward: mask does not match gradient");
  }
  Tensor<T> dx(grad.shape());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    dx[i] = forward.mask[i] ? grad[i] * forward.scale : T{0};
  }
  return dx;
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> std_per_feature_map(const Tensor<T>& x) {
  require_rank(x, 4, "std_per_feature_map");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (plane == 0) throw DimensionError("std_per_feature_map: empty feature map");
  Tensor<T> out({n, c});
#pragma omp parallel for schedule(static)
  for (std::size_t map = 0; map < n * c; ++map) {
    const T* p = x.data() + map * plane;
    T mean{0};
    for (std::size_t j = 0; j < plane; ++j) mean += p[j];
    mean /= static_cast<T>(plane);
    T var{0};
    for (std::size_t j = 0; j < plane; ++j) var += (p[j] - mean) * (p[j] - mean);
    var /= static_cast<T>(plane);
    out[map] = std::sqrt(var + static_cast<T>(kStdEps));
  }
  return out;
}

template <typename T>
Tensor<T> std_per_feature_map_backward(const Tensor<T>& grad, const Tensor<T>& x,
                                       const Tensor<T>& stddev) {
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (grad.shape() != Shape{n, c} || stddev.shape() != Shape{n, c}) {
    throw DimensionError("std_per_feature_map_backward: expected n x c gradient");
  }
  Tensor<T> dx(x.shape());
#pragma omp parallel for schedule(static)
  for (std::size_t map = 0; map < n * c; ++map) {
    const T* p = x.data() + map * plane;
    T mean{0};
    for (std::size_t j = 0; j < plane; ++j) mean += p[j];
    mean /= static_cast<T>(plane);
    const T scale = grad[map] / (static_cast<T>(plane) * stddev[map]);
    for (std::size_t j = 0; j < plane; ++j) dx[map * plane + j] = scale * (p[j] - mean);
  }
  return dx;
}

// ---------------------------------------------------------------- losses

template <typename T>
LossAndGrad<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != n) {
    throw InputError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  LossAndGrad<T> r{T{0}, Tensor<T>(logits.shape())};
  const T inv_n = T{1} / static_cast<T>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw InputError("cross_entropy: label " + std::to_string(y) + " out of range");
    }
    const T* z = logits.data() + i * classes;
    const T m = *std::max_element(z, z + classes);
    T sum{0};
    for (std::size_t j = 0; j < classes; ++j) sum += std::exp(z[j] - m);
    const T lse = m + std::log(sum);
    total += static_cast<double>(lse - z[y]);
    for (std::size_t j = 0; j < classes; ++j) {
      const T p = std::exp(z[j] - lse);
      r.grad[i * classes + j] = (p - (static_cast<int>(j) == y ? T{1} : T{0})) * inv_n;
    }
  }
  r.loss = static_cast<T>(total / static_cast<double>(n));
  return r;
}

template <typename T>
LossAndGrad<T> cross_entropy_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  require_same_shape(logits, targets, "cross_entropy_logits");
  const std::size_t n = targets.dim(0), classes = targets.dim(1);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    int hot = -1;
    for (std::size_t j = 0; j < classes; ++j) {
      const T v = targets[i * classes + j];
      if (v == T{1} && hot < 0) {
        hot = static_cast<int>(j);
      } else if (v != T{0}) {
        throw InputError("cross_entropy_logits: target row " + std::to_string(i) +
                         " is not one-hot");
      }
    }
    if (hot < 0) {
      throw InputError("cross_entropy_logits: target row " + std::to_string(i) + " has no 1");
    }
    labels[i] = hot;
  }
  return cross_entropy(logits, labels);
}

template <typename T>
LossAndGrad<T> binary_cross_entropy_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  require_same_shape(logits, targets, "binary_cross_entropy_logits");
  LossAndGrad<T> r{T{0}, Tensor<T>(logits.shape())};
  const std::size_t count = logits.size();
  const T inv = T{1} / static_cast<T>(count);
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const T z = logits[i], t = targets[i];
    // log(1 + exp(z)) - z t, evaluated without overflow.
    total += static_cast<double>(std::max(z, T{0}) - z * t + std::log1p(std::exp(-std::abs(z))));
    const T sigma = z >= T{0} ? T{1} / (T{1} + std::exp(-z))
                              : std::exp(z) / (T{1} + std::exp(z));
    r.grad[i] = (sigma - t) * inv;
  }
  r.loss = static_cast<T>(total / static_cast<double>(count));
  return r;
}

template <typename T>
Tensor<T> one_hot(std::span<const int> labels, std::size_t classes) {
  Tensor<T> y({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw InputError("one_hot: label " + std::to_string(labels[i]) + " out of range");
    }
    y[i * classes + static_cast<std::size_t>(labels[i])] = T{1};
  }
  return y;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& x) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = x.data() + i * d;
    out[i] = static_cast<int>(std::max_element(row, row + d) - row);
  }
  return out;
}

#define LLRN_INSTANTIATE(T)                                                                    \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template MatmulGrads<T> matmul_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);             \
  template LinearGrads<T> linear_backward(const Tensor<T>&, const Tensor<T>&, bool,            \
                                          const Tensor<T>&, bool);                             \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);     \
  template Conv2dGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                          std::size_t, std::size_t, bool);                     \
  template void add_channel_bias(Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> channel_bias_backward(const Tensor<T>&);                                  \
  template MaxPoolResult<T> maxpool2x2(const Tensor<T>&);                                      \
  template Tensor<T> maxpool2x2_backward(const Tensor<T>&, std::span<const std::uint32_t>,     \
                                         const Shape&);                                        \
  template Tensor<T> avgpool(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> avgpool_backward(const Tensor<T>&, std::size_t, const Shape&);            \
  template struct BatchNormParams<T>;                                                          \
  template BatchNormResult<T> batchnorm(const Tensor<T>&, BatchNormParams<T>&, Mode);          \
  template BatchNormGrads<T> batchnorm_backward(const Tensor<T>&, const BatchNormParams<T>&,   \
                                                const BatchNormCache<T>&);                     \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                          \
  template Tensor<T> leaky_relu_backward(const Tensor<T>&, const Tensor<T>&, T);               \
  template DropoutResult<T> dropout(const Tensor<T>&, double, Rng&, Mode);                     \
  template Tensor<T> dropout_backward(const Tensor<T>&, const DropoutResult<T>&);              \
  template Tensor<T> std_per_feature_map(const Tensor<T>&);                                    \
  template Tensor<T> std_per_feature_map_backward(const Tensor<T>&, const Tensor<T>&,          \
                                                  const Tensor<T>&);                           \
  template LossAndGrad<T> cross_entropy(const Tensor<T>&, std::span<const int>);               \
  template LossAndGrad<T> cross_entropy_logits(const Tensor<T>&, const Tensor<T>&);            \
  template LossAndGrad<T> binary_cross_entropy_logits(const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> one_hot(std::span<const int>, std::size_t);                               \
  template std::vector<int> argmax_rows(const Tensor<T>&);

LLRN_INSTANTIATE(float)
LLRN_INSTANTIATE(double)

#undef LLRN_INSTANTIATE

}  // namespace llrn::ops
