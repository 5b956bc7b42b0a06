#pragma once

// Forward kernels and their hand-paired backward passes. All functions are
// pure apart from the explicit Rng argument and the running statistics that
// batchnorm updates in train mode.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "llrn/rng.hpp"
#include "llrn/tensor.hpp"

namespace llrn::ops {

enum class Mode { Train, Eval };

// ---------------------------------------------------------------- matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
struct MatmulGrads {
  Tensor<T> da;
  Tensor<T> db;
};

/// For c = a b with upstream gradient g: da = g b^T, db = a^T g.
template <typename T>
MatmulGrads<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& grad);

/// x (n x d) times w (d x m) plus a per-column bias; x may be any rank and is
/// flattened to n x d.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias);

template <typename T>
struct LinearGrads {
  Tensor<T> dx;  // shaped like the (unflattened) input; empty if not requested
  Tensor<T> dweight;
  Tensor<T> dbias;  // empty when the layer has no bias
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& weight, bool has_bias,
                               const Tensor<T>& grad, bool need_dx = true);

// ---------------------------------------------------------------- conv2d

/// Zero-padded cross-correlation. x: n x c_in x h x w,
/// kernel: c_out x c_in x k x k.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride = 1,
                 std::size_t pad = 1);

template <typename T>
struct Conv2dGrads {
  Tensor<T> dx;  // empty if not requested
  Tensor<T> dkernel;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel,
                               const Tensor<T>& grad, std::size_t stride = 1,
                               std::size_t pad = 1, bool need_dx = true);

/// Adds a per-channel bias to an n x c x h x w tensor in place.
template <typename T>
void add_channel_bias(Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> channel_bias_backward(const Tensor<T>& grad);

// ---------------------------------------------------------------- pooling

template <typename T>
struct MaxPoolResult {
  Tensor<T> out;
  std::vector<std::uint32_t> argmax;  // flat input index per output element
};

/// 2x2 window, stride 2. Ties resolve to the first element in row-major order.
template <typename T>
MaxPoolResult<T> maxpool2x2(const Tensor<T>& x);

template <typename T>
Tensor<T> maxpool2x2_backward(const Tensor<T>& grad, std::span<const std::uint32_t> argmax,
                              const Shape& input_shape);

template <typename T>
Tensor<T> avgpool(const Tensor<T>& x, std::size_t kernel);

template <typename T>
Tensor<T> avgpool_backward(const Tensor<T>& grad, std::size_t kernel, const Shape& input_shape);

// ---------------------------------------------------------------- batchnorm

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;

  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  static BatchNormParams identity(std::size_t features);
  std::size_t features() const { return gamma.size(); }
};

template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
  Mode mode = Mode::Train;
};

template <typename T>
struct BatchNormResult {
  Tensor<T> out;
  BatchNormCache<T> cache;
};

/// Per-feature normalization: per column for n x d input, per channel over
/// n*h*w for n x c x h x w input. Train mode uses population batch variance
/// and folds the batch statistics into the running estimates.
template <typename T>
BatchNormResult<T> batchnorm(const Tensor<T>& x, BatchNormParams<T>& params, Mode mode);

template <typename T>
struct BatchNormGrads {
  Tensor<T> dx;
  Tensor<T> dgamma;
  Tensor<T> dbeta;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const Tensor<T>& grad, const BatchNormParams<T>& params,
                                     const BatchNormCache<T>& cache);

// ---------------------------------------------------------------- activations

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope);

/// Uses the forward input to pick the branch (x >= 0 passes the gradient).
template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& grad, const Tensor<T>& x, T slope);

template <typename T>
struct DropoutResult {
  Tensor<T> out;
  std::vector<std::uint8_t> mask;  // empty when dropout acted as the identity
  T scale{1};
};

/// Inverted dropout: survivors are scaled by 1/(1-rate) at train time.
template <typename T>
DropoutResult<T> dropout(const Tensor<T>& x, double rate, Rng& rng, Mode mode);

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& grad, const DropoutResult<T>& forward);

// ---------------------------------------------------------------- reductions

inline constexpr double kStdEps = 1e-8;

/// Population standard deviation over the spatial extent of each
/// (example, channel) map: n x c x h x w -> n x c.
template <typename T>
Tensor<T> std_per_feature_map(const Tensor<T>& x);

template <typename T>
Tensor<T> std_per_feature_map_backward(const Tensor<T>& grad, const Tensor<T>& x,
                                       const Tensor<T>& stddev);

// ---------------------------------------------------------------- losses

template <typename T>
struct LossAndGrad {
  T loss{};
  Tensor<T> grad;
};

/// Mean softmax cross-entropy with integer class labels.
template <typename T>
LossAndGrad<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// Same, with one-hot targets; every row must contain exactly one 1.
template <typename T>
LossAndGrad<T> cross_entropy_logits(const Tensor<T>& logits, const Tensor<T>& targets);

/// Mean binary cross-entropy of sigmoid(logits) against {0,1} targets,
/// averaged over every element.
template <typename T>
LossAndGrad<T> binary_cross_entropy_logits(const Tensor<T>& logits, const Tensor<T>& targets);

template <typename T>
Tensor<T> one_hot(std::span<const int> labels, std::size_t classes);

/// Row-wise argmax.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& x);

}  // namespace llrn::ops
