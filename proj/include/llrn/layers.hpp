#pragma once

// A LayerBlock is one trainable weight layer (dense or 3x3 conv) followed by
// batchnorm, a leaky-ReLU and dropout, together with the single-layer
// sub-networks that produce its local learning signal:
//
//   x -> [weight] -> [batchnorm] -> [leaky-relu] = hidden -> [dropout] -> out
//                                                   |
//                         local classifier <--------+--------> similarity head
//
// Local losses attach to `hidden`; the block's output is handed downstream
// and no gradient ever comes back through it in the local modes.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>

#include "llrn/losses.hpp"
#include "llrn/ops.hpp"
#include "llrn/rng.hpp"
#include "llrn/tensor.hpp"

namespace llrn {

enum class BlockKind { Dense, Conv };

struct BlockSpec {
  BlockKind kind = BlockKind::Dense;
  std::size_t in_channels = 0;  // flattened input features for dense blocks
  std::size_t in_height = 1;
  std::size_t in_width = 1;
  std::size_t out_channels = 0;  // units for dense blocks
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
  double slope = 0.0;
  double dropout = 0.0;
  std::size_t classes = 0;
  std::size_t index = 0;  // position in the network; keys the target projection stream
  losses::LossConfig loss;

  std::size_t out_height() const;
  std::size_t out_width() const;
  std::size_t fan_in() const;
};

template <typename T>
struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  Tensor<T> m;
  Tensor<T> v;
  std::uint64_t t = 0;

  static AdamState for_param(const Tensor<T>& param) {
    return {Tensor<T>(param.shape()), Tensor<T>(param.shape()), 0};
  }
};

/// One bias-corrected Adam update. Throws NumericError on a non-finite
/// gradient, leaving param and state untouched.
template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state, double lr);

/// Live hidden-layer caches, for checking how many activations training
/// keeps around at once.
class CacheCounter {
 public:
  void acquire() {
    ++live_;
    if (live_ > peak_) peak_ = live_;
  }
  void release() { --live_; }
  int live() const { return live_; }
  int peak() const { return peak_; }
  void reset_peak() { peak_ = live_; }

 private:
  int live_ = 0;
  int peak_ = 0;
};

class CacheToken {
 public:
  CacheToken() = default;
  explicit CacheToken(CacheCounter* counter) : counter_(counter) {
    if (counter_) counter_->acquire();
  }
  CacheToken(const CacheToken&) = delete;
  CacheToken& operator=(const CacheToken&) = delete;
  CacheToken(CacheToken&& other) noexcept : counter_(std::exchange(other.counter_, nullptr)) {}
  CacheToken& operator=(CacheToken&& other) noexcept {
    if (this != &other) {
      reset();
      counter_ = std::exchange(other.counter_, nullptr);
    }
    return *this;
  }
  ~CacheToken() { reset(); }

  void reset() {
    if (counter_) counter_->release();
    counter_ = nullptr;
  }

 private:
  CacheCounter* counter_ = nullptr;
};

template <typename T>
struct BlockCache {
  Shape input_shape;  // as handed to the block, before any flattening
  Tensor<T> input;
  Tensor<T> preact;  // batchnorm output, input to the nonlinearity
  ops::BatchNormCache<T> bn;
  Tensor<T> hidden;  // nonlinearity output, where local losses attach
  ops::DropoutResult<T> dropout;  // mask only; the output moved out
  std::uint64_t generation = 0;
  CacheToken token;
};

template <typename T>
struct BlockForward {
  Tensor<T> out;
  BlockCache<T> cache;
  bool detached = false;  // gradients never flow back into the producing block
};

template <typename T>
struct BlockGrads {
  Tensor<T> weight;
  Tensor<T> bias;
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> classifier_weight;
  Tensor<T> classifier_bias;
  Tensor<T> sim_head;
  Tensor<T> input;  // only filled on request (global backprop)
};

template <typename T>
struct LocalLosses {
  T total{};
  T pred{};
  T sim{};
  Tensor<T> d_hidden;
  Tensor<T> d_classifier_weight;
  Tensor<T> d_classifier_bias;
  Tensor<T> d_sim_head;
};

enum class ParamRole { Trainable, Frozen, State };

template <typename T>
struct LayerBlock {
  BlockSpec spec;

  Tensor<T> weight;  // dense: in x out; conv: out x in x k x k
  Tensor<T> bias;
  ops::BatchNormParams<T> bn;

  Tensor<T> classifier_weight;  // pooled_dim x (classes | projection_dim); empty if unused
  Tensor<T> classifier_bias;
  Tensor<T> sim_head;    // dense: out x out; conv: out x out x 3 x 3; empty if unused
  Tensor<T> feedback;    // fixed, same shape as classifier_weight (pred-bpf)
  Tensor<T> projection;  // fixed, projection_dim x classes (bpf modes)
  std::size_t pool_kernel = 1;

  AdamState<T> adam_weight, adam_bias, adam_gamma, adam_beta;
  AdamState<T> adam_classifier_weight, adam_classifier_bias, adam_sim_head;

  std::uint64_t generation = 0;  // bumped by every parameter update

  /// Visits every stored tensor with a stable name (used for checkpoints and
  /// hashing). Empty tensors are skipped.
  void for_each_tensor(const std::function<void(const std::string&, Tensor<T>&, ParamRole)>& fn);
  void for_each_tensor(
      const std::function<void(const std::string&, const Tensor<T>&, ParamRole)>& fn) const;

  Shape output_shape(std::size_t batch) const;
};

/// Builds a block with fan-in-scaled uniform weights, zero biases, identity
/// batchnorm, and frozen Gaussian feedback/projection matrices.
template <typename T>
LayerBlock<T> init_params(const BlockSpec& spec, Rng& rng);

/// Runs weight -> batchnorm -> nonlinearity -> dropout. Train mode updates
/// the batchnorm running statistics.
template <typename T>
BlockForward<T> block_forward(LayerBlock<T>& block, const Tensor<T>& x, ops::Mode mode, Rng& rng,
                              CacheCounter* counter = nullptr);

/// Eval-mode forward without keeping a cache.
template <typename T>
Tensor<T> block_infer(const LayerBlock<T>& block, const Tensor<T>& x);

/// Every local loss configured for the block, evaluated on `hidden`.
template <typename T>
LocalLosses<T> local_losses(const LayerBlock<T>& block, const Tensor<T>& hidden,
                            std::span<const int> labels);

/// Backpropagates through this block only. d_out is the gradient at the
/// block output (after dropout), d_hidden an extra gradient at the hidden
/// activations; either may be null. Throws UsageError on a stale cache.
template <typename T>
BlockGrads<T> block_backward(const LayerBlock<T>& block, const BlockCache<T>& cache,
                             const Tensor<T>* d_out, const Tensor<T>* d_hidden,
                             bool need_input_grad);

/// Parameter gradients from the block's own local losses: one backward step
/// through each sub-network, then through the block. No input gradient.
template <typename T>
BlockGrads<T> block_local_backward(const LayerBlock<T>& block, const BlockCache<T>& cache,
                                   const LocalLosses<T>& local);

/// Adam on every parameter with a gradient present; frozen matrices are
/// never touched.
template <typename T>
void apply_gradients(LayerBlock<T>& block, const BlockGrads<T>& grads, double lr);

/// Plain dense layer trained with global cross-entropy.
template <typename T>
struct OutputLayer {
  Tensor<T> weight;  // in x classes
  Tensor<T> bias;
  AdamState<T> adam_weight, adam_bias;

  static OutputLayer init(std::size_t in_features, std::size_t classes, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const { return ops::linear(x, weight, &bias); }
};

/// FNV-1a over the raw bytes of a tensor, for immutability checks.
template <typename T>
std::uint64_t tensor_hash(const Tensor<T>& t);

}  // namespace llrn
