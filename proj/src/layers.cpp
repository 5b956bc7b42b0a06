#include "llrn/layers.hpp"

#include <cmath>
#include <cstring>
#include <string>

namespace llrn {

using losses::LossMode;

std::size_t BlockSpec::out_height() const {
  if (kind == BlockKind::Dense) return 1;
  return (in_height + 2 * pad - kernel) / stride + 1;
}

std::size_t BlockSpec::out_width() const {
  if (kind == BlockKind::Dense) return 1;
  return (in_width + 2 * pad - kernel) / stride + 1;
}

std::size_t BlockSpec::fan_in() const {
  return kind == BlockKind::Dense ? in_channels : in_channels * kernel * kernel;
}

template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state, double lr) {
  require_same_shape(param, grad, "adam_step");
  if (!grad.all_finite()) {
    throw NumericError("adam_step: non-finite gradient for parameter " +
                       shape_string(param.shape()));
  }
  if (state.m.shape() != param.shape()) state = AdamState<T>::for_param(param);
  ++state.t;
  const double b1 = AdamState<T>::kBeta1, b2 = AdamState<T>::kBeta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  const T tb1 = static_cast<T>(b1), tb2 = static_cast<T>(b2);
  const T inv_c1 = static_cast<T>(1.0 / c1), inv_c2 = static_cast<T>(1.0 / c2);
  const T step = static_cast<T>(lr), eps = static_cast<T>(AdamState<T>::kEps);
  const std::size_t n = param.size();
#pragma omp parallel for simd schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    const T g = grad[i];
    state.m[i] = tb1 * state.m[i] + (T{1} - tb1) * g;
    state.v[i] = tb2 * state.v[i] + (T{1} - tb2) * g * g;
    const T mhat = state.m[i] * inv_c1;
    const T vhat = state.v[i] * inv_c2;
    param[i] -= step * mhat / (std::sqrt(vhat) + eps);
  }
}

namespace {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  T limit = static_cast<T>(bound);
  while (static_cast<double>(limit) >= bound) limit = std::nextafter(limit, T{0});
  for (auto& v : t.values()) v = std::clamp(static_cast<T>(rng.uniform(-bound, bound)), -limit, limit);
  return t;
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

template <typename T>
void add_into(Tensor<T>& acc, const Tensor<T>& g) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

}  // namespace

template <typename T>
void LayerBlock<T>::for_each_tensor(
    const std::function<void(const std::string&, Tensor<T>&, ParamRole)>& fn) {
  auto visit = [&](const char* name, Tensor<T>& t, ParamRole role) {
    if (!t.empty()) fn(name, t, role);
  };
  visit("weight", weight, ParamRole::Trainable);
  visit("bias", bias, ParamRole::Trainable);
  visit("bn.gamma", bn.gamma, ParamRole::Trainable);
  visit("bn.beta", bn.beta, ParamRole::Trainable);
  visit("bn.running_mean", bn.running_mean, ParamRole::State);
  visit("bn.running_var", bn.running_var, ParamRole::State);
  visit("classifier.weight", classifier_weight, ParamRole::Trainable);
  visit("classifier.bias", classifier_bias, ParamRole::Trainable);
  visit("sim_head.weight", sim_head, ParamRole::Trainable);
  visit("feedback", feedback, ParamRole::Frozen);
  visit("projection", projection, ParamRole::Frozen);
}

template <typename T>
void LayerBlock<T>::for_each_tensor(
    const std::function<void(const std::string&, const Tensor<T>&, ParamRole)>& fn) const {
  const_cast<LayerBlock*>(this)->for_each_tensor(
      [&](const std::string& name, Tensor<T>& t, ParamRole role) { fn(name, t, role); });
}

template <typename T>
Shape LayerBlock<T>::output_shape(std::size_t batch) const {
  if (spec.kind == BlockKind::Dense) return {batch, spec.out_channels};
  return {batch, spec.out_channels, spec.out_height(), spec.out_width()};
}

template <typename T>
LayerBlock<T> init_params(const BlockSpec& spec, Rng& rng) {
  if (spec.fan_in() == 0) throw ConfigError("layer block: zero fan-in");
  if (spec.out_channels == 0) throw ConfigError("layer block: zero output width");
  if (!(spec.slope >= 0.0 && spec.slope < 1.0)) {
    throw ConfigError("layer block: slope must lie in [0, 1)");
  }
  if (!(spec.dropout >= 0.0 && spec.dropout < 1.0)) {
    throw ConfigError("layer block: dropout must lie in [0, 1)");
  }
  spec.loss.validate();
  const LossMode mode = spec.loss.mode;
  if (losses::uses_pred(mode) || losses::uses_sim(mode)) {
    if (spec.classes < 2) throw ConfigError("layer block: need at least 2 classes");
  }

  LayerBlock<T> b;
  b.spec = spec;
  const std::size_t out = spec.out_channels;
  const double bound = std::sqrt(1.0 / static_cast<double>(spec.fan_in()));
  if (spec.kind == BlockKind::Dense) {
    b.weight = uniform_tensor<T>({spec.in_channels, out}, bound, rng);
  } else {
    if (spec.in_height + 2 * spec.pad < spec.kernel || spec.in_width + 2 * spec.pad < spec.kernel) {
      throw ConfigError("layer block: kernel larger than padded input");
    }
    b.weight = uniform_tensor<T>({out, spec.in_channels, spec.kernel, spec.kernel}, bound, rng);
  }
  b.bias = Tensor<T>({out});
  b.bn = ops::BatchNormParams<T>::identity(out);

  std::size_t pooled_dim = out;
  if (spec.kind == BlockKind::Conv) {
    const std::size_t oh = spec.out_height(), ow = spec.out_width();
    if (oh != ow) throw ConfigError("layer block: local heads need square feature maps");
    const auto choice = losses::choose_pool_kernel(out, oh, spec.loss.pool_target_dim);
    b.pool_kernel = choice.kernel;
    pooled_dim = choice.flat_dim;
  }

  if (losses::uses_pred(mode)) {
    const std::size_t width = losses::is_bpf(mode) ? spec.loss.projection_dim : spec.classes;
    const double cbound = std::sqrt(1.0 / static_cast<double>(pooled_dim));
    b.classifier_weight = uniform_tensor<T>({pooled_dim, width}, cbound, rng);
    b.classifier_bias = Tensor<T>({width});
  }
  if (losses::uses_sim_head(mode)) {
    if (spec.kind == BlockKind::Dense) {
      b.sim_head = uniform_tensor<T>({out, out}, std::sqrt(1.0 / static_cast<double>(out)), rng);
    } else {
      b.sim_head =
          uniform_tensor<T>({out, out, 3, 3}, std::sqrt(1.0 / static_cast<double>(9 * out)), rng);
    }
  }
  if (losses::is_bpf(mode)) {
    // Each layer draws its own projection from a stream keyed by its index.
    Rng proj_rng = Rng::derive(spec.loss.projection_seed, spec.index);
    b.projection = normal_tensor<T>({spec.loss.projection_dim, spec.classes},
                                    1.0 / std::sqrt(static_cast<double>(spec.classes)), proj_rng);
    if (losses::uses_pred(mode)) {
      b.feedback = normal_tensor<T>(
          {pooled_dim, spec.loss.projection_dim},
          1.0 / std::sqrt(static_cast<double>(spec.loss.projection_dim)), proj_rng);
    }
  }

  b.adam_weight = AdamState<T>::for_param(b.weight);
  b.adam_bias = AdamState<T>::for_param(b.bias);
  b.adam_gamma = AdamState<T>::for_param(b.bn.gamma);
  b.adam_beta = AdamState<T>::for_param(b.bn.beta);
  b.adam_classifier_weight = AdamState<T>::for_param(b.classifier_weight);
  b.adam_classifier_bias = AdamState<T>::for_param(b.classifier_bias);
  b.adam_sim_head = AdamState<T>::for_param(b.sim_head);
  return b;
}

namespace {

template <typename T>
Tensor<T> main_forward(const LayerBlock<T>& block, const Tensor<T>& input) {
  if (block.spec.kind == BlockKind::Dense) return ops::linear(input, block.weight, &block.bias);
  Tensor<T> z = ops::conv2d(input, block.weight, block.spec.stride, block.spec.pad);
  ops::add_channel_bias(z, block.bias);
  return z;
}

template <typename T>
Tensor<T> prepare_input(const LayerBlock<T>& block, const Tensor<T>& x) {
  const BlockSpec& s = block.spec;
  if (s.kind == BlockKind::Dense) {
    if (x.rank() < 2 || x.cols() != s.in_channels) {
      throw DimensionError("dense block expects " + std::to_string(s.in_channels) +
                           " input features, got " + shape_string(x.shape()));
    }
    return x.flattened();
  }
  if (x.rank() != 4 || x.dim(1) != s.in_channels || x.dim(2) != s.in_height ||
      x.dim(3) != s.in_width) {
    throw DimensionError("conv block expects n x " + std::to_string(s.in_channels) + " x " +
                         std::to_string(s.in_height) + " x " + std::to_string(s.in_width) +
                         ", got " + shape_string(x.shape()));
  }
  return x;
}

}  // namespace

template <typename T>
BlockForward<T> block_forward(LayerBlock<T>& block, const Tensor<T>& x, ops::Mode mode, Rng& rng,
                              CacheCounter* counter) {
  BlockForward<T> f;
  f.cache.token = CacheToken(counter);
  f.cache.input_shape = x.shape();
  f.cache.input = prepare_input(block, x);
  auto bn = ops::batchnorm(main_forward(block, f.cache.input), block.bn, mode);
  f.cache.hidden = ops::leaky_relu(bn.out, static_cast<T>(block.spec.slope));
  f.cache.preact = std::move(bn.out);
  f.cache.bn = std::move(bn.cache);
  f.cache.dropout = ops::dropout(f.cache.hidden, block.spec.dropout, rng, mode);
  f.out = std::move(f.cache.dropout.out);
  f.cache.generation = block.generation;
  f.detached = losses::is_local(block.spec.loss.mode);
  return f;
}

template <typename T>
Tensor<T> block_infer(const LayerBlock<T>& block, const Tensor<T>& x) {
  auto bn_params = block.bn;  // eval mode reads the running stats only
  auto bn = ops::batchnorm(main_forward(block, prepare_input(block, x)), bn_params, ops::Mode::Eval);
  return ops::leaky_relu(bn.out, static_cast<T>(block.spec.slope));
}

template <typename T>
LocalLosses<T> local_losses(const LayerBlock<T>& block, const Tensor<T>& hidden,
                            std::span<const int> labels) {
  const BlockSpec& s = block.spec;
  const LossMode mode = s.loss.mode;
  LocalLosses<T> r;
  if (mode == LossMode::Glob) return r;
  if (labels.size() != hidden.dim(0)) {
    throw InputError("local losses: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(hidden.dim(0)));
  }

  losses::LossGrad<T> pred, sim;
  const bool has_pred = losses::uses_pred(mode);
  const bool has_sim = losses::uses_sim(mode);
  if (has_pred) {
    if (losses::is_bpf(mode)) {
      const Tensor<T> targets = losses::binarize(losses::project_targets(block.projection, labels));
      pred = losses::pred_bpf_loss(hidden, targets, block.classifier_weight, block.classifier_bias,
                                   block.feedback, block.pool_kernel);
    } else {
      pred = losses::pred_loss(hidden, labels, block.classifier_weight, block.classifier_bias,
                               block.pool_kernel);
    }
  }
  if (has_sim) {
    if (losses::is_bpf(mode)) {
      const Tensor<T> target = losses::SimilarityMatrix<T>(
          losses::project_targets(block.projection, labels)).values();
      sim = losses::sim_bpf_loss(hidden, target);
    } else {
      sim = losses::sim_loss(hidden, losses::label_similarity<T>(labels, s.classes),
                             block.sim_head);
    }
  }

  double beta = s.loss.beta;
  if (!has_pred) beta = 1.0;
  if (!has_sim) beta = 0.0;
  auto combined = losses::combine(pred, sim, beta);
  r.total = combined.loss;
  r.pred = pred.loss;
  r.sim = sim.loss;
  r.d_hidden = std::move(combined.d_input);
  r.d_classifier_weight = std::move(pred.d_weight);
  r.d_classifier_bias = std::move(pred.d_bias);
  r.d_sim_head = std::move(sim.d_weight);
  return r;
}

template <typename T>
BlockGrads<T> block_backward(const LayerBlock<T>& block, const BlockCache<T>& cache,
                             const Tensor<T>* d_out, const Tensor<T>* d_hidden,
                             bool need_input_grad) {
  if (cache.generation != block.generation) {
    throw UsageError("block_backward: cache is stale (parameters changed since the forward pass)");
  }
  if (cache.hidden.empty()) throw UsageError("block_backward: cache holds no forward pass");
  Tensor<T> g_hidden(cache.hidden.shape());
  if (d_out != nullptr) g_hidden = ops::dropout_backward(*d_out, cache.dropout);
  if (d_hidden != nullptr) {
    require_same_shape(g_hidden, *d_hidden, "block_backward");
    add_into(g_hidden, *d_hidden);
  }
  const Tensor<T> g_pre =
      ops::leaky_relu_backward(g_hidden, cache.preact, static_cast<T>(block.spec.slope));
  auto bn = ops::batchnorm_backward(g_pre, block.bn, cache.bn);

  BlockGrads<T> g;
  g.gamma = std::move(bn.dgamma);
  g.beta = std::move(bn.dbeta);
  if (block.spec.kind == BlockKind::Dense) {
    auto lg = ops::linear_backward(cache.input, block.weight, true, bn.dx, need_input_grad);
    g.weight = std::move(lg.dweight);
    g.bias = std::move(lg.dbias);
    g.input = std::move(lg.dx);
    if (need_input_grad) g.input.reshape(cache.input_shape);
  } else {
    g.bias = ops::channel_bias_backward(bn.dx);
    auto cg = ops::conv2d_backward(cache.input, block.weight, bn.dx, block.spec.stride,
                                   block.spec.pad, need_input_grad);
    g.weight = std::move(cg.dkernel);
    g.input = std::move(cg.dx);
  }
  return g;
}

template <typename T>
BlockGrads<T> block_local_backward(const LayerBlock<T>& block, const BlockCache<T>& cache,
                                   const LocalLosses<T>& local) {
  BlockGrads<T> g;
  if (local.d_hidden.empty()) {
    g = block_backward<T>(block, cache, nullptr, nullptr, false);
  } else {
    g = block_backward<T>(block, cache, nullptr, &local.d_hidden, false);
  }
  g.classifier_weight = local.d_classifier_weight;
  g.classifier_bias = local.d_classifier_bias;
  g.sim_head = local.d_sim_head;
  return g;
}

template <typename T>
void apply_gradients(LayerBlock<T>& block, const BlockGrads<T>& grads, double lr) {
  auto step = [lr](Tensor<T>& p, const Tensor<T>& g, AdamState<T>& s) {
    if (!g.empty() && !p.empty()) adam_step(p, g, s, lr);
  };
  step(block.weight, grads.weight, block.adam_weight);
  step(block.bias, grads.bias, block.adam_bias);
  step(block.bn.gamma, grads.gamma, block.adam_gamma);
  step(block.bn.beta, grads.beta, block.adam_beta);
  step(block.classifier_weight, grads.classifier_weight, block.adam_classifier_weight);
  step(block.classifier_bias, grads.classifier_bias, block.adam_classifier_bias);
  step(block.sim_head, grads.sim_head, block.adam_sim_head);
  ++block.generation;
}

template <typename T>
OutputLayer<T> OutputLayer<T>::init(std::size_t in_features, std::size_t classes, Rng& rng) {
  if (in_features == 0) throw ConfigError("output layer: zero fan-in");
  OutputLayer<T> o;
  o.weight = uniform_tensor<T>({in_features, classes},
                               std::sqrt(1.0 / static_cast<double>(in_features)), rng);
  o.bias = Tensor<T>({classes});
  o.adam_weight = AdamState<T>::for_param(o.weight);
  o.adam_bias = AdamState<T>::for_param(o.bias);
  return o;
}

template <typename T>
std::uint64_t tensor_hash(const Tensor<T>& t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (std::size_t d : t.shape()) {
    const auto v = static_cast<std::uint64_t>(d);
    mix(reinterpret_cast<const unsigned char*>(&v), sizeof v);
  }
  mix(reinterpret_cast<const unsigned char*>(t.data()), t.size() * sizeof(T));
  return h;
}

#define LLRN_INSTANTIATE(T)                                                                     \
  template void adam_step(Tensor<T>&, const Tensor<T>&, AdamState<T>&, double);                 \
  template struct LayerBlock<T>;                                                                \
  template LayerBlock<T> init_params<T>(const BlockSpec&, Rng&);                                \
  template BlockForward<T> block_forward(LayerBlock<T>&, const Tensor<T>&, ops::Mode, Rng&,     \
                                         CacheCounter*);                                        \
  template Tensor<T> block_infer(const LayerBlock<T>&, const Tensor<T>&);                       \
  template LocalLosses<T> local_losses(const LayerBlock<T>&, const Tensor<T>&,                  \
                                       std::span<const int>);                                   \
  template BlockGrads<T> block_backward(const LayerBlock<T>&, const BlockCache<T>&,             \
                                        const Tensor<T>*, const Tensor<T>*, bool);              \
  template BlockGrads<T> block_local_backward(const LayerBlock<T>&, const BlockCache<T>&,       \
                                              const LocalLosses<T>&);                           \
  template void apply_gradients(LayerBlock<T>&, const BlockGrads<T>&, double);                  \
  template struct OutputLayer<T>;                                                               \
  template std::uint64_t tensor_hash(const Tensor<T>&);

LLRN_INSTANTIATE(float)
LLRN_INSTANTIATE(double)

#undef LLRN_INSTANTIATE

}  // namespace llrn
