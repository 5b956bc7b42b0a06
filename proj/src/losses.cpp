#include "llrn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "llrn/kernels.hpp"

namespace llrn::losses {

using kernels::MatrixView;
using kernels::Transpose;

namespace {

struct ModeName {
  LossMode mode;
  const char* name;
};

constexpr ModeName kModes[] = {
    {LossMode::Glob, "glob"},         {LossMode::Pred, "pred"},
    {LossMode::Sim, "sim"},           {LossMode::PredSim, "predsim"},
    {LossMode::PredBpf, "pred-bpf"},  {LossMode::SimBpf, "sim-bpf"},
    {LossMode::PredSimBpf, "predsim-bpf"}, {LossMode::GlobSim, "glob+sim"},
};

}  // namespace

LossMode parse_loss_mode(std::string_view name) {
  for (const auto& m : kModes) {
    if (name == m.name) return m.mode;
  }
  std::string valid;
  for (const auto& n : loss_mode_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown loss mode '" + std::string(name) + "' (valid: " + valid + ")");
}

std::string to_string(LossMode mode) {
  for (const auto& m : kModes) {
    if (m.mode == mode) return m.name;
  }
  return "?";
}

const std::vector<std::string>& loss_mode_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& m : kModes) v.emplace_back(m.name);
    return v;
  }();
  return names;
}

bool uses_pred(LossMode mode) {
  return mode == LossMode::Pred || mode == LossMode::PredSim || mode == LossMode::PredBpf ||
         mode == LossMode::PredSimBpf;
}

bool uses_sim(LossMode mode) {
  return mode == LossMode::Sim || mode == LossMode::PredSim || mode == LossMode::SimBpf ||
         mode == LossMode::PredSimBpf || mode == LossMode::GlobSim;
}

bool is_bpf(LossMode mode) {
  return mode == LossMode::PredBpf || mode == LossMode::SimBpf || mode == LossMode::PredSimBpf;
}

bool is_local(LossMode mode) { return mode != LossMode::Glob && mode != LossMode::GlobSim; }

bool uses_sim_head(LossMode mode) {
  return mode == LossMode::Sim || mode == LossMode::PredSim || mode == LossMode::GlobSim;
}

double default_beta(LossMode mode) {
  switch (mode) {
    case LossMode::PredSim: return 0.99;
    case LossMode::PredSimBpf: return 0.01;
    case LossMode::Sim:
    case LossMode::SimBpf:
    case LossMode::GlobSim: return 1.0;
    default: return 0.0;
  }
}

LossConfig LossConfig::for_mode(LossMode mode) {
  LossConfig cfg;
  cfg.mode = mode;
  cfg.beta = default_beta(mode);
  return cfg;
}

void LossConfig::validate() const {
  if (!(beta >= 0.0 && beta <= 1.0)) {
    throw ConfigError("beta must lie in [0, 1], got " + std::to_string(beta));
  }
  if (projection_dim == 0) throw ConfigError("projection dimension must be positive");
  if (pool_target_dim == 0) throw ConfigError("pool target dimension must be positive");
}

// ---------------------------------------------------------------- similarity

template <typename T>
SimilarityMatrix<T>::SimilarityMatrix(const Tensor<T>& x) : input_shape_(x.shape()) {
  if (x.rank() < 2) throw DimensionError("similarity_matrix: need at least rank 2 input");
  const std::size_t n = x.rows(), d = x.cols();
  if (n < 2) {
    throw InputError("similarity_matrix: need at least 2 examples, got " + std::to_string(n));
  }
  unit_ = Tensor<T>({n, d});
  norms_.assign(n, T{0});
  const T eps = static_cast<T>(kNormEps);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = x.data() + i * d;
    T mean{0};
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T sq{0};
    for (std::size_t j = 0; j < d; ++j) sq += (row[j] - mean) * (row[j] - mean);
    const T norm = std::max(std::sqrt(sq), eps);
    norms_[i] = norm;
    for (std::size_t j = 0; j < d; ++j) unit_[i * d + j] = (row[j] - mean) / norm;
  }
  s_ = Tensor<T>({n, n});
  const MatrixView<const T> u(unit_.data(), n, d);
  kernels::gemm(Transpose::No, Transpose::Yes, T{1}, u, u, T{0},
                MatrixView<T>(s_.data(), n, n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      // Force exact symmetry and the [-1, 1] range against rounding.
      const T v = std::clamp(s_.at(i, j), T{-1}, T{1});
      s_.at(i, j) = v;
      s_.at(j, i) = v;
    }
  }
}

template <typename T>
Tensor<T> SimilarityMatrix<T>::backward(const Tensor<T>& ds) const {
  const std::size_t n = size(), d = unit_.dim(1);
  if (ds.shape() != Shape{n, n}) {
    throw DimensionError("similarity backward: expected " + std::to_string(n) + "x" +
                         std::to_string(n) + " gradient, got " + shape_string(ds.shape()));
  }
  Tensor<T> sym({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) sym.at(i, j) = ds.at(i, j) + ds.at(j, i);
  }
  Tensor<T> du({n, d});
  kernels::gemm(Transpose::No, Transpose::No, T{1}, MatrixView<const T>(sym.data(), n, n),
                MatrixView<const T>(unit_.data(), n, d), T{0}, MatrixView<T>(du.data(), n, d));

  const T eps = static_cast<T>(kNormEps);
  Tensor<T> dx({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const T* u = unit_.data() + i * d;
    const T* g = du.data() + i * d;
    T* out = dx.data() + i * d;
    const bool clamped = norms_[i] <= eps;
    T proj{0};
    if (!clamped) {
      for (std::size_t j = 0; j < d; ++j) proj += u[j] * g[j];
    }
    T mean{0};
    for (std::size_t j = 0; j < d; ++j) {
      out[j] = (g[j] - proj * u[j]) / norms_[i];
      mean += out[j];
    }
    mean /= static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j) out[j] -= mean;
  }
  dx.reshape(input_shape_);
  return dx;
}

template <typename T>
Tensor<T> label_similarity(std::span<const int> labels, std::size_t classes) {
  return SimilarityMatrix<T>(ops::one_hot<T>(labels, classes)).values();
}

template <typename T>
MatchResult<T> similarity_match(const Tensor<T>& descriptor, const Tensor<T>& target) {
  const SimilarityMatrix<T> s(descriptor);
  const std::size_t n = s.size();
  if (target.shape() != Shape{n, n}) {
    throw DimensionError("similarity_match: target " + shape_string(target.shape()) +
                         " does not match batch of " + std::to_string(n));
  }
  const T inv = T{1} / static_cast<T>(n * n);
  Tensor<T> ds({n, n});
  double total = 0.0;
  for (std::size_t i = 0; i < n * n; ++i) {
    const T diff = s.values()[i] - target[i];
    total += static_cast<double>(diff) * static_cast<double>(diff);
    ds[i] = T{2} * diff * inv;
  }
  return {static_cast<T>(total / static_cast<double>(n * n)), s.backward(ds)};
}

// ---------------------------------------------------------------- local losses

template <typename T>
LossGrad<T> sim_loss(const Tensor<T>& h, const Tensor<T>& target_similarity,
                     const Tensor<T>& head_weight) {
  LossGrad<T> r;
  if (h.rank() == 4) {
    const Tensor<T> z = ops::conv2d(h, head_weight, 1, 1);
    const Tensor<T> desc = ops::std_per_feature_map(z);
    auto m = similarity_match(desc, target_similarity);
    const Tensor<T> dz = ops::std_per_feature_map_backward(m.d_descriptor, z, desc);
    auto g = ops::conv2d_backward(h, head_weight, dz, 1, 1, true);
    r.loss = m.loss;
    r.d_input = std::move(g.dx);
    r.d_weight = std::move(g.dkernel);
  } else {
    const Tensor<T> z = ops::linear(h, head_weight, static_cast<const Tensor<T>*>(nullptr));
    auto m = similarity_match(z, target_similarity);
    auto g = ops::linear_backward(h, head_weight, false, m.d_descriptor, true);
    r.loss = m.loss;
    r.d_input = std::move(g.dx);
    r.d_weight = std::move(g.dweight);
  }
  return r;
}

namespace {

template <typename T>
Tensor<T> pooled_features(const Tensor<T>& h, std::size_t pool_kernel) {
  if (h.rank() == 4) return ops::avgpool(h, pool_kernel).flattened();
  return h.flattened();
}

template <typename T>
Tensor<T> unpool_gradient(const Tensor<T>& d_flat, const Tensor<T>& h, std::size_t pool_kernel) {
  if (h.rank() != 4) return d_flat.reshaped(h.shape());
  const Shape pooled{h.dim(0), h.dim(1), h.dim(2) / pool_kernel, h.dim(3) / pool_kernel};
  return ops::avgpool_backward(d_flat.reshaped(pooled), pool_kernel, h.shape());
}

template <typename T>
void check_classifier(const Tensor<T>& flat, const Tensor<T>& weight, const char* what) {
  if (weight.rank() != 2 || flat.cols() != weight.dim(0)) {
    throw ConfigError(std::string(what) + ": pooled dimension " + std::to_string(flat.cols()) +
                      " does not match classifier input " +
                      (weight.rank() == 2 ? std::to_string(weight.dim(0)) : std::string("?")));
  }
}

}  // namespace

template <typename T>
LossGrad<T> pred_loss(const Tensor<T>& h, std::span<const int> labels, const Tensor<T>& weight,
                      const Tensor<T>& bias, std::size_t pool_kernel) {
  const Tensor<T> flat = pooled_features(h, pool_kernel);
  check_classifier(flat, weight, "pred_loss");
  const Tensor<T> logits = ops::linear(flat, weight, &bias);
  auto ce = ops::cross_entropy(logits, labels);
  auto g = ops::linear_backward(flat, weight, true, ce.grad, true);
  return {ce.loss, unpool_gradient(g.dx, h, pool_kernel), std::move(g.dweight),
          std::move(g.dbias)};
}

template <typename T>
LossGrad<T> sim_bpf_loss(const Tensor<T>& h, const Tensor<T>& target_similarity) {
  LossGrad<T> r;
  if (h.rank() == 4) {
    const Tensor<T> desc = ops::std_per_feature_map(h);
    auto m = similarity_match(desc, target_similarity);
    r.loss = m.loss;
    r.d_input = ops::std_per_feature_map_backward(m.d_descriptor, h, desc);
  } else {
    auto m = similarity_match(h, target_similarity);
    r.loss = m.loss;
    r.d_input = std::move(m.d_descriptor);
  }
  return r;
}

template <typename T>
LossGrad<T> pred_bpf_loss(const Tensor<T>& h, const Tensor<T>& binary_targets,
                          const Tensor<T>& weight, const Tensor<T>& bias,
                          const Tensor<T>& feedback, std::size_t pool_kernel) {
  const Tensor<T> flat = pooled_features(h, pool_kernel);
  check_classifier(flat, weight, "pred_bpf_loss");
  if (feedback.shape() != weight.shape()) {
    throw DimensionError("pred_bpf_loss: feedback " + shape_string(feedback.shape()) +
                         " must match classifier " + shape_string(weight.shape()));
  }
  const Tensor<T> logits = ops::linear(flat, weight, &bias);
  auto bce = ops::binary_cross_entropy_logits(logits, binary_targets);
  // Exact gradient for the classifier itself.
  auto g = ops::linear_backward(flat, weight, true, bce.grad, false);
  // The error reaches h through the fixed random feedback matrix.
  auto fa = ops::linear_backward(flat, feedback, false, bce.grad, true);
  return {bce.loss, unpool_gradient(fa.dx, h, pool_kernel), std::move(g.dweight),
          std::move(g.dbias)};
}

template <typename T>
Combined<T> combine(const LossGrad<T>& pred, const LossGrad<T>& sim, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) {
    throw ConfigError("combine: beta must lie in [0, 1], got " + std::to_string(beta));
  }
  const T b = static_cast<T>(beta);
  const T a = T{1} - b;
  Combined<T> c;
  c.loss = a * pred.loss + b * sim.loss;
  if (pred.d_input.empty()) {
    c.d_input = sim.d_input;
    for (auto& v : c.d_input.values()) v *= b;
    return c;
  }
  if (sim.d_input.empty()) {
    c.d_input = pred.d_input;
    for (auto& v : c.d_input.values()) v *= a;
    return c;
  }
  require_same_shape(pred.d_input, sim.d_input, "combine");
  c.d_input = Tensor<T>(pred.d_input.shape());
  for (std::size_t i = 0; i < c.d_input.size(); ++i) {
    c.d_input[i] = a * pred.d_input[i] + b * sim.d_input[i];
  }
  return c;
}

// ---------------------------------------------------------------- targets

template <typename T>
Tensor<T> project_targets(const Tensor<T>& projection, std::span<const int> labels) {
  require_rank(projection, 2, "project_targets");
  const std::size_t dim = projection.dim(0), classes = projection.dim(1);
  Tensor<T> out({labels.size(), dim});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw InputError("project_targets: label " + std::to_string(y) + " out of range");
    }
    for (std::size_t r = 0; r < dim; ++r) {
      out[i * dim + r] = projection[r * classes + static_cast<std::size_t>(y)];
    }
  }
  return out;
}

template <typename T>
Tensor<T> binarize(const Tensor<T>& projected) {
  Tensor<T> out(projected.shape());
  for (std::size_t i = 0; i < projected.size(); ++i) {
    out[i] = projected[i] > T{0} ? T{1} : T{0};
  }
  return out;
}

// ---------------------------------------------------------------- pooling policy

PoolChoice choose_pool_kernel(std::size_t channels, std::size_t spatial, std::size_t target_dim) {
  if (spatial == 0 || channels == 0) {
    throw DimensionError("choose_pool_kernel: empty feature maps");
  }
  for (std::size_t k = spatial; k >= 1; --k) {
    if (spatial % k != 0) continue;
    const std::size_t side = spatial / k;
    const std::size_t dim = channels * side * side;
    if (dim >= target_dim) return {k, dim, false};
  }
  return {spatial, channels, true};
}

#define LLRN_INSTANTIATE(T)                                                                  \
  template class SimilarityMatrix<T>;                                                        \
  template Tensor<T> label_similarity<T>(std::span<const int>, std::size_t);                 \
  template MatchResult<T> similarity_match(const Tensor<T>&, const Tensor<T>&);              \
  template LossGrad<T> sim_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);       \
  template LossGrad<T> pred_loss(const Tensor<T>&, std::span<const int>, const Tensor<T>&,   \
                                 const Tensor<T>&, std::size_t);                             \
  template LossGrad<T> sim_bpf_loss(const Tensor<T>&, const Tensor<T>&);                     \
  template LossGrad<T> pred_bpf_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                     const Tensor<T>&, const Tensor<T>&, std::size_t);       \
  template Combined<T> combine(const LossGrad<T>&, const LossGrad<T>&, double);              \
  template Tensor<T> project_targets(const Tensor<T>&, std::span<const int>);                \
  template Tensor<T> binarize(const Tensor<T>&);

LLRN_INSTANTIATE(float)
LLRN_INSTANTIATE(double)

#undef LLRN_INSTANTIATE

}  // namespace llrn::losses
