#pragma once

// Layer-local objectives: similarity matching, local prediction, their
// convex combination, and the backprop-free variants that use std
// descriptors, feedback alignment and random target projections.
//
// Every function returns the scalar loss and the gradient at the hidden
// activations it was given, plus gradients for the sub-network it owns.
// Hidden activations are batch-major (one example per row / leading axis).

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "llrn/ops.hpp"
#include "llrn/tensor.hpp"

namespace llrn::losses {

inline constexpr double kNormEps = 1e-8;

enum class LossMode { Glob, Pred, Sim, PredSim, PredBpf, SimBpf, PredSimBpf, GlobSim };

LossMode parse_loss_mode(std::string_view name);
std::string to_string(LossMode mode);
const std::vector<std::string>& loss_mode_names();

bool uses_pred(LossMode mode);        // local classifier head present
bool uses_sim(LossMode mode);         // some similarity-matching term present
bool is_bpf(LossMode mode);           // backprop-free family
bool is_local(LossMode mode);         // graph detached after every hidden layer
bool uses_sim_head(LossMode mode);    // trainable sim sub-network (non-bpf sim)
double default_beta(LossMode mode);   // 0.99 predsim, 0.01 predsim-bpf

struct LossConfig {
  LossMode mode = LossMode::PredSim;
  double beta = 0.99;
  std::size_t projection_dim = 128;
  std::size_t pool_target_dim = 1024;
  std::uint64_t projection_seed = 0;

  static LossConfig for_mode(LossMode mode);
  void validate() const;
};

// ---------------------------------------------------------------- similarity

/// Adjusted-cosine (correlation) matrix of a batch plus what its backward
/// pass needs. Row i of the input is example i; every row is centered over
/// its own components before the pairwise cosines are taken.
template <typename T>
class SimilarityMatrix {
 public:
  explicit SimilarityMatrix(const Tensor<T>& x);

  const Tensor<T>& values() const { return s_; }
  std::size_t size() const { return s_.dim(0); }
  T operator()(std::size_t i, std::size_t j) const { return s_.at(i, j); }

  /// dL/dx given dL/dS. Returned with the shape of the original input.
  Tensor<T> backward(const Tensor<T>& ds) const;

 private:
  Shape input_shape_;
  Tensor<T> unit_;          // centered rows divided by their norms
  std::vector<T> norms_;    // max(||centered row||, eps)
  Tensor<T> s_;
};

template <typename T>
SimilarityMatrix<T> similarity_matrix(const Tensor<T>& x) {
  return SimilarityMatrix<T>(x);
}

/// Target similarity of one-hot labels: 1 within a class, -1/(C-1) across.
template <typename T>
Tensor<T> label_similarity(std::span<const int> labels, std::size_t classes);

template <typename T>
struct MatchResult {
  T loss{};
  Tensor<T> d_descriptor;
};

/// ||S(descriptor) - target||_F^2 / n^2 and its gradient.
template <typename T>
MatchResult<T> similarity_match(const Tensor<T>& descriptor, const Tensor<T>& target);

// ---------------------------------------------------------------- local losses

template <typename T>
struct LossGrad {
  T loss{};
  Tensor<T> d_input;   // gradient at the hidden activations
  Tensor<T> d_weight;  // sub-network weight; empty when there is none
  Tensor<T> d_bias;    // sub-network bias; empty when there is none
};

/// Similarity matching through a trainable head: a linear map (no bias) for
/// n x d activations, or a 3x3/pad-1 convolution followed by a per-map
/// standard deviation for n x c x h x w activations.
template <typename T>
LossGrad<T> sim_loss(const Tensor<T>& h, const Tensor<T>& target_similarity,
                     const Tensor<T>& head_weight);

/// Cross-entropy of a linear classifier on the (avg-pooled, flattened)
/// activations. pool_kernel is ignored for rank-2 activations.
template <typename T>
LossGrad<T> pred_loss(const Tensor<T>& h, std::span<const int> labels, const Tensor<T>& weight,
                      const Tensor<T>& bias, std::size_t pool_kernel);

/// Similarity matching with no trainable head: the descriptor is the per-map
/// standard deviation (conv) or the activation vector itself (dense).
template <typename T>
LossGrad<T> sim_bpf_loss(const Tensor<T>& h, const Tensor<T>& target_similarity);

/// Binary cross-entropy of sigmoid(classifier) against binarized projected
/// targets. The classifier gradient is exact; the gradient sent to h uses the
/// fixed feedback matrix in place of the classifier weight.
template <typename T>
LossGrad<T> pred_bpf_loss(const Tensor<T>& h, const Tensor<T>& binary_targets,
                          const Tensor<T>& weight, const Tensor<T>& bias,
                          const Tensor<T>& feedback, std::size_t pool_kernel);

template <typename T>
struct Combined {
  T loss{};
  Tensor<T> d_input;
};

/// (1 - beta) * pred + beta * sim for the loss and for the gradient at h.
/// Sub-network gradients are not touched: each head keeps its own.
template <typename T>
Combined<T> combine(const LossGrad<T>& pred, const LossGrad<T>& sim, double beta);

// ---------------------------------------------------------------- targets

/// Rows P[:, y_i]: raw projected targets, n x projection_dim.
/// projection has shape projection_dim x classes.
template <typename T>
Tensor<T> project_targets(const Tensor<T>& projection, std::span<const int> labels);

/// 1[x > 0] elementwise.
template <typename T>
Tensor<T> binarize(const Tensor<T>& projected);

// ---------------------------------------------------------------- pooling policy

struct PoolChoice {
  std::size_t kernel = 1;
  std::size_t flat_dim = 0;
  bool fallback = false;  // no kernel reached the target; global pooling used
};

/// Largest k dividing `spatial` with channels * (spatial/k)^2 >= target_dim.
PoolChoice choose_pool_kernel(std::size_t channels, std::size_t spatial, std::size_t target_dim);

}  // namespace llrn::losses
