#pragma once

// Training engine. In the local modes every hidden block is updated as soon
// as its own loss is known, during the forward sweep, and only its detached
// output travels on. glob backpropagates the output cross-entropy through
// everything; glob+sim adds each block's similarity loss on top of that.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "llrn/data.hpp"
#include "llrn/layers.hpp"
#include "llrn/network.hpp"

namespace llrn {

struct TrainConfig {
  std::size_t epochs = 1;
  double lr = 5e-4;
  std::size_t batch_size = 128;
  losses::LossConfig loss;
  double dropout = 0.0;
  double slope = -1.0;  // negative: pick the mode's default
  std::uint64_t seed = 0;
  std::size_t classes_per_batch = 0;  // 0: no limit
  data::AugmentConfig augment;
  bool clean_train_error = false;  // extra unaugmented pass for the train error
  std::size_t eval_batch = 1000;

  /// 0.01 for the similarity-based modes, 0 for glob, pred and pred-bpf.
  double effective_slope() const;
  void validate() const;
  NetworkOptions network_options() const;
};

struct LrSchedule {
  static constexpr std::size_t kBreakpointPercent[4] = {50, 75, 89, 94};
  static constexpr double kFactor = 0.25;

  double base = 5e-4;
  std::size_t total = 1;

  /// ceil(percent * total / 100) for breakpoint k.
  std::size_t breakpoint(std::size_t k) const;
  std::size_t first_drop() const { return breakpoint(0); }
};

double lr_at(const LrSchedule& schedule, std::size_t epoch);

bool class_limit_active(const TrainConfig& config, std::size_t epoch);

/// One epoch of batches as index lists. Without a limit this is a shuffled
/// permutation cut into batch-size chunks. With a limit each batch comes from
/// at most `limit` classes. Either way every index appears exactly once, and
/// a would-be batch of one is folded into its neighbour.
std::vector<std::vector<std::size_t>> sample_batches(std::span<const int> labels,
                                                     std::size_t classes, std::size_t batch_size,
                                                     std::size_t limit, Rng& rng);

/// The batches train() visits in `epoch`: sampler stream keyed by (seed, epoch),
/// class limit on until the first learning-rate drop.
std::vector<std::vector<std::size_t>> epoch_batches(const TrainConfig& config,
                                                    const data::Dataset& train_set,
                                                    std::size_t epoch);

struct StepOptions {
  double lr = 5e-4;
  bool apply = true;   // false: compute everything, touch nothing
  bool record = false; // keep every gradient in StepOutput
  CacheCounter* counter = nullptr;
};

template <typename T>
struct StepOutput {
  std::vector<double> layer_losses;  // one per block, then the output cross-entropy
  std::size_t errors = 0;            // misclassified examples in this batch
  std::vector<BlockGrads<T>> block_grads;
  Tensor<T> output_weight_grad;
  Tensor<T> output_bias_grad;
};

template <typename T>
StepOutput<T> train_step(Network<T>& net, const Tensor<T>& x, std::span<const int> labels,
                         Rng& rng, const StepOptions& options);

/// Fraction of argmax errors in eval mode.
template <typename T>
double evaluate(const Network<T>& net, const data::Dataset& dataset, std::size_t batch = 1000);

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_error = 0.0;
  double test_error = 0.0;
  std::vector<double> layer_losses;  // mean over the epoch's examples
};

using History = std::vector<EpochMetrics>;

History train(Network<float>& net, const TrainConfig& config, const data::Dataset& train_set,
              const data::Dataset& test_set,
              const std::function<void(const EpochMetrics&)>& on_epoch = {});

std::string metrics_header(std::size_t layer_columns);
std::string metrics_row(const EpochMetrics& m);
std::string metrics_csv(const History& history, std::size_t layer_columns);
void write_metrics_csv(const std::filesystem::path& path, const History& history,
                       std::size_t layer_columns);

}  // namespace llrn
