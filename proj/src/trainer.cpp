#include "llrn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "llrn/errors.hpp"

namespace llrn {

using losses::LossMode;

double TrainConfig::effective_slope() const {
  if (slope >= 0.0) return slope;
  switch (loss.mode) {
    case LossMode::Glob:
    case LossMode::Pred:
    case LossMode::PredBpf:
      return 0.0;
    default:
      return 0.01;
  }
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (batch_size < 2) throw ConfigError("batch size must be at least 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (eval_batch == 0) throw ConfigError("eval batch must be positive");
  loss.validate();
}

NetworkOptions TrainConfig::network_options() const {
  NetworkOptions o;
  o.loss = loss;
  o.slope = effective_slope();
  o.dropout = dropout;
  o.seed = seed;
  return o;
}

std::size_t LrSchedule::breakpoint(std::size_t k) const {
  return (kBreakpointPercent[k] * total + 99) / 100;
}

double lr_at(const LrSchedule& schedule, std::size_t epoch) {
  double lr = schedule.base;
  for (std::size_t k = 0; k < 4; ++k) {
    if (epoch >= schedule.breakpoint(k)) lr *= LrSchedule::kFactor;
  }
  return lr;
}

bool class_limit_active(const TrainConfig& config, std::size_t epoch) {
  if (config.classes_per_batch == 0) return false;
  return epoch < LrSchedule{config.lr, config.epochs}.first_drop();
}

namespace {

void fold_singletons(std::vector<std::vector<std::size_t>>& batches) {
  if (batches.size() >= 2 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
}

std::vector<std::vector<std::size_t>> limited_batches(std::span<const int> labels,
                                                      std::size_t classes,
                                                      std::size_t batch_size, std::size_t limit,
                                                      Rng& rng) {
  std::vector<std::vector<std::size_t>> pools(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    pools[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  std::size_t remaining = labels.size();
  std::vector<std::vector<std::size_t>> batches;
  while (remaining > 0) {
    std::vector<std::size_t> open;
    for (std::size_t c = 0; c < classes; ++c) {
      if (!pools[c].empty()) open.push_back(c);
    }
    rng.shuffle(open.begin(), open.end());
    open.resize(std::min(open.size(), limit));

    // (class, position) pairs for the union of the chosen pools
    std::vector<std::pair<std::size_t, std::size_t>> pick;
    for (std::size_t c : open) {
      for (std::size_t p = 0; p < pools[c].size(); ++p) pick.emplace_back(c, p);
    }
    std::size_t take = std::min(batch_size, pick.size());
    if (pick.size() - take == 1) ++take;  // don't strand one example of these classes
    if (remaining - take == 1 && take >= 3 && limit >= 2) --take;  // nor one overall
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + rng.below(pick.size() - i);
      std::swap(pick[i], pick[j]);
    }
    pick.resize(take);
    std::vector<std::size_t> batch;
    batch.reserve(take);
    for (const auto& [c, p] : pick) batch.push_back(pools[c][p]);
    // drop taken positions, highest first per class
    std::sort(pick.begin(), pick.end(),
              [](const auto& a, const auto& b) { return a.first != b.first ? a.first < b.first : a.second > b.second; });
    for (const auto& [c, p] : pick) {
      pools[c][p] = pools[c].back();
      pools[c].pop_back();
    }
    remaining -= take;
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace

std::vector<std::vector<std::size_t>> sample_batches(std::span<const int> labels,
                                                     std::size_t classes, std::size_t batch_size,
                                                     std::size_t limit, Rng& rng) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (batch_size > labels.size()) {
    throw ConfigError("batch size " + std::to_string(batch_size) + " exceeds dataset size " +
                      std::to_string(labels.size()));
  }
  if (limit > classes) {
    throw ConfigError("classes-per-batch limit " + std::to_string(limit) + " exceeds class count " +
                      std::to_string(classes));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw InputError("sample_batches: label " + std::to_string(y) + " out of range");
    }
  }
  std::vector<std::vector<std::size_t>> batches;
  if (limit == 0) {
    std::vector<std::size_t> order(labels.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                           order.begin() + static_cast<std::ptrdiff_t>(end));
    }
  } else {
    batches = limited_batches(labels, classes, batch_size, limit, rng);
  }
  fold_singletons(batches);
  return batches;
}

namespace {

template <typename T>
void check_finite(T loss, const std::string& where) {
  if (!std::isfinite(static_cast<double>(loss))) {
    throw NumericError("non-finite loss at " + where);
  }
}

template <typename T>
void add_head_grads(BlockGrads<T>& g, const LocalLosses<T>& local) {
  g.classifier_weight = local.d_classifier_weight;
  g.classifier_bias = local.d_classifier_bias;
  g.sim_head = local.d_sim_head;
}

}  // namespace

template <typename T>
StepOutput<T> train_step(Network<T>& net, const Tensor<T>& x, std::span<const int> labels,
                         Rng& rng, const StepOptions& options) {
  const LossMode mode = net.options.loss.mode;
  const bool local = losses::is_local(mode);
  const bool with_sim = mode == LossMode::GlobSim;
  if (labels.size() != x.dim(0)) {
    throw InputError("train_step: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(x.dim(0)));
  }

  StepOutput<T> out;
  out.layer_losses.assign(net.blocks.size() + 1, 0.0);
  if (options.record) out.block_grads.resize(net.blocks.size());

  struct PoolRecord {
    std::vector<std::uint32_t> argmax;
    Shape input_shape;
  };
  std::vector<BlockCache<T>> caches;
  std::vector<PoolRecord> pools;
  std::vector<LocalLosses<T>> sims;

  Tensor<T> act = x;
  for (const Stage& stage : net.stages) {
    if (stage.pool) {
      auto p = ops::maxpool2x2(act);
      if (!local) pools.push_back({std::move(p.argmax), act.shape()});
      act = std::move(p.out);
      continue;
    }
    const std::size_t i = stage.block;
    LayerBlock<T>& block = net.blocks[i];
    auto f = block_forward(block, act, ops::Mode::Train, rng, options.counter);
    if (local) {
      auto ll = local_losses(block, f.cache.hidden, labels);
      check_finite(ll.total, "layer " + std::to_string(i));
      out.layer_losses[i] = static_cast<double>(ll.total);
      auto g = block_local_backward(block, f.cache, ll);
      if (options.apply) apply_gradients(block, g, options.lr);
      if (options.record) out.block_grads[i] = std::move(g);
      act = std::move(f.out);
    } else {
      if (with_sim) {
        auto ll = local_losses(block, f.cache.hidden, labels);
        check_finite(ll.total, "layer " + std::to_string(i));
        out.layer_losses[i] = static_cast<double>(ll.total);
        sims.push_back(std::move(ll));
      }
      caches.push_back(std::move(f.cache));
      act = std::move(f.out);
    }
  }

  const Tensor<T> logits = net.output.forward(act);
  const auto ce = ops::cross_entropy(logits, labels);
  check_finite(ce.loss, "output layer");
  out.layer_losses.back() = static_cast<double>(ce.loss);
  const auto predicted = ops::argmax_rows(logits);
  for (std::size_t n = 0; n < labels.size(); ++n) out.errors += predicted[n] != labels[n];
  auto og = ops::linear_backward(act, net.output.weight, true, ce.grad, !local);

  if (!local) {
    std::vector<BlockGrads<T>> grads(net.blocks.size());
    Tensor<T> d = std::move(og.dx);
    std::size_t cache_at = caches.size();
    std::size_t pool_at = pools.size();
    for (std::size_t s = net.stages.size(); s-- > 0;) {
      const Stage& stage = net.stages[s];
      if (stage.pool) {
        const PoolRecord& p = pools[--pool_at];
        d = ops::maxpool2x2_backward(d, p.argmax, p.input_shape);
        continue;
      }
      const std::size_t i = stage.block;
      --cache_at;
      const Tensor<T>* extra = with_sim ? &sims[cache_at].d_hidden : nullptr;
      auto g = block_backward(net.blocks[i], caches[cache_at], &d, extra, s > 0);
      if (with_sim) add_head_grads(g, sims[cache_at]);
      d = std::move(g.input);
      grads[i] = std::move(g);
    }
    caches.clear();
    for (std::size_t i = 0; i < net.blocks.size(); ++i) {
      if (options.apply) apply_gradients(net.blocks[i], grads[i], options.lr);
    }
    if (options.record) out.block_grads = std::move(grads);
  }

  if (options.apply) {
    adam_step(net.output.weight, og.dweight, net.output.adam_weight, options.lr);
    adam_step(net.output.bias, og.dbias, net.output.adam_bias, options.lr);
  }
  if (options.record) {
    out.output_weight_grad = std::move(og.dweight);
    out.output_bias_grad = std::move(og.dbias);
  }
  return out;
}

template <typename T>
double evaluate(const Network<T>& net, const data::Dataset& dataset, std::size_t batch) {
  if (dataset.size() == 0) return 0.0;
  if (batch == 0) throw ConfigError("evaluate: batch must be positive");
  std::size_t errors = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < dataset.size(); start += batch) {
    const std::size_t end = std::min(dataset.size(), start + batch);
    idx.resize(end - start);
    for (std::size_t i = start; i < end; ++i) idx[i - start] = i;
    const Tensor<T> x = data::gather_images(dataset, idx).template cast<T>();
    const auto predicted = ops::argmax_rows(net.logits(x));
    for (std::size_t i = start; i < end; ++i) errors += predicted[i - start] != dataset.labels[i];
  }
  return static_cast<double>(errors) / static_cast<double>(dataset.size());
}

namespace {

constexpr std::uint64_t kSamplerTag = 1;
constexpr std::uint64_t kAugmentTag = 2;
constexpr std::uint64_t kDropoutTag = 3;

Rng epoch_stream(std::uint64_t seed, std::uint64_t tag, std::size_t epoch) {
  return Rng::derive(seed, (tag << 40) | static_cast<std::uint64_t>(epoch));
}

}  // namespace

std::vector<std::vector<std::size_t>> epoch_batches(const TrainConfig& config,
                                                    const data::Dataset& train_set,
                                                    std::size_t epoch) {
  Rng sampler = epoch_stream(config.seed, kSamplerTag, epoch);
  const std::size_t limit = class_limit_active(config, epoch) ? config.classes_per_batch : 0;
  return sample_batches(train_set.labels, train_set.classes, config.batch_size, limit, sampler);
}

History train(Network<float>& net, const TrainConfig& config, const data::Dataset& train_set,
              const data::Dataset& test_set,
              const std::function<void(const EpochMetrics&)>& on_epoch) {
  config.validate();
  train_set.validate();
  config.augment.validate(train_set.height(), train_set.width());
  const LrSchedule schedule{config.lr, std::max<std::size_t>(config.epochs, 1)};
  History history;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr_at(schedule, epoch);
    m.layer_losses.assign(net.blocks.size() + 1, 0.0);

    Rng augment_rng = epoch_stream(config.seed, kAugmentTag, epoch);
    Rng dropout_rng = epoch_stream(config.seed, kDropoutTag, epoch);
    const auto batches = epoch_batches(config, train_set, epoch);

    std::size_t errors = 0, seen = 0;
    for (const auto& batch : batches) {
      Tensor<float> x = data::gather_images(train_set, batch);
      data::augment(x, config.augment, augment_rng);
      const auto labels = data::gather_labels(train_set, batch);
      const auto step = train_step(net, x, labels, dropout_rng, StepOptions{m.lr});
      errors += step.errors;
      seen += batch.size();
      for (std::size_t k = 0; k < step.layer_losses.size(); ++k) {
        m.layer_losses[k] += step.layer_losses[k] * static_cast<double>(batch.size());
      }
    }
    for (double& l : m.layer_losses) l /= static_cast<double>(seen);
    m.train_error = config.clean_train_error
                        ? evaluate(net, train_set, config.eval_batch)
                        : static_cast<double>(errors) / static_cast<double>(seen);
    m.test_error = evaluate(net, test_set, config.eval_batch);
    if (on_epoch) on_epoch(m);
    history.push_back(std::move(m));
  }
  return history;
}

std::string metrics_header(std::size_t layer_columns) {
  std::string h = "epoch,lr,train_error,test_error";
  for (std::size_t k = 0; k < layer_columns; ++k) h += ",loss_layer_" + std::to_string(k);
  return h;
}

std::string metrics_row(const EpochMetrics& m) {
  char buf[64];
  std::string row = std::to_string(m.epoch);
  std::snprintf(buf, sizeof buf, ",%.9g", m.lr);
  row += buf;
  std::snprintf(buf, sizeof buf, ",%.6f,%.6f", m.train_error, m.test_error);
  row += buf;
  for (double l : m.layer_losses) {
    std::snprintf(buf, sizeof buf, ",%.6f", l);
    row += buf;
  }
  return row;
}

std::string metrics_csv(const History& history, std::size_t layer_columns) {
  std::string s = metrics_header(layer_columns) + "\n";
  for (const auto& m : history) s += metrics_row(m) + "\n";
  return s;
}

void write_metrics_csv(const std::filesystem::path& path, const History& history,
                       std::size_t layer_columns) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << metrics_csv(history, layer_columns);
}

template StepOutput<float> train_step(Network<float>&, const Tensor<float>&, std::span<const int>,
                                      Rng&, const StepOptions&);
template StepOutput<double> train_step(Network<double>&, const Tensor<double>&,
                                       std::span<const int>, Rng&, const StepOptions&);
template double evaluate(const Network<float>&, const data::Dataset&, std::size_t);
template double evaluate(const Network<double>&, const data::Dataset&, std::size_t);

}  // namespace llrn
