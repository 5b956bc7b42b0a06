#pragma once

// Architecture strings and the assembled network: a chain of layer blocks
// and 2x2 max-pools ending in a global cross-entropy output layer.
//
//   "conv128-conv256-pool-conv256-conv512-pool-conv512-pool-conv512-pool-fc1024-fc"

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "llrn/checkpoint.hpp"
#include "llrn/layers.hpp"
#include "llrn/losses.hpp"

namespace llrn {

enum class TokenKind { Conv, Pool, Dense, Output };

struct LayerToken {
  TokenKind kind = TokenKind::Conv;
  std::size_t width = 0;  // channels (conv), units (dense), classes (output); 0 for pool
  std::size_t in_channels = 0, in_height = 0, in_width = 0;
  std::size_t out_channels = 0, out_height = 0, out_width = 0;
};

struct NetworkSpec {
  std::string arch;
  double width_mult = 1.0;
  std::size_t in_channels = 0, in_height = 0, in_width = 0;
  std::size_t classes = 0;
  std::vector<LayerToken> layers;

  std::size_t block_count() const;  // conv + dense tokens, output excluded
  std::size_t weight_layers() const { return block_count() + 1; }
};

/// Expands vgg8b, vgg11b and mlp3x1024; any other string is returned as is.
std::string resolve_arch_preset(const std::string& name);

NetworkSpec parse_arch(const std::string& arch, double width_mult, std::size_t in_channels,
                       std::size_t in_height, std::size_t in_width, std::size_t classes);

struct NetworkOptions {
  losses::LossConfig loss;
  double slope = 0.0;
  double dropout = 0.0;
  std::uint64_t seed = 0;
};

struct Stage {
  bool pool = false;
  std::size_t block = 0;  // index into Network::blocks when !pool
};

template <typename T>
struct Network {
  NetworkSpec spec;
  NetworkOptions options;
  std::vector<LayerBlock<T>> blocks;
  std::vector<Stage> stages;
  OutputLayer<T> output;

  static Network build(const NetworkSpec& spec, const NetworkOptions& options);

  /// Eval-mode logits (running batchnorm statistics, no dropout).
  Tensor<T> logits(const Tensor<T>& x) const;

  /// Every stored tensor, named "block<i>.<name>" and "output.weight|bias".
  Checkpoint to_checkpoint() const;
  /// Throws DataError when the checkpoint does not fit this architecture.
  void load_checkpoint(const Checkpoint& checkpoint);
};

}  // namespace llrn
