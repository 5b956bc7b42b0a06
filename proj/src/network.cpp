#include "llrn/network.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include "llrn/errors.hpp"

namespace llrn {

std::size_t NetworkSpec::block_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += (l.kind == TokenKind::Conv || l.kind == TokenKind::Dense);
  return n;
}

std::string resolve_arch_preset(const std::string& name) {
  static const std::map<std::string, std::string> presets = {
      {"vgg8b", "conv128-conv256-pool-conv256-conv512-pool-conv512-pool-conv512-pool-fc1024-fc"},
      {"vgg11b",
       "conv128-conv128-conv128-conv256-pool-conv256-conv512-pool-conv512-conv512-pool-conv512-"
       "pool-fc1024-fc"},
      {"mlp3x1024", "fc1024-fc1024-fc1024-fc"},
  };
  const auto it = presets.find(name);
  return it == presets.end() ? name : it->second;
}

namespace {

std::size_t parse_width(const std::string& token, std::size_t prefix) {
  const std::string digits = token.substr(prefix);
  if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError("architecture: unknown token '" + token + "'");
  }
  const std::size_t w = std::stoul(digits);
  if (w == 0) throw ConfigError("architecture: zero width in '" + token + "'");
  return w;
}

}  // namespace

NetworkSpec parse_arch(const std::string& arch, double width_mult, std::size_t in_channels,
                       std::size_t in_height, std::size_t in_width, std::size_t classes) {
  if (!(width_mult > 0.0)) throw ConfigError("architecture: width multiplier must be positive");
  if (in_channels == 0 || in_height == 0 || in_width == 0) {
    throw ConfigError("architecture: empty input shape");
  }
  NetworkSpec spec;
  spec.arch = resolve_arch_preset(arch);
  spec.width_mult = width_mult;
  spec.in_channels = in_channels;
  spec.in_height = in_height;
  spec.in_width = in_width;
  spec.classes = classes;

  std::vector<std::string> tokens;
  std::stringstream ss(spec.arch);
  for (std::string t; std::getline(ss, t, '-');) tokens.push_back(t);
  if (tokens.empty() || spec.arch.empty()) throw ConfigError("architecture: empty string");

  std::size_t c = in_channels, h = in_height, w = in_width;
  bool flat = false;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& t = tokens[i];
    const bool last = i + 1 == tokens.size();
    LayerToken l;
    l.in_channels = c;
    l.in_height = h;
    l.in_width = w;
    if (t == "pool") {
      if (i == 0) throw ConfigError("architecture: pool cannot be the first layer");
      if (last) throw ConfigError("architecture: last token must be the output layer, got pool");
      if (flat) throw ConfigError("architecture: pool after a dense layer");
      if (h / 2 == 0 || w / 2 == 0) {
        throw ConfigError("architecture: pool at token " + std::to_string(i) +
                          " reduces the spatial extent to 0");
      }
      if (h % 2 != 0 || w % 2 != 0) {
        throw ConfigError("architecture: pool at token " + std::to_string(i) + " needs even extents, got " +
                          std::to_string(h) + "x" + std::to_string(w));
      }
      l.kind = TokenKind::Pool;
      h /= 2;
      w /= 2;
    } else if (t.rfind("conv", 0) == 0) {
      if (last) throw ConfigError("architecture: last token must be the output layer, got " + t);
      if (flat) throw ConfigError("architecture: conv after a dense layer");
      l.kind = TokenKind::Conv;
      l.width = static_cast<std::size_t>(std::lround(static_cast<double>(parse_width(t, 4)) * width_mult));
      if (l.width == 0) throw ConfigError("architecture: width multiplier leaves zero channels");
      c = l.width;
    } else if (t.rfind("fc", 0) == 0) {
      const std::size_t in = c * h * w;
      l.in_channels = in;
      l.in_height = l.in_width = 1;
      if (last) {
        l.kind = TokenKind::Output;
        l.width = t == "fc" ? classes : parse_width(t, 2);
        if (l.width != classes) {
          throw ConfigError("architecture: output layer has " + std::to_string(l.width) +
                            " units for " + std::to_string(classes) + " classes");
        }
      } else {
        if (t == "fc") throw ConfigError("architecture: bare 'fc' is only valid as the last token");
        l.kind = TokenKind::Dense;
        l.width = parse_width(t, 2);
      }
      flat = true;
      c = l.width;
      h = w = 1;
    } else {
      throw ConfigError("architecture: unknown token '" + t + "'");
    }
    l.out_channels = c;
    l.out_height = h;
    l.out_width = w;
    spec.layers.push_back(l);
  }
  if (spec.layers.back().kind != TokenKind::Output) {
    throw ConfigError("architecture: last token must be the output layer");
  }
  return spec;
}

template <typename T>
Network<T> Network<T>::build(const NetworkSpec& spec, const NetworkOptions& options) {
  Network<T> net;
  net.spec = spec;
  net.options = options;
  Rng init_rng = Rng::derive(options.seed, 0x1417);
  for (const auto& l : spec.layers) {
    if (l.kind == TokenKind::Pool) {
      net.stages.push_back({true, 0});
      continue;
    }
    if (l.kind == TokenKind::Output) {
      net.output = OutputLayer<T>::init(l.in_channels, l.width, init_rng);
      continue;
    }
    BlockSpec b;
    b.kind = l.kind == TokenKind::Conv ? BlockKind::Conv : BlockKind::Dense;
    b.in_channels = l.in_channels;
    b.in_height = l.in_height;
    b.in_width = l.in_width;
    b.out_channels = l.out_channels;
    b.slope = options.slope;
    b.dropout = options.dropout;
    b.classes = spec.classes;
    b.index = net.blocks.size();
    b.loss = options.loss;
    net.stages.push_back({false, net.blocks.size()});
    net.blocks.push_back(init_params<T>(b, init_rng));
  }
  return net;
}

template <typename T>
Tensor<T> Network<T>::logits(const Tensor<T>& x) const {
  Tensor<T> act = x;
  for (const Stage& s : stages) {
    act = s.pool ? ops::maxpool2x2(act).out : block_infer(blocks[s.block], act);
  }
  return output.forward(act);
}

template <typename T>
Checkpoint Network<T>::to_checkpoint() const {
  Checkpoint c;
  c.block_count = static_cast<std::uint32_t>(blocks.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].for_each_tensor([&](const std::string& name, const Tensor<T>& t, ParamRole) {
      c.tensors.push_back({"block" + std::to_string(i) + "." + name, t.template cast<float>()});
    });
  }
  c.tensors.push_back({"output.weight", output.weight.template cast<float>()});
  c.tensors.push_back({"output.bias", output.bias.template cast<float>()});
  return c;
}

template <typename T>
void Network<T>::load_checkpoint(const Checkpoint& checkpoint) {
  if (checkpoint.block_count != blocks.size()) {
    throw DataError("checkpoint/arch mismatch: checkpoint has " +
                    std::to_string(checkpoint.block_count) + " blocks, architecture " +
                    std::to_string(blocks.size()));
  }
  std::size_t used = 0;
  auto take = [&](const std::string& name, Tensor<T>& dst) {
    const NamedTensor* src = checkpoint.find(name);
    if (src == nullptr) throw DataError("checkpoint/arch mismatch: missing tensor '" + name + "'");
    if (src->value.shape() != dst.shape()) {
      throw DataError("checkpoint/arch mismatch: tensor '" + name + "' has shape " +
                      shape_string(src->value.shape()) + ", architecture expects " +
                      shape_string(dst.shape()));
    }
    dst = src->value.template cast<T>();
    ++used;
  };
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].for_each_tensor([&](const std::string& name, Tensor<T>& t, ParamRole) {
      take("block" + std::to_string(i) + "." + name, t);
    });
    ++blocks[i].generation;
  }
  take("output.weight", output.weight);
  take("output.bias", output.bias);
  if (used != checkpoint.tensors.size()) {
    throw DataError("checkpoint/arch mismatch: checkpoint holds " +
                    std::to_string(checkpoint.tensors.size() - used) + " unexpected tensors");
  }
}

template struct Network<float>;
template struct Network<double>;

}  // namespace llrn
