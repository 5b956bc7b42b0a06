#include <doctest.h>

#include "helpers.hpp"
#include "llrn/checkpoint.hpp"
#include "llrn/layers.hpp"
#include "llrn/network.hpp"

using namespace llrn;
using llrn::test::random_tensor;

namespace {

BlockSpec dense_spec(std::size_t in, std::size_t out, losses::LossMode mode) {
  BlockSpec s;
  s.kind = BlockKind::Dense;
  s.in_channels = in;
  s.out_channels = out;
  s.classes = 3;
  s.slope = 0.01;
  s.loss = losses::LossConfig::for_mode(mode);
  s.loss.projection_dim = 8;
  return s;
}

}  // namespace

TEST_CASE("init: fan-in bound, zero biases, determinism") {
  auto spec = dense_spec(784, 1024, losses::LossMode::Glob);
  Rng a(1), b(1);
  const auto block = init_params<float>(spec, a);
  CHECK(block.weight.shape() == Shape{784, 1024});
  const double bound = std::sqrt(1.0 / 784.0);
  CHECK(bound == doctest::Approx(0.0357).epsilon(1e-3));
  for (float w : block.weight.values()) CHECK(static_cast<double>(std::abs(w)) < bound);
  for (float v : block.bias.values()) CHECK(v == 0.0f);
  const auto again = init_params<float>(spec, b);
  CHECK(again.weight == block.weight);

  spec.in_channels = 0;
  CHECK_THROWS_AS(init_params<float>(spec, a), ConfigError);
}

TEST_CASE("init: heads follow the loss mode") {
  Rng r(2);
  const auto ps = init_params<float>(dense_spec(6, 5, losses::LossMode::PredSim), r);
  CHECK(ps.classifier_weight.shape() == Shape{5, 3});
  CHECK(ps.sim_head.shape() == Shape{5, 5});
  CHECK(ps.feedback.empty());
  const auto bpf = init_params<float>(dense_spec(6, 5, losses::LossMode::PredSimBpf), r);
  CHECK(bpf.classifier_weight.shape() == Shape{5, 8});
  CHECK(bpf.feedback.shape() == Shape{5, 8});
  CHECK(bpf.projection.shape() == Shape{8, 3});
  CHECK(bpf.sim_head.empty());
  const auto glob = init_params<float>(dense_spec(6, 5, losses::LossMode::Glob), r);
  CHECK(glob.classifier_weight.empty());
  CHECK(glob.sim_head.empty());
}

TEST_CASE("block_forward: eval ignores rng, train is reproducible") {
  auto spec = dense_spec(4, 6, losses::LossMode::PredSim);
  spec.dropout = 0.2;
  Rng init(3);
  auto block = init_params<float>(spec, init);
  Rng data(4);
  const auto x = random_tensor<float>({8, 4}, data);
  Rng r1(10), r2(11);
  CHECK(block_forward(block, x, ops::Mode::Eval, r1).out ==
        block_forward(block, x, ops::Mode::Eval, r2).out);
  auto b1 = block, b2 = block;
  Rng s1(12), s2(12);
  CHECK(block_forward(b1, x, ops::Mode::Train, s1).out == block_forward(b2, x, ops::Mode::Train, s2).out);
}

TEST_CASE("block_forward: identity weights on a standardized batch give relu") {
  auto spec = dense_spec(4, 4, losses::LossMode::Glob);
  spec.slope = 0.0;
  Rng init(5);
  auto block = init_params<double>(spec, init);
  block.weight.fill(0.0);
  for (std::size_t i = 0; i < 4; ++i) block.weight.at(i, i) = 1.0;
  Rng data(6);
  auto x = random_tensor<double>({32, 4}, data);
  for (std::size_t j = 0; j < 4; ++j) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 32; ++i) m += x.at(i, j) / 32;
    for (std::size_t i = 0; i < 32; ++i) v += (x.at(i, j) - m) * (x.at(i, j) - m) / 32;
    for (std::size_t i = 0; i < 32; ++i) x.at(i, j) = (x.at(i, j) - m) / std::sqrt(v);
  }
  Rng r(7);
  const auto y = block_forward(block, x, ops::Mode::Train, r).out;
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y[i] - std::max(x[i], 0.0)) < 1e-3);
}

TEST_CASE("block_backward: zero local gradient gives zero parameter gradients") {
  Rng init(8);
  auto block = init_params<double>(dense_spec(5, 4, losses::LossMode::Pred), init);
  Rng data(9);
  const auto x = random_tensor<double>({6, 5}, data);
  auto f = block_forward(block, x, ops::Mode::Train, data);
  const Tensor<double> zero(f.cache.hidden.shape());
  const auto g = block_backward<double>(block, f.cache, nullptr, &zero, false);
  for (const auto* t : {&g.weight, &g.bias, &g.gamma, &g.beta})
    for (double v : t->values()) CHECK(v == 0.0);
}

TEST_CASE("block_backward: stale cache is rejected") {
  Rng init(10);
  auto block = init_params<double>(dense_spec(5, 4, losses::LossMode::Pred), init);
  Rng data(11);
  const auto x = random_tensor<double>({6, 5}, data);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2};
  auto f = block_forward(block, x, ops::Mode::Train, data);
  const auto ll = local_losses(block, f.cache.hidden, labels);
  const auto g = block_local_backward(block, f.cache, ll);
  apply_gradients(block, g, 1e-3);
  CHECK_THROWS_AS(block_local_backward(block, f.cache, ll), UsageError);
}

TEST_CASE("adam: first-step magnitudes") {
  Tensor<double> p({1}, 0.5);
  auto st = AdamState<double>::for_param(p);
  adam_step(p, Tensor<double>({1}, 1.0), st, 1e-3);
  CHECK(p[0] - 0.5 == doctest::Approx(-1e-3 / (1.0 + 1e-8)).epsilon(1e-9));
  CHECK(st.t == 1);

  Tensor<double> q({2}, 0.25);
  auto sq = AdamState<double>::for_param(q);
  adam_step(q, Tensor<double>({2}), sq, 1e-3);
  CHECK(q[0] == 0.25);
  CHECK(q[1] == 0.25);

  Tensor<double> z({1}, 1.0);
  auto sz = AdamState<double>::for_param(z);
  CHECK_THROWS_AS(adam_step(z, Tensor<double>({1}, std::nan("")), sz, 1e-3), NumericError);
  CHECK(z[0] == 1.0);
  CHECK(sz.t == 0);
}

TEST_CASE("apply_gradients: frozen matrices never move") {
  Rng init(12);
  auto block = init_params<double>(dense_spec(5, 4, losses::LossMode::PredSimBpf), init);
  const auto fb = tensor_hash(block.feedback);
  const auto pj = tensor_hash(block.projection);
  Rng data(13);
  const auto x = random_tensor<double>({6, 5}, data);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2};
  for (int step = 0; step < 5; ++step) {
    auto f = block_forward(block, x, ops::Mode::Train, data);
    const auto ll = local_losses(block, f.cache.hidden, labels);
    apply_gradients(block, block_local_backward(block, f.cache, ll), 1e-2);
  }
  CHECK(tensor_hash(block.feedback) == fb);
  CHECK(tensor_hash(block.projection) == pj);
}

TEST_CASE("parse_arch: shape bookkeeping and presets") {
  const auto s = parse_arch("conv128-pool-fc10", 1.0, 1, 28, 28, 10);
  REQUIRE(s.layers.size() == 3);
  CHECK(s.layers[0].kind == TokenKind::Conv);
  CHECK(s.layers[0].in_channels == 1);
  CHECK(s.layers[0].out_channels == 128);
  CHECK(s.layers[0].out_height == 28);
  CHECK(s.layers[1].kind == TokenKind::Pool);
  CHECK(s.layers[1].out_height == 14);
  CHECK(s.layers[2].kind == TokenKind::Output);
  CHECK(s.layers[2].in_channels * s.layers[2].in_height * s.layers[2].in_width == 128 * 14 * 14);
  CHECK(s.block_count() == 1);

  const auto vgg = parse_arch(resolve_arch_preset("vgg8b"), 1.0, 3, 32, 32, 10);
  CHECK(vgg.weight_layers() == 8);
  std::size_t convs = 0;
  for (const auto& t : vgg.layers) convs += t.kind == TokenKind::Conv;
  CHECK(convs == 6);
  const auto wide = parse_arch(resolve_arch_preset("vgg8b"), 2.0, 3, 32, 32, 10);
  CHECK(wide.layers[0].out_channels == 256);
}

TEST_CASE("parse_arch: malformed strings") {
  CHECK_THROWS_AS(parse_arch("conv8-bogus-fc", 1.0, 1, 8, 8, 3), ConfigError);
  CHECK_THROWS_AS(parse_arch("pool-conv8-fc", 1.0, 1, 8, 8, 3), ConfigError);
  CHECK_THROWS_AS(parse_arch("conv8-fc16", 1.0, 1, 8, 8, 3), ConfigError);
  CHECK_THROWS_AS(parse_arch("fc16-pool-fc", 1.0, 1, 8, 8, 3), ConfigError);
  CHECK_THROWS_AS(parse_arch("conv8-pool-pool-pool-pool-fc", 1.0, 1, 8, 8, 3), ConfigError);
  CHECK_NOTHROW(parse_arch("fc16-fc3", 1.0, 1, 8, 8, 3));
}

TEST_CASE("checkpoint: network round-trip is exact") {
  const auto spec = parse_arch("conv4-pool-fc8-fc", 1.0, 1, 4, 4, 3);
  NetworkOptions opt;
  opt.loss = losses::LossConfig::for_mode(losses::LossMode::PredSimBpf);
  opt.loss.projection_dim = 8;
  opt.seed = 3;
  auto net = Network<float>::build(spec, opt);
  const auto bytes = encode_checkpoint(net.to_checkpoint());
  const auto decoded = decode_checkpoint(bytes);
  CHECK(encode_checkpoint(decoded) == bytes);

  opt.seed = 4;
  auto other = Network<float>::build(spec, opt);
  CHECK_FALSE(encode_checkpoint(other.to_checkpoint()) == bytes);
  other.load_checkpoint(decoded);
  CHECK(encode_checkpoint(other.to_checkpoint()) == bytes);

  auto wrong = Network<float>::build(parse_arch("conv4-pool-fc9-fc", 1.0, 1, 4, 4, 3), opt);
  CHECK_THROWS_AS(wrong.load_checkpoint(decoded), DataError);
}

TEST_CASE("checkpoint: corrupt bytes are reported with an offset") {
  const auto spec = parse_arch("fc4-fc", 1.0, 1, 2, 2, 3);
  NetworkOptions opt;
  opt.loss = losses::LossConfig::for_mode(losses::LossMode::Pred);
  const auto bytes = encode_checkpoint(Network<float>::build(spec, opt).to_checkpoint());
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_AS(decode_checkpoint(truncated), DataError);
  auto bad = bytes;
  bad[0] = 'X';
  try {
    decode_checkpoint(bad);
    FAIL("expected an error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
  }
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(extra), DataError);
}
