#include "llrn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "llrn/network.hpp"
#include "llrn/ops.hpp"
#include "llrn/rng.hpp"
#include "llrn/trainer.hpp"

namespace llrn::gradcheck {

using T = double;
using Fn = std::function<double()>;
using losses::LossMode;

double relative_error(const Tensor<double>& analytic, const Tensor<double>& numeric) {
  require_same_shape(analytic, numeric, "relative_error");
  double diff = 0.0, scale = kScaleFloor;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / scale;
}

Tensor<double> numeric_gradient(Tensor<double>& param, const Fn& loss, double step) {
  Tensor<double> g(param.shape());
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double saved = param[i];
    param[i] = saved + step;
    const double up = loss();
    param[i] = saved - step;
    const double down = loss();
    param[i] = saved;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

namespace {

Tensor<T> randn(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

// Values bounded away from zero, for checks across a kink.
Tensor<T> away_from_zero(Shape shape, Rng& rng, double margin) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) {
    const double u = rng.uniform(margin, 1.5);
    v = rng.bernoulli(0.5) ? u : -u;
  }
  return t;
}

double dot(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Tensor<T> pooled(const Tensor<T>& h, std::size_t pool) {
  return h.rank() == 4 ? ops::avgpool(h, pool).flattened() : h.flattened();
}

struct Pair {
  std::string label;
  Tensor<T> analytic;
  Tensor<T> numeric;
};

class Checker {
 public:
  explicit Checker(const Options& o) : o_(o) {}

  CheckResult finish(const std::string& name, std::vector<Pair> pairs) const {
    CheckResult r;
    r.name = name;
    for (auto& p : pairs) {
      if (name == o_.corrupt) {
        for (auto& v : p.analytic.values()) v = -v;
      }
      const double e = relative_error(p.analytic, p.numeric);
      if (e >= r.max_rel_error) {
        r.max_rel_error = e;
        r.worst = p.label;
      }
    }
    r.passed = r.max_rel_error < o_.tolerance;
    return r;
  }

  Pair pair(const std::string& label, Tensor<T> analytic, Tensor<T>& param, const Fn& loss) const {
    return {label, std::move(analytic), numeric_gradient(param, loss, o_.step)};
  }

 private:
  const Options& o_;
};

}  // namespace

std::vector<CheckResult> op_checks(const Options& options) {
  Checker ck(options);
  Rng rng = Rng::derive(options.seed, 11);
  std::vector<CheckResult> out;

  {
    Tensor<T> a = randn({3, 4}, rng), b = randn({4, 5}, rng), r = randn({3, 5}, rng);
    Fn f = [&] { return dot(r, ops::matmul(a, b)); };
    auto g = ops::matmul_backward(a, b, r);
    out.push_back(ck.finish("matmul", {ck.pair("a", g.da, a, f), ck.pair("b", g.db, b, f)}));
  }
  {
    Tensor<T> x = randn({3, 2, 2, 1}, rng), w = randn({4, 3}, rng), bias = randn({3}, rng);
    Tensor<T> r = randn({3, 3}, rng);
    Fn f = [&] { return dot(r, ops::linear(x, w, &bias)); };
    auto g = ops::linear_backward(x, w, true, r);
    out.push_back(ck.finish("linear", {ck.pair("x", g.dx, x, f), ck.pair("weight", g.dweight, w, f),
                                       ck.pair("bias", g.dbias, bias, f)}));
  }
  {
    Tensor<T> x = randn({2, 2, 5, 5}, rng), k = randn({3, 2, 3, 3}, rng);
    Tensor<T> r = randn({2, 3, 5, 5}, rng);
    Fn f = [&] { return dot(r, ops::conv2d(x, k, 1, 1)); };
    auto g = ops::conv2d_backward(x, k, r, 1, 1, true);
    out.push_back(ck.finish("conv2d", {ck.pair("x", g.dx, x, f), ck.pair("kernel", g.dkernel, k, f)}));
  }
  {
    Tensor<T> x = randn({2, 2, 7, 7}, rng), k = randn({3, 2, 3, 3}, rng);
    Tensor<T> r = randn({2, 3, 3, 3}, rng);
    Fn f = [&] { return dot(r, ops::conv2d(x, k, 2, 0)); };
    auto g = ops::conv2d_backward(x, k, r, 2, 0, true);
    out.push_back(
        ck.finish("conv2d_stride2", {ck.pair("x", g.dx, x, f), ck.pair("kernel", g.dkernel, k, f)}));
  }
  {
    Tensor<T> x = randn({2, 3, 2, 2}, rng), b = randn({3}, rng), r = randn({2, 3, 2, 2}, rng);
    Fn f = [&] {
      Tensor<T> y = x;
      ops::add_channel_bias(y, b);
      return dot(r, y);
    };
    out.push_back(ck.finish("channel_bias", {ck.pair("bias", ops::channel_bias_backward(r), b, f)}));
  }
  {
    // Distinct, well-spaced values so no window is near a tie.
    Tensor<T> x({2, 2, 4, 4});
    std::vector<double> vals(x.size());
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.1 * static_cast<double>(i);
    rng.shuffle(vals.begin(), vals.end());
    for (std::size_t i = 0; i < vals.size(); ++i) x[i] = vals[i];
    Tensor<T> r = randn({2, 2, 2, 2}, rng);
    Fn f = [&] { return dot(r, ops::maxpool2x2(x).out); };
    auto fw = ops::maxpool2x2(x);
    out.push_back(ck.finish(
        "maxpool2x2", {ck.pair("x", ops::maxpool2x2_backward(r, fw.argmax, x.shape()), x, f)}));
  }
  {
    Tensor<T> x = randn({2, 2, 4, 4}, rng), r = randn({2, 2, 2, 2}, rng);
    Fn f = [&] { return dot(r, ops::avgpool(x, 2)); };
    out.push_back(
        ck.finish("avgpool", {ck.pair("x", ops::avgpool_backward(r, 2, x.shape()), x, f)}));
  }
  for (const bool conv : {false, true}) {
    Tensor<T> x = conv ? randn({3, 2, 3, 3}, rng) : randn({6, 4}, rng);
    const std::size_t c = x.dim(1);
    auto p = ops::BatchNormParams<T>::identity(c);
    p.gamma = randn({c}, rng);
    p.beta = randn({c}, rng);
    Tensor<T> r = randn(x.shape(), rng);
    Fn f = [&] {
      auto q = p;
      return dot(r, ops::batchnorm(x, q, ops::Mode::Train).out);
    };
    auto q = p;
    auto fw = ops::batchnorm(x, q, ops::Mode::Train);
    auto g = ops::batchnorm_backward(r, p, fw.cache);
    out.push_back(ck.finish(conv ? "batchnorm_train_4d" : "batchnorm_train_2d",
                            {ck.pair("x", g.dx, x, f), ck.pair("gamma", g.dgamma, p.gamma, f),
                             ck.pair("beta", g.dbeta, p.beta, f)}));
  }
  {
    Tensor<T> x = randn({4, 3}, rng);
    auto p = ops::BatchNormParams<T>::identity(3);
    p.gamma = randn({3}, rng);
    p.beta = randn({3}, rng);
    p.running_mean = randn({3}, rng);
    for (std::size_t i = 0; i < 3; ++i) p.running_var[i] = 0.5 + rng.uniform();
    Tensor<T> r = randn(x.shape(), rng);
    Fn f = [&] {
      auto q = p;
      return dot(r, ops::batchnorm(x, q, ops::Mode::Eval).out);
    };
    auto q = p;
    auto fw = ops::batchnorm(x, q, ops::Mode::Eval);
    auto g = ops::batchnorm_backward(r, p, fw.cache);
    out.push_back(ck.finish("batchnorm_eval", {ck.pair("x", g.dx, x, f),
                                               ck.pair("gamma", g.dgamma, p.gamma, f),
                                               ck.pair("beta", g.dbeta, p.beta, f)}));
  }
  {
    Tensor<T> x = away_from_zero({4, 5}, rng, 1e-2), r = randn({4, 5}, rng);
    Fn f = [&] { return dot(r, ops::leaky_relu(x, 0.1)); };
    out.push_back(
        ck.finish("leaky_relu", {ck.pair("x", ops::leaky_relu_backward(r, x, 0.1), x, f)}));
  }
  {
    Tensor<T> x = randn({4, 6}, rng), r = randn({4, 6}, rng);
    const std::uint64_t mask_seed = rng.next_u64();
    Fn f = [&] {
      Rng m(mask_seed);
      return dot(r, ops::dropout(x, 0.3, m, ops::Mode::Train).out);
    };
    Rng m(mask_seed);
    auto fw = ops::dropout(x, 0.3, m, ops::Mode::Train);
    out.push_back(ck.finish("dropout", {ck.pair("x", ops::dropout_backward(r, fw), x, f)}));
  }
  {
    Tensor<T> x = randn({3, 2, 3, 3}, rng), r = randn({3, 2}, rng);
    Fn f = [&] { return dot(r, ops::std_per_feature_map(x)); };
    const auto sd = ops::std_per_feature_map(x);
    out.push_back(ck.finish("std_per_feature_map",
                            {ck.pair("x", ops::std_per_feature_map_backward(r, x, sd), x, f)}));
  }
  {
    Tensor<T> z = randn({5, 4}, rng);
    const std::vector<int> y = {0, 3, 1, 1, 2};
    Fn f = [&] { return ops::cross_entropy(z, y).loss; };
    out.push_back(ck.finish("cross_entropy", {ck.pair("logits", ops::cross_entropy(z, y).grad, z, f)}));
    const Tensor<T> t = ops::one_hot<T>(y, 4);
    Fn f2 = [&] { return ops::cross_entropy_logits(z, t).loss; };
    out.push_back(ck.finish("cross_entropy_onehot",
                            {ck.pair("logits", ops::cross_entropy_logits(z, t).grad, z, f2)}));
  }
  {
    Tensor<T> z = randn({4, 6}, rng, 2.0);
    Tensor<T> t({4, 6});
    for (auto& v : t.values()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    Fn f = [&] { return ops::binary_cross_entropy_logits(z, t).loss; };
    out.push_back(ck.finish("binary_cross_entropy",
                            {ck.pair("logits", ops::binary_cross_entropy_logits(z, t).grad, z, f)}));
  }
  {
    Tensor<T> x = randn({5, 4}, rng), r = randn({5, 5}, rng);
    Fn f = [&] { return dot(r, losses::SimilarityMatrix<T>(x).values()); };
    out.push_back(ck.finish("similarity_matrix",
                            {ck.pair("x", losses::SimilarityMatrix<T>(x).backward(r), x, f)}));
  }
  {
    Tensor<T> x = randn({5, 4}, rng);
    const std::vector<int> y = {0, 1, 2, 0, 1};
    const Tensor<T> target = losses::label_similarity<T>(y, 3);
    Fn f = [&] { return losses::similarity_match(x, target).loss; };
    out.push_back(ck.finish("similarity_match",
                            {ck.pair("x", losses::similarity_match(x, target).d_descriptor, x, f)}));
  }
  return out;
}

std::vector<CheckResult> loss_checks(const Options& options) {
  Checker ck(options);
  Rng rng = Rng::derive(options.seed, 12);
  std::vector<CheckResult> out;
  const std::vector<int> y = {0, 1, 2, 0, 1, 2};
  const std::size_t classes = 3;

  for (const bool conv : {false, true}) {
    const std::string suffix = conv ? "_conv" : "_dense";
    Tensor<T> h = conv ? randn({6, 2, 4, 4}, rng) : randn({6, 5}, rng);
    const std::size_t pool = conv ? 2 : 1;
    const std::size_t flat = conv ? 8 : 5;

    {
      Tensor<T> w = randn({flat, classes}, rng, 0.5), b = randn({classes}, rng, 0.1);
      Fn f = [&] { return losses::pred_loss(h, y, w, b, pool).loss; };
      auto g = losses::pred_loss(h, y, w, b, pool);
      out.push_back(ck.finish("loss:pred" + suffix, {ck.pair("h", g.d_input, h, f),
                                                      ck.pair("weight", g.d_weight, w, f),
                                                      ck.pair("bias", g.d_bias, b, f)}));
    }
    {
      const Tensor<T> target = losses::label_similarity<T>(y, classes);
      Tensor<T> head = conv ? randn({2, 2, 3, 3}, rng, 0.5) : randn({5, 5}, rng, 0.5);
      Fn f = [&] { return losses::sim_loss(h, target, head).loss; };
      auto g = losses::sim_loss(h, target, head);
      out.push_back(ck.finish("loss:sim" + suffix,
                              {ck.pair("h", g.d_input, h, f), ck.pair("head", g.d_weight, head, f)}));
    }
    {
      const Tensor<T> projection = randn({7, classes}, rng);
      const Tensor<T> target =
          losses::SimilarityMatrix<T>(losses::project_targets(projection, y)).values();
      Fn f = [&] { return losses::sim_bpf_loss(h, target).loss; };
      out.push_back(ck.finish("loss:sim-bpf" + suffix,
                              {ck.pair("h", losses::sim_bpf_loss(h, target).d_input, h, f)}));
    }
    {
      const Tensor<T> projection = randn({7, classes}, rng);
      const Tensor<T> targets = losses::binarize(losses::project_targets(projection, y));
      Tensor<T> w = randn({flat, 7}, rng, 0.5), b = randn({7}, rng, 0.1);
      Tensor<T> fb = randn({flat, 7}, rng, 0.5);
      auto g = losses::pred_bpf_loss(h, targets, w, b, fb, pool);
      Fn f = [&] { return losses::pred_bpf_loss(h, targets, w, b, fb, pool).loss; };
      // The signal reaching h is the logit error, held fixed, sent back through B.
      const Tensor<T> e =
          ops::binary_cross_entropy_logits(ops::linear(pooled(h, pool), w, &b), targets).grad;
      Fn surrogate = [&] {
        return dot(e, ops::linear(pooled(h, pool), fb, static_cast<const Tensor<T>*>(nullptr)));
      };
      out.push_back(ck.finish("loss:pred-bpf" + suffix, {ck.pair("weight", g.d_weight, w, f),
                                                          ck.pair("bias", g.d_bias, b, f),
                                                          ck.pair("h", g.d_input, h, surrogate)}));
    }
  }
  return out;
}

namespace {

// Train-mode activations entering block `index`, parameters untouched.
Tensor<T> block_input(Network<T>& net, const Tensor<T>& x, std::size_t index) {
  Tensor<T> act = x;
  Rng r(0);
  for (const Stage& s : net.stages) {
    if (!s.pool && s.block == index) break;
    act = s.pool ? ops::maxpool2x2(act).out
                 : block_forward(net.blocks[s.block], act, ops::Mode::Train, r).out;
  }
  return act;
}

}  // namespace

CheckResult network_check(LossMode mode, const std::string& arch, const Options& options) {
  Checker ck(options);
  const std::size_t classes = 3;
  NetworkOptions no;
  no.loss = losses::LossConfig::for_mode(mode);
  no.loss.projection_dim = 8;
  no.loss.pool_target_dim = 12;
  no.loss.projection_seed = options.seed;
  no.slope = 0.1;
  no.dropout = 0.0;
  no.seed = options.seed;
  const NetworkSpec spec = parse_arch(arch, 1.0, 2, 4, 4, classes);
  Network<T> net = Network<T>::build(spec, no);
  for (auto& b : net.blocks) {
    // Non-trivial batchnorm affine parameters so their gradients are exercised.
    Rng r = Rng::derive(options.seed, 100 + b.spec.index);
    for (auto& v : b.bn.gamma.values()) v = 0.5 + r.uniform();
    for (auto& v : b.bn.beta.values()) v = 0.2 * r.normal();
  }

  Rng data_rng = Rng::derive(options.seed, 13);
  const Tensor<T> x = randn({6, 2, 4, 4}, data_rng);
  const std::vector<int> y = {0, 1, 2, 2, 1, 0};

  Rng step_rng(0);
  const auto step = train_step(net, x, y, step_rng, StepOptions{0.0, false, true, nullptr});

  const bool local = losses::is_local(mode);
  const bool bpf_pred = losses::is_bpf(mode) && losses::uses_pred(mode);

  auto layer_losses = [](Network<T>& n, const Tensor<T>& in, const std::vector<int>& labels) {
    Rng r(0);
    return train_step(n, in, labels, r, StepOptions{0.0, false, false, nullptr}).layer_losses;
  };
  auto objective = [&](Network<T>& n, std::size_t block) -> Fn {
    return [&n, block, local, &x, &y, &layer_losses] {
      const auto l = layer_losses(n, x, y);
      if (local) return l[block];
      double total = 0.0;
      for (double v : l) total += v;
      return total;
    };
  };

  std::vector<Pair> pairs;
  const std::size_t out_index = net.blocks.size();
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    LayerBlock<T>& b = net.blocks[i];
    const BlockGrads<T>& g = step.block_grads[i];
    const std::string p = "block" + std::to_string(i) + ".";
    const Fn f = objective(net, i);

    const Tensor<T> in = block_input(net, x, i);
    auto hidden = [&b, in] {
      Rng r(0);
      return block_forward(b, in, ops::Mode::Train, r).cache.hidden;
    };

    // Main-path parameters in the pred-bpf modes receive the classifier's
    // logit error through B. Hold that error fixed and differentiate
    // (1 - beta) * <e, pool(h) B> + beta * sim(h) instead.
    Fn fm = f;
    if (bpf_pred) {
      const double beta = losses::uses_sim(mode) ? b.spec.loss.beta : 0.0;
      const Tensor<T> targets = losses::binarize(losses::project_targets(b.projection, y));
      const Tensor<T> e = ops::binary_cross_entropy_logits(
          ops::linear(pooled(hidden(), b.pool_kernel), b.classifier_weight, &b.classifier_bias),
          targets).grad;
      const Tensor<T> sim_target =
          losses::SimilarityMatrix<T>(losses::project_targets(b.projection, y)).values();
      fm = [&b, hidden, e, sim_target, beta] {
        const Tensor<T> h = hidden();
        double v = (1.0 - beta) * dot(e, ops::linear(pooled(h, b.pool_kernel), b.feedback,
                                                     static_cast<const Tensor<T>*>(nullptr)));
        if (beta > 0.0) v += beta * losses::sim_bpf_loss(h, sim_target).loss;
        return v;
      };
    }
    pairs.push_back(ck.pair(p + "weight", g.weight, b.weight, fm));
    pairs.push_back(ck.pair(p + "bias", g.bias, b.bias, fm));
    pairs.push_back(ck.pair(p + "bn.gamma", g.gamma, b.bn.gamma, fm));
    pairs.push_back(ck.pair(p + "bn.beta", g.beta, b.bn.beta, fm));

    // Each head descends its own loss only.
    const Fn f_pred = [&b, hidden, &y] { return local_losses(b, hidden(), y).pred; };
    const Fn f_sim = [&b, hidden, &y] { return local_losses(b, hidden(), y).sim; };
    if (!b.classifier_weight.empty()) {
      pairs.push_back(ck.pair(p + "classifier.weight", g.classifier_weight, b.classifier_weight, f_pred));
      pairs.push_back(ck.pair(p + "classifier.bias", g.classifier_bias, b.classifier_bias, f_pred));
    }
    if (!b.sim_head.empty()) {
      pairs.push_back(ck.pair(p + "sim_head.weight", g.sim_head, b.sim_head, f_sim));
    }
  }
  const Fn fo = objective(net, out_index);
  pairs.push_back(ck.pair("output.weight", step.output_weight_grad, net.output.weight, fo));
  pairs.push_back(ck.pair("output.bias", step.output_bias_grad, net.output.bias, fo));
  return ck.finish("net:" + losses::to_string(mode), std::move(pairs));
}

std::vector<CheckResult> network_checks(const Options& options) {
  std::vector<CheckResult> out;
  for (const auto& name : losses::loss_mode_names()) {
    out.push_back(network_check(losses::parse_loss_mode(name), "conv3-pool-fc5-fc", options));
  }
  return out;
}

std::vector<CheckResult> run_all(const Options& options) {
  auto out = op_checks(options);
  for (auto& r : loss_checks(options)) out.push_back(std::move(r));
  for (auto& r : network_checks(options)) out.push_back(std::move(r));
  return out;
}

}  // namespace llrn::gradcheck
