#include <doctest.h>

#include "helpers.hpp"
#include "llrn/losses.hpp"
#include "llrn/ops.hpp"

using namespace llrn;
using namespace llrn::losses;
using llrn::test::fd_error;
using llrn::test::random_tensor;
using llrn::test::weighted_sum;

TEST_CASE("similarity: hand example and self-similarity") {
  const Tensor<double> x({2, 2}, {1, 0, 0, 1});
  const auto s = similarity_matrix(x);
  CHECK(s(0, 0) == doctest::Approx(1.0));
  CHECK(s(1, 1) == doctest::Approx(1.0));
  CHECK(s(0, 1) == doctest::Approx(-1.0));
  CHECK(s(1, 0) == doctest::Approx(-1.0));
  CHECK_THROWS_AS(similarity_matrix(Tensor<double>({1, 3}, 1.0)), InputError);
}

TEST_CASE("similarity: symmetric, unit diagonal, bounded, affine invariant") {
  Rng r(21);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor<double>({6, 5}, r);
    const auto s = similarity_matrix(x);
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(s(i, i) == doctest::Approx(1.0).epsilon(1e-12));
      for (std::size_t j = 0; j < 6; ++j) {
        CHECK(s(i, j) == s(j, i));
        CHECK(std::abs(s(i, j)) <= 1.0);
      }
    }
    Tensor<double> y = x;
    for (std::size_t i = 0; i < 6; ++i) {
      const double a = r.uniform(0.1, 10.0), b = r.normal(0.0, 5.0);
      for (std::size_t j = 0; j < 5; ++j) y.at(i, j) = a * x.at(i, j) + b;
    }
    const auto t = similarity_matrix(y);
    for (std::size_t i = 0; i < 36; ++i) CHECK(std::abs(t.values()[i] - s.values()[i]) < 1e-6);
  }
}

TEST_CASE("similarity: one-hot law") {
  for (std::size_t classes : {2u, 3u, 10u}) {
    const std::vector<int> labels{0, 1, 0, static_cast<int>(classes - 1), 1};
    const auto s = similarity_matrix(ops::one_hot<double>(labels, classes));
    const auto t = label_similarity<double>(labels, classes);
    for (std::size_t i = 0; i < labels.size(); ++i)
      for (std::size_t j = 0; j < labels.size(); ++j) {
        const double want = labels[i] == labels[j] ? 1.0 : -1.0 / static_cast<double>(classes - 1);
        CHECK(s(i, j) == doctest::Approx(want).epsilon(1e-9));
        CHECK(t.at(i, j) == doctest::Approx(want).epsilon(1e-12));
      }
  }
  const std::vector<int> three{0, 1};
  CHECK(label_similarity<double>(three, 3).at(0, 1) == doctest::Approx(-0.5));
}

TEST_CASE("similarity: backward matches finite differences") {
  Rng r(22);
  auto x = random_tensor<double>({5, 4}, r);
  const auto g = random_tensor<double>({5, 5}, r);
  const auto dx = similarity_matrix(x).backward(g);
  CHECK(fd_error(dx, x, [&] { return weighted_sum(similarity_matrix(x).values(), g); }) < 1e-6);
}

TEST_CASE("similarity_match: nonnegative, zero exactly at a match") {
  Rng r(23);
  for (int trial = 0; trial < 20; ++trial) {
    const auto d = random_tensor<double>({6, 3}, r);
    const auto target = similarity_matrix(random_tensor<double>({6, 4}, r)).values();
    CHECK(similarity_match(d, target).loss >= 0.0);
    const auto self = similarity_match(d, similarity_matrix(d).values());
    CHECK(self.loss == doctest::Approx(0.0).epsilon(1e-14));
    for (double v : self.d_descriptor.values()) CHECK(std::abs(v) < 1e-12);
  }
}

TEST_CASE("sim_loss: zero when the head reproduces the label geometry") {
  const std::vector<int> labels{0, 1, 2, 1};
  const auto target = label_similarity<double>(labels, 3);
  const auto h = ops::one_hot<double>(labels, 3);
  Tensor<double> eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  CHECK(sim_loss(h, target, eye).loss == doctest::Approx(0.0).epsilon(1e-12));

  const std::vector<int> same{2, 2, 2};
  const Tensor<double> rows({3, 3}, {1, 2, 0, 1, 2, 0, 1, 2, 0});
  CHECK(sim_loss(rows, label_similarity<double>(same, 3), eye).loss ==
        doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("pred_loss: zero classifier gives ln C") {
  Rng r(24);
  const std::vector<int> labels{0, 4, 9};
  const auto h = random_tensor<double>({3, 7}, r);
  CHECK(pred_loss(h, labels, Tensor<double>({7, 10}), Tensor<double>({10}), 1).loss ==
        doctest::Approx(2.302585).epsilon(1e-6));
  const auto conv = random_tensor<double>({3, 2, 4, 4}, r);
  CHECK(pred_loss(conv, labels, Tensor<double>({8, 10}), Tensor<double>({10}), 2).loss ==
        doctest::Approx(std::log(10.0)).epsilon(1e-12));
  CHECK_THROWS_AS(pred_loss(conv, labels, Tensor<double>({9, 10}), Tensor<double>({10}), 2),
                  ConfigError);
}

TEST_CASE("pred_bpf_loss: ln 2 at zero weights, zero at saturated targets") {
  Rng r(25);
  const auto h = random_tensor<double>({4, 5}, r);
  const auto targets = binarize(random_tensor<double>({4, 6}, r));
  const auto fb = random_tensor<double>({5, 6}, r);
  CHECK(pred_bpf_loss(h, targets, Tensor<double>({5, 6}), Tensor<double>({6}), fb, 1).loss ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Tensor<double> bias({6});
  const Tensor<double> zero_h({4, 5});
  const Tensor<double> ones({4, 6}, 1.0);
  bias.fill(60.0);
  const auto sat = pred_bpf_loss(zero_h, ones, Tensor<double>({5, 6}), bias, fb, 1);
  CHECK(sat.loss < 1e-20);
  for (double v : sat.d_weight.values()) CHECK(std::abs(v) < 1e-20);
  for (double v : sat.d_input.values()) CHECK(std::abs(v) < 1e-20);
}

TEST_CASE("pred_bpf_loss: the hidden gradient runs through the feedback matrix only") {
  Rng r(26);
  const auto h = random_tensor<double>({4, 5}, r);
  const auto targets = binarize(random_tensor<double>({4, 6}, r));
  const auto w = random_tensor<double>({5, 6}, r);
  const auto b = random_tensor<double>({6}, r);
  const auto fb1 = random_tensor<double>({5, 6}, r);
  const auto fb2 = random_tensor<double>({5, 6}, r);
  const auto one = pred_bpf_loss(h, targets, w, b, fb1, 1);
  const auto two = pred_bpf_loss(h, targets, w, b, fb2, 1);
  CHECK(one.d_weight == two.d_weight);
  CHECK(one.d_bias == two.d_bias);
  CHECK_FALSE(one.d_input == two.d_input);
  // with B = W the feedback path is ordinary backprop
  const auto exact = pred_bpf_loss(h, targets, w, b, w, 1);
  auto hh = h;
  CHECK(fd_error(exact.d_input, hh,
                 [&] { return pred_bpf_loss(hh, targets, w, b, fb1, 1).loss; }) < 1e-6);
}

TEST_CASE("sim_bpf_loss: zero when descriptors already match, projected targets") {
  Rng r(27);
  const auto h = random_tensor<double>({5, 3, 4, 4}, r);
  const auto desc = ops::std_per_feature_map(h);
  CHECK(sim_bpf_loss(h, similarity_matrix(desc).values()).loss ==
        doctest::Approx(0.0).epsilon(1e-14));
  const auto projection = random_tensor<double>({8, 4}, r);
  const std::vector<int> labels{1, 3, 1};
  const auto yp = project_targets(projection, labels);
  CHECK(yp.shape() == Shape{3, 8});
  const auto s = similarity_matrix(yp);
  CHECK(s(0, 2) == doctest::Approx(1.0));
  for (std::size_t k = 0; k < 8; ++k) CHECK(yp.at(0, k) == projection.at(k, 1));
}

TEST_CASE("binarize: threshold at zero") {
  const Tensor<double> x({4}, {-1.0, 0.0, 1e-9, 3.0});
  const auto b = binarize(x);
  CHECK(b[0] == 0.0);
  CHECK(b[1] == 0.0);
  CHECK(b[2] == 1.0);
  CHECK(b[3] == 1.0);
}

TEST_CASE("combine: convex weighting") {
  LossGrad<double> pred{1.0, Tensor<double>({2}, {1.0, 0.0}), {}, {}};
  LossGrad<double> sim{2.0, Tensor<double>({2}, {0.0, 1.0}), {}, {}};
  const auto c = combine(pred, sim, 0.99);
  CHECK(c.loss == doctest::Approx(1.99));
  CHECK(c.d_input[0] == doctest::Approx(0.01));
  CHECK(c.d_input[1] == doctest::Approx(0.99));
  CHECK(combine(pred, sim, 0.0).loss == 1.0);
  CHECK(combine(pred, sim, 1.0).loss == 2.0);
  CHECK_THROWS_AS(combine(pred, sim, 1.5), ConfigError);
  CHECK_THROWS_AS(combine(pred, sim, -0.1), ConfigError);
}

TEST_CASE("choose_pool_kernel: examples") {
  auto a = choose_pool_kernel(128, 16, 2048);
  CHECK(a.kernel == 4);
  CHECK(a.flat_dim == 2048);
  CHECK(choose_pool_kernel(1024, 1, 1024).kernel == 1);
  auto c = choose_pool_kernel(512, 8, 1024);
  CHECK(c.kernel == 4);
  CHECK(c.flat_dim == 2048);
  auto d = choose_pool_kernel(4, 4, 1000);
  CHECK(d.fallback);
  CHECK(d.kernel == 4);
  CHECK(d.flat_dim == 4);
}

TEST_CASE("loss modes: names round-trip and default weights") {
  for (const auto& name : loss_mode_names()) CHECK(to_string(parse_loss_mode(name)) == name);
  CHECK(loss_mode_names().size() == 8);
  CHECK_THROWS_AS(parse_loss_mode("bogus"), ConfigError);
  CHECK(default_beta(LossMode::PredSim) == 0.99);
  CHECK(default_beta(LossMode::PredSimBpf) == 0.01);
  CHECK(LossConfig::for_mode(LossMode::PredSim).beta == 0.99);
  CHECK(is_local(LossMode::Sim));
  CHECK_FALSE(is_local(LossMode::Glob));
  CHECK_FALSE(is_local(LossMode::GlobSim));
  CHECK(is_bpf(LossMode::SimBpf));
  CHECK_FALSE(uses_sim_head(LossMode::SimBpf));
}
