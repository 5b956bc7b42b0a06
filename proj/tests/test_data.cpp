#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "llrn/data.hpp"

using namespace llrn;
using namespace llrn::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("llrn_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Tensor<float> ramp(Shape shape) {
  Tensor<float> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i + 1);
  return t;
}

}  // namespace

TEST_CASE("idx: fixture round-trips exactly") {
  const auto dir = scratch("idx");
  std::vector<std::uint8_t> pixels(2 * 3 * 4);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<std::uint8_t>(i * 11);
  const std::vector<std::uint8_t> labels{7, 2};
  write_idx_images(dir / "img", pixels, 2, 3, 4);
  write_idx_labels(dir / "lbl", labels);
  const auto d = load_idx(dir / "img", dir / "lbl");
  CHECK(d.images.shape() == Shape{2, 1, 3, 4});
  CHECK(d.labels == std::vector<int>{7, 2});
  for (std::size_t i = 0; i < pixels.size(); ++i) CHECK(d.images[i] == static_cast<float>(pixels[i]) / 255.0f);
  CHECK_FALSE(idx_dir_complete(dir));
}

TEST_CASE("idx: bad magic and truncation") {
  const auto dir = scratch("idx_bad");
  const std::vector<std::uint8_t> pixels(4, 1);
  write_idx_images(dir / "img", pixels, 1, 2, 2);
  write_idx_labels(dir / "lbl", std::vector<std::uint8_t>{0});
  {
    std::fstream f(dir / "img", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(3);
    f.put(0x01);
  }
  try {
    load_idx(dir / "img", dir / "lbl");
    FAIL("expected a data error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
  }
  write_idx_images(dir / "img", pixels, 1, 2, 2);
  fs::resize_file(dir / "img", fs::file_size(dir / "img") - 1);
  CHECK_THROWS_AS(load_idx(dir / "img", dir / "lbl"), DataError);
  CHECK_THROWS_AS(load_idx(dir / "missing", dir / "lbl"), DataError);
}

TEST_CASE("cifar: record layout") {
  const auto dir = scratch("cifar");
  std::vector<char> rec(3073);
  rec[0] = 6;
  for (std::size_t i = 1; i < rec.size(); ++i) rec[i] = static_cast<char>(i % 256);
  {
    std::ofstream f(dir / "b.bin", std::ios::binary);
    f.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  }
  const auto d = load_cifar({dir / "b.bin"}, false);
  CHECK(d.images.shape() == Shape{1, 3, 32, 32});
  CHECK(d.labels[0] == 6);
  CHECK(d.images[5] == 6.0f / 255.0f);
  fs::resize_file(dir / "b.bin", 3000);
  CHECK_THROWS_AS(load_cifar({dir / "b.bin"}, false), DataError);
}

TEST_CASE("jitter: radius zero is the identity, shifts fill with zeros") {
  Rng r(1);
  auto batch = ramp({3, 2, 5, 5});
  const auto orig = batch;
  jitter(batch, 0, r);
  CHECK(batch == orig);

  auto img = ramp({1, 1, 3, 3});
  shift_image(img.values(), 1, 3, 3, 1, 0);
  CHECK(img.at(0, 0, 0, 0) == 0.0f);
  CHECK(img.at(0, 0, 0, 1) == 1.0f);
  CHECK(img.at(0, 0, 2, 2) == 8.0f);

  Rng a(5), b(5);
  auto x1 = ramp({4, 1, 6, 6}), x2 = x1;
  jitter(x1, 2, a);
  jitter(x2, 2, b);
  CHECK(x1 == x2);
}

TEST_CASE("flip: involution, symmetric images, two-pixel case") {
  auto img = ramp({1, 2, 3, 4});
  const auto orig = img;
  flip_image(img.values(), 2, 3, 4);
  CHECK_FALSE(img == orig);
  flip_image(img.values(), 2, 3, 4);
  CHECK(img == orig);

  Tensor<float> sym({1, 1, 1, 3}, {1.0f, 5.0f, 1.0f});
  flip_image(sym.values(), 1, 1, 3);
  CHECK(sym == Tensor<float>({1, 1, 1, 3}, {1.0f, 5.0f, 1.0f}));

  Tensor<float> ab({1, 1, 1, 2}, {2.0f, 3.0f});
  flip_image(ab.values(), 1, 1, 2);
  CHECK(ab[0] == 3.0f);
  CHECK(ab[1] == 2.0f);
}

TEST_CASE("cutout: hole zero, full hole, clipping") {
  Rng r(2);
  auto batch = ramp({2, 1, 4, 4});
  const auto orig = batch;
  cutout(batch, 0, r);
  CHECK(batch == orig);

  auto img = ramp({1, 3, 4, 4});
  cutout_image(img.values(), 3, 4, 4, 4, 2, 2);
  for (float v : img.values()) CHECK(v == 0.0f);

  auto corner = ramp({1, 1, 4, 4});
  cutout_image(corner.values(), 1, 4, 4, 2, 0, 0);
  CHECK(corner.at(0, 0, 0, 0) == 0.0f);
  CHECK(corner.at(0, 0, 0, 1) != 0.0f);
  CHECK(corner.at(0, 0, 1, 0) != 0.0f);
}

TEST_CASE("standardize: train statistics applied everywhere, constant channel guarded") {
  Rng r(3);
  Dataset train, test;
  train.images = test::random_tensor<float>({50, 2, 3, 3}, r, 4.0);
  train.labels.assign(50, 0);
  test.images = test::random_tensor<float>({10, 2, 3, 3}, r, 4.0);
  test.labels.assign(10, 0);
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t k = 0; k < 9; ++k) train.images[(i * 2 + 1) * 9 + k] = 7.0f;
  const auto test_before = test.images;
  Dataset* others[] = {&test};
  const auto s = standardize(train, others);
  double m = 0, v = 0;
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t k = 0; k < 9; ++k) m += train.images[i * 18 + k] / 450.0;
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t k = 0; k < 9; ++k) v += (train.images[i * 18 + k] - m) * (train.images[i * 18 + k] - m) / 450.0;
  CHECK(std::abs(m) < 1e-4);
  CHECK(std::abs(std::sqrt(v) - 1.0) < 1e-4);
  for (std::size_t i = 0; i < test.images.size(); ++i) {
    const std::size_t ch = (i / 9) % 2;
    CHECK(test.images[i] == doctest::Approx((test_before[i] - s.mean[ch]) / s.std[ch]));
  }
  CHECK(train.images.all_finite());
  CHECK(s.std[1] == kStdFloor);
}

TEST_CASE("blobs: balanced, reproducible, separable") {
  Rng a(4), b(4);
  const auto d = synthetic_blobs(3, 20, 5, 100.0, a);
  CHECK(d.images.shape() == Shape{60, 5, 1, 1});
  CHECK(synthetic_blobs(3, 20, 5, 100.0, b).images == d.images);
  std::vector<int> count(3, 0);
  for (int y : d.labels) ++count[static_cast<std::size_t>(y)];
  CHECK(count == std::vector<int>{20, 20, 20});

  std::vector<std::vector<double>> centroid(3, std::vector<double>(5, 0.0));
  for (std::size_t i = 0; i < 60; ++i)
    for (std::size_t f = 0; f < 5; ++f) centroid[static_cast<std::size_t>(d.labels[i])][f] += d.images[i * 5 + f] / 20.0;
  for (std::size_t i = 0; i < 60; ++i) {
    int best = 0;
    double best_d = 1e300;
    for (int k = 0; k < 3; ++k) {
      double dist = 0;
      for (std::size_t f = 0; f < 5; ++f) dist += std::pow(d.images[i * 5 + f] - centroid[static_cast<std::size_t>(k)][f], 2);
      if (dist < best_d) best_d = dist, best = k;
    }
    CHECK(best == d.labels[i]);
  }
  CHECK_THROWS_AS(synthetic_blobs(3, 20, 5, 0.0, a), ConfigError);

  const auto split = blobs_split(3, 10, 4, 5.0, 7);
  CHECK(split.train.size() == 30);
  CHECK(split.test.size() == 30);
  CHECK(split.test.split == "test");
}

TEST_CASE("gather: rows follow the index list") {
  Dataset d;
  d.images = ramp({4, 1, 1, 2});
  d.labels = {0, 1, 2, 3};
  d.classes = 4;
  const std::vector<std::size_t> idx{3, 1};
  const auto x = gather_images(d, idx);
  CHECK(x == Tensor<float>({2, 1, 1, 2}, {7, 8, 3, 4}));
  CHECK(gather_labels(d, idx) == std::vector<int>{3, 1});
}
