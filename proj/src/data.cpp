#include "llrn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>

#include "llrn/errors.hpp"

namespace llrn::data {

namespace fs = std::filesystem;

void Dataset::validate() const {
  if (images.rank() != 4) {
    throw DataError("dataset images must be n x c x h x w, got " + shape_string(images.shape()));
  }
  if (images.dim(0) != labels.size()) {
    throw DataError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                    std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw DataError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                      " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

namespace {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t offset,
                        const fs::path& path) {
  if (b.size() < offset + 4) {
    throw DataError(path.string() + ": truncated at offset " + std::to_string(b.size()) +
                    " (header needs " + std::to_string(offset + 4) + " bytes)");
  }
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) |
         (std::uint32_t{b[offset + 2]} << 8) | std::uint32_t{b[offset + 3]};
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 24));
  b.push_back(static_cast<std::uint8_t>(v >> 16));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v));
}

void check_magic(std::uint32_t got, std::uint32_t want, const fs::path& path) {
  if (got != want) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad magic 0x%08x at offset 0 (expected 0x%08x)", got, want);
    throw DataError(path.string() + ": " + buf);
  }
}

void check_payload(const std::vector<std::uint8_t>& b, std::size_t header, std::size_t need,
                   const fs::path& path) {
  if (b.size() - header < need) {
    throw DataError(path.string() + ": truncated at offset " + std::to_string(b.size()) +
                    " (expected " + std::to_string(header + need) + " bytes)");
  }
}

}  // namespace

Dataset load_idx(const fs::path& images, const fs::path& labels, std::string split) {
  const auto ib = read_file(images);
  check_magic(read_be32(ib, 0, images), kIdxImageMagic, images);
  const std::size_t n = read_be32(ib, 4, images);
  const std::size_t h = read_be32(ib, 8, images);
  const std::size_t w = read_be32(ib, 12, images);
  check_payload(ib, 16, n * h * w, images);

  const auto lb = read_file(labels);
  check_magic(read_be32(lb, 0, labels), kIdxLabelMagic, labels);
  const std::size_t nl = read_be32(lb, 4, labels);
  check_payload(lb, 8, nl, labels);
  if (nl != n) {
    throw DataError("image/label count mismatch: " + std::to_string(n) + " images in " +
                    images.string() + ", " + std::to_string(nl) + " labels in " + labels.string());
  }

  Dataset d;
  d.split = std::move(split);
  d.images = Tensor<float>({n, 1, h, w});
  for (std::size_t i = 0; i < n * h * w; ++i) d.images[i] = static_cast<float>(ib[16 + i]) / 255.0f;
  d.labels.resize(n);
  int max_label = -1;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lb[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.classes = static_cast<std::size_t>(max_label + 1);
  return d;
}

void write_idx_images(const fs::path& path, std::span<const std::uint8_t> pixels, std::size_t n,
                      std::size_t height, std::size_t width) {
  if (pixels.size() != n * height * width) {
    throw DimensionError("write_idx_images: " + std::to_string(pixels.size()) + " pixels for " +
                         std::to_string(n) + " x " + std::to_string(height) + " x " +
                         std::to_string(width));
  }
  std::vector<std::uint8_t> b;
  b.reserve(16 + pixels.size());
  put_be32(b, kIdxImageMagic);
  put_be32(b, static_cast<std::uint32_t>(n));
  put_be32(b, static_cast<std::uint32_t>(height));
  put_be32(b, static_cast<std::uint32_t>(width));
  b.insert(b.end(), pixels.begin(), pixels.end());
  write_file(path, b);
}

void write_idx_labels(const fs::path& path, std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> b;
  put_be32(b, kIdxLabelMagic);
  put_be32(b, static_cast<std::uint32_t>(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  write_file(path, b);
}

namespace {

constexpr const char* kIdxFiles[4] = {"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                                      "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"};

}  // namespace

bool idx_dir_complete(const fs::path& dir) {
  return std::all_of(std::begin(kIdxFiles), std::end(kIdxFiles),
                     [&](const char* f) { return fs::is_regular_file(dir / f); });
}

Split load_idx_dir(const fs::path& dir) {
  for (const char* f : kIdxFiles) {
    if (!fs::is_regular_file(dir / f)) throw DataError("missing data file " + (dir / f).string());
  }
  Split s{load_idx(dir / kIdxFiles[0], dir / kIdxFiles[1], "train"),
          load_idx(dir / kIdxFiles[2], dir / kIdxFiles[3], "test")};
  const std::size_t classes = std::max(s.train.classes, s.test.classes);
  s.train.classes = s.test.classes = classes;
  return s;
}

Dataset load_cifar(const std::vector<fs::path>& files, bool hundred, std::string split) {
  constexpr std::size_t kPixels = 3 * 32 * 32;
  const std::size_t label_bytes = hundred ? 2 : 1;
  const std::size_t record = label_bytes + kPixels;
  std::vector<std::uint8_t> all;
  for (const auto& f : files) {
    auto b = read_file(f);
    if (b.size() % record != 0) {
      throw DataError(f.string() + ": truncated at offset " +
                      std::to_string(b.size() - b.size() % record) + " (record size " +
                      std::to_string(record) + ")");
    }
    all.insert(all.end(), b.begin(), b.end());
  }
  const std::size_t n = all.size() / record;
  Dataset d;
  d.split = std::move(split);
  d.classes = hundred ? 100 : 10;
  d.images = Tensor<float>({n, 3, 32, 32});
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* r = all.data() + i * record;
    d.labels[i] = r[label_bytes - 1];
    for (std::size_t p = 0; p < kPixels; ++p) {
      d.images[i * kPixels + p] = static_cast<float>(r[label_bytes + p]) / 255.0f;
    }
  }
  d.validate();
  return d;
}

Split load_cifar_dir(const fs::path& dir, bool hundred) {
  std::vector<fs::path> train, test;
  if (hundred) {
    train = {dir / "train.bin"};
    test = {dir / "test.bin"};
  } else {
    for (int i = 1; i <= 5; ++i) train.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    test = {dir / "test_batch.bin"};
  }
  return {load_cifar(train, hundred, "train"), load_cifar(test, hundred, "test")};
}

Split load_named(const std::string& name, const fs::path& dir) {
  if (name == "mnist" || name == "fashion-mnist" || name == "kmnist") return load_idx_dir(dir);
  if (name == "cifar10") return load_cifar_dir(dir, false);
  if (name == "cifar100") return load_cifar_dir(dir, true);
  throw ConfigError("unknown dataset '" + name +
                    "' (valid: mnist, fashion-mnist, kmnist, cifar10, cifar100)");
}

void apply_standardization(Dataset& d, const Standardization& s) {
  const std::size_t n = d.images.dim(0), c = d.images.dim(1);
  const std::size_t hw = d.images.dim(2) * d.images.dim(3);
  if (s.mean.size() != c) {
    throw DimensionError("standardization has " + std::to_string(s.mean.size()) +
                         " channels, dataset " + std::to_string(c));
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      float* p = d.images.data() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) p[k] = (p[k] - s.mean[ch]) / s.std[ch];
    }
  }
}

Standardization standardize(Dataset& train, std::span<Dataset* const> others) {
  if (train.size() == 0) throw DataError("standardize: empty training set");
  const std::size_t n = train.images.dim(0), c = train.images.dim(1);
  const std::size_t hw = train.images.dim(2) * train.images.dim(3);
  Standardization s;
  s.mean.assign(c, 0.0f);
  s.std.assign(c, 1.0f);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const float* p = train.images.data() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) sum += p[k];
    }
    const double mean = sum / static_cast<double>(n * hw);
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const float* p = train.images.data() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) sq += (p[k] - mean) * (p[k] - mean);
    }
    const double sd = std::sqrt(sq / static_cast<double>(n * hw));
    s.mean[ch] = static_cast<float>(mean);
    s.std[ch] = std::max(static_cast<float>(sd), kStdFloor);
  }
  apply_standardization(train, s);
  for (Dataset* d : others) apply_standardization(*d, s);
  return s;
}

void AugmentConfig::validate(std::size_t height, std::size_t width) const {
  if (cutout > std::min(height, width)) {
    throw ConfigError("cutout hole " + std::to_string(cutout) + " larger than image side " +
                      std::to_string(std::min(height, width)));
  }
}

void shift_image(std::span<float> image, std::size_t c, std::size_t h, std::size_t w,
                 std::int64_t dx, std::int64_t dy) {
  if (dx == 0 && dy == 0) return;
  std::vector<float> src(image.begin(), image.end());
  const auto H = static_cast<std::int64_t>(h), W = static_cast<std::int64_t>(w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const float* s = src.data() + ch * h * w;
    float* d = image.data() + ch * h * w;
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t x = 0; x < W; ++x) {
        const std::int64_t sy = y - dy, sx = x - dx;
        d[y * W + x] = (sy >= 0 && sy < H && sx >= 0 && sx < W) ? s[sy * W + sx] : 0.0f;
      }
    }
  }
}

void flip_image(std::span<float> image, std::size_t c, std::size_t h, std::size_t w) {
  for (std::size_t row = 0; row < c * h; ++row) {
    std::reverse(image.begin() + static_cast<std::ptrdiff_t>(row * w),
                 image.begin() + static_cast<std::ptrdiff_t>((row + 1) * w));
  }
}

void cutout_image(std::span<float> image, std::size_t c, std::size_t h, std::size_t w,
                  std::size_t hole, std::size_t cy, std::size_t cx) {
  if (hole == 0) return;
  const auto half = static_cast<std::int64_t>(hole / 2);
  const auto y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(cy) - half);
  const auto x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(cx) - half);
  const auto y1 = std::min<std::int64_t>(static_cast<std::int64_t>(h),
                                         static_cast<std::int64_t>(cy) - half + static_cast<std::int64_t>(hole));
  const auto x1 = std::min<std::int64_t>(static_cast<std::int64_t>(w),
                                         static_cast<std::int64_t>(cx) - half + static_cast<std::int64_t>(hole));
  for (std::size_t ch = 0; ch < c; ++ch) {
    float* p = image.data() + ch * h * w;
    for (std::int64_t y = y0; y < y1; ++y) {
      for (std::int64_t x = x0; x < x1; ++x) p[y * static_cast<std::int64_t>(w) + x] = 0.0f;
    }
  }
}

namespace {

template <typename Fn>
void for_each_image(Tensor<float>& batch, Fn&& fn) {
  require_rank(batch, 4, "augmentation");
  const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  for (std::size_t i = 0; i < n; ++i) {
    fn(std::span<float>(batch.data() + i * c * h * w, c * h * w), c, h, w);
  }
}

}  // namespace

void jitter(Tensor<float>& batch, std::size_t radius, Rng& rng) {
  if (radius == 0) return;
  const auto r = static_cast<std::int64_t>(radius);
  for_each_image(batch, [&](std::span<float> img, std::size_t c, std::size_t h, std::size_t w) {
    const std::int64_t dx = rng.range(-r, r);
    const std::int64_t dy = rng.range(-r, r);
    shift_image(img, c, h, w, dx, dy);
  });
}

void hflip(Tensor<float>& batch, Rng& rng) {
  for_each_image(batch, [&](std::span<float> img, std::size_t c, std::size_t h, std::size_t w) {
    if (rng.bernoulli(0.5)) flip_image(img, c, h, w);
  });
}

void cutout(Tensor<float>& batch, std::size_t hole, Rng& rng) {
  if (hole == 0) return;
  for_each_image(batch, [&](std::span<float> img, std::size_t c, std::size_t h, std::size_t w) {
    const std::size_t cy = rng.below(h);
    const std::size_t cx = rng.below(w);
    cutout_image(img, c, h, w, hole, cy, cx);
  });
}

void augment(Tensor<float>& batch, const AugmentConfig& config, Rng& rng) {
  jitter(batch, config.jitter, rng);
  if (config.flip) hflip(batch, rng);
  cutout(batch, config.cutout, rng);
}

Tensor<float> gather_images(const Dataset& d, std::span<const std::size_t> indices) {
  const std::size_t per = d.images.size() / std::max<std::size_t>(d.images.dim(0), 1);
  Shape shape = d.images.shape();
  shape[0] = indices.size();
  Tensor<float> out(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= d.size()) throw InputError("gather: index out of range");
    std::copy_n(d.images.data() + indices[i] * per, per, out.data() + i * per);
  }
  return out;
}

std::vector<int> gather_labels(const Dataset& d, std::span<const std::size_t> indices) {
  std::vector<int> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = d.labels.at(indices[i]);
  return out;
}

Dataset synthetic_blobs(std::size_t classes, std::size_t per_class, std::size_t dim,
                        double separation, Rng& rng) {
  if (!(separation > 0.0)) throw ConfigError("synthetic_blobs: separation must be positive");
  if (classes == 0 || per_class == 0 || dim == 0) {
    throw ConfigError("synthetic_blobs: classes, per_class and dim must be positive");
  }
  std::vector<std::vector<double>> centers(classes, std::vector<double>(dim));
  for (auto& c : centers) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (auto& v : c) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
    } while (norm < 1e-12);
    for (auto& v : c) v = v / norm * separation;
  }
  Dataset d;
  d.classes = classes;
  d.images = Tensor<float>({classes * per_class, dim, 1, 1});
  d.labels.resize(classes * per_class);
  for (std::size_t k = 0; k < classes; ++k) {
    for (std::size_t j = 0; j < per_class; ++j) {
      const std::size_t i = k * per_class + j;
      d.labels[i] = static_cast<int>(k);
      for (std::size_t f = 0; f < dim; ++f) {
        d.images[i * dim + f] = static_cast<float>(centers[k][f] + rng.normal());
      }
    }
  }
  return d;
}

Split blobs_split(std::size_t classes, std::size_t per_class, std::size_t dim, double separation,
                  std::uint64_t seed) {
  Rng rng = Rng::derive(seed, 0xb10b);
  const Dataset all = synthetic_blobs(classes, 2 * per_class, dim, separation, rng);
  std::vector<std::size_t> even, odd;
  for (std::size_t i = 0; i < all.size(); ++i) (i % 2 ? odd : even).push_back(i);
  Split split;
  split.train.images = gather_images(all, even);
  split.train.labels = gather_labels(all, even);
  split.test.images = gather_images(all, odd);
  split.test.labels = gather_labels(all, odd);
  split.train.classes = split.test.classes = all.classes;
  split.train.split = "train";
  split.test.split = "test";
  return split;
}

}  // namespace llrn::data
