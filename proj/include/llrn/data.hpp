#pragma once

// Datasets, file loaders, augmentation and synthetic fixtures.
// Images are stored n x c x h x w, float32.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "llrn/rng.hpp"
#include "llrn/tensor.hpp"

namespace llrn::data {

struct Dataset {
  Tensor<float> images;  // n x c x h x w
  std::vector<int> labels;
  std::size_t classes = 0;
  std::string split = "train";

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  /// Checks label range and image/label counts; throws DataError.
  void validate() const;
};

struct Split {
  Dataset train;
  Dataset test;
};

// ---------------------------------------------------------------- IDX

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Big-endian IDX image + label files; pixels scaled to [0, 1].
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::string split = "train");

void write_idx_images(const std::filesystem::path& path, std::span<const std::uint8_t> pixels,
                      std::size_t n, std::size_t height, std::size_t width);
void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels);

/// Looks for train-images-idx3-ubyte, train-labels-idx1-ubyte,
/// t10k-images-idx3-ubyte and t10k-labels-idx1-ubyte in `dir`.
Split load_idx_dir(const std::filesystem::path& dir);
bool idx_dir_complete(const std::filesystem::path& dir);

// ---------------------------------------------------------------- CIFAR

/// CIFAR binary batches: 3073-byte records (label, 3072 pixels) for the
/// 10-class set, 3074-byte records (coarse, fine, pixels) for the 100-class
/// set, which keeps the fine label.
Dataset load_cifar(const std::vector<std::filesystem::path>& files, bool hundred,
                   std::string split = "train");
Split load_cifar_dir(const std::filesystem::path& dir, bool hundred);

/// Dispatch by name: mnist, fashion-mnist, kmnist (IDX) or cifar10, cifar100.
Split load_named(const std::string& name, const std::filesystem::path& dir);

// ---------------------------------------------------------------- preprocessing

struct Standardization {
  std::vector<float> mean;
  std::vector<float> std;
};

inline constexpr float kStdFloor = 1e-6f;

/// Per-channel statistics from `train`, applied to train and every other split.
Standardization standardize(Dataset& train, std::span<Dataset* const> others = {});
void apply_standardization(Dataset& d, const Standardization& s);

// ---------------------------------------------------------------- augmentation

struct AugmentConfig {
  std::size_t jitter = 0;  // max shift in pixels along each axis
  bool flip = false;
  std::size_t cutout = 0;  // hole side in pixels, 0 = off

  bool any() const { return jitter > 0 || flip || cutout > 0; }
  void validate(std::size_t height, std::size_t width) const;
};

/// Translates one c x h x w image by (dx, dy); vacated pixels become 0.
void shift_image(std::span<float> image, std::size_t c, std::size_t h, std::size_t w,
                 std::int64_t dx, std::int64_t dy);
void flip_image(std::span<float> image, std::size_t c, std::size_t h, std::size_t w);
/// Zeroes the hole x hole square centered at (cy, cx), clipped at the borders.
void cutout_image(std::span<float> image, std::size_t c, std::size_t h, std::size_t w,
                  std::size_t hole, std::size_t cy, std::size_t cx);

/// Batch-wide versions: every image draws its own shift / coin / center.
void jitter(Tensor<float>& batch, std::size_t radius, Rng& rng);
void hflip(Tensor<float>& batch, Rng& rng);
void cutout(Tensor<float>& batch, std::size_t hole, Rng& rng);
void augment(Tensor<float>& batch, const AugmentConfig& config, Rng& rng);

// ---------------------------------------------------------------- batching

Tensor<float> gather_images(const Dataset& d, std::span<const std::size_t> indices);
std::vector<int> gather_labels(const Dataset& d, std::span<const std::size_t> indices);

// ---------------------------------------------------------------- synthetic

/// Gaussian clusters (unit noise) around random unit-sphere centers scaled by
/// `separation`. Images are n x dim x 1 x 1, labels balanced.
Dataset synthetic_blobs(std::size_t classes, std::size_t per_class, std::size_t dim,
                        double separation, Rng& rng);

/// Blobs with `per_class` train and `per_class` test points per class,
/// drawn from Rng::derive(seed, 0xb10b) and split by alternating index.
Split blobs_split(std::size_t classes, std::size_t per_class, std::size_t dim, double separation,
                  std::uint64_t seed);

}  // namespace llrn::data
