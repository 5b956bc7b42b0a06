#pragma once

// Parameter checkpoint, little-endian:
//
//   "LLRN"  u32 version  u32 block_count  u32 tensor_count
//   tensor_count x { u32 name_len, name bytes, u32 rank, rank x u64 extent,
//                    product(extents) x f32 }
//
// Floats are stored bit-for-bit, so save/load round-trips exactly.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "llrn/tensor.hpp"

namespace llrn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Checkpoint {
  std::uint32_t block_count = 0;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);

/// Throws DataError naming the byte offset on bad magic, unknown version or
/// truncation.
Checkpoint read_checkpoint(const std::filesystem::path& path);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

}  // namespace llrn
