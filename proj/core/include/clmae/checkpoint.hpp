#pragma once

// Binary checkpoint container.
//
// Layout (little-endian):
//   "CLMAE\0"                         6-byte magic
//   u16 version                       kCheckpointVersion
//   u8  element width                 4 (f32) or 8 (f64) for every payload
//   32 bytes                          config digest (SHA-256)
//   u32 count, then per tensor:       parameter table
//       u32 name length, name bytes, u32 rank, rank x u32 extents,
//       u64 payload bytes, payload
//   u32 count, tensors as above       optimizer moments
//   u64 step counter
//   u32 length, bytes                 RNG / data-order state
//   u32 CRC-32 of every byte after the magic and before the CRC

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "clmae/tensor.hpp"

namespace clmae {

inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[6] = {'C', 'L', 'M', 'A', 'E', '\0'};

using Digest = std::array<std::uint8_t, 32>;

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct CheckpointData {
  std::uint16_t version = kCheckpointVersion;
  bool f64 = false;
  Digest config_digest{};
  std::vector<TensorRecord> params;
  std::vector<TensorRecord> moments;
  std::uint64_t step = 0;
  std::string rng_state;
};

std::string encode_checkpoint(const CheckpointData& data);
/// Throws CheckpointError on magic/version mismatch, truncation, a shape
/// table that disagrees with its payload, or a CRC mismatch.
CheckpointData decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::filesystem::path& path);

Digest sha256(std::string_view bytes);
std::string digest_hex(const Digest& digest);

}  // namespace clmae
