#pragma once

// Labelled 8-bit image sets in a small binary container, and a procedural
// generator of class-structured images.
//
// File layout (little-endian):
//   "CLMDS\0", u16 version, u32 count, u16 h, u16 w, u8 c, u16 classes,
//   then per record: u16 label, h*w*c u8 pixels (row-major, channel last).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "clmae/nn.hpp"

namespace clmae {

inline constexpr std::uint16_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 6 + 2 + 4 + 2 + 2 + 1 + 2;

struct Dataset {
  std::size_t h = 0, w = 0, c = 0;
  std::size_t classes = 0;
  std::vector<std::uint16_t> labels;
  std::vector<std::uint8_t> pixels;  // count * h*w*c

  std::size_t count() const { return labels.size(); }
  std::size_t image_bytes() const { return h * w * c; }
  std::span<const std::uint8_t> record(std::size_t i) const;

  /// Pixels scaled to [0, 1].
  template <typename T>
  Image<T> image(std::size_t i) const;
  template <typename T>
  std::vector<Image<T>> images(std::span<const std::size_t> indices) const;

  /// New dataset holding the given records in the given order.
  Dataset subset(std::span<const std::size_t> indices) const;
  /// Throws DatasetError on inconsistent extents or out-of-range labels.
  void validate() const;
};

std::string encode_dataset(const Dataset& data);
Dataset decode_dataset(std::string_view bytes);
void write_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& path);

struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t per_class = 100;
  std::size_t h = 32, w = 32, c = 3;
  std::uint64_t seed = 0;
  /// Extents must be multiples of this.
  std::size_t patch = 8;
  /// Standard deviation of the additive pixel noise (pixel range [0, 1]).
  double noise = 0.03;
};

/// Each class owns a texture (five orientations/layouts times two periods
/// that divide the patch size), an object hue and an object shape. Each image
/// draws its own texture phase, slow ramp, object placement, global gain,
/// offset and colour cast, and pixel noise. Records are interleaved by class
/// (label = index % classes).
Dataset gen_synthetic(const SyntheticSpec& spec);

/// Leave-one-out 1-NN accuracy (percent) on raw pixels.
double pixel_nn_accuracy(const Dataset& data);

/// Splits every class into its first `train_per_class` records (in file
/// order) and the rest.
struct DatasetSplit {
  Dataset train, test;
};
DatasetSplit split_per_class(const Dataset& data, std::size_t train_per_class);

}  // namespace clmae
