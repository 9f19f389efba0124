#pragma once

#include <cstddef>
#include <string>

namespace clmae {

/// Image and network extents shared by the MAE and the masking module.
struct ModelGeometry {
  std::size_t image_h = 32;
  std::size_t image_w = 32;
  std::size_t channels = 3;
  std::size_t patch = 8;
  std::size_t embed_dim = 64;
  std::size_t heads = 4;
  std::size_t encoder_depth = 4;
  std::size_t decoder_depth = 2;
  std::size_t decoder_dim = 32;
  std::size_t decoder_heads = 4;
  std::size_t cmm_depth = 5;
  std::size_t mlp_ratio = 4;

  std::size_t grid_h() const { return image_h / patch; }
  std::size_t grid_w() const { return image_w / patch; }
  std::size_t num_patches() const { return grid_h() * grid_w(); }
  std::size_t patch_dim() const { return patch * patch * channels; }

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;
};

}  // namespace clmae
