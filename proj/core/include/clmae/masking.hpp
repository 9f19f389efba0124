#pragma once

// The learnable curriculum masking module: ViT blocks over the patch tokens,
// an MLP head on the CLS output producing one keep-visible probability per
// patch, the 0.5 threshold, and the two ways a mask is applied to tokens.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "clmae/geometry.hpp"
#include "clmae/nn.hpp"

namespace clmae {

/// Per-patch probabilities of keeping the patch visible, each in [0, 1].
struct SoftMask {
  std::vector<double> z;
};

/// Thresholded mask; 1 = visible, 0 = masked.
struct BinaryMask {
  std::vector<std::uint8_t> visible;

  std::size_t size() const { return visible.size(); }
  std::size_t count_visible() const;
  std::size_t count_masked() const { return size() - count_visible(); }
};

/// Where each image's visible patches landed after selection.
struct IndexMap {
  std::size_t num_patches = 0;
  /// Per image, ascending patch indices that were kept.
  std::vector<std::vector<std::size_t>> visible;
};

template <typename T>
struct VisibleSelection {
  TokenBatch<T> tokens;
  IndexMap map;
};

template <typename T>
struct CmmParams {
  Linear<T> patch_embed;
  Tensor<T> pos;  // frozen sine-cosine table, (n+1) x d
  Tensor<T> cls;  // 1 x d
  std::vector<VitBlockParams<T>> blocks;
  Linear<T> head_hidden;  // d -> d, GELU
  Linear<T> head_out;     // d -> n, sigmoid

  /// Trainable tensors, named "cmm.*" (the positional table is excluded).
  ParamList<T> parameters() const;
};

/// Factor applied to the default uniform init of the head's final layer.
inline constexpr double kCmmHeadInitScale = 0.01;

template <typename T>
CmmParams<T> make_cmm(const ModelGeometry& geometry, Rng& rng);

/// Soft masks for every image of the grid, shape images x n.
template <typename T>
Tensor<T> cmm_forward(const PatchGrid<T>& grid, const CmmParams<T>& params);

/// Splits an images x n tensor of probabilities into SoftMask values.
template <typename T>
std::vector<SoftMask> to_soft_masks(const Tensor<T>& z);

/// visible_i = 1 iff z_i >= theta (ties stay visible).
BinaryMask threshold(const SoftMask& z, double theta = 0.5);
std::vector<BinaryMask> threshold(const std::vector<SoftMask>& z, double theta = 0.5);

/// Keeps each group's CLS row and the rows of its visible patches, in
/// original order. Throws DegenerateMaskError if an image has no visible
/// patch.
template <typename T>
VisibleSelection<T> select_visible(const TokenBatch<T>& tokens, std::span<const BinaryMask> masks);

/// Inverse bookkeeping of select_visible: puts rows of a selected batch back
/// at their original slots, zero rows elsewhere. Result has groups of n+1.
template <typename T>
Tensor<T> scatter_visible(const Tensor<T>& selected, const IndexMap& map);

/// Multiplies patch row i of each group by z_i; CLS rows pass through.
template <typename T>
TokenBatch<T> apply_soft_mask(const TokenBatch<T>& tokens, const Tensor<T>& z);

/// Binary PGM (P5) of the mask upscaled by the patch size; 255 = visible.
std::string encode_mask_pgm(const BinaryMask& mask, std::size_t grid_h, std::size_t grid_w,
                            std::size_t patch);
void write_mask_pgm(const std::filesystem::path& path, const BinaryMask& mask, std::size_t grid_h,
                    std::size_t grid_w, std::size_t patch);

/// `mask_<step>_<sample>.pgm`
std::string mask_filename(std::size_t step, std::size_t sample);

}  // namespace clmae
