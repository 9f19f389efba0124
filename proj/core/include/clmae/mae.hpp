#pragma once

// Masked autoencoder backbone: an encoder over CLS + visible patch tokens and
// a narrower decoder that re-inserts a shared mask token at hidden slots and
// predicts per-patch normalised pixels.

#include <span>
#include <vector>

#include "clmae/geometry.hpp"
#include "clmae/masking.hpp"
#include "clmae/nn.hpp"

namespace clmae {

template <typename T>
struct MaeParams {
  Linear<T> patch_embed;
  Tensor<T> pos;  // frozen, (n+1) x d
  Tensor<T> cls;  // 1 x d
  std::vector<VitBlockParams<T>> encoder;
  LayerNormParams<T> encoder_norm;

  Linear<T> decoder_embed;  // d -> decoder width
  Tensor<T> mask_token;     // 1 x decoder width
  Tensor<T> decoder_pos;    // frozen, (n+1) x decoder width
  std::vector<VitBlockParams<T>> decoder;
  LayerNormParams<T> decoder_norm;
  Linear<T> decoder_pred;  // decoder width -> p*p*c

  /// Trainable tensors, named "mae.*" (positional tables excluded).
  ParamList<T> parameters() const;
  std::size_t num_patches() const { return pos.rows() - 1; }
};

template <typename T>
MaeParams<T> make_mae(const ModelGeometry& geometry, Rng& rng);

/// All n+1 tokens of every image (patch projection, CLS, positional table).
template <typename T>
TokenBatch<T> mae_embed(const PatchGrid<T>& grid, const MaeParams<T>& params);

/// Encoder blocks and final norm over whatever rows the batch holds. Every
/// group needs at least one patch token besides its CLS.
template <typename T>
TokenBatch<T> encode(const TokenBatch<T>& visible, const MaeParams<T>& params);

/// Reconstruction for every patch slot, (images * n) x (p*p*c).
template <typename T>
Tensor<T> decode(const TokenBatch<T>& latent, const IndexMap& map, const MaeParams<T>& params);

/// Identity index map: every patch of every image visible.
IndexMap full_index_map(std::size_t images, std::size_t num_patches);

template <typename T>
struct ReconTarget {
  Tensor<T> target;  // (images * n) x (p*p*c), constant
  std::vector<T> mean;
  std::vector<T> std;
};

/// Per-patch (x - mean) / sqrt(var + eps).
template <typename T>
ReconTarget<T> normalize_target(const PatchGrid<T>& grid, double eps = 1e-6);

/// Mean squared error over the masked patch rows only. Throws
/// DegenerateMaskError when no patch in the batch is masked.
template <typename T>
Tensor<T> recon_loss(const Tensor<T>& prediction, const ReconTarget<T>& target,
                     std::span<const BinaryMask> masks);

}  // namespace clmae
