#pragma once

// Vision-transformer building blocks shared by the MAE backbone and the
// masking module.

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "clmae/tensor.hpp"

namespace clmae {

using Rng = std::mt19937_64;

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};
template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

/// Image pixels in [0, 1], row-major h x w x c.
template <typename T>
struct Image {
  std::size_t h = 0, w = 0, c = 0;
  std::vector<T> pixels;
};

/// Flattened non-overlapping p x p patches of one or more same-sized images.
/// Row b*n + i holds raster-order patch i of image b, flattened row-major
/// over (y, x, channel) inside the patch.
template <typename T>
struct PatchGrid {
  Tensor<T> patches;  // (images * n) x (p*p*c)
  std::size_t images = 1;
  std::size_t h = 0, w = 0, c = 0, p = 0;

  std::size_t grid_h() const { return h / p; }
  std::size_t grid_w() const { return w / p; }
  std::size_t n() const { return grid_h() * grid_w(); }
  std::size_t patch_dim() const { return p * p * c; }
};

template <typename T>
PatchGrid<T> patchify(const std::vector<Image<T>>& images, std::size_t p);
template <typename T>
PatchGrid<T> patchify(const Image<T>& image, std::size_t p);
template <typename T>
std::vector<Image<T>> unpatchify(const PatchGrid<T>& grid);

/// Token rows of one or more sequences; each group's first row is its CLS.
template <typename T>
struct TokenBatch {
  Tensor<T> tokens;
  RowGroups groups;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // in x out
  Tensor<T> bias;    // out

  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Weight and bias ~ U(-1/sqrt(in), 1/sqrt(in)).
template <typename T>
Linear<T> make_linear(std::size_t in, std::size_t out, Rng& rng);
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Linear<T>& layer);

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> bias;
  void collect(const std::string& prefix, ParamList<T>& out) const;
};
template <typename T>
LayerNormParams<T> make_layernorm(std::size_t width);
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const LayerNormParams<T>& ln);

template <typename T>
struct MhaParams {
  Linear<T> query, key, value, output;
  std::size_t heads = 1;
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
struct VitBlockParams {
  LayerNormParams<T> ln1;
  MhaParams<T> attn;
  LayerNormParams<T> ln2;
  Linear<T> fc1, fc2;
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
VitBlockParams<T> make_vit_block(std::size_t width, std::size_t heads, std::size_t mlp_ratio,
                                 Rng& rng);

/// Self-attention within each row group: per-head softmax(QK^T/sqrt(d/heads))V,
/// heads concatenated, then the output projection.
template <typename T>
Tensor<T> mha_forward(const Tensor<T>& x, const MhaParams<T>& params, const RowGroups& groups);

/// Pre-norm block: x + MHA(LN(x)), then + MLP(LN(.)) with a GELU MLP.
template <typename T>
Tensor<T> vit_block(const Tensor<T>& x, const VitBlockParams<T>& params, const RowGroups& groups);

/// Fixed 2-D sine-cosine table of shape (gh*gw + 1) x width; row 0 (the CLS
/// position) is zero. Half the channels encode the column, half the row.
template <typename T>
Tensor<T> sincos_pos_table(std::size_t grid_h, std::size_t grid_w, std::size_t width);

/// Patch projection, CLS prepended per image, positional table added:
/// row 0 = cls + pos[0]; row i = proj(patch i) + pos[i].
template <typename T>
TokenBatch<T> embed_tokens(const PatchGrid<T>& grid, const Linear<T>& proj, const Tensor<T>& pos,
                           const Tensor<T>& cls);

/// Repeats a (rows x width) table `times` times vertically, as a constant.
template <typename T>
Tensor<T> tile_rows(const Tensor<T>& table, std::size_t times);

/// Row indices of each group's CLS token.
std::vector<std::size_t> cls_rows(const RowGroups& groups);

/// N(0, std^2) row vector of the given width.
template <typename T>
Tensor<T> make_normal_row(std::size_t width, double std, Rng& rng);

/// Independent deep copy of a parameter list's values (no graph).
template <typename T>
std::vector<std::vector<T>> snapshot(const ParamList<T>& params);

}  // namespace clmae
