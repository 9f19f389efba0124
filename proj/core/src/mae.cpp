#include "clmae/mae.hpp"

#include <cmath>

#include "clmae/errors.hpp"

namespace clmae {

template <typename T>
ParamList<T> MaeParams<T>::parameters() const {
  ParamList<T> out;
  patch_embed.collect("mae.patch_embed", out);
  out.push_back({"mae.cls", cls});
  for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].collect("mae.encoder." + std::to_string(i), out);
  encoder_norm.collect("mae.encoder_norm", out);
  decoder_embed.collect("mae.decoder_embed", out);
  out.push_back({"mae.mask_token", mask_token});
  for (std::size_t i = 0; i < decoder.size(); ++i) decoder[i].collect("mae.decoder." + std::to_string(i), out);
  decoder_norm.collect("mae.decoder_norm", out);
  decoder_pred.collect("mae.decoder_pred", out);
  return out;
}

template <typename T>
MaeParams<T> make_mae(const ModelGeometry& g, Rng& rng) {
  g.validate();
  MaeParams<T> p;
  p.patch_embed = make_linear<T>(g.patch_dim(), g.embed_dim, rng);
  p.pos = sincos_pos_table<T>(g.grid_h(), g.grid_w(), g.embed_dim);
  p.cls = make_normal_row<T>(g.embed_dim, 0.02, rng);
  for (std::size_t i = 0; i < g.encoder_depth; ++i) {
    p.encoder.push_back(make_vit_block<T>(g.embed_dim, g.heads, g.mlp_ratio, rng));
  }
  p.encoder_norm = make_layernorm<T>(g.embed_dim);
  p.decoder_embed = make_linear<T>(g.embed_dim, g.decoder_dim, rng);
  p.mask_token = make_normal_row<T>(g.decoder_dim, 0.02, rng);
  p.decoder_pos = sincos_pos_table<T>(g.grid_h(), g.grid_w(), g.decoder_dim);
  for (std::size_t i = 0; i < g.decoder_depth; ++i) {
    p.decoder.push_back(make_vit_block<T>(g.decoder_dim, g.decoder_heads, g.mlp_ratio, rng));
  }
  p.decoder_norm = make_layernorm<T>(g.decoder_dim);
  p.decoder_pred = make_linear<T>(g.decoder_dim, g.patch_dim(), rng);
  return p;
}

template <typename T>
TokenBatch<T> mae_embed(const PatchGrid<T>& grid, const MaeParams<T>& params) {
  return embed_tokens(grid, params.patch_embed, params.pos, params.cls);
}

template <typename T>
TokenBatch<T> encode(const TokenBatch<T>& visible, const MaeParams<T>& params) {
  for (std::size_t b = 0; b < visible.groups.size(); ++b) {
    if (visible.groups[b].count < 2) {
      throw DegenerateMaskError("encode: image " + std::to_string(b) + " has no visible patch tokens");
    }
  }
  Tensor<T> x = visible.tokens;
  for (const auto& block : params.encoder) x = vit_block(x, block, visible.groups);
  return {layernorm(x, params.encoder_norm), visible.groups};
}

IndexMap full_index_map(std::size_t images, std::size_t num_patches) {
  IndexMap map;
  map.num_patches = num_patches;
  std::vector<std::size_t> all(num_patches);
  for (std::size_t i = 0; i < num_patches; ++i) all[i] = i;
  map.visible.assign(images, all);
  return map;
}

template <typename T>
Tensor<T> decode(const TokenBatch<T>& latent, const IndexMap& map, const MaeParams<T>& params) {
  const std::size_t n = params.num_patches();
  if (map.num_patches != n || map.visible.size() != latent.groups.size()) {
    throw ShapeError("decode: index map (" + std::to_string(map.visible.size()) + " images, n=" +
                     std::to_string(map.num_patches) + ") inconsistent with latent (" +
                     std::to_string(latent.groups.size()) + " groups, n=" + std::to_string(n) + ")");
  }
  const std::size_t images = latent.groups.size();
  Tensor<T> x = linear(latent.tokens, params.decoder_embed);
  const std::size_t mask_row = x.rows();
  Tensor<T> src = concat_rows<T>({x, params.mask_token});

  std::vector<std::size_t> idx;
  idx.reserve(images * (n + 1));
  for (std::size_t b = 0; b < images; ++b) {
    const RowGroup& g = latent.groups[b];
    const auto& kept = map.visible[b];
    if (kept.size() + 1 != g.count) {
      throw ShapeError("decode: image " + std::to_string(b) + " has " + std::to_string(g.count) +
                       " latent rows for " + std::to_string(kept.size()) + " visible patches");
    }
    std::vector<std::size_t> slots(n + 1, mask_row);
    slots[0] = g.offset;
    for (std::size_t r = 0; r < kept.size(); ++r) {
      if (kept[r] >= n) throw ShapeError("decode: visible index out of range");
      slots[1 + kept[r]] = g.offset + 1 + r;
    }
    idx.insert(idx.end(), slots.begin(), slots.end());
  }
  const RowGroups groups = uniform_groups(images, n + 1);
  Tensor<T> h = add(slice_rows(src, idx), tile_rows(params.decoder_pos, images));
  for (const auto& block : params.decoder) h = vit_block(h, block, groups);
  Tensor<T> pred = linear(layernorm(h, params.decoder_norm), params.decoder_pred);

  std::vector<std::size_t> patch_rows;
  patch_rows.reserve(images * n);
  for (std::size_t b = 0; b < images; ++b)
    for (std::size_t i = 0; i < n; ++i) patch_rows.push_back(b * (n + 1) + 1 + i);
  return slice_rows(pred, patch_rows);
}

template <typename T>
ReconTarget<T> normalize_target(const PatchGrid<T>& grid, double eps) {
  const std::size_t rows = grid.patches.rows(), dim = grid.patches.cols();
  ReconTarget<T> out;
  out.mean.resize(rows);
  out.std.resize(rows);
  std::vector<T> values(rows * dim);
  auto src = grid.patches.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0;
    for (std::size_t j = 0; j < dim; ++j) mu += src[r * dim + j];
    mu /= static_cast<double>(dim);
    double var = 0;
    for (std::size_t j = 0; j < dim; ++j) var += (src[r * dim + j] - mu) * (src[r * dim + j] - mu);
    var /= static_cast<double>(dim);
    const double sd = std::sqrt(var + eps);
    out.mean[r] = static_cast<T>(mu);
    out.std[r] = static_cast<T>(sd);
    for (std::size_t j = 0; j < dim; ++j) values[r * dim + j] = static_cast<T>((src[r * dim + j] - mu) / sd);
  }
  out.target = Tensor<T>::from_vector({rows, dim}, std::move(values));
  return out;
}

template <typename T>
Tensor<T> recon_loss(const Tensor<T>& prediction, const ReconTarget<T>& target,
                     std::span<const BinaryMask> masks) {
  if (prediction.shape() != target.target.shape()) {
    throw ShapeError("recon_loss: prediction " + shape_string(prediction.shape()) +
                     " vs target " + shape_string(target.target.shape()));
  }
  const std::size_t n = masks.empty() ? 0 : masks.front().size();
  if (n == 0 || masks.size() * n != prediction.rows()) {
    throw ShapeError("recon_loss: " + std::to_string(masks.size()) + " masks do not cover " +
                     std::to_string(prediction.rows()) + " patch rows");
  }
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < masks.size(); ++b)
    for (std::size_t i = 0; i < n; ++i)
      if (!masks[b].visible[i]) rows.push_back(b * n + i);
  if (rows.empty()) throw DegenerateMaskError("recon_loss: no masked patches to reconstruct");
  return mean(square(sub(slice_rows(prediction, rows), slice_rows(target.target, rows))));
}

#define CLMAE_INSTANTIATE_MAE(T)                                                         \
  template struct MaeParams<T>;                                                          \
  template MaeParams<T> make_mae(const ModelGeometry&, Rng&);                            \
  template TokenBatch<T> mae_embed(const PatchGrid<T>&, const MaeParams<T>&);            \
  template TokenBatch<T> encode(const TokenBatch<T>&, const MaeParams<T>&);              \
  template Tensor<T> decode(const TokenBatch<T>&, const IndexMap&, const MaeParams<T>&); \
  template ReconTarget<T> normalize_target(const PatchGrid<T>&, double);                 \
  template Tensor<T> recon_loss(const Tensor<T>&, const ReconTarget<T>&, std::span<const BinaryMask>);

CLMAE_INSTANTIATE_MAE(float)
CLMAE_INSTANTIATE_MAE(double)

}  // namespace clmae
