#include "clmae/masking.hpp"

#include <algorithm>
#include <fstream>

#include "clmae/errors.hpp"

namespace clmae {

std::size_t BinaryMask::count_visible() const {
  return static_cast<std::size_t>(std::count(visible.begin(), visible.end(), std::uint8_t{1}));
}

template <typename T>
ParamList<T> CmmParams<T>::parameters() const {
  ParamList<T> out;
  patch_embed.collect("cmm.patch_embed", out);
  out.push_back({"cmm.cls", cls});
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect("cmm.blocks." + std::to_string(i), out);
  head_hidden.collect("cmm.head_hidden", out);
  head_out.collect("cmm.head_out", out);
  return out;
}

template <typename T>
CmmParams<T> make_cmm(const ModelGeometry& g, Rng& rng) {
  g.validate();
  CmmParams<T> p;
  p.patch_embed = make_linear<T>(g.patch_dim(), g.embed_dim, rng);
  p.pos = sincos_pos_table<T>(g.grid_h(), g.grid_w(), g.embed_dim);
  p.cls = make_normal_row<T>(g.embed_dim, 0.02, rng);
  for (std::size_t i = 0; i < g.cmm_depth; ++i) {
    p.blocks.push_back(make_vit_block<T>(g.embed_dim, g.heads, g.mlp_ratio, rng));
  }
  p.head_hidden = make_linear<T>(g.embed_dim, g.embed_dim, rng);
  p.head_out = make_linear<T>(g.embed_dim, g.num_patches(), rng);
  // Small final layer: every z starts near 0.5, so the loss terms rather than
  // the random init decide which patches get hidden.
  for (auto* t : {&p.head_out.weight, &p.head_out.bias})
    for (auto& v : t->mutable_data()) v *= T(kCmmHeadInitScale);
  return p;
}

template <typename T>
Tensor<T> cmm_forward(const PatchGrid<T>& grid, const CmmParams<T>& params) {
  if (params.head_out.out_features() != grid.n()) {
    throw ShapeError("cmm_forward: head emits " + std::to_string(params.head_out.out_features()) +
                     " probabilities for " + std::to_string(grid.n()) + " patches");
  }
  TokenBatch<T> tb = embed_tokens(grid, params.patch_embed, params.pos, params.cls);
  Tensor<T> x = tb.tokens;
  for (const auto& block : params.blocks) x = vit_block(x, block, tb.groups);
  Tensor<T> cls_out = slice_rows(x, cls_rows(tb.groups));
  Tensor<T> hidden = gelu(linear(cls_out, params.head_hidden));
  return sigmoid(linear(hidden, params.head_out));
}

template <typename T>
std::vector<SoftMask> to_soft_masks(const Tensor<T>& z) {
  const std::size_t b = z.rows(), n = z.cols();
  std::vector<SoftMask> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    out[i].z.assign(z.data().begin() + static_cast<std::ptrdiff_t>(i * n),
                    z.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
  }
  return out;
}

BinaryMask threshold(const SoftMask& z, double theta) {
  BinaryMask m;
  m.visible.reserve(z.z.size());
  for (double v : z.z) m.visible.push_back(v >= theta ? 1 : 0);
  return m;
}

std::vector<BinaryMask> threshold(const std::vector<SoftMask>& z, double theta) {
  std::vector<BinaryMask> out;
  out.reserve(z.size());
  for (const auto& s : z) out.push_back(threshold(s, theta));
  return out;
}

namespace {

void check_groups(const RowGroups& groups, std::size_t masks, std::size_t n) {
  if (groups.size() != masks) {
    throw ShapeError("mask count " + std::to_string(masks) + " does not match " +
                     std::to_string(groups.size()) + " token groups");
  }
  for (const RowGroup& g : groups) {
    if (g.count != n + 1) {
      throw ShapeError("token group of " + std::to_string(g.count) + " rows does not match " +
                       std::to_string(n) + " patches + CLS");
    }
  }
}

}  // namespace

template <typename T>
VisibleSelection<T> select_visible(const TokenBatch<T>& tokens, std::span<const BinaryMask> masks) {
  const std::size_t n = masks.empty() ? 0 : masks.front().size();
  check_groups(tokens.groups, masks.size(), n);
  VisibleSelection<T> sel;
  sel.map.num_patches = n;
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < masks.size(); ++b) {
    if (masks[b].size() != n) throw ShapeError("masks in a batch differ in length");
    const RowGroup& g = tokens.groups[b];
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < n; ++i)
      if (masks[b].visible[i]) kept.push_back(i);
    if (kept.empty()) {
      throw DegenerateMaskError("select_visible: image " + std::to_string(b) +
                                " has no visible patches");
    }
    sel.tokens.groups.push_back({rows.size(), kept.size() + 1});
    rows.push_back(g.offset);
    for (std::size_t i : kept) rows.push_back(g.offset + 1 + i);
    sel.map.visible.push_back(std::move(kept));
  }
  sel.tokens.tokens = slice_rows(tokens.tokens, rows);
  return sel;
}

template <typename T>
Tensor<T> scatter_visible(const Tensor<T>& selected, const IndexMap& map) {
  const std::size_t n = map.num_patches, width = selected.cols();
  Tensor<T> src = concat_rows<T>({selected, Tensor<T>::zeros({1, width})});
  const std::size_t zero_row = selected.rows();
  std::vector<std::size_t> idx;
  std::size_t offset = 0;
  for (const auto& kept : map.visible) {
    std::vector<std::size_t> slots(n + 1, zero_row);
    slots[0] = offset;
    for (std::size_t r = 0; r < kept.size(); ++r) slots[1 + kept[r]] = offset + 1 + r;
    idx.insert(idx.end(), slots.begin(), slots.end());
    offset += kept.size() + 1;
  }
  if (offset != selected.rows()) {
    throw ShapeError("scatter_visible: index map covers " + std::to_string(offset) + " rows, got " +
                     std::to_string(selected.rows()));
  }
  return slice_rows(src, idx);
}

template <typename T>
TokenBatch<T> apply_soft_mask(const TokenBatch<T>& tokens, const Tensor<T>& z) {
  const std::size_t b = z.rows(), n = z.cols();
  check_groups(tokens.groups, b, n);
  Tensor<T> src = concat_rows<T>({reshape(z, {b * n, 1}), Tensor<T>::full({1, 1}, T(1))});
  std::vector<std::size_t> idx(tokens.tokens.rows());
  for (std::size_t g = 0; g < b; ++g) {
    const std::size_t off = tokens.groups[g].offset;
    idx[off] = b * n;
    for (std::size_t i = 0; i < n; ++i) idx[off + 1 + i] = g * n + i;
  }
  return {scale_rows(tokens.tokens, slice_rows(src, idx)), tokens.groups};
}

std::string encode_mask_pgm(const BinaryMask& mask, std::size_t grid_h, std::size_t grid_w,
                            std::size_t patch) {
  if (mask.size() != grid_h * grid_w) {
    throw ShapeError("mask of " + std::to_string(mask.size()) + " patches does not fit a " +
                     std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
  }
  const std::size_t h = grid_h * patch, w = grid_w * patch;
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const bool vis = mask.visible[(y / patch) * grid_w + x / patch] != 0;
      out.push_back(static_cast<char>(vis ? 255 : 0));
    }
  return out;
}

void write_mask_pgm(const std::filesystem::path& path, const BinaryMask& mask, std::size_t grid_h,
                    std::size_t grid_w, std::size_t patch) {
  const std::string bytes = encode_mask_pgm(mask, grid_h, grid_w, patch);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string mask_filename(std::size_t step, std::size_t sample) {
  return "mask_" + std::to_string(step) + "_" + std::to_string(sample) + ".pgm";
}

#define CLMAE_INSTANTIATE_MASKING(T)                                                           \
  template struct CmmParams<T>;                                                                \
  template CmmParams<T> make_cmm(const ModelGeometry&, Rng&);                                  \
  template Tensor<T> cmm_forward(const PatchGrid<T>&, const CmmParams<T>&);                    \
  template std::vector<SoftMask> to_soft_masks(const Tensor<T>&);                              \
  template VisibleSelection<T> select_visible(const TokenBatch<T>&, std::span<const BinaryMask>); \
  template Tensor<T> scatter_visible(const Tensor<T>&, const IndexMap&);                       \
  template TokenBatch<T> apply_soft_mask(const TokenBatch<T>&, const Tensor<T>&);

CLMAE_INSTANTIATE_MASKING(float)
CLMAE_INSTANTIATE_MASKING(double)

}  // namespace clmae
