#include "clmae/nn.hpp"

#include <cmath>

#include "clmae/errors.hpp"

namespace clmae {

template <typename T>
PatchGrid<T> patchify(const std::vector<Image<T>>& images, std::size_t p) {
  if (images.empty()) throw ShapeError("patchify: no images");
  const std::size_t h = images[0].h, w = images[0].w, c = images[0].c;
  if (p == 0 || h % p != 0 || w % p != 0) {
    throw ShapeError("patchify: " + std::to_string(h) + "x" + std::to_string(w) +
                     " image is not divisible into " + std::to_string(p) + "-pixel patches");
  }
  const std::size_t gh = h / p, gw = w / p, n = gh * gw, dim = p * p * c;
  std::vector<T> out(images.size() * n * dim);
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image<T>& img = images[b];
    if (img.h != h || img.w != w || img.c != c || img.pixels.size() != h * w * c) {
      throw ShapeError("patchify: image " + std::to_string(b) + " has inconsistent geometry");
    }
    T* dst = out.data() + b * n * dim;
    for (std::size_t gy = 0; gy < gh; ++gy)
      for (std::size_t gx = 0; gx < gw; ++gx)
        for (std::size_t y = 0; y < p; ++y) {
          const T* src = img.pixels.data() + ((gy * p + y) * w + gx * p) * c;
          dst = std::copy_n(src, p * c, dst);
        }
  }
  PatchGrid<T> grid;
  grid.patches = Tensor<T>::from_vector({images.size() * n, dim}, std::move(out));
  grid.images = images.size();
  grid.h = h;
  grid.w = w;
  grid.c = c;
  grid.p = p;
  return grid;
}

template <typename T>
PatchGrid<T> patchify(const Image<T>& image, std::size_t p) {
  return patchify(std::vector<Image<T>>{image}, p);
}

template <typename T>
std::vector<Image<T>> unpatchify(const PatchGrid<T>& grid) {
  const std::size_t p = grid.p, c = grid.c, n = grid.n(), dim = grid.patch_dim();
  std::vector<Image<T>> images(grid.images);
  auto src_all = grid.patches.data();
  for (std::size_t b = 0; b < grid.images; ++b) {
    Image<T>& img = images[b];
    img.h = grid.h;
    img.w = grid.w;
    img.c = c;
    img.pixels.resize(grid.h * grid.w * c);
    const T* src = src_all.data() + b * n * dim;
    for (std::size_t gy = 0; gy < grid.grid_h(); ++gy)
      for (std::size_t gx = 0; gx < grid.grid_w(); ++gx)
        for (std::size_t y = 0; y < p; ++y) {
          std::copy_n(src, p * c, img.pixels.data() + ((gy * p + y) * grid.w + gx * p) * c);
          src += p * c;
        }
  }
  return images;
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

template <typename T>
Linear<T> make_linear(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> w(in * out), b(out);
  for (auto& x : w) x = static_cast<T>(dist(rng));
  for (auto& x : b) x = static_cast<T>(dist(rng));
  return {Tensor<T>::from_vector({in, out}, std::move(w), true),
          Tensor<T>::from_vector({out}, std::move(b), true)};
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Linear<T>& layer) {
  return add_rowwise(matmul(x, layer.weight), layer.bias);
}

template <typename T>
void LayerNormParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".bias", bias});
}

template <typename T>
LayerNormParams<T> make_layernorm(std::size_t width) {
  return {Tensor<T>::full({width}, T(1), true), Tensor<T>::zeros({width}, true)};
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const LayerNormParams<T>& ln) {
  return layernorm(x, ln.gain, ln.bias, T(1e-6));
}

template <typename T>
void MhaParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  query.collect(prefix + ".query", out);
  key.collect(prefix + ".key", out);
  value.collect(prefix + ".value", out);
  output.collect(prefix + ".output", out);
}

template <typename T>
void VitBlockParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  ln1.collect(prefix + ".ln1", out);
  attn.collect(prefix + ".attn", out);
  ln2.collect(prefix + ".ln2", out);
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

template <typename T>
VitBlockParams<T> make_vit_block(std::size_t width, std::size_t heads, std::size_t mlp_ratio,
                                 Rng& rng) {
  if (heads == 0 || width % heads != 0) {
    throw ShapeError("vit block: width " + std::to_string(width) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  VitBlockParams<T> b;
  b.ln1 = make_layernorm<T>(width);
  b.attn.query = make_linear<T>(width, width, rng);
  b.attn.key = make_linear<T>(width, width, rng);
  b.attn.value = make_linear<T>(width, width, rng);
  b.attn.output = make_linear<T>(width, width, rng);
  b.attn.heads = heads;
  b.ln2 = make_layernorm<T>(width);
  b.fc1 = make_linear<T>(width, width * mlp_ratio, rng);
  b.fc2 = make_linear<T>(width * mlp_ratio, width, rng);
  return b;
}

template <typename T>
Tensor<T> mha_forward(const Tensor<T>& x, const MhaParams<T>& params, const RowGroups& groups) {
  Tensor<T> q = linear(x, params.query);
  Tensor<T> k = linear(x, params.key);
  Tensor<T> v = linear(x, params.value);
  return linear(attention(q, k, v, groups, params.heads), params.output);
}

template <typename T>
Tensor<T> vit_block(const Tensor<T>& x, const VitBlockParams<T>& params, const RowGroups& groups) {
  Tensor<T> h = add(x, mha_forward(layernorm(x, params.ln1), params.attn, groups));
  Tensor<T> mlp = linear(gelu(linear(layernorm(h, params.ln2), params.fc1)), params.fc2);
  return add(h, mlp);
}

template <typename T>
Tensor<T> sincos_pos_table(std::size_t grid_h, std::size_t grid_w, std::size_t width) {
  if (width % 4 != 0) {
    throw ShapeError("sincos_pos_table: width " + std::to_string(width) + " not divisible by 4");
  }
  const std::size_t half = width / 2, quarter = width / 4;
  std::vector<T> table((grid_h * grid_w + 1) * width, T(0));
  for (std::size_t gy = 0; gy < grid_h; ++gy)
    for (std::size_t gx = 0; gx < grid_w; ++gx) {
      T* row = table.data() + (1 + gy * grid_w + gx) * width;
      for (std::size_t i = 0; i < quarter; ++i) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
        row[i] = static_cast<T>(std::sin(gx * omega));
        row[quarter + i] = static_cast<T>(std::cos(gx * omega));
        row[half + i] = static_cast<T>(std::sin(gy * omega));
        row[half + quarter + i] = static_cast<T>(std::cos(gy * omega));
      }
    }
  return Tensor<T>::from_vector({grid_h * grid_w + 1, width}, std::move(table));
}

template <typename T>
Tensor<T> tile_rows(const Tensor<T>& table, std::size_t times) {
  std::vector<T> out;
  out.reserve(table.numel() * times);
  for (std::size_t t = 0; t < times; ++t) out.insert(out.end(), table.data().begin(), table.data().end());
  return Tensor<T>::from_vector({table.rows() * times, table.cols()}, std::move(out));
}

std::vector<std::size_t> cls_rows(const RowGroups& groups) {
  std::vector<std::size_t> rows;
  rows.reserve(groups.size());
  for (const RowGroup& g : groups) rows.push_back(g.offset);
  return rows;
}

template <typename T>
TokenBatch<T> embed_tokens(const PatchGrid<T>& grid, const Linear<T>& proj, const Tensor<T>& pos,
                           const Tensor<T>& cls) {
  const std::size_t n = grid.n(), d = proj.out_features();
  if (proj.in_features() != grid.patch_dim()) {
    throw ShapeError("embed_tokens: projection expects " + std::to_string(proj.in_features()) +
                     " inputs, patches have " + std::to_string(grid.patch_dim()));
  }
  if (pos.rank() != 2 || pos.rows() != n + 1 || pos.cols() != d || cls.numel() != d) {
    throw ShapeError("embed_tokens: positional table " + shape_string(pos.shape()) +
                     " / cls " + shape_string(cls.shape()) + " do not match n=" +
                     std::to_string(n) + ", d=" + std::to_string(d));
  }
  Tensor<T> patch_tokens = linear(grid.patches, proj);  // (B*n) x d
  Tensor<T> stacked = concat_rows<T>({reshape(cls, {1, d}), patch_tokens});
  std::vector<std::size_t> order;
  order.reserve(grid.images * (n + 1));
  for (std::size_t b = 0; b < grid.images; ++b) {
    order.push_back(0);
    for (std::size_t i = 0; i < n; ++i) order.push_back(1 + b * n + i);
  }
  Tensor<T> seq = slice_rows(stacked, order);
  return {add(seq, tile_rows(pos, grid.images)), uniform_groups(grid.images, n + 1)};
}

template <typename T>
Tensor<T> make_normal_row(std::size_t width, double std, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std);
  std::vector<T> v(width);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>::from_vector({1, width}, std::move(v), true);
}

template <typename T>
std::vector<std::vector<T>> snapshot(const ParamList<T>& params) {
  std::vector<std::vector<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

#define CLMAE_INSTANTIATE_NN(T)                                                                  \
  template PatchGrid<T> patchify(const std::vector<Image<T>>&, std::size_t);                     \
  template PatchGrid<T> patchify(const Image<T>&, std::size_t);                                  \
  template std::vector<Image<T>> unpatchify(const PatchGrid<T>&);                                \
  template struct Linear<T>;                                                                     \
  template Linear<T> make_linear(std::size_t, std::size_t, Rng&);                                \
  template Tensor<T> linear(const Tensor<T>&, const Linear<T>&);                                 \
  template struct LayerNormParams<T>;                                                            \
  template LayerNormParams<T> make_layernorm(std::size_t);                                       \
  template Tensor<T> layernorm(const Tensor<T>&, const LayerNormParams<T>&);                     \
  template struct MhaParams<T>;                                                                  \
  template struct VitBlockParams<T>;                                                             \
  template VitBlockParams<T> make_vit_block(std::size_t, std::size_t, std::size_t, Rng&);        \
  template Tensor<T> mha_forward(const Tensor<T>&, const MhaParams<T>&, const RowGroups&);       \
  template Tensor<T> vit_block(const Tensor<T>&, const VitBlockParams<T>&, const RowGroups&);    \
  template Tensor<T> sincos_pos_table(std::size_t, std::size_t, std::size_t);                    \
  template Tensor<T> tile_rows(const Tensor<T>&, std::size_t);                                   \
  template TokenBatch<T> embed_tokens(const PatchGrid<T>&, const Linear<T>&, const Tensor<T>&,   \
                                      const Tensor<T>&);                                         \
  template Tensor<T> make_normal_row(std::size_t, double, Rng&);                                 \
  template std::vector<std::vector<T>> snapshot(const ParamList<T>&);

CLMAE_INSTANTIATE_NN(float)
CLMAE_INSTANTIATE_NN(double)

}  // namespace clmae
