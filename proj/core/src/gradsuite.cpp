#include "clmae/gradsuite.hpp"

#include <functional>
#include <random>

#include "clmae/losses.hpp"
#include "clmae/mae.hpp"
#include "clmae/masking.hpp"
#include "clmae/nn.hpp"

namespace clmae {

namespace {

using D = Tensor<double>;

struct Suite {
  Rng rng;
  std::vector<GradCheckReport> out;

  D uniform(Shape shape, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng);
    return D::from_vector(std::move(shape), std::move(v));
  }

  // Contracting with fixed random weights gives every output coordinate a
  // distinct influence on the scalar being differentiated.
  D contract(const D& y) {
    D w = uniform(y.shape(), -1.0, 1.0);
    return sum(mul(y, w));
  }

  void unary(const std::string& name, std::function<D(const D&)> f, Shape shape, double lo, double hi) {
    D x = uniform(std::move(shape), lo, hi);
    D w = uniform(f(x).shape(), -1.0, 1.0);
    out.push_back({name, grad_check([&](const D& a) { return sum(mul(f(a), w)); }, x)});
  }

  void multi(const std::string& name, const std::function<D()>& f, std::vector<D> leaves,
             std::size_t coords = 0) {
    GradCheckOptions opt;
    opt.max_coords_per_leaf = coords;
    opt.seed = rng();
    out.push_back({name, grad_check(f, std::move(leaves), opt)});
  }
};

std::vector<D> leaves_of(const ParamList<double>& params) {
  std::vector<D> out;
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

ModelGeometry toy_geometry(std::size_t w) {
  ModelGeometry g;
  g.image_h = 2;
  g.image_w = w;
  g.channels = 1;
  g.patch = 2;
  g.embed_dim = 8;
  g.heads = 2;
  g.encoder_depth = 1;
  g.decoder_depth = 1;
  g.decoder_dim = 8;
  g.decoder_heads = 2;
  g.cmm_depth = 1;
  g.mlp_ratio = 2;
  return g;
}

PatchGrid<double> random_grid(Suite& s, const ModelGeometry& g, std::size_t images) {
  std::vector<Image<double>> imgs;
  for (std::size_t b = 0; b < images; ++b) {
    D px = s.uniform({g.image_h * g.image_w * g.channels}, 0.0, 1.0);
    imgs.push_back({g.image_h, g.image_w, g.channels, std::vector<double>(px.data().begin(), px.data().end())});
  }
  return patchify(imgs, g.patch);
}

}  // namespace

std::vector<GradCheckReport> run_grad_suite(std::uint64_t seed) {
  Suite s{Rng(seed), {}};

  // Elementwise and algebraic operations.
  {
    D b = s.uniform({4, 3}, -1, 1);
    s.unary("matmul", [&](const D& a) { return matmul(a, b); }, {5, 4}, -1, 1);
    D c = s.uniform({5, 4}, -1, 1);
    s.unary("matmul_rhs", [&](const D& a) { return matmul(c, a); }, {4, 3}, -1, 1);
  }
  {
    D o = s.uniform({3, 4}, -1, 1), pos = s.uniform({3, 4}, 0.5, 1.5);
    s.unary("add", [&](const D& a) { return add(a, o); }, {3, 4}, -1, 1);
    s.unary("sub", [&](const D& a) { return sub(o, a); }, {3, 4}, -1, 1);
    s.unary("mul", [&](const D& a) { return mul(a, o); }, {3, 4}, -1, 1);
    s.unary("div_num", [&](const D& a) { return div(a, pos); }, {3, 4}, -1, 1);
    s.unary("div_den", [&](const D& a) { return div(o, a); }, {3, 4}, 0.5, 1.5);
    D k = s.uniform({1}, 0.5, 1.5);
    s.unary("broadcast_scalar", [&](const D& a) { return mul(add(a, k), k); }, {3, 4}, -1, 1);
    s.unary("broadcast_scalar_grad", [&](const D& a) { return mul(o, a); }, {1}, -1, 1);
  }
  s.unary("add_scalar", [](const D& a) { return add_scalar(a, 0.3); }, {3, 4}, -1, 1);
  s.unary("mul_scalar", [](const D& a) { return mul_scalar(a, -1.7); }, {3, 4}, -1, 1);
  s.unary("neg", [](const D& a) { return neg(a); }, {3, 4}, -1, 1);
  s.unary("exp", [](const D& a) { return exp(a); }, {3, 4}, -1, 1);
  s.unary("log", [](const D& a) { return log(a); }, {3, 4}, 0.5, 2.0);
  s.unary("square", [](const D& a) { return square(a); }, {3, 4}, -1, 1);
  s.unary("clamp_min", [](const D& a) { return clamp_min(a, 0.1); }, {3, 4}, 0.2, 1.0);
  {
    D bias = s.uniform({4}, -1, 1), rowscale = s.uniform({3}, -1, 1), base = s.uniform({3, 4}, -1, 1);
    s.unary("add_rowwise", [&](const D& a) { return add_rowwise(a, bias); }, {3, 4}, -1, 1);
    s.unary("add_rowwise_bias", [&](const D& a) { return add_rowwise(base, a); }, {4}, -1, 1);
    s.unary("scale_rows", [&](const D& a) { return scale_rows(a, rowscale); }, {3, 4}, -1, 1);
    s.unary("scale_rows_scale", [&](const D& a) { return scale_rows(base, a); }, {3}, -1, 1);
  }

  // Reductions.
  s.unary("sum", [](const D& a) { return sum(a); }, {3, 4}, -1, 1);
  s.unary("sum_axis0", [](const D& a) { return sum(a, 0); }, {3, 4}, -1, 1);
  s.unary("sum_axis1", [](const D& a) { return sum(a, 1); }, {3, 4}, -1, 1);
  s.unary("mean", [](const D& a) { return mean(a); }, {3, 4}, -1, 1);
  s.unary("mean_axis1", [](const D& a) { return mean(a, 1); }, {3, 4}, -1, 1);

  // Activations and normalisation.
  s.unary("sigmoid", [](const D& a) { return sigmoid(a); }, {3, 4}, -3, 3);
  s.unary("gelu", [](const D& a) { return gelu(a); }, {3, 4}, -3, 3);
  s.unary("softmax", [](const D& a) { return softmax(a); }, {3, 5}, -2, 2);
  {
    D x = s.uniform({3, 6}, -1, 1), gain = s.uniform({6}, 0.5, 1.5), bias = s.uniform({6}, -0.5, 0.5);
    D w = s.uniform({3, 6}, -1, 1);
    s.multi("layernorm", [&] { return sum(mul(layernorm(x, gain, bias), w)); }, {x, gain, bias});
  }

  // Shape operations.
  s.unary("reshape", [](const D& a) { return reshape(a, {4, 3}); }, {3, 4}, -1, 1);
  s.unary("transpose", [](const D& a) { return transpose(a); }, {3, 4}, -1, 1);
  {
    D other = s.uniform({2, 4}, -1, 1);
    s.unary("concat_rows", [&](const D& a) { return concat_rows<double>({a, other, a}); }, {3, 4}, -1, 1);
    s.unary("slice_rows", [](const D& a) { return slice_rows(a, {2, 0, 2, 1}); }, {3, 4}, -1, 1);
  }

  // Attention over two independent groups of unequal length.
  {
    const RowGroups groups{{0, 3}, {3, 2}};
    D q = s.uniform({5, 4}, -1, 1), k = s.uniform({5, 4}, -1, 1), v = s.uniform({5, 4}, -1, 1);
    D w = s.uniform({5, 4}, -1, 1);
    s.multi("attention", [&] { return sum(mul(attention(q, k, v, groups, 2), w)); }, {q, k, v});
  }

  // Model components.
  {
    Linear<double> lin = make_linear<double>(4, 3, s.rng);
    D x = s.uniform({5, 4}, -1, 1), w = s.uniform({5, 3}, -1, 1);
    s.multi("linear", [&] { return sum(mul(linear(x, lin), w)); }, {x, lin.weight, lin.bias});
  }
  {
    const RowGroups groups{{0, 3}, {3, 3}};
    VitBlockParams<double> block = make_vit_block<double>(8, 2, 2, s.rng);
    ParamList<double> params;
    block.collect("block", params);
    D x = s.uniform({6, 8}, -1, 1), w = s.uniform({6, 8}, -1, 1);
    auto mha_leaves = std::vector<D>{x};
    ParamList<double> mha_params;
    block.attn.collect("attn", mha_params);
    for (auto& p : leaves_of(mha_params)) mha_leaves.push_back(p);
    s.multi("mha", [&] { return sum(mul(mha_forward(x, block.attn, groups), w)); }, mha_leaves, 8);
    auto leaves = leaves_of(params);
    leaves.push_back(x);
    s.multi("vit_block", [&] { return sum(mul(vit_block(x, block, groups), w)); }, leaves, 8);
  }

  const ModelGeometry g4 = toy_geometry(8);  // 4 patches
  {
    PatchGrid<double> grid = random_grid(s, g4, 2);
    Linear<double> proj = make_linear<double>(g4.patch_dim(), g4.embed_dim, s.rng);
    D pos = sincos_pos_table<double>(g4.grid_h(), g4.grid_w(), g4.embed_dim);
    D cls = s.uniform({1, g4.embed_dim}, -0.1, 0.1);
    D w = s.uniform({2 * (g4.num_patches() + 1), g4.embed_dim}, -1, 1);
    s.multi("embed_tokens", [&] { return sum(mul(embed_tokens(grid, proj, pos, cls).tokens, w)); },
            {grid.patches, proj.weight, proj.bias, cls});
    TokenBatch<double> tokens = embed_tokens(grid, proj, pos, cls);
    D base = tokens.tokens.detach();
    D z = s.uniform({2, g4.num_patches()}, 0.05, 0.95);
    s.multi("apply_soft_mask", [&] { return sum(mul(apply_soft_mask(TokenBatch<double>{base, tokens.groups}, z).tokens, w)); },
            {base, z});
  }
  {
    PatchGrid<double> grid = random_grid(s, g4, 2);
    MaeParams<double> mae = make_mae<double>(g4, s.rng);
    const auto target = normalize_target(grid);
    const std::vector<BinaryMask> masks{{{1, 0, 0, 1}}, {{0, 1, 1, 0}}};
    s.multi("mae_recon_loss",
            [&] {
              const auto sel = select_visible(mae_embed(grid, mae), masks);
              return recon_loss(decode(encode(sel.tokens, mae), sel.map, mae), target, masks);
            },
            leaves_of(mae.parameters()), 6);
  }
  {
    PatchGrid<double> grid = random_grid(s, g4, 3);
    CmmParams<double> cmm = make_cmm<double>(g4, s.rng);
    s.multi("cmm_forward", [&] { return sum(cmm_forward(grid, cmm)); }, leaves_of(cmm.parameters()), 6);
  }

  // The masking-module objectives, checked against both z and the
  // reconstruction they score.
  {
    const std::size_t images = 3, n = 4, dim = 5;
    D pred = s.uniform({images * n, dim}, -1, 1), target = s.uniform({images * n, dim}, -1, 1);
    D z = s.uniform({images, n}, 0.05, 0.95);
    s.multi("loss_curriculum", [&] { return curriculum_loss(pred, target, z, -0.6); }, {pred, z});
    s.multi("loss_gaussian", [&] { return gaussian_loss(z, 0.5, 0.12); }, {z});
    s.multi("loss_kl_ratio", [&] { return kl_ratio_loss(z, 0.75); }, {z});
    D zn = s.uniform({images, n}, 0.3, 0.7);
    s.multi("loss_diversity", [&] { return diversity_loss(zn); }, {zn});
    LossWeights weights;
    s.multi("loss_joint",
            [&] {
              return joint_loss(LossParts<double>{curriculum_loss(pred, target, z, 0.8), gaussian_loss(z, 0.5, 0.12),
                                                  kl_ratio_loss(z, 0.75), diversity_loss(z)},
                                weights);
            },
            {pred, z});
  }

  // Whole step-2 graph on a 2-patch model: masking module -> soft mask ->
  // frozen MAE -> joint loss.
  {
    const ModelGeometry g2 = toy_geometry(4);
    PatchGrid<double> grid = random_grid(s, g2, 3);
    const auto target = normalize_target(grid);
    MaeParams<double> mae = make_mae<double>(g2, s.rng);
    CmmParams<double> cmm = make_cmm<double>(g2, s.rng);
    for (auto& p : mae.parameters()) p.tensor.set_requires_grad(false);
    LossWeights weights;
    s.multi("cmm_joint_graph",
            [&] {
              D z = cmm_forward(grid, cmm);
              const auto soft = apply_soft_mask(mae_embed(grid, mae), z);
              const D pred = decode(encode(soft, mae), full_index_map(grid.images, grid.n()), mae);
              return joint_loss(LossParts<double>{curriculum_loss(pred, target.target, z, 0.5),
                                                  gaussian_loss(z, 0.5, 0.12), kl_ratio_loss(z, 0.75),
                                                  diversity_loss(z)},
                                weights);
            },
            leaves_of(cmm.parameters()), 6);
  }
  return s.out;
}

}  // namespace clmae
