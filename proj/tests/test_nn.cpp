#include <gtest/gtest.h>

#include <random>

#include "clmae/errors.hpp"
#include "clmae/mae.hpp"
#include "clmae/nn.hpp"
#include "clmae/training.hpp"

using namespace clmae;
using D = Tensor<double>;

namespace {

Image<double> random_image(std::size_t h, std::size_t w, std::size_t c, Rng& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  Image<double> img{h, w, c, std::vector<double>(h * w * c)};
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

void zero(Linear<double>& l) {
  for (auto& v : l.weight.mutable_data()) v = 0;
  for (auto& v : l.bias.mutable_data()) v = 0;
}

ModelGeometry small_geometry() {
  ModelGeometry g;
  g.image_h = 8;
  g.image_w = 8;
  g.channels = 1;
  g.patch = 4;
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

}  // namespace

TEST(Patchify, ToyGeometry) {
  Rng rng(1);
  auto grid = patchify(random_image(32, 32, 3, rng), 8);
  EXPECT_EQ(grid.n(), 16u);
  EXPECT_EQ(grid.patches.shape(), (Shape{16, 192}));
}

TEST(Patchify, ConstantImage) {
  Image<double> img{16, 16, 1, std::vector<double>(256, 5.0)};
  auto grid = patchify(img, 8);
  EXPECT_EQ(grid.patches.rows(), 4u);
  for (double v : grid.patches.data()) EXPECT_EQ(v, 5.0);
}

TEST(Patchify, RasterOrder) {
  Image<double> img{4, 4, 1, {}};
  for (int i = 0; i < 16; ++i) img.pixels.push_back(i);
  auto grid = patchify(img, 2);
  // Patch 1 is the top-right 2x2 block.
  EXPECT_EQ(grid.patches.at(1, 0), 2);
  EXPECT_EQ(grid.patches.at(1, 3), 7);
  EXPECT_EQ(grid.patches.at(2, 0), 8);
}

TEST(Patchify, RoundTripIsExact) {
  Rng rng(2);
  std::vector<Image<double>> imgs{random_image(8, 12, 3, rng), random_image(8, 12, 3, rng)};
  auto back = unpatchify(patchify(imgs, 4));
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t b = 0; b < 2; ++b) EXPECT_EQ(back[b].pixels, imgs[b].pixels);
}

TEST(Patchify, RejectsIndivisibleExtents) {
  Rng rng(3);
  EXPECT_THROW(patchify(random_image(10, 8, 1, rng), 4), ShapeError);
}

TEST(EmbedTokens, ZeroInputsGiveZeroTokens) {
  Image<double> img{8, 8, 1, std::vector<double>(64, 0.0)};
  auto grid = patchify(img, 4);
  Rng rng(4);
  auto proj = make_linear<double>(16, 8, rng);
  zero(proj);
  auto tb = embed_tokens(grid, proj, D::zeros({5, 8}), D::zeros({1, 8}));
  EXPECT_EQ(tb.tokens.shape(), (Shape{5, 8}));
  for (double v : tb.tokens.data()) EXPECT_EQ(v, 0.0);
}

TEST(EmbedTokens, PositionalTableReceivesNoGradient) {
  Rng rng(5);
  auto grid = patchify(random_image(8, 8, 1, rng), 4);
  auto proj = make_linear<double>(16, 8, rng);
  D pos = sincos_pos_table<double>(2, 2, 8);
  D cls = make_normal_row<double>(8, 0.02, rng);
  sum(embed_tokens(grid, proj, pos, cls).tokens).backward();
  EXPECT_FALSE(pos.has_grad());
  EXPECT_TRUE(cls.has_grad());
  EXPECT_TRUE(proj.weight.has_grad());
}

TEST(PosTable, ClsRowZeroAndRowsDistinct) {
  D pos = sincos_pos_table<double>(4, 4, 16);
  ASSERT_EQ(pos.shape(), (Shape{17, 16}));
  for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(pos.at(0, c), 0.0);
  for (std::size_t i = 1; i <= 16; ++i)
    for (std::size_t j = i + 1; j <= 16; ++j) {
      double diff = 0;
      for (std::size_t c = 0; c < 16; ++c) diff += std::abs(pos.at(i, c) - pos.at(j, c));
      EXPECT_GT(diff, 1e-6) << i << "," << j;
    }
}

TEST(Mha, SingleTokenReturnsValueProjection) {
  Rng rng(6);
  auto block = make_vit_block<double>(8, 1, 2, rng);
  D x = D::from_vector({1, 8}, {0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8});
  D y = mha_forward(x, block.attn, uniform_groups(1, 1));
  D expect = linear(linear(x, block.attn.value), block.attn.output);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(y.at(i), expect.at(i), 1e-12);
}

TEST(Mha, AttentionRowsAreStochastic) {
  Rng rng(7);
  D q = D::from_vector({4, 4}, {0.3, 1, -2, 0.5, 1, 1, 1, 1, -1, 0, 2, 3, 0.1, 0.2, 0.3, 0.4});
  for (std::size_t head = 0; head < 2; ++head) {
    auto p = attention_probs(q, q, RowGroup{0, 4}, 2, head);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 4; ++c) {
        EXPECT_GE(p[r * 4 + c], 0.0);
        s += p[r * 4 + c];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Mha, PermutationEquivariantWithoutPositions) {
  Rng rng(8);
  auto block = make_vit_block<double>(8, 2, 2, rng);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> v(5 * 8);
  for (auto& e : v) e = u(rng);
  D x = D::from_vector({5, 8}, v);
  const std::vector<std::size_t> perm{0, 3, 1, 4, 2};
  D xp = slice_rows(x, perm);
  D y = mha_forward(x, block.attn, uniform_groups(1, 5));
  D yp = mha_forward(xp, block.attn, uniform_groups(1, 5));
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(yp.at(r, c), y.at(perm[r], c), 1e-12);
}

TEST(VitBlock, ZeroSublayersAreIdentity) {
  Rng rng(9);
  auto block = make_vit_block<double>(8, 2, 4, rng);
  for (auto* l : {&block.attn.query, &block.attn.key, &block.attn.value, &block.attn.output, &block.fc1, &block.fc2}) zero(*l);
  D x = D::from_vector({3, 8}, std::vector<double>(24, 0.25));
  x.mutable_data()[5] = -3;
  D y = vit_block(x, block, uniform_groups(1, 3));
  EXPECT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < 24; ++i) EXPECT_EQ(y.at(i), x.at(i));
}

TEST(Mae, EncoderSeesClsPlusVisible) {
  Rng rng(10);
  ModelGeometry g;  // toy defaults, n = 16
  auto mae = make_mae<double>(g, rng);
  std::vector<Image<double>> imgs{random_image(32, 32, 3, rng)};
  auto grid = patchify(imgs, 8);
  BinaryMask m = random_mask(16, 0.75, rng);
  EXPECT_EQ(m.count_visible(), 4u);
  auto sel = select_visible(mae_embed(grid, mae), std::vector<BinaryMask>{m});
  EXPECT_EQ(encode(sel.tokens, mae).tokens.rows(), 5u);
}

TEST(Mae, DecodeEmitsEveryPatch) {
  Rng rng(11);
  auto g = small_geometry();
  auto mae = make_mae<double>(g, rng);
  auto grid = patchify(std::vector<Image<double>>{random_image(8, 8, 1, rng)}, 4);
  const std::vector<BinaryMask> masks{{{0, 0, 0, 1}}};
  auto sel = select_visible(mae_embed(grid, mae), masks);
  D pred = decode(encode(sel.tokens, mae), sel.map, mae);
  EXPECT_EQ(pred.shape(), (Shape{4, 16}));
  zero(mae.decoder_pred);
  const D zeroed = decode(encode(sel.tokens, mae), sel.map, mae);
  for (double v : zeroed.data()) EXPECT_EQ(v, 0.0);
}

TEST(Mae, EncodingIndependentOfVisibleOrder) {
  Rng rng(12);
  auto g = small_geometry();
  auto mae = make_mae<double>(g, rng);
  auto grid = patchify(std::vector<Image<double>>{random_image(8, 8, 1, rng)}, 4);
  auto tokens = mae_embed(grid, mae);
  D a = encode(TokenBatch<double>{slice_rows(tokens.tokens, {0, 2, 4}), uniform_groups(1, 3)}, mae).tokens;
  D b = encode(TokenBatch<double>{slice_rows(tokens.tokens, {0, 4, 2}), uniform_groups(1, 3)}, mae).tokens;
  for (std::size_t c = 0; c < 8; ++c) {
    EXPECT_NEAR(a.at(1, c), b.at(2, c), 1e-12);
    EXPECT_NEAR(a.at(2, c), b.at(1, c), 1e-12);
  }
}

TEST(Mae, MaskTokenOnlyAffectsMaskedSlotsWithoutDecoderBlocks) {
  Rng rng(13);
  auto g = small_geometry();
  g.decoder_depth = 0;
  auto mae = make_mae<double>(g, rng);
  auto grid = patchify(std::vector<Image<double>>{random_image(8, 8, 1, rng)}, 4);
  const std::vector<BinaryMask> masks{{{1, 0, 1, 0}}};
  auto sel = select_visible(mae_embed(grid, mae), masks);
  D before = decode(encode(sel.tokens, mae), sel.map, mae);
  for (auto& v : mae.mask_token.mutable_data()) v += 0.5;
  D after = decode(encode(sel.tokens, mae), sel.map, mae);
  for (std::size_t i = 0; i < 4; ++i) {
    double diff = 0;
    for (std::size_t c = 0; c < 16; ++c) diff += std::abs(after.at(i, c) - before.at(i, c));
    if (masks[0].visible[i]) {
      EXPECT_EQ(diff, 0.0) << i;
    } else {
      EXPECT_GT(diff, 0.0) << i;
    }
  }
}

TEST(Mae, EncodeRejectsNoVisibleTokens) {
  Rng rng(14);
  auto mae = make_mae<double>(small_geometry(), rng);
  TokenBatch<double> only_cls{D::zeros({1, 8}), uniform_groups(1, 1)};
  EXPECT_THROW(encode(only_cls, mae), DegenerateMaskError);
}

TEST(NormalizeTarget, Examples) {
  Image<double> img{1, 2, 1, {0.0, 2.0}};
  auto t = normalize_target(patchify(img, 1));
  // One pixel per patch: each patch is constant, so each row is zero.
  EXPECT_EQ(t.target.at(0), 0.0);

  PatchGrid<double> grid{D::from_vector({2, 2}, {0, 2, 3, 3}), 1, 1, 2, 1, 1};
  auto t2 = normalize_target(grid);
  EXPECT_NEAR(t2.target.at(0, 0), -1.0, 1e-6);
  EXPECT_NEAR(t2.target.at(0, 1), 1.0, 1e-6);
  EXPECT_EQ(t2.target.at(1, 0), 0.0);
  EXPECT_EQ(t2.target.at(1, 1), 0.0);
}

TEST(NormalizeTarget, RowsHaveZeroMeanUnitVariance) {
  Rng rng(15);
  auto t = normalize_target(patchify(random_image(16, 16, 3, rng), 8));
  for (std::size_t r = 0; r < t.target.rows(); ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < t.target.cols(); ++c) m += t.target.at(r, c);
    m /= static_cast<double>(t.target.cols());
    for (std::size_t c = 0; c < t.target.cols(); ++c) v += (t.target.at(r, c) - m) * (t.target.at(r, c) - m);
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(v / static_cast<double>(t.target.cols()), 1.0, 1e-4);
  }
}

TEST(ReconLoss, Examples) {
  ReconTarget<double> target{D::from_vector({2, 2}, {0, 0, 1, -1}), {}, {}};
  const std::vector<BinaryMask> mask{{{1, 0}}};
  EXPECT_DOUBLE_EQ(recon_loss(D::zeros({2, 2}), target, mask).item(), 1.0);
  EXPECT_DOUBLE_EQ(recon_loss(target.target, target, mask).item(), 0.0);
  D offset = add_scalar(target.target, 1.0);
  EXPECT_DOUBLE_EQ(recon_loss(offset, target, mask).item(), 1.0);
  // Visible predictions do not matter.
  D junk = D::from_vector({2, 2}, {9, -9, 0, 0});
  EXPECT_DOUBLE_EQ(recon_loss(junk, target, mask).item(), 1.0);
  EXPECT_THROW(recon_loss(junk, target, std::vector<BinaryMask>{{{1, 1}}}), DegenerateMaskError);
}

