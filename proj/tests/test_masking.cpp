#include <gtest/gtest.h>

#include <random>

#include "clmae/errors.hpp"
#include "clmae/masking.hpp"
#include "clmae/training.hpp"

using namespace clmae;
using D = Tensor<double>;

namespace {

ModelGeometry tiny() {
  ModelGeometry g;
  g.image_h = 8;
  g.image_w = 8;
  g.channels = 3;
  g.patch = 4;
  g.embed_dim = 8;
  g.heads = 2;
  g.cmm_depth = 2;
  g.mlp_ratio = 2;
  g.decoder_dim = 8;
  g.decoder_heads = 2;
  return g;
}

PatchGrid<double> random_grid(std::size_t images, Rng& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<Image<double>> imgs;
  for (std::size_t b = 0; b < images; ++b) {
    Image<double> img{8, 8, 3, std::vector<double>(192)};
    for (auto& v : img.pixels) v = u(rng);
    imgs.push_back(std::move(img));
  }
  return patchify(imgs, 4);
}

}  // namespace

TEST(Threshold, Examples) {
  EXPECT_EQ(threshold(SoftMask{{0.7, 0.3}}).visible, (std::vector<std::uint8_t>{1, 0}));
  EXPECT_EQ(threshold(SoftMask{{0.5}}).visible, (std::vector<std::uint8_t>{1}));
  EXPECT_EQ(threshold(SoftMask{{0.1, 0.49}}).count_visible(), 0u);
}

TEST(Threshold, Idempotent) {
  BinaryMask once = threshold(SoftMask{{0.2, 0.9, 0.5, 0.51}});
  SoftMask again;
  for (auto v : once.visible) again.z.push_back(v);
  EXPECT_EQ(threshold(again).visible, once.visible);
}

TEST(CmmForward, OutputsProbabilitiesPerPatch) {
  Rng rng(1);
  auto cmm = make_cmm<double>(tiny(), rng);
  auto grid = random_grid(3, rng);
  D z = cmm_forward(grid, cmm);
  ASSERT_EQ(z.shape(), (Shape{3, 4}));
  for (double v : z.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(CmmForward, ZeroHeadGivesOneHalf) {
  Rng rng(2);
  auto cmm = make_cmm<double>(tiny(), rng);
  for (auto& v : cmm.head_out.weight.mutable_data()) v = 0;
  for (auto& v : cmm.head_out.bias.mutable_data()) v = 0;
  const auto z = cmm_forward(random_grid(2, rng), cmm);
  for (double v : z.data()) EXPECT_EQ(v, 0.5);
}

TEST(CmmForward, DependsOnTheImage) {
  Rng rng(3);
  auto cmm = make_cmm<double>(tiny(), rng);
  D z = cmm_forward(random_grid(2, rng), cmm);
  double diff = 0;
  for (std::size_t i = 0; i < 4; ++i) diff += std::abs(z.at(0, i) - z.at(1, i));
  EXPECT_GT(diff, 0.0);
}

TEST(CmmForward, StartsNearOneHalf) {
  Rng rng(4);
  auto cmm = make_cmm<double>(ModelGeometry{}, rng);
  std::uniform_real_distribution<double> u(0, 1);
  Image<double> img{32, 32, 3, std::vector<double>(3072)};
  for (auto& v : img.pixels) v = u(rng);
  const auto z = cmm_forward(patchify(img, 8), cmm);
  for (double v : z.data()) EXPECT_NEAR(v, 0.5, 0.1);
}

TEST(SelectVisible, KeepsClsAndVisibleRowsInOrder) {
  TokenBatch<double> tb{D::from_vector({5, 1}, {10, 11, 12, 13, 14}), uniform_groups(1, 5)};
  auto sel = select_visible(tb, std::vector<BinaryMask>{{{1, 0, 1, 0}}});
  EXPECT_EQ(std::vector<double>(sel.tokens.tokens.data().begin(), sel.tokens.tokens.data().end()),
            (std::vector<double>{10, 11, 13}));
  EXPECT_EQ(sel.map.visible[0], (std::vector<std::size_t>{0, 2}));
}

TEST(SelectVisible, AllOnesIsIdentity) {
  TokenBatch<double> tb{D::from_vector({3, 2}, {1, 2, 3, 4, 5, 6}), uniform_groups(1, 3)};
  auto sel = select_visible(tb, std::vector<BinaryMask>{{{1, 1}}});
  EXPECT_EQ(std::vector<double>(sel.tokens.tokens.data().begin(), sel.tokens.tokens.data().end()),
            std::vector<double>(tb.tokens.data().begin(), tb.tokens.data().end()));
}

TEST(SelectVisible, RejectsNoVisiblePatch) {
  TokenBatch<double> tb{D::zeros({3, 2}), uniform_groups(1, 3)};
  EXPECT_THROW(select_visible(tb, std::vector<BinaryMask>{{{0, 0}}}), DegenerateMaskError);
}

TEST(ScatterVisible, RestoresRowsAtTheirSlots) {
  TokenBatch<double> tb{D::from_vector({10, 1}, {0, 1, 2, 3, 4, 100, 101, 102, 103, 104}), uniform_groups(2, 5)};
  const std::vector<BinaryMask> masks{{{0, 1, 1, 0}}, {{1, 0, 0, 0}}};
  auto sel = select_visible(tb, masks);
  D back = scatter_visible(sel.tokens.tokens, sel.map);
  const std::vector<double> expect{0, 0, 2, 3, 0, 100, 101, 0, 0, 0};
  EXPECT_EQ(std::vector<double>(back.data().begin(), back.data().end()), expect);
}

TEST(ApplySoftMask, Examples) {
  TokenBatch<double> tb{D::from_vector({3, 2}, {1, 2, 3, 4, 5, 6}), uniform_groups(1, 3)};
  auto ones = apply_soft_mask(tb, D::full({1, 2}, 1.0));
  EXPECT_EQ(std::vector<double>(ones.tokens.data().begin(), ones.tokens.data().end()),
            (std::vector<double>{1, 2, 3, 4, 5, 6}));
  auto zeros = apply_soft_mask(tb, D::zeros({1, 2}));
  EXPECT_EQ(std::vector<double>(zeros.tokens.data().begin(), zeros.tokens.data().end()),
            (std::vector<double>{1, 2, 0, 0, 0, 0}));
}

TEST(ApplySoftMask, GradientIsTheRow) {
  TokenBatch<double> tb{D::from_vector({3, 2}, {1, 2, 3, 4, 5, 6}), uniform_groups(1, 3)};
  D z = D::from_vector({1, 2}, {0.3, 0.8}, true);
  sum(apply_soft_mask(tb, z).tokens).backward();
  EXPECT_DOUBLE_EQ(z.grad()[0], 7.0);
  EXPECT_DOUBLE_EQ(z.grad()[1], 11.0);
}

TEST(ApplySoftMask, BinaryLimitMatchesSelection) {
  Rng rng(5);
  auto grid = random_grid(1, rng);
  auto cmm = make_cmm<double>(tiny(), rng);
  auto tb = embed_tokens(grid, cmm.patch_embed, cmm.pos, cmm.cls);
  const BinaryMask m{{1, 0, 0, 1}};
  auto soft = apply_soft_mask(tb, D::from_vector({1, 4}, {1, 0, 0, 1}));
  auto sel = select_visible(tb, std::vector<BinaryMask>{m});
  // Visible content agrees; the soft path keeps zero rows for hidden patches.
  for (std::size_t c = 0; c < 8; ++c) {
    EXPECT_EQ(soft.tokens.at(1, c), sel.tokens.tokens.at(1, c));
    EXPECT_EQ(soft.tokens.at(4, c), sel.tokens.tokens.at(2, c));
    EXPECT_EQ(soft.tokens.at(2, c), 0.0);
  }
}

TEST(MaskPgm, HeaderAndUpscaling) {
  const std::string pgm = encode_mask_pgm(BinaryMask{{1, 0, 0, 1}}, 2, 2, 3);
  const std::string header = "P5\n6 6\n255\n";
  ASSERT_EQ(pgm.substr(0, header.size()), header);
  ASSERT_EQ(pgm.size(), header.size() + 36);
  auto px = [&](std::size_t y, std::size_t x) { return static_cast<unsigned char>(pgm[header.size() + y * 6 + x]); };
  EXPECT_EQ(px(0, 0), 255);
  EXPECT_EQ(px(2, 3), 0);
  EXPECT_EQ(px(3, 0), 0);
  EXPECT_EQ(px(5, 5), 255);
  const std::string all = encode_mask_pgm(BinaryMask{{1, 1, 1, 1}}, 2, 2, 2);
  for (std::size_t i = header.size(); i < all.size(); ++i) EXPECT_EQ(static_cast<unsigned char>(all[i]), 255);
  EXPECT_EQ(mask_filename(300, 2), "mask_300_2.pgm");
}

TEST(RandomMask, HidesRoundedShareWithinBounds) {
  Rng rng(6);
  EXPECT_EQ(random_mask(16, 0.75, rng).count_masked(), 12u);
  EXPECT_EQ(random_mask(4, 0.99, rng).count_masked(), 3u);
  EXPECT_EQ(random_mask(4, 0.01, rng).count_masked(), 1u);
  const std::vector<BinaryMask> ref{{{1, 0, 0, 1}}, {{0, 0, 0, 1}}};
  auto like = random_masks_like(ref, rng);
  EXPECT_EQ(like[0].count_masked(), 2u);
  EXPECT_EQ(like[1].count_masked(), 3u);
}

TEST(MaskFallback, ReplacesDegenerateMasksOnly) {
  Rng rng(7);
  const std::vector<SoftMask> soft{{{0.9, 0.1, 0.8, 0.2}}, {{0.1, 0.2, 0.3, 0.4}}, {{0.9, 0.9, 0.9, 0.9}}};
  std::vector<BinaryMask> out;
  EXPECT_EQ(masks_with_fallback(soft, 0.75, rng, out), 2u);
  EXPECT_EQ(out[0].visible, (std::vector<std::uint8_t>{1, 0, 1, 0}));
  EXPECT_EQ(out[1].count_masked(), 3u);
  EXPECT_EQ(out[2].count_masked(), 3u);
}
