#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

#include "support.hpp"
#include "volage/errors.hpp"
#include "volage/interpret.hpp"

using namespace volage;
using namespace volage::testing;

TEST(GradCamRaw, ZeroGradientsGiveZeroMap) {
  std::mt19937_64 rng(1);
  const Tensorf f = random_tensor<float>({1, 3, 4, 4, 4}, rng);
  const Tensorf map = gradcam_raw(f, Tensorf(f.shape()));
  EXPECT_EQ(map.shape(), (Shape{4, 4, 4}));
  EXPECT_EQ(map.array().abs().maxCoeff(), 0.0f);
  EXPECT_EQ(normalize_max(map).array().abs().maxCoeff(), 0.0f);
}

TEST(GradCamRaw, ConstantGradientClosedForm) {
  std::mt19937_64 rng(2);
  const Tensorf f = random_tensor<float>({1, 1, 3, 4, 5}, rng);
  const Tensorf heat = normalize_max(gradcam_raw(f, Tensorf(f.shape(), 0.25f)));
  const float top = f.array().maxCoeff();
  for (Index i = 0; i < f.size(); ++i) EXPECT_NEAR(heat[i], std::max(f[i], 0.0f) / top, 1e-6f);
}

TEST(GradCamRaw, ChannelWeightsAreSpatialMeans) {
  Tensorf f({2, 1, 1, 2});
  f(0, 0, 0, 0) = 1, f(0, 0, 0, 1) = 2, f(1, 0, 0, 0) = 3, f(1, 0, 0, 1) = 1;
  Tensorf g({2, 1, 1, 2});
  g(0, 0, 0, 0) = 1, g(0, 0, 0, 1) = 3;    // mean 2
  g(1, 0, 0, 0) = -1, g(1, 0, 0, 1) = -2;  // mean -1.5
  const Tensorf map = gradcam_raw(f, g);
  EXPECT_FLOAT_EQ(map[0], 0.0f);  // relu(2 - 4.5)
  EXPECT_FLOAT_EQ(map[1], 2.5f);  // 4 - 1.5
}

TEST(Upsample, CornerAlignedAndExactOnLinearFields) {
  Tensorf g({3, 2, 4});
  for (Index d = 0; d < 3; ++d)
    for (Index h = 0; h < 2; ++h)
      for (Index w = 0; w < 4; ++w) g(d, h, w) = 1.0f + 2.0f * d - 3.0f * h + 0.5f * w;
  const Tensorf u = upsample_trilinear(g, {9, 5, 13});
  ASSERT_EQ(u.shape(), (Shape{9, 5, 13}));
  EXPECT_EQ(u(0, 0, 0), g(0, 0, 0));
  EXPECT_EQ(u(8, 4, 12), g(2, 1, 3));
  for (Index d = 0; d < 9; ++d)
    for (Index h = 0; h < 5; ++h)
      for (Index w = 0; w < 13; ++w) {
        const double sd = d * 2.0 / 8, sh = h * 1.0 / 4, sw = w * 3.0 / 12;
        EXPECT_NEAR(u(d, h, w), 1.0 + 2.0 * sd - 3.0 * sh + 0.5 * sw, 1e-5);
      }
  const Tensorf one = upsample_trilinear(Tensorf({1, 1, 1}, 0.7f), {4, 4, 4});
  EXPECT_TRUE((one.array() == 0.7f).all());
}

TEST(GradCam, ZeroHeadGivesBlackMap) {
  BlobRig rig = blob_rig();
  rig.model.mutable_params().dense_weights.front().set_zero();
  for (std::size_t l = 1; l <= 3; ++l) {
    const GradCamMap cam = gradcam(rig.model, rig.volume, l);
    EXPECT_EQ(cam.heatmap.array().abs().maxCoeff(), 0.0f);
  }
}

TEST(GradCam, RigPredictsBlobIntensity) {
  const BlobRig rig = blob_rig();
  const Tensorf batch = rig.volume.reshaped({1, 1, 32, 32, 32});
  EXPECT_FLOAT_EQ(forward(rig.model, batch, false).predictions[0], rig.intensity);
}

TEST(GradCam, BlobLocalizedAtEveryLayer) {
  for (std::size_t depth : {1u, 2u, 3u}) {
    const BlobRig rig = blob_rig(depth);
    for (std::size_t l = 1; l <= depth; ++l) {
      for (CamTarget target : {CamTarget::PostAttention, CamTarget::PreAttention}) {
        const GradCamMap cam = gradcam(rig.model, rig.volume, l, target);
        ASSERT_EQ(cam.heatmap.shape(), (Shape{32, 32, 32}));
        EXPECT_TRUE(inside(argmax3(cam.heatmap), rig.lo, rig.hi)) << "depth " << depth << " layer " << l;
        EXPECT_GE(cam.heatmap.array().minCoeff(), 0.0f);
        EXPECT_EQ(cam.heatmap.array().maxCoeff(), 1.0f);
      }
    }
  }
}

TEST(GradCam, MidSliceMaxInsideBlob) {
  const BlobRig rig = blob_rig();
  const GradCamMap cam = gradcam(rig.model, rig.volume, 2);
  const auto peak = argmax3(cam.heatmap);
  // Axial slice through the peak: its brightest pixel lies over the blob.
  const SliceImage img = extract_slice(cam, Plane::Axial, peak[0]);
  const auto it = std::max_element(img.pixels.begin(), img.pixels.end());
  const Index at = std::distance(img.pixels.begin(), it);
  EXPECT_EQ(*it, 255);
  EXPECT_GE(at / img.width, rig.lo[1]);
  EXPECT_LT(at / img.width, rig.hi[1]);
  EXPECT_GE(at % img.width, rig.lo[2]);
  EXPECT_LT(at % img.width, rig.hi[2]);
}

TEST(GradCam, RangeAndShapeOnRandomModel) {
  std::mt19937_64 rng(3);
  ModelConfig c = toy_config();
  const Model m = build(c, 4);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensorf v = random_tensor<float>({8, 8, 8}, rng);
    for (std::size_t l = 1; l <= 2; ++l) {
      const GradCamMap cam = gradcam(m, v, l);
      EXPECT_EQ(cam.heatmap.shape(), (Shape{8, 8, 8}));
      EXPECT_GE(cam.heatmap.array().minCoeff(), 0.0f);
      EXPECT_LE(cam.heatmap.array().maxCoeff(), 1.0f);
      EXPECT_EQ(gradcam(m, v, l).heatmap, cam.heatmap);  // evaluation mode: no dropout draw
    }
  }
  EXPECT_THROW(gradcam(m, Tensorf({8, 8, 8}), 0), ConfigError);
  EXPECT_THROW(gradcam(m, Tensorf({8, 8, 8}), 3), ConfigError);
  EXPECT_THROW(gradcam(m, Tensorf({8, 8, 9}), 1), ShapeError);
}

TEST(Slices, PlaneConventionsAndScaling) {
  Tensorf h({2, 3, 4});
  h(1, 2, 3) = 1.0f;
  h(0, 1, 2) = 0.5f;
  const SliceImage sag = extract_slice(h, Plane::Sagittal, 3);  // fixes W
  EXPECT_EQ(sag.height, 2);
  EXPECT_EQ(sag.width, 3);
  EXPECT_EQ(sag.pixels[1 * 3 + 2], 255);
  const SliceImage cor = extract_slice(h, Plane::Coronal, 1);  // fixes H
  EXPECT_EQ(cor.height, 2);
  EXPECT_EQ(cor.width, 4);
  EXPECT_EQ(cor.pixels[0 * 4 + 2], 128);  // round(127.5)
  const SliceImage ax = extract_slice(h, Plane::Axial, 0);  // fixes D
  EXPECT_EQ(ax.height, 3);
  EXPECT_EQ(ax.width, 4);
  EXPECT_EQ(mid_index(h, Plane::Sagittal), 2);
  EXPECT_THROW(extract_slice(h, Plane::Axial, 2), ConfigError);
  EXPECT_THROW(extract_slice(h, Plane::Coronal, -1), ConfigError);

  const SliceImage black = extract_slice(Tensorf({3, 3, 3}), Plane::Axial, 1);
  EXPECT_TRUE(std::all_of(black.pixels.begin(), black.pixels.end(), [](auto p) { return p == 0; }));
}

TEST(Pgm, TwoByTwoByteExact) {
  SliceImage img;
  img.width = 2;
  img.height = 2;
  img.pixels = {0, 64, 128, 255};
  const std::vector<std::uint8_t> expected = {'P', '5', '\n', '2', ' ', '2', '\n', '2', '5', '5', '\n',
                                              0,   64,  128,  255};
  EXPECT_EQ(pgm_bytes(img), expected);
  EXPECT_EQ(pgm_bytes(img).size(), 15u);
}

TEST(Pgm, WidthPrecedesHeight) {
  SliceImage img;
  img.width = 3;
  img.height = 2;
  img.pixels = {1, 2, 3, 4, 5, 6};
  const auto b = pgm_bytes(img);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 11), "P5\n3 2\n255\n");
  img.pixels.pop_back();
  EXPECT_THROW(pgm_bytes(img), ShapeError);
}

TEST(Pgm, FileMatchesBytesAndUnwritablePathFails) {
  SliceImage img;
  img.width = 4;
  img.height = 1;
  img.pixels = {9, 8, 7, 6};
  const fs::path p = fs::temp_directory_path() / ("volage_pgm_" + std::to_string(::getpid()) + ".pgm");
  write_image(img, p);
  std::ifstream in(p, std::ios::binary);
  const std::vector<std::uint8_t> got((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(got, pgm_bytes(img));
  fs::remove(p);
  EXPECT_THROW(write_image(img, "/nonexistent-dir/x.pgm"), IoError);
}
