#include <gtest/gtest.h>

#include <cmath>

#include "interp_oracle.hpp"
#include "stmixer/feature_space.hpp"
#include "stmixer/gradcheck.hpp"
#include "stmixer/rng.hpp"

using namespace stmx;

namespace {

std::vector<StageFeatureMap> random_pyramid(Rng& rng, std::size_t c, std::size_t t, std::size_t h2, std::size_t w2) {
  std::vector<StageFeatureMap> stages;
  for (int z = 2; z <= 5; ++z) {
    const std::size_t f = std::size_t{1} << (z - 2);
    stages.push_back({z, rng.normal_tensor({c, t, h2 / f, w2 / f}, 1.0)});
  }
  return stages;
}

std::vector<LateralProjection> random_lateral(Rng& rng, std::size_t c, std::size_t d, std::size_t count = 4) {
  std::vector<LateralProjection> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back({constant(rng.normal_tensor({c, d}, 0.5)), constant(rng.normal_tensor({d}, 0.5))});
  return out;
}

std::vector<LateralProjection> identity_lateral(std::size_t c) {
  Tensor eye({c, c});
  for (std::size_t i = 0; i < c; ++i) eye.at({i, i}) = 1.0;
  return std::vector<LateralProjection>(4, {constant(eye), constant(Tensor({c}))});
}

FeatureSpace4D random_space(Rng& rng, std::size_t d, std::size_t t, std::size_t h, std::size_t w) {
  FeatureSpace4D s;
  s.data = Var(rng.normal_tensor({d, t, 4, h, w}, 1.0), false);
  return s;
}

double lattice_px(std::size_t i) { return 4.0 * (static_cast<double>(i) + 0.5); }

}  // namespace

TEST(BuildFromHierarchy, OutputShape) {
  Rng rng(1);
  const auto space = build_from_hierarchy(random_pyramid(rng, 6, 4, 8, 8), random_lateral(rng, 6, 16));
  EXPECT_EQ(space.data.dims(), (Shape{16, 4, 4, 8, 8}));
  EXPECT_DOUBLE_EQ(space.frame_width(), 32.0);
}

TEST(BuildFromHierarchy, ConstantMapsGiveConstantSlices) {
  Rng rng(2);
  std::vector<StageFeatureMap> stages;
  for (int z = 2; z <= 5; ++z) {
    const std::size_t f = std::size_t{1} << (z - 2);
    stages.push_back({z, Tensor::full({3, 2, 8 / f, 8 / f}, 1.5)});
  }
  const auto space = build_from_hierarchy(stages, random_lateral(rng, 3, 5));
  const Tensor& v = space.data.value();
  for (std::size_t d = 0; d < 5; ++d)
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t s = 0; s < 4; ++s)
        for (std::size_t i = 0; i < 8; ++i)
          for (std::size_t j = 0; j < 8; ++j) EXPECT_DOUBLE_EQ(v.at({d, t, s, i, j}), v.at({d, t, s, 0, 0}));
}

TEST(BuildFromHierarchy, NearestUpsampleIndexArithmetic) {
  Rng rng(3);
  const auto stages = random_pyramid(rng, 4, 2, 8, 8);
  const auto lateral = random_lateral(rng, 4, 6);
  const auto space = build_from_hierarchy(stages, lateral);
  // Project stage 3 by hand and compare with the z=3 slice at (2i + a, 2j + b).
  const Tensor& src = stages[1].data;
  const Tensor& w = lateral[1].weight.value();
  const Tensor& b = lateral[1].bias.value();
  for (std::size_t d = 0; d < 6; ++d)
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
          double expected = b[d];
          for (std::size_t c = 0; c < 4; ++c) expected += src.at({c, t, i, j}) * w.at({c, d});
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t e = 0; e < 2; ++e)
              EXPECT_NEAR(space.data.value().at({d, t, 1, 2 * i + a, 2 * j + e}), expected, 1e-12);
        }
}

TEST(BuildFromHierarchy, SingleVoxelLandsOnRescaledIndicesOnly) {
  std::vector<StageFeatureMap> stages;
  for (int z = 2; z <= 5; ++z) {
    const std::size_t f = std::size_t{1} << (z - 2);
    stages.push_back({z, Tensor({2, 1, 8 / f, 8 / f})});
  }
  stages[2].data.at({1, 0, 1, 0}) = 7.0;  // stage 4: factor 4 -> rows 4..7, cols 0..3
  const auto space = build_from_hierarchy(stages, identity_lateral(2));
  const Tensor& v = space.data.value();
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t s = 0; s < 4; ++s)
      for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
          const bool hit = c == 1 && s == 2 && i >= 4 && i < 8 && j < 4;
          EXPECT_EQ(v.at({c, 0, s, i, j}), hit ? 7.0 : 0.0);
        }
}

TEST(BuildFromHierarchy, InconsistentPyramidThrows) {
  Rng rng(4);
  auto stages = random_pyramid(rng, 3, 2, 8, 8);
  stages[3].data = rng.normal_tensor({3, 2, 2, 2}, 1.0);
  EXPECT_THROW(build_from_hierarchy(stages, random_lateral(rng, 3, 4)), ShapeError);
}

TEST(BuildFromHierarchy, ScaleSubset) {
  Rng rng(5);
  auto all = random_pyramid(rng, 3, 2, 8, 8);
  const std::vector<StageFeatureMap> last_two{all[2], all[3]};
  const auto space = build_from_hierarchy(last_two, random_lateral(rng, 3, 4, 2));
  EXPECT_EQ(space.data.dims(), (Shape{4, 2, 2, 8, 8}));
  EXPECT_EQ(space.levels, (std::vector<double>{4, 5}));
}

namespace {

std::vector<PlainHead> plain_heads(Rng& rng, std::size_t c, std::size_t d) {
  std::vector<PlainHead> heads;
  heads.push_back({PlainHead::Kind::kDeconv, 4, constant(rng.normal_tensor({4, 4, c, d}, 0.3)), constant(rng.normal_tensor({d}, 0.1))});
  heads.push_back({PlainHead::Kind::kDeconv, 2, constant(rng.normal_tensor({2, 2, c, d}, 0.3)), constant(rng.normal_tensor({d}, 0.1))});
  heads.push_back({PlainHead::Kind::kConv, 1, constant(rng.normal_tensor({1, 1, c, d}, 0.3)), constant(rng.normal_tensor({d}, 0.1))});
  heads.push_back({PlainHead::Kind::kConv, 2, constant(rng.normal_tensor({2, 2, c, d}, 0.3)), constant(rng.normal_tensor({d}, 0.1))});
  return heads;
}

}  // namespace

TEST(BuildFromPlain, ShapeMatchesHierarchy) {
  Rng rng(6);
  const auto plain = build_from_plain(rng.normal_tensor({5, 4, 2, 2}, 1.0), plain_heads(rng, 5, 16));
  const auto hier = build_from_hierarchy(random_pyramid(rng, 6, 4, 8, 8), random_lateral(rng, 6, 16));
  EXPECT_EQ(plain.data.dims(), hier.data.dims());
}

TEST(BuildFromPlain, IdentityStrideOneHeadReproducesInput) {
  Rng rng(7);
  const Tensor input = rng.normal_tensor({3, 2, 2, 2}, 1.0);
  auto heads = plain_heads(rng, 3, 3);
  Tensor eye({1, 1, 3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at({0, 0, i, i}) = 1.0;
  heads[2].kernel = constant(eye);
  heads[2].bias = constant(Tensor({3}));
  const auto space = build_from_plain(input, heads);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j)
          EXPECT_EQ(space.data.value().at({c, t, 2, i, j}), input.at({c, t, i / 4, j / 4}));
}

TEST(BuildFromPlain, StrideTwoHeadHalvesExtent) {
  Rng rng(8);
  const auto heads = plain_heads(rng, 2, 4);
  const Var out = conv_strided_hw(constant(rng.normal_tensor({2, 1, 4, 6}, 1.0)), heads[3].kernel, heads[3].bias, 2);
  EXPECT_EQ(out.dims(), (Shape{4, 1, 2, 3}));
}

TEST(BuildFromPlain, DeconvMatchesDirectFormula) {
  Rng rng(9);
  const Tensor x = rng.normal_tensor({2, 1, 2, 3}, 1.0);
  const Tensor k = rng.normal_tensor({2, 2, 2, 3}, 1.0);
  const Tensor b = rng.normal_tensor({3}, 1.0);
  const Var out = conv_transpose_hw(constant(x), constant(k), constant(b), 2);
  ASSERT_EQ(out.dims(), (Shape{3, 1, 4, 6}));
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        double e = b[o];
        for (std::size_t c = 0; c < 2; ++c) e += x.at({c, 0, i / 2, j / 2}) * k.at({i % 2, j % 2, c, o});
        EXPECT_NEAR(out.value().at({o, 0, i, j}), e, 1e-12);
      }
}

TEST(BuildFromPlain, OddExtentForStrideTwoThrows) {
  Rng rng(10);
  EXPECT_THROW(build_from_plain(rng.normal_tensor({2, 1, 3, 3}, 1.0), plain_heads(rng, 2, 4)), ShapeError);
}

TEST(ReadPoint, LatticePointIsExact) {
  Rng rng(11);
  const auto space = random_space(rng, 6, 2, 5, 7);
  const Tensor v = read_point(space, 1, lattice_px(3), lattice_px(2), 4.0);
  for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(v[c], space.data.value().at({c, 1, 2, 2, 3}));
}

TEST(ReadPoint, MidpointAveragesNeighbours) {
  Rng rng(12);
  const auto space = random_space(rng, 3, 1, 4, 4);
  const Tensor v = read_point(space, 0, (lattice_px(1) + lattice_px(2)) / 2, lattice_px(3), 3.0);
  for (std::size_t c = 0; c < 3; ++c) {
    const double a = space.data.value().at({c, 0, 1, 3, 1});
    const double b = space.data.value().at({c, 0, 1, 3, 2});
    EXPECT_NEAR(v[c], 0.5 * (a + b), 1e-15);
  }
}

TEST(ReadPoint, MatchesBruteForceOracle) {
  Rng rng(13);
  const auto space = random_space(rng, 4, 3, 6, 5);
  for (int i = 0; i < 300; ++i) {
    const std::size_t t = rng.below(3);
    const double x = rng.uniform(-20.0, 40.0), y = rng.uniform(-20.0, 44.0), z = rng.uniform(0.5, 6.5);
    const Tensor v = read_point(space, t, x, y, z);
    const auto expected = stmx::testing::brute_force_read(space, t, x, y, z);
    for (std::size_t c = 0; c < 4; ++c) ASSERT_NEAR(v[c], expected[c], 1e-10);
  }
}

TEST(ReadPoint, FarOutsideReturnsClampedBorder) {
  Rng rng(14);
  const auto space = random_space(rng, 2, 1, 4, 4);
  const Tensor far = read_point(space, 0, -1e6, 1e6, 100.0);
  for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(far[c], space.data.value().at({c, 0, 3, 3, 0}));
}

TEST(ReadPoint, LinearInFeatures) {
  Rng rng(15);
  const auto a = random_space(rng, 3, 1, 4, 4);
  const auto b = random_space(rng, 3, 1, 4, 4);
  FeatureSpace4D mix;
  Tensor combo(a.data.dims());
  for (std::size_t i = 0; i < combo.size(); ++i) combo[i] = 2.0 * a.data.value()[i] - 0.5 * b.data.value()[i];
  mix.data = constant(combo);
  for (int k = 0; k < 20; ++k) {
    const double x = rng.uniform(0, 16), y = rng.uniform(0, 16), z = rng.uniform(2, 5);
    const Tensor va = read_point(a, 0, x, y, z), vb = read_point(b, 0, x, y, z), vm = read_point(mix, 0, x, y, z);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(vm[c], 2.0 * va[c] - 0.5 * vb[c], 1e-12);
  }
}

TEST(ReadPoint, NonFiniteCoordinateThrows) {
  Rng rng(16);
  const auto space = random_space(rng, 2, 1, 4, 4);
  EXPECT_THROW(read_point(space, 0, std::nan(""), 1.0, 3.0), InputError);
  EXPECT_THROW(read_point(space, 0, 1.0, INFINITY, 3.0), InputError);
}

TEST(SampleFeatures, AgreesWithReadPointPerGroup) {
  Rng rng(17);
  const auto space = random_space(rng, 8, 2, 4, 4);
  const Tensor pts = rng.uniform_tensor({3, 2, 2, 5, 3}, 0.0, 16.0);
  Tensor pts2 = pts;
  for (std::size_t i = 0; i < pts2.size(); i += 3) pts2[i + 2] = 2.0 + pts[i + 2] * 0.18;
  const Var out2 = sample_features(space, constant(pts2));
  ASSERT_EQ(out2.dims(), (Shape{3, 2, 2, 5, 4}));
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t g = 0; g < 2; ++g)
        for (std::size_t p = 0; p < 5; ++p) {
          const Tensor ref = read_point(space, t, pts2.at({n, t, g, p, 0}), pts2.at({n, t, g, p, 1}),
                                        pts2.at({n, t, g, p, 2}), g * 4, g * 4 + 4);
          for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out2.value().at({n, g, t, p, c}), ref[c]);
        }
}

TEST(SampleFeatures, GradientsWrtFeaturesAndCoordinates) {
  Rng rng(18);
  FeatureSpace4D space;
  space.data = Var(rng.normal_tensor({4, 2, 4, 4, 4}, 1.0), true);
  // Keep coordinates off lattice lines so the piecewise-linear read is smooth at the probe.
  Tensor pts({2, 2, 2, 3, 3});
  for (std::size_t i = 0; i < pts.size(); i += 3) {
    pts[i] = 4.0 * (rng.below(3) + 0.5) + rng.uniform(0.4, 3.6);
    pts[i + 1] = 4.0 * (rng.below(3) + 0.5) + rng.uniform(0.4, 3.6);
    pts[i + 2] = 2.0 + rng.below(3) + rng.uniform(0.1, 0.9);
  }
  Var points(pts, true);
  const Var weights = constant(rng.normal_tensor({2, 2, 2, 3, 2}, 1.0));
  auto f = [&] { return sum(mul(sample_features(space, points), weights)); };
  const auto report = check_gradients(f, {{"features", space.data}, {"points", points}}, 1e-5, 1e-6);
  EXPECT_TRUE(report.passed()) << report.max_error;
}

TEST(SampleFeatures, ClampedCoordinatesHaveZeroGradient) {
  Rng rng(19);
  const auto space = random_space(rng, 2, 1, 4, 4);
  Var points(Tensor({1, 1, 1, 1, 3}, {-50.0, 100.0, 9.0}), true);
  sum(sample_features(space, points)).backward();
  for (double g : points.grad().data()) EXPECT_EQ(g, 0.0);
}
