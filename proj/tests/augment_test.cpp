#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "patchguard/augment.hpp"
#include "test_util.hpp"

using namespace patchguard;
using namespace patchguard::augment;

namespace {

Image random_image(std::uint64_t seed, std::size_t h = 16, std::size_t w = 16, std::size_t c = 3) {
  std::mt19937_64 rng(seed);
  return pgtest::random_array(rng, {h, w, c}, 0.0, 1.0);
}

double linf(const Image& a, const Image& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Soft, NoiseWithZeroSigmaIsIdentity) {
  Image x = random_image(1);
  EXPECT_EQ(apply_soft(x, {Kind::GaussianNoiseLight, {{"sigma", 0.0}}, 5}), x);
}

TEST(Soft, GrayscaleOfGrayIsIdentity) {
  Image x = random_image(2, 8, 8, 1);
  Image rgb({8, 8, 3});
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t c = 0; c < 3; ++c) rgb[i * 3 + c] = x[i];
  EXPECT_EQ(apply_soft(rgb, {Kind::Grayscale, {}, 0}), rgb);
}

TEST(Soft, BrightnessScalesConstantImage) {
  Image x({4, 4, 3}, 0.5);
  Image y = apply_soft(x, {Kind::ColorJitter, {{"brightness", 1.2}}, 0});
  for (double v : y.data) EXPECT_NEAR(v, 0.6, 1e-15);
}

TEST(Soft, OutOfRangeParametersRejected) {
  Image x = random_image(3);
  EXPECT_THROW(apply_soft(x, {Kind::ColorJitter, {{"brightness", 1.5}}, 0}), std::invalid_argument);
  EXPECT_THROW(apply_soft(x, {Kind::GaussianNoiseLight, {{"sigma", 0.05}}, 0}), std::invalid_argument);
  EXPECT_THROW(apply_soft(x, {Kind::ColorTint, {{"strength", 0.2}}, 0}), std::invalid_argument);
  EXPECT_THROW(apply_soft(x, {Kind::HeavyNoise, {}, 0}), std::invalid_argument);
}

TEST(Soft, ChangeIsBoundedPerKind) {
  Rng rng(42);
  for (int t = 0; t < 200; ++t) {
    Image x = random_image(100 + t, 8, 8, 3);
    auto spec = sample_transforms(rng, 1, Pool::Soft)[0];
    Image y = apply_soft(x, spec);
    EXPECT_EQ(y.shape, x.shape);
    EXPECT_LE(linf(x, y), soft_linf_bound(spec.kind) + 1e-12) << kind_name(spec.kind);
  }
}

TEST(Hard, ZeroRotationIsIdentity) {
  Image x = random_image(4);
  EXPECT_EQ(apply_hard(x, {Kind::LargeRotation, {{"degrees", 0.0}}, 0}), x);
}

TEST(Hard, HalfTurnTwiceIsIdentity) {
  Image x = random_image(5, 12, 10, 3);
  TransformSpec half{Kind::LargeRotation, {{"degrees", 180.0}}, 0};
  EXPECT_LT(linf(apply_hard(apply_hard(x, half), half), x), 1e-6);
}

TEST(Hard, HeavyNoiseIsSeededAndInRange) {
  Image x({32, 32, 3}, 0.0);
  TransformSpec s{Kind::HeavyNoise, {{"sigma", 0.5}}, 77};
  Image a = apply_hard(x, s), b = apply_hard(x, s);
  EXPECT_EQ(a, b);
  for (double v : a.data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  // Half the draws clip to 0; the positive half is a truncated half-normal.
  std::size_t zeros = 0;
  for (double v : a.data) zeros += v == 0.0;
  EXPECT_NEAR(static_cast<double>(zeros) / a.size(), 0.5, 0.05);
  s.seed = 78;
  EXPECT_NE(apply_hard(x, s), a);
}

TEST(Hard, DegenerateCropRejected) {
  Image x = random_image(6);
  EXPECT_THROW(apply_hard(x, {Kind::ExtremeCrop, {{"area", 0.0}}, 0}), std::invalid_argument);
  EXPECT_THROW(apply_hard(x, {Kind::ExtremeCrop, {{"area", 1e-6}}, 0}), std::invalid_argument);
}

TEST(Hard, AllKindsKeepShapeAndRange) {
  Rng rng(9);
  for (int t = 0; t < 100; ++t) {
    Image x = random_image(200 + t, 10, 14, 3);
    auto spec = sample_transforms(rng, 1, Pool::Hard)[0];
    Image y = apply_hard(x, spec);
    EXPECT_EQ(y.shape, x.shape);
    for (double v : y.data) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
    EXPECT_EQ(apply_hard(x, spec), y) << "seed replay " << kind_name(spec.kind);
  }
}

TEST(Sampling, EmptyAndDeterministic) {
  Rng a(1), b(1);
  EXPECT_TRUE(sample_transforms(a, 0, Pool::Soft).empty());
  EXPECT_EQ(sample_transforms(a, 5, Pool::Hard), sample_transforms(b, 5, Pool::Hard));
}

TEST(Sampling, SoftPoolGivesSoftKinds) {
  Rng rng(3);
  auto specs = sample_transforms(rng, 3, Pool::Soft);
  ASSERT_EQ(specs.size(), 3u);
  for (const auto& s : specs) EXPECT_TRUE(is_soft(s.kind));
}

TEST(Sampling, SampledSoftParamsAreAccepted) {
  Rng rng(5);
  Image x = random_image(7);
  for (const auto& s : sample_transforms(rng, 300, Pool::Soft)) EXPECT_NO_THROW(apply_soft(x, s));
}

TEST(Serialization, JsonRoundTrip) {
  Rng rng(8);
  for (const auto& s : sample_transforms(rng, 20, Pool::Hard)) {
    auto back = spec_from_json(nlohmann::json::parse(to_json(s).dump()));
    EXPECT_EQ(back, s);
  }
}
