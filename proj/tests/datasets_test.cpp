#include <gtest/gtest.h>

#include <filesystem>

#include "patchguard/datasets.hpp"
#include "patchguard/evalkit.hpp"

using namespace patchguard;
using namespace patchguard::datasets;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

SynthSpec small_spec(Texture t = Texture::ValueNoise, std::uint64_t seed = 1) {
  SynthSpec s;
  s.texture = t;
  s.image_size = 32;
  s.n_train = 6;
  s.n_test = 9;
  s.seed = seed;
  return s;
}

}  // namespace

TEST(Synthetic, SeedReplayIsIdentical) {
  for (auto t : {Texture::Stripes, Texture::Checker, Texture::ValueNoise}) {
    auto a = make_synthetic(small_spec(t, 5));
    auto b = make_synthetic(small_spec(t, 5));
    ASSERT_EQ(a.train, b.train);
    ASSERT_EQ(a.test.size(), b.test.size());
    for (std::size_t i = 0; i < a.test.size(); ++i) {
      EXPECT_EQ(a.test[i].image, b.test[i].image);
      EXPECT_EQ(a.test[i].mask, b.test[i].mask);
      EXPECT_EQ(a.test[i].name, b.test[i].name);
    }
    EXPECT_NE(make_synthetic(small_spec(t, 6)).train[0], a.train[0]);
  }
}

TEST(Synthetic, MasksAndValuesRespectContracts) {
  for (auto t : {Texture::Stripes, Texture::Checker, Texture::ValueNoise}) {
    auto spec = small_spec(t, 2);
    spec.image_size = 64;
    spec.n_test = 60;
    auto d = make_synthetic(spec);
    std::size_t anomalous = 0;
    for (const auto& im : d.train)
      for (double v : im.data) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
    for (const auto& s : d.test) {
      for (double v : s.image.data) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
      for (double v : s.mask.data) ASSERT_TRUE(v == 0.0 || v == 1.0);
      const double area = static_cast<double>(mask_count(s.mask)) / (64.0 * 64.0);
      if (s.label) {
        ++anomalous;
        EXPECT_GE(area, kMinDefectArea) << s.name;
        EXPECT_LE(area, kMaxDefectArea) << s.name;
        EXPECT_NE(s.name.rfind("good/", 0), 0u);
      } else {
        EXPECT_EQ(area, 0.0);
        EXPECT_EQ(s.name.rfind("good/", 0), 0u);
      }
    }
    EXPECT_EQ(anomalous, 30u);
  }
}

TEST(Synthetic, MeanDifferenceBaselineDetectsDefects) {
  SynthSpec spec;
  spec.n_train = 50;
  spec.n_test = 60;
  spec.seed = 3;
  auto d = make_synthetic(spec);
  auto maps = mean_diff_maps(d);
  const double a = evalkit::pixel_auroc(maps, d.test, evalkit::all_indices(d.test.size()));
  EXPECT_GT(a, 0.7);
  EXPECT_LT(a, 0.999);
}

TEST(Folder, RoundTripIsBitExact) {
  auto dir = fresh_dir("pg_ds_roundtrip");
  auto d = make_synthetic(small_spec(Texture::Stripes, 4));
  save_folder(d, dir, to_json(small_spec(Texture::Stripes, 4)));
  auto back = load_folder(dir);
  EXPECT_EQ(back.train, d.train);
  EXPECT_EQ(back.train_names, d.train_names);
  ASSERT_EQ(back.test.size(), d.test.size());
  for (std::size_t i = 0; i < d.test.size(); ++i) {
    EXPECT_EQ(back.test[i].name, d.test[i].name);
    EXPECT_EQ(back.test[i].image, d.test[i].image);
    EXPECT_EQ(back.test[i].mask, d.test[i].mask);
    EXPECT_EQ(back.test[i].label, d.test[i].label);
  }
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  fs::remove_all(dir);
}

TEST(Folder, MissingMaskNamesTheFile) {
  auto dir = fresh_dir("pg_ds_missing");
  io::write_png(dir / "train" / "good" / "a.png", Image({8, 8, 3}, 0.5));
  io::write_png(dir / "test" / "crack" / "007.png", Image({8, 8, 3}, 0.5));
  try {
    load_folder(dir);
    FAIL() << "expected an error";
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("007_mask.png"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(Folder, EmptyGoodFolderWarnsAndMasksBinarize) {
  auto dir = fresh_dir("pg_ds_nogood");
  io::write_png(dir / "train" / "good" / "a.png", Image({8, 8, 3}, 0.5));
  fs::create_directories(dir / "test" / "good");
  io::write_png(dir / "test" / "crack" / "000.png", Image({8, 8, 3}, 0.25));
  Mask m({8, 8}, 0.0);
  m[9] = 1.0;
  m[10] = 0.6;  // stored as 153, binarized back to 1
  m[11] = 0.4;  // stored as 102, binarized to 0
  io::write_png(dir / "ground_truth" / "crack" / "000_mask.png", m);
  auto d = load_folder(dir);
  ASSERT_EQ(d.test.size(), 1u);
  EXPECT_EQ(d.test[0].label, 1);
  EXPECT_EQ(d.test[0].mask[9], 1.0);
  EXPECT_EQ(d.test[0].mask[10], 1.0);
  EXPECT_EQ(d.test[0].mask[11], 0.0);
  EXPECT_EQ(mask_count(d.test[0].mask), 2u);
  ASSERT_EQ(d.warnings.size(), 1u);
  fs::remove_all(dir);
}

TEST(Folder, ResizesImagesBilinearAndMasksNearest) {
  auto dir = fresh_dir("pg_ds_resize");
  io::write_png(dir / "train" / "good" / "a.png", Image({16, 16, 3}, 0.5));
  io::write_png(dir / "test" / "good" / "b.png", Image({16, 16, 3}, 0.5));
  io::write_png(dir / "test" / "hole" / "c.png", Image({16, 16, 3}, 0.5));
  Mask m({16, 16}, 0.0);
  for (std::size_t i = 0; i < 8 * 16; ++i) m[i] = 1.0;
  io::write_mask(dir / "ground_truth" / "hole" / "c_mask.png", m);
  auto d = load_folder(dir, 8);
  EXPECT_EQ(d.train[0].shape, (nd::Shape{8, 8, 3}));
  const auto& anomalous = d.test[1];
  EXPECT_EQ(anomalous.name, "hole/c");
  EXPECT_EQ(anomalous.mask.shape, (nd::Shape{8, 8}));
  EXPECT_EQ(mask_count(anomalous.mask), 32u);
  fs::remove_all(dir);
}

TEST(Folder, MissingRootIsAnError) {
  EXPECT_THROW(load_folder("/nonexistent/pg_dataset"), DatasetError);
}

TEST(SynthSpec, Validation) {
  SynthSpec s;
  s.image_size = 4;
  EXPECT_THROW(make_synthetic(s), std::invalid_argument);
  EXPECT_THROW(texture_from_name("plaid"), std::invalid_argument);
  EXPECT_EQ(defect_from_name("patch-swap"), Defect::PatchSwap);
}
