#include <gtest/gtest.h>

#include <random>

#include "patchguard/evalkit.hpp"
#include "test_util.hpp"

using namespace patchguard;
using namespace patchguard::evalkit;
using nd::Array;

namespace {

/// O(n^2) pairwise oracle.
double pairwise_auroc(const std::vector<double>& s, const std::vector<int>& l) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] == 1 && l[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

vit::ViTConfig tiny_config() {
  vit::ViTConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.dim = 8;
  c.depth = 1;
  c.heads = 2;
  c.mlp_ratio = 2;
  return c;
}

std::vector<datasets::TestSample> tiny_testset(std::size_t n = 12) {
  datasets::SynthSpec s;
  s.image_size = 16;
  s.n_train = 1;
  s.n_test = n;
  s.seed = 9;
  // 16 px images make the smallest scratches too thin; blobs always fit
  s.defects = {datasets::Defect::Blob};
  return datasets::make_synthetic(s).test;
}

}  // namespace

TEST(Auroc, SeparatedAndTiedExtremes) {
  EXPECT_EQ(auroc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}), 1.0);
  EXPECT_EQ(auroc({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1}), 0.0);
  EXPECT_EQ(auroc({0.5, 0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1, 1}), 0.5);
}

TEST(Auroc, MatchesPairwiseOracleIncludingTies) {
  std::mt19937_64 g(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + g() % 199;
    const bool heavy_ties = trial % 2 == 0;
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = heavy_ties ? static_cast<double>(g() % 4) : std::uniform_real_distribution<double>(0, 1)(g);
      l[i] = static_cast<int>(g() % 2);
    }
    l[0] = 0;
    l[1] = 1;
    EXPECT_NEAR(auroc(s, l), pairwise_auroc(s, l), 1e-12);
  }
}

TEST(Auroc, NegationComplementsAndMonotoneInvariance) {
  std::mt19937_64 g(2);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(40), neg(40), mono(40);
    std::vector<int> l(40);
    for (std::size_t i = 0; i < 40; ++i) {
      s[i] = u(g);
      neg[i] = -s[i];
      mono[i] = std::exp(2.0 * s[i]) + 5.0;
      l[i] = i % 3 == 0;
    }
    EXPECT_NEAR(auroc(s, l) + auroc(neg, l), 1.0, 1e-12);
    EXPECT_EQ(auroc(s, l), auroc(mono, l));
  }
}

TEST(Auroc, RejectsBadInput) {
  EXPECT_THROW(auroc({0.1, 0.2}, {1, 1}), std::invalid_argument);
  EXPECT_THROW(auroc({0.1, 0.2}, {0, 2}), std::invalid_argument);
  EXPECT_THROW(auroc({0.1}, {0, 1}), std::invalid_argument);
}

TEST(Spearman, KnownValues) {
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0, 1e-12);
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {4, 1, 0, -7}), -1.0, 1e-12);
  EXPECT_NEAR(spearman({1, 2, 3}, {1, 3, 2}), 0.5, 1e-12);
  EXPECT_EQ(spearman({1, 2, 3}, {5, 5, 5}), 0.0);
}

TEST(Evaluate, NoAttackLeavesAdversarialFieldsEmpty) {
  vit::ViTDetector model(tiny_config(), 1);
  auto test = tiny_testset();
  auto r = evaluate(model, test);
  EXPECT_FALSE(r.image_auroc_adv);
  EXPECT_FALSE(r.pixel_auroc_adv);
  EXPECT_FALSE(to_json(r).contains("image_auroc_adv"));
  EXPECT_EQ(r.images.size(), test.size());
  EXPECT_GE(r.image_auroc_clean, 0.0);
  EXPECT_LE(r.pixel_auroc_clean, 100.0);
  EXPECT_EQ(render_table(r).find(" / "), std::string::npos);
}

TEST(Evaluate, ZeroBudgetAttackReproducesCleanExactly) {
  vit::ViTDetector model(tiny_config(), 2);
  auto test = tiny_testset();
  attacks::AttackSpec zero{.epsilon = 0.0, .iters = 5, .random_start = true};
  auto r = evaluate(model, test, zero, {.batch = 5});
  EXPECT_EQ(*r.image_auroc_adv, r.image_auroc_clean);
  EXPECT_EQ(*r.pixel_auroc_adv, r.pixel_auroc_clean);
  for (const auto& im : r.images) EXPECT_EQ(*im.score_adv, im.score_clean);
  const auto table = render_table(r);
  EXPECT_NE(table.find("Clean / Adversarial"), std::string::npos);
  EXPECT_NE(table.find(cell(r.image_auroc_clean, r.image_auroc_adv)), std::string::npos);
}

TEST(Evaluate, AttackDoesNotImproveSeparation) {
  vit::ViTDetector model(tiny_config(), 3);
  auto test = tiny_testset();
  attacks::AttackSpec pgd{.epsilon = 8.0 / 255, .iters = 10};
  auto r = evaluate(model, test, pgd);
  EXPECT_LE(*r.pixel_auroc_adv, r.pixel_auroc_clean + 1e-9);
  EXPECT_LE(*r.image_auroc_adv, r.image_auroc_clean + 1e-9);
}

TEST(Evaluate, OracleDetectorIsPerfect) {
  auto test = tiny_testset();
  Outputs oracle;
  for (const auto& s : test) {
    oracle.image_scores.push_back(s.label);
    oracle.maps.push_back(s.mask);
  }
  auto r = assemble(test, oracle, &oracle, &oracle);
  EXPECT_EQ(r.image_auroc_clean, 100.0);
  EXPECT_EQ(r.pixel_auroc_clean, 100.0);
  EXPECT_EQ(*r.image_auroc_adv, 100.0);
}

TEST(Vulnerability, QuantileBinsPartitionEvenly) {
  auto bins = quantile_bins({5, 1, 4, 2, 3, 9, 0}, 3);
  std::vector<std::size_t> seen;
  for (auto& b : bins) {
    EXPECT_GE(b.size(), 2u);
    EXPECT_LE(b.size(), 3u);
    seen.insert(seen.end(), b.begin(), b.end());
  }
  std::sort(seen.begin(), seen.end());
  EXPECT_EQ(seen, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(bins[0], (std::vector<std::size_t>{6, 1, 3}));
  auto flat = quantile_bins(std::vector<double>(10, 1.0), 5);
  for (auto& b : flat) EXPECT_EQ(b.size(), 2u);
}

TEST(Vulnerability, SingleClassBinsAreMerged) {
  auto test = tiny_testset(10);
  std::vector<std::size_t> good, bad;
  for (std::size_t i = 0; i < test.size(); ++i) (test[i].label ? bad : good).push_back(i);
  std::vector<std::vector<std::size_t>> bins = {{good[0], good[1]}, {good[2], bad[0]}, {good[3], good[4]}};
  std::vector<std::string> warnings;
  auto merged = merge_single_class_bins(bins, test, warnings);
  ASSERT_EQ(bins.size(), 1u);
  EXPECT_EQ(bins[0].size(), 6u);
  EXPECT_TRUE(merged[0]);
  EXPECT_EQ(warnings.size(), 2u);
}

TEST(Vulnerability, ZeroBudgetGivesFlatProfileAndConstantDegreesAreFlagged) {
  vit::ViTDetector model(tiny_config(), 4);
  // zero query projections give uniform attention everywhere
  for (auto& p : model.parameters())
    if (p.name.find(".q.") != std::string::npos) {
      nd::Var handle = p.var;
      auto& v = handle.mutable_value();
      std::fill(v.data.begin(), v.data.end(), 0.0);
    }
  auto test = tiny_testset(30);
  auto prof = vulnerability_by_attention(model, test, {.epsilon = 0.0, .iters = 3}, 5);
  EXPECT_TRUE(prof.uninformative);
  std::size_t members = 0;
  for (const auto& c : prof.clusters) {
    EXPECT_EQ(c.vulnerability, 0.0);
    members += c.members.size();
  }
  EXPECT_EQ(members, test.size());
  const auto csv = to_csv(prof);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "cluster_id,mean_attention_degree,auroc_clean,auroc_adv,vulnerability");
}

TEST(Vulnerability, RejectsTooFewClusters) {
  vit::ViTDetector model(tiny_config(), 4);
  EXPECT_THROW(vulnerability_by_attention(model, tiny_testset(), {}, 1), std::invalid_argument);
}

TEST(SpectralBound, IdentityIsExactlyOne) {
  Array eye({6, 6}, 0.0);
  for (std::size_t i = 0; i < 6; ++i) eye[i * 7] = 1.0;
  auto b = spectral_bound(eye);
  EXPECT_EQ(b.value, 1.0);
  EXPECT_TRUE(b.full_rank);
}

TEST(SpectralBound, UniformMatrixIsRankOne) {
  auto b = spectral_bound(Array({5, 5}, 0.2));
  EXPECT_EQ(b.rank, 1u);
  EXPECT_FALSE(b.full_rank);
  EXPECT_NEAR(b.value, 1.0, 1e-12);
}

TEST(SpectralBound, RandomStochasticMatricesAreAtLeastOne) {
  std::mt19937_64 g(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    Array s({16, 16});
    for (std::size_t r = 0; r < 16; ++r) {
      double sum = 0;
      for (std::size_t c = 0; c < 16; ++c) sum += s[r * 16 + c] = std::pow(u(g), 1 + trial % 5);
      for (std::size_t c = 0; c < 16; ++c) s[r * 16 + c] /= sum;
    }
    ASSERT_GE(spectral_bound(s).value, 1.0 - 1e-9);
  }
}

TEST(SpectralBound, RejectsNonStochastic) {
  EXPECT_THROW(spectral_bound(Array({2, 2}, 0.4)), std::invalid_argument);
  EXPECT_THROW(spectral_bound(Array({2, 2}, {1.5, -0.5, 0.5, 0.5})), std::invalid_argument);
  EXPECT_THROW(spectral_bound(Array({2, 3}, 0.5)), nd::ShapeError);
}

TEST(Heatmap, WritesSideBySide) {
  auto path = std::filesystem::temp_directory_path() / "pg_heatmap.png";
  write_heatmap(path, Image({8, 8, 3}, 0.3), Mask({8, 8}, 0.0), Array({8, 8}, 1.0));
  auto back = io::read_png(path);
  EXPECT_EQ(back.shape, (nd::Shape{8, 24, 3}));
  std::filesystem::remove(path);
}
