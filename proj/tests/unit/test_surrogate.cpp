#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "emask/surrogate.hpp"
#include "toy_experiment.hpp"

namespace emask {
namespace {

namespace fs = std::filesystem;

SurrogateModel fresh_model(uint64_t seed) {
  SurrogateModel m;
  m.id = "m";
  m.params = init_embedder(m.arch, seed);
  return m;
}

TEST(Embed, RowsHaveUnitNorm) {
  auto m = fresh_model(3);
  auto x = torch::rand({5, 3, 32, 32}) * 2 - 1;
  auto norms = m.embed(x).norm(2, 1);
  EXPECT_LT((norms - 1).abs().max().item<double>(), 1e-6);
}

TEST(Embed, RepeatedCallsAgree) {
  auto m = fresh_model(3);
  auto x = torch::rand({2, 3, 32, 32}) * 2 - 1;
  torch::NoGradGuard ng;
  EXPECT_TRUE(torch::equal(m.embed(x), m.embed(x)));
}

TEST(Embed, ZeroImageGivesFiniteVector) {
  auto m = fresh_model(4);
  auto e = m.embed(torch::zeros({1, 3, 32, 32}));
  EXPECT_TRUE(torch::isfinite(e).all().item<bool>());
}

TEST(Embed, WrongShapeThrows) {
  auto m = fresh_model(4);
  EXPECT_THROW(m.embed(torch::zeros({1, 1, 32, 32})), Error);
}

TEST(Cosine, Examples) {
  auto v = torch::tensor({0.3, -1.2, 2.0}, torch::kFloat64);
  EXPECT_NEAR(emask::cosine_similarity(v, v).item<double>(), 1.0, 1e-12);
  EXPECT_NEAR(emask::cosine_similarity(v, -v).item<double>(), -1.0, 1e-12);
  auto a = torch::tensor({1.0, 0.0}, torch::kFloat64);
  auto b = torch::tensor({0.0, 1.0}, torch::kFloat64);
  EXPECT_EQ(emask::cosine_similarity(a, b).item<double>(), 0.0);
}

TEST(Cosine, DimensionMismatchThrows) {
  EXPECT_THROW(emask::cosine_similarity(torch::ones({3}), torch::ones({4})), ShapeError);
}

TEST(Threshold, QuarterFarOnFourSims) {
  EXPECT_EQ(threshold_at_far({0.1, 0.2, 0.3, 0.9}, 0.25), 0.3);
  EXPECT_EQ(acceptance_rate({0.1, 0.2, 0.3, 0.9}, 0.3), 0.25);
}

TEST(Threshold, FarOneAcceptsAll) {
  std::vector<double> s{0.4, -0.2, 0.7};
  const double tau = threshold_at_far(s, 1.0);
  EXPECT_EQ(tau, std::nextafter(-0.2, -std::numeric_limits<double>::infinity()));
  EXPECT_EQ(acceptance_rate(s, tau), 1.0);
}

TEST(Threshold, EmptyAndBadFarThrow) {
  EXPECT_THROW(threshold_at_far({}, 0.1), ValueError);
  EXPECT_THROW(threshold_at_far({0.1}, 0.0), ValueError);
  EXPECT_THROW(threshold_at_far({0.1}, 1.5), ValueError);
}

// Smallest candidate (each sim, or just below the minimum) meeting the FAR.
double brute_threshold(const std::vector<double>& s, double far) {
  std::vector<double> cands(s);
  double lo = *std::min_element(s.begin(), s.end());
  cands.push_back(std::nextafter(lo, -std::numeric_limits<double>::infinity()));
  double best = std::numeric_limits<double>::infinity();
  for (double c : cands) {
    int above = 0;
    for (double v : s) above += v > c;
    if (above <= std::floor(far * s.size() + 1e-9) && c < best) best = c;
  }
  return best;
}

TEST(Threshold, MatchesExhaustiveSearch) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1, 1);
  std::uniform_int_distribution<int> len(1, 40), grid(0, 8);
  const double fars[] = {0.01, 0.1, 0.25, 0.5, 1.0};
  for (int t = 0; t < 300; ++t) {
    std::vector<double> s(len(rng));
    // Coarse grid forces ties.
    for (auto& v : s) v = t % 2 ? u(rng) : grid(rng) / 8.0 - 0.5;
    for (double far : fars) {
      EXPECT_EQ(threshold_at_far(s, far), brute_threshold(s, far));
    }
  }
}

TEST(Threshold, MonotoneInFar) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> s(200);
  for (auto& v : s) v = u(rng);
  double prev = 2.0;
  for (double far = 0.005; far <= 1.0; far += 0.005) {
    const double tau = threshold_at_far(s, far);
    EXPECT_LE(tau, prev);
    EXPECT_LE(acceptance_rate(s, tau), far + 1e-12);
    prev = tau;
  }
}

TEST(Pairs, EnumerationSplitsByIdentity) {
  auto sets = enumerate_pairs(torch::tensor({0, 0, 1, 1, 1}, torch::kInt64));
  EXPECT_EQ(sets.genuine.size(), 4u);
  EXPECT_EQ(sets.impostor.size(), 6u);
  EXPECT_EQ(sets.genuine.front().a, 0);
  EXPECT_EQ(sets.genuine.front().b, 1);
}

TEST(Calibrate, EmptyImpostorsThrow) {
  auto m = fresh_model(1);
  EXPECT_THROW(calibrate_threshold(m, torch::zeros({2, 3, 32, 32}), {}, {}, 0.1,
                                   ThresholdKind::kAttack),
               ValueError);
}

TEST(ToyEmbedder, ZeroEpochsIsSeededInit) {
  auto data = testkit::make_toy_data(5);
  EmbedderTrainOptions opt;
  opt.epochs = 0;
  opt.seed = 12;
  auto a = train_toy_embedder(data.embedder_train, 8, opt);
  auto b = train_toy_embedder(data.embedder_train, 8, opt);
  EXPECT_TRUE(bitwise_equal(a.params, b.params));
  EXPECT_TRUE(bitwise_equal(a.params, init_embedder(opt.arch, 12)));
  auto norms = a.embed(data.all.images.slice(0, 0, 4)).norm(2, 1);
  EXPECT_LT((norms - 1).abs().max().item<double>(), 1e-6);
}

TEST(ToyEmbedder, TrainingSeparatesIdentities) {
  auto data = testkit::make_toy_data(5);
  EmbedderTrainOptions opt;
  opt.epochs = 8;
  opt.seed = 2;
  auto m = train_toy_embedder(data.embedder_train, 8, opt);
  auto stats = measure_separation(m, data.calibration);
  EXPECT_GT(stats.margin(), 0.0);
}

TEST(ToyEmbedder, TooFewIdentitiesThrow) {
  auto data = testkit::make_toy_data(5);
  auto one = data.all.select(data.all.indices_of_identity(0));
  EXPECT_THROW(train_toy_embedder(one, 1, {}), ValueError);
}

TEST(LossHistory, StartsNeutralAndShifts) {
  LossHistory h(2);
  EXPECT_EQ(h.previous, (std::vector<double>{1.0, 1.0}));
  h.accumulate(0, 0.5);
  h.accumulate(0, 1.5);
  h.end_epoch();
  EXPECT_EQ(h.previous, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(h.before_previous, (std::vector<double>{1.0, 1.0}));
  h.accumulate(0, 2.0);
  h.end_epoch();
  EXPECT_EQ(h.previous[0], 2.0);
  EXPECT_EQ(h.before_previous[0], 1.0);
}

TEST(Manifest, RoundTripKeepsThresholdsAndWeights) {
  auto dir = fs::temp_directory_path() / "emask_manifest_test";
  fs::remove_all(dir);
  fs::create_directories(dir / "models");
  auto m = testkit::tiny_surrogate("wb0", 3);
  m.tau_attack = 0.42;
  m.tau_erasion = 0.17;
  m.checkpoint = dir / "models" / "wb0.ckpt";
  save_surrogate_checkpoint(m.checkpoint, m);
  save_manifest(dir / "models" / "manifest.json", {m});
  auto back = load_manifest(dir / "models" / "manifest.json");
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].id, "wb0");
  EXPECT_EQ(back[0].tau_attack, 0.42);
  EXPECT_EQ(back[0].tau_erasion, 0.17);
  EXPECT_TRUE(bitwise_equal(back[0].params, m.params));
  fs::remove_all(dir);
}

}  // namespace
}  // namespace emask
