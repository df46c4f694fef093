#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "emask/meta_attack.hpp"
#include "toy_experiment.hpp"

namespace emask {
namespace {

TEST(Split, PrimaryAndAuxiliaries) {
  auto s = make_split(3, 1);
  EXPECT_EQ(s.primary, 1);
  EXPECT_EQ(s.auxiliary, (std::vector<int>{0, 2}));
  EXPECT_THROW(make_split(1, 0), ValueError);
  EXPECT_THROW(make_split(3, 3), ValueError);
}

TEST(InnerUpdate, ZeroGradientKeepsTheta) {
  ParamSet theta;
  theta.add("a", torch::randn({3, 2}, torch::kFloat64));
  auto out = inner_update(theta, {torch::zeros({3, 2}, torch::kFloat64)}, 0.1);
  EXPECT_TRUE(bitwise_equal(out, theta));
}

TEST(InnerUpdate, ScalarStep) {
  ParamSet theta;
  theta.add("t", torch::tensor(1.0, torch::kFloat64));
  auto out = inner_update(theta, {torch::tensor(2.0, torch::kFloat64)}, 0.1);
  EXPECT_NEAR(out.at("t").item<double>(), 0.8, 1e-15);
}

TEST(InnerUpdate, SecondOrderDerivativeOfQuadratic) {
  auto t = torch::tensor(1.0, torch::kFloat64).requires_grad_(true);
  ParamSet theta;
  theta.add("t", t);
  auto g = torch::autograd::grad({t * t}, {t}, {}, true, true);
  auto tp = inner_update(theta, g, 0.1).at("t");
  auto d = torch::autograd::grad({tp}, {t});
  EXPECT_NEAR(d[0].item<double>(), 0.8, 1e-15);
  // Finite difference of the inner map.
  auto map = [](double v) { return v - 0.1 * 2 * v; };
  EXPECT_NEAR((map(1 + 1e-6) - map(1 - 1e-6)) / 2e-6, 0.8, 1e-9);
}

TEST(InnerUpdate, MismatchThrows) {
  ParamSet theta;
  theta.add("a", torch::zeros({2}));
  EXPECT_THROW(inner_update(theta, {}, 0.1), ShapeError);
  EXPECT_THROW(inner_update(theta, {torch::zeros({3})}, 0.1), ShapeError);
}

TEST(Weights, SymmetricRatesGiveExpThird) {
  for (double r : {0.3, 1.0, 7.0}) {
    auto w = adaptive_weights({r, r, r}, {1.0, 1.0, 1.0});
    for (double v : w.w) EXPECT_NEAR(v, 1.3956124250860895, 1e-12);
  }
}

TEST(Weights, TwoModelExample) {
  auto w = adaptive_weights({std::log(2.0), 0.0}, {1.0, 1.0});
  EXPECT_NEAR(w.softmax[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(w.w[0], 1.9477340410546757, 1e-12);
  EXPECT_NEAR(w.w[1], 1.3956124250860895, 1e-12);
}

TEST(Weights, BootstrapHistoryIsSymmetric) {
  auto w = adaptive_weights(LossHistory(3));
  for (double r : w.rates) EXPECT_EQ(r, 1.0);
  for (double v : w.w) EXPECT_NEAR(v, std::exp(1.0 / 3.0), 1e-12);
}

TEST(Weights, InvariantToCommonScale) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  std::vector<double> a(4), b(4), a2(4), b2(4);
  for (int i = 0; i < 4; ++i) {
    a[i] = u(rng);
    b[i] = u(rng);
    a2[i] = 5 * a[i];
    b2[i] = 5 * b[i];
  }
  auto w1 = adaptive_weights(a, b);
  auto w2 = adaptive_weights(a2, b2);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(w1.w[i], w2.w[i], 1e-12);
}

TEST(Weights, BoundedAndGuarded) {
  auto w = adaptive_weights({0.5, 2.0, 1.0}, {0.0, 1.0, 1e-9});
  EXPECT_EQ(w.rates[0], 1.0);
  EXPECT_EQ(w.rates[2], 1.0);
  for (double v : w.w) {
    EXPECT_GT(v, 1.0);
    EXPECT_LT(v, std::exp(1.0));
  }
  EXPECT_THROW(adaptive_weights({1.0}, {1.0, 2.0}), ValueError);
}

TEST(AdversarialLoss, Examples) {
  auto z = torch::zeros({}, torch::kFloat64);
  auto one = torch::ones({}, torch::kFloat64);
  EXPECT_EQ(adversarial_loss({z, z}, {z, z}, 0.2).item<double>(), 0.2);
  EXPECT_EQ(adversarial_loss({one, one}, {one, one}, 0.0).item<double>(), 1.0);
  auto a = torch::tensor(0.3, torch::kFloat64);
  auto b = torch::tensor(0.9, torch::kFloat64);
  EXPECT_NEAR(adversarial_loss({a, b}, {b, a}, 0.0).item<double>(), 0.6, 1e-15);
  EXPECT_THROW(adversarial_loss({a}, {a, b}, 0.0), ShapeError);
}

struct Ensemble {
  std::vector<SurrogateModel> models;
  ImageTensor x, target;

  explicit Ensemble(int k) {
    for (int i = 0; i < k; ++i) models.push_back(testkit::tiny_surrogate("s" + std::to_string(i), 10 + i));
    auto gen = make_generator(99);
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    x = torch::rand({2, 3, 8, 8}, gen, opts) * 2 - 1;
    target = torch::rand({1, 3, 8, 8}, gen, opts) * 2 - 1;
  }
};

TEST(PrimaryLoss, MatchesOneMinusCosine) {
  Ensemble e(1);
  const auto& m = e.models[0];
  EXPECT_NEAR(primary_loss(m, e.target, e.target).item<double>(), 0.0, 1e-12);
  auto cos = emask::cosine_similarity(m.embed(e.target), m.embed(e.x));
  EXPECT_NEAR(primary_loss(m, e.x, e.target).item<double>(), (1 - cos).mean().item<double>(), 1e-12);
  auto l = primary_loss(m, e.x, e.target).item<double>();
  EXPECT_GE(l, 0.0);
  EXPECT_LE(l, 2.0);
}

TEST(AuxiliaryLoss, ZeroWhenAuxiliariesSeeTheTarget) {
  Ensemble e(3);
  auto w = adaptive_weights({0.2, 0.9, 1.4}, {1.0, 1.0, 1.0});
  auto l = weighted_auxiliary_loss(make_split(3, 0), e.models, w, e.target, e.target);
  EXPECT_NEAR(l.item<double>(), 0.0, 1e-12);
}

TEST(AuxiliaryLoss, WeightedMeanOverAuxiliaries) {
  Ensemble e(3);
  auto w = adaptive_weights({1.0, 1.0, 1.0}, {1.0, 1.0, 1.0});
  auto l = weighted_auxiliary_loss(make_split(3, 0), e.models, w, e.x, e.target).item<double>();
  const double l1 = primary_loss(e.models[1], e.x, e.target).item<double>();
  const double l2 = primary_loss(e.models[2], e.x, e.target).item<double>();
  EXPECT_NEAR(l, std::exp(1.0 / 3.0) * (l1 + l2) / 2.0, 1e-12);
  // Unit auxiliary losses with symmetric weights give exp(1/3).
  EXPECT_NEAR(std::exp(1.0 / 3.0) * (1.0 + 1.0) / 2.0, 1.3956124250860895, 1e-12);
}

TEST(AuxiliaryLoss, SingleModelThrows) {
  Ensemble e(1);
  TaskSplit s;
  AdaptiveWeights w;
  w.w = {1.0};
  EXPECT_THROW(weighted_auxiliary_loss(s, e.models, w, e.x, e.target), ValueError);
}

struct MetaFixture {
  Ensemble ens{2};
  GeneratorArch arch = testkit::tiny_generator_arch();
  GeneratorParams g = init_generator(arch, 5, torch::kFloat64);
  ParamSet e_adv = g.enc.clone();
  GenerationContext ctx;
  torch::Tensor att_b = torch::tensor({{1.0, 0.0}, {0.0, 1.0}}, torch::kFloat64);

  MetaFixture() {
    ctx.generator = &g;
    ctx.arch = &arch;
    ctx.fusion = {0.2, 0.1, 1e-3};
    e_adv.set_requires_grad(true);
  }
};

TEST(MetaBatch, UpdatesPerturbationEncoderOnly) {
  MetaFixture f;
  SurrogateEnsemble ensemble(f.ens.models);
  const auto g_before = f.g.clone();
  const auto e_before = f.e_adv.clone();
  const auto s_before = ensemble.models[0].params.clone();
  torch::optim::Adam opt(f.e_adv.tensors(), torch::optim::AdamOptions(1e-2));
  MetaStepConfig cfg;
  cfg.epsilon = 0.0;
  auto r = run_meta_batch(ensemble, f.ctx, f.e_adv, opt, f.ens.x, f.att_b, f.ens.target, cfg);
  EXPECT_GT(r.adversarial, 0.0);
  EXPECT_FALSE(bitwise_equal(f.e_adv, e_before));
  EXPECT_TRUE(bitwise_equal(f.g.enc, g_before.enc));
  EXPECT_TRUE(bitwise_equal(f.g.dec, g_before.dec));
  EXPECT_TRUE(bitwise_equal(ensemble.models[0].params, s_before));
  EXPECT_EQ(ensemble.history.epoch_count, (std::vector<int64_t>{1, 1}));
}

TEST(MetaBatch, SingleModelEnsembleThrows) {
  MetaFixture f;
  SurrogateEnsemble ensemble({f.ens.models[0]});
  torch::optim::Adam opt(f.e_adv.tensors(), torch::optim::AdamOptions(1e-2));
  EXPECT_THROW(run_meta_batch(ensemble, f.ctx, f.e_adv, opt, f.ens.x, f.att_b, f.ens.target, {}),
               ValueError);
}

TEST(MetaLoss, PlainEnsembleIsClampedMeanOfPrimaries) {
  MetaFixture f;
  MetaStepConfig cfg;
  cfg.meta_auxiliary = false;
  cfg.epsilon = 0.0;
  auto w = adaptive_weights(LossHistory(2));
  auto l = meta_adversarial_loss(f.ens.models, w, f.ctx, f.e_adv, f.ens.x, f.att_b, f.ens.target, cfg);
  EXPECT_NEAR(l.adversarial.item<double>(), (l.primary[0] + l.primary[1]) / 2, 1e-12);
}

TEST(MetaLoss, CombinesPrimaryAndAuxiliaryTerms) {
  MetaFixture f;
  MetaStepConfig cfg;
  cfg.epsilon = 0.0;
  auto w = adaptive_weights(LossHistory(2));
  auto l = meta_adversarial_loss(f.ens.models, w, f.ctx, f.e_adv, f.ens.x, f.att_b, f.ens.target, cfg);
  ASSERT_EQ(l.auxiliary.size(), 2u);
  const double expected = (l.primary[0] + l.primary[1] + l.auxiliary[0] + l.auxiliary[1]) / 4;
  EXPECT_NEAR(l.adversarial.item<double>(), expected, 1e-12);
  EXPECT_EQ(l.primary_order, (std::vector<int>{0, 1}));
}

TEST(MetaLoss, FrozenEncoderRejected) {
  MetaFixture f;
  auto frozen = f.e_adv.clone();
  frozen.set_requires_grad(false);
  auto w = adaptive_weights(LossHistory(2));
  EXPECT_THROW(meta_adversarial_loss(f.ens.models, w, f.ctx, frozen, f.ens.x, f.att_b, f.ens.target, {}),
               ValueError);
}

}  // namespace
}  // namespace emask
