#include <gtest/gtest.h>

#include <cmath>

#include "emask/attribute_gan.hpp"
#include "toy_experiment.hpp"

namespace emask {
namespace {

using testkit::central_differences;
using testkit::flatten;
using testkit::max_relative_error;

torch::Tensor image(int64_t b, int64_t size, uint64_t seed, torch::Dtype dtype = torch::kFloat32) {
  auto gen = make_generator(seed);
  return torch::rand({b, 3, size, size}, gen, torch::TensorOptions().dtype(dtype)) * 2 - 1;
}

TEST(Encode, PyramidHasFourLayers) {
  GeneratorArch arch;
  auto g = init_generator(arch, 1);
  auto z = encode(g.enc, arch, image(2, 32, 1));
  ASSERT_EQ(z.size(), 4u);
  EXPECT_EQ(z.layers[0].size(2), 16);
  EXPECT_EQ(z.layers[3].size(2), 2);
}

TEST(Encode, Deterministic) {
  GeneratorArch arch;
  auto g = init_generator(arch, 1);
  auto x = image(2, 32, 2);
  auto a = encode(g.enc, arch, x);
  auto b = encode(g.enc, arch, x);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(torch::equal(a.layers[i], b.layers[i]));
}

TEST(Encode, WrongSizeThrows) {
  GeneratorArch arch;
  auto g = init_generator(arch, 1);
  EXPECT_THROW(encode(g.enc, arch, image(1, 16, 1)), ShapeError);
}

TEST(Encode, GradientMatchesFiniteDifferences) {
  auto arch = testkit::tiny_generator_arch();
  auto g = init_generator(arch, 4, torch::kFloat64);
  auto x = image(1, arch.image_size, 5, torch::kFloat64).requires_grad_(true);
  auto gen = make_generator(6);
  std::vector<torch::Tensor> probes;
  for (const auto& f : encode(g.enc, arch, x.detach()).layers) {
    probes.push_back(torch::randn(f.sizes(), gen, torch::TensorOptions().dtype(torch::kFloat64)));
  }
  auto scalar = [&] {
    auto z = encode(g.enc, arch, x);
    auto s = torch::zeros({}, torch::kFloat64);
    for (std::size_t i = 0; i < z.size(); ++i) s = s + (z.layers[i] * probes[i]).sum();
    return s;
  };
  auto analytic = flatten(torch::autograd::grad({scalar()}, {x}));
  auto numeric = central_differences({x}, [&] { return scalar().item<double>(); }, 1e-6);
  EXPECT_LT(max_relative_error(analytic, numeric), 1e-3);
}

TEST(Decode, GradientMatchesFiniteDifferences) {
  auto arch = testkit::tiny_generator_arch();
  auto g = init_generator(arch, 7, torch::kFloat64);
  auto x = image(1, arch.image_size, 8, torch::kFloat64);
  auto att = torch::tensor({{1.0, 0.0}}, torch::kFloat64);
  auto z = encode(g.enc, arch, x);
  std::vector<torch::Tensor> leaves;
  for (auto& f : z.layers) {
    f = f.detach().clone().requires_grad_(true);
    leaves.push_back(f);
  }
  auto probe = image(1, arch.image_size, 9, torch::kFloat64);
  auto scalar = [&] { return (decode(g.dec, arch, z, att) * probe).sum(); };
  auto analytic = flatten(torch::autograd::grad({scalar()}, leaves));
  auto numeric = central_differences(leaves, [&] { return scalar().item<double>(); }, 1e-6);
  EXPECT_LT(max_relative_error(analytic, numeric), 1e-3);
}

TEST(Decode, OutputInRangeAndInputSized) {
  GeneratorArch arch;
  auto g = init_generator(arch, 3);
  auto x = image(3, 32, 3);
  auto att = torch::randint(0, 2, {3, arch.attributes});
  auto out = attribute_decode(g, arch, x, att);
  EXPECT_EQ(out.sizes(), x.sizes());
  EXPECT_LE(out.abs().max().item<double>(), 1.0);
}

TEST(Decode, AttributeLengthMismatchThrows) {
  GeneratorArch arch;
  auto g = init_generator(arch, 3);
  EXPECT_THROW(attribute_decode(g, arch, image(1, 32, 1), torch::zeros({1, 5})), ShapeError);
}

TEST(Decode, HookSeesEveryLayerAndFinalImage) {
  GeneratorArch arch;
  auto g = init_generator(arch, 3);
  auto z = encode(g.enc, arch, image(1, 32, 1));
  auto att = torch::zeros({1, arch.attributes});
  std::vector<int> seen;
  auto out = decode(g.dec, arch, z, att, [&](int i, const torch::Tensor& t) {
    seen.push_back(i);
    return t;
  });
  EXPECT_EQ(seen, (std::vector<int>{0, 1, 2, 3}));
  auto trace = decode_trace(g.dec, arch, z, att);
  ASSERT_EQ(trace.size(), 4u);
  EXPECT_TRUE(torch::equal(trace.back(), out));
}

TEST(GanLoss, PerfectDiscriminatorIsNearZero) {
  auto l = gan_losses(torch::full({4}, 1 - kProbClamp, torch::kFloat64),
                      torch::full({4}, kProbClamp, torch::kFloat64));
  EXPECT_LT(l.discriminator.item<double>(), 1e-6);
}

TEST(GanLoss, HalfProbabilities) {
  auto half = torch::full({4}, 0.5, torch::kFloat64);
  auto l = gan_losses(half, half);
  EXPECT_NEAR(l.generator.item<double>(), 0.6931471805599453, 1e-12);
  EXPECT_NEAR(l.discriminator.item<double>(), 1.3862943611198906, 1e-12);
  EXPECT_NEAR(generator_gan_loss(half).item<double>(), 0.6931471805599453, 1e-12);
}

TEST(GanLoss, NanProbabilityRaisesNumericalError) {
  auto p = torch::tensor({0.5, std::nan("")}, torch::kFloat64);
  EXPECT_THROW(gan_losses(p, p), NumericalError);
}

TEST(AttributeLoss, PerfectClassifierIsNearZero) {
  auto att = torch::tensor({{1.0, 0.0, 1.0}}, torch::kFloat64);
  auto l = attribute_losses(att, att, att, att);
  EXPECT_LT(l.generator.item<double>(), 1e-6);
}

TEST(AttributeLoss, HalfOnThirteenBits) {
  auto p = torch::full({1, 13}, 0.5, torch::kFloat64);
  auto t = torch::randint(0, 2, {1, 13}).to(torch::kFloat64);
  EXPECT_NEAR(attribute_bce(p, t).item<double>(), 9.010913347279288, 1e-12);
}

TEST(AttributeLoss, SingleBit) {
  auto l = attribute_bce(torch::tensor({{0.9}}, torch::kFloat64), torch::tensor({{1.0}}, torch::kFloat64));
  EXPECT_NEAR(l.item<double>(), 0.10536051565782628, 1e-12);
}

TEST(AttributeLoss, NonBinaryLabelsThrow) {
  auto p = torch::full({1, 2}, 0.5);
  EXPECT_THROW(attribute_bce(p, torch::tensor({{0.0f, 0.5f}})), ValueError);
}

TEST(ReconstructionLoss, Examples) {
  auto x = image(1, 4, 1, torch::kFloat64);
  EXPECT_EQ(reconstruction_loss(x, x).item<double>(), 0.0);
  EXPECT_NEAR(reconstruction_loss(x + 0.1, x).item<double>(), 0.1, 1e-12);
  EXPECT_THROW(reconstruction_loss(x, image(1, 8, 1, torch::kFloat64)), ShapeError);
}

TEST(Discriminator, ProbabilitiesInUnitInterval) {
  DiscriminatorArch arch;
  auto d = init_discriminator(arch, 2);
  auto out = discriminate(d, arch, image(3, 32, 4));
  EXPECT_EQ(out.real_prob.sizes(), (std::vector<int64_t>{3}));
  EXPECT_EQ(out.attribute_prob.sizes(), (std::vector<int64_t>{3, arch.attributes}));
  EXPECT_GT(out.real_prob.min().item<double>(), 0.0);
  EXPECT_LT(out.real_prob.max().item<double>(), 1.0);
}

}  // namespace
}  // namespace emask
