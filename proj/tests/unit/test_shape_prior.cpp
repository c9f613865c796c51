#include <cmath>
#include <fstream>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "oracles.hpp"
#include "priorseg/determinism.hpp"
#include "priorseg/shape_prior.hpp"
#include "temp_dir.hpp"

using namespace priorseg;
using priorseg::testing::central_differences;
using priorseg::testing::max_relative_error;
using priorseg::testing::ToyScorer;

namespace {

DiscriminatorSpec tiny_disc() {
  DiscriminatorSpec s;
  s.widths = {4, 4, 8, 8};
  return s;
}

GeneratorSpec tiny_gen() {
  GeneratorSpec s;
  s.latent_dim = 8;
  s.widths = {8, 8, 4, 4};
  return s;
}

torch::Tensor random_masks(int64_t n, std::uint64_t seed) {
  auto gen = make_generator(seed);
  return (torch::rand({n, 1, 64, 64}, gen) > 0.5).to(torch::kFloat);
}

DiscriminatorHandle zero_handle() {
  ShapeDiscriminator d(tiny_disc());
  torch::NoGradGuard ng;
  for (auto& p : d->parameters()) p.zero_();
  return DiscriminatorHandle(d, {});
}

}  // namespace

TEST(GradientPenalty, ConstantScorerIsOne) {
  auto gen = make_generator(1);
  Scorer constant = [](const torch::Tensor& x) { return torch::full({x.size(0)}, 3.5); };
  const auto gp = gradient_penalty(constant, random_masks(4, 2), random_masks(4, 3), gen);
  EXPECT_EQ(gp.item<double>(), 1.0);
  auto gen2 = make_generator(1);
  const auto loss = critic_loss(constant, random_masks(4, 2), random_masks(4, 3), 10.0, gen2);
  EXPECT_EQ(loss.total.item<double>(), 10.0);
}

TEST(GradientPenalty, UnitLinearScorerIsZero) {
  auto g = make_generator(5);
  auto dir = torch::randn({64 * 64}, g, torch::kDouble);
  dir = dir / dir.norm();
  Scorer linear = [dir](const torch::Tensor& x) { return x.flatten(1).to(torch::kDouble).matmul(dir); };
  auto gen = make_generator(6);
  const auto gp = gradient_penalty(linear, random_masks(5, 1).to(torch::kDouble), random_masks(5, 2).to(torch::kDouble), gen);
  EXPECT_LE(gp.item<double>(), 1e-5);
}

TEST(GradientPenalty, LinearScorerNormG) {
  // D(x) = g * <unit direction, x>: penalty is (g - 1)^2.
  for (double g : {0.25, 2.0, 7.0}) {
    auto r = make_generator(9);
    auto dir = torch::randn({64 * 64}, r, torch::kDouble);
    dir = g * dir / dir.norm();
    Scorer linear = [dir](const torch::Tensor& x) { return x.flatten(1).matmul(dir); };
    auto gen = make_generator(1);
    const auto gp = gradient_penalty(linear, random_masks(3, 4).to(torch::kDouble), random_masks(3, 5).to(torch::kDouble), gen);
    EXPECT_NEAR(gp.item<double>(), (g - 1) * (g - 1), 1e-5);
  }
}

TEST(CriticLoss, SumScorerHandValue) {
  Scorer sum = [](const torch::Tensor& x) { return x.to(torch::kDouble).flatten(1).sum(1); };
  const auto real = random_masks(4, 10), fake = random_masks(4, 11);
  auto gen = make_generator(2);
  const auto loss = critic_loss(sum, real, fake, 10.0, gen);
  const double diff = (fake.to(torch::kDouble).sum().item<double>() - real.to(torch::kDouble).sum().item<double>()) / 4.0;
  EXPECT_NEAR(loss.total.item<double>(), diff + 10.0 * 63.0 * 63.0, 1e-6);
  EXPECT_NEAR(loss.total.item<double>() - diff, 39690.0, 1e-6);
}

TEST(CriticLoss, EqualBatchesCancel) {
  Scorer sum = [](const torch::Tensor& x) { return x.to(torch::kDouble).flatten(1).sum(1) * 0.5; };
  const auto real = random_masks(3, 12);
  auto gen = make_generator(2);
  const auto loss = critic_loss(sum, real, real.clone(), 2.0, gen);
  EXPECT_EQ(loss.wasserstein.item<double>(), 0.0);
  EXPECT_NEAR(loss.total.item<double>(), 2.0 * std::pow(0.5 * 64 - 1, 2), 1e-9);
}

TEST(CriticLoss, NonFiniteScoreRaises) {
  Scorer bad = [](const torch::Tensor& x) { return torch::full({x.size(0)}, std::nan("")); };
  auto gen = make_generator(1);
  EXPECT_THROW(critic_loss(bad, random_masks(2, 1), random_masks(2, 2), 10.0, gen), NonFiniteLossError);
}

TEST(CriticLoss, PenaltyValueMatchesClosedForm) {
  ToyScorer toy(16, 8, 3);
  auto real = torch::rand({6, 1, 4, 4}, make_generator(1), torch::kDouble);
  auto fake = torch::rand({6, 1, 4, 4}, make_generator(2), torch::kDouble);
  auto gen = make_generator(77);
  const double gp = gradient_penalty(std::cref(toy), real, fake, gen).item<double>();

  auto gen_again = make_generator(77);
  auto eps = torch::rand({6, 1, 1, 1}, gen_again, torch::kDouble);
  auto x_hat = eps * real + (1 - eps) * fake;
  auto norms = toy.input_gradient(x_hat).norm(2, 1);
  const double expected = (norms - 1).pow(2).mean().item<double>();
  EXPECT_NEAR(gp, expected, 1e-12);
}

TEST(CriticLoss, ParameterGradientsMatchCentralDifferences) {
  ToyScorer toy(16, 8, 4);
  ASSERT_LE(toy.numel(), 200);
  auto real = torch::rand({5, 1, 4, 4}, make_generator(3), torch::kDouble);
  auto fake = torch::rand({5, 1, 4, 4}, make_generator(4), torch::kDouble);
  auto eval = [&] {
    auto gen = make_generator(123);
    return critic_loss(std::cref(toy), real, fake, 10.0, gen).total;
  };
  auto loss = eval();
  const auto params = toy.params();
  const auto analytic = torch::autograd::grad({loss}, params);
  const auto numeric = central_differences([&] { return eval().item<double>(); }, params, 1e-4);
  for (std::size_t i = 0; i < params.size(); ++i) EXPECT_LE(max_relative_error(analytic[i], numeric[i]), 1e-3) << "param " << i;
}

TEST(CriticLoss, PenaltyGradientsMatchCentralDifferences) {
  ToyScorer toy(16, 6, 8);
  auto real = torch::rand({4, 1, 4, 4}, make_generator(5), torch::kDouble);
  auto fake = torch::rand({4, 1, 4, 4}, make_generator(6), torch::kDouble);
  auto eval = [&] {
    auto gen = make_generator(9);
    return gradient_penalty(std::cref(toy), real, fake, gen);
  };
  const auto params = toy.params();
  // the output bias never reaches the input gradient
  auto analytic = torch::autograd::grad({eval()}, params, {}, std::nullopt, false, /*allow_unused=*/true);
  const auto numeric = central_differences([&] { return eval().item<double>(); }, params, 1e-4);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!analytic[i].defined()) analytic[i] = torch::zeros_like(params[i]);
    EXPECT_LE(max_relative_error(analytic[i], numeric[i]), 1e-3) << "param " << i;
  }
  EXPECT_LT(numeric[3].abs().max().item<double>(), 1e-8);
}

TEST(Interpolates, LieBetweenEndpoints) {
  auto real = torch::rand({16, 1, 8, 8}, make_generator(1));
  auto fake = torch::rand({16, 1, 8, 8}, make_generator(2));
  auto gen = make_generator(3);
  auto x = interpolate_samples(real, fake, gen);
  auto lo = torch::minimum(real, fake), hi = torch::maximum(real, fake);
  EXPECT_TRUE(((x >= lo - 1e-7) & (x <= hi + 1e-7)).all().item<bool>());
  // one epsilon per sample
  auto eps = (x - fake) / (real - fake);
  auto spread = (eps.flatten(1).amax(1) - eps.flatten(1).amin(1)).abs().max().item<double>();
  EXPECT_LT(spread, 1e-3);
}

TEST(GeneratorLoss, Examples) {
  Scorer zero = [](const torch::Tensor& x) { return torch::zeros({x.size(0)}); };
  EXPECT_EQ(generator_loss(zero, random_masks(3, 1)).item<double>(), 0.0);
  Scorer sum = [](const torch::Tensor& x) { return x.flatten(1).sum(1); };
  EXPECT_EQ(generator_loss(sum, torch::ones({2, 1, 64, 64})).item<double>(), -4096.0);
  auto one = random_masks(1, 4);
  const double a = generator_loss(sum, one).item<double>();
  const double b = generator_loss(sum, one.repeat({7, 1, 1, 1})).item<double>();
  EXPECT_DOUBLE_EQ(a, b);
}

TEST(Networks, ShapesAndRange) {
  ShapeGenerator g(tiny_gen());
  auto out = g->forward(torch::randn({3, 8}, make_generator(1)));
  EXPECT_EQ(out.sizes(), (std::vector<int64_t>{3, 1, 64, 64}));
  EXPECT_GE(out.min().item<double>(), 0.0);
  EXPECT_LE(out.max().item<double>(), 1.0);

  ShapeDiscriminator d(tiny_disc());
  auto s = d->forward(torch::rand({5, 1, 64, 64}, make_generator(2)));
  EXPECT_EQ(s.sizes(), (std::vector<int64_t>{5}));
  EXPECT_TRUE(torch::isfinite(s).all().item<bool>());
}

TEST(Networks, DefaultWidths) {
  ShapeDiscriminator d{DiscriminatorSpec{}};
  auto sizes = std::vector<int64_t>{};
  for (const auto& p : d->named_parameters()) {
    if (p.key().find("weight") != std::string::npos) sizes.push_back(p.value().size(0));
  }
  EXPECT_EQ(sizes, (std::vector<int64_t>{64, 128, 256, 512, 1}));
}

TEST(DsrLoss, ZeroHandle) {
  const auto h = zero_handle();
  EXPECT_EQ(dsr_loss(h, torch::rand({4, 1, 64, 64}, make_generator(1))).item<double>(), 0.0);
}

TEST(DsrLoss, RepeatedMaskEqualsNegativeScore) {
  ShapeDiscriminator d(tiny_disc());
  DiscriminatorHandle h(d, {});
  auto m = random_masks(1, 7);
  const double score = h.score(m).item<double>();
  EXPECT_FLOAT_EQ(dsr_loss(h, m.repeat({5, 1, 1, 1})).item<float>(), static_cast<float>(-score));
}

TEST(DsrLoss, GradientFlowsToInputOnlyAndHandleIsFrozen) {
  ShapeDiscriminator d(tiny_disc());
  DiscriminatorHandle h(d, {});
  const auto before = h.checksum();
  auto x = torch::rand({2, 1, 64, 64}, make_generator(1)).requires_grad_(true);
  for (int i = 0; i < 3; ++i) dsr_loss(h, x).backward();
  ASSERT_TRUE(x.grad().defined());
  EXPECT_GT(x.grad().abs().sum().item<double>(), 0.0);
  for (const auto& p : h.module().parameters()) {
    EXPECT_FALSE(p.requires_grad());
    EXPECT_FALSE(p.grad().defined());
  }
  EXPECT_EQ(h.checksum(), before);
}

TEST(DsrLoss, HandleIndependentOfSource) {
  ShapeDiscriminator d(tiny_disc());
  DiscriminatorHandle h(d, {});
  const auto before = h.checksum();
  {
    torch::NoGradGuard ng;
    for (auto& p : d->parameters()) p.add_(1.0);
  }
  EXPECT_EQ(h.checksum(), before);
}

TEST(TrainShapePrior, ZeroEpochsIsInitialisedDiscriminator) {
  GanTrainConfig cfg;
  cfg.epochs = 0;
  cfg.batch_size = 4;
  cfg.seed = 3;
  const auto masks = random_masks(4, 1);
  const auto a = train_shape_prior(masks, tiny_gen(), tiny_disc(), cfg);
  const auto b = train_shape_prior(masks, tiny_gen(), tiny_disc(), cfg);
  EXPECT_TRUE(a.curves.empty());
  EXPECT_EQ(a.handle.checksum(), b.handle.checksum());
  EXPECT_TRUE(torch::equal(a.handle.score(masks), a.handle.score(masks)));
}

TEST(TrainShapePrior, DeterministicAndCurves) {
  TempDir tmp;
  GanTrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.critic_steps = 2;
  cfg.seed = 11;
  const auto masks = random_masks(10, 2);
  GanTrainOutputs out;
  out.curve_csv = tmp.path() / "curves.csv";
  out.checkpoint = tmp.path() / "prior.ckpt";
  const auto a = train_shape_prior(masks, tiny_gen(), tiny_disc(), cfg, out);
  const auto b = train_shape_prior(masks, tiny_gen(), tiny_disc(), cfg);
  EXPECT_EQ(a.handle.checksum(), b.handle.checksum());
  ASSERT_EQ(a.curves.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.curves[i].critic_loss, b.curves[i].critic_loss);
    EXPECT_EQ(a.curves[i].epoch, static_cast<int64_t>(i + 1));
  }
  const auto loaded = DiscriminatorHandle::load(*out.checkpoint);
  EXPECT_EQ(loaded.checksum(), a.handle.checksum());
  EXPECT_EQ(loaded.meta().seed, 11u);
  EXPECT_EQ(loaded.meta().epochs, 3);
  EXPECT_EQ(loaded.spec(), tiny_disc());

  std::ifstream csv(*out.curve_csv);
  std::string line;
  int rows = 0;
  std::getline(csv, line);
  EXPECT_EQ(line, "epoch,critic_loss,generator_loss,gp_term");
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 3);
}

TEST(TrainShapePrior, TooFewMasks) {
  GanTrainConfig cfg;
  cfg.batch_size = 16;
  cfg.epochs = 1;
  EXPECT_THROW(train_shape_prior(random_masks(4, 1), tiny_gen(), tiny_disc(), cfg), std::invalid_argument);
}

TEST(GanTrainConfig, Validation) {
  GanTrainConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.learning_rate, 5e-5);
  EXPECT_EQ(c.batch_size, 16);
  EXPECT_EQ(c.epochs, 5000);
  c.learning_rate = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = GanTrainConfig{};
  c.critic_steps = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_EQ(GanTrainConfig::from_json(GanTrainConfig{}.to_json()), GanTrainConfig{});
}
