#include <benchmark/benchmark.h>
#include <torch/torch.h>

#include "priorseg/determinism.hpp"
#include "priorseg/metrics.hpp"
#include "priorseg/shape_prior.hpp"
#include "priorseg/tensor_convert.hpp"
#include "priorseg/trainer.hpp"

using namespace priorseg;

namespace {

SegModelHandle desk_model() {
  EncoderSpec e;
  e.depth = 18;
  e.widths = {8, 8, 16, 32, 64};
  DecoderSpec d;
  d.widths = {64, 32, 16, 8, 8};
  return SegModelHandle::create(e, d, FeatureDropoutConfig{}, 64, 0);
}

// One critic update (scores, penalty, backward) at 64 x 64.
void BM_CriticStep(benchmark::State& state) {
  configure_determinism(true);
  DiscriminatorSpec spec;
  spec.widths = {4, 8, 16, 32};
  ShapeDiscriminator disc(spec);
  Scorer scorer = [&](const torch::Tensor& x) { return disc->forward(x); };
  const auto batch = state.range(0);
  auto real = torch::rand({batch, 1, 64, 64}, make_generator(1));
  auto fake = torch::rand({batch, 1, 64, 64}, make_generator(2));
  auto gen = make_generator(3);
  for (auto _ : state) {
    disc->zero_grad();
    auto loss = critic_loss(scorer, real, fake, 10.0, gen);
    loss.total.backward();
    benchmark::DoNotOptimize(loss.total.item<double>());
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_CriticStep)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_SegInference(benchmark::State& state) {
  configure_determinism(true);
  auto h = desk_model();
  auto images = torch::rand({state.range(0), 1, 64, 64}, make_generator(4));
  for (auto _ : state) benchmark::DoNotOptimize(inference_logits(h, images));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SegInference)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

// Forward and backward of L_s + L_u for an 8 + 8 batch.
void BM_SemiSupervisedStep(benchmark::State& state) {
  configure_determinism(true);
  auto h = desk_model();
  h.net->train();
  DiscriminatorSpec spec;
  spec.widths = {4, 8, 16, 32};
  DiscriminatorHandle prior(ShapeDiscriminator(spec), {});
  const auto records = generate_synthetic(16, 64, 1);
  std::vector<ImageRecord> lab(records.begin(), records.begin() + 8), unl(records.begin() + 8, records.end());
  const auto x_l = records_to_images(lab), y_l = records_to_masks(lab), x_u = records_to_images(unl);
  auto gen = make_generator(5);
  const LossWeights w;
  for (auto _ : state) {
    h.net->zero_grad();
    auto ls = supervised_loss(h.net, x_l, y_l);
    auto lu = unsupervised_loss(h.net, &prior, x_u, h.dropout, w, gen);
    auto total = total_loss(ls, lu.total, w);
    total.backward();
    benchmark::DoNotOptimize(total.item<double>());
  }
}
BENCHMARK(BM_SemiSupervisedStep)->Unit(benchmark::kMillisecond);

void BM_Dice(benchmark::State& state) {
  const int side = static_cast<int>(state.range(0));
  cv::Mat a(side, side, CV_8UC1), b(side, side, CV_8UC1);
  cv::randu(a, 0, 2);
  cv::randu(b, 0, 2);
  for (auto _ : state) benchmark::DoNotOptimize(dice(a, b));
  state.SetBytesProcessed(state.iterations() * 2 * side * side);
}
BENCHMARK(BM_Dice)->Arg(256)->Arg(1024);

}  // namespace

BENCHMARK_MAIN();
