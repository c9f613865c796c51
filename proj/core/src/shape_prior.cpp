#include "priorseg/shape_prior.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <torch/torch.h>

#include "priorseg/checkpoint.hpp"
#include "priorseg/determinism.hpp"

namespace priorseg {
namespace {

constexpr int kPriorFormatVersion = 1;

std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void check_finite(const torch::Tensor& t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    std::ostringstream os;
    os << what << " is not finite (min " << t.min().item<double>() << ", max " << t.max().item<double>() << ", shape "
       << t.sizes() << ")";
    throw NonFiniteLossError(os.str());
  }
}

torch::Tensor as_batch(const torch::Tensor& x) {
  if (x.dim() == 3) return x.unsqueeze(1);
  TORCH_CHECK(x.dim() == 4 && x.size(1) == 1, "expected B x 1 x H x W masks, got ", x.sizes());
  return x;
}

}  // namespace

void GeneratorSpec::validate() const {
  if (latent_dim <= 0) throw std::invalid_argument("generator: latent_dim must be positive");
  for (auto w : widths) {
    if (w <= 0) throw std::invalid_argument("generator: widths must be positive");
  }
}

nlohmann::json GeneratorSpec::to_json() const { return {{"latent_dim", latent_dim}, {"widths", widths}}; }

GeneratorSpec GeneratorSpec::from_json(const nlohmann::json& j) {
  GeneratorSpec s;
  s.latent_dim = j.at("latent_dim").get<int64_t>();
  s.widths = j.at("widths").get<std::array<int64_t, 4>>();
  return s;
}

void DiscriminatorSpec::validate() const {
  for (auto w : widths) {
    if (w <= 0) throw std::invalid_argument("discriminator: widths must be positive");
  }
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw std::invalid_argument("discriminator: leaky slope must be in [0,1)");
}

nlohmann::json DiscriminatorSpec::to_json() const { return {{"widths", widths}, {"leaky_slope", leaky_slope}}; }

DiscriminatorSpec DiscriminatorSpec::from_json(const nlohmann::json& j) {
  DiscriminatorSpec s;
  s.widths = j.at("widths").get<std::array<int64_t, 4>>();
  s.leaky_slope = j.at("leaky_slope").get<double>();
  return s;
}

void GanTrainConfig::validate() const {
  if (!(learning_rate > 0)) throw std::invalid_argument("prior: learning_rate must be positive");
  if (batch_size <= 0) throw std::invalid_argument("prior: batch_size must be positive");
  if (epochs < 0) throw std::invalid_argument("prior: epochs must be non-negative");
  if (!(gp_weight > 0)) throw std::invalid_argument("prior: gp_weight must be positive");
  if (critic_steps <= 0) throw std::invalid_argument("prior: critic_steps must be positive");
  if (checkpoint_every < 0) throw std::invalid_argument("prior: checkpoint_every must be non-negative");
}

nlohmann::json GanTrainConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"batch_size", batch_size},     {"epochs", epochs},
          {"gp_weight", gp_weight},         {"critic_steps", critic_steps}, {"seed", seed},
          {"checkpoint_every", checkpoint_every}};
}

GanTrainConfig GanTrainConfig::from_json(const nlohmann::json& j) {
  GanTrainConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.batch_size = j.at("batch_size").get<int64_t>();
  c.epochs = j.at("epochs").get<int64_t>();
  c.gp_weight = j.at("gp_weight").get<double>();
  c.critic_steps = j.at("critic_steps").get<int64_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.checkpoint_every = j.value("checkpoint_every", int64_t{0});
  return c;
}

ShapeGeneratorImpl::ShapeGeneratorImpl(const GeneratorSpec& spec) : spec_(spec) {
  spec_.validate();
  deconvs_ = register_module("deconvs", torch::nn::ModuleList());
  norms_ = register_module("norms", torch::nn::ModuleList());
  int64_t in = spec_.latent_dim;
  for (size_t i = 0; i < spec_.widths.size(); ++i) {
    const int64_t out = spec_.widths[i];
    auto opts = i == 0 ? torch::nn::ConvTranspose2dOptions(in, out, 4).stride(1).padding(0).bias(false)
                       : torch::nn::ConvTranspose2dOptions(in, out, 4).stride(2).padding(1).bias(false);
    deconvs_->push_back(torch::nn::ConvTranspose2d(opts));
    norms_->push_back(torch::nn::BatchNorm2d(out));
    in = out;
  }
  deconvs_->push_back(torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(in, 1, 4).stride(2).padding(1)));
}

torch::Tensor ShapeGeneratorImpl::forward(torch::Tensor z) {
  if (z.dim() == 2) z = z.view({z.size(0), z.size(1), 1, 1});
  auto x = z;
  for (size_t i = 0; i < norms_->size(); ++i) {
    x = deconvs_[i]->as<torch::nn::ConvTranspose2d>()->forward(x);
    x = torch::relu(norms_[i]->as<torch::nn::BatchNorm2d>()->forward(x));
  }
  x = deconvs_[norms_->size()]->as<torch::nn::ConvTranspose2d>()->forward(x);
  return torch::sigmoid(x);
}

ShapeDiscriminatorImpl::ShapeDiscriminatorImpl(const DiscriminatorSpec& spec) : spec_(spec) {
  spec_.validate();
  convs_ = register_module("convs", torch::nn::ModuleList());
  int64_t in = 1;
  for (auto out : spec_.widths) {
    convs_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 4).stride(2).padding(1)));
    in = out;
  }
  convs_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, 1, 4).stride(1).padding(0)));
}

torch::Tensor ShapeDiscriminatorImpl::forward(torch::Tensor x) {
  x = as_batch(x);
  TORCH_CHECK(x.size(2) == kPriorSize && x.size(3) == kPriorSize, "discriminator expects 64 x 64 input, got ", x.sizes());
  const auto n = convs_->size();
  for (size_t i = 0; i + 1 < n; ++i) {
    x = torch::leaky_relu(convs_[i]->as<torch::nn::Conv2d>()->forward(x), spec_.leaky_slope);
  }
  return convs_[n - 1]->as<torch::nn::Conv2d>()->forward(x).flatten(1).squeeze(1);
}

torch::Tensor interpolate_samples(const torch::Tensor& real, const torch::Tensor& fake, at::Generator& gen) {
  TORCH_CHECK(real.sizes() == fake.sizes(), "real and fake batches differ in shape: ", real.sizes(), " vs ", fake.sizes());
  std::vector<int64_t> eps_shape(static_cast<size_t>(real.dim()), 1);
  eps_shape[0] = real.size(0);
  auto eps = torch::rand(eps_shape, gen, real.options());
  return eps * real + (1 - eps) * fake;
}

torch::Tensor gradient_penalty(const Scorer& scorer, const torch::Tensor& real, const torch::Tensor& fake,
                               at::Generator& gen) {
  auto x_hat = interpolate_samples(real.detach(), fake.detach(), gen).requires_grad_(true);
  auto scores = scorer(x_hat);
  check_finite(scores, "discriminator score on interpolates");
  torch::Tensor grad;
  if (scores.requires_grad()) {
    grad = torch::autograd::grad({scores.sum()}, {x_hat}, /*grad_outputs=*/{}, /*retain_graph=*/true,
                                 /*create_graph=*/true, /*allow_unused=*/true)[0];
  }
  if (!grad.defined()) grad = torch::zeros_like(x_hat);
  auto norms = grad.flatten(1).norm(2, 1);
  return (norms - 1).pow(2).mean();
}

CriticLoss critic_loss(const Scorer& scorer, const torch::Tensor& real, const torch::Tensor& fake, double gp_weight,
                       at::Generator& gen) {
  TORCH_CHECK(real.sizes() == fake.sizes(), "real and fake batches differ in shape");
  auto real_scores = scorer(real);
  auto fake_scores = scorer(fake);
  check_finite(real_scores, "discriminator score on real masks");
  check_finite(fake_scores, "discriminator score on generated masks");
  CriticLoss out;
  out.wasserstein = fake_scores.mean() - real_scores.mean();
  out.gradient_penalty = gradient_penalty(scorer, real, fake, gen);
  out.total = out.wasserstein + gp_weight * out.gradient_penalty;
  check_finite(out.total, "critic loss");
  return out;
}

torch::Tensor generator_loss(const Scorer& scorer, const torch::Tensor& fake) { return -scorer(fake).mean(); }

DiscriminatorHandle::DiscriminatorHandle(const ShapeDiscriminator& trained, DiscriminatorMeta meta) : meta_(meta) {
  net_ = std::make_shared<ShapeDiscriminatorImpl>(trained->spec());
  {
    torch::NoGradGuard ng;
    auto src = trained->named_parameters(true);
    for (auto& item : net_->named_parameters(true)) item.value().copy_(src[item.key()]);
  }
  net_->eval();
  for (auto& p : net_->parameters()) p.requires_grad_(false);
}

torch::Tensor DiscriminatorHandle::score(const torch::Tensor& masks) const { return net_->forward(masks); }

Scorer DiscriminatorHandle::scorer() const {
  auto net = net_;
  return [net](const torch::Tensor& x) { return net->forward(x); };
}

std::uint64_t DiscriminatorHandle::checksum() const { return module_checksum(*net_); }

void DiscriminatorHandle::save(const std::filesystem::path& path) const {
  TensorArchive ar("shape_prior", kPriorFormatVersion);
  ar.meta()["discriminator"] = net_->spec().to_json();
  ar.meta()["seed"] = meta_.seed;
  ar.meta()["epochs"] = meta_.epochs;
  ar.meta()["gp_weight"] = meta_.gp_weight;
  ar.put_module("discriminator.", *net_);
  ar.write(path);
}

DiscriminatorHandle DiscriminatorHandle::load(const std::filesystem::path& path) {
  const auto ar = TensorArchive::read(path);
  if (ar.kind() != "shape_prior") {
    throw std::runtime_error("'" + path.string() + "' holds a " + ar.kind() + " checkpoint, not a shape prior");
  }
  if (ar.format_version() != kPriorFormatVersion) {
    throw std::runtime_error("unsupported shape prior format version " + std::to_string(ar.format_version()));
  }
  ShapeDiscriminator net(DiscriminatorSpec::from_json(ar.meta().at("discriminator")));
  ar.load_module("discriminator.", *net);
  DiscriminatorMeta meta;
  meta.seed = ar.meta().at("seed").get<std::uint64_t>();
  meta.epochs = ar.meta().at("epochs").get<int64_t>();
  meta.gp_weight = ar.meta().at("gp_weight").get<double>();
  return DiscriminatorHandle(net, meta);
}

torch::Tensor dsr_loss(const DiscriminatorHandle& handle, const torch::Tensor& predicted) {
  return -handle.score(as_batch(predicted)).mean();
}

void write_gan_curves_csv(const std::filesystem::path& path, const std::vector<GanEpochLog>& curves) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write loss curves to '" + path.string() + "'");
  os << "epoch,critic_loss,generator_loss,gp_term\n";
  for (const auto& e : curves) {
    os << e.epoch << ',' << fmt_real(e.critic_loss) << ',' << fmt_real(e.generator_loss) << ',' << fmt_real(e.gp_term) << '\n';
  }
}

GanTrainResult train_shape_prior(const torch::Tensor& masks, const GeneratorSpec& gen_spec,
                                 const DiscriminatorSpec& disc_spec, const GanTrainConfig& cfg,
                                 const GanTrainOutputs& outputs) {
  cfg.validate();
  TORCH_CHECK(masks.dim() == 4 && masks.size(1) == 1 && masks.size(2) == kPriorSize && masks.size(3) == kPriorSize,
              "shape prior training expects N x 1 x 64 x 64 masks, got ", masks.sizes());
  const int64_t n = masks.size(0);
  if (n < cfg.batch_size) {
    throw std::invalid_argument("shape prior training needs at least batch_size (" + std::to_string(cfg.batch_size) +
                                ") masks, got " + std::to_string(n));
  }
  const auto real_all = masks.to(torch::kFloat32).contiguous();

  seed_global(cfg.seed);
  ShapeGenerator generator(gen_spec);
  ShapeDiscriminator discriminator(disc_spec);
  auto gen_rng = make_generator(cfg.seed + 1);
  auto perm_rng = make_generator(cfg.seed + 2);

  torch::optim::RMSprop opt_g(generator->parameters(), torch::optim::RMSpropOptions(cfg.learning_rate));
  torch::optim::RMSprop opt_d(discriminator->parameters(), torch::optim::RMSpropOptions(cfg.learning_rate));
  generator->train();
  discriminator->train();

  DiscriminatorMeta meta{cfg.seed, 0, cfg.gp_weight};
  auto snapshot = [&](int64_t epochs_done) {
    meta.epochs = epochs_done;
    return DiscriminatorHandle(discriminator, meta);
  };

  const Scorer disc_scorer = [&discriminator](const torch::Tensor& x) { return discriminator->forward(x); };
  const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  int64_t critic_updates = 0;
  std::vector<GanEpochLog> curves;
  curves.reserve(static_cast<size_t>(cfg.epochs));

  auto sample_fake = [&](bool detach) {
    auto z = torch::randn({cfg.batch_size, gen_spec.latent_dim}, gen_rng);
    if (detach) {
      torch::NoGradGuard ng;
      return generator->forward(z);
    }
    return generator->forward(z);
  };

  try {
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto perm = torch::randperm(n, perm_rng, torch::kLong);
    double sum_critic = 0, sum_gen = 0, sum_gp = 0;
    for (int64_t step = 0; step < steps_per_epoch; ++step) {
      auto idx = (torch::arange(cfg.batch_size, torch::kLong) + step * cfg.batch_size).remainder(n);
      auto real = real_all.index_select(0, perm.index_select(0, idx));
      auto fake = sample_fake(/*detach=*/true);

      opt_d.zero_grad();
      auto loss = critic_loss(disc_scorer, real, fake, cfg.gp_weight, gen_rng);
      loss.total.backward();
      opt_d.step();
      ++critic_updates;
      sum_critic += loss.total.item<double>();
      sum_gp += loss.gradient_penalty.item<double>();
      {
        torch::NoGradGuard ng;
        sum_gen += -discriminator->forward(fake).mean().item<double>();
      }

      if (critic_updates % cfg.critic_steps == 0) {
        opt_g.zero_grad();
        // Only the generator steps here; discriminator grads are cleared before its next update.
        auto g_loss = generator_loss(disc_scorer, sample_fake(/*detach=*/false));
        check_finite(g_loss, "generator loss");
        g_loss.backward();
        opt_g.step();
      }
    }
    GanEpochLog log{epoch + 1, sum_critic / steps_per_epoch, sum_gen / steps_per_epoch, sum_gp / steps_per_epoch};
    curves.push_back(log);
    if (outputs.checkpoint && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
      snapshot(epoch + 1).save(*outputs.checkpoint);
    }
  }
  } catch (const NonFiniteLossError&) {
    // The last-good checkpoint on disk is left untouched; persist curves up to the failure.
    if (outputs.curve_csv) write_gan_curves_csv(*outputs.curve_csv, curves);
    throw;
  }

  auto handle = snapshot(cfg.epochs);
  if (outputs.checkpoint) handle.save(*outputs.checkpoint);
  if (outputs.curve_csv) write_gan_curves_csv(*outputs.curve_csv, curves);
  return GanTrainResult{std::move(handle), std::move(curves)};
}

}  // namespace priorseg
