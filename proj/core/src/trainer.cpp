#include "priorseg/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <torch/torch.h>

#include "priorseg/checkpoint.hpp"
#include "priorseg/determinism.hpp"
#include "priorseg/metrics.hpp"
#include "priorseg/tensor_convert.hpp"

namespace fs = std::filesystem;

namespace priorseg {
namespace {

std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::string rng_to_string(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void rng_from_string(Rng& rng, const std::string& s) {
  std::istringstream is(s);
  is >> rng;
  if (!is) throw std::runtime_error("train state: corrupt augmentation generator state");
}

std::string join_ids(const std::vector<std::string>& ids) {
  std::string out;
  for (const auto& id : ids) {
    if (!out.empty()) out += ",";
    out += id;
  }
  return out;
}

// Momentum buffers of an SGD optimizer, keyed by parameter name.
void put_sgd_state(TensorArchive& ar, torch::optim::SGD& opt, const torch::nn::Module& net) {
  auto& state = opt.state();
  for (const auto& item : net.named_parameters(true)) {
    auto it = state.find(item.value().unsafeGetTensorImpl());
    if (it == state.end()) continue;
    auto& st = static_cast<torch::optim::SGDParamState&>(*it->second);
    if (st.momentum_buffer().defined()) ar.put("optim." + item.key(), st.momentum_buffer());
  }
}

void load_sgd_state(const TensorArchive& ar, torch::optim::SGD& opt, const torch::nn::Module& net) {
  auto& state = opt.state();
  for (const auto& item : net.named_parameters(true)) {
    const auto key = "optim." + item.key();
    if (!ar.contains(key)) continue;
    auto st = std::make_unique<torch::optim::SGDParamState>();
    st->momentum_buffer(ar.get(key).clone());
    state[item.value().unsafeGetTensorImpl()] = std::move(st);
  }
}

std::uintmax_t file_size_or_zero(const fs::path& p) {
  std::error_code ec;
  const auto n = fs::file_size(p, ec);
  return ec ? 0 : n;
}

class TrainLogs {
 public:
  TrainLogs() = default;

  void open(const fs::path& root, const nlohmann::json& offsets) {
    root_ = root;
    fs::create_directories(root / "logs");
    const bool resuming = !offsets.empty();
    open_one(iter_, root / OutputLayout::kIterCsv, resuming ? offsets.value("iter_csv", 0ULL) : 0,
             "iter,lr,L_s,L_u_ce,L_u_dsr,L_total\n", resuming);
    open_one(epoch_, root / OutputLayout::kEpochCsv, resuming ? offsets.value("epoch_csv", 0ULL) : 0,
             "epoch,val_dice,val_iou,best_val_dice,mean_L_s,mean_L_u_ce,mean_L_u_dsr,mean_L_total\n", resuming);
    open_one(events_, root / OutputLayout::kEvents, resuming ? offsets.value("events", 0ULL) : 0, "", resuming);
  }

  bool enabled() const { return iter_.is_open(); }

  void iteration(const IterationLog& r) {
    if (!enabled()) return;
    iter_ << r.iteration << ',' << fmt_real(r.lr) << ',' << fmt_real(r.supervised) << ',' << fmt_real(r.consistency) << ','
          << fmt_real(r.dsr) << ',' << fmt_real(r.total) << '\n';
    nlohmann::json e = {{"type", "iteration"}, {"iter", r.iteration},    {"lr", r.lr},   {"L_s", r.supervised},
                        {"L_u_ce", r.consistency}, {"L_u_dsr", r.dsr}, {"L_total", r.total}};
    events_ << e.dump() << '\n';
  }

  void epoch(const EpochLog& r) {
    if (!enabled()) return;
    epoch_ << r.epoch << ',' << fmt_real(r.val_dice) << ',' << fmt_real(r.val_iou) << ',' << fmt_real(r.best_val_dice) << ','
           << fmt_real(r.mean_supervised) << ',' << fmt_real(r.mean_consistency) << ',' << fmt_real(r.mean_dsr) << ','
           << fmt_real(r.mean_total) << '\n';
    nlohmann::json e = {{"type", "epoch"},
                        {"epoch", r.epoch},
                        {"val_dice", r.val_dice},
                        {"val_iou", r.val_iou},
                        {"best_val_dice", r.best_val_dice},
                        {"mean_L_s", r.mean_supervised},
                        {"mean_L_u_ce", r.mean_consistency},
                        {"mean_L_u_dsr", r.mean_dsr},
                        {"mean_L_total", r.mean_total}};
    events_ << e.dump() << '\n';
  }

  nlohmann::json flush_offsets() {
    if (!enabled()) return nlohmann::json::object();
    iter_.flush();
    epoch_.flush();
    events_.flush();
    return {{"iter_csv", file_size_or_zero(root_ / OutputLayout::kIterCsv)},
            {"epoch_csv", file_size_or_zero(root_ / OutputLayout::kEpochCsv)},
            {"events", file_size_or_zero(root_ / OutputLayout::kEvents)}};
  }

 private:
  static void open_one(std::ofstream& os, const fs::path& p, std::uintmax_t keep, const std::string& header, bool resuming) {
    if (resuming && fs::exists(p)) {
      fs::resize_file(p, keep);
      os.open(p, std::ios::app);
    } else {
      os.open(p, std::ios::trunc);
      os << header;
    }
    if (!os) throw std::runtime_error("cannot open log file '" + p.string() + "'");
  }

  fs::path root_;
  std::ofstream iter_, epoch_, events_;
};

std::vector<ImageRecord> strip_masks(std::vector<ImageRecord> records) {
  for (auto& r : records) r.mask.reset();
  return records;
}

}  // namespace

void LossWeights::validate() const {
  if (!std::isfinite(lambda_dsr) || lambda_dsr < 0) throw std::invalid_argument("lambda_dsr must be finite and non-negative");
  if (!std::isfinite(gamma) || gamma < 0) throw std::invalid_argument("gamma must be finite and non-negative");
}

nlohmann::json LossWeights::to_json() const { return {{"lambda_dsr", lambda_dsr}, {"gamma", gamma}}; }

LossWeights LossWeights::from_json(const nlohmann::json& j) {
  LossWeights w;
  w.lambda_dsr = j.at("lambda_dsr").get<double>();
  w.gamma = j.at("gamma").get<double>();
  return w;
}

void OptimConfig::validate() const {
  if (!(init_lr > 0)) throw std::invalid_argument("init_lr must be positive");
  if (!(power > 0 && power <= 1)) throw std::invalid_argument("power must be in (0, 1]");
  if (!(momentum > 0)) throw std::invalid_argument("momentum must be positive");
  if (!(weight_decay > 0)) throw std::invalid_argument("weight_decay must be positive");
  if (epochs < 0) throw std::invalid_argument("epochs must be non-negative");
  if (labeled_bs <= 0 || unlabeled_bs <= 0) throw std::invalid_argument("batch sizes must be positive");
  if (iters_per_epoch < 0 || gamma_rampup_epochs < 0) throw std::invalid_argument("iteration counts must be non-negative");
}

nlohmann::json OptimConfig::to_json() const {
  return {{"init_lr", init_lr},           {"power", power},
          {"momentum", momentum},         {"weight_decay", weight_decay},
          {"epochs", epochs},             {"labeled_bs", labeled_bs},
          {"unlabeled_bs", unlabeled_bs}, {"iters_per_epoch", iters_per_epoch},
          {"gamma_rampup_epochs", gamma_rampup_epochs}};
}

OptimConfig OptimConfig::from_json(const nlohmann::json& j) {
  OptimConfig c;
  c.init_lr = j.at("init_lr").get<double>();
  c.power = j.at("power").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.epochs = j.at("epochs").get<int64_t>();
  c.labeled_bs = j.at("labeled_bs").get<int64_t>();
  c.unlabeled_bs = j.at("unlabeled_bs").get<int64_t>();
  c.iters_per_epoch = j.value("iters_per_epoch", int64_t{0});
  c.gamma_rampup_epochs = j.value("gamma_rampup_epochs", int64_t{0});
  return c;
}

nlohmann::json TrainState::to_json() const {
  return {{"iteration", iteration},
          {"epoch", epoch},
          {"best_val_dice", best_val_dice},
          {"best_epoch", best_epoch},
          {"latest_checkpoint", latest_checkpoint},
          {"best_checkpoint", best_checkpoint},
          {"sampler", sampler},
          {"augmentation_rng", augmentation_rng},
          {"log_offsets", log_offsets}};
}

TrainState TrainState::from_json(const nlohmann::json& j) {
  TrainState s;
  s.iteration = j.at("iteration").get<int64_t>();
  s.epoch = j.at("epoch").get<int64_t>();
  s.best_val_dice = j.at("best_val_dice").get<double>();
  s.best_epoch = j.at("best_epoch").get<int64_t>();
  s.latest_checkpoint = j.at("latest_checkpoint").get<std::string>();
  s.best_checkpoint = j.at("best_checkpoint").get<std::string>();
  s.sampler = j.at("sampler");
  s.augmentation_rng = j.at("augmentation_rng").get<std::string>();
  s.log_offsets = j.at("log_offsets");
  return s;
}

double poly_lr(int64_t iter, int64_t max_iter, double init_lr, double power) {
  if (max_iter <= 0) throw std::invalid_argument("poly_lr: max_iter must be positive");
  if (iter < 0) throw std::invalid_argument("poly_lr: iter must be non-negative");
  if (iter > max_iter) {
    throw std::invalid_argument("poly_lr: iter " + std::to_string(iter) + " exceeds max_iter " + std::to_string(max_iter));
  }
  return init_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

torch::Tensor cross_entropy_2d(const torch::Tensor& logits, const torch::Tensor& labels) {
  TORCH_CHECK(logits.dim() == 4 && logits.size(1) == 2, "expected B x 2 x H x W logits, got ", logits.sizes());
  TORCH_CHECK(labels.dim() == 3, "expected B x H x W labels, got ", labels.sizes());
  return torch::nn::functional::cross_entropy(logits, labels.to(torch::kLong));
}

torch::Tensor supervised_loss(SegNet& net, const torch::Tensor& images, const torch::Tensor& masks) {
  return cross_entropy_2d(net->decode_l(net->encode(images)), masks);
}

torch::Tensor pseudo_label(const torch::Tensor& logits_l) { return logits_to_labels(logits_l.detach()); }

UnsupervisedLoss unsupervised_loss_from_logits(const torch::Tensor& logits_p, const torch::Tensor& targets,
                                               const DiscriminatorHandle* dsr, const LossWeights& weights) {
  UnsupervisedLoss out;
  out.consistency = cross_entropy_2d(logits_p, targets.detach());
  if (dsr != nullptr) {
    out.dsr = dsr_loss(*dsr, foreground_prob_64(logits_p));
  } else {
    out.dsr = torch::zeros({}, logits_p.options());
  }
  out.total = out.consistency + weights.lambda_dsr * out.dsr;
  return out;
}

UnsupervisedLoss unsupervised_loss(SegNet& net, const DiscriminatorHandle* dsr, const torch::Tensor& images,
                                   const FeatureDropoutConfig& dropout, const LossWeights& weights, at::Generator& gen) {
  auto pyramid = net->encode(images);
  torch::Tensor targets;
  {
    torch::NoGradGuard no_grad;
    targets = pseudo_label(net->decode_l(pyramid));
  }
  auto logits_p = net->decode_p(pyramid, dropout, gen, /*training=*/true);
  return unsupervised_loss_from_logits(logits_p, targets, dsr, weights);
}

torch::Tensor total_loss(const torch::Tensor& ls, const torch::Tensor& lu, const LossWeights& weights) {
  return ls + weights.gamma * lu;
}

TrainResult train(SegModelHandle& handle, const DiscriminatorHandle* dsr, const std::vector<ImageRecord>& records,
                  const DatasetSplit& split, const TrainConfig& cfg) {
  cfg.optim.validate();
  cfg.weights.validate();
  cfg.augmentation.validate();
  if (cfg.augmentation.crop_to != handle.input_size) {
    throw std::invalid_argument("augmentation crop_to (" + std::to_string(cfg.augmentation.crop_to) +
                                ") must equal the model input size (" + std::to_string(handle.input_size) + ")");
  }
  if (split.labeled_ids.empty()) throw std::invalid_argument("train: the labeled pool is empty");

  const RecordIndex index(records);
  const auto labeled_records = index.select(split.labeled_ids);
  for (const auto& r : labeled_records) {
    if (!r.mask) throw std::invalid_argument("train: labeled record '" + r.id + "' has no mask");
  }
  // Ground truth of the unlabeled pool is never used.
  const auto unlabeled_records = strip_masks(index.select(split.unlabeled_ids));
  const auto val_records = index.select(split.val_ids);
  const RecordIndex labeled_index(labeled_records);
  const RecordIndex unlabeled_index(unlabeled_records);

  const bool use_unlabeled = !cfg.labeled_only && !unlabeled_records.empty();
  handle.branch = cfg.labeled_only ? InferenceBranch::labeled : InferenceBranch::prior_guided;
  const DiscriminatorHandle* prior = cfg.labeled_only ? nullptr : dsr;
  const auto prior_checksum = prior ? prior->checksum() : 0;

  const auto& oc = cfg.optim;
  auto ceil_div = [](int64_t a, int64_t b) { return (a + b - 1) / b; };
  const int64_t iters_per_epoch =
      oc.iters_per_epoch > 0
          ? oc.iters_per_epoch
          : std::max<int64_t>(1, std::max(ceil_div(static_cast<int64_t>(split.labeled_ids.size()), oc.labeled_bs),
                                           ceil_div(static_cast<int64_t>(split.unlabeled_ids.size()), oc.unlabeled_bs)));
  const int64_t max_iter = oc.epochs * iters_per_epoch;

  TrainResult result;
  result.best = handle;
  if (oc.epochs == 0) {
    result.state.best_epoch = 0;
    return result;
  }

  torch::optim::SGD optimizer(handle.net->parameters(),
                              torch::optim::SGDOptions(oc.init_lr).momentum(oc.momentum).weight_decay(oc.weight_decay));
  BatchSampler sampler(split, cfg.seed);
  Rng aug_rng(cfg.seed ^ 0xA5A5A5A5ULL);
  auto dropout_gen = make_generator(cfg.seed + 17);
  TrainState state;

  const nlohmann::json run_meta = {{"optim", oc.to_json()},
                                   {"weights", cfg.weights.to_json()},
                                   {"seed", cfg.seed},
                                   {"labeled_only", cfg.labeled_only},
                                   {"uses_prior", prior != nullptr},
                                   {"prior_checksum", std::to_string(prior_checksum)},
                                   {"model_selection", "best_validation_dice"}};

  std::optional<fs::path> root = cfg.out_dir;
  bool resumed = false;
  if (root && cfg.resume && fs::exists(*root / OutputLayout::kLatest)) {
    const auto ar = TensorArchive::read(*root / OutputLayout::kLatest);
    auto restored = SegModelHandle::from_archive(ar);
    {
      torch::NoGradGuard ng;
      auto dst = handle.net->named_parameters(true);
      for (const auto& item : restored.net->named_parameters(true)) dst[item.key()].copy_(item.value());
      auto dstb = handle.net->named_buffers(true);
      for (const auto& item : restored.net->named_buffers(true)) dstb[item.key()].copy_(item.value());
    }
    load_sgd_state(ar, optimizer, *handle.net);
    state = TrainState::from_json(ar.meta().at("extra").at("train_state"));
    sampler.restore(state.sampler);
    rng_from_string(aug_rng, state.augmentation_rng);
    const auto gen_bytes = ar.get("state.dropout_rng");
    set_generator_state(dropout_gen, std::string(reinterpret_cast<const char*>(gen_bytes.data_ptr<uint8_t>()),
                                                 static_cast<size_t>(gen_bytes.numel())));
    if (fs::exists(*root / state.best_checkpoint)) result.best = SegModelHandle::load(*root / state.best_checkpoint);
    resumed = true;
  }

  TrainLogs logs;
  if (root) logs.open(*root, resumed ? state.log_offsets : nlohmann::json::object());

  auto write_latest = [&](const nlohmann::json& offsets) {
    if (!root) return;
    state.sampler = sampler.state();
    state.augmentation_rng = rng_to_string(aug_rng);
    state.log_offsets = offsets;
    auto extra = run_meta;
    extra["train_state"] = state.to_json();
    auto ar = handle.to_archive(extra);
    put_sgd_state(ar, optimizer, *handle.net);
    const auto gen_state = generator_state(dropout_gen);
    auto bytes = torch::empty({static_cast<int64_t>(gen_state.size())}, torch::kUInt8);
    std::memcpy(bytes.data_ptr<uint8_t>(), gen_state.data(), gen_state.size());
    ar.put("state.dropout_rng", bytes);
    ar.write(*root / OutputLayout::kLatest);
  };

  auto augment_batch = [&](const std::vector<std::string>& ids, const RecordIndex& from) {
    std::vector<ImageRecord> batch;
    batch.reserve(ids.size());
    for (const auto& id : ids) batch.push_back(augment(from.at(id), cfg.augmentation, aug_rng));
    return batch;
  };

  for (int64_t epoch = state.epoch; epoch < oc.epochs; ++epoch) {
    handle.net->train();
    double sum_s = 0, sum_ce = 0, sum_dsr = 0, sum_total = 0;
    double gamma = cfg.weights.gamma;
    if (oc.gamma_rampup_epochs > 0) {
      gamma *= std::min(1.0, static_cast<double>(epoch) / static_cast<double>(oc.gamma_rampup_epochs));
    }
    LossWeights weights{cfg.weights.lambda_dsr, gamma};

    for (int64_t step = 0; step < iters_per_epoch; ++step) {
      const double lr = poly_lr(state.iteration, max_iter, oc.init_lr, oc.power);
      for (auto& group : optimizer.param_groups()) static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);

      const auto [lids, uids] = sample_batches(sampler, static_cast<size_t>(oc.labeled_bs),
                                               use_unlabeled ? static_cast<size_t>(oc.unlabeled_bs) : 0);
      const auto lbatch = augment_batch(lids, labeled_index);
      const auto ls = supervised_loss(handle.net, records_to_images(lbatch), records_to_masks(lbatch));

      IterationLog row;
      row.iteration = state.iteration;
      row.lr = lr;
      torch::Tensor total;
      if (use_unlabeled) {
        const auto ubatch = augment_batch(uids, unlabeled_index);
        const auto lu = unsupervised_loss(handle.net, prior, records_to_images(ubatch), handle.dropout, weights, dropout_gen);
        total = total_loss(ls, lu.total, weights);
        row.consistency = lu.consistency.item<double>();
        row.dsr = lu.dsr.item<double>();
      } else {
        total = ls;
      }
      row.supervised = ls.item<double>();
      row.total = total.item<double>();
      if (!std::isfinite(row.total)) {
        throw DivergenceError("training diverged at iteration " + std::to_string(state.iteration) + " (labeled batch [" +
                              join_ids(lids) + "], unlabeled batch [" + join_ids(uids) + "])");
      }

      optimizer.zero_grad();
      total.backward();
      optimizer.step();

      sum_s += row.supervised;
      sum_ce += row.consistency;
      sum_dsr += row.dsr;
      sum_total += row.total;
      logs.iteration(row);
      result.iterations.push_back(row);
      ++state.iteration;
    }

    state.epoch = epoch + 1;
    EpochLog elog;
    elog.epoch = state.epoch;
    const double n = static_cast<double>(iters_per_epoch);
    elog.mean_supervised = sum_s / n;
    elog.mean_consistency = sum_ce / n;
    elog.mean_dsr = sum_dsr / n;
    elog.mean_total = sum_total / n;

    bool improved;
    if (!val_records.empty()) {
      const auto report = evaluate(handle, val_records);
      elog.val_dice = report.mean_dice;
      elog.val_iou = report.mean_iou;
      improved = report.mean_dice > state.best_val_dice;
    } else {
      elog.val_dice = elog.val_iou = 0.0;
      improved = true;  // no validation set: keep the latest epoch
    }
    if (improved) {
      state.best_val_dice = elog.val_dice;
      state.best_epoch = state.epoch;
      result.best = handle.clone();
      result.best.net->eval();
      if (root) {
        auto extra = run_meta;
        extra["epoch"] = state.epoch;
        extra["val_dice"] = elog.val_dice;
        result.best.save(*root / state.best_checkpoint, extra);
      }
    }
    elog.best_val_dice = state.best_val_dice;
    logs.epoch(elog);
    result.history.push_back(elog);
    write_latest(logs.flush_offsets());
    if (cfg.stop_after_epoch > 0 && state.epoch >= cfg.stop_after_epoch) break;
  }

  if (prior && prior->checksum() != prior_checksum) {
    throw std::logic_error("shape prior parameters changed during segmentation training");
  }
  handle.net->eval();
  result.state = state;
  return result;
}

TrainResult train_labeled_only_baseline(SegModelHandle& handle, const std::vector<ImageRecord>& records,
                                        const DatasetSplit& split, const TrainConfig& cfg) {
  TrainConfig c = cfg;
  c.labeled_only = true;
  return train(handle, nullptr, records, split, c);
}

}  // namespace priorseg
