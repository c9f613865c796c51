#include "commands.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>

#include <CLI11.hpp>
#include <opencv2/imgcodecs.hpp>

#include "priorseg/config.hpp"
#include "priorseg/dataio.hpp"
#include "priorseg/determinism.hpp"
#include "priorseg/metrics.hpp"
#include "priorseg/segmodel.hpp"
#include "priorseg/shape_prior.hpp"
#include "priorseg/tensor_convert.hpp"
#include "priorseg/trainer.hpp"

namespace fs = std::filesystem;

namespace priorseg::cli {
namespace {

constexpr const char* kConfigSnapshot = "config.ini";
constexpr const char* kSplitFile = "split.json";
constexpr const char* kPriorCurves = "logs/prior_curves.csv";
constexpr const char* kLayoutVersion = "1";

struct SynthArgs {
  int n = 0;
  int canvas = 128;
  std::uint64_t seed = 0;
  std::string out;
};

struct TrainArgs {
  std::string config;
  std::optional<int64_t> epochs;
  std::string out;
  bool no_dsr = false;
  bool labeled_only = false;
  bool resume = false;
};

struct EvalArgs {
  std::string checkpoint;
  std::string config;
  std::string data;
  std::string layout = "synthetic";
  std::string split;
  std::string subset = "test";
  std::string format = "both";
  std::string out;
};

struct PredictArgs {
  std::string checkpoint;
  std::string image;
  std::string out;
};

ExperimentConfig load_config(const TrainArgs& a) {
  auto cfg = ExperimentConfig::load(a.config);
  if (!a.out.empty()) cfg.output_dir = a.out;
  return cfg;
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os << text;
  if (!os) throw std::runtime_error("cannot write '" + p.string() + "'");
}

void prepare_output(const ExperimentConfig& cfg) {
  const fs::path root = cfg.output_dir;
  for (const char* sub : {"checkpoints", "logs", "reports"}) fs::create_directories(root / sub);
  write_text(root / "LAYOUT_VERSION", std::string(kLayoutVersion) + "\n");
  cfg.save(root / kConfigSnapshot);
}

struct PreparedData {
  std::vector<ImageRecord> records;
  DatasetSplit split;
};

PreparedData prepare_data(const ExperimentConfig& cfg) {
  PreparedData d;
  d.records = load_dataset(cfg.dataset.root, cfg.dataset.layout);
  PartitionOverrides ov;
  if (!cfg.dataset.val_list.empty()) ov.val_ids = read_id_list(cfg.dataset.val_list);
  if (!cfg.dataset.test_list.empty()) ov.test_ids = read_id_list(cfg.dataset.test_list);
  d.split = make_partition(d.records, cfg.dataset.fraction, cfg.dataset.val_count, cfg.dataset.test_count, cfg.dataset.seed, ov);
  return d;
}

void write_report(const MetricsReport& report, const fs::path& dir, const std::string& name, const std::string& format) {
  fs::create_directories(dir);
  if (format == "json" || format == "both") write_text(dir / (name + ".json"), report.to_json().dump(2) + "\n");
  if (format == "csv" || format == "both") write_text(dir / (name + ".csv"), report.to_csv());
}

int cmd_synth_data(const SynthArgs& a, std::ostream& out) {
  const auto records = generate_synthetic(a.n, a.canvas, a.seed);
  write_synthetic_dataset(a.out, records, a.seed, a.canvas);
  out << "wrote " << records.size() << " synthetic records to " << a.out << '\n';
  return kOk;
}

int cmd_train_prior(const TrainArgs& a, std::ostream& out) {
  auto cfg = load_config(a);
  if (a.epochs) cfg.prior.train.epochs = *a.epochs;
  cfg.validate();
  prepare_output(cfg);
  const auto data = prepare_data(cfg);
  data.split.save(fs::path(cfg.output_dir) / kSplitFile);

  // Only the labeled pool's masks are visible to the prior.
  const RecordIndex index(data.records);
  std::vector<cv::Mat> grids;
  for (const auto& id : data.split.labeled_ids) {
    const auto& rec = index.at(id);
    if (!rec.mask) throw std::runtime_error("labeled record '" + id + "' has no mask");
    grids.push_back(resize_mask_64(*rec.mask));
  }
  if (static_cast<int64_t>(grids.size()) < cfg.prior.train.batch_size) {
    throw std::runtime_error("the labeled pool has " + std::to_string(grids.size()) + " masks, fewer than the prior batch size " +
                             std::to_string(cfg.prior.train.batch_size));
  }
  const auto masks = images_to_tensor(grids);

  GanTrainOutputs outputs;
  outputs.curve_csv = fs::path(cfg.output_dir) / kPriorCurves;
  outputs.checkpoint = cfg.prior_checkpoint();
  const auto result = train_shape_prior(masks, cfg.prior.generator, cfg.prior.discriminator, cfg.prior.train, outputs);
  out << "shape prior trained on " << grids.size() << " labeled masks for " << cfg.prior.train.epochs << " epochs\n";
  out << "checkpoint: " << outputs.checkpoint->string() << " (checksum " << result.handle.checksum() << ")\n";
  return kOk;
}

int cmd_train_seg(const TrainArgs& a, std::ostream& out) {
  auto cfg = load_config(a);
  if (a.epochs) cfg.trainer.optim.epochs = *a.epochs;
  cfg.validate();

  std::optional<DiscriminatorHandle> prior;
  if (!a.no_dsr && !a.labeled_only) {
    const auto path = cfg.prior_checkpoint();
    if (!fs::exists(path)) {
      throw std::runtime_error("shape prior checkpoint '" + path.string() + "' not found (run train-prior first or pass --no-dsr)");
    }
    prior = DiscriminatorHandle::load(path);
  }

  prepare_output(cfg);
  const auto data = prepare_data(cfg);
  data.split.save(fs::path(cfg.output_dir) / kSplitFile);

  auto handle = SegModelHandle::create(cfg.model.encoder, cfg.model.decoder, cfg.model.dropout, cfg.model.input_size,
                                       cfg.model.init_seed);
  TrainConfig tc;
  tc.optim = cfg.trainer.optim;
  tc.weights = cfg.trainer.weights;
  tc.augmentation = cfg.augmentation();
  tc.seed = cfg.trainer.seed;
  tc.out_dir = fs::path(cfg.output_dir);
  tc.resume = a.resume;

  TrainResult result = a.labeled_only ? train_labeled_only_baseline(handle, data.records, data.split, tc)
                                      : train(handle, prior ? &*prior : nullptr, data.records, data.split, tc);

  const auto best_path = fs::path(cfg.output_dir) / OutputLayout::kBest;
  if (!fs::exists(best_path)) result.best.save(best_path);

  const RecordIndex index(data.records);
  if (!data.split.test_ids.empty()) {
    const auto report = evaluate(result.best, index.select(data.split.test_ids));
    write_report(report, fs::path(cfg.output_dir) / "reports", "test_metrics", "both");
    out << "best epoch " << result.state.best_epoch << ", validation Dice " << result.state.best_val_dice << '\n';
    out << report.summary();
  }
  return kOk;
}

std::vector<ImageRecord> select_subset(const std::vector<ImageRecord>& records, const DatasetSplit& split,
                                       const std::string& subset) {
  if (subset == "all") return records;
  const RecordIndex index(records);
  if (subset == "test") return index.select(split.test_ids);
  if (subset == "val") return index.select(split.val_ids);
  throw std::invalid_argument("unknown subset '" + subset + "'");
}

int cmd_evaluate(const EvalArgs& a, std::ostream& out) {
  auto handle = SegModelHandle::load(a.checkpoint);
  std::vector<ImageRecord> records;
  fs::path report_dir;
  if (!a.config.empty()) {
    const auto cfg = ExperimentConfig::load(a.config);
    const auto data = prepare_data(cfg);
    records = select_subset(data.records, data.split, a.subset);
    report_dir = fs::path(cfg.output_dir) / "reports";
  } else {
    const auto all = load_dataset(a.data, layout_from_string(a.layout));
    if (!a.split.empty()) {
      records = select_subset(all, DatasetSplit::load(a.split), a.subset);
    } else {
      records = all;
    }
    const auto ckpt_dir = fs::path(a.checkpoint).parent_path();
    report_dir = (ckpt_dir.filename() == "checkpoints" ? ckpt_dir.parent_path() : ckpt_dir) / "reports";
  }
  if (!a.out.empty()) report_dir = a.out;
  if (records.empty()) throw std::runtime_error("no records to evaluate");

  MetricsReport report;
  try {
    report = evaluate(handle, records);
  } catch (const std::exception& e) {
    throw std::runtime_error("checkpoint '" + a.checkpoint + "' cannot be evaluated on this dataset: " + e.what());
  }
  write_report(report, report_dir, "evaluation", a.format);
  out << report.summary();
  out << "report written to " << report_dir.string() << '\n';
  return kOk;
}

int cmd_predict(const PredictArgs& a, std::ostream& out) {
  auto handle = SegModelHandle::load(a.checkpoint);
  cv::Mat raw;
  try {
    raw = cv::imread(a.image, cv::IMREAD_GRAYSCALE);
  } catch (const cv::Exception&) {
    raw.release();
  }
  if (raw.empty()) throw std::runtime_error("cannot decode image '" + a.image + "'");
  cv::Mat image;
  raw.convertTo(image, CV_32F, 1.0 / 255.0);
  const cv::Mat mask = predict(handle, image);
  const cv::Mat png = mask * 255;
  const fs::path out_path = a.out;
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  if (!cv::imwrite(a.out, png)) throw std::runtime_error("cannot write mask '" + a.out + "'");
  out << "mask written to " << a.out << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Shape-prior guided semi-supervised segmentation", "priorseg"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth-data", "Generate a synthetic image/mask dataset");
  synth_cmd->add_option("--n", synth.n, "Number of records")->required()->check(CLI::PositiveNumber);
  synth_cmd->add_option("--canvas", synth.canvas, "Square image size (>= 64)")->check(CLI::Range(64, 4096));
  synth_cmd->add_option("--seed", synth.seed, "Generator seed");
  synth_cmd->add_option("--out", synth.out, "Output dataset directory")->required();

  TrainArgs prior_args;
  auto* prior_cmd = app.add_subcommand("train-prior", "Pretrain the shape prior on labeled masks");
  prior_cmd->add_option("--config", prior_args.config, "Experiment config file")->required()->check(CLI::ExistingFile);
  prior_cmd->add_option("--epochs", prior_args.epochs, "Override [prior] epochs")->check(CLI::NonNegativeNumber);
  prior_cmd->add_option("--out", prior_args.out, "Override [output] dir");

  TrainArgs seg_args;
  auto* seg_cmd = app.add_subcommand("train-seg", "Train the segmentation model");
  seg_cmd->add_option("--config", seg_args.config, "Experiment config file")->required()->check(CLI::ExistingFile);
  seg_cmd->add_option("--epochs", seg_args.epochs, "Override [trainer] epochs")->check(CLI::NonNegativeNumber);
  seg_cmd->add_option("--out", seg_args.out, "Override [output] dir");
  auto* no_dsr = seg_cmd->add_flag("--no-dsr", seg_args.no_dsr, "Semi-supervised training without the shape prior");
  seg_cmd->add_flag("--labeled-only", seg_args.labeled_only, "Supervised baseline on the labeled pool")->excludes(no_dsr);
  seg_cmd->add_flag("--resume", seg_args.resume, "Continue from checkpoints/seg_latest.ckpt");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("evaluate", "Dice/IoU report for a trained model");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Segmentation checkpoint")->required()->check(CLI::ExistingFile);
  auto* eval_cfg = eval_cmd->add_option("--config", eval.config, "Take dataset and split from an experiment config")
                       ->check(CLI::ExistingFile);
  auto* eval_data = eval_cmd->add_option("--data", eval.data, "Dataset root")->check(CLI::ExistingDirectory);
  eval_cfg->excludes(eval_data);
  eval_cmd->add_option("--layout", eval.layout, "Dataset layout")->check(CLI::IsMember({"tn3k", "busi", "synthetic"}));
  eval_cmd->add_option("--split", eval.split, "Split file (split.json) selecting --subset")->check(CLI::ExistingFile);
  eval_cmd->add_option("--subset", eval.subset, "test, val or all")->check(CLI::IsMember({"test", "val", "all"}));
  eval_cmd->add_option("--format", eval.format, "Report format")->check(CLI::IsMember({"json", "csv", "both"}));
  eval_cmd->add_option("--out", eval.out, "Report directory");

  PredictArgs pred;
  auto* pred_cmd = app.add_subcommand("predict", "Segment one image");
  pred_cmd->add_option("--checkpoint", pred.checkpoint, "Segmentation checkpoint")->required()->check(CLI::ExistingFile);
  pred_cmd->add_option("--image", pred.image, "Input image")->required();
  pred_cmd->add_option("--out", pred.out, "Output mask image (0/255)")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
    if (eval_cmd->parsed() && eval.config.empty() && eval.data.empty()) {
      throw CLI::RequiredError("evaluate needs --config or --data");
    }
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kUsage;
  }

  configure_determinism(deterministic_mode_from_env());
  try {
    if (synth_cmd->parsed()) return cmd_synth_data(synth, out);
    if (prior_cmd->parsed()) return cmd_train_prior(prior_args, out);
    if (seg_cmd->parsed()) return cmd_train_seg(seg_args, out);
    if (eval_cmd->parsed()) return cmd_evaluate(eval, out);
    if (pred_cmd->parsed()) return cmd_predict(pred, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

}  // namespace priorseg::cli
