#include "priorseg/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace pt = boost::property_tree;

namespace priorseg {
namespace {

// Shortest text that parses back to the same double.
std::string fmt_double(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

double parse_double(const std::string& s) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != s.size()) throw ConfigError("expected a number, got '" + s + "'");
  return v;
}

template <typename Int>
Int parse_int(const std::string& s) {
  Int v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ConfigError("expected an integer, got '" + s + "'");
  return v;
}

template <std::size_t N>
std::string fmt_widths(const std::array<int64_t, N>& w) {
  std::string out;
  for (std::size_t i = 0; i < N; ++i) out += (i ? "," : "") + std::to_string(w[i]);
  return out;
}

template <std::size_t N>
std::array<int64_t, N> parse_widths(const std::string& s) {
  std::array<int64_t, N> out{};
  std::stringstream ss(s);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == N) throw ConfigError("expected " + std::to_string(N) + " comma-separated widths, got '" + s + "'");
    const auto b = item.find_first_not_of(' ');
    const auto e = item.find_last_not_of(' ');
    out[i++] = parse_int<int64_t>(b == std::string::npos ? "" : item.substr(b, e - b + 1));
  }
  if (i != N) throw ConfigError("expected " + std::to_string(N) + " comma-separated widths, got '" + s + "'");
  return out;
}

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename T, typename Ptr>
Field real_field(std::string sec, std::string key, Ptr ptr) {
  return {std::move(sec), std::move(key), [ptr](const ExperimentConfig& c) { return fmt_double(ptr(const_cast<ExperimentConfig&>(c))); },
          [ptr](ExperimentConfig& c, const std::string& v) { ptr(c) = parse_double(v); }};
}

template <typename Int, typename Ptr>
Field int_field(std::string sec, std::string key, Ptr ptr) {
  return {std::move(sec), std::move(key),
          [ptr](const ExperimentConfig& c) { return std::to_string(ptr(const_cast<ExperimentConfig&>(c))); },
          [ptr](ExperimentConfig& c, const std::string& v) { ptr(c) = parse_int<Int>(v); }};
}

template <typename Ptr>
Field string_field(std::string sec, std::string key, Ptr ptr) {
  return {std::move(sec), std::move(key), [ptr](const ExperimentConfig& c) { return ptr(const_cast<ExperimentConfig&>(c)); },
          [ptr](ExperimentConfig& c, const std::string& v) { ptr(c) = v; }};
}

#define PS_REF(expr) [](ExperimentConfig & c) -> auto& { return expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    // [dataset]
    f.push_back({"dataset", "layout", [](const ExperimentConfig& c) { return to_string(c.dataset.layout); },
                 [](ExperimentConfig& c, const std::string& v) { c.dataset.layout = layout_from_string(v); }});
    f.push_back(string_field("dataset", "root", PS_REF(c.dataset.root)));
    f.push_back({"dataset", "fraction", [](const ExperimentConfig& c) { return c.dataset.fraction.str(); },
                 [](ExperimentConfig& c, const std::string& v) { c.dataset.fraction = Fraction::parse(v); }});
    f.push_back(int_field<std::uint64_t>("dataset", "seed", PS_REF(c.dataset.seed)));
    f.push_back(int_field<std::size_t>("dataset", "val_count", PS_REF(c.dataset.val_count)));
    f.push_back(int_field<std::size_t>("dataset", "test_count", PS_REF(c.dataset.test_count)));
    f.push_back(string_field("dataset", "val_list", PS_REF(c.dataset.val_list)));
    f.push_back(string_field("dataset", "test_list", PS_REF(c.dataset.test_list)));
    // [prior]
    f.push_back(real_field<double>("prior", "learning_rate", PS_REF(c.prior.train.learning_rate)));
    f.push_back(int_field<int64_t>("prior", "batch_size", PS_REF(c.prior.train.batch_size)));
    f.push_back(int_field<int64_t>("prior", "epochs", PS_REF(c.prior.train.epochs)));
    f.push_back(real_field<double>("prior", "gp_weight", PS_REF(c.prior.train.gp_weight)));
    f.push_back(int_field<int64_t>("prior", "critic_steps", PS_REF(c.prior.train.critic_steps)));
    f.push_back(int_field<std::uint64_t>("prior", "seed", PS_REF(c.prior.train.seed)));
    f.push_back(int_field<int64_t>("prior", "checkpoint_every", PS_REF(c.prior.train.checkpoint_every)));
    f.push_back(int_field<int64_t>("prior", "latent_dim", PS_REF(c.prior.generator.latent_dim)));
    f.push_back({"prior", "generator_widths", [](const ExperimentConfig& c) { return fmt_widths(c.prior.generator.widths); },
                 [](ExperimentConfig& c, const std::string& v) { c.prior.generator.widths = parse_widths<4>(v); }});
    f.push_back({"prior", "discriminator_widths",
                 [](const ExperimentConfig& c) { return fmt_widths(c.prior.discriminator.widths); },
                 [](ExperimentConfig& c, const std::string& v) { c.prior.discriminator.widths = parse_widths<4>(v); }});
    f.push_back(real_field<double>("prior", "leaky_slope", PS_REF(c.prior.discriminator.leaky_slope)));
    f.push_back(string_field("prior", "checkpoint", PS_REF(c.prior.checkpoint)));
    // [model]
    f.push_back(int_field<int>("model", "encoder_depth", PS_REF(c.model.encoder.depth)));
    f.push_back({"model", "encoder_widths", [](const ExperimentConfig& c) { return fmt_widths(c.model.encoder.widths); },
                 [](ExperimentConfig& c, const std::string& v) { c.model.encoder.widths = parse_widths<5>(v); }});
    f.push_back(string_field("model", "pretrained_path", PS_REF(c.model.encoder.pretrained_path)));
    f.push_back({"model", "decoder_widths", [](const ExperimentConfig& c) { return fmt_widths(c.model.decoder.widths); },
                 [](ExperimentConfig& c, const std::string& v) { c.model.decoder.widths = parse_widths<5>(v); }});
    f.push_back(real_field<double>("model", "drop_rate", PS_REF(c.model.dropout.drop_rate)));
    f.push_back({"model", "dropout_granularity", [](const ExperimentConfig& c) { return to_string(c.model.dropout.granularity); },
                 [](ExperimentConfig& c, const std::string& v) { c.model.dropout.granularity = granularity_from_string(v); }});
    f.push_back({"model", "dropout_level", [](const ExperimentConfig& c) { return to_string(c.model.dropout.level); },
                 [](ExperimentConfig& c, const std::string& v) { c.model.dropout.level = level_from_string(v); }});
    f.push_back(int_field<int64_t>("model", "input_size", PS_REF(c.model.input_size)));
    f.push_back(int_field<std::uint64_t>("model", "init_seed", PS_REF(c.model.init_seed)));
    // [trainer]
    f.push_back(real_field<double>("trainer", "init_lr", PS_REF(c.trainer.optim.init_lr)));
    f.push_back(real_field<double>("trainer", "power", PS_REF(c.trainer.optim.power)));
    f.push_back(real_field<double>("trainer", "momentum", PS_REF(c.trainer.optim.momentum)));
    f.push_back(real_field<double>("trainer", "weight_decay", PS_REF(c.trainer.optim.weight_decay)));
    f.push_back(int_field<int64_t>("trainer", "epochs", PS_REF(c.trainer.optim.epochs)));
    f.push_back(int_field<int64_t>("trainer", "labeled_bs", PS_REF(c.trainer.optim.labeled_bs)));
    f.push_back(int_field<int64_t>("trainer", "unlabeled_bs", PS_REF(c.trainer.optim.unlabeled_bs)));
    f.push_back(int_field<int64_t>("trainer", "iters_per_epoch", PS_REF(c.trainer.optim.iters_per_epoch)));
    f.push_back(int_field<int64_t>("trainer", "gamma_rampup_epochs", PS_REF(c.trainer.optim.gamma_rampup_epochs)));
    f.push_back(real_field<double>("trainer", "lambda_dsr", PS_REF(c.trainer.weights.lambda_dsr)));
    f.push_back(real_field<double>("trainer", "gamma", PS_REF(c.trainer.weights.gamma)));
    f.push_back(int_field<std::uint64_t>("trainer", "seed", PS_REF(c.trainer.seed)));
    f.push_back(int_field<int>("trainer", "resize_to", PS_REF(c.trainer.resize_to)));
    f.push_back(real_field<double>("trainer", "rotation_range", PS_REF(c.trainer.rotation_range)));
    f.push_back(real_field<double>("trainer", "scale_min", PS_REF(c.trainer.scale_min)));
    f.push_back(real_field<double>("trainer", "scale_max", PS_REF(c.trainer.scale_max)));
    // [output]
    f.push_back(string_field("output", "dir", PS_REF(c.output_dir)));
    return f;
  }();
  return table;
}

#undef PS_REF

}  // namespace

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  pt::ptree tree;
  try {
    std::istringstream is(text);
    pt::ini_parser::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax error: ") + e.what());
  }

  std::set<std::string> sections;
  for (const auto& f : fields()) sections.insert(f.section);

  ExperimentConfig cfg;
  for (const auto& [section, body] : tree) {
    if (!sections.count(section)) throw ConfigError("unknown config section [" + section + "]");
    if (!body.data().empty()) throw ConfigError("key '" + section + "' outside of a section");
    for (const auto& [key, value] : body) {
      const Field* match = nullptr;
      for (const auto& f : fields()) {
        if (f.section == section && f.key == key) match = &f;
      }
      if (!match) throw ConfigError("unknown config key '" + key + "' in [" + section + "]");
      try {
        match->set(cfg, value.data());
      } catch (const ConfigError& e) {
        throw ConfigError("[" + section + "] " + key + ": " + e.what());
      } catch (const std::invalid_argument& e) {
        throw ConfigError("[" + section + "] " + key + ": " + e.what());
      }
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  try {
    return parse(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string ExperimentConfig::serialize() const {
  std::ostringstream os;
  std::string current;
  for (const auto& f : fields()) {
    if (f.section != current) {
      if (!current.empty()) os << '\n';
      os << '[' << f.section << "]\n";
      current = f.section;
    }
    os << f.key << " = " << f.get(*this) << '\n';
  }
  return os.str();
}

void ExperimentConfig::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  os << serialize();
  if (!os) throw ConfigError("cannot write config file '" + path.string() + "'");
}

void ExperimentConfig::validate() const {
  try {
    prior.train.validate();
    prior.generator.validate();
    prior.discriminator.validate();
    model.encoder.validate();
    model.decoder.validate();
    model.dropout.validate();
    trainer.optim.validate();
    trainer.weights.validate();
    augmentation().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (model.input_size <= 0 || model.input_size % 32 != 0) throw ConfigError("[model] input_size must be a positive multiple of 32");
  if (output_dir.empty()) throw ConfigError("[output] dir must not be empty");
}

AugmentationParams ExperimentConfig::augmentation() const {
  AugmentationParams a;
  a.resize_to = trainer.resize_to;
  a.crop_to = static_cast<int>(model.input_size);
  a.rotation_range = trainer.rotation_range;
  a.scale_min = trainer.scale_min;
  a.scale_max = trainer.scale_max;
  return a;
}

std::filesystem::path ExperimentConfig::prior_checkpoint() const {
  if (!prior.checkpoint.empty()) return prior.checkpoint;
  return std::filesystem::path(output_dir) / "checkpoints" / "prior.ckpt";
}

}  // namespace priorseg
