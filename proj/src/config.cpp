#include "sleepstage/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace sleepstage {
namespace {

namespace pt = boost::property_tree;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  return out;
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// ---- value codecs -----------------------------------------------------------

struct BadValue {
  std::string reason;
};

template <class Int>
void parse_int(const std::string& s, Int& out) {
  const std::string t = trim(s);
  Int v{};
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || p != t.data() + t.size()) {
    throw BadValue{"expected a non-negative integer"};
  }
  out = v;
}

void parse_value(const std::string& s, std::size_t& out) { parse_int(s, out); }

void parse_value(const std::string& s, double& out) {
  const std::string t = trim(s);
  double v = 0.0;
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || p != t.data() + t.size() || !std::isfinite(v)) {
    throw BadValue{"expected a finite number"};
  }
  out = v;
}

void parse_value(const std::string& s, bool& out) {
  const std::string t = lower(trim(s));
  if (t == "true" || t == "yes" || t == "on" || t == "1") {
    out = true;
  } else if (t == "false" || t == "no" || t == "off" || t == "0") {
    out = false;
  } else {
    throw BadValue{"expected true or false"};
  }
}

void parse_value(const std::string& s, std::string& out) { out = trim(s); }
void parse_value(const std::string& s, std::filesystem::path& out) { out = trim(s); }

void parse_value(const std::string& s, std::vector<double>& out) {
  std::vector<double> v;
  for (const auto& item : split_list(s)) {
    double d = 0.0;
    parse_value(item, d);
    v.push_back(d);
  }
  out = std::move(v);
}

void parse_value(const std::string& s, std::vector<std::string>& out) { out = split_list(s); }

void parse_value(const std::string& s, std::vector<Strategy>& out) {
  std::vector<Strategy> v;
  for (const auto& item : split_list(s)) {
    try {
      v.push_back(parse_strategy(item));
    } catch (const ModelError& e) {
      throw BadValue{e.what()};
    }
  }
  out = std::move(v);
}

void parse_value(const std::string& s, NormAxis& out) {
  const std::string t = lower(trim(s));
  if (t == "per-bin" || t == "per_bin" || t == "bin") {
    out = NormAxis::PerBin;
  } else if (t == "global") {
    out = NormAxis::Global;
  } else {
    throw BadValue{"expected per-bin or global"};
  }
}

void parse_value(const std::string& s, FusionMode& out) {
  try {
    out = parse_fusion(trim(s));
  } catch (const EvaluationError&) {
    throw BadValue{"expected geometric or last"};
  }
}

void parse_value(const std::string& s, LossForm& out) {
  const std::string t = lower(trim(s));
  if (t == "ce" || t == "cross-entropy") {
    out = LossForm::CrossEntropy;
  } else if (t == "kl") {
    out = LossForm::Kl;
  } else {
    throw BadValue{"expected ce or kl"};
  }
}

std::string format_value(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
std::string format_value(std::size_t v) { return std::to_string(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(const std::string& v) { return v; }
std::string format_value(const std::filesystem::path& v) { return v.string(); }
std::string format_value(NormAxis v) { return v == NormAxis::PerBin ? "per-bin" : "global"; }
std::string format_value(FusionMode v) { return fusion_name(v); }
std::string format_value(LossForm v) { return v == LossForm::Kl ? "kl" : "ce"; }

template <class T>
std::string join(const std::vector<T>& items) {
  std::string out;
  for (const auto& item : items) {
    if (!out.empty()) out += ", ";
    out += format_value(item);
  }
  return out;
}
std::string format_value(const std::vector<double>& v) { return join(v); }
std::string format_value(const std::vector<std::string>& v) { return join(v); }
std::string format_value(const std::vector<Strategy>& v) {
  std::string out;
  for (Strategy s : v) {
    if (!out.empty()) out += ", ";
    out += strategy_name(s);
  }
  return out;
}

// ---- key registry -----------------------------------------------------------

struct Field {
  std::string section;  // empty for top-level keys
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;

  std::string name() const { return section.empty() ? key : section + "." + key; }
};

template <class Access>
Field field(std::string section, std::string key, Access access) {
  return {std::move(section), std::move(key),
          [access](ExperimentConfig& c, const std::string& v) { parse_value(v, access(c)); },
          [access](const ExperimentConfig& c) { return format_value(access(c)); }};
}

#define SS_FIELD(section, key, expr) \
  field(section, key, [](auto& c) -> auto& { return c.expr; })

const std::vector<Field>& registry() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    f.push_back(SS_FIELD("", "seed", seed));

    f.push_back(SS_FIELD("data", "raw_dir", data.raw_dir));
    f.push_back(SS_FIELD("data", "cache_dir", data.cache_dir));
    f.push_back(SS_FIELD("data", "work_dir", data.work_dir));
    f.push_back(SS_FIELD("data", "channel", data.channel));
    f.push_back(SS_FIELD("data", "lights_off", data.lights_off));
    f.push_back(SS_FIELD("data", "lights_on", data.lights_on));
    f.push_back(SS_FIELD("data", "targets", data.targets));
    f.push_back(SS_FIELD("data", "valid_fraction", data.valid_fraction));

    f.push_back(SS_FIELD("preprocess", "frame_seconds", preprocess.stft.frame_seconds));
    f.push_back(SS_FIELD("preprocess", "hop_seconds", preprocess.stft.hop_seconds));
    f.push_back(SS_FIELD("preprocess", "fft_size", preprocess.stft.fft_size));
    f.push_back(SS_FIELD("preprocess", "epsilon", preprocess.stft.epsilon));
    f.push_back(SS_FIELD("preprocess", "norm_axis", preprocess.norm_axis));

    f.push_back(SS_FIELD("model", "filters", model.filters));
    f.push_back(SS_FIELD("model", "epb_hidden", model.epb_hidden));
    f.push_back(SS_FIELD("model", "attention_size", model.attention_size));
    f.push_back(SS_FIELD("model", "spb_hidden", model.spb_hidden));
    f.push_back(SS_FIELD("model", "seq_len", model.seq_len));
    f.push_back(SS_FIELD("model", "recurrent_norm", model.recurrent_norm));
    f.push_back(SS_FIELD("model", "norm_momentum", model.norm_momentum));

    f.push_back(SS_FIELD("pretrain", "epochs", pretrain.epochs));
    f.push_back(SS_FIELD("pretrain", "batch_size", pretrain.batch_size));
    f.push_back(SS_FIELD("pretrain", "learning_rate", pretrain.learning_rate));
    f.push_back(SS_FIELD("pretrain", "lambda", pretrain.lambda));
    f.push_back(SS_FIELD("pretrain", "stride", pretrain.stride));
    f.push_back(SS_FIELD("pretrain", "fusion", pretrain.fusion));

    f.push_back(SS_FIELD("personalize", "alphas", personalize.alphas));
    f.push_back(SS_FIELD("personalize", "strategies", personalize.strategies));
    f.push_back(SS_FIELD("personalize", "learning_rate", personalize.finetune.learning_rate));
    f.push_back(SS_FIELD("personalize", "lambda", personalize.finetune.lambda));
    f.push_back(SS_FIELD("personalize", "epochs", personalize.finetune.finetune_epochs));
    f.push_back(SS_FIELD("personalize", "snapshot_every", personalize.finetune.snapshot_every));
    f.push_back(SS_FIELD("personalize", "batch_size", personalize.finetune.batch_size));
    f.push_back(SS_FIELD("personalize", "stride", personalize.finetune.stride));
    f.push_back(SS_FIELD("personalize", "form", personalize.finetune.form));

    f.push_back(SS_FIELD("evaluate", "beta", evaluate.beta));
    f.push_back(SS_FIELD("evaluate", "fusion", evaluate.fusion));

    f.push_back(SS_FIELD("synthetic", "subjects", synthetic.subjects));
    f.push_back(SS_FIELD("synthetic", "nights_per_subject", synthetic.nights_per_subject));
    f.push_back(SS_FIELD("synthetic", "epochs_per_night", synthetic.epochs_per_night));
    f.push_back(SS_FIELD("synthetic", "sample_rate", synthetic.sample_rate));
    f.push_back(SS_FIELD("synthetic", "shift_sd", synthetic.shift_sd));
    f.push_back(SS_FIELD("synthetic", "gain_sd", synthetic.gain_sd));
    f.push_back(SS_FIELD("synthetic", "peak_gain_sd", synthetic.peak_gain_sd));
    f.push_back(SS_FIELD("synthetic", "night_shift_sd", synthetic.night_shift_sd));
    f.push_back(SS_FIELD("synthetic", "epoch_gain_sd", synthetic.epoch_gain_sd));
    f.push_back(SS_FIELD("synthetic", "label_noise", synthetic.label_noise));
    f.push_back(SS_FIELD("synthetic", "signal_scale", synthetic.signal_scale));
    f.push_back(SS_FIELD("synthetic", "subject_prefix", synthetic.subject_prefix));
    f.push_back(SS_FIELD("synthetic", "first_subject", synthetic.first_subject));
    return f;
  }();
  return fields;
}

#undef SS_FIELD

const Field* find_field(const std::string& section, const std::string& key) {
  for (const auto& f : registry()) {
    if (f.section == section && f.key == key) return &f;
  }
  return nullptr;
}

void assign(ExperimentConfig& c, const std::string& section, const std::string& key,
            const std::string& value) {
  const Field* f = find_field(section, key);
  const std::string name = section.empty() ? key : section + "." + key;
  if (f == nullptr) throw ConfigError("unknown config key '" + name + "'");
  try {
    f->set(c, value);
  } catch (const BadValue& e) {
    throw ConfigError("invalid value '" + value + "' for " + name + ": " + e.reason);
  }
}

void check(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

void ExperimentConfig::validate() const {
  check(preprocess.stft.frame_seconds > 0 && preprocess.stft.hop_seconds > 0,
        "preprocess.frame_seconds and preprocess.hop_seconds must be positive");
  check(preprocess.stft.fft_size >= 2, "preprocess.fft_size must be at least 2");
  check(preprocess.stft.epsilon > 0, "preprocess.epsilon must be positive");
  check(model.filters > 0 && model.epb_hidden > 0 && model.attention_size > 0 &&
            model.spb_hidden > 0 && model.seq_len > 0,
        "model sizes must be positive");
  check(model.norm_momentum > 0 && model.norm_momentum <= 1,
        "model.norm_momentum must lie in (0, 1]");
  check(pretrain.epochs > 0 && pretrain.batch_size > 0 && pretrain.stride > 0,
        "pretrain.epochs, pretrain.batch_size and pretrain.stride must be positive");
  check(pretrain.learning_rate > 0, "pretrain.learning_rate must be positive");
  check(pretrain.lambda >= 0, "pretrain.lambda must be non-negative");
  check(data.valid_fraction >= 0 && data.valid_fraction < 1,
        "data.valid_fraction must lie in [0, 1)");
  check(!personalize.alphas.empty(), "personalize.alphas must not be empty");
  for (double a : personalize.alphas) {
    check(a >= 0 && a <= 1, "personalize.alphas must lie in [0, 1]");
  }
  check(!personalize.strategies.empty(), "personalize.strategies must not be empty");
  try {
    personalize.finetune.validate();
  } catch (const TrainingError& e) {
    throw ConfigError(std::string("personalize: ") + e.what());
  }
  check(evaluate.beta >= 0 && evaluate.beta <= 1, "evaluate.beta must lie in [0, 1]");
  check(synthetic.subjects > 0, "synthetic.subjects must be positive");
  check(synthetic.nights_per_subject >= 2, "synthetic.nights_per_subject must be at least 2");
  check(synthetic.sample_rate > 0, "synthetic.sample_rate must be positive");
}

PretrainConfig ExperimentConfig::pretrain_config() const {
  PretrainConfig p = pretrain;
  p.seed = seed;
  return p;
}

FinetuneConfig ExperimentConfig::finetune_config(double alpha, Strategy strategy) const {
  FinetuneConfig f = personalize.finetune;
  f.alpha = alpha;
  f.strategy = strategy;
  f.seed = seed;
  return f;
}

CohortSpec ExperimentConfig::cohort_spec() const {
  CohortSpec s = synthetic;
  s.min_epochs = model.seq_len;
  return s;
}

ExperimentConfig parse_config(const std::string& ini_text,
                              const std::vector<std::string>& overrides) {
  pt::ptree tree;
  try {
    std::istringstream in(ini_text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  ExperimentConfig c;
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      assign(c, "", name, node.data());  // top-level key
      continue;
    }
    for (const auto& [key, leaf] : node) assign(c, name, key, leaf.data());
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("override '" + o + "' is not of the form section.key=value");
    }
    const std::string path = trim(o.substr(0, eq));
    const auto dot = path.find('.');
    if (dot == std::string::npos) {
      assign(c, "", path, o.substr(eq + 1));
    } else {
      assign(c, path.substr(0, dot), path.substr(dot + 1), o.substr(eq + 1));
    }
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), overrides);
}

std::string canonical_ini(const ExperimentConfig& config) {
  std::string out;
  std::string section;
  for (const auto& f : registry()) {
    if (f.section != section) {
      section = f.section;
      out += "\n[" + section + "]\n";
    }
    out += f.key + " = " + f.get(config) + "\n";
  }
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : registry()) keys.push_back(f.name());
  return keys;
}

}  // namespace sleepstage
