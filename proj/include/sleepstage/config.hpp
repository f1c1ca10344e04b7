#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "sleepstage/evaluation.hpp"
#include "sleepstage/losses.hpp"
#include "sleepstage/preprocessing.hpp"
#include "sleepstage/seqsleepnet.hpp"
#include "sleepstage/synthetic.hpp"
#include "sleepstage/training.hpp"

namespace sleepstage {

/// Bad configuration: unknown key, unparsable value or failed validation.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataSection {
  std::filesystem::path raw_dir = "raw";
  std::filesystem::path cache_dir = "cache";
  std::filesystem::path work_dir = "run";
  std::string channel = "EEG Fpz-Cz";
  double lights_off = -1.0;  // seconds; negative keeps the recording start
  double lights_on = -1.0;   // seconds; negative keeps the recording end
  std::vector<std::string> targets;  // held out of pretraining
  double valid_fraction = 0.1;       // share of pretraining subjects validated on
};

struct PersonalizeSection {
  std::vector<double> alphas{0.0, 0.2, 0.4, 0.6, 0.8};
  std::vector<Strategy> strategies{Strategy::All};
  FinetuneConfig finetune;  // alpha, strategy and seed are filled per run
};

struct EvaluateSection {
  double beta = 0.77;
  FusionMode fusion = FusionMode::Geometric;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  DataSection data;
  PreprocessConfig preprocess;
  ModelConfig model;
  PretrainConfig pretrain;
  PersonalizeSection personalize;
  EvaluateSection evaluate;
  CohortSpec synthetic;

  /// Throws ConfigError on out-of-range values.
  void validate() const;
  /// Pretraining settings with the experiment seed applied.
  PretrainConfig pretrain_config() const;
  FinetuneConfig finetune_config(double alpha, Strategy strategy) const;
  /// Cohort spec whose minimum night length is the model sequence length.
  CohortSpec cohort_spec() const;
};

/// Parses INI text. Keys before the first section are top-level (`seed`).
/// `overrides` are `section.key=value` strings applied on top of the file.
ExperimentConfig parse_config(const std::string& ini_text,
                              const std::vector<std::string>& overrides = {});
ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides = {});

/// Every key with its effective value, sections and keys in a fixed order.
/// Parsing the result gives back the same configuration.
std::string canonical_ini(const ExperimentConfig& config);

/// Every recognised key as `section.key` (top-level keys bare).
std::vector<std::string> config_keys();

}  // namespace sleepstage
