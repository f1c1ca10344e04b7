#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sleepstage/recording.hpp"

namespace sleepstage {

struct SpectralPeak {
  double frequency = 10.0;  // Hz
  double amplitude = 1.0;
  double width = 1.0;       // Gaussian sd in Hz
};

struct StageTemplate {
  std::vector<SpectralPeak> peaks;
  double background = 1.0;  // level of a 1/(1 + f/4) floor
};

using StageTemplates = std::array<StageTemplate, kNumStages>;

StageTemplates default_stage_templates();

/// Parameters of a generated cohort. Per-subject variation is drawn once per
/// subject and applied to all of that subject's nights.
struct CohortSpec {
  std::size_t subjects = 10;
  std::size_t nights_per_subject = 2;
  std::size_t epochs_per_night = 200;
  std::size_t min_epochs = 20;  // sequence length the cohort must support
  double sample_rate = 100.0;
  StageTemplates templates = default_stage_templates();

  double shift_sd = 0.05;       // sd of log frequency scale per subject
  double gain_sd = 0.3;         // sd of log amplitude gain per subject
  double peak_gain_sd = 0.2;    // sd of log per-subject, per-peak reweighting
  double night_shift_sd = 0.01; // extra log frequency scale per night
  double epoch_gain_sd = 0.25;  // sd of log amplitude per epoch
  double label_noise = 0.0;     // chance an epoch label is swapped to a neighbour
  double signal_scale = 10.0;   // overall uV scale

  std::string subject_prefix = "S";
  std::size_t first_subject = 1;
};

/// Hand-chosen stage chain: 0.85 self-transition, remainder split evenly over
/// the adjacent stages.
std::array<std::array<double, kNumStages>, kNumStages> stage_transition_matrix();

/// Subject-level draws, exposed so tests can inspect them.
struct SubjectProfile {
  double log_shift = 0.0;
  double log_gain = 0.0;
  std::array<std::vector<double>, kNumStages> peak_gains;
};

/// Generates subjects x nights recordings, each a concatenation of stage bouts
/// whose epochs carry band-limited noise with stage-specific spectral peaks.
/// Annotations hold one 30 s entry per epoch. Deterministic per seed.
std::vector<NightRecording> generate_synthetic_cohort(const CohortSpec& spec,
                                                      std::uint64_t seed);

}  // namespace sleepstage
