#include "sleepstage/synthetic.hpp"

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include "fft.hpp"

namespace sleepstage {

namespace {

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}

const std::array<std::vector<SleepStage>, kNumStages>& neighbours() {
  using S = SleepStage;
  static const std::array<std::vector<SleepStage>, kNumStages> table = {{
      {S::N1, S::REM},         // W
      {S::W, S::N2, S::REM},   // N1
      {S::N1, S::N3, S::REM},  // N2
      {S::N2},                 // N3
      {S::W, S::N1, S::N2},    // REM
  }};
  return table;
}

SubjectProfile draw_profile(const CohortSpec& spec, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  SubjectProfile p;
  p.log_shift = spec.shift_sd * normal(rng);
  p.log_gain = spec.gain_sd * normal(rng);
  for (std::size_t s = 0; s < kNumStages; ++s) {
    for (std::size_t k = 0; k < spec.templates[s].peaks.size(); ++k) {
      p.peak_gains[s].push_back(std::exp(spec.peak_gain_sd * normal(rng)));
    }
  }
  return p;
}

}  // namespace

StageTemplates default_stage_templates() {
  StageTemplates t;
  t[0] = {{{10.0, 3.0, 1.2}, {20.0, 1.2, 4.0}}, 1.0};               // W
  t[1] = {{{6.0, 2.5, 1.5}, {9.0, 1.0, 1.0}}, 1.0};                 // N1
  t[2] = {{{13.0, 2.5, 0.8}, {1.5, 2.5, 0.8}, {5.0, 1.2, 1.5}}, 1.0};  // N2
  t[3] = {{{1.5, 7.0, 0.7}, {3.5, 2.0, 1.0}}, 1.0};                 // N3
  t[4] = {{{6.5, 2.0, 1.5}, {3.0, 1.5, 0.8}, {18.0, 1.0, 4.0}}, 0.9};  // REM
  return t;
}

std::array<std::array<double, kNumStages>, kNumStages> stage_transition_matrix() {
  std::array<std::array<double, kNumStages>, kNumStages> m{};
  for (std::size_t s = 0; s < kNumStages; ++s) {
    m[s][s] = 0.85;
    const auto& nb = neighbours()[s];
    for (SleepStage n : nb) {
      m[s][static_cast<std::size_t>(n)] = 0.15 / static_cast<double>(nb.size());
    }
  }
  return m;
}

std::vector<NightRecording> generate_synthetic_cohort(const CohortSpec& spec,
                                                      std::uint64_t seed) {
  if (spec.nights_per_subject < 2) {
    throw DataError("synthetic cohort needs at least 2 nights per subject");
  }
  if (spec.epochs_per_night < spec.min_epochs) {
    throw DataError("epochs per night (" + std::to_string(spec.epochs_per_night) +
                    ") is below the sequence length " +
                    std::to_string(spec.min_epochs));
  }
  if (!(spec.sample_rate > 0)) throw DataError("sample rate must be positive");

  const auto epoch_samples =
      static_cast<std::size_t>(std::llround(kEpochSeconds * spec.sample_rate));
  detail::RealFft ifft(epoch_samples, detail::RealFft::Direction::Inverse);
  const std::size_t bins = ifft.bins();
  const double df = spec.sample_rate / static_cast<double>(epoch_samples);
  const auto transitions = stage_transition_matrix();

  std::vector<NightRecording> cohort;
  std::vector<std::complex<double>> spectrum(bins);
  std::vector<double> magnitude(bins);
  std::vector<double> epoch(epoch_samples);

  for (std::size_t subj = 0; subj < spec.subjects; ++subj) {
    auto subject_rng = derived_rng(seed, subj, 0);
    const SubjectProfile profile = draw_profile(spec, subject_rng);

    for (std::size_t night = 0; night < spec.nights_per_subject; ++night) {
      auto rng = derived_rng(seed, subj, night + 1);
      std::normal_distribution<double> normal(0.0, 1.0);
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      const double night_shift = profile.log_shift + spec.night_shift_sd * normal(rng);
      const double freq_scale = std::exp(night_shift);
      const double gain = spec.signal_scale * std::exp(profile.log_gain);

      NightRecording rec;
      rec.subject_id = spec.subject_prefix + std::to_string(spec.first_subject + subj);
      rec.night_index = static_cast<int>(night + 1);
      rec.sample_rate = spec.sample_rate;
      rec.signal.reserve(epoch_samples * spec.epochs_per_night);

      std::size_t stage = 0;  // nights start awake
      for (std::size_t e = 0; e < spec.epochs_per_night; ++e) {
        if (e > 0) {
          const double u = unit(rng);
          double acc = 0.0;
          std::size_t next = stage;
          for (std::size_t s = 0; s < kNumStages; ++s) {
            acc += transitions[stage][s];
            if (u < acc) {
              next = s;
              break;
            }
          }
          stage = next;
        }

        const StageTemplate& tmpl = spec.templates[stage];
        for (std::size_t k = 0; k < bins; ++k) {
          const double f = static_cast<double>(k) * df;
          double m = tmpl.background / (1.0 + f / 4.0);
          for (std::size_t p = 0; p < tmpl.peaks.size(); ++p) {
            const SpectralPeak& peak = tmpl.peaks[p];
            const double centre = peak.frequency * freq_scale;
            const double width = peak.width * freq_scale;
            const double z = (f - centre) / width;
            m += peak.amplitude * profile.peak_gains[stage][p] * std::exp(-0.5 * z * z);
          }
          magnitude[k] = m;
        }
        const double epoch_gain = gain * std::exp(spec.epoch_gain_sd * normal(rng));
        for (std::size_t k = 0; k < bins; ++k) {
          spectrum[k] = {magnitude[k] * normal(rng), magnitude[k] * normal(rng)};
        }
        spectrum[0] = {0.0, 0.0};
        ifft.inverse(spectrum, epoch);
        const double norm = epoch_gain / std::sqrt(static_cast<double>(epoch_samples));
        for (double v : epoch) rec.signal.push_back(v * norm);

        SleepStage label = static_cast<SleepStage>(stage);
        if (spec.label_noise > 0 && unit(rng) < spec.label_noise) {
          const auto& nb = neighbours()[stage];
          label = nb[static_cast<std::size_t>(unit(rng) * static_cast<double>(nb.size())) %
                     nb.size()];
        }
        rec.annotations.push_back({static_cast<double>(e) * kEpochSeconds,
                                   kEpochSeconds, stage_name(label)});
      }
      rec.lights_off = 0.0;
      rec.lights_on = rec.duration();
      cohort.push_back(std::move(rec));
    }
  }
  return cohort;
}

}  // namespace sleepstage
