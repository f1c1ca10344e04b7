#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sleepstage/recording.hpp"

namespace sleepstage {

struct StftParams {
  double frame_seconds = 2.0;
  double hop_seconds = 1.0;
  std::size_t fft_size = 256;
  double epsilon = 1e-6;  // added to the amplitude before the log

  std::size_t frame_samples(double sample_rate) const;
  std::size_t hop_samples(double sample_rate) const;
  std::size_t freq_bins() const { return fft_size / 2 + 1; }
  std::size_t frames(double sample_rate) const;
};

enum class NormAxis : std::uint8_t { PerBin = 0, Global = 1 };

struct PreprocessConfig {
  StftParams stft;
  NormAxis norm_axis = NormAxis::PerBin;
};

/// F x T log-magnitude image, row-major by frequency: value(f, t) = values[f*T + t].
struct EpochImage {
  std::size_t freq_bins = 0;
  std::size_t frames = 0;
  std::vector<double> values;

  double& at(std::size_t f, std::size_t t) { return values[f * frames + t]; }
  double at(std::size_t f, std::size_t t) const { return values[f * frames + t]; }
};

struct LabeledEpoch {
  std::vector<double> samples;
  SleepStage stage;
  std::size_t index;  // position in the trimmed night before exclusion
};

struct SegmentedNight {
  std::vector<LabeledEpoch> epochs;
  std::size_t total = 0;
  std::size_t excluded = 0;
};

/// Cuts a trimmed night into 30 s windows labelled by the covering
/// annotation. Excluded epochs (MOVEMENT/UNKNOWN or unscored) are removed and
/// the remainder spliced together.
SegmentedNight segment_epochs(const NightRecording& rec);

/// Log-amplitude STFT of one epoch: Hamming-tapered frames zero-padded to
/// fft_size, one-sided spectrum, log(|X| + epsilon).
EpochImage stft_epoch(std::span<const double> window, double sample_rate,
                      const StftParams& params = {});

/// Hamming taper, symmetric form: 0.54 - 0.46 cos(2 pi n / (N - 1)).
std::vector<double> hamming_window(std::size_t length);

struct NormalizationRecord {
  NormAxis axis = NormAxis::PerBin;
  std::vector<double> mean;  // one entry per bin (one total for Global)
  std::vector<double> stddev;
};

/// Standardizes all images of one night with that night's statistics
/// (population standard deviation). Throws DataError naming a zero-variance
/// bin.
NormalizationRecord per_night_normalize(std::vector<EpochImage>& images,
                                        NormAxis axis = NormAxis::PerBin);

/// One night after preprocessing; images are stored in single precision,
/// epoch-major, each epoch F x T row-major.
struct PreparedNight {
  std::string subject_id;
  int night_index = 1;
  std::size_t freq_bins = 0;
  std::size_t frames = 0;
  std::vector<float> images;
  std::vector<SleepStage> labels;
  NormalizationRecord norm;
  std::size_t excluded = 0;

  std::size_t num_epochs() const { return labels.size(); }
  std::span<const float> image(std::size_t epoch) const {
    return std::span<const float>(images).subspan(epoch * freq_bins * frames,
                                                  freq_bins * frames);
  }
};

/// Trim, segment, transform and normalize one raw night.
PreparedNight prepare_night(const NightRecording& raw,
                            const PreprocessConfig& config = {});

struct SequenceOrigin {
  std::string subject_id;
  int night_index = 1;
  std::size_t start = 0;
};

/// L consecutive epochs of one prepared night. Images and labels are read from
/// the night through `start`; the sample does not copy them.
struct SequenceSample {
  SequenceOrigin origin;
  std::size_t length = 0;
};

/// Starts at 0, stride, 2*stride, ... while a full window of `length` fits.
std::vector<SequenceSample> assemble_sequences(const PreparedNight& night,
                                               std::size_t length,
                                               std::size_t stride = 1);

/// Binary night cache (format in docs/formats.md).
void write_night_cache(const std::filesystem::path& path, const PreparedNight& night);
PreparedNight read_night_cache(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_night_cache(const PreparedNight& night);
PreparedNight decode_night_cache(std::span<const std::uint8_t> bytes);

}  // namespace sleepstage
