#include "sleepstage/preprocessing.hpp"

#include <cmath>
#include <complex>
#include <numbers>
#include <optional>

#include "binary_io.hpp"
#include "fft.hpp"
#include "sleepstage/edf.hpp"

namespace sleepstage {

namespace {

constexpr char kCacheMagic[4] = {'S', 'S', 'N', 'C'};
constexpr std::uint32_t kCacheVersion = 1;

bool on_epoch_grid(double seconds) {
  const double k = seconds / kEpochSeconds;
  return std::abs(k - std::round(k)) < 1e-6;
}

std::size_t to_samples(double seconds, double rate) {
  return static_cast<std::size_t>(std::llround(seconds * rate));
}

}  // namespace

std::size_t StftParams::frame_samples(double sample_rate) const {
  return to_samples(frame_seconds, sample_rate);
}

std::size_t StftParams::hop_samples(double sample_rate) const {
  return to_samples(hop_seconds, sample_rate);
}

std::size_t StftParams::frames(double sample_rate) const {
  const std::size_t n = to_samples(kEpochSeconds, sample_rate);
  const std::size_t frame = frame_samples(sample_rate);
  return (n - frame) / hop_samples(sample_rate) + 1;
}

SegmentedNight segment_epochs(const NightRecording& rec) {
  const std::size_t per_epoch = to_samples(kEpochSeconds, rec.sample_rate);
  if (per_epoch == 0 || rec.signal.size() % per_epoch != 0) {
    throw DataError("night duration " + std::to_string(rec.duration()) +
                    " s is not a multiple of 30 s; trim it first");
  }
  const std::size_t total = rec.signal.size() / per_epoch;
  std::vector<std::optional<SleepStage>> stage(total);
  std::vector<char> scored(total, 0);
  for (const Annotation& a : rec.annotations) {
    if (!on_epoch_grid(a.onset) || !on_epoch_grid(a.duration)) {
      throw DataError("annotation '" + a.label + "' at " + std::to_string(a.onset) +
                      " s (duration " + std::to_string(a.duration) +
                      " s) is not aligned to the 30 s epoch grid");
    }
    const auto first = static_cast<std::size_t>(std::llround(a.onset / kEpochSeconds));
    const auto count = static_cast<std::size_t>(std::llround(a.duration / kEpochSeconds));
    const std::optional<SleepStage> mapped = map_stage(a.label);
    for (std::size_t e = first; e < first + count && e < total; ++e) {
      stage[e] = mapped;
      scored[e] = 1;
    }
  }

  SegmentedNight out;
  out.total = total;
  for (std::size_t e = 0; e < total; ++e) {
    if (!scored[e] || !stage[e]) {
      ++out.excluded;
      continue;
    }
    const auto begin = rec.signal.begin() + static_cast<std::ptrdiff_t>(e * per_epoch);
    out.epochs.push_back({std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(per_epoch)),
                          *stage[e], e});
  }
  return out;
}

std::vector<double> hamming_window(std::size_t length) {
  std::vector<double> w(length, 1.0);
  if (length < 2) return w;
  const double denom = static_cast<double>(length - 1);
  for (std::size_t n = 0; n < length; ++n) {
    w[n] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / denom);
  }
  return w;
}

EpochImage stft_epoch(std::span<const double> window, double sample_rate,
                      const StftParams& params) {
  const std::size_t expected = to_samples(kEpochSeconds, sample_rate);
  if (window.size() != expected) {
    throw DataError("epoch window has " + std::to_string(window.size()) +
                    " samples, expected " + std::to_string(expected));
  }
  const std::size_t frame = params.frame_samples(sample_rate);
  const std::size_t hop = params.hop_samples(sample_rate);
  if (frame == 0 || hop == 0 || frame > params.fft_size || frame > expected) {
    throw DataError("invalid STFT frame/hop/FFT configuration");
  }
  const std::vector<double> taper = hamming_window(frame);

  EpochImage img;
  img.freq_bins = params.freq_bins();
  img.frames = params.frames(sample_rate);
  img.values.assign(img.freq_bins * img.frames, 0.0);

  detail::RealFft fft(params.fft_size, detail::RealFft::Direction::Forward);
  std::vector<double> buffer(params.fft_size, 0.0);
  std::vector<std::complex<double>> spectrum(img.freq_bins);
  for (std::size_t t = 0; t < img.frames; ++t) {
    const std::size_t start = t * hop;
    for (std::size_t n = 0; n < frame; ++n) buffer[n] = window[start + n] * taper[n];
    fft.forward(buffer, spectrum);
    for (std::size_t f = 0; f < img.freq_bins; ++f) {
      img.at(f, t) = std::log(std::abs(spectrum[f]) + params.epsilon);
    }
  }
  return img;
}

NormalizationRecord per_night_normalize(std::vector<EpochImage>& images,
                                        NormAxis axis) {
  if (images.size() < 2) {
    throw DataError("per-night normalization needs at least 2 epochs");
  }
  const std::size_t bins = images.front().freq_bins;
  const std::size_t frames = images.front().frames;
  for (const auto& img : images) {
    if (img.freq_bins != bins || img.frames != frames) {
      throw DataError("epoch images in one night differ in shape");
    }
  }
  NormalizationRecord rec;
  rec.axis = axis;
  const std::size_t groups = axis == NormAxis::PerBin ? bins : 1;
  rec.mean.assign(groups, 0.0);
  rec.stddev.assign(groups, 0.0);
  auto group_of = [&](std::size_t f) { return axis == NormAxis::PerBin ? f : 0; };
  const double count = static_cast<double>(images.size() * frames *
                                           (axis == NormAxis::PerBin ? 1 : bins));
  for (const auto& img : images) {
    for (std::size_t f = 0; f < bins; ++f) {
      for (std::size_t t = 0; t < frames; ++t) rec.mean[group_of(f)] += img.at(f, t);
    }
  }
  for (double& m : rec.mean) m /= count;
  for (const auto& img : images) {
    for (std::size_t f = 0; f < bins; ++f) {
      for (std::size_t t = 0; t < frames; ++t) {
        const double d = img.at(f, t) - rec.mean[group_of(f)];
        rec.stddev[group_of(f)] += d * d;
      }
    }
  }
  for (std::size_t g = 0; g < groups; ++g) {
    rec.stddev[g] = std::sqrt(rec.stddev[g] / count);
    if (!(rec.stddev[g] > 0.0)) {
      throw DataError(axis == NormAxis::PerBin
                          ? "frequency bin " + std::to_string(g) +
                                " has zero standard deviation over the night"
                          : std::string("night has zero standard deviation"));
    }
  }
  for (auto& img : images) {
    for (std::size_t f = 0; f < bins; ++f) {
      const std::size_t g = group_of(f);
      for (std::size_t t = 0; t < frames; ++t) {
        img.at(f, t) = (img.at(f, t) - rec.mean[g]) / rec.stddev[g];
      }
    }
  }
  return rec;
}

PreparedNight prepare_night(const NightRecording& raw, const PreprocessConfig& config) {
  const NightRecording trimmed = trim_in_bed(raw);
  const SegmentedNight seg = segment_epochs(trimmed);
  std::vector<EpochImage> images;
  images.reserve(seg.epochs.size());
  for (const auto& e : seg.epochs) {
    images.push_back(stft_epoch(e.samples, trimmed.sample_rate, config.stft));
  }
  PreparedNight night;
  night.subject_id = raw.subject_id;
  night.night_index = raw.night_index;
  night.excluded = seg.excluded;
  night.norm = per_night_normalize(images, config.norm_axis);
  night.freq_bins = images.front().freq_bins;
  night.frames = images.front().frames;
  night.images.reserve(images.size() * night.freq_bins * night.frames);
  for (const auto& img : images) {
    for (double v : img.values) night.images.push_back(static_cast<float>(v));
  }
  for (const auto& e : seg.epochs) night.labels.push_back(e.stage);
  return night;
}

std::vector<SequenceSample> assemble_sequences(const PreparedNight& night,
                                               std::size_t length,
                                               std::size_t stride) {
  if (length == 0) throw DataError("sequence length must be positive");
  if (stride == 0) throw DataError("sequence stride must be at least 1");
  if (night.num_epochs() < length) {
    throw DataError("night " + night.subject_id + "/" +
                    std::to_string(night.night_index) + " has " +
                    std::to_string(night.num_epochs()) +
                    " epochs, fewer than the sequence length " +
                    std::to_string(length));
  }
  std::vector<SequenceSample> out;
  for (std::size_t s = 0; s + length <= night.num_epochs(); s += stride) {
    out.push_back({{night.subject_id, night.night_index, s}, length});
  }
  return out;
}

std::vector<std::uint8_t> encode_night_cache(const PreparedNight& night) {
  detail::ByteWriter w;
  w.bytes(kCacheMagic, 4);
  w.u32(kCacheVersion);
  w.str(night.subject_id);
  w.i32(night.night_index);
  w.u32(static_cast<std::uint32_t>(night.num_epochs()));
  w.u32(static_cast<std::uint32_t>(night.freq_bins));
  w.u32(static_cast<std::uint32_t>(night.frames));
  w.u32(static_cast<std::uint32_t>(night.excluded));
  w.u8(static_cast<std::uint8_t>(night.norm.axis));
  w.u32(static_cast<std::uint32_t>(night.norm.mean.size()));
  for (double m : night.norm.mean) w.f64(m);
  for (double s : night.norm.stddev) w.f64(s);
  for (float v : night.images) w.f32(v);
  for (SleepStage s : night.labels) w.u8(static_cast<std::uint8_t>(s));
  return std::move(w.data());
}

PreparedNight decode_night_cache(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "night cache");
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.u8());
  if (std::string(magic, 4) != std::string(kCacheMagic, 4)) {
    throw DataError("not a night cache file (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCacheVersion) {
    throw DataError("unsupported night cache version " + std::to_string(version));
  }
  PreparedNight night;
  night.subject_id = r.str();
  night.night_index = r.i32();
  const std::size_t epochs = r.u32();
  night.freq_bins = r.u32();
  night.frames = r.u32();
  night.excluded = r.u32();
  const std::uint8_t axis = r.u8();
  if (axis > 1) throw DataError("night cache has an unknown normalization axis");
  night.norm.axis = static_cast<NormAxis>(axis);
  const std::size_t groups = r.u32();
  r.need(groups * 16);
  night.norm.mean.resize(groups);
  night.norm.stddev.resize(groups);
  for (double& m : night.norm.mean) m = r.f64();
  for (double& s : night.norm.stddev) s = r.f64();
  const std::size_t values = epochs * night.freq_bins * night.frames;
  r.need(values * 4 + epochs);
  night.images.resize(values);
  for (float& v : night.images) v = r.f32();
  night.labels.resize(epochs);
  for (SleepStage& s : night.labels) {
    const std::uint8_t b = r.u8();
    if (b >= kNumStages) throw DataError("night cache has an invalid stage byte");
    s = static_cast<SleepStage>(b);
  }
  if (!r.done()) throw DataError("night cache has trailing bytes");
  return night;
}

void write_night_cache(const std::filesystem::path& path, const PreparedNight& night) {
  write_file_bytes(path, encode_night_cache(night));
}

PreparedNight read_night_cache(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_night_cache(bytes);
  } catch (const DataError&) {
    throw;
  } catch (const std::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace sleepstage
