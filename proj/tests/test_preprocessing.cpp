#include <doctest.h>

#include <cmath>
#include <complex>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <random>
#include <set>

#include "sleepstage/preprocessing.hpp"
#include "sleepstage/synthetic.hpp"

using namespace sleepstage;

namespace {

std::vector<double> noise(std::size_t n, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> x(n);
  for (double& v : x) v = g(rng);
  return x;
}

NightRecording noise_night(std::size_t epochs, std::uint32_t seed, double scale = 1.0) {
  NightRecording rec;
  rec.subject_id = "P";
  rec.signal = noise(epochs * 3000, seed);
  for (double& v : rec.signal) v *= scale;
  for (std::size_t e = 0; e < epochs; ++e) {
    rec.annotations.push_back({static_cast<double>(e) * 30.0, 30.0,
                               stage_name(static_cast<SleepStage>(e % 5))});
  }
  rec.lights_on = rec.duration();
  return rec;
}

PreparedNight labelled_night(std::size_t epochs) {
  PreparedNight n;
  n.subject_id = "Q";
  n.freq_bins = 2;
  n.frames = 3;
  n.images.assign(epochs * 6, 0.5f);
  n.labels.assign(epochs, SleepStage::N2);
  return n;
}

}  // namespace

TEST_CASE("default STFT yields 129 x 29 images") {
  const EpochImage img = stft_epoch(noise(3000, 1), 100.0);
  CHECK(img.freq_bins == 129);
  CHECK(img.frames == 29);
  CHECK(img.values.size() == 129 * 29);
  for (double v : img.values) CHECK(std::isfinite(v));
}

TEST_CASE("10 Hz sine peaks at bin 26") {
  std::vector<double> x(3000);
  for (std::size_t n = 0; n < x.size(); ++n) {
    x[n] = std::sin(2.0 * std::numbers::pi * 10.0 * static_cast<double>(n) / 100.0);
  }
  const EpochImage img = stft_epoch(x, 100.0);
  for (std::size_t t = 0; t < img.frames; ++t) {
    std::size_t best = 0;
    for (std::size_t f = 1; f < img.freq_bins; ++f) {
      if (img.at(f, t) > img.at(best, t)) best = f;
    }
    CHECK(best == 26);
  }
}

TEST_CASE("zero window gives a constant log(epsilon) image") {
  const EpochImage img = stft_epoch(std::vector<double>(3000, 0.0), 100.0);
  for (double v : img.values) CHECK(v == std::log(1e-6));
}

TEST_CASE("STFT matches a direct windowed DFT") {
  const auto x = noise(3000, 4);
  const EpochImage img = stft_epoch(x, 100.0);
  for (std::size_t t : {0u, 13u, 28u}) {
    for (std::size_t f : {0u, 1u, 40u, 128u}) {
      std::complex<double> acc = 0.0;
      for (std::size_t n = 0; n < 200; ++n) {
        const double w = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * n / 199.0);
        acc += x[t * 100 + n] * w *
               std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(f * n) / 256.0);
      }
      CHECK(img.at(f, t) == doctest::Approx(std::log(std::abs(acc) + 1e-6)).epsilon(1e-10));
    }
  }
}

TEST_CASE("STFT rejects a window of the wrong length") {
  CHECK_THROWS_AS(stft_epoch(std::vector<double>(2999, 0.0), 100.0), DataError);
}

TEST_CASE("hamming window is symmetric") {
  const auto w = hamming_window(200);
  CHECK(w.front() == doctest::Approx(0.08));
  CHECK(w.back() == doctest::Approx(0.08));
  for (std::size_t n = 0; n < 100; ++n) CHECK(w[n] == doctest::Approx(w[199 - n]).epsilon(1e-14));
}

TEST_CASE("per-night normalization gives zero mean and unit std per bin") {
  std::vector<EpochImage> images;
  for (std::uint32_t e = 0; e < 12; ++e) images.push_back(stft_epoch(noise(3000, 100 + e), 100.0));
  const NormalizationRecord rec = per_night_normalize(images);
  CHECK(rec.mean.size() == 129);
  for (std::size_t f = 0; f < 129; ++f) {
    double sum = 0.0, sq = 0.0;
    for (const auto& img : images) {
      for (std::size_t t = 0; t < 29; ++t) sum += img.at(f, t);
    }
    const double mean = sum / (12 * 29);
    for (const auto& img : images) {
      for (std::size_t t = 0; t < 29; ++t) sq += (img.at(f, t) - mean) * (img.at(f, t) - mean);
    }
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(std::sqrt(sq / (12 * 29)) - 1.0) < 1e-9);
  }
}

TEST_CASE("global normalization uses one statistic pair") {
  std::vector<EpochImage> images;
  for (std::uint32_t e = 0; e < 4; ++e) images.push_back(stft_epoch(noise(3000, e), 100.0));
  const NormalizationRecord rec = per_night_normalize(images, NormAxis::Global);
  CHECK(rec.mean.size() == 1);
  double sum = 0.0, sq = 0.0;
  for (const auto& img : images) {
    for (double v : img.values) {
      sum += v;
      sq += v * v;
    }
  }
  const double n = 4.0 * 129 * 29;
  CHECK(std::abs(sum / n) < 1e-9);
  CHECK(std::abs(sq / n - 1.0) < 1e-9);
}

TEST_CASE("raw amplitude scale shifts log images by log(k) up to the epsilon term") {
  const auto x = noise(3000, 7);
  auto x10 = x;
  for (double& v : x10) v *= 10.0;
  const EpochImage a = stft_epoch(x, 100.0);
  const EpochImage b = stft_epoch(x10, 100.0);
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    // a = log(|X| + eps) exactly, so the scaled image is log(10 |X| + eps).
    const double mag = std::exp(a.values[i]) - 1e-6;
    CHECK(b.values[i] == doctest::Approx(std::log(10.0 * mag + 1e-6)).epsilon(1e-9));
  }
}

TEST_CASE("normalized images are invariant to raw amplitude scale") {
  // Amplitudes far above the log epsilon, where the shift is exactly log(10).
  for (double sd : {1e4, 1e6}) {
    std::vector<EpochImage> ia, ib;
    for (std::uint32_t e = 0; e < 10; ++e) {
      auto x = noise(3000, 50 + e);
      for (double& v : x) v *= sd;
      auto x10 = x;
      for (double& v : x10) v *= 10.0;
      ia.push_back(stft_epoch(x, 100.0));
      ib.push_back(stft_epoch(x10, 100.0));
    }
    per_night_normalize(ia);
    per_night_normalize(ib);
    double worst = 0.0;
    for (std::size_t e = 0; e < 10; ++e) {
      for (std::size_t i = 0; i < ia[e].values.size(); ++i) {
        worst = std::max(worst, std::abs(ia[e].values[i] - ib[e].values[i]));
      }
    }
    CHECK(worst < (sd < 1e5 ? 1e-6 : 1e-9));
  }

  // At microvolt scale the epsilon term leaves a small residue, mostly in the
  // real-valued DC and Nyquist bins.
  const PreparedNight a = prepare_night(noise_night(10, 7, 30.0));
  const PreparedNight b = prepare_night(noise_night(10, 7, 300.0));
  REQUIRE(a.images.size() == b.images.size());
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    CHECK(std::abs(a.images[i] - b.images[i]) < 1e-3f);
  }
}

TEST_CASE("constant bin triggers a zero-std error naming the bin") {
  std::vector<EpochImage> images(3);
  for (auto& img : images) {
    img.freq_bins = 3;
    img.frames = 2;
    img.values = {1.0, 2.0, 5.0, 5.0, 0.0, 3.0};
  }
  try {
    per_night_normalize(images);
    FAIL("expected an error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("bin 1") != std::string::npos);
  }
  std::vector<EpochImage> one(1, images[0]);
  CHECK_THROWS_AS(per_night_normalize(one), DataError);
}

TEST_CASE("segment_epochs splices out excluded epochs") {
  NightRecording rec = noise_night(840, 3, 1.0);
  rec.annotations[10].label = "MOVEMENT";
  rec.annotations[11].label = "MOVEMENT";
  rec.annotations[500].label = "MOVEMENT";
  const SegmentedNight seg = segment_epochs(rec);
  CHECK(seg.epochs.size() == 837);
  CHECK(seg.excluded == 3);
  CHECK(seg.total == 840);
  CHECK(seg.epochs[10].index == 12);
  CHECK(seg.epochs[10].samples.front() == rec.signal[12 * 3000]);
  for (const auto& e : seg.epochs) CHECK(e.samples.size() == 3000);

  const SegmentedNight clean = segment_epochs(noise_night(30, 3, 1.0));
  CHECK(clean.epochs.size() == 30);
  CHECK(clean.excluded == 0);
}

TEST_CASE("segment_epochs treats unscored epochs as excluded") {
  NightRecording rec = noise_night(6, 2);
  rec.annotations.erase(rec.annotations.begin() + 2);
  const SegmentedNight seg = segment_epochs(rec);
  CHECK(seg.epochs.size() == 5);
  CHECK(seg.excluded == 1);
}

TEST_CASE("segment_epochs rejects annotations off the 30 s grid") {
  NightRecording rec = noise_night(4, 2);
  rec.annotations[1].onset = 35.0;
  CHECK_THROWS_AS(segment_epochs(rec), DataError);
  NightRecording partial = noise_night(4, 2);
  partial.signal.resize(partial.signal.size() - 100);
  CHECK_THROWS_AS(segment_epochs(partial), DataError);
}

TEST_CASE("assemble_sequences counts windows") {
  CHECK(assemble_sequences(labelled_night(100), 20, 1).size() == 81);
  CHECK(assemble_sequences(labelled_night(100), 20, 20).size() == 5);
  CHECK(assemble_sequences(labelled_night(20), 20, 1).size() == 1);
  CHECK_THROWS_AS(assemble_sequences(labelled_night(19), 20, 1), DataError);
  CHECK_THROWS_AS(assemble_sequences(labelled_night(40), 20, 0), DataError);

  const auto seqs = assemble_sequences(labelled_night(100), 20, 20);
  CHECK(seqs[3].origin.start == 60);
  CHECK(seqs[3].length == 20);
  CHECK(seqs[3].origin.subject_id == "Q");
}

TEST_CASE("stride-1 sequences cover every epoch") {
  for (std::size_t n : {20u, 21u, 57u}) {
    std::set<std::size_t> covered;
    for (const auto& s : assemble_sequences(labelled_night(n), 20, 1)) {
      for (std::size_t l = 0; l < s.length; ++l) covered.insert(s.origin.start + l);
    }
    CHECK(covered.size() == n);
  }
}

TEST_CASE("prepare_night on a synthetic night") {
  CohortSpec spec;
  spec.subjects = 1;
  spec.epochs_per_night = 40;
  const auto cohort = generate_synthetic_cohort(spec, 2);
  const PreparedNight night = prepare_night(cohort[1]);
  CHECK(night.subject_id == "S1");
  CHECK(night.night_index == 2);
  CHECK(night.num_epochs() == 40);
  CHECK(night.freq_bins == 129);
  CHECK(night.frames == 29);
  CHECK(night.images.size() == 40 * 129 * 29);
  CHECK(night.image(3).size() == 129 * 29);
  CHECK(night.labels[0] == SleepStage::W);
}

TEST_CASE("night cache round-trips bit-exactly") {
  const PreparedNight night = prepare_night(noise_night(8, 5));
  const auto bytes = encode_night_cache(night);
  const PreparedNight back = decode_night_cache(bytes);
  CHECK(back.subject_id == night.subject_id);
  CHECK(back.night_index == night.night_index);
  CHECK(back.freq_bins == 129);
  CHECK(back.frames == 29);
  CHECK(back.labels == night.labels);
  CHECK(back.norm.mean == night.norm.mean);
  CHECK(back.norm.stddev == night.norm.stddev);
  CHECK(std::memcmp(back.images.data(), night.images.data(), night.images.size() * 4) == 0);
  CHECK(encode_night_cache(back) == bytes);

  const auto path = std::filesystem::temp_directory_path() / "sleepstage_cache_test.bin";
  write_night_cache(path, night);
  CHECK(encode_night_cache(read_night_cache(path)) == bytes);
  std::filesystem::remove(path);

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_night_cache(bad), DataError);
  auto cut = bytes;
  cut.resize(cut.size() - 10);
  CHECK_THROWS(decode_night_cache(cut));
}
