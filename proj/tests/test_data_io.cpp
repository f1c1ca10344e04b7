#include <doctest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>
#include <random>

#include "sleepstage/edf.hpp"
#include "sleepstage/preprocessing.hpp"
#include "sleepstage/recording.hpp"
#include "sleepstage/synthetic.hpp"

using namespace sleepstage;

namespace {

NightRecording flat_night(double seconds, double rate = 100.0) {
  NightRecording rec;
  rec.subject_id = "T";
  rec.sample_rate = rate;
  rec.signal.assign(static_cast<std::size_t>(seconds * rate), 0.0);
  for (std::size_t i = 0; i < rec.signal.size(); ++i) rec.signal[i] = static_cast<double>(i);
  for (double t = 0; t + kEpochSeconds <= seconds; t += kEpochSeconds) {
    rec.annotations.push_back({t, kEpochSeconds, "N2"});
  }
  rec.lights_off = 0.0;
  rec.lights_on = seconds;
  return rec;
}

EdfFile constant_edf(std::int16_t value, std::size_t records) {
  EdfFile f;
  f.patient = "X";
  f.recording = "test";
  f.num_records = records;
  f.record_duration = 1.0;
  EdfSignal s;
  s.label = "EEG Fpz-Cz";
  s.physical_min = -100.0;
  s.physical_max = 100.0;
  s.digital_min = -32767;
  s.digital_max = 32767;
  s.samples_per_record = 100;
  s.digital.assign(records * 100, value);
  f.signals.push_back(s);
  return f;
}

// Plain DFT power spectrum, independent of the FFT backend.
std::vector<double> periodogram(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<double> p(n / 2 + 1);
  for (std::size_t k = 0; k < p.size(); ++k) {
    std::complex<double> acc = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      acc += x[t] * std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * t) /
                                        static_cast<double>(n));
    }
    p[k] = std::norm(acc);
  }
  return p;
}

}  // namespace

TEST_CASE("map_stages merges N4 and excludes movement") {
  const auto m = map_stages({"W", "N4", "MOVEMENT", "REM"});
  REQUIRE(m.size() == 4);
  CHECK(m[0] == SleepStage::W);
  CHECK(m[1] == SleepStage::N3);
  CHECK_FALSE(m[2].has_value());
  CHECK(m[3] == SleepStage::REM);
  CHECK_FALSE(map_stage("UNKNOWN").has_value());

  const auto w = map_stages({"W", "W", "W"});
  for (const auto& s : w) CHECK(s == SleepStage::W);
  CHECK(map_stages({}).empty());

  CHECK(map_stage("Sleep stage 4") == SleepStage::N3);
  CHECK(map_stage("Sleep stage R") == SleepStage::REM);
  CHECK_FALSE(map_stage("Movement time").has_value());
}

TEST_CASE("map_stages rejects unknown labels by name") {
  try {
    map_stages({"W", "N5"});
    FAIL("expected an error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("N5") != std::string::npos);
  }
}

TEST_CASE("trim_in_bed crops to the lights window") {
  NightRecording rec = flat_night(8 * 3600.0);
  rec.lights_off = 1800.0;
  rec.lights_on = 27000.0;
  const NightRecording t = trim_in_bed(rec);
  CHECK(t.duration() == doctest::Approx(25200.0));
  CHECK(t.annotations.size() == 840);
  CHECK(t.signal.front() == 1800.0 * 100.0);
  CHECK(t.annotations.front().onset == 0.0);

  const NightRecording same = trim_in_bed(flat_night(600.0));
  const NightRecording src = flat_night(600.0);
  CHECK(same.signal == src.signal);
  CHECK(same.annotations.size() == src.annotations.size());

  NightRecording shortwin = flat_night(600.0);
  shortwin.lights_off = 60.0;
  shortwin.lights_on = 155.0;
  const NightRecording s = trim_in_bed(shortwin);
  CHECK(s.signal.size() == 9000);
  CHECK(s.annotations.size() == 3);

  NightRecording empty = flat_night(600.0);
  empty.lights_off = 60.0;
  empty.lights_on = 80.0;
  CHECK_THROWS_AS(trim_in_bed(empty), DataError);
}

TEST_CASE("retained epochs carry exactly one label after mapping and trimming") {
  NightRecording rec = flat_night(900.0);
  const char* labels[] = {"W", "N1", "N4", "MOVEMENT", "REM", "UNKNOWN", "N3"};
  for (std::size_t i = 0; i < rec.annotations.size(); ++i) {
    rec.annotations[i].label = labels[i % 7];
  }
  rec.lights_off = 45.0;
  const SegmentedNight seg = segment_epochs(trim_in_bed(rec));
  for (const auto& e : seg.epochs) {
    CHECK(static_cast<int>(e.stage) < static_cast<int>(kNumStages));
    CHECK(e.samples.size() == 3000);
  }
  CHECK(seg.epochs.size() + seg.excluded == seg.total);
}

TEST_CASE("EDF constant mid-range digital value maps to mid-range physical") {
  const auto bytes = write_edf(constant_edf(0, 10));
  const NightRecording rec = parse_edf(bytes, "eeg fpz-cz");
  REQUIRE(rec.signal.size() == 1000);
  for (double v : rec.signal) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(rec.sample_rate == 100.0);
  CHECK(rec.lights_on == doctest::Approx(10.0));
}

TEST_CASE("EDF physical rescale follows the affine formula") {
  EdfSignal s;
  s.physical_min = -50.0;
  s.physical_max = 150.0;
  s.digital_min = -2048;
  s.digital_max = 2047;
  const double expect = (1000.0 - (-2048.0)) * 200.0 / 4095.0 - 50.0;
  CHECK(s.to_physical(1000) == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("EDF with a truncated data section is rejected with an offset") {
  EdfFile f = constant_edf(7, 5);
  EdfSignal second = f.signals[0];
  second.label = "EEG Pz-Oz";
  f.signals.push_back(second);
  auto bytes = write_edf(f);
  bytes.resize(bytes.size() - 300);
  try {
    read_edf(bytes);
    FAIL("expected an EdfError");
  } catch (const EdfError& e) {
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    CHECK(e.offset() > 0);
  }

  std::vector<std::uint8_t> header_only(100, ' ');
  CHECK_THROWS_AS(read_edf(header_only), EdfError);
}

TEST_CASE("EDF writer and parser round-trip digital samples") {
  std::mt19937 rng(11);
  std::uniform_int_distribution<int> dist(-32767, 32767);
  EdfFile f = constant_edf(0, 7);
  for (auto& d : f.signals[0].digital) d = static_cast<std::int16_t>(dist(rng));
  EdfSignal other = f.signals[0];
  other.label = "EOG";
  other.samples_per_record = 50;
  other.digital.resize(350);
  for (auto& d : other.digital) d = static_cast<std::int16_t>(dist(rng));
  f.signals.push_back(other);

  const EdfFile back = read_edf(write_edf(f));
  REQUIRE(back.signals.size() == 2);
  CHECK(back.num_records == 7);
  CHECK(back.signals[0].digital == f.signals[0].digital);
  CHECK(back.signals[1].digital == f.signals[1].digital);
  CHECK(back.signals[1].label == "EOG");
  CHECK(write_edf(back) == write_edf(f));
}

TEST_CASE("EDF missing channel lists the available labels") {
  const auto bytes = write_edf(constant_edf(0, 2));
  try {
    parse_edf(bytes, "EEG C3");
    FAIL("expected an error");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("EEG C3") != std::string::npos);
    CHECK(msg.find("EEG Fpz-Cz") != std::string::npos);
  }
}

TEST_CASE("EDF+ annotation lists are parsed") {
  static const char kTal[] = "+0\x14\x14\0"
                             "+0\x15" "30\x14Sleep stage W\x14\0"
                             "+30\x15" "60\x14Sleep stage 4\x14\0";
  const std::string tal(kTal, sizeof(kTal) - 1);
  const std::vector<std::uint8_t> raw(tal.begin(), tal.end());
  const auto ann = parse_edf_annotations(raw);
  REQUIRE(ann.size() == 2);
  CHECK(ann[0].onset == 0.0);
  CHECK(ann[0].duration == 30.0);
  CHECK(ann[0].label == "Sleep stage W");
  CHECK(ann[1].onset == 30.0);
  CHECK(ann[1].duration == 60.0);
  CHECK(map_stage(ann[1].label) == SleepStage::N3);
}

TEST_CASE("annotation CSV requires its header and round-trips") {
  const auto ann = parse_annotation_csv("onset_sec,duration_sec,label\n0,30,W\n30,60,N4\n");
  REQUIRE(ann.size() == 2);
  CHECK(ann[1].onset == 30.0);
  CHECK(ann[1].duration == 60.0);
  CHECK(ann[1].label == "N4");
  CHECK_THROWS_AS(parse_annotation_csv("onset,duration,label\n0,30,W\n"), DataError);
  CHECK_THROWS_AS(parse_annotation_csv("onset_sec,duration_sec,label\n0,abc,W\n"), DataError);

  const auto path = std::filesystem::temp_directory_path() / "sleepstage_ann_test.csv";
  write_annotation_csv(path, ann);
  const auto back = read_annotation_csv(path);
  std::filesystem::remove(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].label == "W");
  CHECK(back[1].duration == 60.0);
}

TEST_CASE("synthetic cohort size and determinism") {
  CohortSpec spec;
  spec.subjects = 10;
  spec.nights_per_subject = 2;
  spec.epochs_per_night = 200;
  const auto a = generate_synthetic_cohort(spec, 5);
  REQUIRE(a.size() == 20);
  for (const auto& r : a) {
    CHECK(r.duration() == doctest::Approx(6000.0));
    CHECK(r.annotations.size() == 200);
  }
  CHECK(a[2].subject_id == "S2");
  CHECK(a[3].night_index == 2);

  spec.subjects = 2;
  const auto x = generate_synthetic_cohort(spec, 9);
  const auto y = generate_synthetic_cohort(spec, 9);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(x[i].signal == y[i].signal);
    REQUIRE(x[i].annotations.size() == y[i].annotations.size());
    for (std::size_t k = 0; k < x[i].annotations.size(); ++k) {
      CHECK(x[i].annotations[k].label == y[i].annotations[k].label);
    }
  }
  const auto z = generate_synthetic_cohort(spec, 10);
  CHECK(z[0].signal != x[0].signal);
}

TEST_CASE("synthetic cohort rejects nights shorter than a sequence") {
  CohortSpec spec;
  spec.epochs_per_night = 19;
  spec.min_epochs = 20;
  CHECK_THROWS_AS(generate_synthetic_cohort(spec, 1), DataError);
  spec.epochs_per_night = 40;
  spec.nights_per_subject = 1;
  CHECK_THROWS_AS(generate_synthetic_cohort(spec, 1), DataError);
}

TEST_CASE("synthetic N3 epochs peak in the 1-2 Hz band") {
  CohortSpec spec;
  spec.subjects = 1;
  spec.epochs_per_night = 120;
  spec.shift_sd = 0.0;
  spec.night_shift_sd = 0.0;
  spec.peak_gain_sd = 0.0;
  const auto cohort = generate_synthetic_cohort(spec, 3);
  const NightRecording& rec = cohort.front();
  std::vector<double> power;
  std::size_t n3 = 0;
  for (std::size_t e = 0; e < rec.annotations.size() && n3 < 8; ++e) {
    if (rec.annotations[e].label != "N3") continue;
    std::vector<double> x(rec.signal.begin() + static_cast<std::ptrdiff_t>(e * 3000),
                          rec.signal.begin() + static_cast<std::ptrdiff_t>((e + 1) * 3000));
    const auto p = periodogram(x);
    if (power.empty()) power.assign(p.size(), 0.0);
    for (std::size_t k = 0; k < p.size(); ++k) power[k] += p[k];
    ++n3;
  }
  REQUIRE(n3 > 0);
  // Average 0.5 Hz bands (15 bins of 1/30 Hz) and find the strongest one.
  double best = -1.0;
  double best_centre = 0.0;
  for (std::size_t start = 0; start + 15 <= power.size(); start += 15) {
    double band = 0.0;
    for (std::size_t k = start; k < start + 15; ++k) band += power[k];
    if (band > best) {
      best = band;
      best_centre = (static_cast<double>(start) + 7.0) / 30.0;
    }
  }
  CHECK(best_centre >= 1.0);
  CHECK(best_centre <= 2.0);
}

TEST_CASE("synthetic nights are closer within a subject than across subjects") {
  CohortSpec spec;
  spec.subjects = 6;
  spec.epochs_per_night = 60;
  spec.min_epochs = 5;
  int wins = 0;
  const int seeds = 20;
  for (int seed = 0; seed < seeds; ++seed) {
    const auto cohort = generate_synthetic_cohort(spec, static_cast<std::uint64_t>(seed));
    std::vector<std::vector<double>> profile;
    for (const auto& rec : cohort) {
      std::vector<double> mean(129, 0.0);
      const std::size_t epochs = rec.signal.size() / 3000;
      for (std::size_t e = 0; e < epochs; ++e) {
        const EpochImage img = stft_epoch(
            std::span<const double>(rec.signal).subspan(e * 3000, 3000), 100.0);
        for (std::size_t f = 0; f < 129; ++f) {
          for (std::size_t t = 0; t < 29; ++t) mean[f] += img.at(f, t);
        }
      }
      for (double& m : mean) m /= static_cast<double>(epochs * 29);
      profile.push_back(mean);
    }
    auto dist = [&](std::size_t i, std::size_t j) {
      double d = 0.0;
      for (std::size_t f = 0; f < 129; ++f) {
        d += (profile[i][f] - profile[j][f]) * (profile[i][f] - profile[j][f]);
      }
      return std::sqrt(d);
    };
    double within = 0.0, across = 0.0;
    int nw = 0, na = 0;
    for (std::size_t i = 0; i < profile.size(); ++i) {
      for (std::size_t j = i + 1; j < profile.size(); ++j) {
        if (i / 2 == j / 2) {
          within += dist(i, j);
          ++nw;
        } else {
          across += dist(i, j);
          ++na;
        }
      }
    }
    if (within / nw < across / na) ++wins;
  }
  CHECK(wins >= 19);
}
