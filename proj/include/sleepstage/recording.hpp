#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sleepstage {

/// The five scored classes, in the order used for posteriors and tie breaks.
enum class SleepStage : std::uint8_t { W = 0, N1 = 1, N2 = 2, N3 = 3, REM = 4 };

inline constexpr std::size_t kNumStages = 5;
inline constexpr double kEpochSeconds = 30.0;

const char* stage_name(SleepStage s);
std::optional<SleepStage> stage_from_name(std::string_view name);
inline constexpr std::array<SleepStage, kNumStages> kAllStages = {
    SleepStage::W, SleepStage::N1, SleepStage::N2, SleepStage::N3,
    SleepStage::REM};

struct Annotation {
  double onset = 0.0;     // seconds from recording start
  double duration = 0.0;  // seconds
  std::string label;      // raw scorer label
};

/// One subject-night, single channel, physical units (uV).
struct NightRecording {
  std::string subject_id;
  int night_index = 1;  // 1-based
  std::vector<double> signal;
  double sample_rate = 100.0;
  std::vector<Annotation> annotations;
  double lights_off = 0.0;
  double lights_on = 0.0;

  double duration() const {
    return static_cast<double>(signal.size()) / sample_rate;
  }
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// N4 merges into N3; MOVEMENT and UNKNOWN map to nullopt (excluded).
/// Accepts the short labels {W, N1, N2, N3, N4, REM, MOVEMENT, UNKNOWN} and
/// the Sleep-EDF hypnogram spellings ("Sleep stage 1", "Movement time", ...).
/// Throws DataError naming any other label.
std::vector<std::optional<SleepStage>> map_stages(
    const std::vector<std::string>& raw_labels);
std::optional<SleepStage> map_stage(std::string_view raw_label);

/// Crops signal and annotations to [lights_off, lights_on) and drops the
/// trailing partial epoch. The start is moved forward to the next 30 s
/// boundary of the annotation grid when it falls between epochs.
NightRecording trim_in_bed(const NightRecording& rec);

/// Sidecar annotation CSV: header `onset_sec,duration_sec,label`.
std::vector<Annotation> read_annotation_csv(const std::filesystem::path& path);
std::vector<Annotation> parse_annotation_csv(std::string_view text);
void write_annotation_csv(const std::filesystem::path& path,
                          const std::vector<Annotation>& annotations);

}  // namespace sleepstage
