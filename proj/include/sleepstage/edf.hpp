#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sleepstage/recording.hpp"

namespace sleepstage {

/// Malformed EDF input; `offset` is the byte position where parsing failed.
class EdfError : public DataError {
 public:
  EdfError(const std::string& what, std::size_t offset);
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

struct EdfSignal {
  std::string label;
  std::string transducer;
  std::string physical_dimension = "uV";
  double physical_min = -1.0;
  double physical_max = 1.0;
  int digital_min = -32768;
  int digital_max = 32767;
  std::string prefiltering;
  std::size_t samples_per_record = 0;
  std::vector<std::int16_t> digital;  // all records concatenated

  double to_physical(std::int16_t d) const;
  std::vector<double> physical() const;
  // Rounds to the nearest digital level and clamps to [digital_min, digital_max].
  std::int16_t to_digital(double physical) const;
};

struct EdfFile {
  std::string patient;
  std::string recording;
  std::string start_date = "01.01.00";
  std::string start_time = "00.00.00";
  std::string reserved;  // "EDF+C" for EDF+ files
  std::size_t num_records = 0;
  double record_duration = 1.0;
  std::vector<EdfSignal> signals;
};

EdfFile read_edf(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> write_edf(const EdfFile& file);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path,
                      std::span<const std::uint8_t> bytes);

/// Extracts the channel whose label matches `channel` (case-insensitive,
/// surrounding blanks ignored) as a NightRecording in physical units. When an
/// "EDF Annotations" signal is present its time-stamped annotation lists are
/// returned as annotations. Lights-off/on default to the full recording.
NightRecording parse_edf(std::span<const std::uint8_t> bytes,
                         const std::string& channel);

/// Single-signal EDF of a recording's samples. The physical range is the
/// smallest whole-uV symmetric range covering the signal; the trailing partial
/// record is zero-padded. Annotations are not embedded.
EdfFile recording_to_edf(const NightRecording& rec, const std::string& channel,
                         double record_seconds = 30.0);

/// Parses EDF+ time-stamped annotation lists from the raw bytes of an
/// "EDF Annotations" signal. Record-keeping entries (empty labels) are skipped.
std::vector<Annotation> parse_edf_annotations(std::span<const std::uint8_t> raw);

}  // namespace sleepstage
