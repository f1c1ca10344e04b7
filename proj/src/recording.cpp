#include "sleepstage/recording.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace sleepstage {

namespace {

std::string upper_trimmed(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  std::string out(s.substr(b, e - b));
  for (char& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

const char* stage_name(SleepStage s) {
  switch (s) {
    case SleepStage::W: return "W";
    case SleepStage::N1: return "N1";
    case SleepStage::N2: return "N2";
    case SleepStage::N3: return "N3";
    case SleepStage::REM: return "REM";
  }
  return "?";
}

std::optional<SleepStage> stage_from_name(std::string_view name) {
  const std::string u = upper_trimmed(name);
  for (SleepStage s : kAllStages) {
    if (u == stage_name(s)) return s;
  }
  return std::nullopt;
}

std::optional<SleepStage> map_stage(std::string_view raw_label) {
  const std::string u = upper_trimmed(raw_label);
  if (u == "W" || u == "SLEEP STAGE W") return SleepStage::W;
  if (u == "N1" || u == "SLEEP STAGE 1") return SleepStage::N1;
  if (u == "N2" || u == "SLEEP STAGE 2") return SleepStage::N2;
  if (u == "N3" || u == "N4" || u == "SLEEP STAGE 3" || u == "SLEEP STAGE 4") {
    return SleepStage::N3;
  }
  if (u == "REM" || u == "R" || u == "SLEEP STAGE R") return SleepStage::REM;
  if (u == "MOVEMENT" || u == "MOVEMENT TIME" || u == "UNKNOWN" ||
      u == "SLEEP STAGE ?") {
    return std::nullopt;
  }
  throw DataError("unrecognized stage label '" + std::string(raw_label) + "'");
}

std::vector<std::optional<SleepStage>> map_stages(
    const std::vector<std::string>& raw_labels) {
  std::vector<std::optional<SleepStage>> out;
  out.reserve(raw_labels.size());
  for (const auto& label : raw_labels) out.push_back(map_stage(label));
  return out;
}

NightRecording trim_in_bed(const NightRecording& rec) {
  if (!(rec.sample_rate > 0)) throw DataError("sample rate must be positive");
  if (!(rec.lights_off < rec.lights_on)) {
    throw DataError("lights_off must precede lights_on");
  }
  double start = std::max(0.0, rec.lights_off);
  const double end = std::min(rec.lights_on, rec.duration());

  // Snap to the annotation grid so epochs line up with scored intervals.
  if (!rec.annotations.empty()) {
    const double origin = rec.annotations.front().onset;
    const double k = std::ceil((start - origin) / kEpochSeconds - 1e-9);
    start = std::max(start, origin + k * kEpochSeconds);
  }
  const double span = end - start;
  const auto epochs = span > 0 ? static_cast<std::size_t>(
                                     std::floor(span / kEpochSeconds + 1e-9))
                               : 0;
  if (epochs == 0) {
    throw DataError("in-bed window [" + std::to_string(rec.lights_off) + ", " +
                    std::to_string(rec.lights_on) +
                    ") holds no complete 30 s epoch");
  }
  const double kept = static_cast<double>(epochs) * kEpochSeconds;

  NightRecording out;
  out.subject_id = rec.subject_id;
  out.night_index = rec.night_index;
  out.sample_rate = rec.sample_rate;
  const auto first = static_cast<std::size_t>(std::llround(start * rec.sample_rate));
  const auto count = static_cast<std::size_t>(std::llround(kept * rec.sample_rate));
  if (first + count > rec.signal.size()) {
    throw DataError("in-bed window exceeds the signal");
  }
  out.signal.assign(rec.signal.begin() + static_cast<std::ptrdiff_t>(first),
                    rec.signal.begin() + static_cast<std::ptrdiff_t>(first + count));
  for (const Annotation& a : rec.annotations) {
    const double lo = std::max(a.onset, start);
    const double hi = std::min(a.onset + a.duration, start + kept);
    if (hi - lo <= 1e-9) continue;
    out.annotations.push_back({lo - start, hi - lo, a.label});
  }
  out.lights_off = 0.0;
  out.lights_on = kept;
  return out;
}

std::vector<Annotation> parse_annotation_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw DataError("annotation CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  if (line != "onset_sec,duration_sec,label") {
    throw DataError("annotation CSV header must be 'onset_sec,duration_sec,label', got '" +
                    line + "'");
  }
  std::vector<Annotation> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = c1 == std::string::npos ? c1 : line.find(',', c1 + 1);
    if (c2 == std::string::npos) {
      throw DataError("annotation CSV line " + std::to_string(lineno) +
                      " needs three fields");
    }
    Annotation a;
    try {
      a.onset = std::stod(line.substr(0, c1));
      a.duration = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
    } catch (const std::exception&) {
      throw DataError("annotation CSV line " + std::to_string(lineno) +
                      " has a non-numeric onset or duration");
    }
    a.label = line.substr(c2 + 1);
    out.push_back(std::move(a));
  }
  return out;
}

std::vector<Annotation> read_annotation_csv(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_annotation_csv(ss.str());
}

void write_annotation_csv(const std::filesystem::path& path,
                          const std::vector<Annotation>& annotations) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << "onset_sec,duration_sec,label\n";
  f << std::setprecision(17);
  for (const Annotation& a : annotations) {
    f << a.onset << ',' << a.duration << ',' << a.label << '\n';
  }
}

}  // namespace sleepstage
