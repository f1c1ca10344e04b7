#include "sleepstage/edf.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

namespace sleepstage {

namespace {

constexpr std::size_t kMainHeader = 256;
constexpr std::size_t kSignalHeader = 256;

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == ' ' || s.back() == '\0')) s.pop_back();
  std::size_t b = 0;
  while (b < s.size() && s[b] == ' ') ++b;
  return s.substr(b);
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

class HeaderReader {
 public:
  explicit HeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::string field(std::size_t width, const char* what) {
    if (pos_ + width > bytes_.size()) {
      throw EdfError(std::string("header truncated while reading ") + what,
                     pos_);
    }
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), width);
    pos_ += width;
    return trim(s);
  }

  double number(std::size_t width, const char* what) {
    const std::size_t at = pos_;
    const std::string s = field(width, what);
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw EdfError(std::string("invalid number '") + s + "' for " + what, at);
    }
  }

  std::size_t count(std::size_t width, const char* what) {
    const std::size_t at = pos_;
    const double v = number(width, what);
    if (v < 0 || v != std::floor(v)) {
      throw EdfError(std::string("invalid count for ") + what, at);
    }
    return static_cast<std::size_t>(v);
  }

  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void put(std::vector<std::uint8_t>& out, const std::string& value,
         std::size_t width) {
  std::string s = value.substr(0, width);
  s.resize(width, ' ');
  out.insert(out.end(), s.begin(), s.end());
}

std::string fmt_number(double v, std::size_t width) {
  for (int precision = 10; precision >= 0; --precision) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", precision, v);
    std::string s(buf);
    if (s.find('.') != std::string::npos) {
      while (s.back() == '0') s.pop_back();
      if (s.back() == '.') s.pop_back();
    }
    if (s == "-0") s = "0";
    if (s.size() <= width) return s;
  }
  throw EdfError("value does not fit an EDF header field", 0);
}

}  // namespace

EdfError::EdfError(const std::string& what, std::size_t offset)
    : DataError("EDF byte " + std::to_string(offset) + ": " + what),
      offset_(offset) {}

double EdfSignal::to_physical(std::int16_t d) const {
  return (static_cast<double>(d) - digital_min) * (physical_max - physical_min) /
             static_cast<double>(digital_max - digital_min) +
         physical_min;
}

std::vector<double> EdfSignal::physical() const {
  std::vector<double> out(digital.size());
  std::transform(digital.begin(), digital.end(), out.begin(),
                 [this](std::int16_t d) { return to_physical(d); });
  return out;
}

std::int16_t EdfSignal::to_digital(double physical) const {
  const double d = (physical - physical_min) *
                       static_cast<double>(digital_max - digital_min) /
                       (physical_max - physical_min) +
                   digital_min;
  const double clamped = std::clamp(std::round(d), static_cast<double>(digital_min),
                                    static_cast<double>(digital_max));
  return static_cast<std::int16_t>(clamped);
}

EdfFile read_edf(std::span<const std::uint8_t> bytes) {
  HeaderReader h(bytes);
  EdfFile file;
  const std::string version = h.field(8, "version");
  if (version != "0") throw EdfError("unsupported version '" + version + "'", 0);
  file.patient = h.field(80, "patient");
  file.recording = h.field(80, "recording");
  file.start_date = h.field(8, "start date");
  file.start_time = h.field(8, "start time");
  const std::size_t header_bytes = h.count(8, "header size");
  file.reserved = h.field(44, "reserved");
  const std::size_t records_at = h.pos();
  const double records = h.number(8, "number of records");
  if (records < 0) {
    throw EdfError("number of data records is unknown (-1)", records_at);
  }
  file.num_records = static_cast<std::size_t>(records);
  file.record_duration = h.number(8, "record duration");
  const std::size_t ns = h.count(4, "number of signals");
  if (ns == 0) throw EdfError("file declares no signals", 252);
  if (header_bytes != kMainHeader + ns * kSignalHeader) {
    throw EdfError("header size " + std::to_string(header_bytes) +
                       " does not match " + std::to_string(ns) + " signals",
                   184);
  }

  file.signals.resize(ns);
  for (auto& s : file.signals) s.label = h.field(16, "label");
  for (auto& s : file.signals) s.transducer = h.field(80, "transducer");
  for (auto& s : file.signals) s.physical_dimension = h.field(8, "dimension");
  for (auto& s : file.signals) s.physical_min = h.number(8, "physical minimum");
  for (auto& s : file.signals) s.physical_max = h.number(8, "physical maximum");
  for (auto& s : file.signals) {
    s.digital_min = static_cast<int>(h.number(8, "digital minimum"));
  }
  for (auto& s : file.signals) {
    s.digital_max = static_cast<int>(h.number(8, "digital maximum"));
  }
  for (auto& s : file.signals) s.prefiltering = h.field(80, "prefiltering");
  for (auto& s : file.signals) {
    s.samples_per_record = h.count(8, "samples per record");
  }
  h.field(32 * ns, "signal reserved");
  for (std::size_t i = 0; i < ns; ++i) {
    const auto& s = file.signals[i];
    if (s.digital_max <= s.digital_min) {
      throw EdfError("signal '" + s.label + "' has digital_max <= digital_min",
                     kMainHeader + ns * 16 + ns * 80 + ns * 8 * 5 + i * 8);
    }
    if (s.physical_max == s.physical_min) {
      throw EdfError("signal '" + s.label + "' has an empty physical range",
                     kMainHeader + ns * 16 + ns * 80 + ns * 8 * 3 + i * 8);
    }
  }

  std::size_t record_samples = 0;
  for (const auto& s : file.signals) record_samples += s.samples_per_record;
  const std::size_t need = header_bytes + file.num_records * record_samples * 2;
  if (bytes.size() < need) {
    throw EdfError("data section truncated: " + std::to_string(file.num_records) +
                       " records need " + std::to_string(need) +
                       " bytes, file has " + std::to_string(bytes.size()),
                   bytes.size());
  }
  for (auto& s : file.signals) s.digital.reserve(s.samples_per_record * file.num_records);
  std::size_t pos = header_bytes;
  for (std::size_t r = 0; r < file.num_records; ++r) {
    for (auto& s : file.signals) {
      for (std::size_t k = 0; k < s.samples_per_record; ++k) {
        const auto lo = static_cast<std::uint16_t>(bytes[pos]);
        const auto hi = static_cast<std::uint16_t>(bytes[pos + 1]);
        s.digital.push_back(static_cast<std::int16_t>(lo | (hi << 8)));
        pos += 2;
      }
    }
  }
  return file;
}

std::vector<std::uint8_t> write_edf(const EdfFile& file) {
  const std::size_t ns = file.signals.size();
  if (ns == 0) throw EdfError("cannot write an EDF file without signals", 0);
  for (const auto& s : file.signals) {
    if (s.digital.size() != s.samples_per_record * file.num_records) {
      throw EdfError("signal '" + s.label + "' holds " +
                         std::to_string(s.digital.size()) +
                         " samples, header promises " +
                         std::to_string(s.samples_per_record * file.num_records),
                     0);
    }
  }
  std::vector<std::uint8_t> out;
  put(out, "0", 8);
  put(out, file.patient, 80);
  put(out, file.recording, 80);
  put(out, file.start_date, 8);
  put(out, file.start_time, 8);
  put(out, std::to_string(kMainHeader + ns * kSignalHeader), 8);
  put(out, file.reserved, 44);
  put(out, std::to_string(file.num_records), 8);
  put(out, fmt_number(file.record_duration, 8), 8);
  put(out, std::to_string(ns), 4);
  for (const auto& s : file.signals) put(out, s.label, 16);
  for (const auto& s : file.signals) put(out, s.transducer, 80);
  for (const auto& s : file.signals) put(out, s.physical_dimension, 8);
  for (const auto& s : file.signals) put(out, fmt_number(s.physical_min, 8), 8);
  for (const auto& s : file.signals) put(out, fmt_number(s.physical_max, 8), 8);
  for (const auto& s : file.signals) put(out, std::to_string(s.digital_min), 8);
  for (const auto& s : file.signals) put(out, std::to_string(s.digital_max), 8);
  for (const auto& s : file.signals) put(out, s.prefiltering, 80);
  for (const auto& s : file.signals) put(out, std::to_string(s.samples_per_record), 8);
  for (std::size_t i = 0; i < ns; ++i) put(out, "", 32);
  for (std::size_t r = 0; r < file.num_records; ++r) {
    for (const auto& s : file.signals) {
      for (std::size_t k = 0; k < s.samples_per_record; ++k) {
        const auto v = static_cast<std::uint16_t>(s.digital[r * s.samples_per_record + k]);
        out.push_back(static_cast<std::uint8_t>(v & 0xFF));
        out.push_back(static_cast<std::uint8_t>(v >> 8));
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path,
                      std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("short write to " + path.string());
}

std::vector<Annotation> parse_edf_annotations(std::span<const std::uint8_t> raw) {
  std::vector<Annotation> out;
  std::size_t i = 0;
  const std::size_t n = raw.size();
  while (i < n) {
    if (raw[i] == 0) {
      ++i;
      continue;
    }
    // One TAL: onset [\x15 duration] \x14 text \x14 ... \x14 \x00
    std::size_t j = i;
    while (j < n && raw[j] != 0x14 && raw[j] != 0x15) ++j;
    if (j >= n) throw EdfError("unterminated annotation onset", i);
    const std::string onset_text(reinterpret_cast<const char*>(&raw[i]), j - i);
    double duration = 0.0;
    if (raw[j] == 0x15) {
      std::size_t k = j + 1;
      while (k < n && raw[k] != 0x14) ++k;
      if (k >= n) throw EdfError("unterminated annotation duration", j);
      duration = std::stod(std::string(reinterpret_cast<const char*>(&raw[j + 1]), k - j - 1));
      j = k;
    }
    double onset = 0.0;
    try {
      onset = std::stod(onset_text);
    } catch (const std::exception&) {
      throw EdfError("invalid annotation onset '" + onset_text + "'", i);
    }
    ++j;  // past the \x14 after onset/duration
    while (j < n && raw[j] != 0) {
      std::size_t k = j;
      while (k < n && raw[k] != 0x14) ++k;
      if (k >= n) throw EdfError("unterminated annotation text", j);
      std::string text(reinterpret_cast<const char*>(&raw[j]), k - j);
      if (!text.empty()) out.push_back({onset, duration, text});
      j = k + 1;
    }
    i = j;
  }
  return out;
}

NightRecording parse_edf(std::span<const std::uint8_t> bytes,
                         const std::string& channel) {
  const EdfFile file = read_edf(bytes);
  const EdfSignal* chosen = nullptr;
  const EdfSignal* annotations = nullptr;
  std::string available;
  for (const auto& s : file.signals) {
    if (lower(trim(s.label)) == lower(trim(channel))) chosen = &s;
    if (s.label == "EDF Annotations") annotations = &s;
    if (!available.empty()) available += ", ";
    available += "'" + s.label + "'";
  }
  if (chosen == nullptr) {
    throw DataError("channel '" + channel + "' not found; available: " + available);
  }
  NightRecording rec;
  rec.sample_rate =
      static_cast<double>(chosen->samples_per_record) / file.record_duration;
  rec.signal = chosen->physical();
  if (annotations != nullptr) {
    std::vector<std::uint8_t> raw;
    raw.reserve(annotations->digital.size() * 2);
    for (std::int16_t d : annotations->digital) {
      const auto v = static_cast<std::uint16_t>(d);
      raw.push_back(static_cast<std::uint8_t>(v & 0xFF));
      raw.push_back(static_cast<std::uint8_t>(v >> 8));
    }
    rec.annotations = parse_edf_annotations(raw);
  }
  rec.lights_off = 0.0;
  rec.lights_on = rec.duration();
  return rec;
}

EdfFile recording_to_edf(const NightRecording& rec, const std::string& channel,
                         double record_seconds) {
  const double per_record = record_seconds * rec.sample_rate;
  if (!(per_record >= 1.0) || per_record != std::round(per_record)) {
    throw DataError("record length must hold a whole number of samples");
  }
  EdfSignal sig;
  sig.label = channel;
  sig.samples_per_record = static_cast<std::size_t>(per_record);
  double peak = 1.0;
  for (double v : rec.signal) peak = std::max(peak, std::ceil(std::abs(v)));
  sig.physical_min = -peak;
  sig.physical_max = peak;
  EdfFile file;
  file.patient = rec.subject_id;
  file.recording = "night " + std::to_string(rec.night_index);
  file.record_duration = record_seconds;
  file.num_records =
      (rec.signal.size() + sig.samples_per_record - 1) / sig.samples_per_record;
  sig.digital.assign(file.num_records * sig.samples_per_record, sig.to_digital(0.0));
  for (std::size_t i = 0; i < rec.signal.size(); ++i) {
    sig.digital[i] = sig.to_digital(rec.signal[i]);
  }
  file.signals.push_back(std::move(sig));
  return file;
}

}  // namespace sleepstage
