#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "sleepstage/config.hpp"
#include "sleepstage/edf.hpp"
#include "sleepstage/evaluation.hpp"
#include "sleepstage/preprocessing.hpp"
#include "sleepstage/seqsleepnet.hpp"
#include "sleepstage/synthetic.hpp"
#include "sleepstage/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace sleepstage;

namespace {

constexpr int kSchemaVersion = 1;

/// Bad invocation or input layout; exits with 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- small helpers ----------------------------------------------------------

std::string bytes_hash(std::span<const std::uint8_t> bytes) { return hex64(fnv1a64(bytes)); }

std::string file_hash(const fs::path& p) { return bytes_hash(read_file_bytes(p)); }

std::string text_hash(const std::string& s) {
  return bytes_hash({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_file_bytes(p, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed JSON in " + p.string() + ": " + e.what());
  }
}

std::string number_text(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::size_t worker_count() {
  const char* env = std::getenv("SLEEPSTAGE_WORKERS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) {
    throw UsageError(std::string("SLEEPSTAGE_WORKERS must be a positive integer, got '") +
                     env + "'");
  }
  return static_cast<std::size_t>(n);
}

/// Runs job(i) for i in [0, n) on up to `workers` threads. The first
/// exception is rethrown after all threads finish.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& job) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex m;
  auto loop = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard lock(m);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min(workers, n);
  if (threads <= 1) {
    loop();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(loop);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

json manifest_header(const std::string& command, const ExperimentConfig& cfg) {
  const std::string ini = canonical_ini(cfg);
  json j;
  j["schema_version"] = kSchemaVersion;
  j["command"] = command;
  j["config_hash"] = text_hash(ini);
  j["config"] = ini;
  return j;
}

// ---- file layout ------------------------------------------------------------

struct NightName {
  std::string subject;
  int night = 1;
};

/// Raw and cache files are named <subject>_n<night>.<ext>.
std::optional<NightName> parse_night_stem(const std::string& stem) {
  static const std::regex re(R"(^(.+)_[nN]([0-9]+)$)");
  std::smatch m;
  if (!std::regex_match(stem, m, re)) return std::nullopt;
  return NightName{m[1].str(), std::stoi(m[2].str())};
}

std::string night_stem(const std::string& subject, int night) {
  return subject + "_n" + std::to_string(night);
}

fs::path cache_path(const ExperimentConfig& cfg, const std::string& subject, int night) {
  return cfg.data.cache_dir / (night_stem(subject, night) + ".night");
}

fs::path si_path(const ExperimentConfig& cfg) { return cfg.data.work_dir / "si.ckpt"; }

fs::path subject_dir(const ExperimentConfig& cfg, const std::string& subject) {
  return cfg.data.work_dir / "personalize" / subject;
}

std::string strategy_slug(Strategy s) {
  std::string out = strategy_name(s);
  for (char& c : out) c = c == '+' ? '-' : static_cast<char>(std::tolower(c));
  return out;
}

fs::path snapshot_path(double alpha, Strategy s, std::size_t epoch) {
  return fs::path("alpha-" + number_text(alpha)) / strategy_slug(s) /
         ("epoch-" + std::to_string(epoch) + ".ckpt");
}

ModelParams load_model(const fs::path& p) {
  if (!fs::exists(p)) throw std::runtime_error("missing checkpoint " + p.string());
  try {
    return load_checkpoint(p);
  } catch (const ModelError& e) {
    throw std::runtime_error(p.string() + ": " + e.what());
  }
}

PreparedNight load_night(const ExperimentConfig& cfg, const std::string& subject, int night) {
  const fs::path p = cache_path(cfg, subject, night);
  if (!fs::exists(p)) {
    throw std::runtime_error("missing night " + std::to_string(night) + " of subject " +
                             subject + " (expected " + p.string() + ")");
  }
  return read_night_cache(p);
}

/// Every cached night, sorted by subject then night.
std::vector<std::pair<NightName, fs::path>> list_caches(const ExperimentConfig& cfg) {
  std::vector<std::pair<NightName, fs::path>> out;
  if (!fs::is_directory(cfg.data.cache_dir)) {
    throw UsageError("cache directory " + cfg.data.cache_dir.string() + " does not exist");
  }
  for (const auto& e : fs::directory_iterator(cfg.data.cache_dir)) {
    if (e.path().extension() != ".night") continue;
    if (auto n = parse_night_stem(e.path().stem().string())) out.emplace_back(*n, e.path());
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return std::tie(a.first.subject, a.first.night) < std::tie(b.first.subject, b.first.night);
  });
  return out;
}

std::vector<std::string> chosen_subjects(const ExperimentConfig& cfg,
                                         const std::vector<std::string>& flags) {
  std::vector<std::string> s = flags.empty() ? cfg.data.targets : flags;
  if (s.empty()) {
    throw UsageError("no target subjects; set data.targets or pass --subject");
  }
  return s;
}

// ---- synthesize -------------------------------------------------------------

int cmd_synthesize(const ExperimentConfig& cfg, fs::path out_dir) {
  if (out_dir.empty()) out_dir = cfg.data.raw_dir;
  fs::create_directories(out_dir);
  const auto cohort = generate_synthetic_cohort(cfg.cohort_spec(), cfg.seed);
  json j = manifest_header("synthesize", cfg);
  j["recordings"] = json::array();
  for (const auto& rec : cohort) {
    const std::string stem = night_stem(rec.subject_id, rec.night_index);
    const auto edf = write_edf(recording_to_edf(rec, cfg.data.channel));
    write_file_bytes(out_dir / (stem + ".edf"), edf);
    write_annotation_csv(out_dir / (stem + ".csv"), rec.annotations);
    j["recordings"].push_back({{"subject", rec.subject_id},
                               {"night", rec.night_index},
                               {"edf", stem + ".edf"},
                               {"edf_hash", bytes_hash(edf)},
                               {"annotations", stem + ".csv"},
                               {"annotations_hash", file_hash(out_dir / (stem + ".csv"))}});
  }
  write_text(out_dir / "synthesize.json", j.dump(2) + "\n");
  std::printf("wrote %zu recordings to %s\n", cohort.size(), out_dir.string().c_str());
  return 0;
}

// ---- preprocess -------------------------------------------------------------

struct PreprocessOutcome {
  std::string line;
  json entry;
  bool ok = false;
};

int cmd_preprocess(const ExperimentConfig& cfg, fs::path in_dir, fs::path out_dir) {
  if (in_dir.empty()) in_dir = cfg.data.raw_dir;
  if (out_dir.empty()) out_dir = cfg.data.cache_dir;
  if (!fs::is_directory(in_dir)) {
    throw UsageError("input directory " + in_dir.string() + " does not exist");
  }
  std::vector<fs::path> inputs;
  for (const auto& e : fs::directory_iterator(in_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".edf") inputs.push_back(e.path());
  }
  std::sort(inputs.begin(), inputs.end());
  if (inputs.empty()) throw UsageError("no nights found in " + in_dir.string());
  fs::create_directories(out_dir);

  std::vector<PreprocessOutcome> outcomes(inputs.size());
  parallel_for(inputs.size(), worker_count(), [&](std::size_t i) {
    const fs::path& edf_path = inputs[i];
    PreprocessOutcome& out = outcomes[i];
    try {
      const auto name = parse_night_stem(edf_path.stem().string());
      if (!name) throw DataError("file name is not <subject>_n<night>.edf");
      const auto bytes = read_file_bytes(edf_path);
      NightRecording rec = parse_edf(bytes, cfg.data.channel);
      rec.subject_id = name->subject;
      rec.night_index = name->night;
      fs::path csv = edf_path;
      csv.replace_extension(".csv");
      std::string ann_hash;
      if (fs::exists(csv)) {
        rec.annotations = read_annotation_csv(csv);
        ann_hash = file_hash(csv);
      } else if (rec.annotations.empty()) {
        throw DataError("no annotations: neither EDF+ annotations nor " +
                        csv.filename().string());
      }
      if (cfg.data.lights_off >= 0) rec.lights_off = cfg.data.lights_off;
      if (cfg.data.lights_on >= 0) rec.lights_on = std::min(cfg.data.lights_on, rec.duration());
      const PreparedNight night = prepare_night(rec, cfg.preprocess);
      const auto encoded = encode_night_cache(night);
      const fs::path target = out_dir / (night_stem(name->subject, name->night) + ".night");
      write_file_bytes(target, encoded);
      char line[256];
      std::snprintf(line, sizeof line, "%s night %d: %zu epochs kept, %zu excluded",
                    name->subject.c_str(), name->night, night.num_epochs(), night.excluded);
      out.line = line;
      out.entry = {{"subject", name->subject},
                   {"night", name->night},
                   {"source", edf_path.filename().string()},
                   {"source_hash", bytes_hash(bytes)},
                   {"annotations_hash", ann_hash},
                   {"cache", target.filename().string()},
                   {"cache_hash", bytes_hash(encoded)},
                   {"epochs", night.num_epochs()},
                   {"excluded", night.excluded}};
      out.ok = true;
    } catch (const std::exception& e) {
      out.line = edf_path.filename().string() + ": error: " + e.what();
    }
  });

  json j = manifest_header("preprocess", cfg);
  j["nights"] = json::array();
  std::size_t failed = 0;
  for (const auto& o : outcomes) {
    if (o.ok) {
      std::printf("%s\n", o.line.c_str());
      j["nights"].push_back(o.entry);
    } else {
      std::fprintf(stderr, "%s\n", o.line.c_str());
      ++failed;
    }
  }
  write_text(out_dir / "preprocess.json", j.dump(2) + "\n");
  if (failed > 0) {
    std::fprintf(stderr, "%zu of %zu nights failed\n", failed, inputs.size());
    return 1;
  }
  return 0;
}

// ---- pretrain ---------------------------------------------------------------

int cmd_pretrain(const ExperimentConfig& cfg) {
  const std::set<std::string> held_out(cfg.data.targets.begin(), cfg.data.targets.end());
  std::map<std::string, std::vector<std::pair<NightName, fs::path>>> by_subject;
  for (auto& c : list_caches(cfg)) {
    if (!held_out.count(c.first.subject)) by_subject[c.first.subject].push_back(c);
  }
  if (by_subject.empty()) throw UsageError("no pretraining nights in " + cfg.data.cache_dir.string());

  const std::size_t n = by_subject.size();
  std::size_t n_valid = static_cast<std::size_t>(std::lround(cfg.data.valid_fraction * n));
  if (cfg.data.valid_fraction > 0 && n > 1) n_valid = std::clamp<std::size_t>(n_valid, 1, n - 1);
  if (n <= 1) n_valid = 0;

  std::vector<PreparedNight> train, valid;
  json inputs = json::array();
  std::size_t k = 0;
  for (const auto& [subject, nights] : by_subject) {
    const bool is_valid = k++ >= n - n_valid;
    for (const auto& [name, path] : nights) {
      (is_valid ? valid : train).push_back(read_night_cache(path));
      inputs.push_back({{"cache", path.filename().string()},
                        {"cache_hash", file_hash(path)},
                        {"role", is_valid ? "valid" : "train"}});
    }
  }

  ModelConfig model = cfg.model;
  model.freq_bins = train.front().freq_bins;
  model.frames = train.front().frames;
  std::printf("pretraining on %zu nights, validating on %zu\n", train.size(), valid.size());

  fs::create_directories(cfg.data.work_dir);
  PretrainResult result;
  try {
    result = pretrain(train, valid, model, cfg.pretrain_config());
  } catch (const DivergenceError& e) {
    save_checkpoint(cfg.data.work_dir / "si.diverged.ckpt", e.last_good());
    throw;
  }
  for (std::size_t e = 0; e < result.train_loss.size(); ++e) {
    std::printf("epoch %zu: loss %.6f", e + 1, result.train_loss[e]);
    if (!valid.empty()) std::printf(", valid accuracy %.4f", result.valid_accuracy[e]);
    std::printf("\n");
  }
  save_checkpoint(si_path(cfg), result.best);
  std::printf("kept epoch %zu, checkpoint %s\n", result.best_epoch, si_path(cfg).string().c_str());

  json j = manifest_header("pretrain", cfg);
  j["inputs"] = inputs;
  j["checkpoint"] = si_path(cfg).filename().string();
  j["checkpoint_hash"] = checkpoint_hash(result.best);
  j["best_epoch"] = result.best_epoch;
  j["best_valid_accuracy"] = result.best_valid_accuracy;
  j["train_loss"] = result.train_loss;
  j["valid_accuracy"] = result.valid_accuracy;
  write_text(cfg.data.work_dir / "pretrain.json", j.dump(2) + "\n");
  return 0;
}

// ---- personalize ------------------------------------------------------------

struct RunSpec {
  double alpha;
  Strategy strategy;
};

std::vector<RunSpec> run_grid(const ExperimentConfig& cfg) {
  std::vector<RunSpec> runs;
  for (double a : cfg.personalize.alphas) {
    for (Strategy s : cfg.personalize.strategies) runs.push_back({a, s});
  }
  return runs;
}

int cmd_personalize(const ExperimentConfig& cfg, const std::vector<std::string>& subjects_flag) {
  const auto subjects = chosen_subjects(cfg, subjects_flag);
  const ModelParams si = load_model(si_path(cfg));
  const std::string si_hash = checkpoint_hash(si);
  const auto runs = run_grid(cfg);
  const std::size_t workers = worker_count();

  for (const auto& subject : subjects) {
    const PreparedNight night1 = load_night(cfg, subject, 1);
    const fs::path dir = subject_dir(cfg, subject);
    std::vector<json> entries(runs.size());
    parallel_for(runs.size(), workers, [&](std::size_t r) {
      const RunSpec& run = runs[r];
      const FinetuneResult res =
          personalize(si, night1, cfg.finetune_config(run.alpha, run.strategy));
      json snaps = json::array();
      for (const auto& snap : res.snapshots) {
        const fs::path rel = snapshot_path(run.alpha, run.strategy, snap.epoch);
        fs::create_directories((dir / rel).parent_path());
        save_checkpoint(dir / rel, snap.params);
        snaps.push_back({{"alpha", run.alpha},
                         {"strategy", strategy_name(run.strategy)},
                         {"epoch", snap.epoch},
                         {"path", rel.generic_string()},
                         {"hash", checkpoint_hash(snap.params)}});
      }
      entries[r] = {{"alpha", run.alpha},
                    {"strategy", strategy_name(run.strategy)},
                    {"epoch_loss", res.epoch_loss},
                    {"snapshots", snaps}};
    });

    json j = manifest_header("personalize", cfg);
    j["subject"] = subject;
    j["si_checkpoint_hash"] = si_hash;
    j["night1_cache_hash"] = file_hash(cache_path(cfg, subject, 1));
    j["runs"] = entries;
    std::size_t count = 0;
    for (const auto& e : entries) count += e["snapshots"].size();
    j["snapshot_count"] = count;
    write_text(dir / "manifest.json", j.dump(2) + "\n");
    std::printf("%s: %zu runs, %zu snapshots\n", subject.c_str(), runs.size(), count);
  }
  return 0;
}

// ---- evaluate ---------------------------------------------------------------

int cmd_evaluate(const ExperimentConfig& cfg, const std::vector<std::string>& subjects_flag) {
  std::vector<std::string> subjects = subjects_flag.empty() ? cfg.data.targets : subjects_flag;
  if (subjects.empty() && fs::is_directory(cfg.data.work_dir / "personalize")) {
    for (const auto& e : fs::directory_iterator(cfg.data.work_dir / "personalize")) {
      if (fs::exists(e.path() / "manifest.json")) subjects.push_back(e.path().filename().string());
    }
    std::sort(subjects.begin(), subjects.end());
  }
  if (subjects.empty()) throw UsageError("no personalized subjects to evaluate");

  const ModelParams si = load_model(si_path(cfg));
  const FusionMode fusion = cfg.evaluate.fusion;
  std::vector<ReportRow> rows;
  for (const auto& subject : subjects) {
    const fs::path dir = subject_dir(cfg, subject);
    const json manifest = read_json(dir / "manifest.json");
    if (manifest.value("schema_version", 0) != kSchemaVersion) {
      throw std::runtime_error("unsupported manifest schema in " + (dir / "manifest.json").string());
    }
    const PreparedNight night1 = load_night(cfg, subject, 1);
    const PreparedNight night2 = load_night(cfg, subject, 2);
    const auto& run_entries = manifest.at("runs");
    std::vector<std::vector<ReportRow>> per_run(run_entries.size());
    parallel_for(run_entries.size(), worker_count(), [&](std::size_t r) {
      const json& run = run_entries[r];
      std::vector<Snapshot> snaps;
      for (const auto& s : run.at("snapshots")) {
        const fs::path p = dir / s.at("path").get<std::string>();
        ModelParams params = load_model(p);
        if (checkpoint_hash(params) != s.at("hash").get<std::string>()) {
          throw std::runtime_error("checkpoint " + p.string() + " does not match its manifest hash");
        }
        snaps.push_back({s.at("epoch").get<std::size_t>(), std::move(params)});
      }
      per_run[r] = snapshot_rows(si, snaps, night1, night2, run.at("alpha").get<double>(),
                                 run.at("strategy").get<std::string>(), fusion);
    });
    for (auto& pr : per_run) rows.insert(rows.end(), pr.begin(), pr.end());
  }

  const StudyReport report = experiment_report(rows, cfg.evaluate.beta);
  const std::string csv = report_csv(rows);
  const std::string js = report_json(report);
  write_text(cfg.data.work_dir / "report.csv", csv);
  write_text(cfg.data.work_dir / "report.json", js);
  std::printf("%s", report_summary(report).c_str());

  json j = manifest_header("evaluate", cfg);
  j["subjects"] = subjects;
  j["si_checkpoint_hash"] = checkpoint_hash(si);
  j["rows"] = rows.size();
  j["report_csv_hash"] = text_hash(csv);
  j["report_json_hash"] = text_hash(js);
  write_text(cfg.data.work_dir / "evaluate.json", j.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SeqSleepNet sleep staging with KL-regularized personalization"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "INI configuration file")->check(CLI::ExistingFile);
  app.add_option("-s,--set", overrides, "override one key, section.key=value");
  bool print_config = false;
  app.add_flag("--print-config", print_config, "print the effective configuration first");

  std::string synth_out;
  auto* synth = app.add_subcommand("synthesize", "generate a synthetic cohort as EDF + CSV");
  synth->add_option("-o,--output", synth_out, "output directory (default data.raw_dir)");

  std::string pre_in, pre_out;
  auto* pre = app.add_subcommand("preprocess", "turn raw nights into cached images");
  pre->add_option("-i,--input", pre_in, "raw directory (default data.raw_dir)");
  pre->add_option("-o,--output", pre_out, "cache directory (default data.cache_dir)");

  auto* pt = app.add_subcommand("pretrain", "train the subject-independent model");

  std::vector<std::string> pers_subjects;
  auto* pers = app.add_subcommand("personalize", "finetune the SI model on night 1 of each target");
  pers->add_option("--subject", pers_subjects, "target subject (default data.targets)");

  std::vector<std::string> eval_subjects;
  auto* ev = app.add_subcommand("evaluate", "score snapshots on night 2 and tabulate");
  ev->add_option("--subject", eval_subjects, "target subject (default: all personalized)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const ExperimentConfig cfg = config_path.empty() ? parse_config("", overrides)
                                                     : load_config(config_path, overrides);
    worker_count();
    if (print_config) std::printf("%s\n", canonical_ini(cfg).c_str());
    if (*synth) return cmd_synthesize(cfg, synth_out);
    if (*pre) return cmd_preprocess(cfg, pre_in, pre_out);
    if (*pt) return cmd_pretrain(cfg);
    if (*pers) return cmd_personalize(cfg, pers_subjects);
    if (*ev) return cmd_evaluate(cfg, eval_subjects);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
