#include "sleepstage/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

namespace sleepstage {

namespace {

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// Shortest text that parses back to the same double.
std::string num(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

double ratio(double num, double den) { return den > 0.0 ? num / den : 0.0; }

}  // namespace

const char* fusion_name(FusionMode mode) {
  return mode == FusionMode::Geometric ? "geometric" : "last";
}

FusionMode parse_fusion(const std::string& name) {
  const std::string n = lower(name);
  if (n == "geometric") return FusionMode::Geometric;
  if (n == "last" || n == "last-wins" || n == "last_wins") return FusionMode::LastWins;
  throw EvaluationError("unknown fusion mode '" + name + "' (valid: geometric, last)");
}

FusedNight aggregate_epoch_posteriors(std::span<const SequencePosterior> sequences,
                                      std::size_t night_length, FusionMode mode) {
  constexpr double tiny = std::numeric_limits<double>::min();
  Tensor logp({night_length, kNumStages}, 0.0);
  std::vector<std::size_t> covered(night_length, 0);
  std::vector<std::size_t> last(night_length, 0);
  for (const auto& seq : sequences) {
    const std::size_t L = seq.probs.rows();
    if (seq.probs.cols() != kNumStages || seq.start + L > night_length) {
      throw EvaluationError("sequence at " + std::to_string(seq.start) + " of length " +
                            std::to_string(L) + " does not fit a night of " +
                            std::to_string(night_length) + " epochs");
    }
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t e = seq.start + l;
      const bool replace = mode == FusionMode::LastWins &&
                           (covered[e] == 0 || seq.start >= last[e]);
      for (std::size_t k = 0; k < kNumStages; ++k) {
        const double lp = std::log(std::max(seq.probs(l, k), tiny));
        if (mode == FusionMode::Geometric) {
          logp(e, k) += lp;
        } else if (replace) {
          logp(e, k) = lp;
        }
      }
      if (replace) last[e] = seq.start;
      ++covered[e];
    }
  }

  FusedNight out;
  out.posteriors = Tensor({night_length, kNumStages}, 0.0);
  out.predicted.resize(night_length);
  for (std::size_t e = 0; e < night_length; ++e) {
    if (covered[e] == 0) {
      throw EvaluationError("epoch " + std::to_string(e) + " is not covered by any sequence");
    }
    if (mode == FusionMode::Geometric) {
      for (std::size_t k = 0; k < kNumStages; ++k) logp(e, k) /= static_cast<double>(covered[e]);
    }
    std::size_t best = 0;
    for (std::size_t k = 1; k < kNumStages; ++k) {
      if (logp(e, k) > logp(e, best)) best = k;
    }
    double z = 0.0;
    for (std::size_t k = 0; k < kNumStages; ++k) {
      z += out.posteriors(e, k) = std::exp(logp(e, k) - logp(e, best));
    }
    for (std::size_t k = 0; k < kNumStages; ++k) out.posteriors(e, k) /= z;
    out.predicted[e] = static_cast<SleepStage>(best);
  }
  return out;
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (const auto& row : counts) {
    for (auto c : row) t += c;
  }
  return t;
}

ConfusionMatrix confusion(std::span<const SleepStage> truth,
                          std::span<const SleepStage> predicted) {
  if (truth.size() != predicted.size()) {
    throw EvaluationError("truth has " + std::to_string(truth.size()) +
                          " epochs but prediction has " + std::to_string(predicted.size()));
  }
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto t = static_cast<std::size_t>(truth[i]);
    const auto p = static_cast<std::size_t>(predicted[i]);
    if (t >= kNumStages || p >= kNumStages) {
      throw EvaluationError("stage outside the five scored classes at epoch " +
                            std::to_string(i));
    }
    ++cm.counts[t][p];
  }
  return cm;
}

MetricsReport compute_metrics(const ConfusionMatrix& cm) {
  const std::uint64_t total_count = cm.total();
  if (total_count == 0) throw EvaluationError("confusion matrix is empty");
  const double n = static_cast<double>(total_count);

  std::array<double, kNumStages> row{}, col{}, tp{};
  for (std::size_t t = 0; t < kNumStages; ++t) {
    for (std::size_t p = 0; p < kNumStages; ++p) {
      const double c = static_cast<double>(cm.counts[t][p]);
      row[t] += c;
      col[p] += c;
    }
    tp[t] = static_cast<double>(cm.counts[t][t]);
  }

  MetricsReport m;
  m.epochs = total_count;
  double trace = 0.0, pe = 0.0;
  for (std::size_t k = 0; k < kNumStages; ++k) {
    trace += tp[k];
    pe += (row[k] / n) * (col[k] / n);
  }
  m.accuracy = trace / n;
  // pe == 1 only when truth and prediction use one and the same class
  m.kappa = pe < 1.0 ? (m.accuracy - pe) / (1.0 - pe) : 1.0;

  for (std::size_t k = 0; k < kNumStages; ++k) {
    const double fp = col[k] - tp[k];
    const double tn = n - row[k] - fp;
    m.precision[k] = ratio(tp[k], col[k]);
    m.recall[k] = ratio(tp[k], row[k]);
    m.f1[k] = ratio(2.0 * tp[k], row[k] + col[k]);
    m.class_specificity[k] = ratio(tn, n - row[k]);
    m.macro_f1 += m.f1[k] / kNumStages;
    m.sensitivity += m.recall[k] / kNumStages;
    m.specificity += m.class_specificity[k] / kNumStages;
    m.weighted_sensitivity += row[k] / n * m.recall[k];
    m.weighted_specificity += row[k] / n * m.class_specificity[k];
  }
  return m;
}

NightEvaluation evaluate_night(const ModelParams& params, const PreparedNight& night,
                               FusionMode mode) {
  const std::size_t L = params.config.seq_len;
  const std::size_t E = night.num_epochs();
  if (E < L) {
    throw EvaluationError("night of " + night.subject_id + " has " + std::to_string(E) +
                          " epochs, fewer than the sequence length " + std::to_string(L));
  }
  std::vector<SequenceRef> refs;
  for (std::size_t s = 0; s + L <= E; ++s) refs.push_back({&night, s});
  const auto post = predict(params, refs);
  std::vector<SequencePosterior> seqs;
  seqs.reserve(post.size());
  for (std::size_t i = 0; i < post.size(); ++i) seqs.push_back({refs[i].start, post[i].probs});

  NightEvaluation ev;
  ev.fused = aggregate_epoch_posteriors(seqs, E, mode);
  ev.cm = confusion(night.labels, ev.fused.predicted);
  ev.metrics = compute_metrics(ev.cm);
  return ev;
}

const char* gate_name(GateGroup g) { return g == GateGroup::A ? "A" : "B"; }

GateGroup personalization_gate(double accuracy_before, double beta) {
  if (!(accuracy_before >= 0.0 && accuracy_before <= 1.0)) {
    throw EvaluationError("accuracy " + num(accuracy_before) + " is outside [0, 1]");
  }
  if (!(beta >= 0.0 && beta <= 1.0)) {
    throw EvaluationError("beta " + num(beta) + " is outside [0, 1]");
  }
  return accuracy_before < beta ? GateGroup::A : GateGroup::B;
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd r;
  if (values.empty()) return r;
  for (double v : values) r.mean += v;
  r.mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(values.size()));
  return r;
}

std::array<double, 5> metric_values(const MetricsReport& m) {
  return {m.accuracy, m.kappa, m.macro_f1, m.sensitivity, m.specificity};
}

StudyReport experiment_report(std::span<const ReportRow> rows, double beta) {
  personalization_gate(0.0, beta);  // validates beta
  if (rows.empty()) throw EvaluationError("no report rows");

  // run -> subject -> night -> epoch -> metrics
  std::map<RunKey, std::map<std::string, std::map<int, std::map<std::size_t, MetricsReport>>>>
      index;
  for (const auto& r : rows) {
    auto& slot = index[{r.alpha, r.strategy}][r.subject][r.night];
    if (!slot.emplace(r.snapshot_epoch, r.metrics).second) {
      throw EvaluationError("duplicate row for subject " + r.subject + ", night " +
                            std::to_string(r.night) + ", alpha " + num(r.alpha) +
                            ", strategy " + r.strategy + ", epoch " +
                            std::to_string(r.snapshot_epoch));
    }
  }

  StudyReport report;
  report.beta = beta;
  for (const auto& [key, subjects] : index) {
    const std::string run = "alpha " + num(key.alpha) + ", strategy " + key.strategy;
    std::vector<std::size_t> grid;
    std::string grid_owner;
    std::vector<const std::map<std::size_t, MetricsReport>*> night2;
    RunSummary summary;
    for (const auto& [subject, nights] : subjects) {
      auto it = nights.find(2);
      if (it == nights.end()) {
        throw EvaluationError("subject " + subject + " has no night-2 rows in " + run);
      }
      std::vector<std::size_t> mine;
      for (const auto& [epoch, m] : it->second) mine.push_back(epoch);
      if (grid_owner.empty()) {
        grid = mine;
        grid_owner = subject;
      } else if (mine != grid) {
        throw EvaluationError("inconsistent snapshot grids in " + run + ": subject " +
                              subject + " differs from subject " + grid_owner);
      }
      if (grid.front() != 0) {
        throw EvaluationError("subject " + subject + " has no before-personalization "
                              "(epoch 0) row in " + run);
      }
      night2.push_back(&it->second);

      const MetricsReport& before = it->second.at(0);
      const MetricsReport& after = it->second.rbegin()->second;
      ScatterPoint pt;
      pt.subject = subject;
      pt.before = before.accuracy;
      pt.after = after.accuracy;
      pt.improvement = after.accuracy - before.accuracy;
      auto n1 = nights.find(1);
      pt.gate_accuracy = before.accuracy;
      if (n1 != nights.end() && n1->second.count(0)) {
        pt.gate_accuracy = n1->second.at(0).accuracy;
      }
      pt.group = personalization_gate(pt.gate_accuracy, beta);
      summary.scatter.push_back(pt);
    }

    summary.subjects = night2.size();
    summary.final_epoch = grid.back();
    for (std::size_t i = 0; i < 5; ++i) {
      std::vector<double> b, a;
      for (const auto* n : night2) {
        b.push_back(metric_values(n->at(0))[i]);
        a.push_back(metric_values(n->rbegin()->second)[i]);
      }
      summary.before[i] = mean_std(b);
      summary.after[i] = mean_std(a);
    }
    for (std::size_t epoch : grid) {
      std::vector<double> acc;
      for (const auto* n : night2) acc.push_back(n->at(epoch).accuracy);
      const MeanStd ms = mean_std(acc);
      summary.curve.push_back({epoch, ms.mean, ms.std});
    }
    double sum_a = 0.0, sum_b = 0.0;
    for (const auto& pt : summary.scatter) {
      if (pt.group == GateGroup::A) {
        ++summary.groups.count_a;
        sum_a += pt.improvement;
      } else {
        ++summary.groups.count_b;
        sum_b += pt.improvement;
      }
    }
    if (summary.groups.count_a) summary.groups.mean_improvement_a = sum_a / summary.groups.count_a;
    if (summary.groups.count_b) summary.groups.mean_improvement_b = sum_b / summary.groups.count_b;
    report.runs.emplace(key, std::move(summary));
  }

  std::set<std::string> strategies;
  std::map<double, std::size_t> per_alpha;
  for (const auto& [key, s] : report.runs) {
    strategies.insert(key.strategy);
    ++per_alpha[key.alpha];
  }
  report.reference_strategy = strategies.count("All") ? "All" : *strategies.begin();
  std::size_t most = 0;
  for (const auto& [alpha, count] : per_alpha) {
    if (count >= most) {
      most = count;
      report.reference_alpha = alpha;
    }
  }
  return report;
}

std::string report_csv(std::span<const ReportRow> rows) {
  std::ostringstream out;
  out << "subject,night,alpha,strategy,snapshot_epoch,acc,kappa,mf1,sens,spec,n_epochs\n";
  for (const auto& r : rows) {
    out << r.subject << ',' << r.night << ',' << num(r.alpha) << ',' << r.strategy << ','
        << r.snapshot_epoch;
    for (double v : metric_values(r.metrics)) out << ',' << num(v);
    out << ',' << r.metrics.epochs << '\n';
  }
  return out.str();
}

std::vector<ReportRow> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("subject,night,alpha", 0) != 0) {
    throw EvaluationError("report CSV is missing its header");
  }
  std::vector<ReportRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 11) {
      throw EvaluationError("report CSV line " + std::to_string(lineno) + " has " +
                            std::to_string(f.size()) + " fields, expected 11");
    }
    try {
      ReportRow r;
      r.subject = f[0];
      r.night = std::stoi(f[1]);
      r.alpha = std::stod(f[2]);
      r.strategy = f[3];
      r.snapshot_epoch = std::stoul(f[4]);
      r.metrics.accuracy = std::stod(f[5]);
      r.metrics.kappa = std::stod(f[6]);
      r.metrics.macro_f1 = std::stod(f[7]);
      r.metrics.sensitivity = std::stod(f[8]);
      r.metrics.specificity = std::stod(f[9]);
      r.metrics.epochs = std::stoull(f[10]);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw EvaluationError("report CSV line " + std::to_string(lineno) + " is malformed");
    }
  }
  return rows;
}

std::string report_json(const StudyReport& report) {
  using nlohmann::json;
  auto curve_json = [](const std::vector<CurvePoint>& c) {
    json a = json::array();
    for (const auto& p : c) a.push_back({p.snapshot_epoch, p.mean_acc, p.std_acc});
    return a;
  };
  json j;
  j["schema_version"] = 1;
  j["beta"] = report.beta;
  j["std_convention"] = "population";
  j["runs"] = json::array();
  json by_alpha = json::object(), by_strategy = json::object();
  for (const auto& [key, s] : report.runs) {
    json run;
    run["alpha"] = key.alpha;
    run["strategy"] = key.strategy;
    run["subjects"] = s.subjects;
    run["final_epoch"] = s.final_epoch;
    for (std::size_t i = 0; i < 5; ++i) {
      run["before"][kMetricNames[i]] = {{"mean", s.before[i].mean}, {"std", s.before[i].std}};
      run["after"][kMetricNames[i]] = {{"mean", s.after[i].mean}, {"std", s.after[i].std}};
    }
    run["curve"] = curve_json(s.curve);
    for (const auto& pt : s.scatter) {
      run["scatter"].push_back({{"subject", pt.subject},
                                {"gate_accuracy", pt.gate_accuracy},
                                {"before", pt.before},
                                {"after", pt.after},
                                {"improvement", pt.improvement},
                                {"group", gate_name(pt.group)}});
    }
    run["groups"] = {{"A", {{"count", s.groups.count_a}, {"mean_improvement", s.groups.mean_improvement_a}}},
                     {"B", {{"count", s.groups.count_b}, {"mean_improvement", s.groups.mean_improvement_b}}}};
    j["runs"].push_back(run);
    if (key.strategy == report.reference_strategy) by_alpha[num(key.alpha)] = curve_json(s.curve);
    if (key.alpha == report.reference_alpha) by_strategy[key.strategy] = curve_json(s.curve);
  }
  j["curves"] = {{"by_alpha", by_alpha},
                 {"by_strategy", by_strategy},
                 {"reference_strategy", report.reference_strategy},
                 {"reference_alpha", report.reference_alpha}};
  return j.dump(2) + "\n";
}

std::string report_summary(const StudyReport& report) {
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-6s %-12s %3s  %-6s %-15s %-15s %-15s %-15s %-15s\n",
                "alpha", "strategy", "n", "", "acc %", "kappa", "mf1 %", "sens %", "spec %");
  out << buf;
  for (const auto& [key, s] : report.runs) {
    for (int phase = 0; phase < 2; ++phase) {
      const auto& ms = phase == 0 ? s.before : s.after;
      std::snprintf(buf, sizeof buf, "%-6s %-12s %3zu  %-6s", num(key.alpha).c_str(),
                    key.strategy.c_str(), s.subjects, phase == 0 ? "before" : "after");
      out << buf;
      for (std::size_t i = 0; i < 5; ++i) {
        const double scale = i == 1 ? 1.0 : 100.0;
        std::snprintf(buf, sizeof buf, " %7.3f+-%-6.3f", ms[i].mean * scale, ms[i].std * scale);
        out << buf;
      }
      out << '\n';
    }
    std::snprintf(buf, sizeof buf,
                  "       gate beta=%s: A n=%zu mean improvement %.3f pp, B n=%zu mean "
                  "improvement %.3f pp\n",
                  num(report.beta).c_str(), s.groups.count_a,
                  s.groups.mean_improvement_a * 100.0, s.groups.count_b,
                  s.groups.mean_improvement_b * 100.0);
    out << buf;
  }
  return out.str();
}

}  // namespace sleepstage
