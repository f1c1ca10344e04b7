#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sleepstage/preprocessing.hpp"
#include "sleepstage/seqsleepnet.hpp"

namespace sleepstage {

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FusionMode { Geometric, LastWins };
const char* fusion_name(FusionMode mode);
FusionMode parse_fusion(const std::string& name);

/// Posteriors of one sequence starting at epoch `start` of a night.
struct SequencePosterior {
  std::size_t start = 0;
  Tensor probs;  // L x 5
};

struct FusedNight {
  Tensor posteriors;  // E x 5, rows sum to 1
  std::vector<SleepStage> predicted;
};

/// Geometric mode averages the log-probabilities of every sequence covering
/// an epoch and renormalizes (geometric mean); LastWins keeps the posterior from the covering
/// sequence with the largest start. Argmax ties go to the earlier stage.
FusedNight aggregate_epoch_posteriors(std::span<const SequencePosterior> sequences,
                                      std::size_t night_length,
                                      FusionMode mode = FusionMode::Geometric);

/// Rows are the true stage, columns the prediction.
struct ConfusionMatrix {
  std::array<std::array<std::uint64_t, kNumStages>, kNumStages> counts{};
  std::uint64_t total() const;
};

ConfusionMatrix confusion(std::span<const SleepStage> truth,
                          std::span<const SleepStage> predicted);

struct MetricsReport {
  double accuracy = 0.0;
  double kappa = 0.0;
  double macro_f1 = 0.0;
  double sensitivity = 0.0;  // macro one-vs-rest recall
  double specificity = 0.0;  // macro one-vs-rest true-negative rate
  double weighted_sensitivity = 0.0;  // support-weighted alternatives
  double weighted_specificity = 0.0;
  std::array<double, kNumStages> precision{};
  std::array<double, kNumStages> recall{};
  std::array<double, kNumStages> f1{};
  std::array<double, kNumStages> class_specificity{};
  std::uint64_t epochs = 0;
};

/// A class with no true and no predicted epochs has F1, precision and recall
/// 0 and still counts in the macro means.
MetricsReport compute_metrics(const ConfusionMatrix& cm);

struct NightEvaluation {
  FusedNight fused;
  ConfusionMatrix cm;
  MetricsReport metrics;
};

/// Scores a model on every stride-1 sequence of one night.
NightEvaluation evaluate_night(const ModelParams& params, const PreparedNight& night,
                               FusionMode mode = FusionMode::Geometric);

enum class GateGroup { A, B };
const char* gate_name(GateGroup g);

/// Group A iff accuracy_before < beta.
GateGroup personalization_gate(double accuracy_before, double beta = 0.77);

// ---- study tabulation -----------------------------------------------------

/// One evaluated snapshot. snapshot_epoch 0 is the SI model before
/// personalization.
struct ReportRow {
  std::string subject;
  int night = 2;
  double alpha = 0.0;
  std::string strategy;
  std::size_t snapshot_epoch = 0;
  MetricsReport metrics;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population convention (divide by n)
};
MeanStd mean_std(std::span<const double> values);

inline constexpr const char* kMetricNames[] = {"acc", "kappa", "mf1", "sens", "spec"};
std::array<double, 5> metric_values(const MetricsReport& m);

struct CurvePoint {
  std::size_t snapshot_epoch = 0;
  double mean_acc = 0.0;
  double std_acc = 0.0;
};

struct RunKey {
  double alpha = 0.0;
  std::string strategy;
  auto operator<=>(const RunKey&) const = default;
};

struct ScatterPoint {
  std::string subject;
  double gate_accuracy = 0.0;  // night-1 accuracy before (night 2 if absent)
  double before = 0.0;         // night-2 accuracy at epoch 0
  double after = 0.0;          // night-2 accuracy at the last snapshot
  double improvement = 0.0;
  GateGroup group = GateGroup::B;
};

struct GroupSummary {
  std::size_t count_a = 0;
  std::size_t count_b = 0;
  double mean_improvement_a = 0.0;  // 0 when the group is empty
  double mean_improvement_b = 0.0;
};

struct RunSummary {
  std::array<MeanStd, 5> before;  // acc, kappa, mf1, sens, spec on night 2
  std::array<MeanStd, 5> after;
  std::size_t subjects = 0;
  std::size_t final_epoch = 0;
  std::vector<CurvePoint> curve;
  std::vector<ScatterPoint> scatter;
  GroupSummary groups;
};

struct StudyReport {
  double beta = 0.77;
  std::map<RunKey, RunSummary> runs;
  // The curves per alpha use the reference strategy (All when present); the
  // curves per strategy use the reference alpha (the alpha run with the most
  // strategies, largest on ties).
  std::string reference_strategy;
  double reference_alpha = 0.0;
};

/// Tabulates night-2 rows into before/after tables, accuracy curves, the
/// improvement scatter and gate groups. Throws when subjects of one run do
/// not share a snapshot grid.
StudyReport experiment_report(std::span<const ReportRow> rows, double beta = 0.77);

std::string report_csv(std::span<const ReportRow> rows);
std::vector<ReportRow> parse_report_csv(const std::string& text);
std::string report_json(const StudyReport& report);
/// Table of mean +- std before and after, one line per run.
std::string report_summary(const StudyReport& report);

}  // namespace sleepstage
