#pragma once

#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sleepstage/evaluation.hpp"
#include "sleepstage/losses.hpp"
#include "sleepstage/seqsleepnet.hpp"

namespace sleepstage {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or state. Carries the parameters from before the failing
/// update.
class DivergenceError : public TrainingError {
 public:
  DivergenceError(const std::string& what, ModelParams last_good, std::size_t epoch)
      : TrainingError(what), last_good_(std::move(last_good)), epoch_(epoch) {}
  const ModelParams& last_good() const { return last_good_; }
  std::size_t epoch() const { return epoch_; }

 private:
  ModelParams last_good_;
  std::size_t epoch_;
};

// ---- Adam -----------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moments exist only for trainable parameters.
struct AdamState {
  AdamConfig config;
  TensorMap m;
  TensorMap v;
  std::uint64_t step = 0;
};

AdamState make_adam_state(const TensorMap& params, const std::set<std::string>& trainable,
                          const AdamConfig& config = {});

/// One bias-corrected Adam update. `grads` must hold exactly the trainable
/// set; a gradient for any other parameter is an error.
void adam_step(TensorMap& params, const TensorMap& grads, AdamState& state, double lr);

// ---- pretraining ----------------------------------------------------------

struct PretrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  double lambda = 1e-4;
  std::size_t stride = 1;
  std::uint64_t seed = 1;
  FusionMode fusion = FusionMode::Geometric;
};

struct PretrainResult {
  ModelParams best;
  std::size_t best_epoch = 0;         // 1-based; 0 means the initial model
  double best_valid_accuracy = 0.0;
  std::vector<double> train_loss;     // mean batch loss per epoch
  std::vector<double> valid_accuracy; // pooled epoch accuracy per epoch
};

/// Minimizes the sequence cross-entropy plus l2 from a fresh initialization
/// (seeded with config.seed) and keeps the epoch with the best pooled
/// validation accuracy. Without validation nights the last epoch is kept.
PretrainResult pretrain(std::span<const PreparedNight> train,
                        std::span<const PreparedNight> valid, const ModelConfig& model,
                        const PretrainConfig& config);

// ---- personalization ------------------------------------------------------

struct FinetuneConfig {
  Strategy strategy = Strategy::All;
  double alpha = 0.0;
  double learning_rate = 1e-4;
  double lambda = 1e-4;
  std::size_t finetune_epochs = 50;
  std::size_t snapshot_every = 5;
  std::size_t batch_size = 8;
  std::size_t stride = 1;
  std::uint64_t seed = 1;
  LossForm form = LossForm::CrossEntropy;

  void validate() const;
};

struct Snapshot {
  std::size_t epoch = 0;
  ModelParams params;
};

struct FinetuneResult {
  std::vector<Snapshot> snapshots;    // every snapshot_every epochs
  std::vector<double> batch_loss;     // every update, in order
  std::vector<double> epoch_loss;     // mean batch loss per epoch
};

/// Finetunes a copy of the SI model on one night with the KL-regularized
/// loss. The SI posteriors of each batch are computed on the fly with the
/// SI model in evaluation mode.
FinetuneResult personalize(const ModelParams& si, const PreparedNight& night,
                           const FinetuneConfig& config);

/// The same loop with the plain sequence loss and no SI model (alpha ignored).
FinetuneResult finetune(const ModelParams& init, const PreparedNight& night,
                        const FinetuneConfig& config);

/// Stride-spaced sequence starts of every night, in order.
std::vector<SequenceRef> training_sequences(std::span<const PreparedNight> nights,
                                            std::size_t seq_len, std::size_t stride);

/// Report rows for one target: the SI model on night 1 and night 2
/// (snapshot 0), then every snapshot on night 2.
std::vector<ReportRow> snapshot_rows(const ModelParams& si,
                                     std::span<const Snapshot> snapshots,
                                     const PreparedNight& night1,
                                     const PreparedNight& night2, double alpha,
                                     const std::string& strategy,
                                     FusionMode fusion = FusionMode::Geometric);

/// Personalizes on night 1 and returns snapshot_rows for the run.
std::vector<ReportRow> personalization_rows(const ModelParams& si,
                                            const PreparedNight& night1,
                                            const PreparedNight& night2,
                                            const FinetuneConfig& config,
                                            FusionMode fusion = FusionMode::Geometric);

// ---- hashing --------------------------------------------------------------

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
std::string hex64(std::uint64_t v);
/// FNV-1a of the encoded checkpoint.
std::string checkpoint_hash(const ModelParams& params);

}  // namespace sleepstage
