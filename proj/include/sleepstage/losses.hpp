#pragma once

#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sleepstage/graph.hpp"
#include "sleepstage/seqsleepnet.hpp"

namespace sleepstage {

class LossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossConfig {
  double lambda = 1e-4;  // l2 coefficient
  double alpha = 0.0;    // weight of the SI-posterior term
  void validate() const;
};

/// Which form the SI-posterior term takes. CrossEntropy drops the SI entropy,
/// which does not depend on the personalized model; Kl keeps it.
enum class LossForm { CrossEntropy, Kl };

// ---- graph builders -------------------------------------------------------
// probs, labels and si_probs are N x 5 with N = L * B; sums run over the whole
// batch and are divided by L.

/// -(1/L) sum labels * log(probs + eps)
Var build_data_term(Graph& g, Var probs, Var labels, std::size_t seq_len);
/// (lambda / 2) * sum of squares of `params`
Var build_l2_term(Graph& g, const std::vector<Var>& params, double lambda);
/// -(1/L) sum si * log(probs + eps)
Var build_si_cross_entropy(Graph& g, Var probs, Var si_probs, std::size_t seq_len);
/// (1/L) sum si * (log(si + eps) - log(probs + eps))
Var build_kl_term(Graph& g, Var probs, Var si_probs, std::size_t seq_len);

/// data + l2
Var build_sequence_ce_loss(Graph& g, Var probs, Var labels,
                           const std::vector<Var>& params, std::size_t seq_len,
                           double lambda);

/// ((1 - alpha) * data + l2) + alpha * si_term. With alpha = 0 the value and
/// gradients equal build_sequence_ce_loss bit for bit.
Var build_personalization_loss(Graph& g, Var probs, Var labels, Var si_probs,
                               const std::vector<Var>& params, std::size_t seq_len,
                               const LossConfig& config,
                               LossForm form = LossForm::CrossEntropy);

// ---- direct evaluation ----------------------------------------------------

/// Sum over the given sequences of -(1/L) sum_l log P(true stage), plus
/// (lambda / 2) times the squared norm of `trainable`.
double sequence_ce_loss(std::span<const PosteriorSequence> posteriors,
                        std::span<const Tensor> labels, const TensorMap& trainable,
                        double lambda);

/// (1/L) sum_l sum_c si * log(si / p), guarded by eps inside each log.
double kl_divergence(const PosteriorSequence& si, const PosteriorSequence& personalized);

double personalization_loss(std::span<const PosteriorSequence> si,
                            std::span<const PosteriorSequence> personalized,
                            std::span<const Tensor> labels, const TensorMap& trainable,
                            const LossConfig& config,
                            LossForm form = LossForm::CrossEntropy);

/// alpha * (1/L) sum si * log(si + eps): the amount by which the Kl form
/// exceeds the CrossEntropy form.
double si_entropy_offset(std::span<const PosteriorSequence> si, double alpha);

// ---- formulation check ----------------------------------------------------

struct EquivalenceReport {
  double max_gradient_deviation = 0.0;
  std::string worst_parameter;
  double value_ce = 0.0;   // CrossEntropy-form loss
  double value_kl = 0.0;   // Kl-form loss
  double expected_offset = 0.0;
  double tolerance = 1e-9;
  bool passed = false;
};

/// Evaluates both loss forms of the personalized model on one batch, with the
/// SI model's posteriors as the target, and compares their gradients over
/// `trainable` (all parameters when empty).
EquivalenceReport loss_equivalence_check(const ModelParams& si,
                                         const ModelParams& personalized,
                                         const SequenceBatch& batch,
                                         const LossConfig& config,
                                         const std::set<std::string>& trainable = {},
                                         double tolerance = 1e-9);

/// N x 5 posteriors of `params` on one batch (evaluation mode).
Tensor batch_posteriors(const ModelParams& params, const SequenceBatch& batch);

}  // namespace sleepstage
