#include "sleepstage/losses.hpp"

#include <cmath>

namespace sleepstage {

void LossConfig::validate() const {
  if (!(lambda >= 0.0)) throw LossError("lambda must be non-negative");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw LossError("alpha must lie in [0, 1]");
}

Var build_data_term(Graph& g, Var probs, Var labels, std::size_t seq_len) {
  Var picked = g.sum(g.mul(labels, g.log(probs, kLogEpsilon)));
  return g.scale(picked, -1.0 / static_cast<double>(seq_len));
}

Var build_l2_term(Graph& g, const std::vector<Var>& params, double lambda) {
  Var total = g.constant(Tensor::scalar(0.0));
  for (Var p : params) total = g.add(total, g.sum(g.square(p)));
  return g.scale(total, lambda / 2.0);
}

Var build_si_cross_entropy(Graph& g, Var probs, Var si_probs, std::size_t seq_len) {
  Var picked = g.sum(g.mul(si_probs, g.log(probs, kLogEpsilon)));
  return g.scale(picked, -1.0 / static_cast<double>(seq_len));
}

Var build_kl_term(Graph& g, Var probs, Var si_probs, std::size_t seq_len) {
  Var ratio = g.sub(g.log(si_probs, kLogEpsilon), g.log(probs, kLogEpsilon));
  return g.scale(g.sum(g.mul(si_probs, ratio)), 1.0 / static_cast<double>(seq_len));
}

Var build_sequence_ce_loss(Graph& g, Var probs, Var labels,
                           const std::vector<Var>& params, std::size_t seq_len,
                           double lambda) {
  return g.add(build_data_term(g, probs, labels, seq_len),
               build_l2_term(g, params, lambda));
}

Var build_personalization_loss(Graph& g, Var probs, Var labels, Var si_probs,
                               const std::vector<Var>& params, std::size_t seq_len,
                               const LossConfig& config, LossForm form) {
  config.validate();
  Var data = g.scale(build_data_term(g, probs, labels, seq_len), 1.0 - config.alpha);
  Var base = g.add(data, build_l2_term(g, params, config.lambda));
  Var si = form == LossForm::Kl ? build_kl_term(g, probs, si_probs, seq_len)
                                : build_si_cross_entropy(g, probs, si_probs, seq_len);
  return g.add(base, g.scale(si, config.alpha));
}

namespace {

void check_pair(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw LossError(std::string(what) + ": shape " + shape_string(a.shape()) +
                    " does not match " + shape_string(b.shape()));
  }
  if (a.rank() != 2 || a.cols() != kNumStages) {
    throw LossError(std::string(what) + ": expected L x 5 matrices, got " +
                    shape_string(a.shape()));
  }
}

double cross_sum(const Tensor& weights, const Tensor& probs) {
  double s = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    s += weights[i] * std::log(probs[i] + kLogEpsilon);
  }
  return s;
}

double l2(const TensorMap& params, double lambda) {
  double s = 0.0;
  for (const auto& [name, t] : params) {
    for (double v : t.values()) s += v * v;
  }
  return lambda / 2.0 * s;
}

}  // namespace

double sequence_ce_loss(std::span<const PosteriorSequence> posteriors,
                        std::span<const Tensor> labels, const TensorMap& trainable,
                        double lambda) {
  if (posteriors.size() != labels.size()) {
    throw LossError("got " + std::to_string(posteriors.size()) + " posteriors but " +
                    std::to_string(labels.size()) + " label sequences");
  }
  double data = 0.0;
  for (std::size_t n = 0; n < posteriors.size(); ++n) {
    check_pair(posteriors[n].probs, labels[n], "sequence_ce_loss");
    data += -cross_sum(labels[n], posteriors[n].probs) /
            static_cast<double>(labels[n].rows());
  }
  return data + l2(trainable, lambda);
}

double kl_divergence(const PosteriorSequence& si, const PosteriorSequence& personalized) {
  check_pair(si.probs, personalized.probs, "kl_divergence");
  double s = 0.0;
  for (std::size_t i = 0; i < si.probs.size(); ++i) {
    const double p = si.probs[i];
    s += p * (std::log(p + kLogEpsilon) - std::log(personalized.probs[i] + kLogEpsilon));
  }
  return s / static_cast<double>(si.probs.rows());
}

double si_entropy_offset(std::span<const PosteriorSequence> si, double alpha) {
  double s = 0.0;
  for (const auto& seq : si) {
    s += cross_sum(seq.probs, seq.probs) / static_cast<double>(seq.probs.rows());
  }
  return alpha * s;
}

double personalization_loss(std::span<const PosteriorSequence> si,
                            std::span<const PosteriorSequence> personalized,
                            std::span<const Tensor> labels, const TensorMap& trainable,
                            const LossConfig& config, LossForm form) {
  config.validate();
  if (si.size() != personalized.size() || si.size() != labels.size()) {
    throw LossError("personalization_loss needs equally many SI posteriors, "
                    "personalized posteriors and label sequences");
  }
  double data = 0.0, target = 0.0;
  for (std::size_t n = 0; n < si.size(); ++n) {
    check_pair(personalized[n].probs, labels[n], "personalization_loss");
    check_pair(si[n].probs, personalized[n].probs, "personalization_loss");
    const double L = static_cast<double>(labels[n].rows());
    data += -cross_sum(labels[n], personalized[n].probs) / L;
    target += form == LossForm::Kl ? kl_divergence(si[n], personalized[n])
                                   : -cross_sum(si[n].probs, personalized[n].probs) / L;
  }
  return ((1.0 - config.alpha) * data + l2(trainable, config.lambda)) + config.alpha * target;
}

Tensor batch_posteriors(const ModelParams& params, const SequenceBatch& batch) {
  SeqSleepNet net(params.config);
  net.graph().set_training(false);
  net.bind_params(params);
  net.bind_batch(batch);
  net.forward();
  return net.graph().value(net.probs());
}

EquivalenceReport loss_equivalence_check(const ModelParams& si,
                                         const ModelParams& personalized,
                                         const SequenceBatch& batch,
                                         const LossConfig& config,
                                         const std::set<std::string>& trainable,
                                         double tolerance) {
  const Tensor si_probs = batch_posteriors(si, batch);

  SeqSleepNet net(personalized.config);
  Graph& g = net.graph();
  g.set_training(false);
  std::vector<Var> params;
  for (const auto& name : net.param_names()) {
    const bool train = trainable.empty() || trainable.count(name) > 0;
    g.set_trainable(name, train);
    if (train) params.push_back(net.param(name));
  }
  Var labels = g.input("labels");
  Var target = g.input("si_probs");
  const std::size_t L = personalized.config.seq_len;
  Var ce = build_personalization_loss(g, net.probs(), labels, target, params, L, config,
                                      LossForm::CrossEntropy);
  Var kl = build_personalization_loss(g, net.probs(), labels, target, params, L, config,
                                      LossForm::Kl);
  net.bind_params(personalized);
  net.bind_batch(batch);
  g.bind("labels", batch.labels);
  g.bind("si_probs", si_probs);
  net.forward();

  EquivalenceReport report;
  report.tolerance = tolerance;
  report.value_ce = g.value(ce).item();
  report.value_kl = g.value(kl).item();
  double offset = 0.0;
  for (std::size_t i = 0; i < si_probs.size(); ++i) {
    offset += si_probs[i] * std::log(si_probs[i] + kLogEpsilon);
  }
  report.expected_offset = config.alpha * offset / static_cast<double>(L);

  const TensorMap g_ce = g.backprop(ce);
  const TensorMap g_kl = g.backprop(kl);
  for (const auto& [name, a] : g_ce) {
    const Tensor& b = g_kl.at(name);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = std::abs(a[i] - b[i]);
      if (d > report.max_gradient_deviation) {
        report.max_gradient_deviation = d;
        report.worst_parameter = name;
      }
    }
  }
  report.passed = report.max_gradient_deviation <= tolerance;
  return report;
}

}  // namespace sleepstage
