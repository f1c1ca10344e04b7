#include "sleepstage/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <random>

namespace sleepstage {

namespace {

void check_shape(const std::string& name, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw TrainingError("gradient for " + name + " has shape " + shape_string(b.shape()) +
                        ", parameter has " + shape_string(a.shape()));
  }
}

// One reusable training graph: model, loss over the trainable set, and (for
// personalization) a frozen SI model producing the soft targets.
class Step {
 public:
  Step(const ModelParams& init, const std::set<std::string>& trainable, double lambda,
       const LossConfig* kl, LossForm form)
      : net_(init.config), trainable_(trainable) {
    Graph& g = net_.graph();
    std::vector<Var> ps;
    for (const auto& name : net_.param_names()) {
      const bool train = trainable.count(name) > 0;
      g.set_trainable(name, train);
      if (train) ps.push_back(net_.param(name));
    }
    Var labels = g.input("labels");
    const std::size_t L = init.config.seq_len;
    if (kl) {
      loss_ = build_personalization_loss(g, net_.probs(), labels, g.input("si_probs"), ps, L,
                                         *kl, form);
    } else {
      loss_ = build_sequence_ce_loss(g, net_.probs(), labels, ps, L, lambda);
    }
    net_.bind_params(init);
  }

  Graph& graph() { return net_.graph(); }

  // Forward and backward on one batch; returns the loss.
  double run(const SequenceBatch& batch, const Tensor* si_probs, TensorMap& grads) {
    Graph& g = net_.graph();
    net_.bind_batch(batch);
    g.bind("labels", batch.labels);
    if (si_probs) g.bind("si_probs", *si_probs);
    net_.forward();
    const double loss = g.value(loss_).item();
    if (!std::isfinite(loss)) throw TrainingError("loss is not finite");
    grads = g.backprop(loss_);
    return loss;
  }

  // Pushes updated trainable tensors into the graph and folds the batch
  // statistics of trainable groups into the running buffers.
  void commit(ModelParams& params, double momentum) {
    Graph& g = net_.graph();
    for (const auto& name : trainable_) g.bind(name, params.tensors.at(name));
    if (!params.config.recurrent_norm) return;
    g.update_running_stats(momentum);
    for (auto& [name, buf] : g.buffers()) {
      if (trainable_.count(owner(name))) {
        params.buffers[name] = buf;
      } else {
        auto it = params.buffers.find(name);
        buf = it == params.buffers.end() ? Tensor() : it->second;
      }
    }
  }

 private:
  // Buffers are named "<block>.<dir>.bn_x.<k>"; they follow the group of
  // the matching gamma parameter.
  static std::string owner(const std::string& buffer) {
    const auto pos = buffer.find(".bn_");
    if (pos == std::string::npos) return buffer;
    return buffer.substr(0, pos) + (buffer.compare(pos, 6, ".bn_x.") == 0 ? ".gx" : ".gh");
  }

  SeqSleepNet net_;
  std::set<std::string> trainable_;
  Var loss_;
};

void shuffle(std::vector<SequenceRef>& refs, std::mt19937_64& rng) {
  // Fisher-Yates with an explicit draw so the order is the same on every
  // standard library.
  for (std::size_t i = refs.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(refs[i - 1], refs[j]);
  }
}

double pooled_accuracy(const ModelParams& params, std::span<const PreparedNight> nights,
                       FusionMode mode) {
  std::uint64_t correct = 0, total = 0;
  for (const auto& night : nights) {
    const NightEvaluation ev = evaluate_night(params, night, mode);
    for (std::size_t k = 0; k < kNumStages; ++k) correct += ev.cm.counts[k][k];
    total += ev.cm.total();
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

FinetuneResult finetune_loop(const ModelParams& init, const PreparedNight& night,
                             const FinetuneConfig& config, bool with_si) {
  config.validate();
  const std::size_t L = init.config.seq_len;
  if (night.num_epochs() < L) {
    throw TrainingError("night " + std::to_string(night.night_index) + " of " +
                        night.subject_id + " has " + std::to_string(night.num_epochs()) +
                        " epochs, fewer than the sequence length " + std::to_string(L));
  }
  if (night.freq_bins != init.config.freq_bins || night.frames != init.config.frames) {
    throw TrainingError("night images are " + std::to_string(night.freq_bins) + "x" +
                        std::to_string(night.frames) + " but the model expects " +
                        std::to_string(init.config.freq_bins) + "x" +
                        std::to_string(init.config.frames));
  }

  ModelParams params = init;
  const GroupSelection sel = select_groups(params, config.strategy);
  const LossConfig kl{config.lambda, config.alpha};
  Step step(params, sel.trainable, config.lambda, with_si ? &kl : nullptr, config.form);
  AdamState adam = make_adam_state(params.tensors, sel.trainable);

  std::unique_ptr<SeqSleepNet> si_net;
  if (with_si && config.alpha > 0.0) {
    si_net = std::make_unique<SeqSleepNet>(init.config);
    si_net->graph().set_training(false);
    si_net->bind_params(init);
  }

  const PreparedNight* one = &night;
  std::vector<SequenceRef> refs = training_sequences({one, 1}, L, config.stride);
  std::mt19937_64 rng(config.seed);
  FinetuneResult result;
  TensorMap grads;
  for (std::size_t epoch = 1; epoch <= config.finetune_epochs; ++epoch) {
    shuffle(refs, rng);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t i = 0; i < refs.size(); i += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, refs.size() - i);
      const SequenceBatch batch = make_batch({refs.data() + i, n}, L);
      Tensor si_probs;
      if (with_si) {
        if (si_net) {
          si_net->bind_batch(batch);
          si_net->forward();
          si_probs = si_net->graph().value(si_net->probs());
        } else {
          // alpha = 0: the SI term is multiplied by zero, so its target is
          // irrelevant and the SI forward pass is skipped
          si_probs = Tensor({batch.labels.rows(), kNumStages}, 0.0);
        }
      }
      double loss = 0.0;
      try {
        loss = step.run(batch, with_si ? &si_probs : nullptr, grads);
      } catch (const std::runtime_error& e) {
        throw DivergenceError("finetuning diverged at epoch " + std::to_string(epoch) +
                                  ": " + e.what(),
                              params, epoch);
      }
      adam_step(params.tensors, grads, adam, config.learning_rate);
      step.commit(params, init.config.norm_momentum);
      result.batch_loss.push_back(loss);
      sum += loss;
      ++batches;
    }
    result.epoch_loss.push_back(sum / static_cast<double>(batches));
    if (epoch % config.snapshot_every == 0) result.snapshots.push_back({epoch, params});
  }
  return result;
}

}  // namespace

AdamState make_adam_state(const TensorMap& params, const std::set<std::string>& trainable,
                          const AdamConfig& config) {
  AdamState s;
  s.config = config;
  for (const auto& name : trainable) {
    auto it = params.find(name);
    if (it == params.end()) throw TrainingError("unknown trainable parameter " + name);
    s.m[name] = Tensor(it->second.shape(), 0.0);
    s.v[name] = Tensor(it->second.shape(), 0.0);
  }
  return s;
}

void adam_step(TensorMap& params, const TensorMap& grads, AdamState& state, double lr) {
  for (const auto& [name, g] : grads) {
    if (!state.m.count(name)) {
      throw TrainingError("gradient supplied for frozen parameter " + name);
    }
  }
  for (const auto& [name, m] : state.m) {
    if (!grads.count(name)) throw TrainingError("missing gradient for " + name);
    auto it = params.find(name);
    if (it == params.end()) throw TrainingError("unknown parameter " + name);
    check_shape(name, it->second, grads.at(name));
  }

  ++state.step;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(c.beta1, t);
  const double c2 = 1.0 - std::pow(c.beta2, t);
  for (auto& [name, m] : state.m) {
    Tensor& v = state.v.at(name);
    Tensor& p = params.at(name);
    const Tensor& g = grads.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + c.epsilon);
    }
  }
}

std::vector<SequenceRef> training_sequences(std::span<const PreparedNight> nights,
                                            std::size_t seq_len, std::size_t stride) {
  if (stride == 0) throw TrainingError("sequence stride must be positive");
  std::vector<SequenceRef> refs;
  for (const auto& night : nights) {
    for (std::size_t s = 0; s + seq_len <= night.num_epochs(); s += stride) {
      refs.push_back({&night, s});
    }
  }
  return refs;
}

PretrainResult pretrain(std::span<const PreparedNight> train,
                        std::span<const PreparedNight> valid, const ModelConfig& model,
                        const PretrainConfig& config) {
  if (train.empty()) throw TrainingError("pretraining needs at least one training night");
  if (config.batch_size == 0 || config.epochs == 0) {
    throw TrainingError("pretraining needs positive epochs and batch size");
  }
  for (const auto& n : train) {
    if (n.freq_bins != model.freq_bins || n.frames != model.frames) {
      throw TrainingError("night of " + n.subject_id + " has " + std::to_string(n.freq_bins) +
                          "x" + std::to_string(n.frames) + " images, the model expects " +
                          std::to_string(model.freq_bins) + "x" +
                          std::to_string(model.frames));
    }
  }
  std::vector<SequenceRef> refs = training_sequences(train, model.seq_len, config.stride);
  if (refs.empty()) throw TrainingError("no training night is as long as one sequence");

  ModelParams params = init_params(model, config.seed);
  std::set<std::string> all;
  for (const auto& name : params.names()) all.insert(name);
  Step step(params, all, config.lambda, nullptr, LossForm::CrossEntropy);
  AdamState adam = make_adam_state(params.tensors, all);

  PretrainResult result;
  result.best = params;
  result.best_valid_accuracy = -1.0;
  std::mt19937_64 rng(config.seed);
  TensorMap grads;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle(refs, rng);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t i = 0; i < refs.size(); i += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, refs.size() - i);
      const SequenceBatch batch = make_batch({refs.data() + i, n}, model.seq_len);
      double loss = 0.0;
      try {
        loss = step.run(batch, nullptr, grads);
      } catch (const std::runtime_error& e) {
        throw DivergenceError("pretraining diverged at epoch " + std::to_string(epoch) +
                                  ": " + e.what(),
                              params, epoch);
      }
      adam_step(params.tensors, grads, adam, config.learning_rate);
      step.commit(params, model.norm_momentum);
      sum += loss;
      ++batches;
    }
    result.train_loss.push_back(sum / static_cast<double>(batches));
    if (valid.empty()) {
      result.best = params;
      result.best_epoch = epoch;
      continue;
    }
    const double acc = pooled_accuracy(params, valid, config.fusion);
    result.valid_accuracy.push_back(acc);
    if (acc > result.best_valid_accuracy) {
      result.best_valid_accuracy = acc;
      result.best = params;
      result.best_epoch = epoch;
    }
  }
  if (valid.empty()) result.best_valid_accuracy = 0.0;
  return result;
}

void FinetuneConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw TrainingError("alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw TrainingError("learning rate must be positive");
  }
  if (!(lambda >= 0.0)) throw TrainingError("lambda must be non-negative");
  if (finetune_epochs == 0 || snapshot_every == 0 || batch_size == 0 || stride == 0) {
    throw TrainingError("finetune epochs, snapshot interval, batch size and stride must be "
                        "positive");
  }
}

FinetuneResult personalize(const ModelParams& si, const PreparedNight& night,
                           const FinetuneConfig& config) {
  return finetune_loop(si, night, config, true);
}

FinetuneResult finetune(const ModelParams& init, const PreparedNight& night,
                        const FinetuneConfig& config) {
  return finetune_loop(init, night, config, false);
}

std::vector<ReportRow> snapshot_rows(const ModelParams& si,
                                     std::span<const Snapshot> snapshots,
                                     const PreparedNight& night1,
                                     const PreparedNight& night2, double alpha,
                                     const std::string& strategy, FusionMode fusion) {
  std::vector<ReportRow> rows;
  auto add = [&](const PreparedNight& night, int index, std::size_t epoch,
                 const ModelParams& params) {
    rows.push_back({night.subject_id, index, alpha, strategy, epoch,
                    evaluate_night(params, night, fusion).metrics});
  };
  add(night1, 1, 0, si);
  add(night2, 2, 0, si);
  for (const auto& snap : snapshots) add(night2, 2, snap.epoch, snap.params);
  return rows;
}

std::vector<ReportRow> personalization_rows(const ModelParams& si,
                                            const PreparedNight& night1,
                                            const PreparedNight& night2,
                                            const FinetuneConfig& config, FusionMode fusion) {
  const FinetuneResult run = personalize(si, night1, config);
  return snapshot_rows(si, run.snapshots, night1, night2, config.alpha,
                       strategy_name(config.strategy), fusion);
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string checkpoint_hash(const ModelParams& params) {
  return hex64(fnv1a64(encode_checkpoint(params)));
}

}  // namespace sleepstage
