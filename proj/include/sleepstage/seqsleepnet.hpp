#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sleepstage/graph.hpp"
#include "sleepstage/preprocessing.hpp"
#include "sleepstage/tensor.hpp"

namespace sleepstage {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t freq_bins = 129;
  std::size_t frames = 29;
  std::size_t filters = 32;         // M
  std::size_t epb_hidden = 64;      // per direction
  std::size_t attention_size = 64;
  std::size_t spb_hidden = 64;      // per direction
  std::size_t seq_len = 20;         // L
  bool recurrent_norm = false;
  double norm_momentum = 0.1;       // running-statistics update rate

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class ParamGroup { EPB, SPB, Softmax };
const char* group_name(ParamGroup g);
ParamGroup group_of(const std::string& param_name);

/// Named parameter tensors plus (with recurrent_norm) running statistics.
///
/// Names: epb.filterbank (raw F x M, effective = raw^2), epb.{fw,bw}.{wx,wh,b},
/// epb.att.{w,b,v}, spb.{fw,bw}.{wx,wh,b}, softmax.{w,b}; with recurrent
/// normalization also {epb,spb}.{fw,bw}.{gx,gh}. Recurrent gates are packed
/// [input, forget, candidate, output].
struct ModelParams {
  ModelConfig config;
  std::uint64_t seed = 0;
  TensorMap tensors;
  TensorMap buffers;

  std::vector<std::string> names() const;
  std::vector<std::string> names_in(ParamGroup g) const;
  bool bit_equal(const ModelParams& other) const;
};

/// Glorot-uniform matrices, zero biases with forget-gate bias 1, and a
/// triangular filterbank over the bin axis whose effective filters each sum
/// to 1. Values are rounded to single precision so checkpoints are exact.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

/// Effective (non-negative) filterbank, F x M.
Tensor effective_filterbank(const ModelParams& params);

/// Rounds every tensor and buffer to the nearest float.
void round_to_float(ModelParams& params);

enum class Strategy { All, EpbSoftmax, SpbSoftmax, Softmax };
const char* strategy_name(Strategy s);
Strategy parse_strategy(const std::string& name);  // "All", "EPB+Softmax", ...
inline constexpr Strategy kAllStrategies[] = {Strategy::All, Strategy::EpbSoftmax,
                                              Strategy::SpbSoftmax, Strategy::Softmax};

struct GroupSelection {
  std::set<std::string> trainable;
  std::set<std::string> frozen;
};
GroupSelection select_groups(const ModelParams& params, Strategy strategy);

/// B sequences of L epochs. Rows are ordered position-major: row l*B + b
/// holds epoch l of sequence b. images[t] is the N x F column t of every
/// epoch, N = L*B.
struct SequenceBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<Tensor> images;
  Tensor labels;  // N x 5 one-hot
};

struct SequenceRef {
  const PreparedNight* night = nullptr;
  std::size_t start = 0;
};

SequenceBatch make_batch(std::span<const SequenceRef> refs, std::size_t seq_len);

struct PosteriorSequence {
  Tensor probs;  // L x 5
};

/// The model as a reusable static graph. Bind parameters, set a batch,
/// run forward; loss terms may be appended to graph() after construction.
class SeqSleepNet {
 public:
  explicit SeqSleepNet(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  Graph& graph() { return graph_; }
  const Graph& graph() const { return graph_; }

  Var probs() const { return probs_; }    // N x 5
  Var param(const std::string& name) const;
  const std::vector<std::string>& param_names() const { return names_; }

  void bind_params(const ModelParams& params);
  void bind_batch(const SequenceBatch& batch);
  // Runs the graph forward; non-finite states are reported with their
  // block and time index.
  void forward();

  // Posteriors of the last forward pass, one L x 5 matrix per sequence.
  std::vector<PosteriorSequence> posteriors() const;

 private:
  ModelConfig config_;
  Graph graph_;
  Var probs_;
  std::vector<std::string> names_;
  std::vector<Var> param_vars_;
  // node range of each recurrent step, for error reporting
  struct Step {
    std::size_t first = 0;
    std::size_t last = 0;
    std::string label;
  };
  std::vector<Step> steps_;
};

/// Convenience: posteriors for many sequences, evaluated in chunks.
std::vector<PosteriorSequence> predict(const ModelParams& params,
                                       std::span<const SequenceRef> refs,
                                       std::size_t chunk = 64);
PosteriorSequence forward(const ModelParams& params, const SequenceRef& sample);

/// T x M filterbank features of one F x T image.
Tensor filterbank_forward(const Tensor& image, const ModelParams& params);

struct EpochEncoding {
  Tensor states;   // T x 2H, forward and backward states
  Tensor weights;  // 1 x T attention weights
  Tensor pooled;   // 1 x 2H
};
EpochEncoding epoch_encode(const Tensor& features, const ModelParams& params);

/// L x 2H_spb outputs for L x 2H_epb epoch vectors.
Tensor sequence_encode(const Tensor& epoch_vectors, const ModelParams& params);

/// Versioned single-precision checkpoint (format in docs/formats.md).
std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params);
ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace sleepstage
