#pragma once

#include <random>

#include "sleepstage/preprocessing.hpp"
#include "sleepstage/seqsleepnet.hpp"

namespace sleepstage::testing {

// 16 bins, M=4, hidden 4, L=3, T=5.
inline ModelConfig tiny_config(bool recurrent_norm = false) {
  ModelConfig c;
  c.freq_bins = 16;
  c.frames = 5;
  c.filters = 4;
  c.epb_hidden = 4;
  c.attention_size = 4;
  c.spb_hidden = 4;
  c.seq_len = 3;
  c.recurrent_norm = recurrent_norm;
  return c;
}

inline PreparedNight random_night(std::size_t epochs, std::size_t bins, std::size_t frames,
                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::uniform_int_distribution<int> stage(0, 4);
  PreparedNight n;
  n.subject_id = "R" + std::to_string(seed);
  n.freq_bins = bins;
  n.frames = frames;
  n.images.resize(epochs * bins * frames);
  for (float& v : n.images) v = g(rng);
  for (std::size_t e = 0; e < epochs; ++e) n.labels.push_back(static_cast<SleepStage>(stage(rng)));
  return n;
}

inline std::vector<SequenceRef> refs_of(const PreparedNight& night, std::size_t count,
                                        std::size_t stride = 1) {
  std::vector<SequenceRef> refs;
  for (std::size_t i = 0; i < count; ++i) refs.push_back({&night, i * stride});
  return refs;
}

inline Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed,
                            double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  Tensor t({rows, cols}, 0.0);
  for (double& v : t.storage()) v = g(rng);
  return t;
}

}  // namespace sleepstage::testing
