#include "sleepstage/seqsleepnet.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <random>

#include "binary_io.hpp"
#include "sleepstage/edf.hpp"

namespace sleepstage {

namespace {

constexpr char kCheckpointMagic[4] = {'S', 'S', 'N', 'M'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr double kFilterFloor = 1e-3;  // share of each filter spread over all bins
constexpr double kNormGammaInit = 0.1;

std::map<std::string, Shape> param_shapes(const ModelConfig& c) {
  const std::size_t he = c.epb_hidden, hs = c.spb_hidden;
  std::map<std::string, Shape> s;
  s["epb.filterbank"] = {c.freq_bins, c.filters};
  for (const char* dir : {"fw", "bw"}) {
    const std::string e = std::string("epb.") + dir;
    const std::string q = std::string("spb.") + dir;
    s[e + ".wx"] = {c.filters, 4 * he};
    s[e + ".wh"] = {he, 4 * he};
    s[e + ".b"] = {1, 4 * he};
    s[q + ".wx"] = {2 * he, 4 * hs};
    s[q + ".wh"] = {hs, 4 * hs};
    s[q + ".b"] = {1, 4 * hs};
    if (c.recurrent_norm) {
      s[e + ".gx"] = {1, 4 * he};
      s[e + ".gh"] = {1, 4 * he};
      s[q + ".gx"] = {1, 4 * hs};
      s[q + ".gh"] = {1, 4 * hs};
    }
  }
  s["epb.att.w"] = {2 * he, c.attention_size};
  s["epb.att.b"] = {1, c.attention_size};
  s["epb.att.v"] = {c.attention_size, 1};
  s["softmax.w"] = {2 * hs, kNumStages};
  s["softmax.b"] = {1, kNumStages};
  return s;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

struct StepRange {
  std::size_t first = 0;
  std::size_t last = 0;
  std::string label;
};

// Appends the model's blocks to a graph. Parameters are created on first use.
struct Builder {
  Graph& g;
  const ModelConfig& c;
  std::map<std::string, Var>& params;
  std::vector<StepRange>* steps = nullptr;

  Var p(const std::string& name) {
    auto it = params.find(name);
    if (it != params.end()) return it->second;
    Var v = g.parameter(name);
    params.emplace(name, v);
    return v;
  }

  std::vector<Var> features(const std::vector<Var>& images) {
    Var bank = g.square(p("epb.filterbank"));
    std::vector<Var> xs;
    for (Var img : images) xs.push_back(g.matmul(img, bank));
    return xs;
  }

  std::vector<Var> lstm(const std::string& prefix, const std::vector<Var>& xs,
                        std::size_t hidden, bool reverse, const std::string& what) {
    const std::size_t n = xs.size();
    Var wx = p(prefix + ".wx"), wh = p(prefix + ".wh"), b = p(prefix + ".b");
    std::vector<Var> hs(n);
    Var h{}, cell{};
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t t = reverse ? n - 1 - k : k;
      const std::size_t first = g.size();
      Var z = g.matmul(xs[t], wx);
      if (c.recurrent_norm) {
        z = g.batch_norm(z, p(prefix + ".gx"), prefix + ".bn_x." + std::to_string(k));
      }
      if (k > 0) {
        Var zh = g.matmul(h, wh);
        if (c.recurrent_norm) {
          zh = g.batch_norm(zh, p(prefix + ".gh"), prefix + ".bn_h." + std::to_string(k));
        }
        z = g.add(z, zh);
      }
      z = g.add_row(z, b);
      Var i = g.sigmoid(g.slice_cols(z, 0, hidden));
      Var f = g.sigmoid(g.slice_cols(z, hidden, 2 * hidden));
      Var cand = g.tanh(g.slice_cols(z, 2 * hidden, 3 * hidden));
      Var o = g.sigmoid(g.slice_cols(z, 3 * hidden, 4 * hidden));
      // The initial state is zero, so the first step has no recurrent term.
      cell = k == 0 ? g.mul(i, cand) : g.add(g.mul(f, cell), g.mul(i, cand));
      h = g.mul(o, g.tanh(cell));
      hs[t] = h;
      if (steps) steps->push_back({first, g.size() - 1, what + std::to_string(t)});
    }
    return hs;
  }

  std::vector<Var> bilstm(const std::string& block, const std::vector<Var>& xs,
                          std::size_t hidden, const std::string& unit) {
    auto fw = lstm(block + ".fw", xs, hidden, false,
                   block + " forward state at " + unit + " ");
    auto bw = lstm(block + ".bw", xs, hidden, true,
                   block + " backward state at " + unit + " ");
    std::vector<Var> out;
    for (std::size_t t = 0; t < xs.size(); ++t) out.push_back(g.concat_cols({fw[t], bw[t]}));
    return out;
  }

  // Returns (N x T weights, N x 2H pooled vector).
  std::pair<Var, Var> attention(const std::vector<Var>& as) {
    Var w = p("epb.att.w"), b = p("epb.att.b"), v = p("epb.att.v");
    std::vector<Var> scores;
    const std::size_t first = g.size();
    for (Var a : as) scores.push_back(g.matmul(g.tanh(g.add_row(g.matmul(a, w), b)), v));
    Var weights = g.softmax_rows(g.concat_cols(scores));
    Var pooled{};
    for (std::size_t t = 0; t < as.size(); ++t) {
      Var term = g.mul_col(g.slice_cols(weights, t, t + 1), as[t]);
      pooled = t == 0 ? term : g.add(pooled, term);
    }
    if (steps) steps->push_back({first, g.size() - 1, "epb attention"});
    return {weights, pooled};
  }
};

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw ModelError(std::string("model size '") + what + "' must be positive");
  };
  positive(freq_bins, "freq_bins");
  positive(frames, "frames");
  positive(filters, "filters");
  positive(epb_hidden, "epb_hidden");
  positive(attention_size, "attention_size");
  positive(spb_hidden, "spb_hidden");
  positive(seq_len, "seq_len");
  if (filters >= freq_bins) {
    throw ModelError("filter count " + std::to_string(filters) +
                     " must be below the number of frequency bins " +
                     std::to_string(freq_bins));
  }
  if (!(norm_momentum > 0.0 && norm_momentum <= 1.0)) {
    throw ModelError("norm_momentum must lie in (0, 1]");
  }
}

const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::EPB: return "EPB";
    case ParamGroup::SPB: return "SPB";
    case ParamGroup::Softmax: return "Softmax";
  }
  return "?";
}

ParamGroup group_of(const std::string& name) {
  if (name.rfind("epb.", 0) == 0) return ParamGroup::EPB;
  if (name.rfind("spb.", 0) == 0) return ParamGroup::SPB;
  if (name.rfind("softmax.", 0) == 0) return ParamGroup::Softmax;
  throw ModelError("parameter '" + name + "' belongs to no group");
}

std::vector<std::string> ModelParams::names() const {
  std::vector<std::string> out;
  for (const auto& [name, t] : tensors) out.push_back(name);
  return out;
}

std::vector<std::string> ModelParams::names_in(ParamGroup g) const {
  std::vector<std::string> out;
  for (const auto& [name, t] : tensors) {
    if (group_of(name) == g) out.push_back(name);
  }
  return out;
}

bool ModelParams::bit_equal(const ModelParams& other) const {
  auto same = [](const TensorMap& a, const TensorMap& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [name, t] : a) {
      auto it = b.find(name);
      if (it == b.end() || !t.bit_equal(it->second)) return false;
    }
    return true;
  };
  return config == other.config && seed == other.seed && same(tensors, other.tensors) &&
         same(buffers, other.buffers);
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams params;
  params.config = config;
  params.seed = seed;
  std::mt19937_64 rng(seed);

  for (const auto& [name, shape] : param_shapes(config)) {
    Tensor t(shape, 0.0);
    if (name == "epb.filterbank") {
      const std::size_t F = config.freq_bins, M = config.filters;
      const double spacing = static_cast<double>(F - 1) / static_cast<double>(M + 1);
      for (std::size_t m = 0; m < M; ++m) {
        const double centre = spacing * static_cast<double>(m + 1);
        std::vector<double> tri(F, 0.0);
        double total = 0.0;
        for (std::size_t k = 0; k < F; ++k) {
          tri[k] = std::max(0.0, 1.0 - std::abs(static_cast<double>(k) - centre) / spacing);
          total += tri[k];
        }
        if (total == 0.0) {
          tri[static_cast<std::size_t>(std::llround(centre))] = 1.0;
          total = 1.0;
        }
        for (std::size_t k = 0; k < F; ++k) {
          const double eff = (1.0 - kFilterFloor) * tri[k] / total +
                             kFilterFloor / static_cast<double>(F);
          t(k, m) = std::sqrt(eff);
        }
      }
    } else if (ends_with(name, ".gx") || ends_with(name, ".gh")) {
      t.fill(kNormGammaInit);
    } else if (ends_with(name, ".b")) {
      if (name != "softmax.b" && name != "epb.att.b") {
        const std::size_t h = shape[1] / 4;
        for (std::size_t k = h; k < 2 * h; ++k) t[k] = 1.0;  // forget gate
      }
    } else {
      const double r = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      std::uniform_real_distribution<double> u(-r, r);
      for (double& v : t.storage()) v = u(rng);
    }
    params.tensors.emplace(name, std::move(t));
  }
  round_to_float(params);
  return params;
}

Tensor effective_filterbank(const ModelParams& params) {
  Tensor out = params.tensors.at("epb.filterbank");
  for (double& v : out.storage()) v *= v;
  return out;
}

void round_to_float(ModelParams& params) {
  for (TensorMap* m : {&params.tensors, &params.buffers}) {
    for (auto& [name, t] : *m) {
      for (double& v : t.storage()) v = static_cast<double>(static_cast<float>(v));
    }
  }
}

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::All: return "All";
    case Strategy::EpbSoftmax: return "EPB+Softmax";
    case Strategy::SpbSoftmax: return "SPB+Softmax";
    case Strategy::Softmax: return "Softmax";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  auto lower = [](std::string s) {
    for (char& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return s;
  };
  for (Strategy s : kAllStrategies) {
    if (lower(name) == lower(strategy_name(s))) return s;
  }
  throw ModelError("unknown strategy '" + name +
                   "'; valid strategies: All, EPB+Softmax, SPB+Softmax, Softmax");
}

GroupSelection select_groups(const ModelParams& params, Strategy strategy) {
  GroupSelection sel;
  for (const auto& [name, t] : params.tensors) {
    const ParamGroup g = group_of(name);
    bool train = true;
    switch (strategy) {
      case Strategy::All: break;
      case Strategy::EpbSoftmax: train = g != ParamGroup::SPB; break;
      case Strategy::SpbSoftmax: train = g != ParamGroup::EPB; break;
      case Strategy::Softmax: train = g == ParamGroup::Softmax; break;
    }
    (train ? sel.trainable : sel.frozen).insert(name);
  }
  return sel;
}

SequenceBatch make_batch(std::span<const SequenceRef> refs, std::size_t seq_len) {
  if (refs.empty()) throw ModelError("cannot build an empty batch");
  if (seq_len == 0) throw ModelError("sequence length must be positive");
  const std::size_t F = refs[0].night->freq_bins, T = refs[0].night->frames;
  const std::size_t B = refs.size(), N = B * seq_len;
  SequenceBatch batch;
  batch.batch = B;
  batch.seq_len = seq_len;
  batch.images.assign(T, Tensor({N, F}, 0.0));
  batch.labels = Tensor({N, kNumStages}, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    const PreparedNight& night = *refs[b].night;
    if (night.freq_bins != F || night.frames != T) {
      throw ModelError("batch mixes images of different shapes");
    }
    if (refs[b].start + seq_len > night.num_epochs()) {
      throw ModelError("sequence at epoch " + std::to_string(refs[b].start) +
                       " runs past the end of night " + night.subject_id + "/" +
                       std::to_string(night.night_index));
    }
    for (std::size_t l = 0; l < seq_len; ++l) {
      const std::size_t row = l * B + b;
      const std::size_t e = refs[b].start + l;
      const auto img = night.image(e);
      for (std::size_t f = 0; f < F; ++f) {
        for (std::size_t t = 0; t < T; ++t) batch.images[t](row, f) = img[f * T + t];
      }
      batch.labels(row, static_cast<std::size_t>(night.labels[e])) = 1.0;
    }
  }
  return batch;
}

SeqSleepNet::SeqSleepNet(const ModelConfig& config) : config_(config) {
  config_.validate();
  std::map<std::string, Var> params;
  std::vector<StepRange> ranges;
  Builder b{graph_, config_, params, &ranges};

  std::vector<Var> images;
  for (std::size_t t = 0; t < config_.frames; ++t) {
    images.push_back(graph_.input("image_t" + std::to_string(t)));
  }
  auto as = b.bilstm("epb", b.features(images), config_.epb_hidden, "time index");
  Var pooled = b.attention(as).second;

  std::vector<Var> epochs;
  for (std::size_t l = 0; l < config_.seq_len; ++l) {
    epochs.push_back(graph_.row_block(pooled, l, config_.seq_len));
  }
  auto os = b.bilstm("spb", epochs, config_.spb_hidden, "position");
  Var w = b.p("softmax.w"), bias = b.p("softmax.b");
  std::vector<Var> rows;
  for (Var o : os) rows.push_back(graph_.softmax_rows(graph_.add_row(graph_.matmul(o, w), bias)));
  probs_ = graph_.concat_rows(rows);
  graph_.set_name(probs_, "probs");

  for (const auto& [name, v] : params) {
    names_.push_back(name);
    param_vars_.push_back(v);
  }
  for (const auto& r : ranges) steps_.push_back({r.first, r.last, r.label});
}

Var SeqSleepNet::param(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw ModelError("model has no parameter '" + name + "'");
  return param_vars_[static_cast<std::size_t>(it - names_.begin())];
}

void SeqSleepNet::bind_params(const ModelParams& params) {
  if (!(params.config == config_)) {
    throw ModelError("parameters were built for a different model configuration");
  }
  for (const auto& name : names_) {
    auto it = params.tensors.find(name);
    if (it == params.tensors.end()) throw ModelError("missing parameter '" + name + "'");
    graph_.bind(name, it->second);
  }
  for (auto& [name, buf] : graph_.buffers()) {
    auto it = params.buffers.find(name);
    buf = it == params.buffers.end() ? Tensor() : it->second;
  }
}

void SeqSleepNet::bind_batch(const SequenceBatch& batch) {
  if (batch.seq_len != config_.seq_len) {
    throw ModelError("batch sequence length " + std::to_string(batch.seq_len) +
                     " does not match the model's " + std::to_string(config_.seq_len));
  }
  if (batch.images.size() != config_.frames) {
    throw ModelError("batch has " + std::to_string(batch.images.size()) +
                     " spectral columns, model expects " + std::to_string(config_.frames));
  }
  for (std::size_t t = 0; t < config_.frames; ++t) {
    if (batch.images[t].cols() != config_.freq_bins) {
      throw ModelError("batch images have " + std::to_string(batch.images[t].cols()) +
                       " frequency bins, model expects " +
                       std::to_string(config_.freq_bins));
    }
    graph_.bind("image_t" + std::to_string(t), batch.images[t]);
  }
}

void SeqSleepNet::forward() {
  try {
    graph_.forward();
  } catch (const NonFiniteError& e) {
    for (const auto& step : steps_) {
      if (e.node() >= step.first && e.node() <= step.last) {
        throw ModelError("non-finite " + step.label + " (node " +
                         std::to_string(e.node()) + ")");
      }
    }
    if (e.kind() == OpKind::Input) throw ModelError("non-finite input image");
    throw ModelError("non-finite value at node " + std::to_string(e.node()) + " (" +
                     op_name(e.kind()) + ")");
  }
}

std::vector<PosteriorSequence> SeqSleepNet::posteriors() const {
  const Tensor& p = graph_.value(probs_);
  const std::size_t L = config_.seq_len, B = p.rows() / L;
  std::vector<PosteriorSequence> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    out[b].probs = Tensor({L, kNumStages}, 0.0);
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t k = 0; k < kNumStages; ++k) out[b].probs(l, k) = p(l * B + b, k);
    }
  }
  return out;
}

std::vector<PosteriorSequence> predict(const ModelParams& params,
                                       std::span<const SequenceRef> refs,
                                       std::size_t chunk) {
  SeqSleepNet net(params.config);
  net.graph().set_training(false);
  net.bind_params(params);
  std::vector<PosteriorSequence> out;
  out.reserve(refs.size());
  for (std::size_t i = 0; i < refs.size(); i += chunk) {
    const auto part = refs.subspan(i, std::min(chunk, refs.size() - i));
    net.bind_batch(make_batch(part, params.config.seq_len));
    net.forward();
    for (auto& p : net.posteriors()) out.push_back(std::move(p));
  }
  return out;
}

PosteriorSequence forward(const ModelParams& params, const SequenceRef& sample) {
  return predict(params, std::span<const SequenceRef>(&sample, 1)).front();
}

namespace {

// Binds the parameters a standalone block graph created.
void bind_used(Graph& g, const std::map<std::string, Var>& used, const ModelParams& params) {
  for (const auto& [name, v] : used) g.bind(name, params.tensors.at(name));
  for (auto& [name, buf] : g.buffers()) {
    auto it = params.buffers.find(name);
    buf = it == params.buffers.end() ? Tensor() : it->second;
  }
  g.set_training(false);
}

Tensor row_of(const Tensor& m, std::size_t r) {
  Tensor out({1, m.cols()}, 0.0);
  std::copy_n(&m[r * m.cols()], m.cols(), out.storage().data());
  return out;
}

}  // namespace

Tensor filterbank_forward(const Tensor& image, const ModelParams& params) {
  const ModelConfig& c = params.config;
  if (image.rank() != 2 || image.rows() != c.freq_bins) {
    throw ModelError("image of shape " + shape_string(image.shape()) + " does not have " +
                     std::to_string(c.freq_bins) + " frequency rows");
  }
  const std::size_t F = image.rows(), T = image.cols();
  Tensor cols({T, F}, 0.0);
  for (std::size_t f = 0; f < F; ++f) {
    for (std::size_t t = 0; t < T; ++t) cols(t, f) = image(f, t);
  }
  Graph g;
  std::map<std::string, Var> used;
  Builder b{g, c, used};
  Var out = b.features({g.input("columns")})[0];
  bind_used(g, used, params);
  g.bind("columns", cols);
  g.forward();
  return g.value(out);
}

EpochEncoding epoch_encode(const Tensor& features, const ModelParams& params) {
  const ModelConfig& c = params.config;
  if (features.rank() != 2 || features.cols() != c.filters || features.rows() == 0) {
    throw ModelError("epoch features of shape " + shape_string(features.shape()) +
                     " are not T x " + std::to_string(c.filters));
  }
  for (std::size_t t = 0; t < features.rows(); ++t) {
    for (std::size_t k = 0; k < features.cols(); ++k) {
      if (!std::isfinite(features(t, k))) {
        throw ModelError("non-finite epoch features at time index " + std::to_string(t));
      }
    }
  }
  Graph g;
  std::map<std::string, Var> used;
  std::vector<StepRange> ranges;
  Builder b{g, c, used, &ranges};
  std::vector<Var> xs;
  for (std::size_t t = 0; t < features.rows(); ++t) {
    xs.push_back(g.input("x" + std::to_string(t)));
  }
  auto as = b.bilstm("epb", xs, c.epb_hidden, "time index");
  auto [weights, pooled] = b.attention(as);
  Var states = g.concat_rows(as);
  bind_used(g, used, params);
  for (std::size_t t = 0; t < features.rows(); ++t) {
    g.bind("x" + std::to_string(t), row_of(features, t));
  }
  try {
    g.forward();
  } catch (const NonFiniteError& e) {
    for (const auto& r : ranges) {
      if (e.node() >= r.first && e.node() <= r.last) throw ModelError("non-finite " + r.label);
    }
    throw ModelError("non-finite epoch features");
  }
  return {g.value(states), g.value(weights), g.value(pooled)};
}

Tensor sequence_encode(const Tensor& epoch_vectors, const ModelParams& params) {
  const ModelConfig& c = params.config;
  if (epoch_vectors.rank() != 2 || epoch_vectors.cols() != 2 * c.epb_hidden ||
      epoch_vectors.rows() == 0) {
    throw ModelError("epoch vectors of shape " + shape_string(epoch_vectors.shape()) +
                     " are not L x " + std::to_string(2 * c.epb_hidden));
  }
  for (std::size_t l = 0; l < epoch_vectors.rows(); ++l) {
    for (std::size_t k = 0; k < epoch_vectors.cols(); ++k) {
      if (!std::isfinite(epoch_vectors(l, k))) {
        throw ModelError("non-finite epoch vector at position " + std::to_string(l));
      }
    }
  }
  Graph g;
  std::map<std::string, Var> used;
  std::vector<StepRange> ranges;
  Builder b{g, c, used, &ranges};
  std::vector<Var> xs;
  for (std::size_t l = 0; l < epoch_vectors.rows(); ++l) {
    xs.push_back(g.input("a" + std::to_string(l)));
  }
  Var out = g.concat_rows(b.bilstm("spb", xs, c.spb_hidden, "position"));
  bind_used(g, used, params);
  for (std::size_t l = 0; l < epoch_vectors.rows(); ++l) {
    g.bind("a" + std::to_string(l), row_of(epoch_vectors, l));
  }
  try {
    g.forward();
  } catch (const NonFiniteError& e) {
    for (const auto& r : ranges) {
      if (e.node() >= r.first && e.node() <= r.last) throw ModelError("non-finite " + r.label);
    }
    throw ModelError("non-finite epoch vectors");
  }
  return g.value(out);
}

namespace {

void write_tensors(detail::ByteWriter& w, const TensorMap& m) {
  w.u32(static_cast<std::uint32_t>(m.size()));
  for (const auto& [name, t] : m) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.values()) w.f32(static_cast<float>(v));
  }
}

TensorMap read_tensors(detail::ByteReader& r) {
  TensorMap m;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(4096);
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw ModelError("checkpoint tensor '" + name + "' has rank " +
                                   std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    const std::size_t n = shape_size(shape);
    r.need(n * 4);
    Tensor t(shape, 0.0);
    for (double& v : t.storage()) v = r.f32();
    m.emplace(std::move(name), std::move(t));
  }
  return m;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params) {
  const ModelConfig& c = params.config;
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u64(params.seed);
  for (std::size_t v : {c.freq_bins, c.frames, c.filters, c.epb_hidden, c.attention_size,
                        c.spb_hidden, c.seq_len}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.u8(c.recurrent_norm ? 1 : 0);
  w.f64(c.norm_momentum);
  write_tensors(w, params.tensors);
  write_tensors(w, params.buffers);
  return std::move(w.data());
}

ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes) {
  try {
    detail::ByteReader r(bytes, "checkpoint");
    char magic[4];
    for (char& ch : magic) ch = static_cast<char>(r.u8());
    if (std::string(magic, 4) != std::string(kCheckpointMagic, 4)) {
      throw ModelError("not a model checkpoint (bad magic)");
    }
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
      throw ModelError("unsupported checkpoint version " + std::to_string(version) +
                       " (expected " + std::to_string(kCheckpointVersion) + ")");
    }
    ModelParams p;
    p.seed = r.u64();
    ModelConfig& c = p.config;
    for (std::size_t* v : {&c.freq_bins, &c.frames, &c.filters, &c.epb_hidden,
                           &c.attention_size, &c.spb_hidden, &c.seq_len}) {
      *v = r.u32();
    }
    c.recurrent_norm = r.u8() != 0;
    c.norm_momentum = r.f64();
    c.validate();
    p.tensors = read_tensors(r);
    p.buffers = read_tensors(r);
    if (!r.done()) throw ModelError("checkpoint has trailing bytes");

    const auto expected = param_shapes(c);
    for (const auto& [name, shape] : expected) {
      auto it = p.tensors.find(name);
      if (it == p.tensors.end()) throw ModelError("checkpoint lacks tensor '" + name + "'");
      if (it->second.shape() != shape) {
        throw ModelError("checkpoint tensor '" + name + "' has shape " +
                         shape_string(it->second.shape()) + ", configuration expects " +
                         shape_string(shape));
      }
    }
    if (p.tensors.size() != expected.size()) {
      throw ModelError("checkpoint holds tensors the configuration does not define");
    }
    return p;
  } catch (const ModelError&) {
    throw;
  } catch (const std::exception& e) {
    throw ModelError(std::string("corrupt checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  write_file_bytes(path, encode_checkpoint(params));
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace sleepstage
