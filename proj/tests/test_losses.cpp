#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "fixtures.hpp"
#include "sleepstage/losses.hpp"

using namespace sleepstage;
using sleepstage::testing::random_night;
using sleepstage::testing::refs_of;
using sleepstage::testing::tiny_config;

namespace {

PosteriorSequence rows(std::initializer_list<std::initializer_list<double>> r) {
  PosteriorSequence p;
  p.probs = Tensor({r.size(), kNumStages}, 0.0);
  std::size_t i = 0;
  for (const auto& row : r) {
    std::size_t k = 0;
    for (double v : row) p.probs(i, k++) = v;
    ++i;
  }
  return p;
}

Tensor one_hot(std::initializer_list<int> stages) {
  Tensor t({stages.size(), kNumStages}, 0.0);
  std::size_t i = 0;
  for (int s : stages) t(i++, static_cast<std::size_t>(s)) = 1.0;
  return t;
}

PosteriorSequence random_posterior(std::mt19937_64& rng, std::size_t L) {
  std::gamma_distribution<double> gam(0.7, 1.0);
  PosteriorSequence p;
  p.probs = Tensor({L, kNumStages}, 0.0);
  for (std::size_t l = 0; l < L; ++l) {
    double s = 0.0;
    for (std::size_t k = 0; k < kNumStages; ++k) s += p.probs(l, k) = gam(rng) + 1e-9;
    for (std::size_t k = 0; k < kNumStages; ++k) p.probs(l, k) /= s;
  }
  return p;
}

Tensor random_labels(std::mt19937_64& rng, std::size_t L) {
  std::uniform_int_distribution<std::size_t> st(0, kNumStages - 1);
  Tensor t({L, kNumStages}, 0.0);
  for (std::size_t l = 0; l < L; ++l) t(l, st(rng)) = 1.0;
  return t;
}

// Personalized-model training graph with an explicit SI-posterior input.
struct Rig {
  SeqSleepNet net;
  Var plain_loss, pers_loss, kl_loss;

  Rig(const ModelParams& params, const SequenceBatch& batch, const Tensor& si,
      const LossConfig& cfg)
      : net(params.config) {
    Graph& g = net.graph();
    std::vector<Var> ps;
    for (const auto& name : net.param_names()) ps.push_back(net.param(name));
    Var labels = g.input("labels");
    Var target = g.input("si_probs");
    const std::size_t L = params.config.seq_len;
    plain_loss = build_sequence_ce_loss(g, net.probs(), labels, ps, L, cfg.lambda);
    pers_loss = build_personalization_loss(g, net.probs(), labels, target, ps, L, cfg);
    kl_loss = build_personalization_loss(g, net.probs(), labels, target, ps, L, cfg,
                                     LossForm::Kl);
    net.bind_params(params);
    net.bind_batch(batch);
    g.bind("labels", batch.labels);
    g.bind("si_probs", si);
    net.forward();
  }
};

}  // namespace

TEST_CASE("sequence cross-entropy closed forms") {
  const PosteriorSequence half = rows({{0.5, 0.5, 0, 0, 0}, {0.5, 0.5, 0, 0, 0}});
  const Tensor labels = one_hot({0, 1});
  CHECK(sequence_ce_loss({&half, 1}, {&labels, 1}, {}, 0.0) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-11));

  const PosteriorSequence perfect = rows({{1, 0, 0, 0, 0}, {0, 0, 0, 0, 1}});
  const Tensor truth = one_hot({0, 4});
  CHECK(std::abs(sequence_ce_loss({&perfect, 1}, {&truth, 1}, {}, 0.0)) < 1e-11);

  TensorMap params;
  params["a"] = Tensor({1, 2}, std::vector<double>{1.0, 1.0});
  params["b"] = Tensor({1, 1}, std::vector<double>{-1.0});
  CHECK(sequence_ce_loss({&perfect, 1}, {&truth, 1}, params, 2.0) ==
        doctest::Approx(3.0).epsilon(1e-11));

  const Tensor short_labels = one_hot({0});
  CHECK_THROWS_AS(sequence_ce_loss({&half, 1}, {&short_labels, 1}, {}, 0.0), LossError);
  CHECK_THROWS_AS(sequence_ce_loss({&half, 1}, {}, {}, 0.0), LossError);
}

TEST_CASE("KL divergence closed forms and summation oracle") {
  const PosteriorSequence p = rows({{0.1, 0.2, 0.3, 0.2, 0.2}});
  CHECK(std::abs(kl_divergence(p, p)) < 1e-9);

  const PosteriorSequence point = rows({{1, 0, 0, 0, 0}});
  const PosteriorSequence uniform = rows({{0.2, 0.2, 0.2, 0.2, 0.2}});
  CHECK(kl_divergence(point, uniform) == doctest::Approx(std::log(5.0)).epsilon(1e-11));

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = random_posterior(rng, 4);
    const auto b = random_posterior(rng, 4);
    double oracle = 0.0;
    for (std::size_t l = 0; l < 4; ++l) {
      for (std::size_t k = 0; k < 5; ++k) {
        oracle += a.probs(l, k) *
                  (std::log(a.probs(l, k) + 1e-12) - std::log(b.probs(l, k) + 1e-12));
      }
    }
    oracle /= 4.0;
    const double kl = kl_divergence(a, b);
    CHECK(kl >= -1e-12);
    CHECK(std::abs(kl - oracle) < 1e-10);
  }
  const PosteriorSequence two = rows({{1, 0, 0, 0, 0}, {1, 0, 0, 0, 0}});
  CHECK_THROWS_AS(kl_divergence(point, two), LossError);
}

TEST_CASE("personalization loss at alpha 0 is the sequence loss bit for bit") {
  std::mt19937_64 rng(8);
  std::vector<PosteriorSequence> si, pers;
  std::vector<Tensor> labels;
  for (int n = 0; n < 3; ++n) {
    si.push_back(random_posterior(rng, 4));
    pers.push_back(random_posterior(rng, 4));
    labels.push_back(random_labels(rng, 4));
  }
  TensorMap params;
  params["w"] = Tensor({2, 2}, std::vector<double>{0.3, -0.2, 1.1, 0.7});
  const LossConfig cfg{1e-2, 0.0};
  const double a = personalization_loss(si, pers, labels, params, cfg);
  const double b = sequence_ce_loss(pers, labels, params, cfg.lambda);
  CHECK(std::memcmp(&a, &b, sizeof a) == 0);
}

TEST_CASE("the two loss forms differ by the SI entropy term") {
  std::mt19937_64 rng(9);
  for (double alpha : {0.2, 0.4, 0.8}) {
    std::vector<PosteriorSequence> si, pers;
    std::vector<Tensor> labels;
    for (int n = 0; n < 4; ++n) {
      si.push_back(random_posterior(rng, 5));
      pers.push_back(random_posterior(rng, 5));
      labels.push_back(random_labels(rng, 5));
    }
    const LossConfig cfg{1e-3, alpha};
    const double pers_loss = personalization_loss(si, pers, labels, {}, cfg);
    const double kl_loss = personalization_loss(si, pers, labels, {}, cfg, LossForm::Kl);
    double entropy = 0.0;
    for (const auto& s : si) {
      for (double v : s.probs.values()) entropy += v * std::log(v);
    }
    CHECK(kl_loss - pers_loss == doctest::Approx(alpha * entropy / 5.0).epsilon(1e-10));
    CHECK(si_entropy_offset(si, alpha) == doctest::Approx(alpha * entropy / 5.0).epsilon(1e-10));
  }
}

TEST_CASE("personalization loss is linear in alpha") {
  std::mt19937_64 rng(10);
  std::vector<PosteriorSequence> si, pers;
  std::vector<Tensor> labels;
  for (int n = 0; n < 3; ++n) {
    si.push_back(random_posterior(rng, 6));
    pers.push_back(random_posterior(rng, 6));
    labels.push_back(random_labels(rng, 6));
  }
  auto at = [&](double a) { return personalization_loss(si, pers, labels, {}, {0.0, a}); };
  const double x0 = at(0.1), x1 = at(0.45), x2 = at(0.9);
  const double s1 = (x1 - x0) / 0.35, s2 = (x2 - x1) / 0.45;
  CHECK(s1 == doctest::Approx(s2).epsilon(1e-10));
  CHECK_THROWS_AS(at(1.5), LossError);
  CHECK_THROWS_AS(personalization_loss(si, pers, labels, {}, {-1.0, 0.5}), LossError);
}

TEST_CASE("graph losses agree with direct evaluation") {
  const ModelParams p = init_params(tiny_config(), 21);
  const ModelParams si = init_params(tiny_config(), 22);
  const PreparedNight night = random_night(8, 16, 5, 6);
  const auto refs = refs_of(night, 4, 1);
  const SequenceBatch batch = make_batch(refs, 3);
  const Tensor si_probs = batch_posteriors(si, batch);
  const LossConfig cfg{1e-3, 0.4};
  Rig rig(p, batch, si_probs, cfg);
  Graph& g = rig.net.graph();

  const auto pers = rig.net.posteriors();
  std::vector<PosteriorSequence> si_seq = predict(si, refs);
  std::vector<Tensor> labels;
  for (const auto& r : refs) {
    Tensor t({3, kNumStages}, 0.0);
    for (std::size_t l = 0; l < 3; ++l) {
      t(l, static_cast<std::size_t>(night.labels[r.start + l])) = 1.0;
    }
    labels.push_back(t);
  }
  CHECK(g.value(rig.plain_loss).item() ==
        doctest::Approx(sequence_ce_loss(pers, labels, p.tensors, cfg.lambda)).epsilon(1e-12));
  CHECK(g.value(rig.pers_loss).item() ==
        doctest::Approx(personalization_loss(si_seq, pers, labels, p.tensors, cfg))
            .epsilon(1e-12));
  CHECK(g.value(rig.kl_loss).item() ==
        doctest::Approx(personalization_loss(si_seq, pers, labels, p.tensors, cfg,
                                             LossForm::Kl))
            .epsilon(1e-12));
}

TEST_CASE("graph loss at alpha 0 equals the sequence loss with identical gradients") {
  const ModelParams p = init_params(tiny_config(), 23);
  const PreparedNight night = random_night(8, 16, 5, 7);
  const auto refs = refs_of(night, 3, 2);
  const SequenceBatch batch = make_batch(refs, 3);
  const Tensor si = batch_posteriors(init_params(tiny_config(), 24), batch);
  Rig rig(p, batch, si, {1e-3, 0.0});
  Graph& g = rig.net.graph();
  CHECK(g.value(rig.plain_loss).bit_equal(g.value(rig.pers_loss)));
  const TensorMap a = g.backprop(rig.plain_loss);
  const TensorMap b = g.backprop(rig.pers_loss);
  for (const auto& [name, t] : a) CHECK_MESSAGE(t.bit_equal(b.at(name)), name);
}

TEST_CASE("at alpha 1 the loss ignores the labels") {
  const ModelParams p = init_params(tiny_config(), 25);
  const PreparedNight night = random_night(8, 16, 5, 8);
  const auto refs = refs_of(night, 2, 3);
  const SequenceBatch batch = make_batch(refs, 3);
  const Tensor si = batch_posteriors(init_params(tiny_config(), 26), batch);

  SeqSleepNet net(p.config);
  Graph& g = net.graph();
  for (const auto& name : net.param_names()) g.set_trainable(name, false);
  Var labels = g.parameter("labels");  // differentiable stand-in for the truth
  Var target = g.input("si_probs");
  Var loss = build_personalization_loss(g, net.probs(), labels, target, {}, 3, {0.0, 1.0});
  net.bind_params(p);
  net.bind_batch(batch);
  g.bind("labels", batch.labels);
  g.bind("si_probs", si);
  net.forward();
  const TensorMap grads = g.backprop(loss);
  REQUIRE(grads.count("labels") == 1);
  for (double v : grads.at("labels").values()) CHECK(v == 0.0);
  CHECK_THROWS(g.gradient("si_probs"));

  // Below alpha 1 the labels matter.
  SeqSleepNet net2(p.config);
  Graph& h = net2.graph();
  for (const auto& name : net2.param_names()) h.set_trainable(name, false);
  Var l2 = h.parameter("labels");
  Var loss2 = build_personalization_loss(h, net2.probs(), l2, h.input("si_probs"), {}, 3,
                                         {0.0, 0.6});
  net2.bind_params(p);
  net2.bind_batch(batch);
  h.bind("labels", batch.labels);
  h.bind("si_probs", si);
  net2.forward();
  double mag = 0.0;
  for (double v : h.backprop(loss2).at("labels").values()) mag += std::abs(v);
  CHECK(mag > 0.0);
}

TEST_CASE("loss forms have identical gradients on the tiny model") {
  const ModelParams si = init_params(tiny_config(), 31);
  const ModelParams pers = init_params(tiny_config(), 32);
  const PreparedNight night = random_night(10, 16, 5, 9);
  const auto refs = refs_of(night, 4, 2);
  const SequenceBatch batch = make_batch(refs, 3);
  for (double alpha : {0.0, 0.2, 0.4, 0.8, 1.0}) {
    const EquivalenceReport r = loss_equivalence_check(si, pers, batch, {1e-3, alpha});
    CHECK_MESSAGE(r.passed, "alpha " << alpha << " deviation " << r.max_gradient_deviation);
    CHECK(r.value_kl - r.value_ce == doctest::Approx(r.expected_offset).epsilon(1e-9));
  }
  const auto soft = select_groups(pers, Strategy::Softmax).trainable;
  CHECK(loss_equivalence_check(si, pers, batch, {1e-3, 0.4}, soft).passed);
}

TEST_CASE("personalization loss gradients match finite differences") {
  const ModelParams p = init_params(tiny_config(), 41);
  const PreparedNight night = random_night(8, 16, 5, 10);
  const auto refs = refs_of(night, 2, 3);
  const SequenceBatch batch = make_batch(refs, 3);
  const Tensor si = batch_posteriors(init_params(tiny_config(), 42), batch);
  for (double alpha : {0.2, 0.4, 0.8}) {
    Rig rig(p, batch, si, {1e-2, alpha});
    const CheckReport r4 = grad_check(rig.net.graph(), rig.pers_loss, 1e-5, 1e-4);
    CHECK_MESSAGE(r4.passed, "alpha " << alpha << " max " << r4.max_relative_error);
    const CheckReport r3 = grad_check(rig.net.graph(), rig.kl_loss, 1e-5, 1e-4);
    CHECK_MESSAGE(r3.passed, "alpha " << alpha << " max " << r3.max_relative_error);
  }
}
