#include <doctest.h>

#include <string>

#include "sleepstage/config.hpp"

using namespace sleepstage;

TEST_CASE("defaults carry the published constants") {
  const ExperimentConfig c = parse_config("");
  CHECK(c.preprocess.stft.frame_seconds == 2.0);
  CHECK(c.preprocess.stft.hop_seconds == 1.0);
  CHECK(c.preprocess.stft.fft_size == 256);
  CHECK(c.model.seq_len == 20);
  CHECK(c.personalize.finetune.learning_rate == 1e-4);
  CHECK(c.personalize.finetune.finetune_epochs == 50);
  CHECK(c.personalize.finetune.snapshot_every == 5);
  CHECK(c.personalize.alphas == std::vector<double>{0.0, 0.2, 0.4, 0.6, 0.8});
  CHECK(c.evaluate.beta == 0.77);
  CHECK(c.evaluate.fusion == FusionMode::Geometric);
}

TEST_CASE("sections, lists and top-level keys parse") {
  const ExperimentConfig c = parse_config(
      "seed = 42\n"
      "[data]\n"
      "targets = T1, T2\n"
      "channel = EEG Pz-Oz\n"
      "[model]\n"
      "seq_len = 10\n"
      "recurrent_norm = yes\n"
      "[personalize]\n"
      "alphas = 0, 0.4\n"
      "strategies = all, EPB+Softmax\n"
      "form = kl\n"
      "[preprocess]\n"
      "norm_axis = global\n");
  CHECK(c.seed == 42);
  CHECK(c.data.targets == std::vector<std::string>{"T1", "T2"});
  CHECK(c.data.channel == "EEG Pz-Oz");
  CHECK(c.model.seq_len == 10);
  CHECK(c.model.recurrent_norm);
  CHECK(c.personalize.alphas == std::vector<double>{0.0, 0.4});
  CHECK(c.personalize.strategies == std::vector<Strategy>{Strategy::All, Strategy::EpbSoftmax});
  CHECK(c.personalize.finetune.form == LossForm::Kl);
  CHECK(c.preprocess.norm_axis == NormAxis::Global);
  CHECK(c.pretrain_config().seed == 42);
  const FinetuneConfig f = c.finetune_config(0.4, Strategy::Softmax);
  CHECK(f.alpha == 0.4);
  CHECK(f.strategy == Strategy::Softmax);
  CHECK(f.seed == 42);
  CHECK(c.cohort_spec().min_epochs == 10);
}

TEST_CASE("overrides win over the file") {
  const ExperimentConfig c =
      parse_config("[model]\nseq_len = 10\n", {"model.seq_len=4", "seed=9", "evaluate.beta = 0.5"});
  CHECK(c.model.seq_len == 4);
  CHECK(c.seed == 9);
  CHECK(c.evaluate.beta == 0.5);
}

TEST_CASE("unknown keys are named") {
  auto message = [](const std::string& ini, const std::vector<std::string>& o = {}) {
    try {
      parse_config(ini, o);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message("[model]\nlayers = 3\n").find("model.layers") != std::string::npos);
  CHECK(message("colour = red\n").find("colour") != std::string::npos);
  CHECK(message("[nonsense]\nx = 1\n").find("nonsense.x") != std::string::npos);
  CHECK(message("", {"pretrain.speed=2"}).find("pretrain.speed") != std::string::npos);
  CHECK(message("", {"model.seq_len"}).find("section.key=value") != std::string::npos);
}

TEST_CASE("bad values are rejected") {
  CHECK_THROWS_AS(parse_config("[model]\nseq_len = -3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[model]\nseq_len = 0\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[evaluate]\nbeta = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[evaluate]\nfusion = median\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[personalize]\nalphas = 0, 1.2\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[personalize]\nlearning_rate = abc\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[model]\nrecurrent_norm = maybe\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[synthetic]\nnights_per_subject = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[model]\nseq_len = 3\nseq_len = 4\n"), ConfigError);
  try {
    parse_config("[personalize]\nstrategies = All, Everything\n");
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    const std::string m = e.what();
    CHECK(m.find("Everything") != std::string::npos);
    CHECK(m.find("SPB+Softmax") != std::string::npos);
  }
}

TEST_CASE("canonical echo parses back to the same configuration") {
  const ExperimentConfig c = parse_config(
      "seed = 7\n[data]\ntargets = A, B\nlights_off = 0.1\n"
      "[personalize]\nalphas = 0.1, 0.30000000000000004\nstrategies = Softmax\n");
  const std::string ini = canonical_ini(c);
  const ExperimentConfig back = parse_config(ini);
  CHECK(canonical_ini(back) == ini);
  CHECK(back.personalize.alphas == c.personalize.alphas);
  CHECK(back.data.lights_off == 0.1);
  CHECK(ini.find("alphas = 0.1, 0.30000000000000004") != std::string::npos);
  for (const auto& key : config_keys()) {
    const auto dot = key.find('.');
    const std::string leaf = dot == std::string::npos ? key : key.substr(dot + 1);
    CHECK(("\n" + ini).find("\n" + leaf + " = ") != std::string::npos);
  }
}
