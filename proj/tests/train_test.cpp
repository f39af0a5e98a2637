#include "semstg/checkpoint.hpp"
#include "semstg/synth.hpp"
#include "semstg/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

using namespace semstg;

namespace
{

std::vector<Window> corpus(std::uint64_t seed, std::size_t n)
{
  return synth_generate(seed, n, SynthConfig::interaction_default(), ClassVocabulary());
}

void set_grads(ModelParams & p, double value)
{
  for (auto & prm : p.all()) {
    for (double & g : prm.tensor.mutable_grad()) g = value;
  }
}

ModelParams tiny_params()
{
  ModelParams p;
  p.add("a", Tensor::from_values({3}, {1.0, -2.0, 0.5}, true));
  p.add("b", Tensor::from_values({2, 1}, {0.0, 4.0}, true));
  return p;
}

TrainConfig small_config(std::size_t batch, double lr = 1e-3)
{
  TrainConfig tc;
  tc.learning_rate = lr;
  tc.effective_batch = batch;
  tc.seed = 0;
  return tc;
}

}  // namespace

TEST(Adam, FirstStepMovesEachCoordinateByAboutLr)
{
  ModelParams p = tiny_params();
  const auto before = p.flat_values();
  AdamState s = AdamState::for_params(p);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-3, 3);
  for (auto & prm : p.all()) {
    for (double & g : prm.tensor.mutable_grad()) g = u(rng);
  }
  adam_step(p, s, 1e-3);
  const auto after = p.flat_values();
  for (std::size_t i = 0; i < after.size(); ++i) EXPECT_NEAR(std::fabs(after[i] - before[i]), 1e-3, 1e-8);
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged)
{
  ModelParams p = tiny_params();
  const auto before = p.flat_values();
  AdamState s = AdamState::for_params(p);
  p.zero_grad();
  adam_step(p, s, 1e-2);
  EXPECT_EQ(p.flat_values(), before);
}

TEST(Adam, MatchesScalarRecurrenceOverSeveralSteps)
{
  ModelParams p;
  p.add("x", Tensor::from_values({1}, {0.7}, true));
  AdamState s = AdamState::for_params(p);
  const std::vector<double> grads{0.3, -1.2, 0.05, 2.0};
  double theta = 0.7, m = 0, v = 0;
  for (std::size_t k = 0; k < grads.size(); ++k) {
    p.all()[0].tensor.mutable_grad()[0] = grads[k];
    adam_step(p, s, 0.01);
    m = 0.9 * m + 0.1 * grads[k];
    v = 0.999 * v + 0.001 * grads[k] * grads[k];
    const double mh = m / (1 - std::pow(0.9, k + 1.0));
    const double vh = v / (1 - std::pow(0.999, k + 1.0));
    theta -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(p.all()[0].tensor.values()[0], theta, 1e-15);
    EXPECT_GE(s.v[0][0], 0.0);
  }
}

TEST(Adam, NonFiniteGradientRejectedWithoutSideEffects)
{
  ModelParams p = tiny_params();
  AdamState s = AdamState::for_params(p);
  set_grads(p, 0.5);
  p.get("b").mutable_grad()[1] = std::nan("");
  const auto before = p.flat_values();
  try {
    adam_step(p, s, 1e-3);
    FAIL() << "expected DomainError";
  } catch (const DomainError & e) {
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos);
  }
  EXPECT_EQ(p.flat_values(), before);
  EXPECT_EQ(s.step, 0u);
  EXPECT_EQ(s.m[0][0], 0.0);
}

TEST(Train, AccumulationEqualsOneStepOnMeanLoss)
{
  const ModelConfig cfg;
  const auto data = corpus(3, 6);
  const Tensor weights = class_weights(data, ClassVocabulary());

  ModelParams a = ModelParams::init(cfg, 5);
  AdamState sa = AdamState::for_params(a);
  const auto stats = train_epoch(data, cfg, a, sa, small_config(6), weights, 0);
  EXPECT_EQ(stats.steps, 1u);

  ModelParams b = ModelParams::init(cfg, 5);
  AdamState sb = AdamState::for_params(b);
  Tensor total;
  for (const auto & w : data) {
    const Tensor l = window_loss(w, cfg, b, weights, {});
    total = total.defined() ? add(total, l) : l;
  }
  mul_scalar(total, 1.0 / 6.0).backward();
  adam_step(b, sb, 1e-3);
  const auto fa = a.flat_values(), fb = b.flat_values();
  for (std::size_t i = 0; i < fa.size(); ++i) EXPECT_NEAR(fa[i], fb[i], 1e-12);
}

TEST(Train, SingleWindowLargeBatchTakesOneStep)
{
  const ModelConfig cfg;
  const auto data = corpus(4, 1);
  ModelParams p = ModelParams::init(cfg, 1);
  AdamState s = AdamState::for_params(p);
  const auto stats = train_epoch(data, cfg, p, s, small_config(512), Tensor::full({6}, 1.0), 0);
  EXPECT_EQ(stats.steps, 1u);
  EXPECT_EQ(stats.windows, 1u);
  EXPECT_EQ(s.step, 1u);
}

TEST(Train, EpochLossIsMeanOfPerWindowLosses)
{
  const ModelConfig cfg;
  const auto data = corpus(5, 7);
  const Tensor weights = class_weights(data, ClassVocabulary());
  ModelParams p = ModelParams::init(cfg, 2);
  double expect = 0.0;
  {
    NoGradGuard g;
    for (const auto & w : data) expect += window_loss(w, cfg, p, weights, {}).item();
  }
  AdamState s = AdamState::for_params(p);
  // one accumulation group: every loss is evaluated before the single update
  const auto stats = train_epoch(data, cfg, p, s, small_config(7), weights, 0);
  EXPECT_NEAR(stats.loss, expect / 7.0, 1e-12);
}

TEST(Train, LossDecreasesOverFirstFiveEpochs)
{
  const ModelConfig cfg;
  const auto data = corpus(6, 8);
  const Tensor weights = class_weights(data, ClassVocabulary());
  ModelParams p = ModelParams::init(cfg, 0);
  AdamState s = AdamState::for_params(p);
  const TrainConfig tc = small_config(4);
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < 5; ++e) {
    const double loss = train_epoch(data, cfg, p, s, tc, weights, e).loss;
    EXPECT_LT(loss, prev) << "epoch " << e;
    prev = loss;
  }
}

TEST(Train, SameSeedGivesIdenticalTrajectory)
{
  const ModelConfig cfg;
  const auto data = corpus(7, 10);
  const Tensor weights = class_weights(data, ClassVocabulary());
  auto run = [&](std::uint64_t seed) {
    ModelParams p = ModelParams::init(cfg, 3);
    AdamState s = AdamState::for_params(p);
    TrainConfig tc = small_config(3);
    tc.seed = seed;
    for (std::size_t e = 0; e < 3; ++e) train_epoch(data, cfg, p, s, tc, weights, e);
    return p.flat_values();
  };
  EXPECT_EQ(run(1), run(1));
  EXPECT_NE(run(1), run(2));
}

TEST(Train, FailingWindowIsSkippedWithWarning)
{
  const ModelConfig cfg;
  auto data = corpus(8, 3);
  data[1].t_pred = 11;
  data[1].positions.resize(data[1].num_objects() * 19 * 2);
  ModelParams p = ModelParams::init(cfg, 3);
  AdamState s = AdamState::for_params(p);
  std::vector<std::string> warnings;
  const auto stats = train_epoch(
    data, cfg, p, s, small_config(2), Tensor::full({6}, 1.0), 0, {}, [&](const std::string & m) { warnings.push_back(m); });
  EXPECT_EQ(stats.skipped, 1u);
  EXPECT_EQ(stats.windows, 2u);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find(data[1].scene_id), std::string::npos);
  EXPECT_THROW(train_epoch({}, cfg, p, s, small_config(2), Tensor::full({6}, 1.0), 0), ContractError);
}

TEST(Train, ClippingBoundsTheGlobalNorm)
{
  ModelParams p = tiny_params();
  set_grads(p, 3.0);
  clip_gradients(p, 1.0);
  double sq = 0.0;
  for (const auto & prm : p.all()) {
    for (double g : prm.tensor.grad()) sq += g * g;
  }
  EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-12);
  set_grads(p, 0.1);
  clip_gradients(p, 1.0);
  EXPECT_EQ(p.all()[0].tensor.grad()[0], 0.1);
}

TEST(Train, BalancedDataHasUnitWeightsAndUnchangedLoss)
{
  // two objects of each of three classes
  std::vector<Window> data;
  SynthConfig sc = SynthConfig::interaction_default();
  sc.min_objects = sc.max_objects = 6;
  Window w = synth_generate(2, 1, sc, ClassVocabulary())[0];
  w.labels = {1, 1, 2, 2, 0, 0};
  data.push_back(w);
  const ClassVocabulary vocab;
  const Tensor cw = class_weights(data, vocab);
  std::vector<double> unit(6, 0.0);
  for (auto l : w.labels) unit[l] = 1.0;
  EXPECT_EQ(std::vector<double>(cw.values().begin(), cw.values().end()), unit);
  const ModelConfig cfg;
  const ModelParams p = ModelParams::init(cfg, 0);
  EXPECT_EQ(window_loss(w, cfg, p, cw, {}).item(), window_loss(w, cfg, p, Tensor::from_values({6}, unit), {}).item());
}

TEST(Evaluate, SingleSampleAndDeterminism)
{
  const ModelConfig cfg;
  const ClassVocabulary vocab;
  const auto data = corpus(9, 4);
  const ModelParams p = ModelParams::init(cfg, 6);
  const auto r1 = evaluate(data, cfg, p, vocab, 1, 42);
  double ade_sum = 0.0;
  std::size_t objects = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto fwd = model_forward(data[i], cfg, p);
    const auto st = sample_trajectories(fwd.pred, 1, mix_seed(42, i), last_observed(data[i]));
    const Tensor truth = future_positions(data[i]);
    for (std::size_t n = 0; n < data[i].num_objects(); ++n) {
      double ade = 0.0;
      for (std::size_t t = 0; t < 12; ++t) {
        ade += std::hypot(st.samples.at({0, n, t, 0}) - truth.at({n, t, 0}), st.samples.at({0, n, t, 1}) - truth.at({n, t, 1}));
      }
      ade_sum += ade / 12.0;
      ++objects;
    }
  }
  EXPECT_NEAR(r1.overall.aade, ade_sum / static_cast<double>(objects), 1e-9);
  EXPECT_DOUBLE_EQ(r1.overall.aade, r1.overall.made);
  const auto a = report_to_json(evaluate(data, cfg, p, vocab, 20, 5));
  const auto b = report_to_json(evaluate(data, cfg, p, vocab, 20, 5));
  EXPECT_EQ(a.dump(), b.dump());
}

TEST(TrainConfig, JsonRoundTripAndValidation)
{
  TrainConfig tc;
  tc.learning_rate = 3e-4;
  tc.effective_batch = 64;
  tc.clip_norm = 2.5;
  const nlohmann::json j = tc;
  EXPECT_EQ(nlohmann::json(j.get<TrainConfig>()), j);
  tc.learning_rate = 0.0;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.effective_batch = 0;
  EXPECT_THROW(tc.validate(), ConfigError);
}

TEST(MixSeed, DistinctStreams)
{
  EXPECT_NE(mix_seed(0, 0), mix_seed(0, 1));
  EXPECT_NE(mix_seed(0, 0), mix_seed(1, 0));
  EXPECT_EQ(mix_seed(7, 3), mix_seed(7, 3));
}

// ---------------------------------------------------------------------------

namespace
{

Checkpoint trained_checkpoint(std::size_t epochs, const std::vector<Window> & data)
{
  Checkpoint c;
  c.vocabulary = ClassVocabulary::default_names();
  c.params = ModelParams::init(c.model, 11);
  c.adam = AdamState::for_params(c.params);
  const Tensor weights = class_weights(data, ClassVocabulary());
  for (std::size_t e = 0; e < epochs; ++e) train_epoch(data, c.model, c.params, c.adam, small_config(3), weights, e);
  c.train_state = {{"epoch", epochs}};
  return c;
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical)
{
  const auto data = corpus(10, 5);
  const Checkpoint c = trained_checkpoint(2, data);
  const std::string bytes = serialize_checkpoint(c);
  const Checkpoint back = deserialize_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  EXPECT_EQ(back.params.flat_values(), c.params.flat_values());
  EXPECT_EQ(back.adam.m, c.adam.m);
  EXPECT_EQ(back.adam.step, c.adam.step);
  EXPECT_EQ(back.model, c.model);

  const auto path = (std::filesystem::temp_directory_path() / "semstg_ckpt_test.bin").string();
  save_checkpoint(path, c);
  EXPECT_EQ(serialize_checkpoint(load_checkpoint(path)), bytes);
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptFilesGiveCleanErrors)
{
  const auto data = corpus(10, 2);
  const std::string bytes = serialize_checkpoint(trained_checkpoint(1, data));
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{14}, std::size_t{40}, bytes.size() - 1}) {
    EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, cut)), FormatError) << cut;
  }
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), FormatError);
  std::string bad_version = bytes;
  bad_version[8] = 9;
  try {
    deserialize_checkpoint(bad_version);
    FAIL() << "expected FormatError";
  } catch (const FormatError & e) {
    EXPECT_NE(std::string(e.what()).find("expected 1, found 9"), std::string::npos);
  }
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/ckpt.bin"), FormatError);
}

TEST(Checkpoint, ShapeMismatchNamesExpectedAndFound)
{
  const auto data = corpus(10, 2);
  Checkpoint c = trained_checkpoint(1, data);
  // claim a different horizon: parameter shapes no longer match
  c.model.t_pred = 10;
  try {
    deserialize_checkpoint(serialize_checkpoint(c));
    FAIL() << "expected FormatError";
  } catch (const FormatError & e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("expected"), std::string::npos);
    EXPECT_NE(msg.find("found"), std::string::npos);
  }
}

TEST(Checkpoint, ResumeEqualsUninterruptedRun)
{
  const auto data = corpus(12, 7);
  const Checkpoint full = trained_checkpoint(4, data);

  Checkpoint half = deserialize_checkpoint(serialize_checkpoint(trained_checkpoint(2, data)));
  const Tensor weights = class_weights(data, ClassVocabulary());
  for (std::size_t e = 2; e < 4; ++e) train_epoch(data, half.model, half.params, half.adam, small_config(3), weights, e);
  half.train_state = {{"epoch", 4}};
  EXPECT_EQ(half.params.flat_values(), full.params.flat_values());
  EXPECT_EQ(serialize_checkpoint(half), serialize_checkpoint(full));
}

// ---------------------------------------------------------------------------

#include "semstg/session.hpp"

namespace
{

std::string read_file(const std::filesystem::path & p)
{
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct TempDir
{
  std::filesystem::path path;
  explicit TempDir(const std::string & name) : path(std::filesystem::temp_directory_path() / name)
  {
    std::filesystem::remove_all(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST(Fit, WritesLogLatestAndBestCheckpoints)
{
  const TempDir tmp("semstg_fit_files");
  const auto data = corpus(20, 8);
  TrainConfig tc = small_config(4);
  tc.epochs = 3;
  FitOptions opts;
  opts.out_dir = tmp.path.string();
  opts.checkpoint_every = 2;
  const auto r = fit(data, corpus(21, 3), ModelConfig{}, tc, ClassVocabulary(), 0, {}, opts);
  EXPECT_EQ(r.history.size(), 3u);
  EXPECT_TRUE(std::filesystem::exists(tmp.path / "checkpoints" / "latest.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(tmp.path / "checkpoints" / "best.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(tmp.path / "checkpoints" / "epoch_0002.ckpt"));
  std::ifstream log(tmp.path / "log.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(log, line); ++lines) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("loss"));
    EXPECT_TRUE(j.contains("val_aade"));
    EXPECT_TRUE(j.contains("wall_time_s"));
  }
  EXPECT_EQ(lines, 3u);
  EXPECT_EQ(serialize_checkpoint(load_checkpoint((tmp.path / "checkpoints" / "best.ckpt").string())),
            serialize_checkpoint(r.best));
}

TEST(Fit, ResumedRunMatchesUninterruptedRun)
{
  const TempDir a("semstg_fit_full"), b("semstg_fit_resumed");
  const auto data = corpus(22, 9);
  const auto val = corpus(23, 3);
  TrainConfig tc = small_config(4);
  tc.epochs = 4;
  FitOptions opts;
  opts.out_dir = a.path.string();
  fit(data, val, ModelConfig{}, tc, ClassVocabulary(), 1, {}, opts);

  opts.out_dir = b.path.string();
  TrainConfig first = tc;
  first.epochs = 2;
  fit(data, val, ModelConfig{}, first, ClassVocabulary(), 1, {}, opts);
  opts.resume = true;
  const auto r = fit(data, val, ModelConfig{}, tc, ClassVocabulary(), 1, {}, opts);
  EXPECT_EQ(r.start_epoch, 2u);
  EXPECT_EQ(r.history.size(), 2u);
  // periodic state recorded in train_state names the full epoch budget only after the resumed call
  EXPECT_EQ(read_file(a.path / "checkpoints" / "latest.ckpt"), read_file(b.path / "checkpoints" / "latest.ckpt"));
}

TEST(Fit, EmptyValidationSelectsOnTrainingLoss)
{
  const auto data = corpus(24, 6);
  TrainConfig tc = small_config(3);
  tc.epochs = 3;
  const auto r = fit(data, {}, ModelConfig{}, tc, ClassVocabulary(), 0);
  EXPECT_EQ(r.last.train_state.at("selection"), "train_loss");
  EXPECT_FALSE(r.history[0].contains("val_aade"));
  EXPECT_THROW(fit({}, {}, ModelConfig{}, tc, ClassVocabulary(), 0), ContractError);
  ModelConfig wrong;
  wrong.num_classes = 3;
  EXPECT_THROW(fit(data, {}, wrong, tc, ClassVocabulary(), 0), ConfigError);
}
