#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "smmrec/errors.hpp"
#include "smmrec/synthetic.hpp"
#include "smmrec/training.hpp"

using namespace smmrec;

namespace {

ModelConfig tiny_model(std::size_t vocab, std::size_t max_len) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.hidden = 16;
  c.layers = 1;
  c.heads = 2;
  c.max_len = max_len;
  c.dropout = 0.1;
  return c;
}

TrainingExample masked_example(std::vector<int> ids, std::size_t pos, int target) {
  TrainingExample ex;
  ex.input_ids = std::move(ids);
  ex.targets.assign(ex.input_ids.size(), kIgnoreTarget);
  ex.input_ids[pos] = kMaskIndex;
  ex.targets[pos] = target;
  ex.mask_position = pos;
  return ex;
}

double cross_entropy_by_hand(const std::vector<double>& logits, int target) {
  double z = 0;
  for (double l : logits) z += std::exp(l);
  return std::log(z) - logits[static_cast<std::size_t>(target)];
}

std::vector<std::vector<float>> snapshot(const Model<float>& m) {
  std::vector<std::vector<float>> out;
  for (const auto& p : m.parameters()) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

}  // namespace

TEST(Loss, UniformLogits) {
  std::vector<TrainingExample> batch = {masked_example({2, 3, 4}, 2, 4)};
  ad::Tensor<double> logits = ad::Tensor<double>::zeros({1, 3, 100});
  ad::Tape<double> tape(false);
  EXPECT_NEAR(objective_loss(tape, logits, batch, Objective::kSmm).item(), 4.60517, 1e-5);
}

TEST(Loss, LargeMarginIsNearZero) {
  std::vector<TrainingExample> batch = {masked_example({2, 3, 4}, 1, 3)};
  auto logits = ad::Tensor<double>::zeros({1, 3, 10});
  logits.values()[1 * 10 + 3] = 1e4;
  ad::Tape<double> tape(false);
  EXPECT_NEAR(objective_loss(tape, logits, batch, Objective::kSmm).item(), 0.0, 1e-12);
}

TEST(Loss, TwoMaskedPositionsByHand) {
  TrainingExample ex;
  ex.input_ids = {kMaskIndex, 3, kMaskIndex};
  ex.targets = {2, kIgnoreTarget, 4};
  const std::vector<double> at0 = {0.1, -0.3, 1.2, 0.4, -1.0};
  const std::vector<double> at2 = {0.0, 0.5, -0.2, 0.7, 2.0};
  auto logits = ad::Tensor<double>::zeros({1, 3, 5});
  std::copy(at0.begin(), at0.end(), logits.values().begin());
  std::copy(at2.begin(), at2.end(), logits.values().begin() + 10);
  std::vector<TrainingExample> batch = {ex};
  ad::Tape<double> tape(false);
  const double expected = 0.5 * (cross_entropy_by_hand(at0, 2) + cross_entropy_by_hand(at2, 4));
  EXPECT_NEAR(objective_loss(tape, logits, batch, Objective::kMlm).item(), expected, 1e-12);
}

TEST(Loss, SmmIgnoresUnmaskedLogits) {
  std::vector<TrainingExample> batch = {masked_example({2, 3, 4, 5}, 2, 4)};
  auto logits = ad::Tensor<double>::zeros({1, 4, 6});
  for (std::size_t i = 0; i < logits.size(); ++i) logits.values()[i] = std::sin(1.0 + i);
  ad::Tape<double> tape(false);
  const double before = objective_loss(tape, logits, batch, Objective::kSmm).item();
  for (std::size_t p : {0u, 1u, 3u}) {
    for (std::size_t v = 0; v < 6; ++v) logits.values()[p * 6 + v] += 3.0 * std::cos(1.0 * v + p);
  }
  EXPECT_EQ(objective_loss(tape, logits, batch, Objective::kSmm).item(), before);
}

TEST(Loss, NothingSupervisedIsInputError) {
  TrainingExample ex;
  ex.input_ids = {2, 3};
  ex.targets = {kIgnoreTarget, kIgnoreTarget};
  std::vector<TrainingExample> batch = {ex};
  EXPECT_THROW(supervision(batch, Objective::kSmm), InputError);
  // a special token is never a target
  ex.input_ids = {kMaskIndex, 3};
  ex.targets = {kMaskIndex, kIgnoreTarget};
  batch = {ex};
  EXPECT_THROW(supervision(batch, Objective::kSmm), InputError);
}

TEST(Loss, BatchLossAgreesWithFullLogits) {
  auto gc = tiny_gradcheck_case(7);
  Model<double> m(gc.config);
  ad::Tape<double> tape(false);
  auto logits = m.forward(tape, make_batch(gc.batch));
  const double full = objective_loss(tape, logits, gc.batch, Objective::kSmm).item();
  const double sliced = batch_loss(tape, m, gc.batch, Objective::kSmm).item();
  EXPECT_NEAR(full, sliced, 1e-12);
}

TEST(Adam, FirstStepMovesByLr) {
  ad::Tensor<double> w({1}, {1.0}, true);
  w.mutable_grad()[0] = 0.5;
  std::vector<ad::Parameter<double>> params = {{"w", w}};
  AdamState<double> state;
  adam_step<double>(params, state, 0.1);
  EXPECT_NEAR(w.values()[0], 0.9, 1e-6);
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ad::Tensor<double> w({2}, {1.0, -2.0}, true);
  std::vector<ad::Parameter<double>> params = {{"w", w}};
  AdamState<double> state;
  adam_step<double>(params, state, 0.1);
  w.mutable_grad();
  adam_step<double>(params, state, 0.1);
  EXPECT_EQ(w.values()[0], 1.0);
  EXPECT_EQ(w.values()[1], -2.0);
  EXPECT_EQ(state.step, 2u);
}

TEST(Adam, SecondEqualStepIsAboutLr) {
  ad::Tensor<double> w({1}, {0.0}, true);
  std::vector<ad::Parameter<double>> params = {{"w", w}};
  AdamState<double> state;
  w.mutable_grad()[0] = 2.0;
  adam_step<double>(params, state, 0.01);
  const double after_one = w.values()[0];
  adam_step<double>(params, state, 0.01);
  // m2/(1-b1^2) = g and v2/(1-b2^2) = g^2, so the step is lr * g / (|g| + eps)
  EXPECT_NEAR(after_one - w.values()[0], 0.01 * 2.0 / (2.0 + 1e-8), 1e-12);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  ad::Tensor<double> w({1}, {0.0}, true);
  w.mutable_grad()[0] = std::nan("");
  std::vector<ad::Parameter<double>> params = {{"block0.ffn.up.weight", w}};
  AdamState<double> state;
  try {
    adam_step<double>(params, state, 0.1);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("block0.ffn.up.weight"), std::string::npos);
  }
}

TEST(Adam, SmallStepLowersLossOnFixedBatch) {
  auto gc = tiny_gradcheck_case(7);
  Model<double> m(gc.config);
  auto loss_of = [&] {
    ad::Tape<double> tape(false);
    return batch_loss(tape, m, gc.batch, Objective::kSmm).item();
  };
  const double before = loss_of();
  {
    ad::Tape<double> tape;
    tape.backward(batch_loss(tape, m, gc.batch, Objective::kSmm));
  }
  AdamState<double> state;
  adam_step(m.parameters(), state, 1e-6);
  EXPECT_LT(loss_of(), before);
}

TEST(Schedule, DropsFromEpochThree) {
  TrainConfig c;
  const std::vector<double> expected = {1.0, 1.0, 1.0, 0.1, 0.1, 0.1};
  for (std::size_t e = 0; e < expected.size(); ++e) EXPECT_DOUBLE_EQ(lr_schedule(e, c), expected[e]);
  EXPECT_DOUBLE_EQ(lr_schedule(7, c), 0.1);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lr_drop_factor = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  update_from_json(c, {{"batch_size", 32}, {"strategy", "mlm"}, {"mask_k", 3}});
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.strategy.kind, Objective::kMlm);
  EXPECT_EQ(c.strategy.k, 3);
  EXPECT_THROW(update_from_json(c, {{"batch_size", "many"}}), ConfigError);
}

TEST(Fit, CeilingBatchCount) {
  SessionDataset d;
  d.vocab = Vocabulary({"a", "b", "c", "d", "e", "f"});
  d.train = {{"s", {2, 3, 4, 5}, 0}, {"t", {2, 3, 4, 5, 6, 7}, 0}};  // 10 SMM examples
  TrainConfig tc;
  tc.batch_size = 4;
  tc.epochs = 2;
  tc.strategy.max_len = 8;
  Model<float> m(tiny_model(d.vocab.size(), 8));
  auto report = fit(m, d, tc);
  ASSERT_EQ(report.epochs.size(), 2u);
  EXPECT_EQ(report.epochs[0].steps, 3u);
  EXPECT_EQ(report.epochs[1].steps, 3u);
  EXPECT_EQ(report.epochs[0].examples, 10u);
  EXPECT_EQ(report.total_steps, 6u);
  for (const auto& e : report.epochs) EXPECT_TRUE(std::isfinite(e.mean_loss));
}

TEST(Fit, SameSeedIsBitIdentical) {
  SyntheticOptions so;
  so.train_sessions = 30;
  so.test_pairs = 10;
  auto d = make_cycle_dataset(so);
  TrainConfig tc;
  tc.batch_size = 16;
  tc.epochs = 2;
  tc.learning_rate = 1e-3;
  tc.strategy.max_len = 8;
  tc.strategy.kind = Objective::kMlm;

  auto dir = std::filesystem::temp_directory_path() / "smmrec_fit_repro";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir / "a");
  std::filesystem::create_directories(dir / "b");
  FitOptions oa, ob;
  oa.checkpoint_dir = dir / "a";
  ob.checkpoint_dir = dir / "b";
  Model<float> a(tiny_model(d.vocab.size(), 8)), b(tiny_model(d.vocab.size(), 8));
  auto ra = fit(a, d, tc, oa);
  auto rb = fit(b, d, tc, ob);
  for (std::size_t e = 0; e < 2; ++e) EXPECT_EQ(ra.epochs[e].mean_loss, rb.epochs[e].mean_loss);
  EXPECT_EQ(snapshot(a), snapshot(b));
  auto bytes = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(bytes(dir / "a" / "final.smm"), bytes(dir / "b" / "final.smm"));
  EXPECT_TRUE(std::filesystem::exists(dir / "a" / "epoch-0.smm"));
  std::filesystem::remove_all(dir);
}

TEST(Fit, StrategyMustMatchModel) {
  SessionDataset d;
  d.vocab = Vocabulary({"a", "b"});
  d.train = {{"s", {2, 3}, 0}};
  TrainConfig tc;
  tc.strategy.max_len = 4;
  tc.strategy.kind = Objective::kClm;
  Model<float> bidirectional(tiny_model(4, 4));
  EXPECT_THROW(fit(bidirectional, d, tc), ConfigError);
  auto causal_cfg = tiny_model(4, 4);
  causal_cfg.causal = true;
  Model<float> causal(causal_cfg);
  tc.strategy.kind = Objective::kSmm;
  EXPECT_THROW(fit(causal, d, tc), ConfigError);
  tc.strategy.max_len = 9;
  EXPECT_THROW(fit(bidirectional, d, tc), ConfigError);
}

TEST(Fit, LearnsTheCycle) {
  SyntheticOptions so;
  so.train_sessions = 200;
  so.test_pairs = 20;
  auto d = make_cycle_dataset(so);
  auto mc = tiny_model(d.vocab.size(), 10);
  mc.hidden = 32;
  mc.dropout = 0.0;
  mc.cope = false;
  TrainConfig tc;
  tc.batch_size = 32;
  tc.epochs = 6;
  tc.lr_drop_epoch = 6;
  tc.learning_rate = 3e-3;
  tc.strategy.max_len = 10;
  Model<float> m(mc);
  auto report = fit(m, d, tc);
  EXPECT_LT(report.epochs.back().mean_loss, 0.1);
}

TEST(Ablate, RowCounts) {
  SyntheticOptions so;
  so.train_sessions = 20;
  so.test_pairs = 10;
  auto d = make_proximity_dataset(so);
  auto mc = tiny_model(d.vocab.size(), 8);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 32;
  tc.strategy.max_len = 8;
  EXPECT_EQ(ablate(d, mc, tc, {}).size(), 1u);
  std::vector<std::string> all = {"weight_tying", "pre_ln_rmsnorm", "cope"};
  auto rows = ablate(d, mc, tc, all);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].model_config["weight_tying"], false);
  EXPECT_EQ(rows[3].model_config["cope"], true);
  for (const auto& r : rows) {
    EXPECT_GE(r.metrics.hit_rate, 0.0);
    EXPECT_LE(r.metrics.hit_rate, 1.0);
    EXPECT_LE(r.metrics.mrr, r.metrics.hit_rate);
  }
  std::vector<std::string> bad = {"flash_attention"};
  EXPECT_THROW(ablate(d, mc, tc, bad), ConfigError);
}
