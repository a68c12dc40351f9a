#include <cmath>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "idmkit/env.hpp"
#include "idmkit/errors.hpp"
#include "idmkit/training.hpp"
#include "test_support.hpp"

using namespace idm;
using idm::testing::TempDir;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.input_height = 24;
  c.input_width = 32;
  c.trunk_layers = 1;
  c.trunk_width = 16;
  c.attention_heads = 2;
  c.fine_channels = 4;
  c.encoder_channels = {8, 8, 16};
  c.text_reader_channels = {8, 8};
  c.text_embed = 8;
  c.max_text_len = 8;
  c.init_seed = 2;
  return c;
}

TransitionCorpus tiny_corpus(std::size_t n, std::uint64_t seed) {
  return generate_corpus(GeneratorConfig{}, n, seed);
}

}  // namespace

TEST_CASE("action_match applies the tolerance per axis") {
  const Action gold = Action::click(500, 500);
  CHECK(action_match(Action::click(510, 490), gold, 10));
  CHECK_FALSE(action_match(Action::click(511, 500), gold, 10));
  CHECK_FALSE(action_match(Action::move(500, 500), gold, 10));
  CHECK(action_match(Action::click(511, 500), gold, 11));
  CHECK(action_match(Action::type(1, 2, " hi "), Action::type(1, 2, "hi"), 0));
  CHECK_FALSE(action_match(Action::type(1, 2, "hi"), Action::type(1, 2, "ho"), 10));
  CHECK(action_match(Action::scroll(ScrollDir::up), Action::scroll(ScrollDir::up), 0));
  CHECK_FALSE(action_match(Action::scroll(ScrollDir::up), Action::scroll(ScrollDir::down), 0));
  CHECK(action_match(Action::wait(), Action::wait(), 0));
}

TEST_CASE("evaluate_actions reports overall and per-kind accuracy") {
  TransitionCorpus c = tiny_corpus(30, 1);
  std::vector<Action> perfect;
  for (const auto& t : c.transitions) perfect.push_back(t.action);
  const EvalReport r = evaluate_actions(perfect, c, 10);
  CHECK(r.action_accuracy == doctest::Approx(1.0));
  CHECK(r.kind_accuracy == doctest::Approx(1.0));
  CHECK(r.n_examples == 30);
  std::size_t total = 0;
  for (const auto& [k, s] : r.per_kind) total += s.n;
  CHECK(total == 30);

  std::vector<Action> waits(30, Action::wait());
  const EvalReport w = evaluate_actions(waits, c, 10);
  CHECK(w.per_kind.count(ActionKind::wait) == (r.per_kind.count(ActionKind::wait)));
  if (w.per_kind.count(ActionKind::click)) {
    CHECK(w.per_kind.at(ActionKind::click).action_accuracy == 0.0);
  }
  CHECK_THROWS_AS(evaluate_actions(std::vector<Action>(3), c, 10), ValidationError);
}

TEST_CASE("baseline_majority predicts the most frequent kind") {
  TransitionCorpus c = tiny_corpus(200, 3);
  const ConstantPredictor p = baseline_majority(c);
  std::map<ActionKind, int> counts;
  for (const auto& t : c.transitions) ++counts[t.action.kind];
  ActionKind best = ActionKind::click;
  for (const auto& [k, n] : counts) {
    if (n > counts[best]) best = k;
  }
  CHECK(p.action().kind == best);
  const EvalReport r = evaluate(p, c, 10);
  CHECK(r.kind_accuracy == doctest::Approx(counts[best] / 200.0));
}

TEST_CASE("train config json round-trip and validation") {
  TrainConfig c;
  c.epochs = 3;
  c.schedule = LrSchedule::constant;
  const TrainConfig r = train_config_from_json(train_config_to_json(c));
  CHECK(r.epochs == 3);
  CHECK(r.schedule == LrSchedule::constant);
  CHECK(r.learning_rate == doctest::Approx(1e-3));
  CHECK_THROWS_AS(train_config_from_json({{"epoch", 3}}), ValidationError);
  CHECK_THROWS_AS(train_config_from_json({{"batch_size", 0}}), ValidationError);
  CHECK_THROWS_AS(train_config_from_json({{"schedule", "step"}}), ValidationError);
}

TEST_CASE("train reduces loss, writes history and checkpoints") {
  const TransitionCorpus c = tiny_corpus(96, 5);
  const CorpusSplit s = split_corpus(c, {0.75, 0.125, 0.125}, 0);
  IdmModel<float> model(small_model());
  TrainConfig tc;
  tc.epochs = 6;
  tc.batch_size = 8;
  tc.schedule = LrSchedule::constant;
  TempDir dir("train");
  TrainOptions opt;
  opt.out_dir = dir.path();
  std::size_t steps_seen = 0;
  opt.on_step = [&](std::size_t, double loss) {
    ++steps_seen;
    CHECK(std::isfinite(loss));
  };
  const TrainResult r = train(model, s.train, s.val, tc, opt);
  REQUIRE(r.history.size() == 6);
  CHECK(r.history.back().train_loss < r.history.front().train_loss);
  CHECK(r.steps == steps_seen);
  CHECK(r.steps == 6 * ((s.train.size() + 7) / 8));
  CHECK(std::filesystem::exists(dir.path() / "best.ckpt"));
  CHECK(std::filesystem::exists(dir.path() / "final.ckpt"));
  std::ifstream h(dir.path() / "history.jsonl");
  int lines = 0;
  for (std::string l; std::getline(h, l);) ++lines;
  CHECK(lines == 6);

  const IdmModel<float> best = load_checkpoint(dir.path() / "best.ckpt");
  const double acc = evaluate(IdmPredictor<float>(best), s.val, 10).action_accuracy;
  CHECK(acc == doctest::Approx(r.history[static_cast<std::size_t>(r.best_epoch - 1)].val.action_accuracy));
}

TEST_CASE("train rejects mismatched precision and empty corpora") {
  const TransitionCorpus c = tiny_corpus(8, 1);
  IdmModel<float> model(small_model());
  TrainConfig tc;
  tc.precision = Precision::double_precision;
  CHECK_THROWS_AS(train(model, c, c, tc), ValidationError);
  tc.precision = Precision::single;
  CHECK_THROWS_AS(train(model, TransitionCorpus{}, c, tc), ValidationError);
}

TEST_CASE("non-finite loss raises NumericError with the step") {
  const TransitionCorpus c = tiny_corpus(64, 2);
  IdmModel<float> model(small_model());
  TrainConfig tc;
  tc.batch_size = 8;
  TempDir dir("nan");
  TrainOptions opt;
  opt.out_dir = dir.path();
  opt.on_step = [&](std::size_t step, double) {
    if (step == 3) {
      for (auto& p : model.params().all()) p.value.setConstant(std::numeric_limits<float>::quiet_NaN());
    }
  };
  try {
    train(model, c, c, tc, opt);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.step() == 3);
  }
  CHECK_FALSE(std::filesystem::exists(dir.path() / "last_good.ckpt"));
}

TEST_CASE("double-precision training is bit-reproducible") {
  const TransitionCorpus c = tiny_corpus(32, 8);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.precision = Precision::double_precision;
  std::vector<double> losses[2];
  for (int run = 0; run < 2; ++run) {
    IdmModel<double> model(small_model());
    const TrainResult r = train(model, c, c, tc);
    for (const auto& e : r.history) losses[run].push_back(e.train_loss);
  }
  CHECK(losses[0] == losses[1]);
}
