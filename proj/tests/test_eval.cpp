#include <cmath>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "saldist/errors.hpp"
#include "saldist/eval.hpp"
#include "support.hpp"

using namespace saldist;
using saldist::testing::tiny_config;

namespace {

Dataset marker(std::size_t train, std::size_t test, std::uint64_t seed, int vocab = 48, int seq_len = 8) {
  MarkerTaskParams p;
  p.splits = {train, 0, test};
  p.vocab_size = vocab;
  p.seq_len = seq_len;
  p.seed = seed;
  return gen_marker_classification(p);
}

// Decoder layers with zero weights pass their input straight through, so
// the output at each step depends only on the decoder input token. BOS maps
// to `first`, `first` maps to EOS: the model always answers [first].
Seq2SeqModel constant_model(int vocab, int first) {
  Seq2SeqModel m(tiny_config(vocab, 16, 1));
  for (auto& [name, p] : m.parameters()) {
    const bool keep = name.ends_with(".g");
    for (auto& v : p.mutable_values()) v = keep ? 1.0 : 0.0;
  }
  const std::size_t d = 16;
  auto table = m.param("embedding").mutable_values();
  table[token::kBos * d + 0] = 100.0;
  table[static_cast<std::size_t>(first) * d + 1] = 100.0;
  auto w = m.param("out.w").mutable_values();  // [d x vocab]
  const auto v = static_cast<std::size_t>(vocab);
  w[0 * v + static_cast<std::size_t>(first)] = 10.0;
  w[1 * v + token::kEos] = 10.0;
  return m;
}

EvalRecord record(std::int64_t id, int gold, std::optional<int> predicted) {
  EvalRecord r;
  r.id = id;
  r.gold = {gold};
  if (predicted) r.predicted = TokenIds{*predicted};
  r.correct = predicted && *predicted == gold;
  return r;
}

EvalReport report_of(std::vector<EvalRecord> records) {
  EvalReport rep;
  for (const auto& r : records) rep.correct.numerator += r.correct ? 1 : 0;
  rep.correct.denominator = records.size();
  rep.accuracy = rep.correct.value().value_or(0.0);
  rep.records = std::move(records);
  return rep;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("rates and summary statistics") {
  CHECK_FALSE(Rate{0, 0}.value());
  CHECK(*Rate{1, 4}.value() == 0.25);
  const std::vector<double> xs{1.0, 2.0, 3.0, 4.0};
  CHECK(mean_of(xs) == 2.5);
  CHECK(sample_sd(xs) == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-15));
  CHECK(sample_sd(std::vector<double>{3.0}) == 0.0);
}

TEST_CASE("constant answer scores the label frequency") {
  const Dataset ds = marker(0, 1000, 21, 64, 12);
  const int label0 = ds.vocab.id("label0");
  const Seq2SeqModel m = constant_model(static_cast<int>(ds.vocab.size()), label0);
  CHECK(m.generate(ds.test[0].input_ids, 8) == TokenIds{label0, token::kEos});
  const auto rep = evaluate(m, ds.test, PromptFormat::plain);
  CHECK(rep.correct.denominator == 1000);
  CHECK(std::abs(rep.accuracy - 1.0 / 3.0) <= 0.05);
  CHECK(rep == evaluate(m, ds.test, PromptFormat::plain));

  // Missing connective in the concatenated format: never correct.
  const auto cat = evaluate(m, ds.test, PromptFormat::concatenated);
  CHECK(cat.correct.numerator == 0);
  CHECK_FALSE(cat.records[0].predicted);
}

TEST_CASE("a memorizer scores 1.0 on its train split") {
  const Dataset ds = marker(24, 0, 22);
  Seq2SeqModel m(tiny_config(static_cast<int>(ds.vocab.size()), 16, 5));
  TrainConfig tc;
  tc.epochs = 150;
  tc.batch_size = 8;
  tc.seed = 5;
  train_plain(m, ds.train, tc);
  CHECK(evaluate(m, ds.train, PromptFormat::plain).accuracy == 1.0);
}

TEST_CASE("overlap with planted positions") {
  // n = 20 eligible positions, one planted, k = 5 random picks: rate k/n.
  std::vector<RationaleExample> data;
  std::vector<Example> examples;
  Rng rng(3);
  for (int i = 0; i < 2000; ++i) {
    Example ex;
    ex.id = i;
    ex.input_ids = saldist::testing::random_ids(rng, 20, 10, 40);
    ex.label_ids = {41};
    ex.planted_positions = std::vector<int>{static_cast<int>(rng.below(20))};
    const auto picks = random_attribution(ex, 5, 17);
    data.push_back({ex, picks.ids(), picks.positions(), RationaleSource::random, 5});
    examples.push_back(ex);
  }
  const auto r = overlap_with_truth(data);
  CHECK_FALSE(r.answer_overlap);
  REQUIRE(r.planted_overlap);
  CHECK(r.planted_overlap->denominator == 2000);
  CHECK(std::abs(*r.planted_overlap->value() - 0.25) <= 0.03);
  CHECK(*random_planted_overlap(examples, 5) == doctest::Approx(0.25).epsilon(1e-12));

  // k == n: every planted position is covered.
  for (auto& rx : data) {
    const auto all = random_attribution(rx.base, 20, 1);
    rx.positions = all.positions();
    rx.rationale = all.ids();
  }
  CHECK(*overlap_with_truth(data).planted_overlap->value() == 1.0);
  CHECK(*random_planted_overlap(examples, 20) == 1.0);
}

TEST_CASE("answer overlap on the choice task") {
  const Dataset ds = gen_choice_selection(ChoiceTaskParams{{100, 0, 0}, 5, 12, 64, 10, 3});
  std::vector<RationaleExample> data;
  for (const auto& ex : ds.train) {
    // Rationale is exactly the gold answer slot.
    const int slot = (*ex.planted_positions)[1];
    data.push_back({ex, {ex.input_ids[static_cast<std::size_t>(slot)]}, {slot}, RationaleSource::random, 1});
  }
  const auto r = overlap_with_truth(data);
  CHECK(*r.answer_overlap->value() == 1.0);
  CHECK(*r.truth_overlap->value() == 1.0);
}

TEST_CASE("prediction similarity") {
  const auto a = report_of({record(0, 10, 10), record(1, 10, 11), record(2, 12, 12), record(3, 12, 10)});
  const auto self = prediction_similarity(a, a);
  CHECK(*self.correct_overlap->value() == 1.0);
  CHECK(*self.incorrect_overlap->value() == 1.0);

  const auto b = report_of({record(0, 10, 11), record(1, 10, 10), record(2, 12, 11), record(3, 12, 12)});
  CHECK(prediction_similarity(a, b).correct_overlap->numerator == 0);
  CHECK_FALSE(prediction_similarity(a, b).incorrect_overlap);  // never both wrong
  CHECK(prediction_similarity(a, b, IncorrectOverlapMode::a_wrong).incorrect_overlap->denominator == 2);

  auto shuffled = b;
  std::swap(shuffled.records[0], shuffled.records[1]);
  CHECK_THROWS_AS(prediction_similarity(a, shuffled), Error);
}

TEST_CASE("independent random predictors agree on half the shared mistakes") {
  // Oracle: simulate two independent uniform 3-class predictors and count
  // directly, then compare with the metric on the same draws.
  Rng rng(8);
  std::vector<EvalRecord> ra, rb;
  std::size_t both_wrong = 0, same = 0;
  for (int i = 0; i < 10000; ++i) {
    const int gold = static_cast<int>(rng.below(3));
    const int pa = static_cast<int>(rng.below(3));
    const int pb = static_cast<int>(rng.below(3));
    ra.push_back(record(i, gold, pa));
    rb.push_back(record(i, gold, pb));
    if (pa != gold && pb != gold) {
      ++both_wrong;
      same += pa == pb ? 1 : 0;
    }
  }
  const auto sim = prediction_similarity(report_of(ra), report_of(rb));
  REQUIRE(sim.incorrect_overlap);
  CHECK(sim.incorrect_overlap->denominator == both_wrong);
  CHECK(sim.incorrect_overlap->numerator == same);
  const double sigma = std::sqrt(0.25 / static_cast<double>(both_wrong));
  CHECK(std::abs(*sim.incorrect_overlap->value() - 0.5) <= 3 * sigma);
}

TEST_CASE("report files") {
  const Dataset ds = marker(0, 50, 23);
  const auto m = constant_model(static_cast<int>(ds.vocab.size()), ds.vocab.id("label1"));
  const auto rep = evaluate(m, ds.test, PromptFormat::plain, "test", "const");
  const auto text = eval_report_to_jsonl(rep, ds.vocab, "abc123");
  CHECK(eval_report_from_jsonl(text, ds.vocab) == rep);
  CHECK(report_fingerprint(text) == "abc123");
  const auto head = nlohmann::json::parse(text.substr(0, text.find('\n')));
  for (const auto* key : {"metric", "value", "numerator", "denominator", "config_fingerprint", "seeds"}) {
    CHECK(head.contains(key));
  }
  CHECK_THROWS_AS(eval_report_from_jsonl("", ds.vocab), DataError);
  CHECK_THROWS_AS(eval_report_from_jsonl(text.substr(0, text.size() / 2), ds.vocab), DataError);

  const std::vector<KSweepPoint> points{{0, {0.5, 0.7}, 0.6, 0.1}, {1, {0.8}, 0.8, 0.0}};
  std::istringstream plot(ksweep_plot_data(points));
  std::string line;
  std::getline(plot, line);
  CHECK(line == "k accuracy");
  int k = -1;
  double acc = 0.0;
  plot >> k >> acc;
  CHECK(k == 0);
  CHECK(acc == 0.6);
}

TEST_CASE("k sweep and control") {
  const Dataset ds = marker(40, 20, 24);
  const Seq2SeqModel teacher(tiny_config(static_cast<int>(ds.vocab.size()), 16, 6));
  StudentSetup setup;
  setup.model = tiny_config(static_cast<int>(ds.vocab.size()), 16, 0);
  setup.training.epochs = 1;
  setup.training.batch_size = 8;
  const std::vector<int> ks{0, 1, 2};
  const std::vector<std::uint64_t> seeds{1, 2};
  const auto points = k_sweep(teacher, ds, setup, ks, seeds);
  REQUIRE(points.size() == 3);
  for (const auto& p : points) {
    CHECK(p.accuracies.size() == 2);
    CHECK(p.mean >= 0.0);
    CHECK(p.mean <= 1.0);
  }
  const auto plain = without_rationales(ds.train);
  CHECK(points[0].accuracies[0] == train_and_score(ds, plain, setup, 1));
  CHECK(points[0].accuracies[1] == train_and_score(ds, plain, setup, 2));

  CHECK_THROWS_AS(control_comparison(teacher, ds, setup, seeds), ConfigError);
  const std::vector<std::uint64_t> three{1, 2, 3};
  const auto c = control_comparison(teacher, ds, setup, three);
  CHECK(c.teacher.accuracies.size() == 3);
  CHECK(c.none.accuracies == std::vector<double>{points[0].accuracies[0], points[0].accuracies[1],
                                                 train_and_score(ds, plain, setup, 3)});
  CHECK_FALSE(c.observed_ordering.empty());
}

}  // TEST_SUITE
