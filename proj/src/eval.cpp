#include "saldist/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "saldist/io.hpp"

namespace saldist {

namespace {

using ojson = nlohmann::ordered_json;

ojson token_list(std::span<const int> ids, const Vocabulary& vocab) {
  auto arr = ojson::array();
  for (int id : ids) arr.push_back(vocab.token(id));
  return arr;
}

TokenIds token_ids(const ojson& arr, const Vocabulary& vocab) {
  TokenIds out;
  for (const auto& s : arr) out.push_back(vocab.id(s.get<std::string>()));
  return out;
}

bool contains(std::span<const int> xs, int v) { return std::find(xs.begin(), xs.end(), v) != xs.end(); }

ControlCondition condition(std::string name, std::vector<double> accuracies) {
  ControlCondition c{std::move(name), std::move(accuracies), 0.0};
  c.mean = mean_of(c.accuracies);
  return c;
}

}  // namespace

std::optional<double> Rate::value() const {
  if (denominator == 0) return std::nullopt;
  return static_cast<double>(numerator) / static_cast<double>(denominator);
}

double mean_of(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double sample_sd(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

EvalReport evaluate(const Seq2SeqModel& model, std::span<const Example> examples, PromptFormat format,
                    std::string dataset_id, std::string model_id, bool with_rationales) {
  EvalReport report;
  report.dataset_id = std::move(dataset_id);
  report.model_id = std::move(model_id);
  report.records.reserve(examples.size());
  for (const auto& ex : examples) {
    EvalRecord r;
    r.id = ex.id;
    r.gold = ex.label_ids;
    r.predicted = predict_label(model, ex.input_ids, format);
    r.correct = r.predicted && *r.predicted == ex.label_ids;
    if (with_rationales) r.rationale = predict_rationale(model, ex.input_ids, format);
    report.correct.numerator += r.correct ? 1 : 0;
    report.records.push_back(std::move(r));
  }
  report.correct.denominator = examples.size();
  report.accuracy = report.correct.value().value_or(0.0);
  return report;
}

double train_and_score(const Dataset& dataset, std::span<const RationaleExample> data, const StudentSetup& setup,
                       std::uint64_t seed) {
  ModelConfig mc = setup.model;
  mc.vocab_size = static_cast<int>(dataset.vocab.size());
  mc.seed = seed;
  TrainConfig tc = setup.training;
  tc.seed = seed;
  Seq2SeqModel student(mc);
  train(student, data, tc);
  return label_accuracy(student, dataset.test, prompt_format_for(tc.target_mode));
}

std::vector<KSweepPoint> k_sweep(const Seq2SeqModel& teacher, const Dataset& dataset, const StudentSetup& setup,
                                 std::span<const int> k_values, std::span<const std::uint64_t> seeds,
                                 const AttributionOptions& attribution) {
  if (k_values.empty()) throw ConfigError("k_sweep: no k values");
  if (seeds.empty()) throw ConfigError("k_sweep: no seeds");
  const bool needs_attribution = std::any_of(k_values.begin(), k_values.end(), [](int k) { return k > 0; });
  std::vector<AttributionResult> attributions;
  if (needs_attribution) attributions = attribute_all(teacher, dataset.train, attribution);

  std::vector<KSweepPoint> points;
  for (int k : k_values) {
    if (k < 0) throw ConfigError("k_sweep: k must be >= 0");
    const auto data = k == 0 ? without_rationales(dataset.train)
                             : build_rationale_dataset(dataset.train, attributions, k, attribution);
    StudentSetup s = setup;
    s.training.k = k;
    KSweepPoint point;
    point.k = k;
    for (auto seed : seeds) point.accuracies.push_back(train_and_score(dataset, data, s, seed));
    point.mean = mean_of(point.accuracies);
    point.sd = sample_sd(point.accuracies);
    points.push_back(std::move(point));
  }
  return points;
}

ControlReport control_comparison(const Seq2SeqModel& teacher, const Dataset& dataset, const StudentSetup& setup,
                                 std::span<const std::uint64_t> seeds, const AttributionOptions& attribution) {
  if (seeds.size() < 3) throw ConfigError("control_comparison: needs at least 3 seeds");
  if (attribution.method == AttributionMethod::random) {
    throw ConfigError("control_comparison: the teacher condition needs a gradient attribution method");
  }
  const int k = setup.training.k;
  const auto teacher_data = build_rationale_dataset(teacher, dataset.train, k, attribution);
  const auto plain_data = without_rationales(dataset.train);

  std::vector<double> with_teacher, with_none, with_random;
  for (auto seed : seeds) {
    AttributionOptions random_options{AttributionMethod::random, attribution.ig_baseline, attribution.ig_steps, seed};
    const auto random_data =
        build_rationale_dataset(dataset.train, attribute_all(teacher, dataset.train, random_options), k, random_options);
    with_teacher.push_back(train_and_score(dataset, teacher_data, setup, seed));
    with_none.push_back(train_and_score(dataset, plain_data, setup, seed));
    with_random.push_back(train_and_score(dataset, random_data, setup, seed));
  }

  ControlReport report;
  report.teacher = condition("teacher_rationales", std::move(with_teacher));
  report.none = condition("no_rationales", std::move(with_none));
  report.random = condition("random_rationales", std::move(with_random));
  report.ordering_holds = report.teacher.mean >= report.none.mean && report.none.mean >= report.random.mean;

  std::vector<const ControlCondition*> ranked{&report.teacher, &report.none, &report.random};
  std::stable_sort(ranked.begin(), ranked.end(), [](auto* a, auto* b) { return a->mean > b->mean; });
  std::ostringstream os;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (i) os << (ranked[i - 1]->mean == ranked[i]->mean ? " = " : " > ");
    os << ranked[i]->name.substr(0, ranked[i]->name.find('_'));
  }
  report.observed_ordering = os.str();
  return report;
}

OverlapReport overlap_with_truth(std::span<const RationaleExample> rationales) {
  Rate answer, planted, either;
  for (const auto& rx : rationales) {
    const auto& ex = rx.base;
    bool answer_hit = false, planted_hit = false;
    if (ex.choices) {
      ++answer.denominator;
      answer_hit = std::any_of(rx.positions.begin(), rx.positions.end(), [&](int p) {
        return contains(ex.label_ids, ex.input_ids[static_cast<std::size_t>(p)]);
      });
      answer.numerator += answer_hit ? 1 : 0;
    }
    if (ex.planted_positions) {
      ++planted.denominator;
      planted_hit = std::any_of(rx.positions.begin(), rx.positions.end(),
                                [&](int p) { return contains(*ex.planted_positions, p); });
      planted.numerator += planted_hit ? 1 : 0;
    }
    if (ex.choices || ex.planted_positions) {
      ++either.denominator;
      either.numerator += (answer_hit || planted_hit) ? 1 : 0;
    }
  }
  OverlapReport report;
  if (answer.denominator > 0) report.answer_overlap = answer;
  if (planted.denominator > 0) report.planted_overlap = planted;
  if (either.denominator > 0) report.truth_overlap = either;
  return report;
}

std::optional<double> random_planted_overlap(std::span<const Example> examples, int k) {
  if (k < 1) throw ConfigError("random_planted_overlap: k must be >= 1");
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& ex : examples) {
    if (!ex.planted_positions) continue;
    const auto excluded = excluded_positions(ex.input_ids);
    const auto n = static_cast<int>(std::count(excluded.begin(), excluded.end(), false));
    const int m = static_cast<int>(std::count_if(ex.planted_positions->begin(), ex.planted_positions->end(),
                                                 [&](int p) { return !excluded[static_cast<std::size_t>(p)]; }));
    const int take = std::min(k, n);
    // P(no hit) = C(n-m, take) / C(n, take) = prod_{i<take} (n-m-i)/(n-i)
    double miss = 1.0;
    for (int i = 0; i < take; ++i) miss *= std::max(0, n - m - i) / static_cast<double>(n - i);
    total += 1.0 - miss;
    ++count;
  }
  if (count == 0) return std::nullopt;
  return total / static_cast<double>(count);
}

SimilarityReport prediction_similarity(const EvalReport& a, const EvalReport& b, IncorrectOverlapMode mode) {
  if (a.records.size() != b.records.size()) throw Error("prediction_similarity: reports cover different examples");
  Rate correct, incorrect;
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    const auto& ra = a.records[i];
    const auto& rb = b.records[i];
    if (ra.id != rb.id) throw Error("prediction_similarity: example order differs at index " + std::to_string(i));
    if (ra.correct) {
      ++correct.denominator;
      correct.numerator += rb.correct ? 1 : 0;
      continue;
    }
    // a's wrong label must be defined to ask whether b repeats it.
    if (!ra.predicted) continue;
    if (mode == IncorrectOverlapMode::both_wrong && rb.correct) continue;
    ++incorrect.denominator;
    incorrect.numerator += (!rb.correct && rb.predicted && *rb.predicted == *ra.predicted) ? 1 : 0;
  }
  SimilarityReport report;
  if (correct.denominator > 0) report.correct_overlap = correct;
  if (incorrect.denominator > 0) report.incorrect_overlap = incorrect;
  return report;
}

std::string metric_record(const std::string& metric, std::optional<double> value, std::optional<Rate> rate,
                          const std::string& fingerprint, std::span<const std::uint64_t> seeds) {
  ojson j;
  j["metric"] = metric;
  if (rate && !value) value = rate->value();
  j["value"] = value ? ojson(*value) : ojson(nullptr);
  j["numerator"] = rate ? ojson(rate->numerator) : ojson(nullptr);
  j["denominator"] = rate ? ojson(rate->denominator) : ojson(nullptr);
  j["config_fingerprint"] = fingerprint;
  j["seeds"] = std::vector<std::uint64_t>(seeds.begin(), seeds.end());
  return j.dump();
}

std::string eval_report_to_jsonl(const EvalReport& report, const Vocabulary& vocab, const std::string& fingerprint) {
  ojson head = ojson::parse(metric_record("accuracy", report.accuracy, report.correct, fingerprint, {}));
  head["dataset_id"] = report.dataset_id;
  head["model_id"] = report.model_id;
  std::string out = head.dump() + "\n";
  for (const auto& r : report.records) {
    ojson j;
    j["id"] = r.id;
    j["gold"] = token_list(r.gold, vocab);
    j["predicted"] = r.predicted ? token_list(*r.predicted, vocab) : ojson(nullptr);
    j["correct"] = r.correct;
    j["rationale"] = token_list(r.rationale, vocab);
    out += j.dump() + "\n";
  }
  return out;
}

EvalReport eval_report_from_jsonl(std::string_view text, const Vocabulary& vocab) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  EvalReport report;
  bool have_head = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const ojson j = ojson::parse(line);
      if (!have_head) {
        if (j.at("metric").get<std::string>() != "accuracy") throw DataError("first record must be the accuracy metric");
        report.correct = {j.at("numerator").get<std::size_t>(), j.at("denominator").get<std::size_t>()};
        report.accuracy = j.at("value").get<double>();
        report.dataset_id = j.value("dataset_id", "");
        report.model_id = j.value("model_id", "");
        have_head = true;
        continue;
      }
      EvalRecord r;
      r.id = j.at("id").get<std::int64_t>();
      r.gold = token_ids(j.at("gold"), vocab);
      if (!j.at("predicted").is_null()) r.predicted = token_ids(j["predicted"], vocab);
      r.correct = j.at("correct").get<bool>();
      r.rationale = token_ids(j.at("rationale"), vocab);
      report.records.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw DataError("eval report line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!have_head) throw DataError("eval report is empty");
  if (report.records.size() != report.correct.denominator) throw DataError("eval report record count mismatch");
  return report;
}

std::string report_fingerprint(std::string_view report_jsonl) {
  const auto nl = report_jsonl.find('\n');
  try {
    const ojson head = ojson::parse(report_jsonl.substr(0, nl));
    return head.at("config_fingerprint").get<std::string>();
  } catch (const std::exception& e) {
    throw DataError(std::string("report has no readable config fingerprint: ") + e.what());
  }
}

std::string ksweep_plot_data(std::span<const KSweepPoint> points) {
  std::ostringstream os;
  os << "k accuracy\n";
  os.precision(17);
  for (const auto& p : points) os << p.k << ' ' << p.mean << '\n';
  return os.str();
}

}  // namespace saldist
