#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "saldist/distill.hpp"

namespace saldist {

/// A ratio that always travels with its counts.
struct Rate {
  std::size_t numerator = 0;
  std::size_t denominator = 0;

  /// nullopt when the denominator is zero.
  std::optional<double> value() const;
  bool operator==(const Rate&) const = default;
};

struct EvalRecord {
  std::int64_t id = 0;
  TokenIds gold;
  std::optional<TokenIds> predicted;  // nullopt: output could not be parsed
  bool correct = false;
  TokenIds rationale;

  bool operator==(const EvalRecord&) const = default;
};

struct EvalReport {
  std::string dataset_id;
  std::string model_id;
  double accuracy = 0.0;
  Rate correct;
  std::vector<EvalRecord> records;

  bool operator==(const EvalReport&) const = default;
};

/// Greedy-generate every example and score exact label matches. Outputs that
/// cannot be parsed count as incorrect.
EvalReport evaluate(const Seq2SeqModel& model, std::span<const Example> examples, PromptFormat format,
                    std::string dataset_id = {}, std::string model_id = {}, bool with_rationales = false);

struct KSweepPoint {
  int k = 0;
  std::vector<double> accuracies;  // one per seed
  double mean = 0.0;
  double sd = 0.0;
};

struct StudentSetup {
  ModelConfig model;     // seed is replaced by each run's seed
  TrainConfig training;  // seed and k are replaced per run
};

/// For every k: rationales from the teacher's attributions on the training
/// split (k = 0: none), one fresh student per seed, test-split accuracy.
std::vector<KSweepPoint> k_sweep(const Seq2SeqModel& teacher, const Dataset& dataset, const StudentSetup& setup,
                                 std::span<const int> k_values, std::span<const std::uint64_t> seeds,
                                 const AttributionOptions& attribution = {});

/// Trains one student per seed on the given rationale data and returns its
/// test accuracy. Student init and shuffling are both seeded by `seed`.
double train_and_score(const Dataset& dataset, std::span<const RationaleExample> data, const StudentSetup& setup,
                       std::uint64_t seed);

struct ControlCondition {
  std::string name;
  std::vector<double> accuracies;
  double mean = 0.0;
};

struct ControlReport {
  ControlCondition teacher;
  ControlCondition none;
  ControlCondition random;
  /// e.g. "teacher > none > random", ranked by mean accuracy.
  std::string observed_ordering;
  /// teacher >= none >= random on the means.
  bool ordering_holds = false;
};

/// Teacher rationales vs. no rationales vs. random input words, matched
/// student seeds. Needs at least 3 seeds.
ControlReport control_comparison(const Seq2SeqModel& teacher, const Dataset& dataset, const StudentSetup& setup,
                                 std::span<const std::uint64_t> seeds, const AttributionOptions& attribution = {});

struct OverlapReport {
  /// Rationale positions include at least one token of the gold answer;
  /// only defined for examples that carry answer choices.
  std::optional<Rate> answer_overlap;
  /// Rationale positions include at least one planted position.
  std::optional<Rate> planted_overlap;
  /// Either of the above: a gold-answer token or a planted position.
  std::optional<Rate> truth_overlap;
};

OverlapReport overlap_with_truth(std::span<const RationaleExample> rationales);

/// Chance of a uniformly random k-subset of the eligible positions hitting at
/// least one planted position, averaged over examples (hypergeometric).
/// nullopt when no example carries planted positions.
std::optional<double> random_planted_overlap(std::span<const Example> examples, int k);

enum class IncorrectOverlapMode {
  both_wrong,  // denominator: examples both models got wrong
  a_wrong,     // denominator: examples model a got wrong
};

struct SimilarityReport {
  /// b correct among examples a got right.
  std::optional<Rate> correct_overlap;
  /// Same wrong label among the eligible wrong examples.
  std::optional<Rate> incorrect_overlap;
};

/// Throws Error unless both reports cover the same examples in the same order.
SimilarityReport prediction_similarity(const EvalReport& a, const EvalReport& b,
                                       IncorrectOverlapMode mode = IncorrectOverlapMode::both_wrong);

double sample_sd(std::span<const double> xs);
double mean_of(std::span<const double> xs);

// Report files: line-delimited JSON. Metric records carry
// {metric, value, numerator, denominator, config_fingerprint, seeds}.
std::string metric_record(const std::string& metric, std::optional<double> value, std::optional<Rate> rate,
                          const std::string& fingerprint, std::span<const std::uint64_t> seeds);

std::string eval_report_to_jsonl(const EvalReport& report, const Vocabulary& vocab, const std::string& fingerprint);
EvalReport eval_report_from_jsonl(std::string_view text, const Vocabulary& vocab);
std::string report_fingerprint(std::string_view report_jsonl);

/// Two columns with a header row: k accuracy.
std::string ksweep_plot_data(std::span<const KSweepPoint> points);

}  // namespace saldist
