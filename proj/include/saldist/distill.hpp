#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "saldist/attribution.hpp"
#include "saldist/data.hpp"
#include "saldist/model.hpp"

namespace saldist {

enum class RationaleSource { teacher_saliency, teacher_ig, random, none };

std::string to_string(RationaleSource s);
RationaleSource rationale_source_from_string(std::string_view s);
RationaleSource source_for(AttributionMethod m);

/// How rationales enter the student's targets.
///  dual:          two passes, "[LABEL] x -> y" and "[RATIONALE] x -> r1 , r2 ...",
///                 loss L_label + lambda * L_rationale.
///  concatenated:  one pass, "x -> r1 , r2 ... so the answer is y"; lambda unused.
enum class TargetMode { dual, concatenated };

std::string to_string(TargetMode m);
TargetMode target_mode_from_string(std::string_view s);

/// Input layout a model was trained with; decides how its output is parsed.
enum class PromptFormat { plain, dual, concatenated };

std::string to_string(PromptFormat f);
PromptFormat prompt_format_from_string(std::string_view s);
PromptFormat prompt_format_for(TargetMode m);

struct RationaleExample {
  Example base;
  TokenIds rationale;
  std::vector<int> positions;
  RationaleSource source = RationaleSource::none;
  int k = 0;

  bool operator==(const RationaleExample&) const = default;
};

struct TrainConfig {
  double learning_rate = 0.2;
  int epochs = 10;
  int batch_size = 16;
  double lambda = 0.5;
  int k = 5;
  std::uint64_t seed = 0;
  TargetMode target_mode = TargetMode::dual;

  void validate() const;
};

/// Rationale-augmented copies of `examples` from a teacher's attributions.
/// Throws DataError if the teacher vocabulary does not cover the examples.
std::vector<RationaleExample> build_rationale_dataset(const Seq2SeqModel& teacher, std::span<const Example> examples,
                                                      int k, const AttributionOptions& options);

/// Same, from precomputed attributions (one per example, same order).
std::vector<RationaleExample> build_rationale_dataset(std::span<const Example> examples,
                                                      std::span<const AttributionResult> attributions, int k,
                                                      const AttributionOptions& options);

/// Examples with no rationale; the standard fine-tuning data.
std::vector<RationaleExample> without_rationales(std::span<const Example> examples);

struct RationaleTargets {
  TrainingPair label;
  /// Absent when the example has no rationale or in concatenated mode.
  std::optional<TrainingPair> rationale;
};

/// Encoder inputs and decoder targets (each ending with EOS) for one example.
RationaleTargets rationale_targets(const RationaleExample& rx, TargetMode mode);

/// Encoder input for label prediction in the given format.
TokenIds label_prompt(std::span<const int> input_ids, PromptFormat format);

/// Dual: L_label + lambda * L_rationale, each a mean over the examples that
/// carry that target. Concatenated: one cross-entropy over the joined target.
Tensor combined_loss(const Seq2SeqModel& student, std::span<const RationaleExample> batch, double lambda,
                     TargetMode mode);

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  std::optional<double> validation_accuracy;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t steps = 0;
};

/// Mini-batch SGD on combined_loss over seeded shuffles. Validation accuracy
/// is measured after each epoch when a validation split is given. Throws
/// NumericError if the loss diverges.
TrainHistory train(Seq2SeqModel& student, std::span<const RationaleExample> data, const TrainConfig& config,
                   std::span<const Example> validation = {}, PromptFormat format = PromptFormat::dual);

/// Same loop on plain (x -> y) pairs with the label loss alone; this is how
/// the teacher is fine-tuned.
TrainHistory train_plain(Seq2SeqModel& model, std::span<const Example> data, const TrainConfig& config,
                         std::span<const Example> validation = {});

/// Greedy generation parsed down to the label segment: the whole output for
/// plain/dual prompts, the tokens after the last "so the answer is" for
/// concatenated ones. nullopt when the output cannot be parsed.
std::optional<TokenIds> predict_label(const Seq2SeqModel& model, std::span<const int> input_ids,
                                      PromptFormat format);

/// Rationale tokens the student generates after the [RATIONALE] prefix
/// (dual) or before the connective (concatenated). Empty for plain models.
TokenIds predict_rationale(const Seq2SeqModel& model, std::span<const int> input_ids, PromptFormat format);

/// Label accuracy of greedy generation (used for per-epoch validation).
double label_accuracy(const Seq2SeqModel& model, std::span<const Example> examples, PromptFormat format);

// Line-delimited JSON: {id, input_tokens, label_tokens, choices?, rationale_tokens,
// rationale_positions, source, k}; planted_positions kept as an extra trailing field.
std::string rationale_to_json(const RationaleExample& rx, const Vocabulary& vocab);
RationaleExample rationale_from_json(std::string_view line, const Vocabulary& vocab);
void write_rationales(const std::filesystem::path& path, std::span<const RationaleExample> data,
                      const Vocabulary& vocab);
std::vector<RationaleExample> read_rationales(const std::filesystem::path& path, const Vocabulary& vocab);

}  // namespace saldist
