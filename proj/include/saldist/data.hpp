#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "saldist/tensor.hpp"

namespace saldist {

namespace token {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kSep = 3;
inline constexpr int kLabel = 4;
inline constexpr int kRationale = 5;
// "so the answer is", used by the concatenated target layout.
inline constexpr int kConnectiveFirst = 6;
inline constexpr int kConnectiveLength = 4;
inline constexpr int kReservedCount = kConnectiveFirst + kConnectiveLength;
}  // namespace token

/// Special tokens that never carry attribution.
inline bool is_special(int id) { return id >= 0 && id <= token::kRationale; }

/// Closed word-level vocabulary with fixed reserved ids.
class Vocabulary {
 public:
  /// Starts with the reserved tokens only.
  Vocabulary();

  /// The first kReservedCount entries must be the reserved tokens.
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  int add(const std::string& token);
  int id(std::string_view token) const;
  std::optional<int> find(std::string_view token) const;
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenIds connective() const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

/// Whitespace-separated closed-vocabulary tokenization. Throws DataError
/// naming the first out-of-vocabulary word.
TokenIds tokenize(std::string_view text, const Vocabulary& vocab);
std::string detokenize(std::span<const int> ids, const Vocabulary& vocab);

struct Example {
  std::int64_t id = 0;
  TokenIds input_ids;
  TokenIds label_ids;
  std::optional<std::vector<TokenIds>> choices;
  std::optional<std::vector<int>> planted_positions;

  bool operator==(const Example&) const = default;
};

enum class TaskKind { marker_classification, choice_selection };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(std::string_view s);

struct Dataset {
  TaskKind task = TaskKind::marker_classification;
  std::uint64_t seed = 0;
  Vocabulary vocab;
  std::vector<Example> train;
  std::vector<Example> validation;
  std::vector<Example> test;

  const std::vector<Example>& split(std::string_view name) const;
  bool operator==(const Dataset&) const = default;
};

struct SplitSizes {
  std::size_t train = 8000;
  std::size_t validation = 1000;
  std::size_t test = 1000;

  std::size_t total() const { return train + validation + test; }
  /// 80/10/10 partition of n examples.
  static SplitSizes from_total(std::size_t n);
};

struct MarkerTaskParams {
  SplitSizes splits;
  int n_labels = 3;
  int seq_len = 16;
  int vocab_size = 512;
  int markers_per_label = 4;
  std::uint64_t seed = 0;
};

/// Distractor words with one class marker planted at a uniform position.
/// The label is the marker's class.
Dataset gen_marker_classification(const MarkerTaskParams& params);

struct ChoiceTaskParams {
  SplitSizes splits;
  int n_choices = 5;
  int seq_len = 16;
  int vocab_size = 512;
  /// Distinct answer words; each has one cue word that selects it.
  int answer_pool = 10;
  std::uint64_t seed = 0;
};

/// Question body containing one cue word, then SEP, then n_choices candidate
/// answers. The answer linked to the cue is the label.
Dataset gen_choice_selection(const ChoiceTaskParams& params);

/// Generator rules recovered from token strings, used to check that labels
/// follow from the planted tokens alone.
std::optional<int> marker_class(const Vocabulary& vocab, int id);
std::optional<int> cue_answer(const Vocabulary& vocab, int id);
bool label_follows_from_planted(const Dataset& ds, const Example& ex);

// Line-delimited JSON records:
// {id, input, label, choices?, planted_positions?}, fields in that order.
std::string example_to_json(const Example& ex, const Vocabulary& vocab);
Example example_from_json(std::string_view line, const Vocabulary& vocab);

void write_split(const std::filesystem::path& path, const std::vector<Example>& split, const Vocabulary& vocab);
/// Throws DataError carrying the 1-based number of the first bad line.
std::vector<Example> read_split(const std::filesystem::path& path, const Vocabulary& vocab);

void write_vocab(const std::filesystem::path& path, const Vocabulary& vocab);
Vocabulary read_vocab(const std::filesystem::path& path);

/// Directory layout: vocab.txt, meta.json, train/validation/test.jsonl.
void write_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace saldist
