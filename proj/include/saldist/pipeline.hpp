#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "saldist/eval.hpp"

namespace saldist {

struct TaskConfig {
  TaskKind kind = TaskKind::marker_classification;
  SplitSizes splits{1600, 200, 200};
  int seq_len = 16;
  int vocab_size = 128;
  int n_labels = 3;           // marker task
  int markers_per_label = 4;  // marker task
  int n_choices = 5;          // choice task
  int answer_pool = 10;       // choice task
};

struct AnalysisConfig {
  int k_min = 0;
  int k_max = 10;
  int n_seeds = 5;
  IncorrectOverlapMode incorrect_mode = IncorrectOverlapMode::both_wrong;
};

/// Everything a run needs. Model and train seeds inside are ignored; they are
/// derived from the top-level seed.
struct RunConfig {
  std::uint64_t seed = 1;
  std::filesystem::path out;
  TaskConfig task;
  ModelConfig teacher_model;
  TrainConfig teacher_train;
  ModelConfig student_model;
  TrainConfig student_train;
  RationaleSource rationale_source = RationaleSource::teacher_saliency;
  AttributionOptions attribution;
  AnalysisConfig analysis;

  RunConfig();
};

/// YAML text with every field spelled out.
std::string config_to_yaml(const RunConfig& config);

/// Starts from the defaults and applies the keys present in `text`. Unknown
/// keys and ill-typed values throw ConfigError naming the key.
RunConfig config_from_yaml(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);

/// Digest of the resolved config minus the output root and analysis knobs,
/// so the same experiment analysed differently keeps its fingerprint.
std::string config_fingerprint(const RunConfig& config);

/// Output root when neither the config nor --out names one.
inline constexpr const char* kOutputRootEnv = "SALDIST_OUT";
std::filesystem::path default_output_root();

/// Seeds used by the analyses: n values derived from the top-level seed.
std::vector<std::uint64_t> analysis_seeds(const RunConfig& config);

// Seeds for each pipeline stage, derived from the top-level seed.
std::uint64_t teacher_init_seed(const RunConfig& config);
std::uint64_t teacher_train_seed(const RunConfig& config);
std::uint64_t student_init_seed(const RunConfig& config);
std::uint64_t student_train_seed(const RunConfig& config);
std::uint64_t random_rationale_seed(const RunConfig& config);

/// Stage directories under the output root.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path teacher() const { return root / "teacher"; }
  std::filesystem::path rationales() const { return root / "rationales"; }
  std::filesystem::path student() const { return root / "student"; }
  std::filesystem::path evaluation(const std::string& name) const { return root / "eval" / name; }
  std::filesystem::path analysis(const std::string& kind) const { return root / "analysis" / kind; }
};

enum class AnalysisKind { ksweep, control, overlap, similarity };
std::string to_string(AnalysisKind k);
AnalysisKind analysis_kind_from_string(std::string_view s);

// Commands. Each writes its stage directory atomically file by file, including
// config.yaml and manifest.json (input digests plus the config fingerprint).
void cmd_gen(const RunConfig& config);
void cmd_train_teacher(const RunConfig& config);
void cmd_extract(const RunConfig& config);
void cmd_train_student(const RunConfig& config);
/// `which` is "teacher" or "student"; `split` is train, validation or test.
void cmd_evaluate(const RunConfig& config, const std::string& which, const std::string& split);
void cmd_analyze(const RunConfig& config, AnalysisKind kind, bool force = false);

/// gen, train-teacher, extract, train-student, then evaluate both models on test.
void run_all(const RunConfig& config);

}  // namespace saldist
