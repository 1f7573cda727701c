// Command-line driver for the distillation pipeline.
//
//   saldist gen           --config run.yaml
//   saldist train-teacher --config run.yaml
//   saldist extract       --config run.yaml
//   saldist train-student --config run.yaml
//   saldist evaluate      --config run.yaml --model student --split test
//   saldist analyze       --config run.yaml --kind ksweep --k-range 0..10 --seeds 5
//   saldist all           --config run.yaml
//
// Exit codes: 0 ok, 1 usage or config, 2 data, 3 numeric failure.

#include <CLI11.hpp>

#include <charconv>
#include <iostream>
#include <optional>

#include "saldist/pipeline.hpp"

namespace {

std::pair<int, int> parse_k_range(const std::string& s) {
  const auto dots = s.find("..");
  if (dots == std::string::npos) throw saldist::ConfigError("--k-range: expected A..B, got '" + s + "'");
  int a = 0, b = 0;
  const auto* lo = s.data();
  const auto* mid = s.data() + dots;
  const auto* hi = s.data() + s.size();
  if (std::from_chars(lo, mid, a).ptr != mid || std::from_chars(mid + 2, hi, b).ptr != hi) {
    throw saldist::ConfigError("--k-range: expected A..B, got '" + s + "'");
  }
  return {a, b};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Saliency-rationale distillation pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  app.add_option("--config", config_path, "YAML run config")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Top-level seed");
  app.add_option("--out", out, "Output root (default: $SALDIST_OUT or ./runs)");

  auto* gen = app.add_subcommand("gen", "Generate the synthetic dataset");
  auto* teacher = app.add_subcommand("train-teacher", "Fine-tune the teacher");
  auto* extract = app.add_subcommand("extract", "Extract top-k rationales from the teacher");
  auto* student = app.add_subcommand("train-student", "Train the student on rationale data");

  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on a split");
  std::string which = "student", split = "test";
  evaluate->add_option("--model", which, "teacher or student")->check(CLI::IsMember({"teacher", "student"}));
  evaluate->add_option("--split", split, "train, validation or test")
      ->check(CLI::IsMember({"train", "validation", "test"}));

  auto* analyze = app.add_subcommand("analyze", "Run an analysis over existing artifacts");
  std::string kind;
  std::string k_range;
  std::optional<int> n_seeds;
  bool force = false;
  std::string incorrect_mode;
  analyze->add_option("--kind", kind, "ksweep, control, overlap or similarity")
      ->required()
      ->check(CLI::IsMember({"ksweep", "control", "overlap", "similarity"}));
  analyze->add_option("--k-range", k_range, "k values A..B for ksweep");
  analyze->add_option("--seeds", n_seeds, "Number of student seeds");
  analyze->add_flag("--force", force, "Accept artifacts from a different config fingerprint");

  auto* all = app.add_subcommand("all", "gen, train-teacher, extract, train-student, overlap and similarity");

  for (auto* sub : {gen, teacher, extract, student, evaluate, analyze, all}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    saldist::RunConfig config = config_path.empty() ? saldist::RunConfig{} : saldist::load_config(config_path);
    if (seed) config.seed = *seed;
    if (!out.empty()) config.out = out;
    if (config.out.empty()) config.out = saldist::default_output_root();
    if (!k_range.empty()) std::tie(config.analysis.k_min, config.analysis.k_max) = parse_k_range(k_range);
    if (n_seeds) config.analysis.n_seeds = *n_seeds;
    // Re-validate after flag overrides.
    config = saldist::config_from_yaml(saldist::config_to_yaml(config));

    if (gen->parsed()) saldist::cmd_gen(config);
    if (teacher->parsed()) saldist::cmd_train_teacher(config);
    if (extract->parsed()) saldist::cmd_extract(config);
    if (student->parsed()) saldist::cmd_train_student(config);
    if (evaluate->parsed()) saldist::cmd_evaluate(config, which, split);
    if (analyze->parsed()) saldist::cmd_analyze(config, saldist::analysis_kind_from_string(kind), force);
    if (all->parsed()) saldist::run_all(config);
    return 0;
  } catch (const saldist::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const saldist::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const saldist::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
