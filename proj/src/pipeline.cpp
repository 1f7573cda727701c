#include "saldist/pipeline.hpp"

#include <yaml-cpp/yaml.h>

#include <cstdlib>
#include <functional>
#include <map>
#include <sstream>

#include "json.hpp"
#include "saldist/io.hpp"
#include "saldist/rng.hpp"

namespace saldist {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

// --- config reading ---------------------------------------------------------

using Handler = std::function<void(const YAML::Node&, const std::string&)>;

void read_map(const YAML::Node& node, const std::string& prefix, const std::map<std::string, Handler>& fields) {
  if (!node.IsMap()) throw ConfigError("config key '" + prefix + "': expected a mapping");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    const auto full = prefix.empty() ? key : prefix + "." + key;
    const auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("unknown config key '" + full + "'");
    it->second(kv.second, full);
  }
}

template <typename T>
T scalar(const YAML::Node& node, const std::string& key, const char* what) {
  try {
    if (!node.IsScalar()) throw YAML::Exception(YAML::Mark::null_mark(), "not a scalar");
    return node.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError("config key '" + key + "': expected " + what);
  }
}

Handler set_int(int& field) {
  return [&field](const YAML::Node& n, const std::string& key) { field = scalar<int>(n, key, "an integer"); };
}
Handler set_size(std::size_t& field) {
  return [&field](const YAML::Node& n, const std::string& key) {
    const auto v = scalar<long long>(n, key, "a non-negative integer");
    if (v < 0) throw ConfigError("config key '" + key + "': expected a non-negative integer");
    field = static_cast<std::size_t>(v);
  };
}
Handler set_u64(std::uint64_t& field) {
  return [&field](const YAML::Node& n, const std::string& key) {
    field = scalar<std::uint64_t>(n, key, "an unsigned integer");
  };
}
Handler set_double(double& field) {
  return [&field](const YAML::Node& n, const std::string& key) { field = scalar<double>(n, key, "a number"); };
}
template <typename E, typename Parse>
Handler set_enum(E& field, Parse parse) {
  return [&field, parse](const YAML::Node& n, const std::string& key) {
    const auto s = scalar<std::string>(n, key, "a string");
    try {
      field = parse(s);
    } catch (const ConfigError& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  };
}

Handler model_fields(ModelConfig& m) {
  return [&m](const YAML::Node& n, const std::string& key) {
    read_map(n, key,
             {{"d_model", set_int(m.d_model)},
              {"n_heads", set_int(m.n_heads)},
              {"n_layers_enc", set_int(m.n_layers_enc)},
              {"n_layers_dec", set_int(m.n_layers_dec)},
              {"d_ff", set_int(m.d_ff)},
              {"max_seq_len", set_int(m.max_seq_len)}});
  };
}

std::map<std::string, Handler> train_fields(TrainConfig& t) {
  return {{"learning_rate", set_double(t.learning_rate)},
          {"epochs", set_int(t.epochs)},
          {"batch_size", set_int(t.batch_size)}};
}

IncorrectOverlapMode incorrect_mode_from_string(std::string_view s) {
  if (s == "both_wrong") return IncorrectOverlapMode::both_wrong;
  if (s == "a_wrong") return IncorrectOverlapMode::a_wrong;
  throw ConfigError("unknown incorrect-overlap mode '" + std::string(s) + "'");
}

std::string to_string(IncorrectOverlapMode m) { return m == IncorrectOverlapMode::both_wrong ? "both_wrong" : "a_wrong"; }

// --- config writing ---------------------------------------------------------

void emit_model(YAML::Emitter& e, const ModelConfig& m) {
  e << YAML::BeginMap;
  e << YAML::Key << "d_model" << YAML::Value << m.d_model;
  e << YAML::Key << "n_heads" << YAML::Value << m.n_heads;
  e << YAML::Key << "n_layers_enc" << YAML::Value << m.n_layers_enc;
  e << YAML::Key << "n_layers_dec" << YAML::Value << m.n_layers_dec;
  e << YAML::Key << "d_ff" << YAML::Value << m.d_ff;
  e << YAML::Key << "max_seq_len" << YAML::Value << m.max_seq_len;
  e << YAML::EndMap;
}

void emit_train_common(YAML::Emitter& e, const TrainConfig& t) {
  e << YAML::Key << "learning_rate" << YAML::Value << t.learning_rate;
  e << YAML::Key << "epochs" << YAML::Value << t.epochs;
  e << YAML::Key << "batch_size" << YAML::Value << t.batch_size;
}

std::string emit(const RunConfig& c, bool with_run_fields) {
  YAML::Emitter e;
  e.SetDoublePrecision(17);
  e << YAML::BeginMap;
  e << YAML::Key << "seed" << YAML::Value << c.seed;
  if (with_run_fields && !c.out.empty()) e << YAML::Key << "out" << YAML::Value << c.out.string();

  e << YAML::Key << "task" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "kind" << YAML::Value << to_string(c.task.kind);
  e << YAML::Key << "train" << YAML::Value << c.task.splits.train;
  e << YAML::Key << "validation" << YAML::Value << c.task.splits.validation;
  e << YAML::Key << "test" << YAML::Value << c.task.splits.test;
  e << YAML::Key << "seq_len" << YAML::Value << c.task.seq_len;
  e << YAML::Key << "vocab_size" << YAML::Value << c.task.vocab_size;
  e << YAML::Key << "n_labels" << YAML::Value << c.task.n_labels;
  e << YAML::Key << "markers_per_label" << YAML::Value << c.task.markers_per_label;
  e << YAML::Key << "n_choices" << YAML::Value << c.task.n_choices;
  e << YAML::Key << "answer_pool" << YAML::Value << c.task.answer_pool;
  e << YAML::EndMap;

  e << YAML::Key << "teacher" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "model" << YAML::Value;
  emit_model(e, c.teacher_model);
  e << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
  emit_train_common(e, c.teacher_train);
  e << YAML::EndMap << YAML::EndMap;

  e << YAML::Key << "student" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "model" << YAML::Value;
  emit_model(e, c.student_model);
  e << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
  emit_train_common(e, c.student_train);
  e << YAML::Key << "lambda" << YAML::Value << c.student_train.lambda;
  e << YAML::Key << "k" << YAML::Value << c.student_train.k;
  e << YAML::Key << "target_mode" << YAML::Value << to_string(c.student_train.target_mode);
  e << YAML::EndMap;
  e << YAML::Key << "rationale_source" << YAML::Value << to_string(c.rationale_source);
  e << YAML::EndMap;

  e << YAML::Key << "attribution" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "ig_steps" << YAML::Value << c.attribution.ig_steps;
  e << YAML::Key << "ig_baseline" << YAML::Value << to_string(c.attribution.ig_baseline);
  e << YAML::EndMap;

  if (with_run_fields) {
    e << YAML::Key << "analysis" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "k_min" << YAML::Value << c.analysis.k_min;
    e << YAML::Key << "k_max" << YAML::Value << c.analysis.k_max;
    e << YAML::Key << "n_seeds" << YAML::Value << c.analysis.n_seeds;
    e << YAML::Key << "incorrect_mode" << YAML::Value << to_string(c.analysis.incorrect_mode);
    e << YAML::EndMap;
  }
  e << YAML::EndMap;
  if (!e.good()) throw ConfigError("config emit failed: " + e.GetLastError());
  return std::string(e.c_str()) + "\n";
}

void validate(const RunConfig& c) {
  const auto& t = c.task;
  if (t.splits.train == 0 || t.splits.test == 0) throw ConfigError("config key 'task.train': splits must be non-empty");
  if (t.seq_len < 2) throw ConfigError("config key 'task.seq_len': must be >= 2");
  ModelConfig probe = c.teacher_model;
  probe.vocab_size = std::max(t.vocab_size, token::kReservedCount);
  probe.validate();
  probe = c.student_model;
  probe.vocab_size = std::max(t.vocab_size, token::kReservedCount);
  probe.validate();
  c.teacher_train.validate();
  c.student_train.validate();
  if (c.attribution.ig_steps < 2) throw ConfigError("config key 'attribution.ig_steps': must be >= 2");
  if (c.analysis.k_min < 0 || c.analysis.k_max < c.analysis.k_min) {
    throw ConfigError("config key 'analysis.k_min': need 0 <= k_min <= k_max");
  }
  if (c.analysis.n_seeds < 1) throw ConfigError("config key 'analysis.n_seeds': must be >= 1");
}

// --- artifacts --------------------------------------------------------------

Dataset generate(const RunConfig& c) {
  if (c.task.kind == TaskKind::marker_classification) {
    MarkerTaskParams p;
    p.splits = c.task.splits;
    p.n_labels = c.task.n_labels;
    p.seq_len = c.task.seq_len;
    p.vocab_size = c.task.vocab_size;
    p.markers_per_label = c.task.markers_per_label;
    p.seed = c.seed;
    return gen_marker_classification(p);
  }
  ChoiceTaskParams p;
  p.splits = c.task.splits;
  p.n_choices = c.task.n_choices;
  p.seq_len = c.task.seq_len;
  p.vocab_size = c.task.vocab_size;
  p.answer_pool = c.task.answer_pool;
  p.seed = c.seed;
  return gen_choice_selection(p);
}

std::string relative_to(const fs::path& p, const fs::path& root) {
  return fs::relative(p, root).generic_string();
}

/// Writes config.yaml and, last, manifest.json into `dir`.
void finish_stage(const RunConfig& c, const fs::path& dir, const std::string& command,
                  const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs) {
  const RunLayout layout{c.out};
  // Stored without the output root so a run directory can be moved or compared.
  RunConfig stored = c;
  stored.out.clear();
  atomic_write(dir / "config.yaml", config_to_yaml(stored));
  ojson m;
  m["command"] = command;
  m["config_fingerprint"] = config_fingerprint(c);
  ojson in = ojson::object();
  for (const auto& p : inputs) in[relative_to(p, layout.root)] = file_digest(p);
  m["inputs"] = std::move(in);
  ojson out = ojson::object();
  for (const auto& p : outputs) out[relative_to(p, layout.root)] = file_digest(p);
  m["outputs"] = std::move(out);
  atomic_write(dir / "manifest.json", m.dump(2) + "\n");
}

std::vector<fs::path> dataset_files(const fs::path& dir) {
  return {dir / "vocab.txt", dir / "meta.json", dir / "train.jsonl", dir / "validation.jsonl", dir / "test.jsonl"};
}

std::string history_jsonl(const TrainHistory& h, const std::string& fingerprint, std::uint64_t seed) {
  std::string out;
  const std::vector<std::uint64_t> seeds{seed};
  for (const auto& e : h.epochs) {
    ojson j = ojson::parse(metric_record("train_loss", e.mean_loss, std::nullopt, fingerprint, seeds));
    j["epoch"] = e.epoch;
    j["validation_accuracy"] = e.validation_accuracy ? ojson(*e.validation_accuracy) : ojson(nullptr);
    out += j.dump() + "\n";
  }
  return out;
}

AttributionOptions options_for(const RunConfig& c, RationaleSource source) {
  AttributionOptions o = c.attribution;
  switch (source) {
    case RationaleSource::teacher_ig:
      o.method = AttributionMethod::integrated_gradients;
      break;
    case RationaleSource::random:
      o.method = AttributionMethod::random;
      o.seed = random_rationale_seed(c);
      break;
    default:
      o.method = AttributionMethod::saliency;
  }
  return o;
}

/// Attribution method the analyses use for the teacher condition.
AttributionOptions teacher_options(const RunConfig& c) {
  return options_for(c, c.rationale_source == RationaleSource::teacher_ig ? RationaleSource::teacher_ig
                                                                          : RationaleSource::teacher_saliency);
}

StudentSetup student_setup(const RunConfig& c) { return {c.student_model, c.student_train}; }

CheckpointMetadata model_metadata(const RunConfig& c, const std::string& role, PromptFormat format) {
  return {{"role", role}, {"prompt_format", to_string(format)}, {"config_fingerprint", config_fingerprint(c)}};
}

PromptFormat checkpoint_format(const LoadedCheckpoint& ck, const fs::path& path) {
  const auto it = ck.metadata.find("prompt_format");
  if (it == ck.metadata.end()) throw DataError(path.string() + ": checkpoint has no prompt_format metadata");
  return prompt_format_from_string(it->second);
}

void require_fingerprint(const RunConfig& c, const fs::path& stage_dir, bool force) {
  const auto manifest_path = stage_dir / "manifest.json";
  ojson m;
  try {
    m = ojson::parse(read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest_path.string() + ": malformed manifest: " + e.what());
  }
  const auto found = m.value("config_fingerprint", std::string{});
  const auto expected = config_fingerprint(c);
  if (found != expected && !force) {
    throw ConfigError("config fingerprint mismatch for " + stage_dir.string() + " (artifact " + found +
                      ", current config " + expected + "); rerun that stage or pass --force");
  }
}

std::string rate_record(const std::string& metric, const std::optional<Rate>& rate, const std::string& fingerprint,
                        std::span<const std::uint64_t> seeds) {
  ojson j = ojson::parse(metric_record(metric, std::nullopt, rate, fingerprint, seeds));
  if (!rate) j["absent"] = true;
  return j.dump() + "\n";
}

std::string value_record(const std::string& metric, double value, const std::string& fingerprint,
                         std::span<const std::uint64_t> seeds) {
  return metric_record(metric, value, std::nullopt, fingerprint, seeds) + "\n";
}

}  // namespace

RunConfig::RunConfig() {
  student_model.d_model = 32;
  student_model.n_heads = 4;
  student_model.n_layers_enc = 1;
  student_model.n_layers_dec = 1;
  student_model.d_ff = 128;
  teacher_train.epochs = 6;
  student_train.epochs = 5;
}

std::string config_to_yaml(const RunConfig& config) { return emit(config, true); }

RunConfig config_from_yaml(std::string_view text) {
  RunConfig c;
  YAML::Node root;
  try {
    root = YAML::Load(std::string(text));
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  if (root.IsNull()) return c;
  std::string out;
  auto teacher_train = train_fields(c.teacher_train);
  auto student_train = train_fields(c.student_train);
  student_train["lambda"] = set_double(c.student_train.lambda);
  student_train["k"] = set_int(c.student_train.k);
  student_train["target_mode"] = set_enum(c.student_train.target_mode, target_mode_from_string);

  read_map(
      root, "",
      {{"seed", set_u64(c.seed)},
       {"out",
        [&](const YAML::Node& n, const std::string& key) { c.out = scalar<std::string>(n, key, "a path"); }},
       {"task",
        [&](const YAML::Node& n, const std::string& key) {
          read_map(n, key,
                   {{"kind", set_enum(c.task.kind, task_kind_from_string)},
                    {"train", set_size(c.task.splits.train)},
                    {"validation", set_size(c.task.splits.validation)},
                    {"test", set_size(c.task.splits.test)},
                    {"seq_len", set_int(c.task.seq_len)},
                    {"vocab_size", set_int(c.task.vocab_size)},
                    {"n_labels", set_int(c.task.n_labels)},
                    {"markers_per_label", set_int(c.task.markers_per_label)},
                    {"n_choices", set_int(c.task.n_choices)},
                    {"answer_pool", set_int(c.task.answer_pool)}});
        }},
       {"teacher",
        [&](const YAML::Node& n, const std::string& key) {
          read_map(n, key,
                   {{"model", model_fields(c.teacher_model)},
                    {"train", [&](const YAML::Node& t, const std::string& k) { read_map(t, k, teacher_train); }}});
        }},
       {"student",
        [&](const YAML::Node& n, const std::string& key) {
          read_map(n, key,
                   {{"model", model_fields(c.student_model)},
                    {"train", [&](const YAML::Node& t, const std::string& k) { read_map(t, k, student_train); }},
                    {"rationale_source", set_enum(c.rationale_source, rationale_source_from_string)}});
        }},
       {"attribution",
        [&](const YAML::Node& n, const std::string& key) {
          read_map(n, key,
                   {{"ig_steps", set_int(c.attribution.ig_steps)},
                    {"ig_baseline", set_enum(c.attribution.ig_baseline, ig_baseline_from_string)}});
        }},
       {"analysis", [&](const YAML::Node& n, const std::string& key) {
          read_map(n, key,
                   {{"k_min", set_int(c.analysis.k_min)},
                    {"k_max", set_int(c.analysis.k_max)},
                    {"n_seeds", set_int(c.analysis.n_seeds)},
                    {"incorrect_mode", set_enum(c.analysis.incorrect_mode, incorrect_mode_from_string)}});
        }}});
  validate(c);
  return c;
}

RunConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("missing config file: " + path.string());
  return config_from_yaml(read_file(path));
}

std::string config_fingerprint(const RunConfig& config) { return sha256_hex(emit(config, false)).substr(0, 16); }

fs::path default_output_root() {
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
  return "runs";
}

std::vector<std::uint64_t> analysis_seeds(const RunConfig& config) {
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < config.analysis.n_seeds; ++i) {
    seeds.push_back(Rng::derive(config.seed, 1000 + static_cast<std::uint64_t>(i)).next());
  }
  return seeds;
}

std::uint64_t teacher_init_seed(const RunConfig& c) { return Rng::derive(c.seed, 1).next(); }
std::uint64_t teacher_train_seed(const RunConfig& c) { return Rng::derive(c.seed, 2).next(); }
std::uint64_t student_init_seed(const RunConfig& c) { return Rng::derive(c.seed, 3).next(); }
std::uint64_t student_train_seed(const RunConfig& c) { return Rng::derive(c.seed, 4).next(); }
std::uint64_t random_rationale_seed(const RunConfig& c) { return Rng::derive(c.seed, 5).next(); }

std::string to_string(AnalysisKind k) {
  switch (k) {
    case AnalysisKind::ksweep:
      return "ksweep";
    case AnalysisKind::control:
      return "control";
    case AnalysisKind::overlap:
      return "overlap";
    case AnalysisKind::similarity:
      return "similarity";
  }
  return "unknown";
}

AnalysisKind analysis_kind_from_string(std::string_view s) {
  if (s == "ksweep") return AnalysisKind::ksweep;
  if (s == "control") return AnalysisKind::control;
  if (s == "overlap") return AnalysisKind::overlap;
  if (s == "similarity") return AnalysisKind::similarity;
  throw ConfigError("unknown analysis kind '" + std::string(s) + "'");
}

void cmd_gen(const RunConfig& config) {
  const RunLayout layout{config.out};
  const Dataset ds = generate(config);
  write_dataset(layout.data(), ds);
  finish_stage(config, layout.data(), "gen", {}, dataset_files(layout.data()));
}

void cmd_train_teacher(const RunConfig& config) {
  const RunLayout layout{config.out};
  const Dataset ds = read_dataset(layout.data());
  ModelConfig mc = config.teacher_model;
  mc.vocab_size = static_cast<int>(ds.vocab.size());
  mc.seed = teacher_init_seed(config);
  TrainConfig tc = config.teacher_train;
  tc.seed = teacher_train_seed(config);

  Seq2SeqModel teacher(mc);
  const auto history = train_plain(teacher, ds.train, tc, ds.validation);
  const auto fp = config_fingerprint(config);
  const auto dir = layout.teacher();
  save_checkpoint(dir / "model.ckpt", teacher, model_metadata(config, "teacher", PromptFormat::plain));

  std::string hist = history_jsonl(history, fp, tc.seed);
  const auto train_report = evaluate(teacher, ds.train, PromptFormat::plain, "train", "teacher");
  hist += rate_record("train_accuracy", train_report.correct, fp, std::vector<std::uint64_t>{tc.seed});
  atomic_write(dir / "history.jsonl", hist);
  const auto test_report = evaluate(teacher, ds.test, PromptFormat::plain, "test", "teacher");
  atomic_write(dir / "eval_test.jsonl", eval_report_to_jsonl(test_report, ds.vocab, fp));
  finish_stage(config, dir, "train-teacher", dataset_files(layout.data()),
               {dir / "model.ckpt", dir / "history.jsonl", dir / "eval_test.jsonl"});
}

void cmd_extract(const RunConfig& config) {
  const RunLayout layout{config.out};
  const Dataset ds = read_dataset(layout.data());
  const auto teacher_path = layout.teacher() / "model.ckpt";
  const auto dir = layout.rationales();
  const int k = config.student_train.k;
  const bool none = config.rationale_source == RationaleSource::none || k == 0;
  std::vector<fs::path> outputs;

  std::optional<LoadedCheckpoint> teacher;
  if (!none) teacher = load_checkpoint(teacher_path);
  const auto options = options_for(config, config.rationale_source);

  for (const auto* split : {"train", "test"}) {
    const auto& examples = ds.split(split);
    if (none) {
      write_rationales(dir / (std::string(split) + ".jsonl"), without_rationales(examples), ds.vocab);
      outputs.push_back(dir / (std::string(split) + ".jsonl"));
      continue;
    }
    const auto attributions = attribute_all(teacher->model, examples, options);
    const auto data = build_rationale_dataset(examples, attributions, k, options);
    write_rationales(dir / (std::string(split) + ".jsonl"), data, ds.vocab);
    std::string dump;
    for (std::size_t i = 0; i < data.size(); ++i) {
      RationaleTokens top;
      for (std::size_t j = 0; j < data[i].positions.size(); ++j) {
        const auto p = data[i].positions[j];
        top.tokens.push_back({p, data[i].rationale[j], attributions[i].scores[static_cast<std::size_t>(p)]});
      }
      dump += attribution_to_json(attributions[i], top, ds.vocab) + "\n";
    }
    atomic_write(dir / (std::string(split) + "_attributions.jsonl"), dump);
    outputs.push_back(dir / (std::string(split) + ".jsonl"));
    outputs.push_back(dir / (std::string(split) + "_attributions.jsonl"));
  }
  auto inputs = dataset_files(layout.data());
  if (!none) inputs.push_back(teacher_path);
  finish_stage(config, dir, "extract", inputs, outputs);
}

void cmd_train_student(const RunConfig& config) {
  const RunLayout layout{config.out};
  const Dataset ds = read_dataset(layout.data());
  const auto rationale_path = layout.rationales() / "train.jsonl";
  const auto data = read_rationales(rationale_path, ds.vocab);

  ModelConfig mc = config.student_model;
  mc.vocab_size = static_cast<int>(ds.vocab.size());
  mc.seed = student_init_seed(config);
  TrainConfig tc = config.student_train;
  tc.seed = student_train_seed(config);
  const auto format = prompt_format_for(tc.target_mode);

  Seq2SeqModel student(mc);
  const auto history = train(student, data, tc, ds.validation, format);
  const auto fp = config_fingerprint(config);
  const auto dir = layout.student();
  save_checkpoint(dir / "model.ckpt", student, model_metadata(config, "student", format));
  atomic_write(dir / "history.jsonl", history_jsonl(history, fp, tc.seed));
  const auto report = evaluate(student, ds.test, format, "test", "student", true);
  atomic_write(dir / "eval_test.jsonl", eval_report_to_jsonl(report, ds.vocab, fp));
  auto inputs = dataset_files(layout.data());
  inputs.push_back(rationale_path);
  finish_stage(config, dir, "train-student", inputs,
               {dir / "model.ckpt", dir / "history.jsonl", dir / "eval_test.jsonl"});
}

void cmd_evaluate(const RunConfig& config, const std::string& which, const std::string& split) {
  if (which != "teacher" && which != "student") {
    throw ConfigError("evaluate: model must be 'teacher' or 'student', got '" + which + "'");
  }
  const RunLayout layout{config.out};
  const Dataset ds = read_dataset(layout.data());
  const auto ck_path = (which == "teacher" ? layout.teacher() : layout.student()) / "model.ckpt";
  const auto ck = load_checkpoint(ck_path);
  const auto format = checkpoint_format(ck, ck_path);
  const auto report = evaluate(ck.model, ds.split(split), format, split, which, format != PromptFormat::plain);
  const auto dir = layout.evaluation(which + "_" + split);
  atomic_write(dir / "report.jsonl", eval_report_to_jsonl(report, ds.vocab, config_fingerprint(config)));
  auto inputs = dataset_files(layout.data());
  inputs.push_back(ck_path);
  finish_stage(config, dir, "evaluate", inputs, {dir / "report.jsonl"});
}

void cmd_analyze(const RunConfig& config, AnalysisKind kind, bool force) {
  const RunLayout layout{config.out};
  const auto fp = config_fingerprint(config);
  const auto dir = layout.analysis(to_string(kind));
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs{dir / "report.jsonl"};
  std::string report;

  switch (kind) {
    case AnalysisKind::ksweep:
    case AnalysisKind::control: {
      require_fingerprint(config, layout.data(), force);
      require_fingerprint(config, layout.teacher(), force);
      const Dataset ds = read_dataset(layout.data());
      const auto teacher_path = layout.teacher() / "model.ckpt";
      const auto teacher = load_checkpoint(teacher_path);
      inputs = dataset_files(layout.data());
      inputs.push_back(teacher_path);
      const auto seeds = analysis_seeds(config);
      if (kind == AnalysisKind::ksweep) {
        std::vector<int> ks;
        for (int k = config.analysis.k_min; k <= config.analysis.k_max; ++k) ks.push_back(k);
        const auto points = k_sweep(teacher.model, ds, student_setup(config), ks, seeds, teacher_options(config));
        for (const auto& p : points) {
          ojson j = ojson::parse(metric_record("accuracy@k=" + std::to_string(p.k), p.mean, std::nullopt, fp, seeds));
          j["k"] = p.k;
          j["sd"] = p.sd;
          j["per_seed"] = p.accuracies;
          report += j.dump() + "\n";
        }
        atomic_write(dir / "ksweep.dat", ksweep_plot_data(points));
        outputs.push_back(dir / "ksweep.dat");
      } else {
        const auto r = control_comparison(teacher.model, ds, student_setup(config), seeds, teacher_options(config));
        for (const auto* c : {&r.teacher, &r.none, &r.random}) {
          ojson j = ojson::parse(metric_record("accuracy." + c->name, c->mean, std::nullopt, fp, seeds));
          j["sd"] = sample_sd(c->accuracies);
          j["per_seed"] = c->accuracies;
          report += j.dump() + "\n";
        }
        ojson j = ojson::parse(metric_record("ordering_holds", r.ordering_holds ? 1.0 : 0.0, std::nullopt, fp, seeds));
        j["observed_ordering"] = r.observed_ordering;
        report += j.dump() + "\n";
      }
      break;
    }
    case AnalysisKind::overlap: {
      require_fingerprint(config, layout.data(), force);
      require_fingerprint(config, layout.rationales(), force);
      const Dataset ds = read_dataset(layout.data());
      const auto path = layout.rationales() / "test.jsonl";
      const auto data = read_rationales(path, ds.vocab);
      inputs = {layout.data() / "vocab.txt", path};
      const auto r = overlap_with_truth(data);
      const std::vector<std::uint64_t> seeds{config.seed};
      report += rate_record("answer_overlap", r.answer_overlap, fp, seeds);
      report += rate_record("planted_overlap", r.planted_overlap, fp, seeds);
      report += rate_record("truth_overlap", r.truth_overlap, fp, seeds);
      const int k = config.student_train.k;
      if (k >= 1) {
        if (const auto null = random_planted_overlap(ds.test, k)) {
          report += value_record("random_planted_overlap", *null, fp, seeds);
        }
      }
      break;
    }
    case AnalysisKind::similarity: {
      const auto teacher_path = layout.teacher() / "eval_test.jsonl";
      const auto student_path = layout.student() / "eval_test.jsonl";
      const Vocabulary vocab = read_vocab(layout.data() / "vocab.txt");
      const auto teacher_text = read_file(teacher_path);
      const auto student_text = read_file(student_path);
      for (const auto& [path, text] : {std::pair{teacher_path, &teacher_text}, std::pair{student_path, &student_text}}) {
        if (report_fingerprint(*text) != fp && !force) {
          throw ConfigError("config fingerprint mismatch for " + path.string() + "; rerun that stage or pass --force");
        }
      }
      inputs = {layout.data() / "vocab.txt", teacher_path, student_path};
      const auto a = eval_report_from_jsonl(teacher_text, vocab);
      const auto b = eval_report_from_jsonl(student_text, vocab);
      const auto r = prediction_similarity(a, b, config.analysis.incorrect_mode);
      const std::vector<std::uint64_t> seeds{config.seed};
      report += rate_record("correct_overlap", r.correct_overlap, fp, seeds);
      ojson j = ojson::parse(rate_record("incorrect_overlap", r.incorrect_overlap, fp, seeds));
      j["incorrect_mode"] = to_string(config.analysis.incorrect_mode);
      report += j.dump() + "\n";
      break;
    }
  }
  atomic_write(dir / "report.jsonl", report);
  finish_stage(config, dir, "analyze " + to_string(kind), inputs, outputs);
}

void run_all(const RunConfig& config) {
  cmd_gen(config);
  cmd_train_teacher(config);
  cmd_extract(config);
  cmd_train_student(config);
  cmd_analyze(config, AnalysisKind::overlap);
  cmd_analyze(config, AnalysisKind::similarity);
}

}  // namespace saldist
