#include "saldist/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "saldist/io.hpp"
#include "saldist/rng.hpp"

namespace saldist {

namespace {

using ojson = nlohmann::ordered_json;

constexpr int kMaxLabelTokens = 8;
constexpr int kMaxConcatenatedTokens = 32;

TokenIds prefixed(int prefix, std::span<const int> ids) {
  TokenIds out;
  out.reserve(ids.size() + 1);
  out.push_back(prefix);
  out.insert(out.end(), ids.begin(), ids.end());
  return out;
}

TokenIds joined_rationale(std::span<const int> rationale) {
  TokenIds out;
  for (std::size_t i = 0; i < rationale.size(); ++i) {
    if (i) out.push_back(token::kSep);
    out.push_back(rationale[i]);
  }
  return out;
}

TokenIds strip_eos(TokenIds ids) {
  auto eos = std::find(ids.begin(), ids.end(), token::kEos);
  ids.erase(eos, ids.end());
  return ids;
}

std::vector<std::string> to_strings(std::span<const int> ids, const Vocabulary& vocab) {
  std::vector<std::string> out;
  for (int id : ids) out.push_back(vocab.token(id));
  return out;
}

TokenIds to_ids(const ojson& arr, const Vocabulary& vocab) {
  TokenIds out;
  for (const auto& s : arr) out.push_back(vocab.id(s.get<std::string>()));
  return out;
}

}  // namespace

std::string to_string(RationaleSource s) {
  switch (s) {
    case RationaleSource::teacher_saliency:
      return "teacher_saliency";
    case RationaleSource::teacher_ig:
      return "teacher_ig";
    case RationaleSource::random:
      return "random";
    case RationaleSource::none:
      return "none";
  }
  return "none";
}

RationaleSource rationale_source_from_string(std::string_view s) {
  if (s == "teacher_saliency") return RationaleSource::teacher_saliency;
  if (s == "teacher_ig") return RationaleSource::teacher_ig;
  if (s == "random") return RationaleSource::random;
  if (s == "none") return RationaleSource::none;
  throw ConfigError("unknown rationale source '" + std::string(s) + "'");
}

RationaleSource source_for(AttributionMethod m) {
  switch (m) {
    case AttributionMethod::saliency:
      return RationaleSource::teacher_saliency;
    case AttributionMethod::integrated_gradients:
      return RationaleSource::teacher_ig;
    case AttributionMethod::random:
      return RationaleSource::random;
  }
  return RationaleSource::none;
}

std::string to_string(TargetMode m) { return m == TargetMode::dual ? "dual" : "concatenated"; }

TargetMode target_mode_from_string(std::string_view s) {
  if (s == "dual") return TargetMode::dual;
  if (s == "concatenated") return TargetMode::concatenated;
  throw ConfigError("unknown target mode '" + std::string(s) + "'");
}

std::string to_string(PromptFormat f) {
  switch (f) {
    case PromptFormat::plain:
      return "plain";
    case PromptFormat::dual:
      return "dual";
    case PromptFormat::concatenated:
      return "concatenated";
  }
  return "plain";
}

PromptFormat prompt_format_from_string(std::string_view s) {
  if (s == "plain") return PromptFormat::plain;
  if (s == "dual") return PromptFormat::dual;
  if (s == "concatenated") return PromptFormat::concatenated;
  throw ConfigError("unknown prompt format '" + std::string(s) + "'");
}

PromptFormat prompt_format_for(TargetMode m) {
  return m == TargetMode::dual ? PromptFormat::dual : PromptFormat::concatenated;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train: learning_rate must be positive");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("train: lambda must be >= 0");
  if (k < 0) throw ConfigError("train: k must be >= 0");
}

std::vector<RationaleExample> build_rationale_dataset(std::span<const Example> examples,
                                                      std::span<const AttributionResult> attributions, int k,
                                                      const AttributionOptions& options) {
  if (k < 1) throw ConfigError("build_rationale_dataset: k must be >= 1");
  if (attributions.size() != examples.size()) throw Error("build_rationale_dataset: one attribution per example");
  std::vector<RationaleExample> out;
  out.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    const RationaleTokens top = options.method == AttributionMethod::random
                                    ? random_attribution(ex, k, options.seed)
                                    : top_k_tokens(attributions[i], ex.input_ids, k);
    out.push_back({ex, top.ids(), top.positions(), source_for(options.method), k});
  }
  return out;
}

std::vector<RationaleExample> build_rationale_dataset(const Seq2SeqModel& teacher, std::span<const Example> examples,
                                                      int k, const AttributionOptions& options) {
  const int vocab = teacher.config().vocab_size;
  for (const auto& ex : examples) {
    for (const auto* ids : {&ex.input_ids, &ex.label_ids}) {
      for (int id : *ids) {
        if (id < 0 || id >= vocab) {
          throw DataError("example " + std::to_string(ex.id) + " uses token id " + std::to_string(id) +
                          " outside the teacher vocabulary of " + std::to_string(vocab));
        }
      }
    }
  }
  return build_rationale_dataset(examples, attribute_all(teacher, examples, options), k, options);
}

std::vector<RationaleExample> without_rationales(std::span<const Example> examples) {
  std::vector<RationaleExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back({ex, {}, {}, RationaleSource::none, 0});
  return out;
}

TokenIds label_prompt(std::span<const int> input_ids, PromptFormat format) {
  if (format == PromptFormat::dual) return prefixed(token::kLabel, input_ids);
  return TokenIds(input_ids.begin(), input_ids.end());
}

RationaleTargets rationale_targets(const RationaleExample& rx, TargetMode mode) {
  const auto& ex = rx.base;
  RationaleTargets t;
  if (mode == TargetMode::dual) {
    t.label = {prefixed(token::kLabel, ex.input_ids), with_eos(ex.label_ids)};
    if (!rx.rationale.empty()) {
      t.rationale = TrainingPair{prefixed(token::kRationale, ex.input_ids), with_eos(joined_rationale(rx.rationale))};
    }
    return t;
  }
  TokenIds target = joined_rationale(rx.rationale);
  for (int i = 0; i < token::kConnectiveLength; ++i) target.push_back(token::kConnectiveFirst + i);
  target.insert(target.end(), ex.label_ids.begin(), ex.label_ids.end());
  t.label = {ex.input_ids, with_eos(target)};
  return t;
}

Tensor combined_loss(const Seq2SeqModel& student, std::span<const RationaleExample> batch, double lambda,
                     TargetMode mode) {
  if (batch.empty()) throw TensorError("combined_loss: empty batch");
  if (!(lambda >= 0.0)) throw ConfigError("combined_loss: lambda must be >= 0");
  std::vector<TrainingPair> label_pairs, rationale_pairs;
  label_pairs.reserve(batch.size());
  for (const auto& rx : batch) {
    auto t = rationale_targets(rx, mode);
    label_pairs.push_back(std::move(t.label));
    if (t.rationale) rationale_pairs.push_back(std::move(*t.rationale));
  }
  Tensor loss = label_loss(student, label_pairs);
  if (mode == TargetMode::dual && lambda != 0.0 && !rationale_pairs.empty()) {
    loss = loss + label_loss(student, rationale_pairs) * lambda;
  }
  return loss;
}

std::optional<TokenIds> predict_label(const Seq2SeqModel& model, std::span<const int> input_ids,
                                      PromptFormat format) {
  if (format != PromptFormat::concatenated) {
    return strip_eos(model.generate(label_prompt(input_ids, format), std::min(kMaxLabelTokens, model.config().max_seq_len)));
  }
  const TokenIds out =
      strip_eos(model.generate(input_ids, std::min(kMaxConcatenatedTokens, model.config().max_seq_len)));
  const TokenIds connective = Vocabulary().connective();
  const auto it = std::find_end(out.begin(), out.end(), connective.begin(), connective.end());
  if (it == out.end()) return std::nullopt;
  return TokenIds(it + static_cast<std::ptrdiff_t>(connective.size()), out.end());
}

TokenIds predict_rationale(const Seq2SeqModel& model, std::span<const int> input_ids, PromptFormat format) {
  TokenIds raw;
  if (format == PromptFormat::dual) {
    raw = strip_eos(model.generate(prefixed(token::kRationale, input_ids), std::min(kMaxConcatenatedTokens, model.config().max_seq_len)));
  } else if (format == PromptFormat::concatenated) {
    raw = strip_eos(model.generate(input_ids, std::min(kMaxConcatenatedTokens, model.config().max_seq_len)));
    const TokenIds connective = Vocabulary().connective();
    raw.erase(std::search(raw.begin(), raw.end(), connective.begin(), connective.end()), raw.end());
  }
  std::erase(raw, token::kSep);
  return raw;
}

double label_accuracy(const Seq2SeqModel& model, std::span<const Example> examples, PromptFormat format) {
  if (examples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& ex : examples) {
    const auto label = predict_label(model, ex.input_ids, format);
    if (label && *label == ex.label_ids) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

namespace {

template <typename LossFn>
TrainHistory sgd_loop(Seq2SeqModel& model, std::size_t n, const TrainConfig& config, LossFn loss_for,
                      std::span<const Example> validation, PromptFormat format) {
  config.validate();
  if (n == 0) throw DataError("train: no training examples");
  Rng rng(config.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  TrainHistory history;
  std::vector<std::size_t> batch;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const auto stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      batch.assign(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(stop));
      model.zero_grad();
      double value = 0.0;
      try {
        const Tensor loss = loss_for(batch);
        value = loss.item();
        backward(loss);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(history.steps) + ": " + e.what());
      }
      for (auto& [name, param] : model.parameters()) {
        auto v = param.mutable_values();
        const auto g = param.grad();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= config.learning_rate * g[i];
      }
      total += value;
      ++batches;
      ++history.steps;
    }
    EpochRecord record{epoch, total / static_cast<double>(batches), std::nullopt};
    if (!std::isfinite(record.mean_loss)) throw NumericError("training diverged: non-finite epoch loss");
    if (!validation.empty()) record.validation_accuracy = label_accuracy(model, validation, format);
    history.epochs.push_back(record);
  }
  model.zero_grad();
  return history;
}

}  // namespace

TrainHistory train(Seq2SeqModel& student, std::span<const RationaleExample> data, const TrainConfig& config,
                   std::span<const Example> validation, PromptFormat format) {
  std::vector<RationaleExample> batch;
  auto loss_for = [&](std::span<const std::size_t> idx) {
    batch.clear();
    for (auto i : idx) batch.push_back(data[i]);
    return combined_loss(student, batch, config.lambda, config.target_mode);
  };
  return sgd_loop(student, data.size(), config, loss_for, validation, format);
}

TrainHistory train_plain(Seq2SeqModel& model, std::span<const Example> data, const TrainConfig& config,
                         std::span<const Example> validation) {
  std::vector<TrainingPair> pairs;
  auto loss_for = [&](std::span<const std::size_t> idx) {
    pairs.clear();
    for (auto i : idx) pairs.push_back({data[i].input_ids, with_eos(data[i].label_ids)});
    return label_loss(model, pairs);
  };
  return sgd_loop(model, data.size(), config, loss_for, validation, PromptFormat::plain);
}

std::string rationale_to_json(const RationaleExample& rx, const Vocabulary& vocab) {
  ojson j;
  j["id"] = rx.base.id;
  j["input_tokens"] = to_strings(rx.base.input_ids, vocab);
  j["label_tokens"] = to_strings(rx.base.label_ids, vocab);
  if (rx.base.choices) {
    auto choices = ojson::array();
    for (const auto& c : *rx.base.choices) choices.push_back(to_strings(c, vocab));
    j["choices"] = std::move(choices);
  }
  j["rationale_tokens"] = to_strings(rx.rationale, vocab);
  j["rationale_positions"] = rx.positions;
  j["source"] = to_string(rx.source);
  j["k"] = rx.k;
  if (rx.base.planted_positions) j["planted_positions"] = *rx.base.planted_positions;
  return j.dump();
}

RationaleExample rationale_from_json(std::string_view line, const Vocabulary& vocab) {
  const ojson j = ojson::parse(line);
  RationaleExample rx;
  rx.base.id = j.at("id").get<std::int64_t>();
  rx.base.input_ids = to_ids(j.at("input_tokens"), vocab);
  rx.base.label_ids = to_ids(j.at("label_tokens"), vocab);
  if (j.contains("choices")) {
    std::vector<TokenIds> choices;
    for (const auto& c : j["choices"]) choices.push_back(to_ids(c, vocab));
    rx.base.choices = std::move(choices);
  }
  rx.rationale = to_ids(j.at("rationale_tokens"), vocab);
  rx.positions = j.at("rationale_positions").get<std::vector<int>>();
  rx.source = rationale_source_from_string(j.at("source").get<std::string>());
  rx.k = j.at("k").get<int>();
  if (j.contains("planted_positions")) rx.base.planted_positions = j["planted_positions"].get<std::vector<int>>();
  if (rx.rationale.size() != rx.positions.size()) throw DataError("rationale tokens and positions differ in length");
  for (std::size_t i = 0; i < rx.positions.size(); ++i) {
    const int p = rx.positions[i];
    if (p < 0 || static_cast<std::size_t>(p) >= rx.base.input_ids.size() ||
        rx.base.input_ids[static_cast<std::size_t>(p)] != rx.rationale[i]) {
      throw DataError("rationale token does not match its input position");
    }
  }
  return rx;
}

void write_rationales(const std::filesystem::path& path, std::span<const RationaleExample> data,
                      const Vocabulary& vocab) {
  std::string out;
  for (const auto& rx : data) {
    out += rationale_to_json(rx, vocab);
    out.push_back('\n');
  }
  atomic_write(path, out);
}

std::vector<RationaleExample> read_rationales(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw DataError("missing input: " + path.string());
  std::vector<RationaleExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(rationale_from_json(line, vocab));
    } catch (const std::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    }
  }
  return out;
}

}  // namespace saldist
