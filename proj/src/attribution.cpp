#include "saldist/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "saldist/rng.hpp"

namespace saldist {

namespace {

const Seq2SeqModel& ensure_frozen(const Seq2SeqModel& model, std::optional<Seq2SeqModel>& storage) {
  const bool frozen = std::none_of(model.parameters().begin(), model.parameters().end(),
                                   [](const auto& p) { return p.second.requires_grad(); });
  if (frozen) return model;
  storage.emplace(model.frozen());
  return *storage;
}

AttributionResult saliency_with(const Seq2SeqModel& frozen, std::span<const int> input_ids,
                                std::span<const int> target_ids, std::int64_t example_id) {
  const Tensor embeddings = frozen.embed(input_ids);
  AttributionResult r;
  r.example_id = example_id;
  r.method = AttributionMethod::saliency;
  r.excluded = excluded_positions(input_ids);
  r.scores = saliency_scores(
      [&](const Tensor& e) { return frozen.forward_from_embeddings(e, target_ids, input_ids); }, embeddings,
      target_ids);
  for (std::size_t i = 0; i < r.scores.size(); ++i) {
    if (r.excluded[i]) r.scores[i] = 0.0;
  }
  return r;
}

AttributionResult ig_with(const Seq2SeqModel& frozen, const Example& example, IgBaseline baseline, int steps) {
  const TokenIds target = with_eos(example.label_ids);
  const Tensor input = frozen.embed(example.input_ids);
  const Tensor base = ig_baseline(frozen, example.input_ids.size(), baseline);
  auto f = [&](const Tensor& e) { return gold_log_likelihood(frozen, e, example.input_ids, target); };

  AttributionResult r;
  r.example_id = example.id;
  r.method = AttributionMethod::integrated_gradients;
  r.excluded = excluded_positions(example.input_ids);
  r.signed_attributions = integrated_gradients(f, input, base, steps);
  const auto d = input.cols();
  r.scores.assign(example.input_ids.size(), 0.0);
  for (std::size_t i = 0; i < example.input_ids.size(); ++i) {
    if (r.excluded[i]) continue;
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += r.signed_attributions[i * d + c];
    r.scores[i] = std::abs(s);
  }
  return r;
}

}  // namespace

std::string to_string(AttributionMethod m) {
  switch (m) {
    case AttributionMethod::saliency:
      return "saliency";
    case AttributionMethod::integrated_gradients:
      return "integrated_gradients";
    case AttributionMethod::random:
      return "random";
  }
  return "unknown";
}

AttributionMethod attribution_method_from_string(std::string_view s) {
  if (s == "saliency") return AttributionMethod::saliency;
  if (s == "integrated_gradients" || s == "ig") return AttributionMethod::integrated_gradients;
  if (s == "random") return AttributionMethod::random;
  throw ConfigError("unknown attribution method '" + std::string(s) + "'");
}

std::string to_string(IgBaseline b) { return b == IgBaseline::zero_embedding ? "zero_embedding" : "pad_embedding"; }

IgBaseline ig_baseline_from_string(std::string_view s) {
  if (s == "zero_embedding" || s == "zero") return IgBaseline::zero_embedding;
  if (s == "pad_embedding" || s == "pad") return IgBaseline::pad_embedding;
  throw ConfigError("unknown IG baseline '" + std::string(s) + "'");
}

std::vector<int> RationaleTokens::positions() const {
  std::vector<int> out;
  for (const auto& t : tokens) out.push_back(t.position);
  return out;
}

std::vector<int> RationaleTokens::ids() const {
  std::vector<int> out;
  for (const auto& t : tokens) out.push_back(t.token_id);
  return out;
}

std::vector<bool> excluded_positions(std::span<const int> input_ids) {
  std::vector<bool> out(input_ids.size());
  for (std::size_t i = 0; i < input_ids.size(); ++i) out[i] = is_special(input_ids[i]);
  return out;
}

std::vector<double> saliency_scores(const EmbeddingFunction& logits_fn, const Tensor& embeddings,
                                    std::span<const int> target_ids) {
  if (target_ids.empty()) throw TensorError("saliency: empty target");
  const Tensor e = embeddings.detach(true);
  const Tensor logits = logits_fn(e);
  std::vector<double> scores(e.rows(), 0.0);
  const Tensor objective = mean(pick(logits, target_ids));
  // Constant logits: every gradient is zero.
  if (!objective.requires_grad()) return scores;
  // grad of (1/m) sum_j o_j equals the per-position average of grad o_j.
  backward(objective);
  const auto d = e.cols();
  const auto g = e.grad();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    double l1 = 0.0;
    for (std::size_t c = 0; c < d; ++c) l1 += std::abs(g[i * d + c]);
    scores[i] = l1;
  }
  return scores;
}

AttributionResult saliency_attribution(const Seq2SeqModel& model, std::span<const int> input_ids,
                                       std::span<const int> target_ids, std::int64_t example_id) {
  std::optional<Seq2SeqModel> storage;
  return saliency_with(ensure_frozen(model, storage), input_ids, target_ids, example_id);
}

AttributionResult saliency_attribution(const Seq2SeqModel& model, const Example& example) {
  if (example.label_ids.empty()) throw TensorError("saliency: empty target");
  return saliency_attribution(model, example.input_ids, with_eos(example.label_ids), example.id);
}

std::vector<double> integrated_gradients(const EmbeddingFunction& f, const Tensor& input, const Tensor& baseline,
                                         int steps) {
  if (steps < 2) throw TensorError("integrated gradients needs steps >= 2");
  if (input.shape() != baseline.shape()) throw TensorError("integrated gradients: baseline shape differs from input");
  const auto n = input.size();
  std::vector<double> delta(n), avg(n, 0.0), point(n);
  for (std::size_t i = 0; i < n; ++i) delta[i] = input[i] - baseline[i];

  for (int s = 0; s <= steps; ++s) {
    const double alpha = static_cast<double>(s) / steps;
    const double weight = (s == 0 || s == steps) ? 0.5 : 1.0;
    for (std::size_t i = 0; i < n; ++i) point[i] = baseline[i] + alpha * delta[i];
    const Tensor x(input.shape(), point, true);
    const Tensor out = f(x);
    if (out.size() != 1) throw TensorError("integrated gradients: function must return a scalar");
    if (!out.requires_grad()) continue;  // constant function: zero gradient
    backward(out);
    const auto g = x.grad();
    for (std::size_t i = 0; i < n; ++i) avg[i] += weight * g[i];
  }
  std::vector<double> result(n);
  for (std::size_t i = 0; i < n; ++i) result[i] = delta[i] * (avg[i] / steps);
  return result;
}

Tensor gold_log_likelihood(const Seq2SeqModel& model, const Tensor& embeddings, std::span<const int> input_ids,
                           std::span<const int> target_ids) {
  const Tensor logits = model.forward_from_embeddings(embeddings, target_ids, input_ids);
  return sum(pick(log_softmax(logits, 1), target_ids));
}

Tensor ig_baseline(const Seq2SeqModel& model, std::size_t n, IgBaseline baseline) {
  if (baseline == IgBaseline::zero_embedding) return model.positional_encoding(n).detach();
  const TokenIds pads(n, token::kPad);
  NoGradGuard no_grad;
  return model.embed(pads).detach();
}

AttributionResult integrated_gradients_attribution(const Seq2SeqModel& model, const Example& example,
                                                   IgBaseline baseline, int steps) {
  std::optional<Seq2SeqModel> storage;
  return ig_with(ensure_frozen(model, storage), example, baseline, steps);
}

RationaleTokens top_k_tokens(const AttributionResult& attr, std::span<const int> input_ids, int k) {
  if (k < 1) throw ConfigError("top_k_tokens: k must be >= 1");
  if (input_ids.size() != attr.scores.size()) throw TensorError("top_k_tokens: input length differs from scores");
  std::vector<int> eligible;
  for (std::size_t i = 0; i < attr.scores.size(); ++i) {
    if (!attr.excluded[i]) eligible.push_back(static_cast<int>(i));
  }
  if (eligible.empty()) throw Error("top_k_tokens: no eligible positions");
  std::stable_sort(eligible.begin(), eligible.end(), [&](int a, int b) {
    return attr.scores[static_cast<std::size_t>(a)] > attr.scores[static_cast<std::size_t>(b)];
  });
  RationaleTokens out;
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(k), eligible.size());
  out.short_of_k = take < static_cast<std::size_t>(k);
  for (std::size_t i = 0; i < take; ++i) {
    const auto p = static_cast<std::size_t>(eligible[i]);
    out.tokens.push_back({eligible[i], input_ids[p], attr.scores[p]});
  }
  return out;
}

RationaleTokens random_attribution(const Example& example, int k, std::uint64_t seed) {
  if (k < 1) throw ConfigError("random_attribution: k must be >= 1");
  std::vector<int> eligible;
  const auto excluded = excluded_positions(example.input_ids);
  for (std::size_t i = 0; i < excluded.size(); ++i) {
    if (!excluded[i]) eligible.push_back(static_cast<int>(i));
  }
  RationaleTokens out;
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(k), eligible.size());
  out.short_of_k = take < static_cast<std::size_t>(k);
  Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(example.id));
  for (std::size_t i = 0; i < take; ++i) {
    const auto j = i + rng.below(eligible.size() - i);
    std::swap(eligible[i], eligible[j]);
  }
  std::sort(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(take));
  for (std::size_t i = 0; i < take; ++i) {
    out.tokens.push_back({eligible[i], example.input_ids[static_cast<std::size_t>(eligible[i])], 0.0});
  }
  return out;
}

std::vector<AttributionResult> attribute_all(const Seq2SeqModel& model, std::span<const Example> examples,
                                             const AttributionOptions& options) {
  std::optional<Seq2SeqModel> storage;
  const Seq2SeqModel& frozen = ensure_frozen(model, storage);
  std::vector<AttributionResult> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    switch (options.method) {
      case AttributionMethod::saliency:
        out.push_back(saliency_with(frozen, ex.input_ids, with_eos(ex.label_ids), ex.id));
        break;
      case AttributionMethod::integrated_gradients:
        out.push_back(ig_with(frozen, ex, options.ig_baseline, options.ig_steps));
        break;
      case AttributionMethod::random: {
        AttributionResult r;
        r.example_id = ex.id;
        r.method = AttributionMethod::random;
        r.excluded = excluded_positions(ex.input_ids);
        r.scores.assign(ex.input_ids.size(), 0.0);
        out.push_back(std::move(r));
        break;
      }
    }
  }
  return out;
}

std::string attribution_to_json(const AttributionResult& attr, const RationaleTokens& top, const Vocabulary& vocab) {
  nlohmann::ordered_json j;
  j["example_id"] = attr.example_id;
  j["method"] = to_string(attr.method);
  j["scores"] = attr.scores;
  auto topk = nlohmann::ordered_json::array();
  for (const auto& t : top.tokens) topk.push_back({t.position, vocab.token(t.token_id), t.score});
  j["topk"] = std::move(topk);
  return j.dump();
}

}  // namespace saldist
