#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "saldist/data.hpp"
#include "saldist/model.hpp"

namespace saldist {

enum class AttributionMethod { saliency, integrated_gradients, random };

std::string to_string(AttributionMethod m);
AttributionMethod attribution_method_from_string(std::string_view s);

enum class IgBaseline { zero_embedding, pad_embedding };

std::string to_string(IgBaseline b);
IgBaseline ig_baseline_from_string(std::string_view s);

struct AttributionResult {
  std::int64_t example_id = 0;
  AttributionMethod method = AttributionMethod::saliency;
  /// One nonnegative score per input position; excluded positions hold 0.
  std::vector<double> scores;
  std::vector<bool> excluded;
  /// Signed per-dimension attributions [n x d_model] (integrated gradients only).
  std::vector<double> signed_attributions;

  std::size_t size() const { return scores.size(); }
};

struct RationaleToken {
  int position = 0;
  int token_id = 0;
  double score = 0.0;

  bool operator==(const RationaleToken&) const = default;
};

struct RationaleTokens {
  std::vector<RationaleToken> tokens;
  /// Set when fewer eligible positions existed than requested.
  bool short_of_k = false;

  std::vector<int> positions() const;
  std::vector<int> ids() const;
};

/// Positions holding BOS/EOS/PAD/SEP or task-prefix tokens.
std::vector<bool> excluded_positions(std::span<const int> input_ids);

/// Function of an [n x d] embedding matrix: logits for saliency, a scalar
/// for integrated gradients.
using EmbeddingFunction = std::function<Tensor(const Tensor&)>;

/// Per-row L1 norm of the target-averaged gradient of the gold logits, for
/// any map from embeddings to [m x vocab] logits.
std::vector<double> saliency_scores(const EmbeddingFunction& logits_fn, const Tensor& embeddings,
                                    std::span<const int> target_ids);

/// Saliency: for each target position j take the gradient of the gold-token
/// logit o_j with respect to every input embedding, average the m gradients
/// per input position and score each position by the L1 norm of the average.
/// The average is computed as the gradient of (1/m) sum_j o_j, one backward.
AttributionResult saliency_attribution(const Seq2SeqModel& model, const Example& example);
AttributionResult saliency_attribution(const Seq2SeqModel& model, std::span<const int> input_ids,
                                       std::span<const int> target_ids, std::int64_t example_id = 0);

/// Signed integrated gradients [n x d] of f along the straight line from
/// baseline to input, trapezoidal rule with `steps` intervals. Throws
/// TensorError when steps < 2.
std::vector<double> integrated_gradients(const EmbeddingFunction& f, const Tensor& input, const Tensor& baseline,
                                         int steps);

/// F(E) = sum_j log p(gold_j | E) under teacher forcing.
Tensor gold_log_likelihood(const Seq2SeqModel& model, const Tensor& embeddings, std::span<const int> input_ids,
                           std::span<const int> target_ids);

/// Baseline in the same space as embed(): positional encodings are kept and
/// only the token part is replaced (by zeros, or by the PAD row). A path
/// through the all-zero point would cross the LayerNorm singularity.
Tensor ig_baseline(const Seq2SeqModel& model, std::size_t n, IgBaseline baseline);

/// Ranking score per position is |sum over dims of the signed attribution|.
AttributionResult integrated_gradients_attribution(const Seq2SeqModel& model, const Example& example,
                                                   IgBaseline baseline = IgBaseline::zero_embedding,
                                                   int steps = 64);

/// Top-k eligible positions by descending score, ties by ascending position.
/// Throws Error when no position is eligible.
RationaleTokens top_k_tokens(const AttributionResult& attr, std::span<const int> input_ids, int k);

/// k distinct eligible positions drawn uniformly without replacement,
/// reported in ascending position order with score 0.
RationaleTokens random_attribution(const Example& example, int k, std::uint64_t seed);

struct AttributionOptions {
  AttributionMethod method = AttributionMethod::saliency;
  IgBaseline ig_baseline = IgBaseline::zero_embedding;
  int ig_steps = 64;
  std::uint64_t seed = 0;
};

/// Scores for every example with the given method (random yields zeros).
std::vector<AttributionResult> attribute_all(const Seq2SeqModel& model, std::span<const Example> examples,
                                             const AttributionOptions& options);

/// One line-delimited JSON record: {example_id, method, scores, topk}.
std::string attribution_to_json(const AttributionResult& attr, const RationaleTokens& top, const Vocabulary& vocab);

}  // namespace saldist
