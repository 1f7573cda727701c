#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "json.hpp"
#include "saldist/attribution.hpp"
#include "saldist/errors.hpp"
#include "support.hpp"

using namespace saldist;
using saldist::testing::tiny_config;

namespace {

Example make_example(std::int64_t id, TokenIds input, TokenIds label) {
  Example ex;
  ex.id = id;
  ex.input_ids = std::move(input);
  ex.label_ids = std::move(label);
  return ex;
}

AttributionResult scored(std::vector<double> scores) {
  AttributionResult r;
  r.excluded.assign(scores.size(), false);
  r.scores = std::move(scores);
  return r;
}

}  // namespace

TEST_SUITE("attribution") {

TEST_CASE("zero-weight model has zero saliency") {
  Seq2SeqModel m(tiny_config(20));
  for (auto& [name, p] : m.parameters()) {
    for (auto& v : p.mutable_values()) v = 0.0;
  }
  const auto r = saliency_attribution(m, make_example(0, {11, 12, 13}, {14}));
  for (double s : r.scores) CHECK(s == 0.0);
}

TEST_CASE("one-dimensional linear toy matches the hand gradient") {
  // Two input tokens with scalar embeddings e0, e1 and a vocabulary of two.
  // logits[j][v] = sum_i A_v[j][i] e_i, targets t = (1, 0).
  const Tensor a0 = Tensor::matrix(2, 2, {0.5, -1.0, 2.0, 0.25});
  const Tensor a1 = Tensor::matrix(2, 2, {3.0, 4.0, -0.5, 1.5});
  auto logits = [&](const Tensor& e) {
    const std::vector<Tensor> cols{matmul(a0, e), matmul(a1, e)};
    return concat(cols, 1);
  };
  const Tensor e({2, 1}, {0.7, -1.3});
  const TokenIds targets{1, 0};
  const auto scores = saliency_scores(logits, e, targets);
  // o_0 = a1[0][.]·e, o_1 = a0[1][.]·e; mean gradient, then absolute value.
  CHECK(scores[0] == doctest::Approx(std::abs((3.0 + 2.0) / 2.0)).epsilon(1e-15));
  CHECK(scores[1] == doctest::Approx(std::abs((4.0 + 0.25) / 2.0)).epsilon(1e-15));
}

TEST_CASE("saliency equals per-target backward average") {
  const Seq2SeqModel m = Seq2SeqModel(tiny_config(24, 16, 3)).frozen();
  Rng rng(2);
  for (int trial = 0; trial < 3; ++trial) {
    const auto ex = make_example(trial, saldist::testing::random_ids(rng, 6, 10, 24),
                                 saldist::testing::random_ids(rng, 2, 10, 24));
    const auto target = with_eos(ex.label_ids);
    const auto r = saliency_attribution(m, ex);

    const auto d = 16u;
    std::vector<double> avg(ex.input_ids.size() * d, 0.0);
    for (std::size_t j = 0; j < target.size(); ++j) {
      const Tensor e = m.embed(ex.input_ids).detach(true);
      const Tensor logits = m.forward_from_embeddings(e, target, ex.input_ids);
      std::vector<double> w(target.size(), 0.0);
      w[j] = 1.0;
      backward(sum(mul(pick(logits, target), Tensor({target.size()}, w))));
      for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += e.grad()[i] / static_cast<double>(target.size());
    }
    for (std::size_t i = 0; i < ex.input_ids.size(); ++i) {
      double l1 = 0.0;
      for (std::size_t c = 0; c < d; ++c) l1 += std::abs(avg[i * d + c]);
      CHECK(std::abs(r.scores[i] - l1) <= 1e-10);
    }
  }
}

TEST_CASE("special tokens score zero and are never selected") {
  const Seq2SeqModel m(tiny_config(24));
  const auto ex = make_example(0, {11, token::kSep, 12, token::kPad}, {13});
  const auto r = saliency_attribution(m, ex);
  CHECK(r.excluded == std::vector<bool>{false, true, false, true});
  CHECK(r.scores[1] == 0.0);
  CHECK(r.scores[3] == 0.0);
  const auto top = top_k_tokens(r, ex.input_ids, 4);
  auto picked = top.positions();
  std::sort(picked.begin(), picked.end());
  CHECK(picked == std::vector<int>{0, 2});
  CHECK(top.short_of_k);
}

TEST_CASE("top-k selection") {
  const TokenIds ids{11, 12, 13};
  CHECK(top_k_tokens(scored({0.1, 0.9, 0.5}), ids, 2).positions() == std::vector<int>{1, 2});
  const auto all = top_k_tokens(scored({0.1, 0.9, 0.5}), ids, 5);
  CHECK(all.positions() == std::vector<int>{1, 2, 0});
  CHECK(all.short_of_k);
  CHECK(top_k_tokens(scored({0.3, 0.3, 0.3}), ids, 3).positions() == std::vector<int>{0, 1, 2});
  CHECK(top_k_tokens(scored({0.1, 0.9, 0.5}), ids, 2).ids() == TokenIds{12, 13});
  CHECK_THROWS_AS(top_k_tokens(scored({0.1, 0.9, 0.5}), ids, 0), ConfigError);

  auto none = scored({0.1, 0.2});
  none.excluded = {true, true};
  CHECK_THROWS_AS(top_k_tokens(none, TokenIds{0, 0}, 1), Error);
}

TEST_CASE("random rationales") {
  const auto ex = make_example(42, {11, 12, 13, 14, 15, 16, 17, 18, 19, 20}, {21});
  const auto a = random_attribution(ex, 5, 7).positions();
  CHECK(a == random_attribution(ex, 5, 7).positions());
  CHECK(std::is_sorted(a.begin(), a.end()));
  CHECK(random_attribution(ex, 10, 7).positions() == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});

  std::vector<int> hits(10, 0);
  for (int draw = 0; draw < 10000; ++draw) {
    auto e = ex;
    e.id = draw;
    for (int p : random_attribution(e, 5, 99).positions()) ++hits[static_cast<std::size_t>(p)];
  }
  for (int h : hits) CHECK(std::abs(h / 10000.0 - 0.5) <= 0.02);
}

TEST_CASE("integrated gradients") {
  // Linear function, zero baseline: attribution is w * x.
  const Tensor w({2, 3}, {0.5, -1.0, 2.0, 3.0, 0.25, -0.75});
  const Tensor x({2, 3}, {1.5, 2.0, -1.0, 0.5, 4.0, 1.0});
  auto linear = [&](const Tensor& e) { return sum(mul(w, e)); };
  for (int steps : {2, 3, 17, 128}) {
    const auto ig = integrated_gradients(linear, x, Tensor::zeros({2, 3}), steps);
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(ig[i] - w[i] * x[i]) <= 1e-12 * std::abs(w[i] * x[i]));
  }

  // Baseline equal to the input: every attribution is exactly zero.
  auto quadratic = [&](const Tensor& e) { return sum(gelu(mul(e, e))); };
  for (double v : integrated_gradients(quadratic, x, x, 16)) CHECK(v == 0.0);

  CHECK_THROWS_AS(integrated_gradients(linear, x, Tensor::zeros({2, 3}), 1), TensorError);
  CHECK_THROWS_AS(integrated_gradients(linear, x, Tensor::zeros({3, 2}), 4), TensorError);
}

TEST_CASE("integrated gradients completeness on a model") {
  const Seq2SeqModel m = Seq2SeqModel(tiny_config(24, 16, 4)).frozen();
  const auto ex = make_example(0, {11, 12, 13, 14, 15}, {16});
  const auto target = with_eos(ex.label_ids);
  const Tensor input = m.embed(ex.input_ids);
  for (IgBaseline b : {IgBaseline::zero_embedding, IgBaseline::pad_embedding}) {
    const Tensor base = ig_baseline(m, ex.input_ids.size(), b);
    auto f = [&](const Tensor& e) { return gold_log_likelihood(m, e, ex.input_ids, target); };
    const auto ig = integrated_gradients(f, input, base, 128);
    double total = 0.0;
    for (double v : ig) total += v;
    const double diff = f(input).item() - f(base).item();
    CHECK(std::abs(total - diff) <= 0.01 * std::abs(diff) + 1e-4);
  }
  // The zero baseline keeps positions: it differs from the input by the token rows only.
  const Tensor zero = ig_baseline(m, 5, IgBaseline::zero_embedding);
  const Tensor pe = m.positional_encoding(5);
  CHECK(saldist::testing::bitwise_equal(zero.values(), pe.values()));
}

TEST_CASE("attribute_all and json") {
  const Seq2SeqModel m(tiny_config(24));
  const std::vector<Example> exs{make_example(3, {11, 12, 13}, {14}), make_example(4, {15, 16}, {17})};
  const auto sal = attribute_all(m, exs, {});
  CHECK(sal.size() == 2);
  CHECK(sal[0].method == AttributionMethod::saliency);
  CHECK(sal[1].example_id == 4);
  AttributionOptions ig;
  ig.method = AttributionMethod::integrated_gradients;
  ig.ig_steps = 8;
  const auto igs = attribute_all(m, exs, ig);
  CHECK(igs[0].signed_attributions.size() == 3 * 16);

  Vocabulary vocab;
  for (int i = vocab.size(); i < 24; ++i) vocab.add("t" + std::to_string(i));
  const auto top = top_k_tokens(sal[0], exs[0].input_ids, 2);
  const auto j = nlohmann::json::parse(attribution_to_json(sal[0], top, vocab));
  CHECK(j["example_id"] == 3);
  CHECK(j["method"] == "saliency");
  CHECK(j["scores"].size() == 3);
  CHECK(j["topk"].size() == 2);
  CHECK(j["topk"][0][1].get<std::string>().rfind("t1", 0) == 0);

  CHECK(attribution_method_from_string("ig") == AttributionMethod::integrated_gradients);
  CHECK_THROWS_AS(attribution_method_from_string("lime"), ConfigError);
}

}  // TEST_SUITE
