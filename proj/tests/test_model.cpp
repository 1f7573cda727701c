#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "saldist/errors.hpp"
#include "saldist/io.hpp"
#include "support.hpp"

using namespace saldist;
using saldist::testing::bitwise_equal;
using saldist::testing::tiny_config;

namespace {

void zero_all(Seq2SeqModel& m) {
  for (auto& [name, p] : m.parameters()) {
    for (auto& v : p.mutable_values()) v = 0.0;
  }
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("init is seeded") {
  const Seq2SeqModel a(tiny_config(20, 16, 1));
  const Seq2SeqModel b(tiny_config(20, 16, 1));
  const Seq2SeqModel c(tiny_config(20, 16, 2));
  bool any_diff = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(a.parameters()[i].first == b.parameters()[i].first);
    CHECK(bitwise_equal(a.parameters()[i].second.values(), b.parameters()[i].second.values()));
    if (!bitwise_equal(a.parameters()[i].second.values(), c.parameters()[i].second.values())) any_diff = true;
  }
  CHECK(any_diff);

  auto bad = tiny_config(0);
  CHECK_THROWS_AS(Seq2SeqModel{bad}, ConfigError);
  bad = tiny_config(20);
  bad.n_heads = 3;
  CHECK_THROWS_AS(Seq2SeqModel{bad}, ConfigError);
}

TEST_CASE("copies are deep") {
  Seq2SeqModel a(tiny_config(20));
  const Seq2SeqModel b = a;
  a.param("out.b").mutable_values()[0] += 1.0;
  CHECK(a.param("out.b")[0] != b.param("out.b")[0]);
}

TEST_CASE("embedding lookup") {
  const Seq2SeqModel m(tiny_config(20));
  const auto d = static_cast<std::size_t>(m.config().d_model);
  const TokenIds one{7};
  const Tensor e = m.embed(one);
  const Tensor pe = m.positional_encoding(1);
  const auto& table = m.param("embedding");
  for (std::size_t c = 0; c < d; ++c) CHECK(e[c] == doctest::Approx(table[7 * d + c] + pe[c]).epsilon(1e-15));

  CHECK_THROWS_AS(m.embed(TokenIds{}), TensorError);
  CHECK_THROWS_AS(m.embed(TokenIds{20}), TensorError);

  // Same id twice: rows differ by exactly the positional difference.
  const TokenIds twice{3, 3};
  const Tensor e2 = m.embed(twice);
  const Tensor pe2 = m.positional_encoding(2);
  for (std::size_t c = 0; c < d; ++c) {
    CHECK(std::abs((e2[d + c] - e2[c]) - (pe2[d + c] - pe2[c])) < 1e-14);
  }
}

TEST_CASE("forward paths agree and repeat bitwise") {
  const Seq2SeqModel m(tiny_config(20));
  const TokenIds in{11, 12, 13, 14};
  const TokenIds tgt{15, token::kEos};
  const Tensor a = m.forward(in, tgt);
  const Tensor b = m.forward_from_embeddings(m.embed(in), tgt, in);
  CHECK(a.shape() == Shape{2, 20});
  CHECK(bitwise_equal(a.values(), b.values()));
  CHECK(bitwise_equal(a.values(), m.forward(in, tgt).values()));
}

TEST_CASE("zero weights give constant logits") {
  Seq2SeqModel m(tiny_config(20));
  zero_all(m);
  auto bias = m.param("out.b").mutable_values();
  for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = 0.1 * static_cast<double>(i);
  const Tensor a = m.forward(TokenIds{11, 12, 13}, TokenIds{15, 16, token::kEos});
  const Tensor b = m.forward(TokenIds{17, 18}, TokenIds{token::kEos});
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 20; ++c) CHECK(a[r * 20 + c] == bias[c]);
  }
  for (std::size_t c = 0; c < 20; ++c) CHECK(b[c] == bias[c]);
}

TEST_CASE("logit change follows the embedding gradient to first order") {
  const Seq2SeqModel m = Seq2SeqModel(tiny_config(20)).frozen();
  const TokenIds in{11, 12, 13, 14};
  const TokenIds tgt{15, token::kEos};
  const Tensor e = m.embed(in).detach(true);
  const Tensor logits = m.forward_from_embeddings(e, tgt, in);
  // Objective: logit of target row 0, column 15.
  const TokenIds cols{15, 0};
  backward(sum(mul(pick(logits, cols), Tensor({2}, {1.0, 0.0}))));
  const std::size_t row = 1, dim = 3, d = 16;
  const double g = e.grad()[row * d + dim];
  const double eps = 1e-6;
  Tensor moved = e.detach();
  moved.mutable_values()[row * d + dim] += eps;
  const double after = m.forward_from_embeddings(moved, tgt, in)[15];
  const double predicted = logits[15] + eps * g;
  CHECK(std::abs(after - predicted) < 1e-9);
}

TEST_CASE("full model loss passes grad check") {
  Seq2SeqModel m(tiny_config(20));
  const std::vector<TrainingPair> batch{{{11, 12, 13, 14}, {15, 16, token::kEos}}};
  auto loss = [&] { return label_loss(m, batch); };
  Rng rng(9);
  for (const auto* name : {"embedding", "enc.0.self.q.w", "dec.1.cross.v.w", "dec.0.ff.in.b", "enc.ln.g", "out.w"}) {
    Tensor& p = m.param(name);
    std::vector<std::size_t> idx;
    for (int i = 0; i < 12; ++i) idx.push_back(rng.below(p.size()));
    INFO(name);
    CHECK(grad_check_inplace(loss, p, 1e-5, idx) < 1e-4);
  }
}

TEST_CASE("label loss") {
  Seq2SeqModel m(tiny_config(20));
  zero_all(m);
  const std::vector<TrainingPair> one{{{11, 12}, {13, token::kEos}}};
  CHECK(std::abs(label_loss(m, one).item() - std::log(20.0)) < 1e-9);

  const Seq2SeqModel r(tiny_config(20, 16, 3));
  const TrainingPair p{{11, 12, 13}, {14, 15, token::kEos}};
  const TrainingPair q{{16, 17}, {18, token::kEos}};
  const std::vector<TrainingPair> single{p};
  const std::vector<TrainingPair> four{p, p, p, p};
  CHECK(label_loss(r, four).item() == doctest::Approx(label_loss(r, single).item()).epsilon(1e-14));

  // Two-example batch against separately computed cross-entropies.
  const double lp = cross_entropy(r.forward(p.input, p.target), p.target).item();
  const double lq = cross_entropy(r.forward(q.input, q.target), q.target).item();
  const std::vector<TrainingPair> both{p, q};
  CHECK(std::abs(label_loss(r, both).item() - 0.5 * (lp + lq)) < 1e-14);

  // Right-padding with PAD does not change the loss.
  const std::vector<TrainingPair> padded{{p.input, {14, 15, token::kEos, token::kPad}}};
  CHECK(std::abs(label_loss(r, padded).item() - lp) < 1e-12);
}

TEST_CASE("greedy generation") {
  Seq2SeqModel m(tiny_config(20));
  const TokenIds in{11, 12, 13};
  const auto first = m.generate(in, 10);
  CHECK(first == m.generate(in, 10));
  CHECK(first.size() <= 10);

  auto bias = m.param("out.b").mutable_values();
  bias[token::kEos] = 1e6;
  const auto forced = m.generate(in, 10);
  CHECK(forced == TokenIds{token::kEos});
}

TEST_CASE("untrained model sits near chance on a balanced task") {
  MarkerTaskParams params;
  params.splits = {0, 0, 1000};
  params.vocab_size = 64;
  params.seed = 4;
  const Dataset ds = gen_marker_classification(params);
  std::vector<int> labels;
  for (int c = 0; c < params.n_labels; ++c) labels.push_back(ds.vocab.id("label" + std::to_string(c)));

  // The untrained model's choice among the label tokens at the first step.
  const Seq2SeqModel m(tiny_config(static_cast<int>(ds.vocab.size()), 16, 8));
  int correct = 0;
  for (const auto& ex : ds.test) {
    const Tensor logits = m.forward(ex.input_ids, TokenIds{token::kEos});
    int best = labels[0];
    for (int l : labels) {
      if (logits[static_cast<std::size_t>(l)] > logits[static_cast<std::size_t>(best)]) best = l;
    }
    correct += best == ex.label_ids[0] ? 1 : 0;
  }
  CHECK(std::abs(correct / 1000.0 - 1.0 / 3.0) <= 0.1);
}

TEST_CASE("checkpoint round trip") {
  const Seq2SeqModel m(tiny_config(20, 16, 5));
  const CheckpointMetadata meta{{"role", "teacher"}, {"prompt_format", "plain"}};
  const auto bytes = serialize_checkpoint(m, meta);
  const auto loaded = deserialize_checkpoint(bytes);
  CHECK(loaded.model.config() == m.config());
  CHECK(loaded.metadata == meta);
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    CHECK(bitwise_equal(m.parameters()[i].second.values(), loaded.model.parameters()[i].second.values()));
  }
  CHECK(serialize_checkpoint(loaded.model, loaded.metadata) == bytes);

  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 8)), DataError);
  CHECK_THROWS_AS(deserialize_checkpoint("not a checkpoint"), DataError);
  std::string wrong_version = bytes;
  const auto at = wrong_version.find("format_version 1");
  wrong_version[at + 15] = '9';
  CHECK_THROWS_AS(deserialize_checkpoint(wrong_version), DataError);

  const auto dir = std::filesystem::temp_directory_path() / "saldist_ckpt_test";
  save_checkpoint(dir / "m.ckpt", m, meta);
  CHECK(read_file(dir / "m.ckpt") == bytes);
  CHECK_FALSE(std::filesystem::exists(dir / "m.ckpt.tmp"));
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt"), DataError);
}

}  // TEST_SUITE
