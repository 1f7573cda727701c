#pragma once

#include <cmath>
#include <vector>

#include "saldist/data.hpp"
#include "saldist/model.hpp"
#include "saldist/rng.hpp"
#include "saldist/tensor.hpp"

namespace saldist::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.uniform(-scale, scale);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline ModelConfig tiny_config(int vocab, int d = 16, std::uint64_t seed = 7) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = d;
  c.n_heads = 2;
  c.n_layers_enc = 2;
  c.n_layers_dec = 2;
  c.d_ff = 2 * d;
  c.max_seq_len = 32;
  c.seed = seed;
  return c;
}

inline TokenIds random_ids(Rng& rng, std::size_t n, int lo, int hi) {
  TokenIds ids(n);
  for (auto& id : ids) id = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo)));
  return ids;
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  }
  return true;
}

}  // namespace saldist::testing
