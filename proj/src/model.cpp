#include "saldist/model.hpp"

#include <cmath>

#include "saldist/data.hpp"
#include "saldist/rng.hpp"

namespace saldist {

namespace {

constexpr double kMaskedScore = -1e9;

std::string layer_name(const char* stack, int layer) { return std::string(stack) + "." + std::to_string(layer); }

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("model config: ") + name + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(n_layers_enc, "n_layers_enc");
  positive(n_layers_dec, "n_layers_dec");
  positive(d_ff, "d_ff");
  positive(max_seq_len, "max_seq_len");
  if (d_model % n_heads != 0) throw ConfigError("model config: n_heads must divide d_model");
  if (vocab_size < token::kReservedCount) throw ConfigError("model config: vocab_size smaller than the reserved token set");
}

Seq2SeqModel::Seq2SeqModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto ff = static_cast<std::size_t>(config_.d_ff);
  const auto vocab = static_cast<std::size_t>(config_.vocab_size);
  Rng rng(config_.seed);

  auto add = [&](const std::string& name, Shape shape, double scale) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = rng.uniform(-scale, scale);
    index_.emplace(name, params_.size());
    params_.emplace_back(name, Tensor(std::move(shape), std::move(v), true));
  };
  auto constant = [&](const std::string& name, Shape shape, double value) {
    const auto n = shape_size(shape);
    index_.emplace(name, params_.size());
    params_.emplace_back(name, Tensor(std::move(shape), std::vector<double>(n, value), true));
  };
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    add(name + ".w", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
    constant(name + ".b", {out}, 0.0);
  };
  auto layer_norm = [&](const std::string& name) {
    constant(name + ".g", {d}, 1.0);
    constant(name + ".b", {d}, 0.0);
  };
  auto attention = [&](const std::string& name) {
    for (const char* proj : {".q", ".k", ".v", ".o"}) linear(name + proj, d, d);
  };
  auto feed_forward = [&](const std::string& name) {
    linear(name + ".in", d, ff);
    linear(name + ".out", ff, d);
  };

  add("embedding", {vocab, d}, 1.0);
  for (int l = 0; l < config_.n_layers_enc; ++l) {
    const auto p = layer_name("enc", l);
    layer_norm(p + ".ln1");
    attention(p + ".self");
    layer_norm(p + ".ln2");
    feed_forward(p + ".ff");
  }
  layer_norm("enc.ln");
  for (int l = 0; l < config_.n_layers_dec; ++l) {
    const auto p = layer_name("dec", l);
    layer_norm(p + ".ln1");
    attention(p + ".self");
    layer_norm(p + ".ln2");
    attention(p + ".cross");
    layer_norm(p + ".ln3");
    feed_forward(p + ".ff");
  }
  layer_norm("dec.ln");
  linear("out", d, vocab);

  const auto max_len = static_cast<std::size_t>(config_.max_seq_len);
  pe_.assign(max_len * d, 0.0);
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      pe_[pos * d + i] = std::sin(angle);
      if (i + 1 < d) pe_[pos * d + i + 1] = std::cos(angle);
    }
  }
}

Seq2SeqModel::Seq2SeqModel(const Seq2SeqModel& other)
    : config_(other.config_), index_(other.index_), pe_(other.pe_) {
  params_.reserve(other.params_.size());
  for (const auto& [name, t] : other.params_) params_.emplace_back(name, t.detach(t.requires_grad()));
}

Seq2SeqModel& Seq2SeqModel::operator=(const Seq2SeqModel& other) {
  if (this != &other) *this = Seq2SeqModel(other);
  return *this;
}

const Tensor& Seq2SeqModel::param(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw TensorError("no parameter named '" + std::string(name) + "'");
  return params_[it->second].second;
}

Tensor& Seq2SeqModel::param(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).param(name));
}

std::size_t Seq2SeqModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

Seq2SeqModel Seq2SeqModel::frozen() const {
  Seq2SeqModel copy(*this);
  for (auto& [_, t] : copy.params_) t = t.detach(false);
  return copy;
}

void Seq2SeqModel::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

void Seq2SeqModel::check_ids(std::span<const int> ids, const char* what) const {
  if (ids.empty()) throw TensorError(std::string(what) + ": sequence must be non-empty");
  if (ids.size() > static_cast<std::size_t>(config_.max_seq_len)) {
    throw TensorError(std::string(what) + ": length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                      std::to_string(config_.max_seq_len));
  }
  for (int id : ids) {
    if (id < 0 || id >= config_.vocab_size) {
      throw TensorError(std::string(what) + ": token id " + std::to_string(id) + " outside vocabulary of " +
                        std::to_string(config_.vocab_size));
    }
  }
}

Tensor Seq2SeqModel::positional_encoding(std::size_t n) const {
  const auto d = static_cast<std::size_t>(config_.d_model);
  if (n == 0 || n > static_cast<std::size_t>(config_.max_seq_len)) throw TensorError("positional_encoding: bad length");
  return Tensor({n, d}, std::vector<double>(pe_.begin(), pe_.begin() + static_cast<std::ptrdiff_t>(n * d)));
}

Tensor Seq2SeqModel::embed(std::span<const int> ids) const {
  check_ids(ids, "embed");
  return embedding_gather(param("embedding"), ids) + positional_encoding(ids.size());
}

Tensor Seq2SeqModel::linear(const std::string& prefix, const Tensor& x) const {
  return matmul(x, param(prefix + ".w")) + param(prefix + ".b");
}

Tensor Seq2SeqModel::norm(const std::string& prefix, const Tensor& x) const {
  return layer_norm(x, param(prefix + ".g"), param(prefix + ".b"));
}

Tensor Seq2SeqModel::feed_forward(const std::string& prefix, const Tensor& x) const {
  return linear(prefix + ".out", gelu(linear(prefix + ".in", x)));
}

Tensor Seq2SeqModel::attention(const std::string& prefix, const Tensor& query_in, const Tensor& memory,
                               const Tensor* additive_mask) const {
  const auto heads = static_cast<std::size_t>(config_.n_heads);
  const auto head_dim = static_cast<std::size_t>(config_.d_model) / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const Tensor q = linear(prefix + ".q", query_in);
  const Tensor k = linear(prefix + ".k", memory);
  const Tensor v = linear(prefix + ".v", memory);
  std::vector<Tensor> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto begin = h * head_dim;
    Tensor scores = matmul(slice_cols(q, begin, head_dim), transpose(slice_cols(k, begin, head_dim))) * scale;
    if (additive_mask) scores = scores + *additive_mask;
    outputs.push_back(matmul(softmax(scores, 1), slice_cols(v, begin, head_dim)));
  }
  const Tensor merged = heads == 1 ? outputs[0] : concat(outputs, 1);
  return linear(prefix + ".o", merged);
}

Tensor Seq2SeqModel::encode(const Tensor& input_embeddings, std::span<const int> input_ids, Tensor* key_mask) const {
  const auto n = input_embeddings.rows();
  bool any_pad = false;
  std::vector<double> mask(n, 0.0);
  for (std::size_t i = 0; i < input_ids.size() && i < n; ++i) {
    if (input_ids[i] == token::kPad) {
      mask[i] = kMaskedScore;
      any_pad = true;
    }
  }
  if (any_pad) *key_mask = Tensor({n}, std::move(mask));
  const Tensor* m = any_pad ? key_mask : nullptr;

  Tensor x = input_embeddings;
  for (int l = 0; l < config_.n_layers_enc; ++l) {
    const auto p = layer_name("enc", l);
    const Tensor h = norm(p + ".ln1", x);
    x = x + attention(p + ".self", h, h, m);
    x = x + feed_forward(p + ".ff", norm(p + ".ln2", x));
  }
  return norm("enc.ln", x);
}

Tensor Seq2SeqModel::decode(const Tensor& memory, const Tensor* key_mask, std::span<const int> decoder_input) const {
  const auto m = decoder_input.size();
  std::vector<double> causal(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) causal[i * m + j] = kMaskedScore;
  const Tensor causal_mask({m, m}, std::move(causal));

  Tensor y = embed(decoder_input);
  for (int l = 0; l < config_.n_layers_dec; ++l) {
    const auto p = layer_name("dec", l);
    const Tensor h = norm(p + ".ln1", y);
    y = y + attention(p + ".self", h, h, &causal_mask);
    y = y + attention(p + ".cross", norm(p + ".ln2", y), memory, key_mask);
    y = y + feed_forward(p + ".ff", norm(p + ".ln3", y));
  }
  return linear("out", norm("dec.ln", y));
}

Tensor Seq2SeqModel::forward_from_embeddings(const Tensor& input_embeddings, std::span<const int> target_ids,
                                             std::span<const int> input_ids) const {
  if (input_embeddings.dim() != 2 || input_embeddings.cols() != static_cast<std::size_t>(config_.d_model)) {
    throw TensorError("forward: input embeddings must be [n x " + std::to_string(config_.d_model) + "], got " +
                      shape_string(input_embeddings.shape()));
  }
  if (input_embeddings.rows() > static_cast<std::size_t>(config_.max_seq_len)) {
    throw TensorError("forward: input longer than max_seq_len");
  }
  check_ids(target_ids, "forward target");
  TokenIds decoder_input;
  decoder_input.reserve(target_ids.size());
  decoder_input.push_back(token::kBos);
  decoder_input.insert(decoder_input.end(), target_ids.begin(), target_ids.end() - 1);

  Tensor key_mask;
  const Tensor memory = encode(input_embeddings, input_ids, &key_mask);
  return decode(memory, key_mask.defined() ? &key_mask : nullptr, decoder_input);
}

Tensor Seq2SeqModel::forward(std::span<const int> input_ids, std::span<const int> target_ids) const {
  return forward_from_embeddings(embed(input_ids), target_ids, input_ids);
}

TokenIds Seq2SeqModel::generate(std::span<const int> input_ids, int max_len) const {
  if (max_len < 1 || max_len > config_.max_seq_len) {
    throw TensorError("generate: max_len must be in [1, " + std::to_string(config_.max_seq_len) + "]");
  }
  NoGradGuard no_grad;
  Tensor key_mask;
  const Tensor memory = encode(embed(input_ids), input_ids, &key_mask);
  const Tensor* mask = key_mask.defined() ? &key_mask : nullptr;
  TokenIds prefix{token::kBos};
  TokenIds out;
  const auto vocab = static_cast<std::size_t>(config_.vocab_size);
  while (static_cast<int>(out.size()) < max_len) {
    const Tensor logits = decode(memory, mask, prefix);
    const auto row = logits.values().subspan((logits.rows() - 1) * vocab, vocab);
    std::size_t best = 0;
    for (std::size_t c = 1; c < vocab; ++c) {
      if (row[c] > row[best]) best = c;
    }
    out.push_back(static_cast<int>(best));
    if (static_cast<int>(best) == token::kEos) break;
    prefix.push_back(static_cast<int>(best));
  }
  return out;
}

TokenIds with_eos(std::span<const int> ids) {
  TokenIds out(ids.begin(), ids.end());
  out.push_back(token::kEos);
  return out;
}

Tensor label_loss(const Seq2SeqModel& model, std::span<const TrainingPair> batch) {
  if (batch.empty()) throw TensorError("label_loss: empty batch");
  std::vector<Tensor> losses;
  losses.reserve(batch.size());
  for (const auto& pair : batch) {
    losses.push_back(cross_entropy(model.forward(pair.input, pair.target), pair.target, token::kPad));
  }
  return mean(concat(losses, 0));
}

}  // namespace saldist
