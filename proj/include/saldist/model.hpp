#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "saldist/tensor.hpp"

namespace saldist {

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 64;
  int n_heads = 4;
  int n_layers_enc = 2;
  int n_layers_dec = 2;
  int d_ff = 256;
  int max_seq_len = 64;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// One (encoder input, decoder target) pair. The target ends with EOS and
/// may be right-padded with PAD, which the loss ignores.
struct TrainingPair {
  TokenIds input;
  TokenIds target;
};

/// Tiny pre-LayerNorm encoder-decoder transformer over a closed vocabulary.
///
/// Token and decoder embeddings share one table; positions use fixed
/// sinusoidal encodings. Copies are deep: copying a model duplicates its
/// parameters.
class Seq2SeqModel {
 public:
  explicit Seq2SeqModel(const ModelConfig& config);

  Seq2SeqModel(const Seq2SeqModel& other);
  Seq2SeqModel& operator=(const Seq2SeqModel& other);
  Seq2SeqModel(Seq2SeqModel&&) noexcept = default;
  Seq2SeqModel& operator=(Seq2SeqModel&&) noexcept = default;

  const ModelConfig& config() const { return config_; }

  using NamedTensor = std::pair<std::string, Tensor>;
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::vector<NamedTensor>& parameters() { return params_; }
  const Tensor& param(std::string_view name) const;
  Tensor& param(std::string_view name);
  std::size_t parameter_count() const;

  /// Copy whose parameters do not require grad; used where only input
  /// gradients are wanted.
  Seq2SeqModel frozen() const;
  void zero_grad();

  /// Rows: embedding table row of each id plus its positional encoding.
  Tensor embed(std::span<const int> ids) const;
  Tensor positional_encoding(std::size_t n) const;

  /// Teacher-forced logits [m x vocab] for the gold target (which should end
  /// with EOS). `input_ids` marks encoder positions holding PAD, which
  /// attention ignores; pass the original ids or leave empty.
  Tensor forward_from_embeddings(const Tensor& input_embeddings, std::span<const int> target_ids,
                                 std::span<const int> input_ids = {}) const;
  Tensor forward(std::span<const int> input_ids, std::span<const int> target_ids) const;

  /// Greedy decoding until EOS (included) or max_len tokens.
  TokenIds generate(std::span<const int> input_ids, int max_len) const;

 private:
  Tensor attention(const std::string& prefix, const Tensor& query_in, const Tensor& memory,
                   const Tensor* additive_mask) const;
  Tensor feed_forward(const std::string& prefix, const Tensor& x) const;
  Tensor norm(const std::string& prefix, const Tensor& x) const;
  Tensor linear(const std::string& prefix, const Tensor& x) const;
  Tensor encode(const Tensor& input_embeddings, std::span<const int> input_ids, Tensor* key_mask) const;
  Tensor decode(const Tensor& memory, const Tensor* key_mask, std::span<const int> decoder_input) const;
  void check_ids(std::span<const int> ids, const char* what) const;

  ModelConfig config_;
  std::vector<NamedTensor> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
  std::vector<double> pe_;  // [max_seq_len x d_model]
};

/// Mean over pairs of the per-pair mean token cross-entropy, PAD ignored.
Tensor label_loss(const Seq2SeqModel& model, std::span<const TrainingPair> batch);

/// Gold target for teacher forcing: label ids followed by EOS.
TokenIds with_eos(std::span<const int> ids);

using CheckpointMetadata = std::map<std::string, std::string>;

/// Binary checkpoint: magic line, header length, a text header holding the
/// format version, config and parameter manifest (name, shape, byte offset),
/// then little-endian float64 payload.
void save_checkpoint(const std::filesystem::path& path, const Seq2SeqModel& model,
                     const CheckpointMetadata& metadata = {});
std::string serialize_checkpoint(const Seq2SeqModel& model, const CheckpointMetadata& metadata = {});

struct LoadedCheckpoint {
  Seq2SeqModel model;
  CheckpointMetadata metadata;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);
LoadedCheckpoint deserialize_checkpoint(std::string_view bytes);

}  // namespace saldist
