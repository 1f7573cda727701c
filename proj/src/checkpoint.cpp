#include <bit>
#include <cmath>
#include <cstring>
#include <sstream>

#include "saldist/io.hpp"
#include "saldist/model.hpp"

namespace saldist {

namespace {

constexpr std::string_view kMagic = "SALDIST-CHECKPOINT\n";
constexpr int kFormatVersion = 1;

void put_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

std::vector<std::pair<std::string, int*>> int_fields(ModelConfig& c) {
  return {{"vocab_size", &c.vocab_size}, {"d_model", &c.d_model},           {"n_heads", &c.n_heads},
          {"n_layers_enc", &c.n_layers_enc}, {"n_layers_dec", &c.n_layers_dec}, {"d_ff", &c.d_ff},
          {"max_seq_len", &c.max_seq_len}};
}

}  // namespace

std::string serialize_checkpoint(const Seq2SeqModel& model, const CheckpointMetadata& metadata) {
  std::ostringstream header;
  header << "format_version " << kFormatVersion << '\n';
  ModelConfig config = model.config();
  for (const auto& [key, field] : int_fields(config)) header << "config." << key << ' ' << *field << '\n';
  header << "config.seed " << config.seed << '\n';
  for (const auto& [key, value] : metadata) {
    if (key.find_first_of(" \n") != std::string::npos || value.find('\n') != std::string::npos) {
      throw DataError("checkpoint metadata must be single-line with space-free keys");
    }
    header << "meta." << key << ' ' << value << '\n';
  }
  std::size_t offset = 0;
  for (const auto& [name, t] : model.parameters()) {
    header << "param " << name << ' ' << t.dim();
    for (auto d : t.shape()) header << ' ' << d;
    header << ' ' << offset << '\n';
    offset += t.size() * sizeof(double);
  }
  header << "end\n";

  const std::string h = header.str();
  std::string out(kMagic);
  out += std::to_string(h.size()) + "\n";
  out += h;
  out.reserve(out.size() + offset);
  for (const auto& [_, t] : model.parameters())
    for (double v : t.values()) put_le(out, v);
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Seq2SeqModel& model, const CheckpointMetadata& metadata) {
  atomic_write(path, serialize_checkpoint(model, metadata));
}

LoadedCheckpoint deserialize_checkpoint(std::string_view bytes) {
  if (!bytes.starts_with(kMagic)) throw DataError("checkpoint: bad magic");
  bytes.remove_prefix(kMagic.size());
  const auto nl = bytes.find('\n');
  if (nl == std::string_view::npos) throw DataError("checkpoint: truncated header length");
  std::size_t header_len = 0;
  try {
    header_len = std::stoull(std::string(bytes.substr(0, nl)));
  } catch (const std::exception&) {
    throw DataError("checkpoint: bad header length");
  }
  bytes.remove_prefix(nl + 1);
  if (bytes.size() < header_len) throw DataError("checkpoint: truncated header");
  std::istringstream header{std::string(bytes.substr(0, header_len))};
  const std::string_view payload = bytes.substr(header_len);

  ModelConfig config;
  auto fields = int_fields(config);
  CheckpointMetadata metadata;
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  bool ended = false;
  int version = -1;
  std::string line;
  while (std::getline(header, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    const auto sp = line.find(' ');
    const std::string key = line.substr(0, sp);
    const std::string rest = sp == std::string::npos ? "" : line.substr(sp + 1);
    try {
      if (key == "format_version") {
        version = std::stoi(rest);
      } else if (key == "config.seed") {
        config.seed = std::stoull(rest);
      } else if (key.starts_with("config.")) {
        bool known = false;
        for (auto& [name, field] : fields) {
          if (key.substr(7) == name) {
            *field = std::stoi(rest);
            known = true;
          }
        }
        if (!known) throw DataError("checkpoint: unknown config key " + key);
      } else if (key.starts_with("meta.")) {
        metadata[key.substr(5)] = rest;
      } else if (key == "param") {
        std::istringstream ps(rest);
        Entry e;
        std::size_t rank = 0;
        ps >> e.name >> rank;
        e.shape.resize(rank);
        for (auto& d : e.shape) ps >> d;
        ps >> e.offset;
        if (!ps) throw DataError("checkpoint: malformed param line");
        entries.push_back(std::move(e));
      } else {
        throw DataError("checkpoint: unknown header line '" + line + "'");
      }
    } catch (const std::logic_error&) {
      throw DataError("checkpoint: malformed header line '" + line + "'");
    }
  }
  if (!ended) throw DataError("checkpoint: header missing end marker");
  if (version != kFormatVersion) throw DataError("checkpoint: unsupported format version " + std::to_string(version));

  Seq2SeqModel model(config);
  if (entries.size() != model.parameters().size()) throw DataError("checkpoint: parameter count mismatch");
  for (const auto& e : entries) {
    Tensor& t = model.param(e.name);
    if (t.shape() != e.shape) throw DataError("checkpoint: shape mismatch for " + e.name);
    if (e.offset + t.size() * sizeof(double) > payload.size()) throw DataError("checkpoint: truncated payload");
    auto values = t.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      values[i] = get_le(payload.data() + e.offset + 8 * i);
      if (!std::isfinite(values[i])) throw DataError("checkpoint: non-finite value in " + e.name);
    }
  }
  return {std::move(model), std::move(metadata)};
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace saldist
