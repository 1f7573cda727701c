#include "saldist/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "saldist/io.hpp"
#include "saldist/rng.hpp"

namespace saldist {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> tokens = {"<pad>", "<bos>", "<eos>", ",",   "[LABEL]",
                                                  "[RATIONALE]", "so", "the", "answer", "is"};
  return tokens;
}

std::optional<int> parse_int(std::string_view s) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
  return v;
}

std::vector<std::string> ids_to_strings(std::span<const int> ids, const Vocabulary& vocab) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(vocab.token(id));
  return out;
}

TokenIds strings_to_ids(const ojson& arr, const Vocabulary& vocab) {
  TokenIds out;
  for (const auto& s : arr) out.push_back(vocab.id(s.get<std::string>()));
  return out;
}

void add_fillers(Vocabulary& vocab, int vocab_size) {
  for (int i = 0; static_cast<int>(vocab.size()) < vocab_size; ++i) vocab.add("w" + std::to_string(i));
}

template <typename MakeExample>
void fill_splits(Dataset& ds, const SplitSizes& sizes, MakeExample make) {
  std::size_t index = 0;
  for (auto* split : {&ds.train, &ds.validation, &ds.test}) {
    const std::size_t n = split == &ds.train ? sizes.train : split == &ds.validation ? sizes.validation : sizes.test;
    split->reserve(n);
    for (std::size_t i = 0; i < n; ++i, ++index) {
      Rng rng = Rng::derive(ds.seed, index);
      Example ex = make(rng);
      ex.id = static_cast<std::int64_t>(index);
      split->push_back(std::move(ex));
    }
  }
}

}  // namespace

Vocabulary::Vocabulary() {
  for (const auto& t : reserved_tokens()) add(t);
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  const auto& reserved = reserved_tokens();
  if (tokens.size() < reserved.size() || !std::equal(reserved.begin(), reserved.end(), tokens.begin())) {
    throw DataError("vocabulary does not start with the reserved tokens");
  }
  Vocabulary v;
  for (std::size_t i = reserved.size(); i < tokens.size(); ++i) v.add(tokens[i]);
  return v;
}

int Vocabulary::add(const std::string& token) {
  if (token.empty() || token.find_first_of(" \t\n\r") != std::string::npos) {
    throw DataError("vocabulary tokens must be non-empty and contain no whitespace");
  }
  if (ids_.contains(token)) throw DataError("duplicate vocabulary token '" + token + "'");
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

int Vocabulary::id(std::string_view token) const {
  auto found = find(token);
  if (!found) throw DataError("out-of-vocabulary token '" + std::string(token) + "'");
  return *found;
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenIds Vocabulary::connective() const {
  TokenIds ids(token::kConnectiveLength);
  for (int i = 0; i < token::kConnectiveLength; ++i) ids[static_cast<std::size_t>(i)] = token::kConnectiveFirst + i;
  return ids;
}

TokenIds tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenIds ids;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto start = text.find_first_not_of(' ', pos);
    if (start == std::string_view::npos) break;
    auto end = text.find(' ', start);
    if (end == std::string_view::npos) end = text.size();
    ids.push_back(vocab.id(text.substr(start, end - start)));
    pos = end;
  }
  return ids;
}

std::string detokenize(std::span<const int> ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += vocab.token(ids[i]);
  }
  return out;
}

std::string to_string(TaskKind kind) {
  return kind == TaskKind::marker_classification ? "marker_classification" : "choice_selection";
}

TaskKind task_kind_from_string(std::string_view s) {
  if (s == "marker_classification" || s == "marker") return TaskKind::marker_classification;
  if (s == "choice_selection" || s == "choice") return TaskKind::choice_selection;
  throw ConfigError("unknown task kind '" + std::string(s) + "'");
}

const std::vector<Example>& Dataset::split(std::string_view name) const {
  if (name == "train") return train;
  if (name == "validation") return validation;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + std::string(name) + "'");
}

SplitSizes SplitSizes::from_total(std::size_t n) {
  SplitSizes s;
  s.validation = n / 10;
  s.test = n / 10;
  s.train = n - s.validation - s.test;
  return s;
}

Dataset gen_marker_classification(const MarkerTaskParams& p) {
  if (p.n_labels < 2) throw ConfigError("marker task needs n_labels >= 2");
  if (p.seq_len < 4) throw ConfigError("marker task needs seq_len >= 4");
  if (p.markers_per_label < 1) throw ConfigError("marker task needs markers_per_label >= 1");
  const int needed = token::kReservedCount + p.n_labels * (1 + p.markers_per_label) + 1;
  if (p.vocab_size < needed) {
    throw ConfigError("vocab_size " + std::to_string(p.vocab_size) + " cannot host " + std::to_string(p.n_labels) +
                      " disjoint marker sets (need >= " + std::to_string(needed) + ")");
  }
  Dataset ds;
  ds.task = TaskKind::marker_classification;
  ds.seed = p.seed;
  std::vector<int> labels, markers;
  for (int c = 0; c < p.n_labels; ++c) labels.push_back(ds.vocab.add("label" + std::to_string(c)));
  for (int c = 0; c < p.n_labels; ++c)
    for (int j = 0; j < p.markers_per_label; ++j)
      markers.push_back(ds.vocab.add("m" + std::to_string(c) + "_" + std::to_string(j)));
  const int first_filler = static_cast<int>(ds.vocab.size());
  add_fillers(ds.vocab, p.vocab_size);
  const auto n_fillers = static_cast<std::uint64_t>(p.vocab_size - first_filler);

  fill_splits(ds, p.splits, [&](Rng& rng) {
    Example ex;
    const auto c = rng.below(static_cast<std::uint64_t>(p.n_labels));
    const auto j = rng.below(static_cast<std::uint64_t>(p.markers_per_label));
    const auto pos = static_cast<int>(rng.below(static_cast<std::uint64_t>(p.seq_len)));
    ex.input_ids.resize(static_cast<std::size_t>(p.seq_len));
    for (int i = 0; i < p.seq_len; ++i) {
      ex.input_ids[static_cast<std::size_t>(i)] =
          i == pos ? markers[c * static_cast<std::size_t>(p.markers_per_label) + j]
                   : first_filler + static_cast<int>(rng.below(n_fillers));
    }
    ex.label_ids = {labels[c]};
    ex.planted_positions = std::vector<int>{pos};
    return ex;
  });
  return ds;
}

Dataset gen_choice_selection(const ChoiceTaskParams& p) {
  if (p.n_choices < 2) throw ConfigError("choice task needs n_choices >= 2");
  if (p.answer_pool < p.n_choices) throw ConfigError("choice task needs answer_pool >= n_choices");
  const int body_len = p.seq_len - 1 - p.n_choices;
  if (body_len < 2) throw ConfigError("choice task needs seq_len >= n_choices + 3");
  const int needed = token::kReservedCount + 2 * p.answer_pool + 1;
  if (p.vocab_size < needed) {
    throw ConfigError("vocab_size " + std::to_string(p.vocab_size) + " cannot host " + std::to_string(p.answer_pool) +
                      " answer/cue pairs (need >= " + std::to_string(needed) + ")");
  }
  Dataset ds;
  ds.task = TaskKind::choice_selection;
  ds.seed = p.seed;
  std::vector<int> answers, cues;
  for (int a = 0; a < p.answer_pool; ++a) answers.push_back(ds.vocab.add("a" + std::to_string(a)));
  for (int a = 0; a < p.answer_pool; ++a) cues.push_back(ds.vocab.add("c" + std::to_string(a)));
  const int first_filler = static_cast<int>(ds.vocab.size());
  add_fillers(ds.vocab, p.vocab_size);
  const auto n_fillers = static_cast<std::uint64_t>(p.vocab_size - first_filler);

  fill_splits(ds, p.splits, [&](Rng& rng) {
    Example ex;
    const auto correct = static_cast<int>(rng.below(static_cast<std::uint64_t>(p.answer_pool)));
    const auto cue_pos = static_cast<int>(rng.below(static_cast<std::uint64_t>(body_len)));
    for (int i = 0; i < body_len; ++i) {
      ex.input_ids.push_back(i == cue_pos ? cues[static_cast<std::size_t>(correct)]
                                          : first_filler + static_cast<int>(rng.below(n_fillers)));
    }
    ex.input_ids.push_back(token::kSep);

    std::vector<int> others;
    for (int a = 0; a < p.answer_pool; ++a)
      if (a != correct) others.push_back(a);
    // Partial Fisher-Yates: the first n_choices-1 entries become distractors.
    for (int i = 0; i < p.n_choices - 1; ++i) {
      const auto j = static_cast<std::size_t>(i) + rng.below(others.size() - static_cast<std::size_t>(i));
      std::swap(others[static_cast<std::size_t>(i)], others[j]);
    }
    std::vector<int> candidates(others.begin(), others.begin() + (p.n_choices - 1));
    candidates.push_back(correct);
    rng.shuffle(std::span<int>(candidates));

    std::vector<TokenIds> choices;
    int correct_slot = 0;
    for (int s = 0; s < p.n_choices; ++s) {
      const int a = candidates[static_cast<std::size_t>(s)];
      if (a == correct) correct_slot = s;
      ex.input_ids.push_back(answers[static_cast<std::size_t>(a)]);
      choices.push_back({answers[static_cast<std::size_t>(a)]});
    }
    ex.label_ids = {answers[static_cast<std::size_t>(correct)]};
    ex.choices = std::move(choices);
    ex.planted_positions = std::vector<int>{cue_pos, body_len + 1 + correct_slot};
    return ex;
  });
  return ds;
}

std::optional<int> marker_class(const Vocabulary& vocab, int id) {
  const auto& t = vocab.token(id);
  if (t.size() < 4 || t[0] != 'm') return std::nullopt;
  const auto us = t.find('_');
  if (us == std::string::npos) return std::nullopt;
  auto c = parse_int(std::string_view(t).substr(1, us - 1));
  if (!c || !parse_int(std::string_view(t).substr(us + 1))) return std::nullopt;
  return c;
}

std::optional<int> cue_answer(const Vocabulary& vocab, int id) {
  const auto& t = vocab.token(id);
  if (t.size() < 2 || t[0] != 'c') return std::nullopt;
  return parse_int(std::string_view(t).substr(1));
}

bool label_follows_from_planted(const Dataset& ds, const Example& ex) {
  if (!ex.planted_positions || ex.planted_positions->empty()) return false;
  const auto& planted = *ex.planted_positions;
  for (int p : planted) {
    if (p < 0 || static_cast<std::size_t>(p) >= ex.input_ids.size()) return false;
  }
  if (ds.task == TaskKind::marker_classification) {
    auto c = marker_class(ds.vocab, ex.input_ids[static_cast<std::size_t>(planted[0])]);
    return c && ex.label_ids == TokenIds{ds.vocab.id("label" + std::to_string(*c))};
  }
  if (planted.size() != 2) return false;
  auto a = cue_answer(ds.vocab, ex.input_ids[static_cast<std::size_t>(planted[0])]);
  if (!a) return false;
  const TokenIds expected{ds.vocab.id("a" + std::to_string(*a))};
  return ex.label_ids == expected && TokenIds{ex.input_ids[static_cast<std::size_t>(planted[1])]} == expected;
}

std::string example_to_json(const Example& ex, const Vocabulary& vocab) {
  ojson j;
  j["id"] = ex.id;
  j["input"] = ids_to_strings(ex.input_ids, vocab);
  j["label"] = ids_to_strings(ex.label_ids, vocab);
  if (ex.choices) {
    ojson choices = ojson::array();
    for (const auto& c : *ex.choices) choices.push_back(ids_to_strings(c, vocab));
    j["choices"] = std::move(choices);
  }
  if (ex.planted_positions) j["planted_positions"] = *ex.planted_positions;
  return j.dump();
}

Example example_from_json(std::string_view line, const Vocabulary& vocab) {
  const ojson j = ojson::parse(line);
  Example ex;
  ex.id = j.at("id").get<std::int64_t>();
  ex.input_ids = strings_to_ids(j.at("input"), vocab);
  ex.label_ids = strings_to_ids(j.at("label"), vocab);
  if (j.contains("choices")) {
    std::vector<TokenIds> choices;
    for (const auto& c : j["choices"]) choices.push_back(strings_to_ids(c, vocab));
    ex.choices = std::move(choices);
  }
  if (j.contains("planted_positions")) {
    auto planted = j["planted_positions"].get<std::vector<int>>();
    for (int p : planted) {
      if (p < 0 || static_cast<std::size_t>(p) >= ex.input_ids.size()) throw DataError("planted position out of range");
    }
    ex.planted_positions = std::move(planted);
  }
  if (ex.input_ids.empty()) throw DataError("empty input");
  return ex;
}

void write_split(const fs::path& path, const std::vector<Example>& split, const Vocabulary& vocab) {
  std::string out;
  for (const auto& ex : split) {
    out += example_to_json(ex, vocab);
    out.push_back('\n');
  }
  atomic_write(path, out);
}

std::vector<Example> read_split(const fs::path& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw DataError("missing input: " + path.string());
  std::vector<Example> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(example_from_json(line, vocab));
    } catch (const std::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    }
  }
  return out;
}

void write_vocab(const fs::path& path, const Vocabulary& vocab) {
  std::string out;
  for (const auto& t : vocab.tokens()) out += t + "\n";
  atomic_write(path, out);
}

Vocabulary read_vocab(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) tokens.push_back(line);
  }
  return Vocabulary::from_tokens(std::move(tokens));
}

void write_dataset(const fs::path& dir, const Dataset& ds) {
  write_vocab(dir / "vocab.txt", ds.vocab);
  ojson meta;
  meta["format_version"] = 1;
  meta["task"] = to_string(ds.task);
  meta["seed"] = ds.seed;
  atomic_write(dir / "meta.json", meta.dump(2) + "\n");
  write_split(dir / "train.jsonl", ds.train, ds.vocab);
  write_split(dir / "validation.jsonl", ds.validation, ds.vocab);
  write_split(dir / "test.jsonl", ds.test, ds.vocab);
}

Dataset read_dataset(const fs::path& dir) {
  Dataset ds;
  ds.vocab = read_vocab(dir / "vocab.txt");
  try {
    const auto meta = ojson::parse(read_file(dir / "meta.json"));
    ds.task = task_kind_from_string(meta.at("task").get<std::string>());
    ds.seed = meta.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / "meta.json").string() + ": " + e.what());
  }
  ds.train = read_split(dir / "train.jsonl", ds.vocab);
  ds.validation = read_split(dir / "validation.jsonl", ds.vocab);
  ds.test = read_split(dir / "test.jsonl", ds.vocab);
  return ds;
}

}  // namespace saldist
