#pragma once

// Text-classification datasets: synthetic generation, CSV/JSONL loading,
// whitespace tokenization and train/dev/test split management.

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "epee/errors.hpp"
#include "epee/rng.hpp"

namespace epee {

using TokenId = std::size_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;

class Vocab {
 public:
  Vocab() : tokens_{"[PAD]", "[UNK]"} {
    index_.emplace(tokens_[0], kPadId);
    index_.emplace(tokens_[1], kUnkId);
  }

  /// Index of `token`, inserting it if new.
  TokenId add(const std::string& token) {
    auto [it, inserted] = index_.try_emplace(token, tokens_.size());
    if (inserted) tokens_.push_back(token);
    return it->second;
  }

  TokenId lookup(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }

  bool contains(const std::string& token) const { return index_.contains(token); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static Vocab from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < 2 || tokens[0] != "[PAD]" || tokens[1] != "[UNK]") {
      throw InputError("vocab must start with [PAD], [UNK]");
    }
    Vocab v;
    for (std::size_t i = 2; i < tokens.size(); ++i) {
      if (v.add(tokens[i]) != i) throw InputError("vocab has duplicate token \"" + tokens[i] + "\"");
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct Sample {
  std::string text;
  std::size_t label = 0;
};

struct Splits {
  std::vector<std::size_t> train, dev, test;
};

enum class Split { Train, Dev, Test };

inline Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "dev") return Split::Dev;
  if (name == "test") return Split::Test;
  throw InputError("unknown split \"" + std::string(name) + "\" (expected train|dev|test)");
}

struct Dataset {
  std::vector<Sample> samples;
  Splits splits;
  std::size_t num_classes = 0;
  Vocab vocab;

  const std::vector<std::size_t>& indices(Split s) const {
    switch (s) {
      case Split::Train: return splits.train;
      case Split::Dev: return splits.dev;
      case Split::Test: return splits.test;
    }
    return splits.test;
  }
};

/// Lowercased whitespace tokens.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

/// Fixed-length id sequence: truncated to, then PAD-filled up to, max_seq_len.
inline std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab, std::size_t max_seq_len) {
  std::vector<TokenId> ids(max_seq_len, kPadId);
  const auto words = split_words(text);
  const std::size_t n = std::min(words.size(), max_seq_len);
  for (std::size_t i = 0; i < n; ++i) ids[i] = vocab.lookup(words[i]);
  return ids;
}

/// Seeded 70/15/15 shuffle split.
inline Splits make_splits(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t n_train = n * 70 / 100;
  const std::size_t n_dev = n * 15 / 100;
  Splits s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.dev.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
               order.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev), order.end());
  return s;
}

/// Vocabulary from the train split only, in first-appearance order.
inline Vocab build_vocab(const std::vector<Sample>& samples, const std::vector<std::size_t>& train) {
  Vocab v;
  for (std::size_t i : train) {
    for (const auto& w : split_words(samples[i].text)) v.add(w);
  }
  return v;
}

struct SyntheticSpec {
  std::size_t num_classes = 4;
  std::size_t samples_per_class = 400;
  std::size_t vocab_size = 64;
  std::size_t signal_tokens_per_class = 8;
  double noise_rate = 0.1;
  double ambiguous_fraction = 0.1;
  /// Words per sample.
  std::size_t sample_length = 12;
  /// Minimum lead of the true class's signal count over the competing class
  /// in an ambiguous sample. 0 makes ambiguous samples genuinely undecidable.
  std::size_t ambiguous_margin = 2;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_classes < 2) throw InputError("synthetic: need at least 2 classes");
    if (samples_per_class == 0 || signal_tokens_per_class == 0 || sample_length == 0) {
      throw InputError("synthetic: counts must be positive");
    }
    if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) throw InputError("synthetic: noise_rate outside [0, 1]");
    if (!(ambiguous_fraction >= 0.0 && ambiguous_fraction <= 1.0)) {
      throw InputError("synthetic: ambiguous_fraction outside [0, 1]");
    }
    if (vocab_size < num_classes * signal_tokens_per_class + 1) {
      throw InputError("synthetic: vocab_size " + std::to_string(vocab_size) + " too small for " +
                       std::to_string(num_classes) + " x " + std::to_string(signal_tokens_per_class) +
                       " disjoint signal tokens plus noise");
    }
  }
};

/// Word for synthetic token `i`: signal tokens of class c occupy
/// [c * S, (c + 1) * S), everything above is noise.
inline std::string synthetic_word(std::size_t i) { return "w" + std::to_string(i); }

/// Each word is noise with probability noise_rate, otherwise a signal token.
/// Ordinary samples draw every signal token from their own class. Ambiguous
/// samples split their signal between their own class and one other, with
/// their own class ahead by at least `ambiguous_margin` (ties on odd
/// remainders are broken by a coin flip).
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t S = spec.signal_tokens_per_class;
  const std::size_t noise_begin = spec.num_classes * S;
  const std::size_t noise_count = spec.vocab_size - noise_begin;

  Dataset ds;
  ds.num_classes = spec.num_classes;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      std::vector<bool> is_signal(spec.sample_length);
      std::size_t n_signal = 0;
      for (std::size_t i = 0; i < spec.sample_length; ++i) {
        is_signal[i] = !rng.bernoulli(spec.noise_rate);
        n_signal += is_signal[i] ? 1 : 0;
      }
      // Class for each signal slot.
      std::vector<std::size_t> owners(n_signal, c);
      if (rng.bernoulli(spec.ambiguous_fraction) && n_signal > 0) {
        std::size_t other = rng.below(spec.num_classes - 1);
        if (other >= c) ++other;
        std::size_t own = std::min(n_signal, (n_signal + spec.ambiguous_margin) / 2);
        if ((n_signal + spec.ambiguous_margin) % 2 == 1 && own < n_signal && rng.bernoulli(0.5)) ++own;
        for (std::size_t k = own; k < n_signal; ++k) owners[k] = other;
        rng.shuffle(owners);
      }
      std::string text;
      std::size_t next_owner = 0;
      for (std::size_t i = 0; i < spec.sample_length; ++i) {
        const std::size_t id = is_signal[i] ? owners[next_owner++] * S + rng.below(S)
                                            : noise_begin + rng.below(noise_count);
        if (!text.empty()) text.push_back(' ');
        text += synthetic_word(id);
      }
      ds.samples.push_back({std::move(text), c});
    }
  }
  ds.splits = make_splits(ds.samples.size(), rng.next_u64());
  ds.vocab = build_vocab(ds.samples, ds.splits.train);
  return ds;
}

/// Parses the body of a "synthetic:" data URI: comma-separated key=value
/// pairs (classes, per_class, vocab, signal, noise, ambiguous, margin,
/// length, seed) plus the presets "easy" (no noise, no ambiguity) and
/// "hard" (noise 0.2, ambiguity 0.3).
inline SyntheticSpec parse_synthetic_spec(std::string_view body, std::uint64_t default_seed) {
  SyntheticSpec spec;
  spec.seed = default_seed;
  std::size_t pos = 0;
  while (pos <= body.size()) {
    std::size_t comma = body.find(',', pos);
    if (comma == std::string_view::npos) comma = body.size();
    const std::string item(body.substr(pos, comma - pos));
    pos = comma + 1;
    if (item.empty()) continue;
    if (item == "easy") {
      spec.noise_rate = 0.0;
      spec.ambiguous_fraction = 0.0;
      continue;
    }
    if (item == "hard") {
      spec.noise_rate = 0.2;
      spec.ambiguous_fraction = 0.3;
      continue;
    }
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw InputError("synthetic spec: expected key=value, got \"" + item + "\"");
    const std::string key = item.substr(0, eq);
    const std::string val = item.substr(eq + 1);
    try {
      if (key == "classes") spec.num_classes = std::stoul(val);
      else if (key == "per_class") spec.samples_per_class = std::stoul(val);
      else if (key == "vocab") spec.vocab_size = std::stoul(val);
      else if (key == "signal") spec.signal_tokens_per_class = std::stoul(val);
      else if (key == "noise" || key == "noise_rate") spec.noise_rate = std::stod(val);
      else if (key == "ambiguous" || key == "ambiguous_fraction") spec.ambiguous_fraction = std::stod(val);
      else if (key == "margin") spec.ambiguous_margin = std::stoul(val);
      else if (key == "length") spec.sample_length = std::stoul(val);
      else if (key == "seed") spec.seed = std::stoull(val);
      else throw InputError("synthetic spec: unknown key \"" + key + "\"");
    } catch (const std::logic_error&) {
      throw InputError("synthetic spec: bad value for \"" + key + "\": \"" + val + "\"");
    }
  }
  spec.validate();
  return spec;
}

namespace detail {

/// One RFC 4180 record starting at `pos`. Returns false at end of input.
/// `line` tracks the current physical line; quoted fields may span lines.
inline bool next_csv_record(const std::string& text, std::size_t& pos, std::size_t& line,
                            std::vector<std::string>& fields) {
  fields.clear();
  if (pos >= text.size()) return false;
  std::string field;
  bool quoted = false;
  bool field_was_quoted = false;
  const std::size_t start_line = line;
  while (pos < text.size()) {
    const char ch = text[pos++];
    if (quoted) {
      if (ch == '"') {
        if (pos < text.size() && text[pos] == '"') {
          field.push_back('"');
          ++pos;
        } else {
          quoted = false;
        }
      } else {
        if (ch == '\n') ++line;
        field.push_back(ch);
      }
      continue;
    }
    if (ch == '"') {
      if (!field.empty() || field_was_quoted) {
        throw InputError("line " + std::to_string(start_line) + ": stray quote inside unquoted field");
      }
      quoted = true;
      field_was_quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(field));
      field.clear();
      field_was_quoted = false;
    } else if (ch == '\r' && pos < text.size() && text[pos] == '\n') {
      continue;
    } else if (ch == '\n') {
      ++line;
      fields.push_back(std::move(field));
      return true;
    } else {
      if (field_was_quoted) {
        throw InputError("line " + std::to_string(start_line) + ": text after closing quote");
      }
      field.push_back(ch);
    }
  }
  if (quoted) throw InputError("line " + std::to_string(start_line) + ": unterminated quoted field");
  fields.push_back(std::move(field));
  return true;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Labels become contiguous indices in order of first appearance.
inline Dataset finish_dataset(std::vector<Sample> samples, std::size_t num_classes, std::uint64_t seed) {
  Dataset ds;
  ds.samples = std::move(samples);
  ds.num_classes = num_classes;
  ds.splits = make_splits(ds.samples.size(), seed);
  ds.vocab = build_vocab(ds.samples, ds.splits.train);
  return ds;
}

}  // namespace detail

/// Comma-delimited UTF-8 CSV with a header row.
inline Dataset load_csv(const std::string& path, const std::string& text_column, const std::string& label_column,
                        std::uint64_t seed) {
  const std::string text = detail::read_file(path);
  std::size_t pos = 0;
  std::size_t line = 1;
  std::vector<std::string> fields;
  try {
    if (!detail::next_csv_record(text, pos, line, fields) || (fields.size() == 1 && fields[0].empty())) {
      throw InputError("empty file");
    }
    if (!fields.empty() && fields[0].starts_with("\xEF\xBB\xBF")) fields[0].erase(0, 3);
    const auto header = fields;
    auto column = [&](const std::string& name) {
      auto it = std::find(header.begin(), header.end(), name);
      if (it == header.end()) throw InputError("line 1: missing column \"" + name + "\"");
      return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t text_idx = column(text_column);
    const std::size_t label_idx = column(label_column);

    std::vector<Sample> samples;
    std::map<std::string, std::size_t> labels;
    while (true) {
      const std::size_t record_line = line;
      if (!detail::next_csv_record(text, pos, line, fields)) break;
      if (fields.size() == 1 && fields[0].empty()) continue;  // blank line
      if (fields.size() != header.size()) {
        throw InputError("line " + std::to_string(record_line) + ": expected " + std::to_string(header.size()) +
                         " fields, got " + std::to_string(fields.size()));
      }
      const auto [it, inserted] = labels.try_emplace(fields[label_idx], labels.size());
      samples.push_back({fields[text_idx], it->second});
    }
    if (samples.empty()) throw InputError("no data rows");
    if (labels.size() < 2) throw InputError("need at least 2 distinct labels");
    return detail::finish_dataset(std::move(samples), labels.size(), seed);
  } catch (const InputError& e) {
    throw InputError(path + ": " + e.what());
  }
}

/// One {"text": ..., "label": ...} object per line; labels may be strings or integers.
inline Dataset load_jsonl(const std::string& path, std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  std::vector<Sample> samples;
  std::map<std::string, std::size_t> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.contains("text") || !j.contains("label")) throw InputError("needs \"text\" and \"label\"");
      const auto& lab = j.at("label");
      const std::string key = lab.is_string() ? lab.get<std::string>() : lab.dump();
      const auto [it, inserted] = labels.try_emplace(key, labels.size());
      samples.push_back({j.at("text").get<std::string>(), it->second});
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (samples.empty()) throw InputError(path + ": no samples");
  if (labels.size() < 2) throw InputError(path + ": need at least 2 distinct labels");
  return detail::finish_dataset(std::move(samples), labels.size(), seed);
}

/// Vocab and splits, enough to reproduce a run's tokenization.
inline nlohmann::json dataset_cache_json(const Dataset& ds) {
  return {{"num_classes", ds.num_classes},
          {"vocab", ds.vocab.tokens()},
          {"splits", {{"train", ds.splits.train}, {"dev", ds.splits.dev}, {"test", ds.splits.test}}}};
}

/// Replaces `ds`'s vocab and splits with a cached copy after checking it fits.
inline void apply_dataset_cache(Dataset& ds, const nlohmann::json& cache) {
  try {
    Splits s;
    s.train = cache.at("splits").at("train").get<std::vector<std::size_t>>();
    s.dev = cache.at("splits").at("dev").get<std::vector<std::size_t>>();
    s.test = cache.at("splits").at("test").get<std::vector<std::size_t>>();
    std::vector<bool> seen(ds.samples.size(), false);
    for (const auto* part : {&s.train, &s.dev, &s.test}) {
      for (std::size_t i : *part) {
        if (i >= seen.size() || seen[i]) throw InputError("dataset cache: splits overlap or exceed the data");
        seen[i] = true;
      }
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
      throw InputError("dataset cache: splits do not cover every sample");
    }
    if (cache.at("num_classes").get<std::size_t>() != ds.num_classes) {
      throw InputError("dataset cache: class count mismatch");
    }
    ds.vocab = Vocab::from_tokens(cache.at("vocab").get<std::vector<std::string>>());
    ds.splits = std::move(s);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("dataset cache: ") + e.what());
  }
}

}  // namespace epee
