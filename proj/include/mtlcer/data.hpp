// SPDX-License-Identifier: Apache-2.0
//
// Corpus ingestion, tokenization, vocabulary, word vectors and batching.
//
// Conversation-JSONL: one JSON object per line,
//   {"id": str, "utterances": [{"speaker": str, "text": str, "emotion": str}, ...]}
// where "emotion" may be absent (speaker-only conversations). Blank lines are
// skipped. Word-vector files hold "token v1 ... vD" per line, separated by
// single spaces; an optional first line "count dim" is accepted.
#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace mtlcer {

inline constexpr const char* kUnkToken = "<unk>";
inline constexpr const char* kPadToken = "<pad>";
inline constexpr std::size_t kUnkIndex = 0;
inline constexpr std::size_t kPadIndex = 1;

/// The emotion inventory in force for a corpus.
struct LabelSet {
  std::vector<std::string> names;

  std::size_t size() const { return names.size(); }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    return std::nullopt;
  }

  bool operator==(const LabelSet&) const = default;

  static LabelSet meld() {
    return {{"neutral", "joy", "surprise", "anger", "sadness", "disgust", "fear"}};
  }
  static LabelSet emorynlp() {
    return {{"neutral", "joyful", "peaceful", "powerful", "scared", "mad", "sad"}};
  }
};

inline std::string to_lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

/// Lowercases, then splits on whitespace with every ASCII punctuation
/// character emitted as its own token. Bytes outside ASCII are kept inside words.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (u < 128 && std::isspace(u)) {
      flush();
    } else if (u < 128 && std::ispunct(u)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(u < 128 ? std::tolower(u) : u));
    }
  }
  flush();
  return out;
}

struct Utterance {
  std::string speaker;
  std::string text;
  std::vector<std::string> tokens;  // never empty; an empty text becomes {"<unk>"}
  std::optional<std::string> emotion;

  bool operator==(const Utterance&) const = default;
};

inline Utterance make_utterance(std::string speaker, std::string text,
                                std::optional<std::string> emotion = std::nullopt) {
  Utterance u{std::move(speaker), std::move(text), {}, std::move(emotion)};
  u.tokens = tokenize(u.text);
  if (u.tokens.empty()) u.tokens.push_back(kUnkToken);
  return u;
}

struct Conversation {
  std::string id;
  std::vector<Utterance> utterances;
  std::shared_ptr<const LabelSet> label_set;

  std::size_t size() const { return utterances.size(); }

  bool has_emotions() const {
    return std::any_of(utterances.begin(), utterances.end(),
                       [](const Utterance& u) { return u.emotion.has_value(); });
  }

  std::size_t speaker_count() const {
    std::vector<std::string> seen;
    for (const auto& u : utterances)
      if (std::find(seen.begin(), seen.end(), u.speaker) == seen.end()) seen.push_back(u.speaker);
    return seen.size();
  }

  bool operator==(const Conversation& o) const {
    return id == o.id && utterances == o.utterances;
  }
};

using Corpus = std::vector<Conversation>;

/// Parses conversation-JSONL. `source` names the input in error messages.
inline Corpus parse_corpus(std::istream& in, std::shared_ptr<const LabelSet> labels,
                           const std::string& source = "<stream>") {
  Corpus corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); }))
      continue;
    const std::string where = source + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(where, std::string("malformed JSON (") + e.what() + ")");
    }
    if (!j.is_object()) throw FormatError(where, "expected a JSON object");
    Conversation conv;
    conv.label_set = labels;
    if (!j.contains("id") || !j["id"].is_string()) throw FormatError(where, "missing string \"id\"");
    conv.id = j["id"].get<std::string>();
    if (!j.contains("utterances") || !j["utterances"].is_array())
      throw FormatError(where, "missing array \"utterances\"");
    std::size_t k = 0;
    for (const auto& ju : j["utterances"]) {
      const std::string uw = where + " utterance " + std::to_string(k++);
      if (!ju.is_object()) throw FormatError(uw, "expected an object");
      if (!ju.contains("speaker") || !ju["speaker"].is_string())
        throw FormatError(uw, "missing string \"speaker\"");
      if (!ju.contains("text") || !ju["text"].is_string())
        throw FormatError(uw, "missing string \"text\"");
      auto speaker = ju["speaker"].get<std::string>();
      if (speaker.empty()) throw FormatError(uw, "empty \"speaker\"");
      std::optional<std::string> emotion;
      if (ju.contains("emotion") && !ju["emotion"].is_null()) {
        if (!ju["emotion"].is_string()) throw FormatError(uw, "\"emotion\" must be a string");
        emotion = to_lower(ju["emotion"].get<std::string>());
        if (labels && !labels->find(*emotion))
          throw FormatError(uw, "unknown emotion label \"" + *emotion + "\"");
      }
      conv.utterances.push_back(
          make_utterance(std::move(speaker), ju["text"].get<std::string>(), std::move(emotion)));
    }
    if (conv.utterances.empty()) throw FormatError(where, "conversation has no utterances");
    corpus.push_back(std::move(conv));
  }
  return corpus;
}

inline Corpus load_corpus(const std::string& path, std::shared_ptr<const LabelSet> labels) {
  std::ifstream in(path);
  if (!in) throw FormatError(path, "cannot open corpus file");
  return parse_corpus(in, std::move(labels), path);
}

inline void write_corpus(std::ostream& out, const Corpus& corpus) {
  for (const auto& conv : corpus) {
    nlohmann::json j;
    j["id"] = conv.id;
    j["utterances"] = nlohmann::json::array();
    for (const auto& u : conv.utterances) {
      nlohmann::json ju;
      ju["speaker"] = u.speaker;
      ju["text"] = u.text;
      if (u.emotion) ju["emotion"] = *u.emotion;
      j["utterances"].push_back(std::move(ju));
    }
    out << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------

/// Token index map. Index 0 is <unk>, 1 is <pad>; the rest are ordered by
/// descending frequency, ties broken lexicographically.
class Vocabulary {
 public:
  Vocabulary() : tokens_{kUnkToken, kPadToken} {
    index_[kUnkToken] = kUnkIndex;
    index_[kPadToken] = kPadIndex;
  }

  explicit Vocabulary(const std::vector<std::string>& tokens) : Vocabulary() {
    if (tokens.size() < 2 || tokens[0] != kUnkToken || tokens[1] != kPadToken)
      throw ArgumentError("vocabulary must start with <unk>, <pad>");
    for (std::size_t i = 2; i < tokens.size(); ++i) add(tokens[i]);
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(std::size_t i) const { return tokens_.at(i); }

  std::size_t index(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnkIndex : it->second;
  }
  bool contains(const std::string& tok) const { return index_.count(tok) != 0; }

  /// FNV-1a over the newline-joined token list.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tokens_) {
      for (char c : t) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
      }
      h ^= '\n';
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  void add(const std::string& tok) {
    if (index_.count(tok)) throw ArgumentError("duplicate vocabulary token \"" + tok + "\"");
    index_[tok] = tokens_.size();
    tokens_.push_back(tok);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline Vocabulary build_vocab(const std::vector<const Corpus*>& corpora, std::size_t min_freq = 1) {
  std::map<std::string, std::size_t> freq;
  for (const auto* c : corpora)
    for (const auto& conv : *c)
      for (const auto& u : conv.utterances)
        for (const auto& t : u.tokens)
          if (t != kUnkToken && t != kPadToken) ++freq[t];
  std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens{kUnkToken, kPadToken};
  for (const auto& [tok, n] : items)
    if (n >= min_freq) tokens.push_back(tok);
  return Vocabulary(tokens);
}

inline Vocabulary build_vocab(const Corpus& corpus, std::size_t min_freq = 1) {
  return build_vocab(std::vector<const Corpus*>{&corpus}, min_freq);
}

// ---------------------------------------------------------------------------

template <std::floating_point T>
struct EmbeddingTable {
  Tensor<T> matrix;          // [|V| x D]
  bool trainable = false;
  std::vector<bool> pretrained;  // per row

  std::size_t dim() const { return matrix.cols(); }
  std::size_t rows() const { return matrix.rows(); }
};

struct EmbeddingMissReport {
  std::size_t found = 0;
  std::vector<std::string> missing;  // vocabulary tokens (excluding <unk>, <pad>) not in the file
};

namespace detail {

// Rows for tokens without a pretrained vector: uniform in +-sqrt(3 / D),
// i.e. unit variance per vector. <pad> is all zeros.
template <std::floating_point T>
void random_row(std::span<T> row, Rng& rng) {
  const double lim = std::sqrt(3.0 / static_cast<double>(row.size()));
  for (auto& v : row) v = static_cast<T>(rng.uniform(-lim, lim));
}

}  // namespace detail

template <std::floating_point T>
EmbeddingTable<T> random_embeddings(const Vocabulary& vocab, std::size_t dim, Rng& rng) {
  if (dim == 0) throw ArgumentError("embedding dimension must be positive");
  EmbeddingTable<T> table;
  table.matrix = Tensor<T>::zeros({vocab.size(), dim});
  table.pretrained.assign(vocab.size(), false);
  for (std::size_t i = 0; i < vocab.size(); ++i)
    if (i != kPadIndex) detail::random_row<T>(table.matrix.data().subspan(i * dim, dim), rng);
  return table;
}

/// Loads text word vectors for the tokens in `vocab`. Rows for tokens absent
/// from the file keep the seeded random initialization and are reported.
template <std::floating_point T>
EmbeddingTable<T> load_embeddings(std::istream& in, const Vocabulary& vocab, std::size_t dim,
                                  Rng& rng, EmbeddingMissReport* report = nullptr,
                                  const std::string& source = "<stream>") {
  auto table = random_embeddings<T>(vocab, dim, rng);
  std::vector<bool> seen(vocab.size(), false);
  std::string line;
  std::size_t lineno = 0;
  std::vector<double> vals;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    vals.clear();
    std::string field;
    bool bad = false;
    while (ls >> field) {
      double v = 0;
      auto [p, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
      if (ec != std::errc() || p != field.data() + field.size()) {
        bad = true;
        break;
      }
      vals.push_back(v);
    }
    const std::string where = source + ":" + std::to_string(lineno);
    if (lineno == 1 && vals.size() == 1 && !bad &&
        std::all_of(tok.begin(), tok.end(), [](unsigned char c) { return std::isdigit(c); }))
      continue;  // "count dim" header
    if (bad) throw FormatError(where, "non-numeric vector component \"" + field + "\"");
    if (vals.size() != dim)
      throw FormatError(where, "expected " + std::to_string(dim) + " components, found " +
                                   std::to_string(vals.size()));
    if (!vocab.contains(tok)) continue;
    const auto idx = vocab.index(tok);
    if (idx == kPadIndex) continue;
    auto row = table.matrix.data().subspan(idx * dim, dim);
    for (std::size_t k = 0; k < dim; ++k) row[k] = static_cast<T>(vals[k]);
    table.pretrained[idx] = true;
    seen[idx] = true;
  }
  if (report) {
    report->found = 0;
    report->missing.clear();
    for (std::size_t i = 2; i < vocab.size(); ++i) {
      if (seen[i])
        ++report->found;
      else
        report->missing.push_back(vocab.token(i));
    }
  }
  return table;
}

template <std::floating_point T>
EmbeddingTable<T> load_embeddings(const std::string& path, const Vocabulary& vocab, std::size_t dim,
                                  Rng& rng, EmbeddingMissReport* report = nullptr) {
  std::ifstream in(path);
  if (!in) throw FormatError(path, "cannot open word-vector file");
  return load_embeddings<T>(in, vocab, dim, rng, report, path);
}

// ---------------------------------------------------------------------------

/// A conversation mapped to vocabulary indices, with speakers numbered by
/// first appearance and emotions as label indices (-1 when absent).
struct EncodedConversation {
  std::string id;
  std::vector<std::vector<std::size_t>> tokens;
  std::vector<int> speakers;
  std::vector<int> emotions;

  std::size_t size() const { return tokens.size(); }
  bool has_emotions() const {
    return std::any_of(emotions.begin(), emotions.end(), [](int e) { return e >= 0; });
  }
};

inline EncodedConversation encode(const Conversation& conv, const Vocabulary& vocab,
                                  const LabelSet& labels) {
  if (conv.utterances.empty()) throw ArgumentError("conversation " + conv.id + " is empty");
  EncodedConversation e;
  e.id = conv.id;
  std::vector<std::string> names;
  for (const auto& u : conv.utterances) {
    std::vector<std::size_t> ids;
    ids.reserve(u.tokens.size());
    for (const auto& t : u.tokens) ids.push_back(vocab.index(t));
    e.tokens.push_back(std::move(ids));
    auto it = std::find(names.begin(), names.end(), u.speaker);
    if (it == names.end()) {
      e.speakers.push_back(static_cast<int>(names.size()));
      names.push_back(u.speaker);
    } else {
      e.speakers.push_back(static_cast<int>(it - names.begin()));
    }
    if (u.emotion) {
      auto li = labels.find(*u.emotion);
      if (!li) throw ArgumentError("unknown emotion label \"" + *u.emotion + "\" in " + conv.id);
      e.emotions.push_back(static_cast<int>(*li));
    } else {
      e.emotions.push_back(-1);
    }
  }
  return e;
}

inline std::vector<EncodedConversation> encode(const Corpus& corpus, const Vocabulary& vocab,
                                               const LabelSet& labels) {
  std::vector<EncodedConversation> out;
  out.reserve(corpus.size());
  for (const auto& c : corpus) out.push_back(encode(c, vocab, labels));
  return out;
}

/// Groups conversation indices [0, n) into batches of at most batch_size.
/// Conversations are never split; with shuffle the order comes from rng.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                          Rng& rng, bool shuffle) {
  if (batch_size == 0) throw ArgumentError("batch_size must be at least 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle) rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += batch_size)
    batches.emplace_back(order.begin() + i, order.begin() + std::min(n, i + batch_size));
  return batches;
}

}  // namespace mtlcer
