// SPDX-License-Identifier: Apache-2.0
//
// Generator for a synthetic corpus in which emotions can only be resolved
// through speaker identity.
//
// Every speaker has a few signature words, one of which appears in most of
// that speaker's utterances. Every utterance carries one marker word
// "cueK". The emotion of an utterance is label K of the marker in the same
// speaker's previous utterance, or label 0 when the speaker has not spoken
// before in the conversation. Speaker-only conversations follow the same
// process without emotion fields.
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "data.hpp"
#include "rng.hpp"

namespace mtlcer {

struct SyntheticSpec {
  std::size_t labeled = 200;
  std::size_t unlabeled = 800;
  std::size_t speakers = 6;
  std::size_t speakers_per_conversation = 3;
  std::size_t min_utterances = 8;
  std::size_t max_utterances = 12;
  std::size_t signature_words = 3;
  double signature_rate = 0.85;  // probability an utterance shows a signature word
  std::size_t filler_vocab = 40;
  std::size_t min_fillers = 2;
  std::size_t max_fillers = 5;
  std::uint64_t seed = 2024;
};

struct SyntheticCorpus {
  Corpus labeled;
  Corpus unlabeled;
};

inline Conversation synthetic_conversation(const SyntheticSpec& s, const LabelSet& labels,
                                           std::shared_ptr<const LabelSet> label_ptr, Rng& rng,
                                           const std::string& id, bool with_emotions) {
  if (s.speakers_per_conversation > s.speakers || s.speakers_per_conversation == 0)
    throw ArgumentError("synthetic: speakers_per_conversation must be in [1, speakers]");
  if (s.min_utterances == 0 || s.max_utterances < s.min_utterances)
    throw ArgumentError("synthetic: bad utterance range");
  std::vector<std::size_t> pool(s.speakers);
  for (std::size_t i = 0; i < s.speakers; ++i) pool[i] = i;
  rng.shuffle(std::span<std::size_t>(pool));
  pool.resize(s.speakers_per_conversation);

  const std::size_t k = labels.size();
  const auto n = s.min_utterances + static_cast<std::size_t>(rng.below(s.max_utterances - s.min_utterances + 1));
  Conversation conv;
  conv.id = id;
  conv.label_set = std::move(label_ptr);
  std::vector<int> last_marker(s.speakers, -1);
  for (std::size_t u = 0; u < n; ++u) {
    const auto spk = pool[static_cast<std::size_t>(rng.below(pool.size()))];
    const auto marker = static_cast<int>(rng.below(k));
    std::vector<std::string> words;
    const auto fillers = s.min_fillers + static_cast<std::size_t>(rng.below(s.max_fillers - s.min_fillers + 1));
    for (std::size_t f = 0; f < fillers; ++f) words.push_back("w" + std::to_string(rng.below(s.filler_vocab)));
    if (rng.bernoulli(s.signature_rate))
      words.push_back("s" + std::to_string(spk) + "x" + std::to_string(rng.below(s.signature_words)));
    words.push_back("cue" + std::to_string(marker));
    rng.shuffle(std::span<std::string>(words));
    std::string text;
    for (const auto& w : words) text += (text.empty() ? "" : " ") + w;
    std::optional<std::string> emotion;
    if (with_emotions) {
      const int label = last_marker[spk] < 0 ? 0 : last_marker[spk];
      emotion = labels.names[static_cast<std::size_t>(label)];
    }
    last_marker[spk] = marker;
    conv.utterances.push_back(make_utterance("speaker" + std::to_string(spk), text, emotion));
  }
  return conv;
}

inline SyntheticCorpus make_synthetic_corpus(const SyntheticSpec& s,
                                             std::shared_ptr<const LabelSet> labels) {
  SyntheticCorpus out;
  Rng root(s.seed);
  for (std::size_t i = 0; i < s.labeled; ++i) {
    auto r = root.derive("labeled", i);
    out.labeled.push_back(synthetic_conversation(s, *labels, labels, r, "syn-" + std::to_string(i), true));
  }
  for (std::size_t i = 0; i < s.unlabeled; ++i) {
    auto r = root.derive("unlabeled", i);
    out.unlabeled.push_back(synthetic_conversation(s, *labels, labels, r, "syn-si-" + std::to_string(i), false));
  }
  return out;
}

}  // namespace mtlcer
