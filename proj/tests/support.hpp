// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the test programs: small synthetic corpora and the
// model and schedule settings used by the training checks.
#pragma once

#include <memory>
#include <vector>

#include <mtlcer/mtlcer.hpp>
#include <mtlcer/synthetic.hpp>

namespace mtlcer::testing {

struct EncodedSplits {
  Vocabulary vocab;
  std::vector<EncodedConversation> train, dev, si;
};

inline std::shared_ptr<const LabelSet> emory_labels() {
  return std::make_shared<const LabelSet>(LabelSet::emorynlp());
}

/// Splits `spec.labeled` conversations into the first n_train for training
/// and the rest for development; the unlabeled part becomes the SI corpus.
inline EncodedSplits synthetic_splits(const SyntheticSpec& spec, std::size_t n_train) {
  auto labels = emory_labels();
  auto syn = make_synthetic_corpus(spec, labels);
  Corpus train(syn.labeled.begin(), syn.labeled.begin() + static_cast<long>(n_train));
  Corpus dev(syn.labeled.begin() + static_cast<long>(n_train), syn.labeled.end());
  EncodedSplits out;
  out.vocab = build_vocab(std::vector<const Corpus*>{&syn.labeled, &syn.unlabeled});
  out.train = encode(train, out.vocab, *labels);
  out.dev = encode(dev, out.vocab, *labels);
  out.si = encode(syn.unlabeled, out.vocab, *labels);
  return out;
}

inline ModelConfig small_model(std::size_t dim, double dropout, bool multitask, bool iue, bool cue) {
  ModelConfig c;
  c.embed_dim = c.word_hidden = c.utt_hidden = c.si_hidden = dim;
  c.dropout = dropout;
  c.multitask = multitask;
  c.iue_bridge = iue;
  c.cue_bridge = cue;
  return c;
}

inline MtlModel<double> fresh_model(const ModelConfig& cfg, const Vocabulary& vocab, std::uint64_t seed) {
  auto er = Rng(seed).derive("embedding");
  return MtlModel<double>::create(cfg, random_embeddings<double>(vocab, cfg.embed_dim, er).matrix, Rng(seed));
}

// Five labeled conversations that the baseline should fit completely.
inline SyntheticSpec overfit_spec() {
  SyntheticSpec s;
  s.labeled = 5;
  s.unlabeled = 0;
  s.seed = 11;
  return s;
}

inline TrainSchedule overfit_schedule() {
  TrainSchedule s;
  s.max_epochs = 200;
  s.batch_size = 1;
  s.lr_main = 5e-3;
  s.early_stop_patience = 200;
  s.seed = 1;
  return s;
}

// The speaker-cue corpus and schedule for the multi-task comparison.
// Signature words are sparse enough that the labeled part alone teaches
// speaker identity poorly, while the speaker-only part is four times larger and
// each conversation contributes ten speaker pairs.
inline SyntheticSpec speaker_cue_spec() {
  SyntheticSpec s;
  s.labeled = 300;  // 200 for training, 100 for development
  s.unlabeled = 800;
  s.speakers = 6;
  s.speakers_per_conversation = 3;
  s.signature_words = 8;
  s.seed = 2024;
  return s;
}

inline constexpr std::size_t kSpeakerCueTrain = 200;

inline ModelConfig speaker_cue_model(bool multitask, bool iue, bool cue) {
  auto c = small_model(16, 0.1, multitask, iue, cue);
  c.pairs_per_conversation = 10;
  return c;
}

inline TrainSchedule speaker_cue_schedule() {
  TrainSchedule s;
  s.max_epochs = 20;
  s.batch_size = 4;
  s.lr_main = 2e-3;
  s.lr_embedding = 2e-3;
  s.mix_ratio = 2;
  s.early_stop_patience = 20;
  return s;
}

}  // namespace mtlcer::testing
