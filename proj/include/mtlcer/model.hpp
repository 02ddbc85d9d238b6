// SPDX-License-Identifier: Apache-2.0
//
// Emotion recognition (CER) and speaker identification (SI) models and their
// multi-task composite.
//
// Each task has its own hierarchical encoder: a word-level Bi-GRU with
// attention pooling per utterance, then an utterance-level Bi-GRU over the
// conversation. In multi-task mode two optional bridges connect them:
//   - word level: a shared word Bi-GRU whose states are gated into each
//     task's word states;
//   - utterance level: each task attends bilinearly over the other task's
//     contextual utterance vectors and appends the attended vector.
// The embedding table is shared by both tasks.
#pragma once

#include <algorithm>
#include <concepts>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "data.hpp"
#include "nn.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace mtlcer {

enum class Precision { Single, Double };

struct ModelConfig {
  std::size_t embed_dim = 300;
  std::size_t word_hidden = 200;  // per direction
  std::size_t utt_hidden = 200;   // per direction
  std::size_t num_emotions = 7;
  std::size_t pairs_per_conversation = 3;
  std::size_t si_hidden = 200;
  double dropout = 0.5;
  bool multitask = true;
  bool iue_bridge = true;
  bool cue_bridge = true;
  bool balance_pairs = false;
  Precision precision = Precision::Double;

  bool uses_iue() const { return multitask && iue_bridge; }
  bool uses_cue() const { return multitask && cue_bridge; }

  /// Width of the contextual representation handed to the task heads.
  std::size_t context_dim() const { return (uses_cue() ? 4 : 2) * utt_hidden; }

  void validate() const {
    auto pos = [](std::size_t v, const char* name) {
      if (v == 0) throw ArgumentError(std::string("model.") + name + " must be positive");
    };
    pos(embed_dim, "embed_dim");
    pos(word_hidden, "word_hidden");
    pos(utt_hidden, "utt_hidden");
    pos(num_emotions, "num_emotions");
    pos(pairs_per_conversation, "pairs_per_conversation");
    pos(si_hidden, "si_hidden");
    if (!(dropout >= 0.0) || dropout >= 1.0)
      throw ArgumentError("model.dropout must be in [0, 1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <std::floating_point T>
struct TaskEncoderParams {
  BiGruParams<T> word;
  AttnPoolParams<T> pool;
  BiGruParams<T> utt;

  static TaskEncoderParams init(const ModelConfig& c, Rng& rng) {
    TaskEncoderParams p;
    p.word = BiGruParams<T>::init(c.embed_dim, c.word_hidden, rng);
    p.pool = AttnPoolParams<T>::init(2 * c.word_hidden, rng);
    p.utt = BiGruParams<T>::init(2 * c.word_hidden, c.utt_hidden, rng);
    return p;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    word.visit(prefix + "word.", f);
    pool.visit(prefix + "pool.", f);
    utt.visit(prefix + "utt.", f);
  }
};

template <std::floating_point T>
struct MtlParams {
  Tensor<T> embedding;  // [|V| x embed_dim], shared by both tasks

  TaskEncoderParams<T> cer;
  Tensor<T> w_cer;  // [K x context_dim]

  TaskEncoderParams<T> si;
  Tensor<T> w_f;   // [si_hidden x 4 context_dim]
  Tensor<T> b_f;   // [si_hidden]
  Tensor<T> w_si;  // [2 x si_hidden]

  BiGruParams<T> shared_word;
  GateParams<T> gate_cer, gate_si;
  BilinearParams<T> bilinear_cer, bilinear_si;  // W_c for CER <- SI and SI <- CER

  /// Calls f(name, tensor) for every tensor, embedding first, in a fixed order.
  template <typename F>
  void visit(F&& f) {
    f(std::string("embedding"), embedding);
    cer.visit("cer.", f);
    f(std::string("cer.W_CER"), w_cer);
    si.visit("si.", f);
    f(std::string("si.W_f"), w_f);
    f(std::string("si.b_f"), b_f);
    f(std::string("si.W_SI"), w_si);
    shared_word.visit("shared.word.", f);
    gate_cer.visit("shared.gate_cer.", f);
    gate_si.visit("shared.gate_si.", f);
    bilinear_cer.visit("shared.bilinear_cer.", f);
    bilinear_si.visit("shared.bilinear_si.", f);
  }

  /// Trainable tensors excluding the embedding table.
  std::vector<Tensor<T>> weights() {
    std::vector<Tensor<T>> out;
    visit([&](const std::string& name, Tensor<T>& t) {
      if (name != "embedding") out.push_back(t);
    });
    return out;
  }
};

template <std::floating_point T>
class MtlModel {
 public:
  ModelConfig config;
  MtlParams<T> params;

  /// Initializes every weight from independent streams derived from `seed`,
  /// one per parameter group, so the CER weights are the same whatever the
  /// multi-task flags are.
  static MtlModel create(const ModelConfig& cfg, Tensor<T> embedding, const Rng& seed) {
    cfg.validate();
    if (embedding.rank() != 2 || embedding.cols() != cfg.embed_dim)
      throw DimensionError("embedding table " + shape_str(embedding.shape()) +
                           " does not match embed_dim " + std::to_string(cfg.embed_dim));
    MtlModel m;
    m.config = cfg;
    auto& p = m.params;
    p.embedding = std::move(embedding);

    auto rc = seed.derive("init-cer");
    p.cer = TaskEncoderParams<T>::init(cfg, rc);
    p.w_cer = init_param<T>({cfg.num_emotions, cfg.context_dim()}, rc);

    auto rs = seed.derive("init-si");
    p.si = TaskEncoderParams<T>::init(cfg, rs);
    p.w_f = init_param<T>({cfg.si_hidden, 4 * cfg.context_dim()}, rs);
    p.b_f = init_bias<T>(cfg.si_hidden);
    p.w_si = init_param<T>({2, cfg.si_hidden}, rs);

    auto rh = seed.derive("init-shared");
    p.shared_word = BiGruParams<T>::init(cfg.embed_dim, cfg.word_hidden, rh);
    p.gate_cer = GateParams<T>::init(2 * cfg.word_hidden, rh);
    p.gate_si = GateParams<T>::init(2 * cfg.word_hidden, rh);
    p.bilinear_cer = BilinearParams<T>::init(2 * cfg.utt_hidden, rh);
    p.bilinear_si = BilinearParams<T>::init(2 * cfg.utt_hidden, rh);
    return m;
  }

  /// Deep copy of all parameter values.
  MtlModel clone() const {
    MtlModel m = *this;
    m.params.visit([](const std::string&, Tensor<T>& t) { t = t.clone(t.requires_grad()); });
    return m;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    const_cast<MtlParams<T>&>(params).visit(
        [&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, t); });
    return out;
  }
};

enum class Side { Cer, Si };

inline Side other(Side s) { return s == Side::Cer ? Side::Si : Side::Cer; }

/// Independent dropout streams, one per encoder path.
struct DropoutStreams {
  Rng cer;
  Rng si;
  Rng shared;

  static DropoutStreams from(const Rng& base) {
    return {base.derive("dropout-cer"), base.derive("dropout-si"), base.derive("dropout-shared")};
  }
};

/// One forward computation over a conversation. Intermediate results are
/// computed on first request and cached, so the CER and SI heads share the
/// encoders of a single pass.
template <std::floating_point T>
class ForwardPass {
 public:
  ForwardPass(const MtlModel<T>& model, Tape<T>& tape, const EncodedConversation& conv, bool mtl,
              bool training = false, DropoutStreams* streams = nullptr)
      : model_(model), tape_(tape), conv_(conv), mtl_(mtl), training_(training), streams_(streams) {
    if (conv.size() == 0) throw ArgumentError("forward: empty conversation");
    if (training_ && model.config.dropout > 0 && streams_ == nullptr)
      throw ArgumentError("forward: training with dropout needs random streams");
  }

  const ModelConfig& config() const { return model_.config; }
  bool multitask() const { return mtl_; }
  bool uses_iue() const { return mtl_ && model_.config.iue_bridge; }
  bool uses_cue() const { return mtl_ && model_.config.cue_bridge; }

  /// Individual utterance vectors as rows, [N x 2 word_hidden].
  const Tensor<T>& individual(Side side) {
    auto& st = state(side);
    if (!st.individual.defined()) encode_individual(side);
    return st.individual;
  }

  /// Word attention weights of each utterance.
  const std::vector<Tensor<T>>& word_attention(Side side) {
    individual(side);
    return state(side).alphas;
  }

  /// Utterance-level Bi-GRU output before any bridge, [N x 2 utt_hidden].
  const Tensor<T>& context(Side side) {
    auto& st = state(side);
    if (!st.context.defined()) {
      auto f = bigru(tape_, individual(side), encoder(side).utt);
      st.context = drop(f, stream(side));
    }
    return st.context;
  }

  /// Representation used by the task head: context(side), or with the
  /// utterance-level bridge, context(side) ++ attention over context(other).
  const Tensor<T>& contextual(Side side) {
    auto& st = state(side);
    if (!st.contextual.defined()) {
      if (uses_cue()) {
        const auto& w = side == Side::Cer ? model_.params.bilinear_cer : model_.params.bilinear_si;
        auto ca = cross_attend(tape_, context(side), context(other(side)), w);
        st.contextual = ca.features;
        st.cross_weights = ca.weights;
      } else {
        st.contextual = context(side);
      }
    }
    return st.contextual;
  }

  /// Cross-attention weights [N x N] of `side` over the other side; undefined
  /// when the utterance-level bridge is off.
  const Tensor<T>& cross_weights(Side side) {
    contextual(side);
    return state(side).cross_weights;
  }

  /// Emotion logits, one row per utterance, [N x K].
  const Tensor<T>& cer_logits() {
    if (!cer_logits_.defined())
      cer_logits_ = matmul(tape_, contextual(Side::Cer), transpose(tape_, model_.params.w_cer));
    return cer_logits_;
  }

  /// Emotion distributions, one row per utterance.
  Tensor<T> cer_distributions() { return softmax_rows(tape_, cer_logits()); }

  /// Same-speaker logits for the pair (i, j); index 1 means same speaker.
  Tensor<T> si_logits(std::size_t i, std::size_t j) {
    const std::size_t n = conv_.size();
    if (i >= n || j >= n)
      throw ArgumentError("si pair (" + std::to_string(i) + ", " + std::to_string(j) +
                          ") out of range for " + std::to_string(n) + " utterances");
    const auto& f = contextual(Side::Si);
    auto delta = si_pair_features(tape_, row(tape_, f, i), row(tape_, f, j));
    auto hidden = relu(tape_, linear(tape_, model_.params.w_f, delta, model_.params.b_f));
    return matvec(tape_, model_.params.w_si, hidden);
  }

 private:
  struct SideState {
    Tensor<T> individual;
    std::vector<Tensor<T>> alphas;
    Tensor<T> context;
    Tensor<T> contextual;
    Tensor<T> cross_weights;
  };

  SideState& state(Side s) { return s == Side::Cer ? cer_ : si_; }
  const TaskEncoderParams<T>& encoder(Side s) const {
    return s == Side::Cer ? model_.params.cer : model_.params.si;
  }
  Rng* stream(Side s) {
    if (!streams_) return nullptr;
    return s == Side::Cer ? &streams_->cer : &streams_->si;
  }

  Tensor<T> drop(const Tensor<T>& x, Rng* rng) {
    if (!training_ || model_.config.dropout == 0.0) return x;
    return dropout(tape_, x, model_.config.dropout, true, *rng);
  }

  Tensor<T> embed(std::size_t utt) {
    return gather_rows<T>(tape_, model_.params.embedding, conv_.tokens[utt]);
  }

  const Tensor<T>& shared_words(std::size_t utt) {
    if (shared_.empty()) shared_.resize(conv_.size());
    if (!shared_[utt].defined()) {
      Rng* r = streams_ ? &streams_->shared : nullptr;
      auto x = drop(embed(utt), r);
      shared_[utt] = drop(bigru(tape_, x, model_.params.shared_word), r);
    }
    return shared_[utt];
  }

  void encode_individual(Side side) {
    auto& st = state(side);
    const auto& enc = encoder(side);
    const auto& gate = side == Side::Cer ? model_.params.gate_cer : model_.params.gate_si;
    std::vector<Tensor<T>> vecs;
    vecs.reserve(conv_.size());
    st.alphas.clear();
    for (std::size_t i = 0; i < conv_.size(); ++i) {
      if (conv_.tokens[i].empty())
        throw ArgumentError("utterance " + std::to_string(i) + " of " + conv_.id + " has no tokens");
      auto x = drop(embed(i), stream(side));
      auto h = drop(bigru(tape_, x, enc.word), stream(side));
      if (uses_iue()) h = gate_fuse(tape_, h, shared_words(i), gate);
      auto pooled = attention_pool(tape_, h, enc.pool);
      vecs.push_back(pooled.vector);
      st.alphas.push_back(pooled.weights);
    }
    st.individual = stack_rows<T>(tape_, vecs);
  }

  const MtlModel<T>& model_;
  Tape<T>& tape_;
  const EncodedConversation& conv_;
  bool mtl_;
  bool training_;
  DropoutStreams* streams_;
  SideState cer_, si_;
  std::vector<Tensor<T>> shared_;
  Tensor<T> cer_logits_;
};

// ---------------------------------------------------------------------------
// Pair sampling

struct PairSample {
  std::size_t i = 0;
  std::size_t j = 0;
  int label = 0;  // 1 same speaker, 0 different

  bool operator==(const PairSample&) const = default;
};

/// Samples min(T, N(N-1)/2) distinct unordered pairs (i < j) uniformly
/// without replacement. With `balance`, same- and different-speaker pairs are
/// alternated while both kinds remain.
inline std::vector<PairSample> sample_pairs(const EncodedConversation& conv, std::size_t t, Rng& rng,
                                            bool balance = false) {
  const std::size_t n = conv.size();
  if (n < 2 || t == 0) return {};
  std::vector<PairSample> all;
  all.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      all.push_back({i, j, conv.speakers[i] == conv.speakers[j] ? 1 : 0});
  const std::size_t count = std::min(t, all.size());
  if (!balance) {
    for (std::size_t k = 0; k < count; ++k) {
      const auto pick = k + static_cast<std::size_t>(rng.below(all.size() - k));
      std::swap(all[k], all[pick]);
    }
    all.resize(count);
    return all;
  }
  std::vector<PairSample> same, diff;
  for (const auto& p : all) (p.label ? same : diff).push_back(p);
  rng.shuffle(std::span<PairSample>(same));
  rng.shuffle(std::span<PairSample>(diff));
  std::vector<PairSample> out;
  std::size_t a = 0, b = 0;
  while (out.size() < count) {
    const bool want_same = out.size() % 2 == 0;
    if ((want_same && a < same.size()) || b >= diff.size())
      out.push_back(same[a++]);
    else
      out.push_back(diff[b++]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

template <std::floating_point T>
struct Loss {
  Tensor<T> value;            // scalar
  bool has_gradient = false;  // false when nothing contributed (value is 0)
  std::size_t count = 0;      // number of averaged terms
};

/// Mean cross-entropy over utterances with a gold label; gold < 0 means unlabeled.
template <std::floating_point T>
Loss<T> loss_cer(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> gold) {
  if (logits.rank() != 2 || logits.rows() != gold.size())
    throw DimensionError("loss_cer: " + std::to_string(gold.size()) + " labels for logits " +
                         shape_str(logits.shape()));
  std::vector<Tensor<T>> terms;
  for (std::size_t i = 0; i < gold.size(); ++i)
    if (gold[i] >= 0)
      terms.push_back(cross_entropy_logits(tape, row(tape, logits, i), static_cast<std::size_t>(gold[i])));
  if (terms.empty()) return {Tensor<T>::scalar(T(0)), false, 0};
  auto total = add_n<T>(tape, terms);
  return {div_scalar(tape, total, static_cast<T>(terms.size())), total.requires_grad(), terms.size()};
}

/// Mean binary cross-entropy over sampled pairs.
template <std::floating_point T>
Loss<T> loss_si(Tape<T>& tape, std::span<const Tensor<T>> pair_logits, std::span<const int> labels) {
  if (pair_logits.size() != labels.size())
    throw DimensionError("loss_si: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(pair_logits.size()) + " pairs");
  if (pair_logits.empty()) return {Tensor<T>::scalar(T(0)), false, 0};
  std::vector<Tensor<T>> terms;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (labels[k] != 0 && labels[k] != 1) throw ArgumentError("loss_si: label must be 0 or 1");
    terms.push_back(cross_entropy_logits(tape, pair_logits[k], static_cast<std::size_t>(labels[k])));
  }
  auto total = add_n<T>(tape, terms);
  return {div_scalar(tape, total, static_cast<T>(terms.size())), total.requires_grad(), terms.size()};
}

/// Unweighted sum of the two task losses.
template <std::floating_point T>
Tensor<T> loss_multi(Tape<T>& tape, const Tensor<T>& cer, const Tensor<T>& si) {
  return add(tape, cer, si);
}

// ---------------------------------------------------------------------------
// Convenience entry points

/// Emotion distributions for every utterance, evaluated without dropout.
template <std::floating_point T>
std::vector<std::vector<T>> forward_cer(const MtlModel<T>& model, const EncodedConversation& conv,
                                        bool mtl) {
  Tape<T> tape;
  ForwardPass<T> pass(model, tape, conv, mtl);
  auto d = pass.cer_distributions();
  std::vector<std::vector<T>> out(d.rows());
  for (std::size_t i = 0; i < d.rows(); ++i)
    out[i].assign(d.data().begin() + i * d.cols(), d.data().begin() + (i + 1) * d.cols());
  return out;
}

/// Same-speaker distributions for each pair, evaluated without dropout.
template <std::floating_point T>
std::vector<std::vector<T>> forward_si(const MtlModel<T>& model, const EncodedConversation& conv,
                                       std::span<const PairSample> pairs, bool mtl) {
  Tape<T> tape;
  ForwardPass<T> pass(model, tape, conv, mtl);
  std::vector<std::vector<T>> out;
  for (const auto& p : pairs) out.push_back(softmax(tape, pass.si_logits(p.i, p.j)).values());
  return out;
}

}  // namespace mtlcer
