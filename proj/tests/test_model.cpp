// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <vector>

#include <mtlcer/model.hpp>

using namespace mtlcer;
using Td = Tensor<double>;

namespace {

ModelConfig small_config(bool mtl, bool iue, bool cue) {
  ModelConfig c;
  c.embed_dim = 5;
  c.word_hidden = 3;
  c.utt_hidden = 4;
  c.num_emotions = 7;
  c.si_hidden = 6;
  c.pairs_per_conversation = 3;
  c.dropout = 0.2;
  c.multitask = mtl;
  c.iue_bridge = iue;
  c.cue_bridge = cue;
  return c;
}

Td embedding(std::size_t vocab, std::size_t dim, std::uint64_t seed) {
  Rng r(seed);
  std::vector<double> v(vocab * dim);
  for (auto& x : v) x = r.uniform(-1, 1);
  return Td::matrix(vocab, dim, v);
}

EncodedConversation conversation(std::uint64_t seed, std::size_t n = 4, std::size_t vocab = 12) {
  Rng r(seed);
  EncodedConversation c;
  c.id = "c" + std::to_string(seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> toks(2 + r.below(4));
    for (auto& t : toks) t = 2 + r.below(vocab - 2);
    c.tokens.push_back(toks);
    c.speakers.push_back(static_cast<int>(r.below(2)));
    c.emotions.push_back(static_cast<int>(r.below(7)));
  }
  return c;
}

MtlModel<double> make(const ModelConfig& cfg, std::uint64_t seed = 1) {
  return MtlModel<double>::create(cfg, embedding(12, cfg.embed_dim, 77), Rng(seed));
}

}  // namespace

TEST(Params, ShapesFollowConfiguration) {
  for (bool cue : {false, true}) {
    auto m = make(small_config(true, true, cue));
    const auto ctx = (cue ? 4 : 2) * 4u;
    EXPECT_EQ(m.params.w_cer.shape(), (Shape{7, ctx}));
    EXPECT_EQ(m.params.w_si.shape(), (Shape{2, 6}));
    EXPECT_EQ(m.params.w_f.shape(), (Shape{6, 4 * ctx}));
    EXPECT_EQ(m.params.shared_word.hidden(), m.params.cer.word.hidden());
  }
}

TEST(Params, TaskEncodersAreIndependent) {
  auto m = make(small_config(true, true, true));
  EXPECT_FALSE(m.params.cer.word.forward.w_z.same_node(m.params.si.word.forward.w_z));
  EXPECT_NE(m.params.cer.word.forward.w_z.values(), m.params.si.word.forward.w_z.values());
  EXPECT_NE(m.params.cer.utt.backward.u_h.values(), m.params.si.utt.backward.u_h.values());
}

TEST(Params, CerWeightsDoNotDependOnTaskFlags) {
  auto a = make(small_config(false, false, false), 5);
  auto b = make(small_config(true, true, false), 5);
  EXPECT_EQ(a.params.cer.word.forward.w_z.values(), b.params.cer.word.forward.w_z.values());
  EXPECT_EQ(a.params.cer.pool.v_a.values(), b.params.cer.pool.v_a.values());
  EXPECT_EQ(a.params.w_cer.values(), b.params.w_cer.values());
}

TEST(Params, UniqueNames) {
  auto m = make(small_config(true, true, true));
  std::map<std::string, int> seen;
  for (const auto& [name, t] : m.named_params()) ++seen[name];
  for (const auto& [name, count] : seen) EXPECT_EQ(count, 1) << name;
  EXPECT_TRUE(seen.count("embedding"));
  EXPECT_TRUE(seen.count("cer.W_CER"));
  EXPECT_TRUE(seen.count("shared.bilinear_cer.W_c"));
}

TEST(Forward, BridgesOffReproducesBaselineBitForBit) {
  const auto base_cfg = small_config(false, true, true);
  const auto off_cfg = small_config(true, false, false);
  for (std::uint64_t s = 1; s <= 5; ++s) {
    auto base = make(base_cfg, s), mtl = make(off_cfg, s);
    auto conv = conversation(s, 3 + s);
    EXPECT_EQ(forward_cer(base, conv, false), forward_cer(mtl, conv, true));
  }
}

TEST(Forward, ContextWidthTracksCueBridge) {
  auto conv = conversation(3);
  for (bool cue : {false, true}) {
    auto m = make(small_config(true, false, cue));
    Tape<double> tape;
    ForwardPass<double> pass(m, tape, conv, true);
    EXPECT_EQ(pass.contextual(Side::Cer).cols(), cue ? 16u : 8u);
    EXPECT_EQ(pass.contextual(Side::Si).cols(), cue ? 16u : 8u);
  }
}

TEST(Forward, SingleUtteranceCrossAttentionConcatenates) {
  auto m = make(small_config(true, true, true));
  EncodedConversation conv{"one", {{2, 3, 4}}, {0}, {1}};
  Tape<double> tape;
  ForwardPass<double> pass(m, tape, conv, true);
  const auto& f = pass.contextual(Side::Cer);
  const auto& own = pass.context(Side::Cer);
  const auto& other = pass.context(Side::Si);
  EXPECT_EQ(pass.cross_weights(Side::Cer).values(), (std::vector<double>{1.0}));
  for (std::size_t k = 0; k < 8; ++k) {
    EXPECT_EQ(f.at(0, k), own.at(0, k));
    EXPECT_EQ(f.at(0, 8 + k), other.at(0, k));
  }
}

TEST(Forward, OneWordUtteranceIsItsBiGruOutput) {
  auto m = make(small_config(false, false, false));
  EncodedConversation conv{"w", {{5}}, {0}, {0}};
  Tape<double> tape;
  ForwardPass<double> pass(m, tape, conv, false);
  const auto& u = pass.individual(Side::Cer);
  EXPECT_EQ(pass.word_attention(Side::Cer)[0].values(), (std::vector<double>{1.0}));
  std::vector<std::size_t> ids{5};
  auto h = bigru(tape, gather_rows<double>(tape, m.params.embedding, ids), m.params.cer.word);
  EXPECT_EQ(u.values(), h.values());
}

TEST(Forward, IndividualEncoderMatchesComposition) {
  auto m = make(small_config(true, true, false), 9);
  auto conv = conversation(9, 2);
  Tape<double> tape;
  ForwardPass<double> pass(m, tape, conv, true);
  const auto& u = pass.individual(Side::Cer);
  for (std::size_t i = 0; i < 2; ++i) {
    auto x = gather_rows<double>(tape, m.params.embedding, conv.tokens[i]);
    auto h = bigru(tape, x, m.params.cer.word);
    auto hs = bigru(tape, x, m.params.shared_word);
    // gate: g = sigmoid(W_g h + b_g), mixed = h + g * (hs - h), computed by hand
    const std::size_t d = h.cols();
    std::vector<double> mixed(h.size());
    for (std::size_t t = 0; t < h.rows(); ++t)
      for (std::size_t k = 0; k < d; ++k) {
        double pre = m.params.gate_cer.b_g[k];
        for (std::size_t j = 0; j < d; ++j) pre += m.params.gate_cer.w_g.at(k, j) * h.at(t, j);
        const double g = 1 / (1 + std::exp(-pre));
        mixed[t * d + k] = g * hs.at(t, k) + (1 - g) * h.at(t, k);
      }
    auto pooled = attention_pool(tape, Td::matrix(h.rows(), d, mixed), m.params.cer.pool);
    for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(u.at(i, k), pooled.vector[k], 1e-12);
  }
}

TEST(Forward, SiScoresMatchComposition) {
  auto m = make(small_config(true, true, true), 4);
  auto conv = conversation(4, 4);
  Tape<double> tape;
  ForwardPass<double> pass(m, tape, conv, true);
  const auto& f = pass.contextual(Side::Si);
  const std::size_t d = f.cols();
  for (auto [i, j] : std::vector<std::pair<std::size_t, std::size_t>>{{0, 1}, {1, 3}, {2, 0}}) {
    std::vector<double> delta;
    for (std::size_t k = 0; k < d; ++k) delta.push_back(f.at(i, k));
    for (std::size_t k = 0; k < d; ++k) delta.push_back(f.at(j, k));
    for (std::size_t k = 0; k < d; ++k) delta.push_back(std::abs(f.at(i, k) - f.at(j, k)));
    for (std::size_t k = 0; k < d; ++k) delta.push_back(f.at(i, k) * f.at(j, k));
    std::vector<double> hidden(m.params.w_f.rows());
    for (std::size_t r = 0; r < hidden.size(); ++r) {
      double s = m.params.b_f[r];
      for (std::size_t k = 0; k < delta.size(); ++k) s += m.params.w_f.at(r, k) * delta[k];
      hidden[r] = std::max(0.0, s);
    }
    auto logits = pass.si_logits(i, j);
    for (std::size_t c = 0; c < 2; ++c) {
      double s = 0;
      for (std::size_t r = 0; r < hidden.size(); ++r) s += m.params.w_si.at(c, r) * hidden[r];
      EXPECT_NEAR(logits[c], s, 1e-12);
    }
  }
  EXPECT_THROW(pass.si_logits(0, 4), ArgumentError);
}

TEST(Forward, RepeatedTextGetsDifferentContext) {
  auto m = make(small_config(true, true, true), 2);
  EncodedConversation conv{"rep", {{2, 3}, {4, 5, 6}, {2, 3}}, {0, 1, 0}, {0, 0, 0}};
  Tape<double> tape;
  ForwardPass<double> pass(m, tape, conv, true);
  const auto& f = pass.contextual(Side::Si);
  bool differs = false;
  for (std::size_t k = 0; k < f.cols(); ++k) differs = differs || f.at(0, k) != f.at(2, k);
  EXPECT_TRUE(differs);
  EXPECT_EQ(pass.individual(Side::Si).at(0, 0), pass.individual(Side::Si).at(2, 0));
}

TEST(Forward, ZeroHeadsGiveUniformOutputs) {
  auto m = make(small_config(true, true, true));
  m.params.w_cer = Td::zeros(m.params.w_cer.shape(), true);
  m.params.w_si = Td::zeros(m.params.w_si.shape(), true);
  auto conv = conversation(6, 5);
  for (const auto& row : forward_cer(m, conv, true))
    for (double p : row) EXPECT_NEAR(p, 1.0 / 7.0, 1e-15);
  Tape<double> tape;
  ForwardPass<double> pass(m, tape, conv, true);
  auto l = loss_cer<double>(tape, pass.cer_logits(), conv.emotions);
  EXPECT_NEAR(l.value.item(), std::log(7.0), 1e-12);
  std::vector<PairSample> pairs{{0, 1, 0}, {1, 2, 1}, {3, 4, 0}};
  for (const auto& p : forward_si(m, conv, pairs, true)) {
    EXPECT_EQ(p[0], 0.5);
    EXPECT_EQ(p[1], 0.5);
  }
  std::vector<Td> logits;
  std::vector<int> labels;
  for (const auto& p : pairs) {
    logits.push_back(pass.si_logits(p.i, p.j));
    labels.push_back(p.label);
  }
  EXPECT_NEAR(loss_si<double>(tape, logits, labels).value.item(), std::log(2.0), 1e-12);
}

TEST(Forward, DistributionsSumToOne) {
  auto m = make(small_config(true, true, true), 3);
  for (const auto& row : forward_cer(m, conversation(8, 6), true)) {
    double s = 0;
    for (double p : row) s += p;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Forward, TrainingWithDropoutNeedsStreams) {
  auto m = make(small_config(true, true, true));
  auto conv = conversation(1);
  Tape<double> tape;
  EXPECT_THROW(ForwardPass<double>(m, tape, conv, true, true, nullptr), ArgumentError);
  EncodedConversation empty{"e", {}, {}, {}};
  EXPECT_THROW(ForwardPass<double>(m, tape, empty, true), ArgumentError);
}

TEST(Pairs, ForcedOutcomes) {
  Rng r(1);
  EncodedConversation same{"s", {{2}, {3}}, {0, 0}, {-1, -1}};
  EncodedConversation diff{"d", {{2}, {3}}, {0, 1}, {-1, -1}};
  auto a = sample_pairs(same, 3, r);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0].label, 1);
  auto b = sample_pairs(diff, 3, r);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0].label, 0);
  EncodedConversation single{"1", {{2}}, {0}, {-1}};
  EXPECT_TRUE(sample_pairs(single, 3, r).empty());
}

TEST(Pairs, UniformWithoutReplacement) {
  EncodedConversation c{"five", {{2}, {2}, {2}, {2}, {2}}, {0, 1, 0, 1, 2}, {}};
  std::map<std::pair<std::size_t, std::size_t>, int> freq;
  const int trials = 100000;
  Rng r(99);
  for (int t = 0; t < trials; ++t) {
    auto pairs = sample_pairs(c, 3, r);
    ASSERT_EQ(pairs.size(), 3u);
    for (std::size_t a = 0; a < 3; ++a) {
      ASSERT_LT(pairs[a].i, pairs[a].j);
      EXPECT_EQ(pairs[a].label, c.speakers[pairs[a].i] == c.speakers[pairs[a].j] ? 1 : 0);
      for (std::size_t b = a + 1; b < 3; ++b)
        ASSERT_FALSE(pairs[a].i == pairs[b].i && pairs[a].j == pairs[b].j);
      ++freq[{pairs[a].i, pairs[a].j}];
    }
  }
  ASSERT_EQ(freq.size(), 10u);
  const double p = 0.3, sigma = std::sqrt(trials * p * (1 - p));
  // Ten cells are checked at once, so each gets a 4 sigma band (family-wise about 3 sigma).
  for (const auto& [pair, n] : freq) EXPECT_NEAR(n, trials * p, 4 * sigma);
}

TEST(Pairs, BalancedSamplingAlternates) {
  EncodedConversation c{"b", {{2}, {2}, {2}, {2}, {2}, {2}}, {0, 0, 0, 0, 0, 1}, {}};
  Rng r(5);
  auto pairs = sample_pairs(c, 4, r, true);
  ASSERT_EQ(pairs.size(), 4u);
  EXPECT_EQ(pairs[0].label, 1);
  EXPECT_EQ(pairs[1].label, 0);
}

TEST(Losses, CerIsMeanOverLabeledUtterances) {
  Tape<double> tape;
  auto logits = Td::matrix(3, 2, {1, 0, 0, 2, 5, 5}, true);
  std::vector<int> gold{0, 1, -1};
  auto l = loss_cer<double>(tape, logits, gold);
  const double a = std::log(1 + std::exp(-1.0)), b = std::log(1 + std::exp(-2.0));
  EXPECT_NEAR(l.value.item(), (a + b) / 2, 1e-15);
  EXPECT_EQ(l.count, 2u);
  std::vector<int> none{-1, -1, -1};
  auto l0 = loss_cer<double>(tape, logits, none);
  EXPECT_EQ(l0.count, 0u);
  EXPECT_FALSE(l0.has_gradient);
}

TEST(Losses, PerfectPredictionsGiveZero) {
  Tape<double> tape;
  auto logits = Td::matrix(2, 3, {1000, 0, 0, 0, 0, 1000});
  std::vector<int> gold{0, 2};
  EXPECT_EQ(loss_cer<double>(tape, logits, gold).value.item(), 0.0);
  std::vector<Td> pair{Td::vector({0, 1000})};
  std::vector<int> lab{1};
  EXPECT_EQ(loss_si<double>(tape, pair, lab).value.item(), 0.0);
}

TEST(Losses, SiIsExactMeanOfPairLosses) {
  Tape<double> tape;
  std::vector<Td> logits{Td::vector({0.3, -1}), Td::vector({2, 0.5}), Td::vector({-0.2, 0.1})};
  std::vector<int> labels{0, 1, 1};
  double s = 0;
  for (std::size_t k = 0; k < 3; ++k)
    s += cross_entropy_logits(tape, logits[k], static_cast<std::size_t>(labels[k])).item();
  EXPECT_DOUBLE_EQ(loss_si<double>(tape, logits, labels).value.item(), s / 3.0);
}

TEST(Losses, MultiIsPlainSum) {
  Tape<double> tape;
  EXPECT_EQ(loss_multi(tape, Td::scalar(1.0), Td::scalar(0.5)).item(), 1.5);
  EXPECT_EQ(loss_multi(tape, Td::scalar(0.7310585786300049), Td::scalar(0.0)).item(), 0.7310585786300049);
}

TEST(Losses, SharedGradientIsSumOfTaskGradients) {
  auto m = make(small_config(true, true, true), 12);
  auto conv = conversation(12, 5);
  std::vector<PairSample> pairs{{0, 1, 0}, {1, 3, 1}, {2, 4, 0}};
  enum Which { Cer, Si, Multi };
  auto grads = [&](Which w) {
    m.params.visit([](const std::string&, Td& t) {
      if (t.requires_grad()) t.zero_grad();
    });
    Tape<double> tape;
    ForwardPass<double> pass(m, tape, conv, true);
    auto lc = loss_cer<double>(tape, pass.cer_logits(), conv.emotions).value;
    std::vector<Td> logits;
    std::vector<int> labels;
    for (const auto& p : pairs) {
      logits.push_back(pass.si_logits(p.i, p.j));
      labels.push_back(p.label);
    }
    auto ls = loss_si<double>(tape, logits, labels).value;
    tape.backward(w == Cer ? lc : w == Si ? ls : loss_multi(tape, lc, ls));
    std::vector<double> g;
    m.params.shared_word.visit("", [&](const std::string&, Td& t) {
      g.insert(g.end(), t.grad().begin(), t.grad().end());
    });
    return g;
  };
  const auto gc = grads(Cer), gs = grads(Si), gm = grads(Multi);
  double norm = 0;
  for (std::size_t i = 0; i < gm.size(); ++i) {
    EXPECT_NEAR(gm[i], gc[i] + gs[i], 1e-13);
    norm += std::abs(gc[i]) + std::abs(gs[i]);
  }
  EXPECT_GT(norm, 0.0);
}
