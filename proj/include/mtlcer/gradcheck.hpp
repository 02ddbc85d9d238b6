// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference verification of every differentiable operation, every
// layer and the full model in each bridge configuration.
//
// The numeric derivative is the central difference with step h = 1e-5 in
// double precision. The error of a coordinate is |analytic - numeric| divided
// by max(|analytic|, |numeric|, 1e-6); gradients smaller than 1e-6 are thus
// compared on an absolute scale.
#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "model.hpp"
#include "nn.hpp"
#include "tensor.hpp"

namespace mtlcer {

inline double gradient_error(double analytic, double numeric, double floor = 1e-6) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

using LossFn = std::function<Tensor<double>(Tape<double>&)>;

/// Largest gradient error over every coordinate of `inputs` for the scalar
/// produced by `f`. Values of `inputs` are restored afterwards.
inline double max_gradient_error(std::vector<Tensor<double>> inputs, const LossFn& f, double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  {
    Tape<double> tape;
    auto loss = f(tape);
    tape.backward(loss);
  }
  double worst = 0;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto v = t.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i];
      v[i] = saved + h;
      Tape<double> tp;
      const double up = f(tp).item();
      v[i] = saved - h;
      Tape<double> tm;
      const double down = f(tm).item();
      v[i] = saved;
      worst = std::max(worst, gradient_error(analytic[i], (up - down) / (2 * h)));
    }
  }
  return worst;
}

struct GradcheckEntry {
  std::string component;
  double max_error = 0;
  std::size_t cases = 0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double seconds = 0;
  double tolerance = 1e-4;

  bool passed() const {
    for (const auto& e : entries)
      if (!e.passed) return false;
    return !entries.empty();
  }
};

namespace detail {

// Random tensor of the given shape; with `away_from_zero` entries stay at
// least 0.05 from 0 so finite differences do not straddle a kink.
inline Tensor<double> random_tensor(const Shape& shape, Rng& rng, bool away_from_zero = false) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) {
    do x = rng.uniform(-1.5, 1.5);
    while (away_from_zero && std::abs(x) < 0.05);
  }
  return Tensor<double>(shape, std::move(v), true);
}

// Reduces an output to a scalar with fixed random weights so every output
// coordinate receives a distinct upstream gradient.
inline Tensor<double> weighted_sum(Tape<double>& tape, const Tensor<double>& y, const std::vector<double>& w) {
  auto wt = Tensor<double>(y.shape(), std::vector<double>(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(y.size())));
  return sum(tape, mul(tape, y, wt));
}

inline std::vector<double> random_weights(Rng& rng, std::size_t n = 4096) {
  std::vector<double> w(n);
  for (auto& x : w) x = rng.uniform(-1, 1);
  return w;
}

template <typename F>
GradcheckEntry run_cases(const std::string& name, std::size_t cases, Rng& rng, F&& one_case,
                         double tol) {
  GradcheckEntry e{name, 0.0, cases, false};
  for (std::size_t c = 0; c < cases; ++c) {
    auto r = rng.derive(name, c);
    e.max_error = std::max(e.max_error, one_case(r));
  }
  e.passed = e.max_error < tol;
  return e;
}

template <typename Params>
std::vector<Tensor<double>> collect(Params& p) {
  std::vector<Tensor<double>> out;
  p.visit("", [&](const std::string&, Tensor<double>& t) { out.push_back(t); });
  return out;
}

}  // namespace detail

/// Configuration of the toy instance used for the whole-model checks.
inline ModelConfig gradcheck_model_config(bool iue, bool cue, bool multitask = true) {
  ModelConfig c;
  c.embed_dim = 3;
  c.word_hidden = 2;
  c.utt_hidden = 2;
  c.num_emotions = 3;
  c.pairs_per_conversation = 3;
  c.si_hidden = 3;
  c.dropout = 0.25;
  c.multitask = multitask;
  c.iue_bridge = iue;
  c.cue_bridge = cue;
  return c;
}

/// A three-utterance, four-words-per-utterance conversation over a 9-word vocabulary.
inline EncodedConversation gradcheck_conversation() {
  EncodedConversation c;
  c.id = "toy";
  c.tokens = {{2, 3, 4, 5}, {6, 7, 2, 8}, {3, 5, 7, 8}};
  c.speakers = {0, 1, 0};
  c.emotions = {0, 2, 1};
  return c;
}

/// Whole-model gradient error: L_Multi (or L_CER alone for a single-task
/// model) with dropout active under fixed masks, over every parameter
/// including the embedding table.
inline double model_gradient_error(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  auto emb = detail::random_tensor({9, cfg.embed_dim}, rng);
  auto model = MtlModel<double>::create(cfg, emb, rng.derive("init"));
  // Spread the weights so activations are not all near zero.
  model.params.visit([&](const std::string&, Tensor<double>& t) {
    for (auto& v : t.data()) v = rng.uniform(-0.9, 0.9);
  });
  auto conv = gradcheck_conversation();
  const auto pairs = std::vector<PairSample>{{0, 1, 0}, {0, 2, 1}, {1, 2, 0}};
  std::vector<Tensor<double>> params;
  model.params.visit([&](const std::string&, Tensor<double>& t) { params.push_back(t); });
  const Rng dropout_seed = rng.derive("dropout");
  auto f = [&](Tape<double>& tape) {
    auto streams = DropoutStreams::from(dropout_seed);
    ForwardPass<double> pass(model, tape, conv, cfg.multitask, true, &streams);
    auto lc = loss_cer<double>(tape, pass.cer_logits(), conv.emotions);
    if (!cfg.multitask) return lc.value;
    std::vector<Tensor<double>> logits;
    std::vector<int> labels;
    for (const auto& p : pairs) {
      logits.push_back(pass.si_logits(p.i, p.j));
      labels.push_back(p.label);
    }
    auto ls = loss_si<double>(tape, logits, labels);
    return loss_multi(tape, lc.value, ls.value);
  };
  return max_gradient_error(params, f);
}

/// Runs the full suite. `cases` random instances are drawn per operation and
/// layer; the model checks use `model_seeds` instances per configuration.
inline GradcheckReport run_gradcheck(std::size_t cases = 20, std::size_t model_seeds = 2,
                                     std::uint64_t seed = 7, double tol = 1e-4) {
  using detail::random_tensor;
  using detail::weighted_sum;
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckReport rep;
  rep.tolerance = tol;
  Rng root(seed);
  auto add_entry = [&](const std::string& name, auto&& one_case) {
    rep.entries.push_back(detail::run_cases(name, cases, root, one_case, tol));
  };
  using T = Tensor<double>;

  auto unary = [&](const std::string& name, auto op, bool kink) {
    add_entry(name, [=](Rng& r) {
      auto x = random_tensor({2 + r.below(4), 1 + r.below(4)}, r, kink);
      auto w = detail::random_weights(r);
      return max_gradient_error({x}, [&](Tape<double>& t) { return weighted_sum(t, op(t, x), w); });
    });
  };
  unary("op.tanh", [](Tape<double>& t, const T& x) { return tanh(t, x); }, false);
  unary("op.sigmoid", [](Tape<double>& t, const T& x) { return sigmoid(t, x); }, false);
  unary("op.relu", [](Tape<double>& t, const T& x) { return relu(t, x); }, true);
  unary("op.abs", [](Tape<double>& t, const T& x) { return abs(t, x); }, true);
  unary("op.scale", [](Tape<double>& t, const T& x) { return scale(t, x, 1.7); }, false);
  unary("op.div_scalar", [](Tape<double>& t, const T& x) { return div_scalar(t, x, 3.0); }, false);
  unary("op.transpose", [](Tape<double>& t, const T& x) { return transpose(t, x); }, false);
  unary("op.softmax_rows", [](Tape<double>& t, const T& x) { return softmax_rows(t, x); }, false);
  unary("op.sum", [](Tape<double>& t, const T& x) { return sum(t, x); }, false);

  auto binary = [&](const std::string& name, auto op) {
    add_entry(name, [=](Rng& r) {
      const Shape s{1 + r.below(4), 1 + r.below(4)};
      auto a = random_tensor(s, r);
      auto b = random_tensor(s, r);
      auto w = detail::random_weights(r);
      return max_gradient_error({a, b}, [&](Tape<double>& t) { return weighted_sum(t, op(t, a, b), w); });
    });
  };
  binary("op.add", [](Tape<double>& t, const T& a, const T& b) { return add(t, a, b); });
  binary("op.sub", [](Tape<double>& t, const T& a, const T& b) { return sub(t, a, b); });
  binary("op.mul", [](Tape<double>& t, const T& a, const T& b) { return mul(t, a, b); });
  binary("op.concat_cols", [](Tape<double>& t, const T& a, const T& b) { return concat_cols(t, a, b); });
  binary("op.add_n", [](Tape<double>& t, const T& a, const T& b) {
    std::vector<T> parts{a, b, a};
    return add_n<double>(t, parts);
  });

  add_entry("op.add_bias", [&](Rng& r) {
    auto x = random_tensor({1 + r.below(4), 1 + r.below(4)}, r);
    auto b = random_tensor({x.cols()}, r);
    auto w = detail::random_weights(r);
    return max_gradient_error({x, b}, [&](Tape<double>& t) { return weighted_sum(t, add_bias(t, x, b), w); });
  });
  add_entry("op.matmul", [&](Rng& r) {
    auto a = random_tensor({1 + r.below(5), 1 + r.below(5)}, r);
    auto b = random_tensor({a.cols(), 1 + r.below(5)}, r);
    auto w = detail::random_weights(r);
    return max_gradient_error({a, b}, [&](Tape<double>& t) { return weighted_sum(t, matmul(t, a, b), w); });
  });
  add_entry("op.matvec", [&](Rng& r) {
    auto a = random_tensor({1 + r.below(5), 1 + r.below(5)}, r);
    auto x = random_tensor({a.cols()}, r);
    auto w = detail::random_weights(r);
    return max_gradient_error({a, x}, [&](Tape<double>& t) { return weighted_sum(t, matvec(t, a, x), w); });
  });
  add_entry("op.vecmat", [&](Rng& r) {
    auto a = random_tensor({1 + r.below(5), 1 + r.below(5)}, r);
    auto x = random_tensor({a.rows()}, r);
    auto w = detail::random_weights(r);
    return max_gradient_error({a, x}, [&](Tape<double>& t) { return weighted_sum(t, vecmat(t, x, a), w); });
  });
  add_entry("op.linear_rows", [&](Rng& r) {
    auto x = random_tensor({1 + r.below(4), 1 + r.below(4)}, r);
    auto wt = random_tensor({1 + r.below(4), x.cols()}, r);
    auto b = random_tensor({wt.rows()}, r);
    auto w = detail::random_weights(r);
    return max_gradient_error({x, wt, b},
                              [&](Tape<double>& t) { return weighted_sum(t, linear_rows(t, x, wt, b), w); });
  });
  add_entry("op.softmax", [&](Rng& r) {
    auto x = random_tensor({1 + r.below(6)}, r);
    auto w = detail::random_weights(r);
    return max_gradient_error({x}, [&](Tape<double>& t) { return weighted_sum(t, softmax(t, x), w); });
  });
  add_entry("op.cross_entropy", [&](Rng& r) {
    auto x = random_tensor({2 + r.below(6)}, r);
    const auto truth = static_cast<std::size_t>(r.below(x.size()));
    return max_gradient_error({x}, [&](Tape<double>& t) { return cross_entropy_logits(t, x, truth); });
  });
  add_entry("op.concat", [&](Rng& r) {
    auto a = random_tensor({1 + r.below(4)}, r);
    auto b = random_tensor({1 + r.below(4)}, r);
    auto w = detail::random_weights(r);
    return max_gradient_error({a, b}, [&](Tape<double>& t) { return weighted_sum(t, concat(t, {a, b, a}), w); });
  });
  add_entry("op.stack_rows", [&](Rng& r) {
    auto a = random_tensor({1 + r.below(4)}, r);
    auto b = random_tensor({a.size()}, r);
    auto w = detail::random_weights(r);
    return max_gradient_error({a, b}, [&](Tape<double>& t) {
      std::vector<T> rows{a, b, a};
      return weighted_sum(t, stack_rows<double>(t, rows), w);
    });
  });
  add_entry("op.row", [&](Rng& r) {
    auto x = random_tensor({2 + r.below(4), 1 + r.below(4)}, r);
    const auto i = static_cast<std::size_t>(r.below(x.rows()));
    auto w = detail::random_weights(r);
    return max_gradient_error({x}, [&](Tape<double>& t) { return weighted_sum(t, row(t, x, i), w); });
  });
  add_entry("op.gather_rows", [&](Rng& r) {
    auto table = random_tensor({3 + r.below(4), 1 + r.below(4)}, r);
    std::vector<std::size_t> ids;
    for (std::size_t k = 0; k < 5; ++k) ids.push_back(static_cast<std::size_t>(r.below(table.rows())));
    auto w = detail::random_weights(r);
    return max_gradient_error({table}, [&](Tape<double>& t) { return weighted_sum(t, gather_rows<double>(t, table, ids), w); });
  });
  add_entry("op.dropout", [&](Rng& r) {
    auto x = random_tensor({2 + r.below(4), 1 + r.below(4)}, r);
    auto w = detail::random_weights(r);
    const auto mask_seed = r.next_u64();
    return max_gradient_error({x}, [&](Tape<double>& t) {
      Rng m(mask_seed);
      return weighted_sum(t, dropout(t, x, 0.4, true, m), w);
    });
  });

  // Layers.
  add_entry("layer.gru_cell", [&](Rng& r) {
    const std::size_t d = 1 + r.below(4), h = 1 + r.below(4);
    auto p = GruParams<double>::init(d, h, r);
    detail::collect(p);
    for (auto& t : detail::collect(p))
      for (auto& v : t.data()) v = r.uniform(-1, 1);
    auto x = random_tensor({d}, r);
    auto hp = random_tensor({h}, r);
    auto in = detail::collect(p);
    in.push_back(x);
    in.push_back(hp);
    auto w = detail::random_weights(r);
    return max_gradient_error(in, [&](Tape<double>& t) { return weighted_sum(t, gru_cell(t, x, hp, p), w); });
  });
  for (bool reverse : {false, true}) {
    add_entry(reverse ? "layer.gru_sequence.reverse" : "layer.gru_sequence", [&, reverse](Rng& r) {
      const std::size_t d = 1 + r.below(4), h = 1 + r.below(4), len = 1 + r.below(5);
      auto p = GruParams<double>::init(d, h, r);
      for (auto& t : detail::collect(p))
        for (auto& v : t.data()) v = r.uniform(-1, 1);
      auto x = random_tensor({len, d}, r);
      auto in = detail::collect(p);
      in.push_back(x);
      auto w = detail::random_weights(r);
      return max_gradient_error(in, [&](Tape<double>& t) { return weighted_sum(t, gru_sequence(t, x, p, reverse), w); });
    });
  }
  add_entry("layer.bigru", [&](Rng& r) {
    const std::size_t d = 1 + r.below(4), h = 1 + r.below(3), len = 1 + r.below(5);
    auto p = BiGruParams<double>::init(d, h, r);
    auto x = random_tensor({len, d}, r);
    auto in = detail::collect(p);
    in.push_back(x);
    auto w = detail::random_weights(r);
    return max_gradient_error(in, [&](Tape<double>& t) { return weighted_sum(t, bigru(t, x, p), w); });
  });
  add_entry("layer.attention_pool", [&](Rng& r) {
    const std::size_t n = 1 + r.below(5), d = 1 + r.below(4);
    auto p = AttnPoolParams<double>::init(d, r);
    for (auto& t : detail::collect(p))
      for (auto& v : t.data()) v = r.uniform(-1, 1);
    auto hm = random_tensor({n, d}, r);
    auto in = detail::collect(p);
    in.push_back(hm);
    auto w = detail::random_weights(r);
    return max_gradient_error(in, [&](Tape<double>& t) { return weighted_sum(t, attention_pool(t, hm, p).vector, w); });
  });
  add_entry("layer.gate_fuse", [&](Rng& r) {
    const std::size_t n = 1 + r.below(4), d = 1 + r.below(4);
    auto p = GateParams<double>::init(d, r);
    for (auto& t : detail::collect(p))
      for (auto& v : t.data()) v = r.uniform(-1, 1);
    auto a = random_tensor({n, d}, r);
    auto b = random_tensor({n, d}, r);
    auto in = detail::collect(p);
    in.push_back(a);
    in.push_back(b);
    auto w = detail::random_weights(r);
    return max_gradient_error(in, [&](Tape<double>& t) { return weighted_sum(t, gate_fuse(t, a, b, p), w); });
  });
  add_entry("layer.cross_attend", [&](Rng& r) {
    const std::size_t n = 1 + r.below(4), d = 1 + r.below(4);
    auto p = BilinearParams<double>::init(d, r);
    auto a = random_tensor({n, d}, r);
    auto b = random_tensor({n, d}, r);
    auto in = detail::collect(p);
    in.push_back(a);
    in.push_back(b);
    auto w = detail::random_weights(r);
    return max_gradient_error(in, [&](Tape<double>& t) { return weighted_sum(t, cross_attend(t, a, b, p).features, w); });
  });
  add_entry("layer.si_pair_features", [&](Rng& r) {
    const std::size_t d = 1 + r.below(4);
    auto a = random_tensor({d}, r);
    auto b = random_tensor({d}, r);
    // keep |a - b| away from its kink
    for (std::size_t k = 0; k < d; ++k)
      if (std::abs(a.data()[k] - b.data()[k]) < 0.05) a.data()[k] += 0.1;
    auto w = detail::random_weights(r);
    return max_gradient_error({a, b}, [&](Tape<double>& t) { return weighted_sum(t, si_pair_features(t, a, b), w); });
  });

  // Whole model.
  auto model_entry = [&](const std::string& name, const ModelConfig& cfg) {
    GradcheckEntry e{name, 0.0, model_seeds, false};
    for (std::size_t s = 0; s < model_seeds; ++s)
      e.max_error = std::max(e.max_error, model_gradient_error(cfg, root.derive(name, s).next_u64()));
    e.passed = e.max_error < tol;
    rep.entries.push_back(e);
  };
  model_entry("model.baseline", gradcheck_model_config(false, false, false));
  model_entry("model.mtl(iue=0,cue=0)", gradcheck_model_config(false, false));
  model_entry("model.mtl(iue=0,cue=1)", gradcheck_model_config(false, true));
  model_entry("model.mtl(iue=1,cue=0)", gradcheck_model_config(true, false));
  model_entry("model.mtl(iue=1,cue=1)", gradcheck_model_config(true, true));

  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace mtlcer
