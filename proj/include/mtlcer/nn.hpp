// SPDX-License-Identifier: Apache-2.0
//
// Layers: GRU cell and sequence, bidirectional GRU, attention pooling,
// gated shared-private fusion, bilinear cross attention and pair features.
//
// All weight matrices are stored [out x in]. The GRU recurrence used
// throughout is
//
//   z  = sigmoid(W_z x + U_z h + b_z)
//   r  = sigmoid(W_r x + U_r h + b_r)
//   h~ = tanh(W_h x + U_h (r * h) + b_h)
//   h' = (1 - z) * h + z * h~
//
// with a zero initial state.
#pragma once

#include <concepts>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace mtlcer {

template <std::floating_point T>
struct GruParams {
  Tensor<T> w_z, w_r, w_h;  // [H x d_in]
  Tensor<T> u_z, u_r, u_h;  // [H x H]
  Tensor<T> b_z, b_r, b_h;  // [H]

  static GruParams init(std::size_t d_in, std::size_t hidden, Rng& rng) {
    GruParams p;
    p.w_z = init_param<T>({hidden, d_in}, rng);
    p.w_r = init_param<T>({hidden, d_in}, rng);
    p.w_h = init_param<T>({hidden, d_in}, rng);
    p.u_z = init_param<T>({hidden, hidden}, rng);
    p.u_r = init_param<T>({hidden, hidden}, rng);
    p.u_h = init_param<T>({hidden, hidden}, rng);
    p.b_z = init_bias<T>(hidden);
    p.b_r = init_bias<T>(hidden);
    p.b_h = init_bias<T>(hidden);
    return p;
  }

  std::size_t input_dim() const { return w_z.cols(); }
  std::size_t hidden() const { return w_z.rows(); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "W_z", w_z);
    f(prefix + "W_r", w_r);
    f(prefix + "W_h", w_h);
    f(prefix + "U_z", u_z);
    f(prefix + "U_r", u_r);
    f(prefix + "U_h", u_h);
    f(prefix + "b_z", b_z);
    f(prefix + "b_r", b_r);
    f(prefix + "b_h", b_h);
  }
};

template <std::floating_point T>
struct BiGruParams {
  GruParams<T> forward;
  GruParams<T> backward;

  static BiGruParams init(std::size_t d_in, std::size_t hidden, Rng& rng) {
    BiGruParams p;
    p.forward = GruParams<T>::init(d_in, hidden, rng);
    p.backward = GruParams<T>::init(d_in, hidden, rng);
    return p;
  }

  std::size_t input_dim() const { return forward.input_dim(); }
  std::size_t hidden() const { return forward.hidden(); }
  std::size_t output_dim() const { return 2 * hidden(); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    forward.visit(prefix + "fwd.", f);
    backward.visit(prefix + "bwd.", f);
  }
};

template <std::floating_point T>
struct AttnPoolParams {
  Tensor<T> w_a;  // [d x d]
  Tensor<T> b_a;  // [d]
  Tensor<T> v_a;  // [d]

  static AttnPoolParams init(std::size_t d, Rng& rng) {
    return {init_param<T>({d, d}, rng), init_bias<T>(d), init_param<T>({d}, rng)};
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "W_a", w_a);
    f(prefix + "b_a", b_a);
    f(prefix + "v_a", v_a);
  }
};

template <std::floating_point T>
struct GateParams {
  Tensor<T> w_g;  // [d x d]
  Tensor<T> b_g;  // [d]

  static GateParams init(std::size_t d, Rng& rng) {
    return {init_param<T>({d, d}, rng), init_bias<T>(d)};
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "W_g", w_g);
    f(prefix + "b_g", b_g);
  }
};

template <std::floating_point T>
struct BilinearParams {
  Tensor<T> w_c;  // [d x d]

  static BilinearParams init(std::size_t d, Rng& rng) { return {init_param<T>({d, d}, rng)}; }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "W_c", w_c);
  }
};

// ---------------------------------------------------------------------------

/// One GRU step built from primitive tape operations.
template <std::floating_point T>
Tensor<T> gru_cell(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& h_prev,
                   const GruParams<T>& p) {
  if (x.rank() != 1 || x.size() != p.input_dim() || h_prev.rank() != 1 ||
      h_prev.size() != p.hidden())
    throw DimensionError("gru_cell: input " + shape_str(x.shape()) + ", state " +
                         shape_str(h_prev.shape()) + " for cell " +
                         std::to_string(p.input_dim()) + "->" + std::to_string(p.hidden()));
  auto gate = [&](const Tensor<T>& w, const Tensor<T>& u, const Tensor<T>& b, const Tensor<T>& h) {
    return add_bias(tape, add(tape, matvec(tape, w, x), matvec(tape, u, h)), b);
  };
  auto z = sigmoid(tape, gate(p.w_z, p.u_z, p.b_z, h_prev));
  auto r = sigmoid(tape, gate(p.w_r, p.u_r, p.b_r, h_prev));
  auto cand = tanh(tape, gate(p.w_h, p.u_h, p.b_h, mul(tape, r, h_prev)));
  auto ones = Tensor<T>(z.shape(), std::vector<T>(z.size(), T(1)));
  auto keep = mul(tape, sub(tape, ones, z), h_prev);
  return add(tape, keep, mul(tape, z, cand));
}

/// Runs a GRU over every row of x [L x d_in] as a single tape operation with
/// hand-written backpropagation through time. With `reverse` the rows are
/// visited from last to first; output row t is always the state at row t.
template <std::floating_point T>
Tensor<T> gru_sequence(Tape<T>& tape, const Tensor<T>& x, const GruParams<T>& p,
                       bool reverse = false) {
  if (x.rank() != 2 || x.cols() != p.input_dim())
    throw DimensionError("gru_sequence: input " + shape_str(x.shape()) + " for cell " +
                         std::to_string(p.input_dim()) + "->" + std::to_string(p.hidden()));
  const std::size_t len = x.rows(), d = x.cols(), hd = p.hidden();
  bool rg = x.requires_grad();
  const Tensor<T>* ps[] = {&p.w_z, &p.w_r, &p.w_h, &p.u_z, &p.u_r, &p.u_h, &p.b_z, &p.b_r, &p.b_h};
  for (auto* t : ps) rg = rg || t->requires_grad();
  auto out = tape.make_output({len, hd}, rg);

  struct Cache {
    std::vector<T> z, r, c, h_prev;
  };
  auto cache = std::make_shared<Cache>();
  cache->z.resize(len * hd);
  cache->r.resize(len * hd);
  cache->c.resize(len * hd);
  cache->h_prev.resize(len * hd);

  auto xv = x.data();
  auto wz = p.w_z.data(), wr = p.w_r.data(), wh = p.w_h.data();
  auto uz = p.u_z.data(), ur = p.u_r.data(), uh = p.u_h.data();
  auto bz = p.b_z.data(), br = p.b_r.data(), bh = p.b_h.data();
  std::vector<T> h(hd, T(0)), rh(hd);
  auto y = out.data();
  for (std::size_t s = 0; s < len; ++s) {
    const std::size_t pos = reverse ? len - 1 - s : s;
    const T* xr = xv.data() + pos * d;
    T* z = cache->z.data() + s * hd;
    T* r = cache->r.data() + s * hd;
    T* c = cache->c.data() + s * hd;
    std::copy(h.begin(), h.end(), cache->h_prev.begin() + s * hd);
    for (std::size_t k = 0; k < hd; ++k) {
      T az = bz[k], ar = br[k];
      for (std::size_t j = 0; j < d; ++j) {
        az += wz[k * d + j] * xr[j];
        ar += wr[k * d + j] * xr[j];
      }
      for (std::size_t j = 0; j < hd; ++j) {
        az += uz[k * hd + j] * h[j];
        ar += ur[k * hd + j] * h[j];
      }
      z[k] = T(1) / (T(1) + std::exp(-az));
      r[k] = T(1) / (T(1) + std::exp(-ar));
    }
    for (std::size_t j = 0; j < hd; ++j) rh[j] = r[j] * h[j];
    for (std::size_t k = 0; k < hd; ++k) {
      T ac = bh[k];
      for (std::size_t j = 0; j < d; ++j) ac += wh[k * d + j] * xr[j];
      for (std::size_t j = 0; j < hd; ++j) ac += uh[k * hd + j] * rh[j];
      c[k] = std::tanh(ac);
    }
    for (std::size_t k = 0; k < hd; ++k) h[k] = (T(1) - z[k]) * h[k] + z[k] * c[k];
    std::copy(h.begin(), h.end(), y.begin() + pos * hd);
  }

  tape.record(out, [len, d, hd, reverse, cache, xn = x.node(), wzn = p.w_z.node(),
                    wrn = p.w_r.node(), whn = p.w_h.node(), uzn = p.u_z.node(),
                    urn = p.u_r.node(), uhn = p.u_h.node(), bzn = p.b_z.node(),
                    brn = p.b_r.node(), bhn = p.b_h.node(), on = out.node()] {
    auto gx = detail::sink(xn);
    auto gwz = detail::sink(wzn), gwr = detail::sink(wrn), gwh = detail::sink(whn);
    auto guz = detail::sink(uzn), gur = detail::sink(urn), guh = detail::sink(uhn);
    auto gbz = detail::sink(bzn), gbr = detail::sink(brn), gbh = detail::sink(bhn);
    const auto& xv = xn->data;
    const auto& wz = wzn->data;
    const auto& wr = wrn->data;
    const auto& wh = whn->data;
    const auto& uz = uzn->data;
    const auto& ur = urn->data;
    const auto& uh = uhn->data;
    std::vector<T> dh(hd, T(0)), dhp(hd), daz(hd), dar(hd), dac(hd), drh(hd);
    for (std::size_t s = len; s-- > 0;) {
      const std::size_t pos = reverse ? len - 1 - s : s;
      const T* xr = xv.data() + pos * d;
      const T* z = cache->z.data() + s * hd;
      const T* r = cache->r.data() + s * hd;
      const T* c = cache->c.data() + s * hd;
      const T* hp = cache->h_prev.data() + s * hd;
      for (std::size_t k = 0; k < hd; ++k) {
        dh[k] += on->grad[pos * hd + k];
        const T dz = dh[k] * (c[k] - hp[k]);
        const T dc = dh[k] * z[k];
        dhp[k] = dh[k] * (T(1) - z[k]);
        dac[k] = dc * (T(1) - c[k] * c[k]);
        daz[k] = dz * z[k] * (T(1) - z[k]);
      }
      for (std::size_t j = 0; j < hd; ++j) {
        T s2 = 0;
        for (std::size_t k = 0; k < hd; ++k) s2 += uh[k * hd + j] * dac[k];
        drh[j] = s2;
      }
      for (std::size_t j = 0; j < hd; ++j) {
        const T dr = drh[j] * hp[j];
        dhp[j] += drh[j] * r[j];
        dar[j] = dr * r[j] * (T(1) - r[j]);
      }
      for (std::size_t k = 0; k < hd; ++k) {
        if (!gbz.empty()) gbz[k] += daz[k];
        if (!gbr.empty()) gbr[k] += dar[k];
        if (!gbh.empty()) gbh[k] += dac[k];
        for (std::size_t j = 0; j < d; ++j) {
          if (!gwz.empty()) gwz[k * d + j] += daz[k] * xr[j];
          if (!gwr.empty()) gwr[k * d + j] += dar[k] * xr[j];
          if (!gwh.empty()) gwh[k * d + j] += dac[k] * xr[j];
        }
        for (std::size_t j = 0; j < hd; ++j) {
          if (!guz.empty()) guz[k * hd + j] += daz[k] * hp[j];
          if (!gur.empty()) gur[k * hd + j] += dar[k] * hp[j];
          if (!guh.empty()) guh[k * hd + j] += dac[k] * r[j] * hp[j];
        }
      }
      for (std::size_t j = 0; j < hd; ++j) {
        T acc = 0;
        for (std::size_t k = 0; k < hd; ++k) acc += uz[k * hd + j] * daz[k] + ur[k * hd + j] * dar[k];
        dhp[j] += acc;
      }
      if (!gx.empty())
        for (std::size_t j = 0; j < d; ++j) {
          T acc = 0;
          for (std::size_t k = 0; k < hd; ++k)
            acc += wz[k * d + j] * daz[k] + wr[k * d + j] * dar[k] + wh[k * d + j] * dac[k];
          gx[pos * d + j] += acc;
        }
      dh.swap(dhp);
    }
  });
  return out;
}

/// Bidirectional GRU over the rows of x [L x d_in]; row t of the result is
/// forward state t followed by backward state t, [L x 2H].
template <std::floating_point T>
Tensor<T> bigru(Tape<T>& tape, const Tensor<T>& x, const BiGruParams<T>& p) {
  auto fwd = gru_sequence(tape, x, p.forward, false);
  auto bwd = gru_sequence(tape, x, p.backward, true);
  return concat_cols(tape, fwd, bwd);
}

/// Sequence-of-vectors form of bigru.
template <std::floating_point T>
std::vector<Tensor<T>> bigru(Tape<T>& tape, std::span<const Tensor<T>> seq, const BiGruParams<T>& p) {
  if (seq.empty()) throw ArgumentError("bigru: empty sequence");
  auto out = bigru(tape, stack_rows(tape, seq), p);
  std::vector<Tensor<T>> rows;
  rows.reserve(seq.size());
  for (std::size_t t = 0; t < seq.size(); ++t) rows.push_back(row(tape, out, t));
  return rows;
}

template <std::floating_point T>
struct Pooled {
  Tensor<T> vector;   // [d]
  Tensor<T> weights;  // [n], nonnegative, sums to 1
};

/// Additive attention pooling over the rows of h [n x d]:
/// alpha = softmax_j(v_a . tanh(W_a h_j + b_a)), result = sum_j alpha_j h_j.
template <std::floating_point T>
Pooled<T> attention_pool(Tape<T>& tape, const Tensor<T>& h, const AttnPoolParams<T>& p) {
  if (h.rank() != 2) throw DimensionError("attention_pool: expected a matrix, got " + shape_str(h.shape()));
  if (p.w_a.rows() != h.cols())
    throw DimensionError("attention_pool: input " + shape_str(h.shape()) + " for W_a " +
                         shape_str(p.w_a.shape()));
  auto z = tanh(tape, linear_rows(tape, h, p.w_a, p.b_a));
  auto alpha = softmax(tape, matvec(tape, z, p.v_a));
  return {vecmat(tape, alpha, h), alpha};
}

template <std::floating_point T>
Pooled<T> attention_pool(Tape<T>& tape, std::span<const Tensor<T>> h, const AttnPoolParams<T>& p) {
  if (h.empty()) throw ArgumentError("attention_pool: empty input");
  return attention_pool(tape, stack_rows(tape, h), p);
}

/// g = sigmoid(W_g h_task + b_g); result = g * h_shared + (1 - g) * h_task.
/// Works on a vector or row-wise on a matrix.
template <std::floating_point T>
Tensor<T> gate_fuse(Tape<T>& tape, const Tensor<T>& h_task, const Tensor<T>& h_shared,
                    const GateParams<T>& p) {
  detail::require_same_shape("gate_fuse", h_task, h_shared);
  const std::size_t d = h_task.rank() == 1 ? h_task.size() : h_task.cols();
  if (p.w_g.rows() != d || p.w_g.cols() != d)
    throw DimensionError("gate_fuse: input " + shape_str(h_task.shape()) + " for W_g " +
                         shape_str(p.w_g.shape()));
  auto pre = h_task.rank() == 1 ? linear(tape, p.w_g, h_task, p.b_g)
                                : linear_rows(tape, h_task, p.w_g, p.b_g);
  auto g = sigmoid(tape, pre);
  return add(tape, h_task, mul(tape, g, sub(tape, h_shared, h_task)));
}

template <std::floating_point T>
struct CrossAttended {
  Tensor<T> features;  // [N x 2d]
  Tensor<T> weights;   // [N x N], rows sum to 1
};

/// c_ij = tgt_i^T W_c src_j; beta_i = softmax_j(c_i); out_i = tgt_i ++ sum_j beta_ij src_j.
template <std::floating_point T>
CrossAttended<T> cross_attend(Tape<T>& tape, const Tensor<T>& target, const Tensor<T>& source,
                              const BilinearParams<T>& p) {
  if (target.rank() != 2 || source.rank() != 2)
    throw DimensionError("cross_attend: expected matrices");
  if (target.rows() != source.rows())
    throw DimensionError("cross_attend: sequence lengths differ, " + shape_str(target.shape()) +
                         " vs " + shape_str(source.shape()));
  if (target.cols() != p.w_c.rows() || source.cols() != p.w_c.cols())
    throw DimensionError("cross_attend: W_c " + shape_str(p.w_c.shape()) + " does not fit " +
                         shape_str(target.shape()));
  auto scores = matmul(tape, matmul(tape, target, p.w_c), transpose(tape, source));
  auto beta = softmax_rows(tape, scores);
  auto attended = matmul(tape, beta, source);
  return {concat_cols(tape, target, attended), beta};
}

/// f_i ++ f_j ++ |f_i - f_j| ++ (f_i * f_j).
template <std::floating_point T>
Tensor<T> si_pair_features(Tape<T>& tape, const Tensor<T>& fi, const Tensor<T>& fj) {
  detail::require_same_shape("si_pair_features", fi, fj);
  detail::require_rank("si_pair_features", fi, 1);
  return concat(tape, {fi, fj, abs(tape, sub(tape, fi, fj)), mul(tape, fi, fj)});
}

}  // namespace mtlcer
