#pragma once

// Kalman-filtered adaptive adjacency.
//
// The filter state is a matrix of adjacency logits S_t; the adjacency handed
// to the rest of the network is alpha_t = row_softmax(S_t). A GRU reads a
// pooled summary of the current observation and emits the transition and
// observation operators for the step:
//
//   predict:  S_pred = diag(f_t) S_{t-1} + (S_{t-1} V) U^T
//   observe:  x_hat  = S_pred H_t                  (H_t is N x d)
//   update:   S_t    = S_pred + k (x - x_hat) H_t^T,   k = e^w / (e^w + e^v)
//
// The scalar gain k stands in for the covariance recursion; w and v are the
// learned log-scales of process and observation noise.

#include <cmath>
#include <cstddef>
#include <ostream>
#include <utility>
#include <vector>

#include "stgm/errors.hpp"
#include "stgm/mac_counter.hpp"
#include "stgm/ops.hpp"
#include "stgm/serialize.hpp"
#include "stgm/tensor.hpp"

namespace stgm {

inline constexpr double kPoolStdEps = 1e-8;

struct GruWeights {
  Tensor w_z, b_z;  // [(in + hidden), hidden], [hidden]
  Tensor w_r, b_r;
  Tensor w_h, b_h;
};

// Standard GRU update for a batch of rows x[B, in], h[B, hidden].
inline Tensor gru_cell(const Tensor& x, const Tensor& h, const GruWeights& w) {
  if (x.rank() != 2 || h.rank() != 2 || x.dim(0) != h.dim(0)) {
    throw DimensionError("gru_cell: x " + shape_str(x.shape()) + " and h " + shape_str(h.shape()) +
                         " must be [B,in] and [B,hidden]");
  }
  const std::size_t hidden = h.dim(1);
  if (w.w_z.rank() != 2 || w.w_z.dim(0) != x.dim(1) + hidden || w.w_z.dim(1) != hidden) {
    throw DimensionError("gru_cell: gate weights " + shape_str(w.w_z.shape()) + " do not match input " +
                         std::to_string(x.dim(1)) + " + hidden " + std::to_string(hidden));
  }
  const Tensor xh = concat_last(x, h);
  const Tensor z = sigmoid(linear(xh, w.w_z, w.b_z));
  const Tensor r = sigmoid(linear(xh, w.w_r, w.b_r));
  const Tensor cand = tanh(linear(concat_last(x, mul(r, h)), w.w_h, w.b_h));
  // (1 - z) h + z cand = h + z (cand - h)
  return add(h, mul(z, sub(cand, h)));
}

// Per-batch node summary: mean over nodes concatenated with the standard
// deviation (sqrt(var + eps)). x[B, N, d] -> [B, 2d].
inline Tensor node_pool(const Tensor& x) {
  if (x.rank() != 3 || x.dim(1) == 0) throw DimensionError("node_pool: expected [B,N,d], got " + shape_str(x.shape()));
  const std::size_t bs = x.dim(0), n = x.dim(1), d = x.dim(2);
  Tensor out({bs, 2 * d});
  auto o = out.mutable_values();
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t b = 0; b < bs; ++b) {
    for (std::size_t k = 0; k < d; ++k) {
      double mu = 0;
      for (std::size_t i = 0; i < n; ++i) mu += x[(b * n + i) * d + k];
      mu *= inv_n;
      double var = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = x[(b * n + i) * d + k] - mu;
        var += e * e;
      }
      var *= inv_n;
      o[b * 2 * d + k] = mu;
      o[b * 2 * d + d + k] = std::sqrt(var + kPoolStdEps);
    }
  }
  return record_op(out, {&x}, [x, out, bs, n, d, inv_n](std::span<const double> g, GradRefs& gr) {
    auto gx = gr[0];
    for (std::size_t b = 0; b < bs; ++b) {
      for (std::size_t k = 0; k < d; ++k) {
        const double mu = out[b * 2 * d + k];
        const double sd = out[b * 2 * d + d + k];
        const double gm = g[b * 2 * d + k] * inv_n;
        const double gs = g[b * 2 * d + d + k] * inv_n / sd;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t idx = (b * n + i) * d + k;
          gx[idx] += gm + gs * (x[idx] - mu);
        }
      }
    }
  });
}

// Adjacency estimate at one step; both tensors are [B, N, N].
struct AdjacencyState {
  Tensor alpha;   // row-stochastic
  Tensor logits;  // filter state
  std::size_t step = 0;
};

struct DeepKFParams {
  GruWeights gru;
  Tensor f_head_w, f_head_b;  // hidden -> N per-row transition gains
  Tensor lowrank_u, lowrank_v;  // [N, rank]
  Tensor h_head_w, h_head_b;  // hidden -> N*d observation operator
  Tensor log_process_noise;   // [1]
  Tensor log_obs_noise;       // [1]
  Tensor alpha0_logits;       // [N, N]
};

struct KFGNWeights {
  Tensor omega_gc;  // [N, N]
};

// Factored transition operator acting row-wise on logits.
struct Transition {
  Tensor diag;  // [B, N], one gain per logit row
  Tensor u;     // [N, r]
  Tensor v;     // [N, r]
};

inline Tensor kf_predict(const Tensor& logits_prev, const Transition& f) {
  if (logits_prev.rank() != 3 || logits_prev.dim(1) != logits_prev.dim(2)) {
    throw DimensionError("kf_predict: logits must be [B,N,N], got " + shape_str(logits_prev.shape()));
  }
  const std::size_t bs = logits_prev.dim(0), n = logits_prev.dim(1);
  if (f.diag.numel() != bs * n) {
    throw DimensionError("kf_predict: transition gains " + shape_str(f.diag.shape()) + " for " + std::to_string(bs) +
                         " x " + std::to_string(n) + " rows");
  }
  Tensor pred = scale_rows(logits_prev, f.diag);
  if (f.u.numel() == 0) return pred;
  if (f.u.shape() != f.v.shape() || f.u.rank() != 2 || f.u.dim(0) != n) {
    throw DimensionError("kf_predict: low-rank factors must both be [N,r]");
  }
  const Tensor rows = reshape(logits_prev, {bs * n, n});
  const Tensor low = matmul(matmul(rows, f.v), transpose_last2(f.u));
  return add(pred, reshape(low, {bs, n, n}));
}

// Gain k = e^w / (e^w + e^v) = sigmoid(w - v) as a one-element tensor.
inline Tensor kalman_gain(const Tensor& log_process_noise, const Tensor& log_obs_noise) {
  return sigmoid(sub(log_process_noise, log_obs_noise));
}

inline AdjacencyState kf_update(const Tensor& logits_pred, const Tensor& x_obs, const Tensor& obs_op,
                                const Tensor& gain, std::size_t step = 0) {
  if (x_obs.shape() != obs_op.shape() || x_obs.rank() != 3 || x_obs.dim(1) != logits_pred.dim(1)) {
    throw DimensionError("kf_update: observation " + shape_str(x_obs.shape()) + " and operator " +
                         shape_str(obs_op.shape()) + " inconsistent with logits " + shape_str(logits_pred.shape()));
  }
  const Tensor residual = sub(x_obs, bmm(logits_pred, obs_op));
  const Tensor correction = bmm(residual, transpose_last2(obs_op));
  AdjacencyState s;
  s.logits = add(logits_pred, mul_scalar(correction, gain));
  s.alpha = row_softmax(s.logits);
  s.step = step;
  return s;
}

namespace detail {

// kf_update(kf_predict(S, f), x, H, k).logits as one recorded op; the
// composed path above is the reference it must agree with.
inline Tensor kf_step_fused(const Tensor& s, const Transition& f, const Tensor& x, const Tensor& h, const Tensor& k) {
  const std::size_t bs = s.dim(0), n = s.dim(1), ch = x.dim(2), r = f.u.numel() ? f.u.dim(1) : 0;
  if (s.shape() != Shape{bs, n, n} || f.diag.numel() != bs * n || x.shape() != Shape{bs, n, ch} ||
      h.shape() != x.shape() || k.numel() != 1 || (r && (f.u.shape() != Shape{n, r} || f.v.shape() != Shape{n, r}))) {
    throw DimensionError("kf_step: inconsistent shapes, logits " + shape_str(s.shape()) + ", observation " +
                         shape_str(x.shape()) + ", operator " + shape_str(h.shape()));
  }
  const double gain = k[0];
  // Transposed copies keep every inner loop contiguous over a node axis.
  std::vector<double> ut(r * n), vt(r * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t q = 0; q < r; ++q) {
      ut[q * n + j] = f.u[j * r + q];
      vt[q * n + j] = f.v[j * r + q];
    }
  // Saved for backward: W = S V, P = diag(f) S + W U^T, R = x - P H.
  std::vector<double> sv(bs * n * r), pred(bs * n * n), resid(bs * n * ch), ht(ch * n);
  Tensor out({bs, n, n});
  double* O = out.mutable_values().data();
  const double *S = s.data(), *F = f.diag.data(), *X = x.data(), *H = h.data();
  const double* V = f.v.data();
  for (std::size_t b = 0; b < bs; ++b) {
    const double* Hb = H + b * n * ch;
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t c = 0; c < ch; ++c) ht[c * n + j] = Hb[j * ch + c];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t row = (b * n + i) * n;
      const double* si = S + row;
      double* wi = sv.data() + (b * n + i) * r;
      vec_mat(si, V, n, r, wi);
      double* pi = pred.data() + row;
      const double fi = F[b * n + i];
      for (std::size_t j = 0; j < n; ++j) pi[j] = fi * si[j];
      for (std::size_t q = 0; q < r; ++q) {
        const double w = wi[q];
        const double* uq = ut.data() + q * n;
        for (std::size_t j = 0; j < n; ++j) pi[j] += w * uq[j];
      }
      double* ri = resid.data() + (b * n + i) * ch;
      const double* xi = X + (b * n + i) * ch;
      vec_mat(pi, Hb, n, ch, ri);
      for (std::size_t c = 0; c < ch; ++c) ri[c] = xi[c] - ri[c];
      double* oi = O + row;
      for (std::size_t j = 0; j < n; ++j) oi[j] = pi[j];
      for (std::size_t c = 0; c < ch; ++c) {
        const double* hc = ht.data() + c * n;
        const double kr = gain * ri[c];
        for (std::size_t j = 0; j < n; ++j) oi[j] += kr * hc[j];
      }
    }
  }
  MacCounter::add(bs * (2 * n * n * r + 2 * n * n * ch));
  return record_op(out, {&s, &f.diag, &f.u, &f.v, &x, &h, &k},
                   [s, f, h, k, bs, n, ch, r, ut = std::move(ut), vt = std::move(vt), pred = std::move(pred),
                    resid = std::move(resid), sv = std::move(sv)](std::span<const double> g, GradRefs& gr) {
                     const double gain = k[0];
                     const double *S = s.data(), *F = f.diag.data(), *H = h.data(), *U = f.u.data();
                     auto gs = gr[0];
                     auto gf = gr[1];
                     auto gu = gr[2];
                     auto gv = gr[3];
                     auto gx = gr[4];
                     auto gh = gr[5];
                     auto gk = gr[6];
                     std::vector<double> dp(n), gh_b(ch), ht(ch * n), dht(ch * n), dut(r * n, 0.0), dvt(r * n, 0.0),
                         dw(r), dr(ch);
                     double dgain = 0;
                     for (std::size_t b = 0; b < bs; ++b) {
                       const double* Hb = H + b * n * ch;
                       for (std::size_t j = 0; j < n; ++j)
                         for (std::size_t c = 0; c < ch; ++c) ht[c * n + j] = Hb[j * ch + c];
                       std::fill(dht.begin(), dht.end(), 0.0);
                       for (std::size_t i = 0; i < n; ++i) {
                         const std::size_t row = (b * n + i) * n;
                         const double* gi = g.data() + row;
                         const double* pi = pred.data() + row;
                         const double* si = S + row;
                         const double* ri = resid.data() + (b * n + i) * ch;
                         const double* wi = sv.data() + (b * n + i) * r;
                         // L = P + k R H^T and R = x - P H.
                         for (std::size_t j = 0; j < n; ++j) dp[j] = gi[j];
                         vec_mat(gi, Hb, n, ch, gh_b.data());
                         for (std::size_t c = 0; c < ch; ++c) {
                           const double* hc = ht.data() + c * n;
                           const double gh_ic = gh_b[c];
                           dgain += ri[c] * gh_ic;
                           dr[c] = gain * gh_ic;
                           double* dhc = dht.data() + c * n;
                           const double kr = gain * ri[c];
                           for (std::size_t j = 0; j < n; ++j) {
                             dhc[j] += kr * gi[j] - dr[c] * pi[j];
                             dp[j] -= dr[c] * hc[j];
                           }
                         }
                         if (!gx.empty())
                           for (std::size_t c = 0; c < ch; ++c) gx[(b * n + i) * ch + c] += dr[c];
                         // P = diag(f) S + W U^T with W = S V.
                         if (!gf.empty()) {
                           double df = 0;
                           for (std::size_t j = 0; j < n; ++j) df += dp[j] * si[j];
                           gf[b * n + i] += df;
                         }
                         vec_mat(dp.data(), U, n, r, dw.data());
                         for (std::size_t q = 0; q < r; ++q) {
                           const double acc = dw[q];
                           double* duq = dut.data() + q * n;
                           const double w = wi[q];
                           for (std::size_t j = 0; j < n; ++j) duq[j] += w * dp[j];
                           double* dvq = dvt.data() + q * n;
                           for (std::size_t l = 0; l < n; ++l) dvq[l] += acc * si[l];
                         }
                         if (!gs.empty()) {
                           double* gsi = gs.data() + row;
                           const double fi = F[b * n + i];
                           for (std::size_t j = 0; j < n; ++j) gsi[j] += fi * dp[j];
                           for (std::size_t q = 0; q < r; ++q) {
                             const double* vq = vt.data() + q * n;
                             for (std::size_t l = 0; l < n; ++l) gsi[l] += dw[q] * vq[l];
                           }
                         }
                       }
                       if (!gh.empty())
                         for (std::size_t j = 0; j < n; ++j)
                           for (std::size_t c = 0; c < ch; ++c) gh[(b * n + j) * ch + c] += dht[c * n + j];
                     }
                     for (std::size_t j = 0; j < n; ++j)
                       for (std::size_t q = 0; q < r; ++q) {
                         if (!gu.empty()) gu[j * r + q] += dut[q * n + j];
                         if (!gv.empty()) gv[j * r + q] += dvt[q * n + j];
                       }
                     if (!gk.empty()) gk[0] += dgain;
                   });
}

}  // namespace detail

// Filter state before any observation: alpha0 logits repeated over the batch.
inline AdjacencyState initial_adjacency(const DeepKFParams& p, std::size_t batch) {
  const std::size_t n = p.alpha0_logits.dim(0);
  AdjacencyState s;
  s.logits = add_trailing(Tensor({batch, n, n}), p.alpha0_logits);
  s.alpha = row_softmax(s.logits);
  s.step = 0;
  return s;
}

struct KfStep {
  AdjacencyState adjacency;
  Tensor hidden;
};

// One filter step on observation x_obs[B, N, d] given the previous state.
inline KfStep generate_adjacency(const Tensor& x_obs, const Tensor& kf_hidden, const AdjacencyState& prev,
                                 const DeepKFParams& p) {
  if (x_obs.rank() != 3) throw DimensionError("generate_adjacency: x_obs must be [B,N,d]");
  const std::size_t bs = x_obs.dim(0), n = x_obs.dim(1), d = x_obs.dim(2);
  if (prev.logits.shape() != Shape{bs, n, n}) {
    throw DimensionError("generate_adjacency: previous logits " + shape_str(prev.logits.shape()) +
                         " do not match observation " + shape_str(x_obs.shape()));
  }
  KfStep out;
  out.hidden = gru_cell(node_pool(x_obs), kf_hidden, p.gru);
  Transition f{linear(out.hidden, p.f_head_w, p.f_head_b), p.lowrank_u, p.lowrank_v};
  const Tensor obs_op = reshape(linear(out.hidden, p.h_head_w, p.h_head_b), {bs, n, d});
  out.adjacency.logits =
      detail::kf_step_fused(prev.logits, f, x_obs, obs_op, kalman_gain(p.log_process_noise, p.log_obs_noise));
  out.adjacency.alpha = row_softmax(out.adjacency.logits);
  out.adjacency.step = prev.step + 1;
  return out;
}

// Gated message pass (omega .* alpha) x for alpha[B,N,N], x[B,N,d].
inline Tensor graph_convolution(const Tensor& alpha, const Tensor& x, const Tensor& omega) {
  if (alpha.rank() != 3 || x.rank() != 3 || alpha.dim(0) != x.dim(0) || alpha.dim(2) != x.dim(1)) {
    throw DimensionError("graph_convolution: alpha " + shape_str(alpha.shape()) + " and x " + shape_str(x.shape()));
  }
  if (omega.shape() != Shape{alpha.dim(1), alpha.dim(2)}) {
    throw DimensionError("graph_convolution: omega " + shape_str(omega.shape()) + " does not match adjacency");
  }
  const std::size_t bs = alpha.dim(0), n = alpha.dim(1), ch = x.dim(2);
  Tensor out({bs, n, ch});
  auto o = out.mutable_values();
  const double *A = alpha.data(), *W = omega.data(), *X = x.data();
  std::vector<double> e(n);
  for (std::size_t b = 0; b < bs; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      const double* ai = A + (b * n + i) * n;
      for (std::size_t j = 0; j < n; ++j) e[j] = ai[j] * W[i * n + j];
      detail::vec_mat(e.data(), X + b * n * ch, n, ch, o.data() + (b * n + i) * ch);
    }
  MacCounter::add(bs * n * n * ch);
  return record_op(out, {&alpha, &x, &omega}, [alpha, x, omega, bs, n, ch](std::span<const double> g, GradRefs& gr) {
    const double *A = alpha.data(), *W = omega.data(), *X = x.data();
    auto ga = gr[0];
    auto gx = gr[1];
    auto gw = gr[2];
    std::vector<double> dot(n), et(n * n), acc(ch);
    for (std::size_t b = 0; b < bs; ++b) {
      const double* Xb = X + b * n * ch;
      const double* Gb = g.data() + b * n * ch;
      for (std::size_t i = 0; i < n; ++i) {
        const double* gi = Gb + i * ch;
        const double* ai = A + (b * n + i) * n;
        detail::with_width(ch, [&](auto width) {
          for (std::size_t j = 0; j < n; ++j) {
            const double* xj = Xb + j * ch;
            double s = 0;
            for (std::size_t c = 0; c < width; ++c) s += gi[c] * xj[c];
            dot[j] = s;
          }
        });
        if (!ga.empty()) {
          double* gai = ga.data() + (b * n + i) * n;
          for (std::size_t j = 0; j < n; ++j) gai[j] += W[i * n + j] * dot[j];
        }
        if (!gw.empty()) {
          double* gwi = gw.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) gwi[j] += ai[j] * dot[j];
        }
        for (std::size_t j = 0; j < n; ++j) et[j * n + i] = ai[j] * W[i * n + j];
      }
      if (!gx.empty()) {
        // gx[j] = sum_i e_ij g[i]
        for (std::size_t j = 0; j < n; ++j) {
          detail::vec_mat(et.data() + j * n, Gb, n, ch, acc.data());
          double* gxj = gx.data() + (b * n + j) * ch;
          for (std::size_t c = 0; c < ch; ++c) gxj[c] += acc[c];
        }
      }
    }
  });
}

// Adjacency snapshots as CSV rows (step, i, j, value). `alpha_seq` is [L, N, N].
inline void write_adjacency_csv(std::ostream& os, const Tensor& alpha_seq, std::size_t first_step = 0) {
  if (alpha_seq.rank() != 3 || alpha_seq.dim(1) != alpha_seq.dim(2)) {
    throw DimensionError("write_adjacency_csv: expected [L,N,N]");
  }
  const std::size_t len = alpha_seq.dim(0), n = alpha_seq.dim(1);
  os << "step,i,j,value\n";
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        os << first_step + t << ',' << i << ',' << j << ',' << detail::format_double(alpha_seq[(t * n + i) * n + j])
           << '\n';
}

}  // namespace stgm
