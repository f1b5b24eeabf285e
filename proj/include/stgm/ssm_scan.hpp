#pragma once

// State-space scans.
//
// discretize_zoh / recurrent_scan / conv_scan operate on plain vectors and
// serve the time-invariant path and as cross-checks for each other.
// selective_graph_scan is the differentiable graph-gated scan used by the
// model: per step the hidden state of every feature channel is an N x d_state
// matrix that is mixed across nodes by (Abar_t .* alpha_t) before the input
// is injected.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stgm/errors.hpp"
#include "stgm/fastmath.hpp"
#include "stgm/mac_counter.hpp"
#include "stgm/ops.hpp"
#include "stgm/tensor.hpp"

namespace stgm {

// |delta * a| below which the input gain switches to its series form.
inline constexpr double kZohSeriesThreshold = 1e-8;
// Offset keeping mapped state entries strictly negative.
inline constexpr double kStateMatrixMargin = 1e-4;
inline constexpr double kRowSumTolerance = 1e-6;

// ZOH input gain (exp(delta*a) - 1) / a. Near delta*a = 0 the exact form loses
// precision, so the two-term series delta * (1 + delta*a/2) is used instead.
inline double zoh_input_gain(double delta, double a) {
  const double x = delta * a;
  if (std::abs(x) < kZohSeriesThreshold) return delta * (1.0 + 0.5 * x);
  return std::expm1(x) / a;
}

namespace detail {

struct ZohGainGrad {
  double d_delta;
  double d_a;
};

inline ZohGainGrad zoh_input_gain_grad(double delta, double a) {
  const double x = delta * a;
  if (std::abs(x) < kZohSeriesThreshold) return {1.0 + x, 0.5 * delta * delta};
  // d/da = delta^2 * (x e^x - expm1(x)) / x^2; the quotient cancels badly for small x.
  double phi;
  if (std::abs(x) < 1e-3) {
    phi = 0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0;
  } else {
    phi = (x * std::exp(x) - std::expm1(x)) / (x * x);
  }
  return {std::exp(x), delta * delta * phi};
}

}  // namespace detail

struct DiscretizedParams {
  std::vector<double> a_bar;
  std::vector<double> b_bar;
  std::vector<double> delta;
};

// Entrywise zero-order hold: a_bar = exp(delta*a), b_bar = gain(delta, a) * b.
// `delta` holds either one value or one per entry.
inline DiscretizedParams discretize_zoh(std::span<const double> a, std::span<const double> b,
                                        std::span<const double> delta) {
  if (a.size() != b.size()) throw DimensionError("discretize_zoh: A and B sizes differ");
  if (delta.size() != 1 && delta.size() != a.size()) {
    throw DimensionError("discretize_zoh: delta must be scalar or match A");
  }
  DiscretizedParams out;
  out.a_bar.resize(a.size());
  out.b_bar.resize(a.size());
  out.delta.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = delta.size() == 1 ? delta[0] : delta[i];
    if (!(d > 0) || !std::isfinite(d)) throw DomainError("discretize_zoh: delta must be positive");
    out.delta[i] = d;
    out.a_bar[i] = std::exp(d * a[i]);
    out.b_bar[i] = zoh_input_gain(d, a[i]) * b[i];
  }
  return out;
}

inline DiscretizedParams discretize_zoh(std::span<const double> a, std::span<const double> b, double delta) {
  return discretize_zoh(a, b, std::span<const double>(&delta, 1));
}

// Single-input single-output scan with diagonal state:
//   h_t = a_bar .* h_{t-1} + b_bar * x_t,  y_t = <c, h_t> + d * x_t.
inline std::vector<double> recurrent_scan(const DiscretizedParams& disc, std::span<const double> c, double d,
                                          std::span<const double> x,
                                          std::optional<std::span<const double>> h0 = std::nullopt) {
  const std::size_t n = disc.a_bar.size();
  if (disc.b_bar.size() != n || c.size() != n) throw DimensionError("recurrent_scan: state sizes differ");
  std::vector<double> h(n, 0.0);
  if (h0) {
    if (h0->size() != n) throw DimensionError("recurrent_scan: h0 size differs from state");
    std::copy(h0->begin(), h0->end(), h.begin());
  }
  std::vector<double> y(x.size());
  for (std::size_t t = 0; t < x.size(); ++t) {
    double acc = d * x[t];
    for (std::size_t s = 0; s < n; ++s) {
      h[s] = disc.a_bar[s] * h[s] + disc.b_bar[s] * x[t];
      acc += c[s] * h[s];
    }
    y[t] = acc;
  }
  return y;
}

struct ConvKernel {
  std::vector<double> taps;
};

// taps[k] = <c, a_bar^k .* b_bar> for k < length.
inline ConvKernel make_conv_kernel(const DiscretizedParams& disc, std::span<const double> c, std::size_t length) {
  const std::size_t n = disc.a_bar.size();
  if (disc.b_bar.size() != n || c.size() != n) throw DimensionError("make_conv_kernel: state sizes differ");
  ConvKernel k;
  k.taps.resize(length);
  std::vector<double> p(disc.b_bar);
  for (std::size_t t = 0; t < length; ++t) {
    double acc = 0;
    for (std::size_t s = 0; s < n; ++s) {
      acc += c[s] * p[s];
      p[s] *= disc.a_bar[s];
    }
    k.taps[t] = acc;
  }
  return k;
}

// Causal convolution y_t = sum_k taps[k] x_{t-k} + d x_t. Taps beyond the
// sequence length are ignored; missing taps count as zero.
inline std::vector<double> conv_scan(const ConvKernel& kernel, double d, std::span<const double> x) {
  const std::size_t len = x.size();
  const std::size_t kt = std::min(kernel.taps.size(), len);
  std::vector<double> y(len);
  for (std::size_t t = 0; t < len; ++t) {
    double acc = d * x[t];
    const std::size_t kmax = std::min(kt, t + 1);
    for (std::size_t k = 0; k < kmax; ++k) acc += kernel.taps[k] * x[t - k];
    y[t] = acc;
  }
  return y;
}

// ---------------------------------------------------------------------------
// Selective parameterization

// Linear maps from channel width to the input-dependent scan parameters.
struct SelectiveProjection {
  Tensor w_delta;  // [channels, 1]
  Tensor b_delta;  // [1]
  Tensor w_b;      // [channels, d_state]
  Tensor w_c;      // [channels, d_state]
};

struct SelectiveParams {
  Tensor delta;  // [..., rows] (last axis of X dropped), softplus-positive
  Tensor b;      // [..., d_state]
  Tensor c;      // [..., d_state]
};

inline SelectiveParams selective_parameterize(const Tensor& x, const SelectiveProjection& w) {
  if (x.rank() < 1) throw DimensionError("selective_parameterize: rank-0 input");
  Tensor raw = linear(x, w.w_delta, w.b_delta);
  Shape dshape(x.shape().begin(), x.shape().end() - 1);
  SelectiveParams p;
  p.delta = reshape(softplus(raw), dshape);
  p.b = linear(x, w.w_b);
  p.c = linear(x, w.w_c);
  return p;
}

// Maps unconstrained entries to a = -softplus(raw) - margin (< 0 everywhere).
inline Tensor negative_state_matrix(const Tensor& raw) {
  return add_scalar(scale(softplus(raw), -1.0), -kStateMatrixMargin);
}

// ---------------------------------------------------------------------------
// Graph-gated selective scan kernel

struct GraphScanInputs {
  Tensor x;      // [B, L, N, C]
  Tensor alpha;  // [B, L, N, N], row-stochastic
  Tensor delta;  // [B, L, N], positive
  Tensor b;      // [B, L, N, S]
  Tensor c;      // [B, L, N, S]
  Tensor a;      // [N, N], negative
  Tensor d;      // [C]
};

namespace detail {

struct GraphScanDims {
  std::size_t batch, len, nodes, channels, state;
};

inline GraphScanDims check_graph_scan(const GraphScanInputs& in) {
  if (in.x.rank() != 4) throw DimensionError("selective_graph_scan: x must be [B,L,N,C], got " + shape_str(in.x.shape()));
  GraphScanDims g{in.x.dim(0), in.x.dim(1), in.x.dim(2), in.x.dim(3), 0};
  if (in.b.rank() != 4) throw DimensionError("selective_graph_scan: B must be [B,L,N,S]");
  g.state = in.b.dim(3);
  const auto expect = [](const Tensor& t, const Shape& s, const char* name) {
    if (t.shape() != s) {
      throw DimensionError(std::string("selective_graph_scan: ") + name + " is " + shape_str(t.shape()) +
                           ", expected " + shape_str(s));
    }
  };
  expect(in.alpha, {g.batch, g.len, g.nodes, g.nodes}, "alpha");
  expect(in.delta, {g.batch, g.len, g.nodes}, "delta");
  expect(in.b, {g.batch, g.len, g.nodes, g.state}, "B");
  expect(in.c, {g.batch, g.len, g.nodes, g.state}, "C");
  expect(in.a, {g.nodes, g.nodes}, "A");
  expect(in.d, {g.channels}, "D");
  const double* al = in.alpha.data();
  for (std::size_t r = 0; r < g.batch * g.len * g.nodes; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < g.nodes; ++j) {
      const double v = al[r * g.nodes + j];
      if (v < 0) throw ContractError("selective_graph_scan: alpha has a negative entry");
      s += v;
    }
    if (std::abs(s - 1.0) > kRowSumTolerance) {
      throw ContractError("selective_graph_scan: alpha row sums to " + std::to_string(s) + ", not 1");
    }
  }
  for (double v : in.delta.values()) {
    if (!(v > 0)) throw DomainError("selective_graph_scan: delta must be positive");
  }
  return g;
}

// Step-t mixing matrix M = exp(delta_i * a_ij) .* alpha_ij and input gains.
inline void graph_scan_step_operators(const GraphScanDims& g, const double* delta_t, const double* alpha_t,
                                      const double* a, double* edge_decay, double* mix, double* gain) {
  const std::size_t n = g.nodes;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) edge_decay[i * n + j] = delta_t[i] * a[i * n + j];
  exp_inplace(edge_decay, n * n);
  for (std::size_t k = 0; k < n * n; ++k) mix[k] = edge_decay[k] * alpha_t[k];
  for (std::size_t i = 0; i < n; ++i) gain[i] = zoh_input_gain(delta_t[i], a[i * n + i]);
}

}  // namespace detail

// Runs the scan without recording. `states`, when given, receives every
// hidden state laid out [B, L, N, C, S]; `edges` receives exp(delta_t a) as
// [B, L, N, N].
inline std::vector<double> graph_scan_forward(const GraphScanInputs& in, std::vector<double>* states = nullptr,
                                              std::vector<double>* edges = nullptr) {
  const auto g = detail::check_graph_scan(in);
  const std::size_t n = g.nodes, ch = g.channels, st = g.state, cs = ch * st;
  std::vector<double> y(in.x.numel());
  if (states) states->assign(g.batch * g.len * n * cs, 0.0);
  if (edges) edges->assign(g.batch * g.len * n * n, 0.0);
  std::vector<double> h(n * cs), hn(n * cs), edge(n * n), mix(n * n), gain(n);
  const double* X = in.x.data();
  const double* Bm = in.b.data();
  const double* Cm = in.c.data();
  const double* D = in.d.data();
  for (std::size_t b = 0; b < g.batch; ++b) {
    std::fill(h.begin(), h.end(), 0.0);
    for (std::size_t t = 0; t < g.len; ++t) {
      const std::size_t bt = b * g.len + t;
      detail::graph_scan_step_operators(g, in.delta.data() + bt * n, in.alpha.data() + bt * n * n, in.a.data(),
                                        edge.data(), mix.data(), gain.data());
      if (edges) std::copy(edge.begin(), edge.end(), edges->begin() + static_cast<std::ptrdiff_t>(bt * n * n));
      std::fill(hn.begin(), hn.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        double* hrow = hn.data() + i * cs;
        detail::with_width(cs, [&](auto width) {
          for (std::size_t j = 0; j < n; ++j) {
            const double m = mix[i * n + j];
            const double* hp = h.data() + j * cs;
            for (std::size_t k = 0; k < width; ++k) hrow[k] += m * hp[k];
          }
        });
        const double* xi = X + (bt * n + i) * ch;
        const double* bi = Bm + (bt * n + i) * st;
        const double* ci = Cm + (bt * n + i) * st;
        double* yi = y.data() + (bt * n + i) * ch;
        for (std::size_t c = 0; c < ch; ++c) {
          const double u = gain[i] * xi[c];
          double acc = D[c] * xi[c];
          for (std::size_t s = 0; s < st; ++s) {
            hrow[c * st + s] += u * bi[s];
            acc += ci[s] * hrow[c * st + s];
          }
          yi[c] = acc;
        }
      }
      h.swap(hn);
      if (states) std::copy(h.begin(), h.end(), states->begin() + static_cast<std::ptrdiff_t>(bt * n * cs));
    }
  }
  MacCounter::add(g.batch * g.len * (n * n * cs + 2 * n * cs));
  return y;
}

// Differentiable graph-gated scan over precomputed selective parameters:
//   h_t = (exp(delta_t a) .* alpha_t) h_{t-1} + gain(delta_t, diag a) B_t x_t
//   y_t = C_t h_t + D x_t
inline Tensor graph_scan(const GraphScanInputs& in) {
  const bool recording = active_tape() != nullptr;
  std::vector<double> states, edges;
  std::vector<double> y = graph_scan_forward(in, recording ? &states : nullptr, recording ? &edges : nullptr);
  Tensor out(in.x.shape(), std::move(y));
  const detail::GraphScanDims g{in.x.dim(0), in.x.dim(1), in.x.dim(2), in.x.dim(3), in.b.dim(3)};
  const Tensor* inputs[] = {&in.x, &in.alpha, &in.delta, &in.b, &in.c, &in.a, &in.d};
  return record_op(out, inputs, [in, g, states = std::move(states), edges = std::move(edges)](std::span<const double> gy,
                                                                                              GradRefs& gr) {
    const std::size_t n = g.nodes, ch = g.channels, st = g.state, cs = ch * st;
    const double* X = in.x.data();
    const double* Bm = in.b.data();
    const double* Cm = in.c.data();
    const double* D = in.d.data();
    const double* A = in.a.data();
    auto gx = gr[0];
    auto galpha = gr[1];
    auto gdelta = gr[2];
    auto gb = gr[3];
    auto gc = gr[4];
    auto ga = gr[5];
    auto gd = gr[6];
    std::vector<double> dh(n * cs), dhp(n * cs), mix(n * n), gain(n), dmix(n * n);
    const std::vector<double> zeros(n * cs, 0.0);
    for (std::size_t b = 0; b < g.batch; ++b) {
      std::fill(dh.begin(), dh.end(), 0.0);
      for (std::size_t t = g.len; t-- > 0;) {
        const std::size_t bt = b * g.len + t;
        const double* delta_t = in.delta.data() + bt * n;
        const double* alpha_t = in.alpha.data() + bt * n * n;
        const double* edge = edges.data() + bt * n * n;
        for (std::size_t ij = 0; ij < n * n; ++ij) mix[ij] = edge[ij] * alpha_t[ij];
        for (std::size_t i = 0; i < n; ++i) gain[i] = zoh_input_gain(delta_t[i], A[i * n + i]);
        const double* h = states.data() + bt * n * cs;
        const double* hprev = t > 0 ? states.data() + (bt - 1) * n * cs : zeros.data();
        for (std::size_t i = 0; i < n; ++i) {
          const double* xi = X + (bt * n + i) * ch;
          const double* bi = Bm + (bt * n + i) * st;
          const double* ci = Cm + (bt * n + i) * st;
          const double* gyi = gy.data() + (bt * n + i) * ch;
          double* dhi = dh.data() + i * cs;
          const double* hi = h + i * cs;
          double dgain = 0;
          for (std::size_t c = 0; c < ch; ++c) {
            const double dy = gyi[c];
            if (!gd.empty()) gd[c] += dy * xi[c];
            double dxc = D[c] * dy;
            double dxb = 0;
            for (std::size_t s = 0; s < st; ++s) {
              if (!gc.empty()) gc[(bt * n + i) * st + s] += dy * hi[c * st + s];
              dhi[c * st + s] += dy * ci[s];
              const double dhv = dhi[c * st + s];
              dgain += dhv * bi[s] * xi[c];
              if (!gb.empty()) gb[(bt * n + i) * st + s] += gain[i] * dhv * xi[c];
              dxb += dhv * bi[s];
            }
            dxc += gain[i] * dxb;
            if (!gx.empty()) gx[(bt * n + i) * ch + c] += dxc;
          }
          const auto gg = detail::zoh_input_gain_grad(delta_t[i], A[i * n + i]);
          if (!gdelta.empty()) gdelta[bt * n + i] += dgain * gg.d_delta;
          if (!ga.empty()) ga[i * n + i] += dgain * gg.d_a;
        }
        // Mixing: dM = dH hprev^T, dH_prev = M^T dH.
        std::fill(dhp.begin(), dhp.end(), 0.0);
        detail::with_width(cs, [&](auto width) {
          for (std::size_t i = 0; i < n; ++i) {
            const double* dhi = dh.data() + i * cs;
            for (std::size_t j = 0; j < n; ++j) {
              const double* hpj = hprev + j * cs;
              double acc = 0;
              for (std::size_t k = 0; k < width; ++k) acc += dhi[k] * hpj[k];
              dmix[i * n + j] = acc;
              const double m = mix[i * n + j];
              double* dhpj = dhp.data() + j * cs;
              for (std::size_t k = 0; k < width; ++k) dhpj[k] += m * dhi[k];
            }
          }
        });
        for (std::size_t i = 0; i < n; ++i) {
          double ddelta = 0;
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t ij = i * n + j;
            if (!galpha.empty()) galpha[bt * n * n + ij] += dmix[ij] * edge[ij];
            const double de = dmix[ij] * alpha_t[ij] * edge[ij];
            ddelta += de * A[ij];
            if (!ga.empty()) ga[ij] += de * delta_t[i];
          }
          if (!gdelta.empty()) gdelta[bt * n + i] += ddelta;
        }
        dh.swap(dhp);
      }
    }
  });
}

// Graph-scan weights: unconstrained state matrix, skip term and the
// selective projection.
struct GraphScanWeights {
  Tensor a_raw;  // [N, N]
  Tensor d;      // [C]
  SelectiveProjection proj;
};

// Full selective graph scan: projects X to (delta, B, C), maps the state
// matrix to negative entries and runs the gated recurrence with alpha_seq.
inline Tensor selective_graph_scan(const Tensor& x, const Tensor& alpha_seq, const GraphScanWeights& w) {
  if (x.rank() != 4) throw DimensionError("selective_graph_scan: x must be [B,L,N,C], got " + shape_str(x.shape()));
  auto sel = selective_parameterize(x, w.proj);
  return graph_scan(GraphScanInputs{x, alpha_seq, sel.delta, sel.b, sel.c, negative_state_matrix(w.a_raw), w.d});
}

}  // namespace stgm
