#pragma once

// Graph selective state space block.
//
//   u  = LN(X)
//   a  = SiLU(KFGN(Linear_a(u)))          alpha_t emitted per step by the filter
//   a' = LN(selective_graph_scan(a, alpha_1..L))
//   b  = SiLU(Linear_b(u))
//   Y  = Linear_out(a' .* b) + X
//
// The ablation variants swap the filter for a static adjacency (kfgn_off) or
// feed the scan a uniform adjacency (gss_off).

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "stgm/errors.hpp"
#include "stgm/kfgn.hpp"
#include "stgm/ops.hpp"
#include "stgm/ssm_scan.hpp"
#include "stgm/tensor.hpp"

namespace stgm {

enum class Variant { full, kfgn_off, gss_off };

inline Variant parse_variant(std::string_view name) {
  if (name == "full") return Variant::full;
  if (name == "kfgn_off") return Variant::kfgn_off;
  if (name == "gss_off") return Variant::gss_off;
  throw ContractError("unknown ablation variant '" + std::string(name) + "' (expected full, kfgn_off, gss_off)");
}

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::kfgn_off: return "kfgn_off";
    case Variant::gss_off: return "gss_off";
  }
  return "full";
}

struct BlockDims {
  std::size_t nodes = 1;
  std::size_t dim = 1;
  std::size_t expansion = 2;
  std::size_t d_state = 16;
  std::size_t gru_hidden = 64;
  std::size_t lowrank = 4;

  std::size_t inner() const { return expansion * dim; }
};

struct GS3BWeights {
  Tensor ln_in_gamma, ln_in_beta;
  Tensor lin_a_w, lin_a_b;
  Tensor lin_b_w, lin_b_b;
  DeepKFParams kf;
  KFGNWeights gc;
  GraphScanWeights scan;
  Tensor ln_mid_gamma, ln_mid_beta;
  Tensor lin_out_w, lin_out_b;

  // Calls f(name, tensor) for every trainable tensor in a fixed order.
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& w, F& f) {
    f("ln_in.gamma", w.ln_in_gamma);
    f("ln_in.beta", w.ln_in_beta);
    f("lin_a.w", w.lin_a_w);
    f("lin_a.b", w.lin_a_b);
    f("lin_b.w", w.lin_b_w);
    f("lin_b.b", w.lin_b_b);
    f("kf.gru.w_z", w.kf.gru.w_z);
    f("kf.gru.b_z", w.kf.gru.b_z);
    f("kf.gru.w_r", w.kf.gru.w_r);
    f("kf.gru.b_r", w.kf.gru.b_r);
    f("kf.gru.w_h", w.kf.gru.w_h);
    f("kf.gru.b_h", w.kf.gru.b_h);
    f("kf.f_head.w", w.kf.f_head_w);
    f("kf.f_head.b", w.kf.f_head_b);
    f("kf.lowrank.u", w.kf.lowrank_u);
    f("kf.lowrank.v", w.kf.lowrank_v);
    f("kf.h_head.w", w.kf.h_head_w);
    f("kf.h_head.b", w.kf.h_head_b);
    f("kf.log_process_noise", w.kf.log_process_noise);
    f("kf.log_obs_noise", w.kf.log_obs_noise);
    f("kf.alpha0_logits", w.kf.alpha0_logits);
    f("gc.omega", w.gc.omega_gc);
    f("scan.a_raw", w.scan.a_raw);
    f("scan.d", w.scan.d);
    f("scan.w_delta", w.scan.proj.w_delta);
    f("scan.b_delta", w.scan.proj.b_delta);
    f("scan.w_b", w.scan.proj.w_b);
    f("scan.w_c", w.scan.proj.w_c);
    f("ln_mid.gamma", w.ln_mid_gamma);
    f("ln_mid.beta", w.ln_mid_beta);
    f("lin_out.w", w.lin_out_w);
    f("lin_out.b", w.lin_out_b);
  }
};

namespace detail {

inline Tensor random_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.mutable_values()) v = dist(rng);
  return t;
}

inline double inverse_softplus(double y) { return std::log(std::expm1(y)); }

}  // namespace detail

// Fresh block: identity-initialized filter transition, decay rates near -1,
// step sizes near 0.1 and a zero output projection so the block starts as
// the identity map.
inline GS3BWeights init_gs3b(const BlockDims& dims, std::mt19937_64& rng) {
  const std::size_t n = dims.nodes, d = dims.dim, di = dims.inner(), s = dims.d_state, hd = dims.gru_hidden;
  const auto fan = [](std::size_t k) { return 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(k, 1))); };
  GS3BWeights w;
  w.ln_in_gamma = Tensor({d}, 1.0);
  w.ln_in_beta = Tensor({d});
  w.lin_a_w = detail::random_normal({d, di}, fan(d), rng);
  w.lin_a_b = Tensor({di});
  w.lin_b_w = detail::random_normal({d, di}, fan(d), rng);
  w.lin_b_b = Tensor({di});

  const std::size_t gin = 2 * di + hd;
  w.kf.gru.w_z = detail::random_normal({gin, hd}, fan(gin), rng);
  w.kf.gru.b_z = Tensor({hd});
  w.kf.gru.w_r = detail::random_normal({gin, hd}, fan(gin), rng);
  w.kf.gru.b_r = Tensor({hd});
  w.kf.gru.w_h = detail::random_normal({gin, hd}, fan(gin), rng);
  w.kf.gru.b_h = Tensor({hd});
  w.kf.f_head_w = detail::random_normal({hd, n}, 0.01 * fan(hd), rng);
  w.kf.f_head_b = Tensor({n}, 1.0);
  w.kf.lowrank_u = detail::random_normal({n, dims.lowrank}, 0.1 * fan(n), rng);
  w.kf.lowrank_v = detail::random_normal({n, dims.lowrank}, 0.1 * fan(n), rng);
  w.kf.h_head_w = detail::random_normal({hd, n * di}, 0.1 * fan(hd), rng);
  w.kf.h_head_b = Tensor({n * di});
  w.kf.log_process_noise = Tensor({1}, 0.0);
  w.kf.log_obs_noise = Tensor({1}, 0.0);
  w.kf.alpha0_logits = Tensor({n, n});
  w.gc.omega_gc = Tensor({n, n}, 1.0);

  w.scan.a_raw = Tensor({n, n}, detail::inverse_softplus(1.0));
  w.scan.d = Tensor({di}, 1.0);
  w.scan.proj.w_delta = detail::random_normal({di, 1}, 0.1 * fan(di), rng);
  w.scan.proj.b_delta = Tensor({1}, detail::inverse_softplus(0.1));
  w.scan.proj.w_b = detail::random_normal({di, s}, fan(di), rng);
  w.scan.proj.w_c = detail::random_normal({di, s}, fan(di), rng);

  w.ln_mid_gamma = Tensor({di}, 1.0);
  w.ln_mid_beta = Tensor({di});
  w.lin_out_w = Tensor({di, d});
  w.lin_out_b = Tensor({d});
  return w;
}

// Divides each row by its sum; rows summing to zero become uniform.
inline Tensor row_normalize(const Tensor& m) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) throw DimensionError("row_normalize: expected square matrix");
  const std::size_t n = m.dim(0);
  Tensor out({n, n});
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (m[i * n + j] < 0) throw ContractError("row_normalize: negative adjacency entry");
      s += m[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] = s > 0 ? m[i * n + j] / s : 1.0 / static_cast<double>(n);
  }
  return out;
}

inline Tensor uniform_adjacency(std::size_t n) { return Tensor({n, n}, 1.0 / static_cast<double>(n)); }

struct BlockOptions {
  Variant variant = Variant::full;
  // Row-stochastic [N,N] prior used by kfgn_off; uniform when absent.
  std::optional<Tensor> static_alpha;
};

struct BlockState {
  Tensor kf_hidden;  // [B, gru_hidden]
  AdjacencyState adjacency;
};

inline BlockState initial_block_state(const GS3BWeights& w, std::size_t batch) {
  return BlockState{Tensor({batch, w.kf.gru.b_z.numel()}), initial_adjacency(w.kf, batch)};
}

struct BlockOutput {
  Tensor y;          // same shape as the input
  BlockState state;  // filter state after the last step
  Tensor alpha_seq;  // [B, L, N, N] adjacency used by the scan
};

inline BlockOutput gs3b_forward(const Tensor& x, const GS3BWeights& w, const BlockState& state,
                                const BlockOptions& opt = {}) {
  if (x.rank() != 4) throw DimensionError("gs3b_forward: expected [B,L,N,d], got " + shape_str(x.shape()));
  const std::size_t bs = x.dim(0), len = x.dim(1), n = x.dim(2);
  if (w.gc.omega_gc.dim(0) != n) {
    throw DimensionError("gs3b_forward: block built for " + std::to_string(w.gc.omega_gc.dim(0)) +
                         " nodes, input has " + std::to_string(n));
  }
  if (len == 0) throw DimensionError("gs3b_forward: empty sequence");

  const Tensor u = layer_norm(x, w.ln_in_gamma, w.ln_in_beta);
  const Tensor xa = linear(u, w.lin_a_w, w.lin_a_b);

  BlockOutput out;
  out.state = state;
  std::vector<Tensor> conv_steps;
  std::vector<Tensor> alphas;
  conv_steps.reserve(len);
  alphas.reserve(len);
  if (opt.variant == Variant::kfgn_off) {
    const Tensor prior = opt.static_alpha ? *opt.static_alpha : uniform_adjacency(n);
    if (prior.shape() != Shape{n, n}) throw DimensionError("gs3b_forward: static adjacency must be [N,N]");
    const Tensor alpha_b = add_trailing(Tensor({bs, n, n}), prior);
    for (std::size_t t = 0; t < len; ++t) {
      conv_steps.push_back(graph_convolution(alpha_b, select(xa, 1, t), w.gc.omega_gc));
      alphas.push_back(alpha_b);
    }
  } else {
    for (std::size_t t = 0; t < len; ++t) {
      const Tensor xt = select(xa, 1, t);
      KfStep step = generate_adjacency(xt, out.state.kf_hidden, out.state.adjacency, w.kf);
      conv_steps.push_back(graph_convolution(step.adjacency.alpha, xt, w.gc.omega_gc));
      alphas.push_back(step.adjacency.alpha);
      out.state.kf_hidden = step.hidden;
      out.state.adjacency = step.adjacency;
    }
  }
  const Tensor a = silu(stack(conv_steps, 1));
  out.alpha_seq = opt.variant == Variant::gss_off ? Tensor({bs, len, n, n}, 1.0 / static_cast<double>(n))
                                                  : stack(alphas, 1);
  const Tensor scanned = selective_graph_scan(a, out.alpha_seq, w.scan);
  const Tensor a2 = layer_norm(scanned, w.ln_mid_gamma, w.ln_mid_beta);
  const Tensor b = silu(linear(u, w.lin_b_w, w.lin_b_b));
  out.y = add(linear(mul(a2, b), w.lin_out_w, w.lin_out_b), x);
  return out;
}

inline Tensor gs3b_ablated_forward(const Tensor& x, const GS3BWeights& w, Variant variant,
                                   std::optional<Tensor> static_alpha = std::nullopt) {
  if (x.rank() != 4) throw DimensionError("gs3b_ablated_forward: expected [B,L,N,d]");
  return gs3b_forward(x, w, initial_block_state(w, x.dim(0)), BlockOptions{variant, std::move(static_alpha)}).y;
}

inline Tensor gs3b_ablated_forward(const Tensor& x, const GS3BWeights& w, std::string_view variant,
                                   std::optional<Tensor> static_alpha = std::nullopt) {
  return gs3b_ablated_forward(x, w, parse_variant(variant), std::move(static_alpha));
}

}  // namespace stgm
