#pragma once

// Analytic multiply-add counts and the scaling harness.
//
// Counts cover contractions only (linear maps, matrix products, graph
// convolution, filter and scan mixing), the same set MacCounter tallies at
// run time, so every analytic count can be audited against a real forward.
// One multiply-add is two FLOPs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "stgm/errors.hpp"
#include "stgm/gs3b.hpp"
#include "stgm/model.hpp"
#include "stgm/tensor.hpp"

namespace stgm {

// How a term grows with the node count at fixed B, L and widths.
enum class TermScaling { edge, node, global };

struct FlopTerm {
  std::string name;
  TermScaling scaling;
  std::uint64_t macs = 0;
};

struct FlopsReport {
  std::string arch;  // "stg_mamba" or "attention"
  std::size_t batch = 0, length = 0, d_model = 0, nodes = 0;
  std::uint64_t macs = 0;
  std::uint64_t flops = 0;  // 2 * macs
  std::uint64_t memory_reads = 0;
  std::vector<FlopTerm> terms;

  std::uint64_t term(std::string_view name) const {
    for (const auto& t : terms)
      if (t.name == name) return t.macs;
    throw ContractError("flops report has no term '" + std::string(name) + "'");
  }
  std::uint64_t macs_by(TermScaling s) const {
    std::uint64_t total = 0;
    for (const auto& t : terms)
      if (t.scaling == s) total += t.macs;
    return total;
  }
};

namespace detail {

inline void add_term(FlopsReport& r, std::string_view name, TermScaling s, std::uint64_t macs) {
  for (auto& t : r.terms) {
    if (t.name == name) {
      t.macs += macs;
      return;
    }
  }
  r.terms.push_back({std::string(name), s, macs});
}

inline void finish(FlopsReport& r) {
  r.macs = 0;
  for (const auto& t : r.terms) r.macs += t.macs;
  r.flops = 2 * r.macs;
}

// One GS3B block over a [B, len, N, d_model] input.
inline void block_terms(FlopsReport& r, std::uint64_t bs, std::uint64_t len, std::uint64_t n, const BlockDims& dims,
                        Variant variant) {
  const std::uint64_t dm = dims.dim, di = dims.inner(), s = dims.d_state, hd = dims.gru_hidden, rk = dims.lowrank;
  const std::uint64_t rows = bs * len * n;
  add_term(r, "in_proj", TermScaling::node, 2 * rows * dm * di);
  if (variant != Variant::kfgn_off) {
    const std::uint64_t gin = 2 * di + hd;
    add_term(r, "kf_gru", TermScaling::global, bs * len * 3 * gin * hd);
    add_term(r, "kf_heads", TermScaling::node, bs * len * (hd * n + hd * n * di));
    add_term(r, "kf_filter", TermScaling::edge, bs * len * 2 * n * n * (rk + di));
  }
  add_term(r, "graph_conv", TermScaling::edge, bs * len * n * n * di);
  add_term(r, "selective_proj", TermScaling::node, rows * di * (1 + 2 * s));
  add_term(r, "scan_mixing", TermScaling::edge, bs * len * n * n * di * s);
  add_term(r, "scan_io", TermScaling::node, 2 * rows * di * s);
  add_term(r, "out_proj", TermScaling::node, rows * di * dm);
}

inline std::uint64_t block_parameters(std::uint64_t n, const BlockDims& dims) {
  const std::uint64_t dm = dims.dim, di = dims.inner(), s = dims.d_state, hd = dims.gru_hidden, rk = dims.lowrank;
  const std::uint64_t gin = 2 * di + hd;
  return 2 * dm                      // input norm
         + 2 * (dm * di + di)        // lin_a, lin_b
         + 3 * (gin * hd + hd)       // GRU gates
         + hd * n + n                // transition gains
         + 2 * n * rk                // low-rank factors
         + hd * n * di + n * di      // observation operator
         + 2                         // noise scales
         + 3 * n * n                 // alpha0 logits, omega, state matrix
         + di + di + 1 + 2 * di * s  // skip, delta, B, C projections
         + 2 * di                    // mid norm
         + di * dm + dm;             // output projection
}

inline BlockDims dims_for(const ModelConfig& cfg, std::size_t d_model, std::size_t nodes) {
  BlockDims d = cfg.block_dims();
  d.dim = d_model;
  d.nodes = nodes;
  return d;
}

}  // namespace detail

// Trainable parameter count of a model built from cfg (static prior excluded).
inline std::uint64_t model_parameter_count(const ModelConfig& cfg) {
  const std::uint64_t dm = cfg.d_model, d = cfg.n_features, k = cfg.horizon_k;
  const auto per_block = detail::block_parameters(cfg.n_nodes, detail::dims_for(cfg, cfg.d_model, cfg.n_nodes));
  return d * dm + dm + cfg.steps_per_day * dm + dm + (cfg.n_encoder + cfg.n_decoder) * per_block + dm * k * d + k * d;
}

// Backbone only: n_encoder + n_decoder blocks, each over a length-L sequence.
// Every term is proportional to L.
inline FlopsReport count_flops_backbone(std::size_t batch, std::size_t length, std::size_t d_model, std::size_t nodes,
                                        const ModelConfig& cfg) {
  if (batch == 0 || length == 0 || d_model == 0 || nodes == 0) throw ContractError("count_flops: sizes must be positive");
  FlopsReport r{"stg_mamba", batch, length, d_model, nodes, 0, 0, 0, {}};
  const auto dims = detail::dims_for(cfg, d_model, nodes);
  const std::size_t blocks = cfg.n_encoder + cfg.n_decoder;
  for (std::size_t b = 0; b < blocks; ++b) detail::block_terms(r, batch, length, nodes, dims, cfg.variant);
  detail::finish(r);
  r.memory_reads = static_cast<std::uint64_t>(batch) * length * nodes * d_model + blocks * detail::block_parameters(nodes, dims);
  return r;
}

// Full forward of model_forward with history L: embedding, encoder blocks at
// length L, decoder blocks at L + 1 (start token), output head.
inline FlopsReport count_flops_stg_mamba(std::size_t batch, std::size_t length, std::size_t d_model, std::size_t nodes,
                                         const ModelConfig& cfg) {
  if (batch == 0 || length == 0 || d_model == 0 || nodes == 0) throw ContractError("count_flops: sizes must be positive");
  FlopsReport r{"stg_mamba", batch, length, d_model, nodes, 0, 0, 0, {}};
  const auto dims = detail::dims_for(cfg, d_model, nodes);
  const std::uint64_t bs = batch, n = nodes, d = cfg.n_features;
  detail::add_term(r, "embedding", TermScaling::node, bs * length * n * d * d_model);
  for (std::size_t b = 0; b < cfg.n_encoder; ++b) detail::block_terms(r, bs, length, n, dims, cfg.variant);
  for (std::size_t b = 0; b < cfg.n_decoder; ++b) detail::block_terms(r, bs, length + 1, n, dims, cfg.variant);
  detail::add_term(r, "head", TermScaling::node, bs * n * d_model * cfg.horizon_k * d);
  detail::finish(r);
  ModelConfig sized = cfg;
  sized.d_model = d_model;
  sized.n_nodes = nodes;
  r.memory_reads = bs * length * n * d + model_parameter_count(sized);
  return r;
}

// Dense self-attention over the L * N space-time tokens, `layers` deep:
// scores Q K^T and value mixing are quadratic in the token count, the four
// projections (Q, K, V, output) linear. With N = 1 this is
// 2 B L^2 d + 2 B L^2 d FLOPs plus projections.
inline FlopsReport count_flops_attention(std::size_t batch, std::size_t length, std::size_t d_model,
                                         std::size_t nodes = 1, std::size_t layers = 1) {
  if (batch == 0 || length == 0 || d_model == 0 || nodes == 0 || layers == 0) {
    throw ContractError("count_flops_attention: sizes must be positive");
  }
  FlopsReport r{"attention", batch, length, d_model, nodes, 0, 0, 0, {}};
  const std::uint64_t tok = static_cast<std::uint64_t>(length) * nodes, bs = batch, d = d_model;
  detail::add_term(r, "scores", TermScaling::edge, layers * bs * tok * tok * d);
  detail::add_term(r, "mixing", TermScaling::edge, layers * bs * tok * tok * d);
  detail::add_term(r, "projections", TermScaling::node, layers * 4 * bs * tok * d * d);
  detail::finish(r);
  r.memory_reads = bs * tok * d + layers * 4 * (d * d + d);
  return r;
}

// ---------------------------------------------------------------------------
// Power-law fits

struct PowerLawFit {
  double exponent = 0;
  double log_intercept = 0;
  double std_error = 0;  // of the exponent
};

// Least squares on (log x, log y).
inline PowerLawFit fit_power_law(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw ContractError("fit_power_law: x and y differ in length");
  if (xs.size() < 4) throw ContractError("fit_power_law: need at least 4 points, got " + std::to_string(xs.size()));
  const std::size_t n = xs.size();
  std::vector<double> lx(n), ly(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(xs[i] > 0) || !(ys[i] > 0)) throw DomainError("fit_power_law: values must be positive");
    lx[i] = std::log(xs[i]);
    ly[i] = std::log(ys[i]);
  }
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  if (!(sxx > 0)) throw ContractError("fit_power_law: x values must not all be equal");
  PowerLawFit f;
  f.exponent = sxy / sxx;
  f.log_intercept = my - f.exponent * mx;
  double sse = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = ly[i] - (f.log_intercept + f.exponent * lx[i]);
    sse += e * e;
  }
  f.std_error = std::sqrt(sse / static_cast<double>(n - 2) / sxx);
  return f;
}

// ---------------------------------------------------------------------------
// Scaling experiment

enum class SweepAxis { nodes, length };

inline SweepAxis parse_sweep_axis(std::string_view s) {
  if (s == "nodes") return SweepAxis::nodes;
  if (s == "length") return SweepAxis::length;
  throw ContractError("unknown sweep axis '" + std::string(s) + "' (expected nodes or length)");
}

inline const char* sweep_axis_name(SweepAxis a) { return a == SweepAxis::nodes ? "nodes" : "length"; }

struct ScalingOptions {
  std::size_t trials = 3;
  std::size_t batch = 1;
  std::uint64_t seed = 0;
  bool measure_time = true;
};

struct ScalingPoint {
  std::size_t x = 0;
  FlopsReport backbone;
  FlopsReport attention;
  double wall_seconds = 0;  // median over trials; 0 when timing is off
};

struct ScalingResult {
  SweepAxis axis = SweepAxis::nodes;
  std::vector<ScalingPoint> points;
  PowerLawFit flops_fit;
  PowerLawFit attention_fit;
  PowerLawFit time_fit;  // exponent 0 when timing is off
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// Wall time of a no-grad backbone forward: median of `trials` runs after
// one warm-up run.
inline double time_backbone(std::size_t batch, std::size_t length, std::size_t nodes, const ModelConfig& cfg,
                            std::size_t trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto dims = detail::dims_for(cfg, cfg.d_model, nodes);
  std::vector<GS3BWeights> blocks;
  for (std::size_t b = 0; b < cfg.n_encoder + cfg.n_decoder; ++b) blocks.push_back(init_gs3b(dims, rng));
  const Tensor x = detail::random_normal({batch, length, nodes, cfg.d_model}, 1.0, rng);
  NoGradScope no_grad;
  const BlockOptions opt{cfg.variant, std::nullopt};
  const auto run = [&] {
    Tensor h = x;
    for (const auto& blk : blocks) h = gs3b_forward(h, blk, initial_block_state(blk, batch), opt).y;
    return h;
  };
  run();
  std::vector<double> secs;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor h = run();
    const auto t1 = std::chrono::steady_clock::now();
    if (h.numel() == 0) throw NumericError("time_backbone: empty output");
    secs.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  return median(std::move(secs));
}

// Backbone FLOPs and wall time across node counts or sequence lengths; the
// attention comparator uses the same depth (one layer per block).
inline ScalingResult scaling_experiment(SweepAxis axis, const std::vector<std::size_t>& xs, const ModelConfig& cfg,
                                        const ScalingOptions& opt = {}) {
  if (xs.size() < 4) throw ContractError("scaling_experiment: need at least 4 sweep values");
  if (opt.trials < 3) throw ContractError("scaling_experiment: need at least 3 trials per point");
  if (opt.batch == 0) throw ContractError("scaling_experiment: batch must be positive");
  for (auto x : xs)
    if (x == 0) throw ContractError("scaling_experiment: sweep values must be positive");
  ScalingResult res;
  res.axis = axis;
  std::vector<double> fx, fy, fa, ft;
  const std::size_t layers = cfg.n_encoder + cfg.n_decoder;
  for (auto x : xs) {
    const std::size_t nodes = axis == SweepAxis::nodes ? x : cfg.n_nodes;
    const std::size_t len = axis == SweepAxis::length ? x : cfg.history_p;
    ScalingPoint p;
    p.x = x;
    p.backbone = count_flops_backbone(opt.batch, len, cfg.d_model, nodes, cfg);
    p.attention = count_flops_attention(opt.batch, len, cfg.d_model, nodes, layers);
    if (opt.measure_time) p.wall_seconds = time_backbone(opt.batch, len, nodes, cfg, opt.trials, opt.seed);
    fx.push_back(static_cast<double>(x));
    fy.push_back(static_cast<double>(p.backbone.flops));
    fa.push_back(static_cast<double>(p.attention.flops));
    ft.push_back(p.wall_seconds);
    res.points.push_back(std::move(p));
  }
  res.flops_fit = fit_power_law(fx, fy);
  res.attention_fit = fit_power_law(fx, fa);
  if (opt.measure_time) res.time_fit = fit_power_law(fx, ft);
  return res;
}

}  // namespace stgm
