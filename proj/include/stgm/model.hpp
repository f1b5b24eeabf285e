#pragma once

// Encoder-decoder forecaster.
//
//   E   = Linear(X) + tod[step]                     [B, p, N, d_model]
//   Z   = encoder blocks(E)
//   D   = decoder blocks([start ; Z])               [B, p + 1, N, d_model]
//   Out = Linear_head(D[:, p])  -> [B, k, N, d]
//
// The decoder emits every horizon step in one pass.

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "stgm/errors.hpp"
#include "stgm/gs3b.hpp"
#include "stgm/ops.hpp"
#include "stgm/tensor.hpp"

namespace stgm {

struct ModelConfig {
  std::size_t n_nodes = 1;
  std::size_t n_features = 1;
  std::size_t steps_per_day = 288;
  std::size_t n_encoder = 4;
  std::size_t n_decoder = 4;
  std::size_t history_p = 12;
  std::size_t horizon_k = 1;
  std::size_t d_model = 32;
  std::size_t d_state = 16;
  std::size_t expansion_factor = 2;
  std::size_t gru_hidden = 64;
  std::size_t lowrank = 4;
  Variant variant = Variant::full;

  void validate() const {
    if (n_encoder < 1 || n_decoder < 1) throw DomainError("model: n_encoder and n_decoder must be at least 1");
    if (history_p < 1 || horizon_k < 1) throw DomainError("model: history_p and horizon_k must be at least 1");
    if (n_nodes < 1 || n_features < 1 || steps_per_day < 1) {
      throw DomainError("model: n_nodes, n_features and steps_per_day must be at least 1");
    }
    if (d_model < 1 || d_state < 1 || expansion_factor < 1 || gru_hidden < 1) {
      throw DomainError("model: d_model, d_state, expansion_factor and gru_hidden must be at least 1");
    }
  }

  BlockDims block_dims() const { return {n_nodes, d_model, expansion_factor, d_state, gru_hidden, lowrank}; }
};

struct TrainConfig {
  std::size_t batch_size = 32;
  double lr_init = 1e-3;
  double weight_decay = 5e-2;
  double lr_min = 1e-5;
  std::size_t cosine_t_max = 50;
  std::size_t epochs = 300;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1 || epochs < 1 || cosine_t_max < 1) {
      throw DomainError("train: batch_size, epochs and cosine_T_max must be positive");
    }
    if (!(lr_init > 0) || !(lr_min > 0) || !(lr_min < lr_init)) throw DomainError("train: need 0 < lr_min < lr_init");
    if (!(weight_decay >= 0)) throw DomainError("train: weight_decay must be non-negative");
  }
};

namespace detail {

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ContractError(std::string("config key '") + key + "' has the wrong type");
  }
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const char* what) {
  if (!j.is_object()) throw ContractError(std::string(what) + " config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* name : known) ok = ok || k == name;
    if (!ok) throw ContractError(std::string(what) + " config: unknown key '" + k + "'");
  }
}

}  // namespace detail

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_nodes", c.n_nodes},     {"n_features", c.n_features},
          {"steps_per_day", c.steps_per_day}, {"n_encoder", c.n_encoder},
          {"n_decoder", c.n_decoder}, {"history_p", c.history_p},
          {"horizon_k", c.horizon_k}, {"d_model", c.d_model},
          {"d_state", c.d_state},     {"expansion_factor", c.expansion_factor},
          {"gru_hidden", c.gru_hidden}, {"lowrank", c.lowrank},
          {"variant", variant_name(c.variant)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  detail::reject_unknown(j,
                         {"n_nodes", "n_features", "steps_per_day", "n_encoder", "n_decoder", "history_p", "horizon_k",
                          "d_model", "d_state", "expansion_factor", "gru_hidden", "lowrank", "variant"},
                         "model");
  detail::read_key(j, "n_nodes", c.n_nodes);
  detail::read_key(j, "n_features", c.n_features);
  detail::read_key(j, "steps_per_day", c.steps_per_day);
  detail::read_key(j, "n_encoder", c.n_encoder);
  detail::read_key(j, "n_decoder", c.n_decoder);
  detail::read_key(j, "history_p", c.history_p);
  detail::read_key(j, "horizon_k", c.horizon_k);
  detail::read_key(j, "d_model", c.d_model);
  detail::read_key(j, "d_state", c.d_state);
  detail::read_key(j, "expansion_factor", c.expansion_factor);
  detail::read_key(j, "gru_hidden", c.gru_hidden);
  detail::read_key(j, "lowrank", c.lowrank);
  if (j.contains("variant")) {
    std::string v;
    detail::read_key(j, "variant", v);
    c.variant = parse_variant(v);
  }
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size}, {"lr_init", c.lr_init},   {"weight_decay", c.weight_decay},
          {"lr_min", c.lr_min},         {"cosine_T_max", c.cosine_t_max}, {"epochs", c.epochs},
          {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  detail::reject_unknown(j, {"batch_size", "lr_init", "weight_decay", "lr_min", "cosine_T_max", "epochs", "seed"},
                         "train");
  detail::read_key(j, "batch_size", c.batch_size);
  detail::read_key(j, "lr_init", c.lr_init);
  detail::read_key(j, "weight_decay", c.weight_decay);
  detail::read_key(j, "lr_min", c.lr_min);
  detail::read_key(j, "cosine_T_max", c.cosine_t_max);
  detail::read_key(j, "epochs", c.epochs);
  detail::read_key(j, "seed", c.seed);
  return c;
}

struct ModelWeights {
  Tensor embed_w, embed_b;  // [d, d_model], [d_model]
  Tensor time_table;        // [steps_per_day, d_model]
  Tensor start_token;       // [d_model]
  std::vector<GS3BWeights> encoder, decoder;
  Tensor head_w, head_b;  // [d_model, k * d], [k * d]
  // Row-stochastic prior used by kfgn_off; not trained.
  std::optional<Tensor> static_alpha;

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
  }

  ModelWeights clone() const {
    ModelWeights out = *this;
    out.visit([](const std::string&, Tensor& t) { t = t.clone(); });
    if (out.static_alpha) out.static_alpha = out.static_alpha->clone();
    return out;
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& w, F& f) {
    f(std::string("embed.w"), w.embed_w);
    f(std::string("embed.b"), w.embed_b);
    f(std::string("time_table"), w.time_table);
    f(std::string("start_token"), w.start_token);
    for (std::size_t i = 0; i < w.encoder.size(); ++i) {
      const std::string prefix = "encoder." + std::to_string(i) + ".";
      w.encoder[i].visit([&](const char* name, auto& t) { f(prefix + name, t); });
    }
    for (std::size_t i = 0; i < w.decoder.size(); ++i) {
      const std::string prefix = "decoder." + std::to_string(i) + ".";
      w.decoder[i].visit([&](const char* name, auto& t) { f(prefix + name, t); });
    }
    f(std::string("head.w"), w.head_w);
    f(std::string("head.b"), w.head_b);
  }
};

inline ModelWeights init_model(const ModelConfig& cfg, std::mt19937_64& rng,
                               std::optional<Tensor> static_adjacency = std::nullopt) {
  cfg.validate();
  const std::size_t d = cfg.n_features, dm = cfg.d_model;
  ModelWeights w;
  w.embed_w = detail::random_normal({d, dm}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  w.embed_b = Tensor({dm});
  w.time_table = detail::random_normal({cfg.steps_per_day, dm}, 0.02, rng);
  w.start_token = detail::random_normal({dm}, 0.02, rng);
  for (std::size_t i = 0; i < cfg.n_encoder; ++i) w.encoder.push_back(init_gs3b(cfg.block_dims(), rng));
  for (std::size_t i = 0; i < cfg.n_decoder; ++i) w.decoder.push_back(init_gs3b(cfg.block_dims(), rng));
  w.head_w = detail::random_normal({dm, cfg.horizon_k * d}, 1.0 / std::sqrt(static_cast<double>(dm)), rng);
  w.head_b = Tensor({cfg.horizon_k * d});
  if (static_adjacency) {
    if (static_adjacency->shape() != Shape{cfg.n_nodes, cfg.n_nodes}) {
      throw DimensionError("init_model: static adjacency " + shape_str(static_adjacency->shape()) + " for " +
                           std::to_string(cfg.n_nodes) + " nodes");
    }
    w.static_alpha = row_normalize(*static_adjacency);
  }
  return w;
}

// Adds table[idx[b * L + t]] to every node of x[b, t]. x is [B, L, N, m].
inline Tensor add_time_encoding(const Tensor& x, const Tensor& table, std::span<const std::size_t> idx) {
  if (x.rank() != 4 || table.rank() != 2 || table.dim(1) != x.dim(3)) {
    throw DimensionError("add_time_encoding: x " + shape_str(x.shape()) + ", table " + shape_str(table.shape()));
  }
  const std::size_t bl = x.dim(0) * x.dim(1), n = x.dim(2), m = x.dim(3), period = table.dim(0);
  if (idx.size() != bl) {
    throw DimensionError("add_time_encoding: " + std::to_string(idx.size()) + " indices for " + std::to_string(bl) +
                         " steps");
  }
  std::vector<std::size_t> rows(idx.begin(), idx.end());
  for (auto r : rows) {
    if (r >= period) throw DomainError("add_time_encoding: index " + std::to_string(r) + " outside the period");
  }
  Tensor out = x.clone();
  auto o = out.mutable_values();
  for (std::size_t s = 0; s < bl; ++s)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < m; ++c) o[(s * n + i) * m + c] += table[rows[s] * m + c];
  return record_op(out, {&x, &table}, [rows, n, m](std::span<const double> g, GradRefs& gr) {
    if (gr.has(0)) detail::accumulate(gr[0], g);
    if (gr.has(1)) {
      auto gt = gr[1];
      for (std::size_t s = 0; s < rows.size(); ++s)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t c = 0; c < m; ++c) gt[rows[s] * m + c] += g[(s * n + i) * m + c];
    }
  });
}

// [token ; x] along the time axis: x[B, L, N, m], token[m] -> [B, L + 1, N, m].
inline Tensor prepend_token(const Tensor& x, const Tensor& token) {
  if (x.rank() != 4 || token.rank() != 1 || token.dim(0) != x.dim(3)) {
    throw DimensionError("prepend_token: x " + shape_str(x.shape()) + ", token " + shape_str(token.shape()));
  }
  const std::size_t bs = x.dim(0), len = x.dim(1), n = x.dim(2), m = x.dim(3);
  const std::size_t frame = n * m;
  Tensor out({bs, len + 1, n, m});
  auto o = out.mutable_values();
  for (std::size_t b = 0; b < bs; ++b) {
    double* dst = o.data() + b * (len + 1) * frame;
    for (std::size_t i = 0; i < n; ++i) std::copy(token.data(), token.data() + m, dst + i * m);
    std::copy(x.data() + b * len * frame, x.data() + (b + 1) * len * frame, dst + frame);
  }
  return record_op(out, {&x, &token}, [bs, len, n, m, frame](std::span<const double> g, GradRefs& gr) {
    for (std::size_t b = 0; b < bs; ++b) {
      const double* src = g.data() + b * (len + 1) * frame;
      if (gr.has(1)) {
        auto gt = gr[1];
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t c = 0; c < m; ++c) gt[c] += src[i * m + c];
      }
      if (gr.has(0)) {
        auto gx = gr[0];
        for (std::size_t e = 0; e < len * frame; ++e) gx[b * len * frame + e] += src[frame + e];
      }
    }
  });
}

// x[B, p, N, d]; time_index[B * p] gives each history step's slot in the
// daily period, or is empty to skip the time encoding.
inline Tensor model_forward(const Tensor& x, const ModelConfig& cfg, const ModelWeights& w,
                            std::span<const std::size_t> time_index = {}) {
  if (x.rank() != 4) throw DimensionError("model_forward: expected [B,p,N,d], got " + shape_str(x.shape()));
  if (x.dim(1) != cfg.history_p) {
    throw DimensionError("model_forward: window length " + std::to_string(x.dim(1)) + " but history_p is " +
                         std::to_string(cfg.history_p));
  }
  if (x.dim(2) != cfg.n_nodes || x.dim(3) != cfg.n_features) {
    throw DimensionError("model_forward: input " + shape_str(x.shape()) + " does not match " +
                         std::to_string(cfg.n_nodes) + " nodes x " + std::to_string(cfg.n_features) + " features");
  }
  const std::size_t bs = x.dim(0), p = cfg.history_p, n = cfg.n_nodes, d = cfg.n_features;
  BlockOptions opt{cfg.variant, w.static_alpha};

  Tensor h = linear(x, w.embed_w, w.embed_b);
  if (!time_index.empty()) h = add_time_encoding(h, w.time_table, time_index);
  for (const auto& blk : w.encoder) h = gs3b_forward(h, blk, initial_block_state(blk, bs), opt).y;
  h = prepend_token(h, w.start_token);
  for (const auto& blk : w.decoder) h = gs3b_forward(h, blk, initial_block_state(blk, bs), opt).y;
  const Tensor last = select(h, 1, p);  // [B, N, d_model]
  const Tensor out = reshape(linear(last, w.head_w, w.head_b), {bs, n, cfg.horizon_k, d});
  return permute(out, {0, 2, 1, 3});
}

}  // namespace stgm
