#pragma once

// Optimizer, schedule, metrics, the training loop and checkpoints.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "stgm/data.hpp"
#include "stgm/errors.hpp"
#include "stgm/model.hpp"
#include "stgm/ops.hpp"
#include "stgm/serialize.hpp"
#include "stgm/tensor.hpp"

namespace stgm {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr double kMapeEps = 1e-3;

// Compensated running sum.
class NeumaierSum {
 public:
  void add(double v) {
    const double t = sum_ + v;
    comp_ += std::abs(sum_) >= std::abs(v) ? (sum_ - t) + v : (v - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0, comp_ = 0;
};

struct MetricsReport {
  double rmse = 0, mae = 0, mape = 0;  // mape in percent
  std::size_t count = 0;               // entries scored
  std::size_t mape_count = 0;          // entries with |truth| >= eps
  std::map<std::string, MetricsReport> scenarios;
};

// `mask`, when non-empty, has one entry per group of numel / mask.size()
// contiguous elements.
inline MetricsReport compute_metrics(std::span<const double> pred, std::span<const double> truth,
                                     const std::vector<bool>& mask = {}, double eps_mape = kMapeEps) {
  if (pred.size() != truth.size()) {
    throw DimensionError("compute_metrics: " + std::to_string(pred.size()) + " predictions for " +
                         std::to_string(truth.size()) + " targets");
  }
  std::size_t group = 1;
  if (!mask.empty()) {
    if (pred.size() % mask.size() != 0) {
      throw DimensionError("compute_metrics: mask of " + std::to_string(mask.size()) + " does not tile " +
                           std::to_string(pred.size()) + " entries");
    }
    group = pred.size() / mask.size();
  }
  NeumaierSum sq, ab, pct;
  MetricsReport r;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask.empty() && !mask[i / group]) continue;
    const double e = pred[i] - truth[i];
    sq.add(e * e);
    ab.add(std::abs(e));
    ++r.count;
    if (std::abs(truth[i]) >= eps_mape) {
      pct.add(std::abs(e) / std::abs(truth[i]));
      ++r.mape_count;
    }
  }
  if (r.count == 0) throw ContractError("compute_metrics: the mask selects no entries");
  const auto n = static_cast<double>(r.count);
  r.rmse = std::sqrt(sq.value() / n);
  r.mae = ab.value() / n;
  r.mape = r.mape_count ? 100.0 * pct.value() / static_cast<double>(r.mape_count) : 0.0;
  return r;
}

inline MetricsReport compute_metrics(const Tensor& pred, const Tensor& truth, const std::vector<bool>& mask = {},
                                     double eps_mape = kMapeEps) {
  if (pred.shape() != truth.shape()) {
    throw DimensionError("compute_metrics: shapes " + shape_str(pred.shape()) + " and " + shape_str(truth.shape()));
  }
  return compute_metrics(pred.values(), truth.values(), mask, eps_mape);
}

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t t = 0;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p), decay decoupled from the moments.
inline void adamw_step(const std::vector<Tensor*>& params, const std::vector<std::span<const double>>& grads,
                       AdamState& st, double lr, double weight_decay) {
  if (grads.size() != params.size()) throw ContractError("adamw_step: one gradient per parameter required");
  if (st.m.empty()) {
    for (const Tensor* p : params) {
      st.m.emplace_back(p->numel(), 0.0);
      st.v.emplace_back(p->numel(), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw ContractError("adamw_step: optimizer state belongs to other parameters");
  ++st.t;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(st.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k]->mutable_values();
    const auto g = grads[k];
    if (g.size() != p.size()) throw DimensionError("adamw_step: gradient size differs from parameter");
    auto& m = st.m[k];
    auto& v = st.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = kAdamBeta1 * m[i] + (1 - kAdamBeta1) * g[i];
      v[i] = kAdamBeta2 * v[i] + (1 - kAdamBeta2) * g[i] * g[i];
      const double mh = m[i] / c1, vh = v[i] / c2;
      p[i] -= lr * (mh / (std::sqrt(vh) + kAdamEps) + weight_decay * p[i]);
    }
  }
}

// Cosine annealing per epoch, held at lr_min after T_max.
inline double cosine_lr(std::size_t epoch, const TrainConfig& cfg) {
  const double e = static_cast<double>(std::min(epoch, cfg.cosine_t_max));
  return cfg.lr_min +
         0.5 * (cfg.lr_init - cfg.lr_min) * (1 + std::cos(std::numbers::pi * e / static_cast<double>(cfg.cosine_t_max)));
}

// Normalized splits plus everything needed to map back to data units.
struct PreparedData {
  DatasetSplits raw;
  DatasetSplits normalized;
  NormalizationState norm;
};

inline PreparedData prepare_data(const STGDataset& ds, std::size_t p, std::size_t k) {
  validate_dataset(ds);
  PreparedData out;
  out.raw = split_dataset(ds, p, k);
  out.norm = NormalizationState::fit(out.raw.train);
  out.normalized = out.raw;
  out.normalized.train = out.norm.normalize(out.raw.train);
  out.normalized.val = out.norm.normalize(out.raw.val);
  out.normalized.test = out.norm.normalize(out.raw.test);
  return out;
}

// Slot of each history step in the daily period, laid out [B * p].
inline std::vector<std::size_t> time_indices(const STGDataset& split, std::span<const std::size_t> windows,
                                             std::size_t p, std::size_t steps_per_day) {
  std::vector<std::size_t> idx;
  idx.reserve(windows.size() * p);
  const auto interval = static_cast<std::size_t>(split.interval_minutes);
  for (std::size_t w : windows) {
    for (std::size_t t = 0; t < p; ++t) {
      const auto minute = static_cast<std::size_t>(split.timestamp(w + t).minute_of_day());
      idx.push_back((minute / interval) % steps_per_day);
    }
  }
  return idx;
}

inline ModelConfig model_config_for(const STGDataset& ds, ModelConfig cfg) {
  cfg.n_nodes = ds.nodes();
  cfg.n_features = ds.features();
  cfg.steps_per_day = ds.steps_per_day();
  return cfg;
}

// Forecasts every window of a split (normalized units), [W, k, N, d].
// With threads > 1, batches are dealt round-robin to workers; each batch
// writes its own output rows and every window's forecast depends only on
// that window, so the result is bit-identical to the serial run.
inline Tensor predict_split(const ModelWeights& w, const ModelConfig& cfg, const STGDataset& split,
                            std::size_t batch = 64, std::size_t threads = 1) {
  if (batch == 0 || threads == 0) throw ContractError("predict_split: batch and threads must be positive");
  const auto it = window_iterator(split, cfg.history_p, cfg.horizon_k);
  const std::size_t count = it.size(), frame = cfg.horizon_k * cfg.n_nodes * cfg.n_features;
  Tensor out({count, cfg.horizon_k, cfg.n_nodes, cfg.n_features});
  auto o = out.mutable_values();
  const std::size_t n_batches = (count + batch - 1) / batch;
  const auto work = [&](std::size_t first, std::size_t stride) {
    NoGradScope no_grad;
    std::vector<std::size_t> ids;
    for (std::size_t bi = first; bi < n_batches; bi += stride) {
      const std::size_t start = bi * batch;
      ids.clear();
      for (std::size_t i = start; i < std::min(count, start + batch); ++i) ids.push_back(i);
      auto [x, y] = it.batch(ids);
      const auto tidx = time_indices(split, ids, cfg.history_p, cfg.steps_per_day);
      const Tensor pred = model_forward(x, cfg, w, tidx);
      std::copy(pred.values().begin(), pred.values().end(), o.begin() + static_cast<std::ptrdiff_t>(start * frame));
    }
  };
  const std::size_t workers = std::min(threads, std::max<std::size_t>(n_batches, 1));
  if (workers <= 1) {
    work(0, 1);
    return out;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      try {
        work(t, workers);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

inline Tensor targets_split(const STGDataset& split, std::size_t p, std::size_t k) {
  const auto it = window_iterator(split, p, k);
  std::vector<std::size_t> ids(it.size());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  return it.batch(ids).second;
}

// Repeats the last observed step for every horizon step.
inline Tensor persistence_forecast(const STGDataset& split, std::size_t p, std::size_t k) {
  const auto it = window_iterator(split, p, k);
  const std::size_t row = split.nodes() * split.features();
  Tensor out({it.size(), k, split.nodes(), split.features()});
  auto o = out.mutable_values();
  for (std::size_t w = 0; w < it.size(); ++w) {
    const auto last = it[w].history.subspan((p - 1) * row, row);
    for (std::size_t h = 0; h < k; ++h)
      std::copy(last.begin(), last.end(), o.begin() + static_cast<std::ptrdiff_t>((w * k + h) * row));
  }
  return out;
}

// Timestamp of each (window, horizon step), in forecast order.
inline std::vector<Timestamp> target_timestamps(const STGDataset& split, std::size_t p, std::size_t k) {
  const auto it = window_iterator(split, p, k);
  std::vector<Timestamp> ts;
  for (std::size_t w = 0; w < it.size(); ++w)
    for (std::size_t h = 0; h < k; ++h) ts.push_back(split.timestamp(w + p + h));
  return ts;
}

// Metrics in data units; scenarios whose mask is empty on this split are
// reported as absent rather than failing, unless listed in `required`.
inline MetricsReport evaluate_forecast(const Tensor& pred_norm, const Tensor& truth_norm, const NormalizationState& norm,
                                       const std::vector<Timestamp>& stamps, const std::vector<Scenario>& scenarios = {},
                                       bool require_scenarios = false) {
  const Tensor pred = norm.denormalize(pred_norm);
  const Tensor truth = norm.denormalize(truth_norm);
  MetricsReport r = compute_metrics(pred, truth);
  for (Scenario s : scenarios) {
    const auto mask = scenario_mask(stamps, s);
    if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; })) {
      if (require_scenarios) {
        throw ContractError(std::string("scenario '") + scenario_name(s) + "' selects no forecast steps");
      }
      continue;
    }
    r.scenarios[scenario_name(s)] = compute_metrics(pred, truth, mask);
  }
  return r;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_loss = 0;
};

struct FitResult {
  ModelWeights weights;  // best validation epoch
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double initial_train_mse = 0;  // before the first update
  double final_train_mse = 0;    // best weights, full pass
};

struct FitOptions {
  std::ostream* log = nullptr;
  // Called after each epoch; returning false stops training.
  std::function<bool(const EpochRecord&)> on_epoch;
};

inline double split_mse(const ModelWeights& w, const ModelConfig& cfg, const STGDataset& split) {
  const Tensor pred = predict_split(w, cfg, split);
  const Tensor truth = targets_split(split, cfg.history_p, cfg.horizon_k);
  NeumaierSum s;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double e = pred[i] - truth[i];
    s.add(e * e);
  }
  return s.value() / static_cast<double>(pred.numel());
}

// Trains on normalized splits. Deterministic for a fixed seed: the same RNG
// stream drives initialization and the per-epoch shuffles.
inline FitResult fit(const DatasetSplits& data, ModelConfig mcfg, const TrainConfig& tcfg, const FitOptions& opt = {}) {
  tcfg.validate();
  mcfg = model_config_for(data.train, mcfg);
  mcfg.validate();
  const auto train_it = window_iterator(data.train, mcfg.history_p, mcfg.horizon_k);
  if (train_it.size() == 0) throw ContractError("fit: training split holds no windows");
  if (window_iterator(data.val, mcfg.history_p, mcfg.horizon_k).size() == 0) {
    throw ContractError("fit: validation split holds no windows");
  }

  std::mt19937_64 rng(tcfg.seed);
  ModelWeights w = init_model(mcfg, rng, data.train.static_adjacency);
  std::vector<Tensor*> params = w.parameters();
  AdamState adam;

  FitResult res;
  res.initial_train_mse = split_mse(w, mcfg, data.train);
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train_it.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::span<const double>> grads(params.size());

  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, tcfg);
    std::shuffle(order.begin(), order.end(), rng);
    NeumaierSum loss_sum;
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + tcfg.batch_size);
      const std::span<const std::size_t> ids(order.data() + start, stop - start);
      auto [x, y] = train_it.batch(ids);
      const auto tidx = time_indices(data.train, ids, mcfg.history_p, mcfg.steps_per_day);
      Tape tape;
      for (Tensor* p : params) tape.watch(*p);
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = mse_loss(model_forward(x, mcfg, w, tidx), y);
      }
      tape.backward(loss);
      for (std::size_t k = 0; k < params.size(); ++k) grads[k] = params[k]->grad();
      adamw_step(params, grads, adam, lr, tcfg.weight_decay);
      loss_sum.add(loss.item() * static_cast<double>(ids.size()));
    }
    EpochRecord rec{epoch, lr, loss_sum.value() / static_cast<double>(order.size()), split_mse(w, mcfg, data.val)};
    res.history.push_back(rec);
    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      res.best_epoch = epoch;
      res.weights = w.clone();
    }
    if (opt.log) {
      *opt.log << "epoch " << epoch << " lr " << lr << " train " << rec.train_loss << " val " << rec.val_loss << '\n';
    }
    if (opt.on_epoch && !opt.on_epoch(rec)) break;
  }
  for (Tensor* p : res.weights.parameters()) p->set_requires_grad(false);
  res.final_train_mse = split_mse(res.weights, mcfg, data.train);
  return res;
}

inline void write_history_csv(std::ostream& os, const std::vector<EpochRecord>& history) {
  os << "epoch,lr,train_loss,val_loss\n";
  for (const auto& r : history) {
    os << r.epoch << ',' << detail::format_double(r.lr) << ',' << detail::format_double(r.train_loss) << ','
       << detail::format_double(r.val_loss) << '\n';
  }
}

inline nlohmann::json metrics_json(const MetricsReport& r) {
  nlohmann::json j = {{"rmse", r.rmse}, {"mae", r.mae}, {"mape", r.mape}, {"count", r.count}};
  for (const auto& [name, sub] : r.scenarios) j["scenarios"][name] = metrics_json(sub);
  return j;
}

// Checkpoint: every parameter as a tensor container in visit order, the
// static prior when present, then "STGM", a u64 byte length and a JSON
// manifest. nlohmann::json objects keep keys sorted, so the bytes depend only
// on the contents.
inline constexpr std::array<char, 4> kCheckpointMagic{'S', 'T', 'G', 'M'};

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  ModelWeights weights;
  NormalizationState norm;
  nlohmann::json extra = nlohmann::json::object();  // epoch, metrics, ...
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  std::vector<std::string> names;
  ck.weights.visit([&](const std::string& name, const Tensor& t) {
    names.push_back(name);
    write_tensor(os, t);
  });
  if (ck.weights.static_alpha) write_tensor(os, *ck.weights.static_alpha);
  nlohmann::json manifest = {{"version", kVersion},
                             {"model_config", to_json(ck.model)},
                             {"train_config", to_json(ck.train)},
                             {"normalization", ck.norm.to_json()},
                             {"parameters", names},
                             {"has_static_alpha", ck.weights.static_alpha.has_value()},
                             {"extra", ck.extra}};
  const std::string text = manifest.dump(2);
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::write_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) throw IoError("write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path + "'");
  std::vector<Tensor> tensors;
  while (true) {
    std::array<char, 4> magic{};
    const auto pos = is.tellg();
    if (!is.read(magic.data(), magic.size())) throw IoError(path + ": truncated checkpoint");
    if (magic == kCheckpointMagic) break;
    is.seekg(pos);
    tensors.push_back(read_tensor(is));
  }
  const auto len = detail::read_le<std::uint64_t>(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw IoError(path + ": truncated manifest");
  Checkpoint ck;
  try {
    const auto manifest = nlohmann::json::parse(text);
    ck.model = model_config_from_json(manifest.at("model_config"));
    ck.train = train_config_from_json(manifest.at("train_config"));
    ck.norm = NormalizationState::from_json(manifest.at("normalization"));
    ck.extra = manifest.value("extra", nlohmann::json::object());
    const auto names = manifest.at("parameters").get<std::vector<std::string>>();
    const bool has_prior = manifest.at("has_static_alpha").get<bool>();
    std::mt19937_64 rng(0);
    ck.weights = init_model(ck.model, rng);
    std::size_t k = 0;
    ck.weights.visit([&](const std::string& name, Tensor& t) {
      if (k >= tensors.size() || k >= names.size() || names[k] != name) {
        throw IoError(path + ": parameter list does not match the model configuration at '" + name + "'");
      }
      if (tensors[k].shape() != t.shape()) {
        throw IoError(path + ": parameter '" + name + "' has shape " + shape_str(tensors[k].shape()) + ", expected " +
                      shape_str(t.shape()));
      }
      t = tensors[k++];
    });
    if (has_prior) {
      if (k >= tensors.size()) throw IoError(path + ": missing static adjacency");
      ck.weights.static_alpha = tensors[k++];
    }
    if (k != tensors.size()) throw IoError(path + ": unexpected extra tensors");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": bad manifest: " + e.what());
  }
  return ck;
}

}  // namespace stgm
