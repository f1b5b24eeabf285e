#pragma once

// Trains the full model and both ablated variants over several seeds and
// reports validation metrics per run and their medians.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stgm/flops.hpp"
#include "stgm/gs3b.hpp"
#include "stgm/train.hpp"

namespace stgm {

inline constexpr std::array<Variant, 3> kAblationVariants{Variant::full, Variant::kfgn_off, Variant::gss_off};

struct AblationRun {
  Variant variant = Variant::full;
  std::uint64_t seed = 0;
  MetricsReport val;
};

struct AblationRow {
  Variant variant = Variant::full;
  double rmse = 0, mae = 0, mape = 0;  // medians over seeds
};

struct AblationResult {
  std::vector<AblationRun> runs;  // variant-major, seeds in order
  std::array<AblationRow, 3> table;

  const AblationRow& row(Variant v) const {
    for (const auto& r : table)
      if (r.variant == v) return r;
    throw ContractError("ablation: no row for variant");
  }
  bool full_beats_kfgn_off() const { return row(Variant::full).rmse <= row(Variant::kfgn_off).rmse; }
  bool full_beats_gss_off() const { return row(Variant::full).rmse <= row(Variant::gss_off).rmse; }
};

struct AblationOptions {
  std::size_t seeds = 5;
  std::size_t threads = 1;  // evaluation workers
  std::function<void(const AblationRun&)> on_run;
};

// Seed i of every variant trains with train.seed + i, so all variants see
// the same shuffles and initial draws wherever their parameters coincide.
inline AblationResult run_ablation(const PreparedData& data, const ModelConfig& model, const TrainConfig& train,
                                   const AblationOptions& opt = {}) {
  if (opt.seeds == 0) throw ContractError("ablation: need at least one seed");
  AblationResult res;
  for (std::size_t vi = 0; vi < kAblationVariants.size(); ++vi) {
    const Variant v = kAblationVariants[vi];
    ModelConfig m = model;
    m.variant = v;
    std::vector<double> rmse, mae, mape;
    for (std::size_t s = 0; s < opt.seeds; ++s) {
      TrainConfig t = train;
      t.seed = train.seed + s;
      const FitResult fr = fit(data.normalized, m, t);
      const ModelConfig cfg = model_config_for(data.normalized.train, m);
      const Tensor pred = predict_split(fr.weights, cfg, data.normalized.val, 64, opt.threads);
      const Tensor truth = targets_split(data.normalized.val, cfg.history_p, cfg.horizon_k);
      AblationRun run{v, t.seed, evaluate_forecast(pred, truth, data.norm, {})};
      rmse.push_back(run.val.rmse);
      mae.push_back(run.val.mae);
      mape.push_back(run.val.mape);
      if (opt.on_run) opt.on_run(run);
      res.runs.push_back(std::move(run));
    }
    res.table[vi] = {v, median(rmse), median(mae), median(mape)};
  }
  return res;
}

}  // namespace stgm
