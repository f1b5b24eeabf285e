#pragma once

// Command-line front end: synth, train, eval, predict, bench, ablate.
//
// Exit codes: 0 success, 1 contract violation (bad flags, bad config, bad
// data, empty scenario selection), 2 I/O failure.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "stgm/ablation.hpp"
#include "stgm/data.hpp"
#include "stgm/errors.hpp"
#include "stgm/flops.hpp"
#include "stgm/model.hpp"
#include "stgm/train.hpp"

namespace stgm {

// Full run configuration as stored in a config file:
//   {"model": {ModelConfig fields}, "train": {TrainConfig fields}}
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

inline nlohmann::json to_json(const RunConfig& c) { return {{"model", to_json(c.model)}, {"train", to_json(c.train)}}; }

inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig c = {}) {
  detail::reject_unknown(j, {"model", "train"}, "run");
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"), c.model);
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ContractError(path + ": invalid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

// Applies "section.key=value"; the value is read as JSON when it parses,
// as a bare string otherwise (so variant=kfgn_off works unquoted).
inline void apply_override(RunConfig& c, std::string_view assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string_view::npos || dot == std::string_view::npos || dot > eq) {
    throw ContractError("override '" + std::string(assignment) + "' is not of the form section.key=value");
  }
  const std::string section(assignment.substr(0, dot));
  const std::string key(assignment.substr(dot + 1, eq - dot - 1));
  const std::string text(assignment.substr(eq + 1));
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  c = run_config_from_json({{section, {{key, value}}}}, c);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string config_hash(const nlohmann::json& j) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

inline std::string csv_header_comment(std::uint64_t seed, const nlohmann::json& config) {
  return std::string("# stgm ") + kVersion + " seed=" + std::to_string(seed) + " config=" + config_hash(config) + "\n";
}

inline constexpr const char* kFlopConventionLine = "# FLOPs = 2 x multiply-adds (one multiply-add counts as 2 FLOPs)\n";

// Dataset from CSV (or binary cube for *.cube). The static adjacency comes
// from `adjacency` when given, else from the "<path>.adj.csv" sidecar if
// present.
inline STGDataset load_dataset(const std::string& path, const std::string& adjacency = {}) {
  STGDataset ds = path.size() > 5 && path.ends_with(".cube") ? load_cube(path) : load_csv(path);
  std::string adj = adjacency;
  if (adj.empty() && std::filesystem::exists(path + ".adj.csv")) adj = path + ".adj.csv";
  if (!adj.empty()) {
    Tensor a = load_adjacency_csv(adj);
    if (a.shape() != Shape{ds.nodes(), ds.nodes()}) {
      throw DimensionError(adj + ": adjacency " + shape_str(a.shape()) + " for " + std::to_string(ds.nodes()) +
                           " nodes");
    }
    ds.static_adjacency = std::move(a);
    validate_dataset(ds);
  }
  return ds;
}

namespace detail {

inline const STGDataset& pick_split(const DatasetSplits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw ContractError("unknown split '" + name + "' (expected train, val or test)");
}

// Writes to `path`, or to `fallback` when path is empty or "-".
class OutputTarget {
 public:
  OutputTarget(const std::string& path, std::ostream& fallback) : path_(path) {
    if (path.empty() || path == "-") {
      os_ = &fallback;
    } else {
      file_ = std::make_unique<std::ofstream>(path, std::ios::binary);
      if (!*file_) throw IoError("cannot open '" + path + "' for writing");
      os_ = file_.get();
    }
  }
  std::ostream& stream() { return *os_; }
  void close() {
    os_->flush();
    if (!*os_) throw IoError("write failed for '" + (path_.empty() ? std::string("<stdout>") : path_) + "'");
  }

 private:
  std::string path_;
  std::unique_ptr<std::ofstream> file_;
  std::ostream* os_;
};

inline std::vector<std::size_t> parse_size_list(std::string_view s) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto cell = trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    std::size_t v = 0;
    const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (cell.empty() || res.ec != std::errc() || res.ptr != cell.data() + cell.size()) {
      throw ContractError("bad integer '" + std::string(cell) + "' in list '" + std::string(s) + "'");
    }
    out.push_back(v);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

// "nodes=50,100,..." or "length=64,128,..."
inline std::pair<SweepAxis, std::vector<std::size_t>> parse_sweep(std::string_view s) {
  const auto eq = s.find('=');
  if (eq == std::string_view::npos) throw ContractError("sweep must look like nodes=50,100,... or length=64,...");
  return {parse_sweep_axis(s.substr(0, eq)), parse_size_list(s.substr(eq + 1))};
}

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::string variant;

  RunConfig resolve() const {
    RunConfig c = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    for (const auto& o : overrides) apply_override(c, o);
    if (seed) c.train.seed = *seed;
    if (epochs) c.train.epochs = *epochs;
    if (!variant.empty()) c.model.variant = parse_variant(variant);
    return c;
  }
};

inline void add_common(CLI::App* cmd, CommonOptions& o, bool training) {
  cmd->add_option("-c,--config", o.config_path, "JSON config file {\"model\": {...}, \"train\": {...}}");
  cmd->add_option("--set", o.overrides, "Override a config field, e.g. --set model.d_model=8 (repeatable)");
  cmd->add_option("--seed", o.seed, "Seed for every random draw (overrides train.seed)");
  cmd->add_option("--variant", o.variant, "Model variant: full, kfgn_off or gss_off");
  if (training) cmd->add_option("--epochs", o.epochs, "Training epochs (overrides train.epochs)");
}

inline void write_predictions_csv(std::ostream& os, const Tensor& pred, const STGDataset& split,
                                  const ModelConfig& cfg) {
  const auto stamps = target_timestamps(split, cfg.history_p, cfg.horizon_k);
  const std::size_t w_count = pred.dim(0), k = cfg.horizon_k, n = cfg.n_nodes, d = cfg.n_features;
  os << "window,horizon,timestamp,node_id";
  for (std::size_t f = 0; f < d; ++f) os << ",feature_" << f;
  os << '\n';
  for (std::size_t w = 0; w < w_count; ++w)
    for (std::size_t h = 0; h < k; ++h) {
      const std::string ts = format_rfc3339(stamps[w * k + h]);
      for (std::size_t i = 0; i < n; ++i) {
        os << w << ',' << h + 1 << ',' << ts << ',' << split.node_ids[i];
        for (std::size_t f = 0; f < d; ++f) os << ',' << format_double(pred[((w * k + h) * n + i) * d + f]);
        os << '\n';
      }
    }
}

}  // namespace detail

// Entry point shared by the tool binary and the tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Spatial-temporal graph forecasting with selective state spaces"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("stgm ") + kVersion);

  // synth
  SyntheticConfig sc;
  std::string synth_out;
  std::uint64_t synth_seed = sc.seed;
  auto* synth = app.add_subcommand("synth", "Write a synthetic graph dataset (CSV plus <out>.adj.csv)");
  synth->add_option("--nodes", sc.n_nodes, "Node count")->capture_default_str();
  synth->add_option("--steps", sc.t_steps, "Time steps")->capture_default_str();
  synth->add_option("--features", sc.n_features, "Features per node")->capture_default_str();
  synth->add_option("--interval", sc.interval_minutes, "Minutes between steps")->capture_default_str();
  synth->add_option("--diffusion", sc.diffusion, "Neighbour coupling c in [0, 1)")->capture_default_str();
  synth->add_option("--amplitude", sc.amplitude, "Daily forcing amplitude")->capture_default_str();
  synth->add_option("--noise", sc.noise_sigma, "Innovation standard deviation")->capture_default_str();
  synth->add_option("--radius", sc.radius, "Geometric graph radius")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Random seed")->capture_default_str();
  synth->add_option("-o,--output", synth_out, "Output CSV path")->required();

  // train
  detail::CommonOptions train_opts;
  std::string train_data, train_adj, ckpt_out = "model.ckpt", history_out;
  bool verbose = false;
  auto* train = app.add_subcommand("train", "Fit a model; writes a checkpoint and a history CSV");
  detail::add_common(train, train_opts, true);
  train->add_option("-d,--data", train_data, "Dataset CSV")->required();
  train->add_option("--adjacency", train_adj, "Static adjacency CSV (default: <data>.adj.csv if present)");
  train->add_option("-o,--output", ckpt_out, "Checkpoint path")->capture_default_str();
  train->add_option("--history", history_out, "History CSV path (default: <checkpoint>.history.csv)");
  train->add_flag("-v,--verbose", verbose, "Log every epoch to stderr");

  // eval
  std::string eval_ckpt, eval_data, eval_adj, eval_split = "test";
  std::vector<std::string> eval_scenarios;
  std::size_t eval_threads = 1;
  auto* eval = app.add_subcommand("eval", "Metrics of a checkpoint on a split, with scenario breakdown");
  eval->add_option("-m,--checkpoint", eval_ckpt, "Checkpoint path")->required();
  eval->add_option("-d,--data", eval_data, "Dataset CSV")->required();
  eval->add_option("--adjacency", eval_adj, "Static adjacency CSV");
  eval->add_option("--split", eval_split, "train, val or test")->capture_default_str();
  eval->add_option("--scenario", eval_scenarios,
                   "Scenario to report (rush, non_rush, weekend, non_weekend); each named one must be non-empty");
  eval->add_option("--threads", eval_threads, "Parallel evaluation workers (bit-identical to 1)")->capture_default_str();

  // predict
  std::string pred_ckpt, pred_data, pred_adj, pred_split = "test", pred_out;
  std::size_t pred_threads = 1;
  auto* predict = app.add_subcommand("predict", "Write denormalized forecasts for every window of a split");
  predict->add_option("-m,--checkpoint", pred_ckpt, "Checkpoint path")->required();
  predict->add_option("-d,--data", pred_data, "Dataset CSV")->required();
  predict->add_option("--adjacency", pred_adj, "Static adjacency CSV");
  predict->add_option("--split", pred_split, "train, val or test")->capture_default_str();
  predict->add_option("-o,--output", pred_out, "Forecast CSV (default stdout)");
  predict->add_option("--threads", pred_threads, "Parallel evaluation workers")->capture_default_str();

  // bench
  detail::CommonOptions bench_opts;
  std::string sweep, bench_out;
  std::size_t trials = 3, bench_batch = 1;
  bool no_time = false;
  auto* bench = app.add_subcommand("bench", "FLOP counts and forward wall time across node counts or lengths");
  detail::add_common(bench, bench_opts, false);
  bench->add_option("--sweep", sweep, "nodes=50,100,... or length=64,128,...")->required();
  bench->add_option("--trials", trials, "Timed runs per point (median)")->capture_default_str();
  bench->add_option("--batch", bench_batch, "Batch size")->capture_default_str();
  bench->add_flag("--no-time", no_time, "Analytic counts only");
  bench->add_option("-o,--output", bench_out, "CSV path (default stdout)");

  // ablate
  detail::CommonOptions abl_opts;
  std::string abl_data, abl_adj, abl_out, abl_detail;
  std::size_t abl_seeds = 5, abl_threads = 1;
  auto* ablate = app.add_subcommand("ablate", "Train full, kfgn_off and gss_off over several seeds; median table");
  detail::add_common(ablate, abl_opts, true);
  ablate->add_option("-d,--data", abl_data, "Dataset CSV")->required();
  ablate->add_option("--adjacency", abl_adj, "Static adjacency CSV");
  ablate->add_option("--seeds", abl_seeds, "Seeds per variant")->capture_default_str();
  ablate->add_option("--threads", abl_threads, "Parallel evaluation workers")->capture_default_str();
  ablate->add_option("-o,--output", abl_out, "Median table CSV (default stdout)");
  ablate->add_option("--detail", abl_detail, "Per-seed CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) {
      sc.seed = synth_seed;
      const STGDataset ds = generate_synthetic(sc, &err);
      save_csv(ds, synth_out);
      if (ds.static_adjacency) save_adjacency_csv(*ds.static_adjacency, synth_out + ".adj.csv");
      out << "wrote " << synth_out << " (" << ds.steps() << " steps x " << ds.nodes() << " nodes)\n";
      return 0;
    }

    if (*train) {
      const RunConfig rc = train_opts.resolve();
      const STGDataset ds = load_dataset(train_data, train_adj);
      const PreparedData prep = prepare_data(ds, rc.model.history_p, rc.model.horizon_k);
      FitOptions fo;
      if (verbose) fo.log = &err;
      const FitResult res = fit(prep.normalized, rc.model, rc.train, fo);
      const ModelConfig cfg = model_config_for(prep.normalized.train, rc.model);
      const Tensor pred = predict_split(res.weights, cfg, prep.normalized.val);
      const Tensor truth = targets_split(prep.normalized.val, cfg.history_p, cfg.horizon_k);
      const auto stamps = target_timestamps(prep.normalized.val, cfg.history_p, cfg.horizon_k);
      const MetricsReport val = evaluate_forecast(pred, truth, prep.norm, stamps);
      const MetricsReport pers = evaluate_forecast(
          persistence_forecast(prep.normalized.val, cfg.history_p, cfg.horizon_k), truth, prep.norm, stamps);
      nlohmann::json summary = {{"best_epoch", res.best_epoch},
                                {"initial_train_mse", res.initial_train_mse},
                                {"final_train_mse", res.final_train_mse},
                                {"val", metrics_json(val)},
                                {"val_persistence", metrics_json(pers)}};
      Checkpoint ck{cfg, rc.train, res.weights, prep.norm, summary};
      save_checkpoint(ckpt_out, ck);
      const std::string hist_path = history_out.empty() ? ckpt_out + ".history.csv" : history_out;
      detail::OutputTarget hist(hist_path, out);
      hist.stream() << csv_header_comment(rc.train.seed, to_json(RunConfig{cfg, rc.train}));
      write_history_csv(hist.stream(), res.history);
      hist.close();
      out << summary.dump(2) << '\n';
      return 0;
    }

    if (*eval || *predict) {
      const bool is_eval = eval->parsed();
      const Checkpoint ck = load_checkpoint(is_eval ? eval_ckpt : pred_ckpt);
      const STGDataset ds = load_dataset(is_eval ? eval_data : pred_data, is_eval ? eval_adj : pred_adj);
      if (ds.nodes() != ck.model.n_nodes || ds.features() != ck.model.n_features) {
        throw DimensionError("dataset has " + std::to_string(ds.nodes()) + " nodes x " +
                             std::to_string(ds.features()) + " features, checkpoint expects " +
                             std::to_string(ck.model.n_nodes) + " x " + std::to_string(ck.model.n_features));
      }
      const DatasetSplits splits = split_dataset(ck.norm.normalize(ds), ck.model.history_p, ck.model.horizon_k);
      const STGDataset& split = detail::pick_split(splits, is_eval ? eval_split : pred_split);
      const std::size_t p = ck.model.history_p, k = ck.model.horizon_k;
      const Tensor pred = predict_split(ck.weights, ck.model, split, 64, is_eval ? eval_threads : pred_threads);
      if (!is_eval) {
        detail::OutputTarget o(pred_out, out);
        o.stream() << csv_header_comment(ck.train.seed, to_json(RunConfig{ck.model, ck.train}));
        detail::write_predictions_csv(o.stream(), ck.norm.denormalize(pred), split, ck.model);
        o.close();
        return 0;
      }
      const Tensor truth = targets_split(split, p, k);
      const auto stamps = target_timestamps(split, p, k);
      std::vector<Scenario> scen;
      for (const auto& s : eval_scenarios) scen.push_back(parse_scenario(s));
      const bool required = !scen.empty();
      if (!required) scen = {Scenario::rush, Scenario::non_rush, Scenario::weekend, Scenario::non_weekend};
      const MetricsReport m = evaluate_forecast(pred, truth, ck.norm, stamps, scen, required);
      const MetricsReport pers = evaluate_forecast(persistence_forecast(split, p, k), truth, ck.norm, stamps, scen, required);
      out << nlohmann::json{{"split", eval_split}, {"model", metrics_json(m)}, {"persistence", metrics_json(pers)}}.dump(2)
          << '\n';
      return 0;
    }

    if (*bench) {
      const RunConfig rc = bench_opts.resolve();
      const auto [axis, xs] = detail::parse_sweep(sweep);
      ScalingOptions so;
      so.trials = trials;
      so.batch = bench_batch;
      so.seed = rc.train.seed;
      so.measure_time = !no_time;
      const ScalingResult r = scaling_experiment(axis, xs, rc.model, so);
      detail::OutputTarget o(bench_out, out);
      auto& os = o.stream();
      os << csv_header_comment(rc.train.seed, to_json(rc)) << kFlopConventionLine;
      os << "# backbone: " << rc.model.n_encoder + rc.model.n_decoder << " blocks, batch " << bench_batch
         << (axis == SweepAxis::nodes ? ", length " + std::to_string(rc.model.history_p)
                                      : ", nodes " + std::to_string(rc.model.n_nodes))
         << "; attention: dense over length x nodes tokens, one layer per block\n";
      os << sweep_axis_name(axis)
         << ",stg_mamba_flops,edge_macs,node_macs,global_macs,memory_reads,attention_flops,wall_seconds\n";
      for (const auto& p : r.points) {
        os << p.x << ',' << p.backbone.flops << ',' << p.backbone.macs_by(TermScaling::edge) << ','
           << p.backbone.macs_by(TermScaling::node) << ',' << p.backbone.macs_by(TermScaling::global) << ','
           << p.backbone.memory_reads << ',' << p.attention.flops << ',' << detail::format_double(p.wall_seconds) << '\n';
      }
      const auto fit_line = [&](const char* what, const PowerLawFit& f) {
        os << "# fit " << what << " exponent=" << detail::format_double(f.exponent) << " stderr=" << detail::format_double(f.std_error)
           << '\n';
      };
      fit_line("stg_mamba_flops", r.flops_fit);
      fit_line("attention_flops", r.attention_fit);
      if (!no_time) fit_line("wall_seconds", r.time_fit);
      o.close();
      return 0;
    }

    if (*ablate) {
      const RunConfig rc = abl_opts.resolve();
      const STGDataset ds = load_dataset(abl_data, abl_adj);
      const PreparedData prep = prepare_data(ds, rc.model.history_p, rc.model.horizon_k);
      AblationOptions ao;
      ao.seeds = abl_seeds;
      ao.threads = abl_threads;
      const AblationResult res = run_ablation(prep, rc.model, rc.train, ao);
      const std::string head = csv_header_comment(rc.train.seed, to_json(rc));
      detail::OutputTarget o(abl_out, out);
      auto& os = o.stream();
      os << head << "# validation metrics, median over " << abl_seeds << " seeds from seed " << rc.train.seed << '\n';
      os << "variant,rmse,mae,mape\n";
      for (const auto& row : res.table) {
        os << variant_name(row.variant) << ',' << detail::format_double(row.rmse) << ',' << detail::format_double(row.mae) << ','
           << detail::format_double(row.mape) << '\n';
      }
      os << "# full<=kfgn_off " << (res.full_beats_kfgn_off() ? "yes" : "no") << ", full<=gss_off "
         << (res.full_beats_gss_off() ? "yes" : "no") << '\n';
      o.close();
      if (!abl_detail.empty()) {
        detail::OutputTarget d(abl_detail, out);
        d.stream() << head << "variant,seed,rmse,mae,mape\n";
        for (const auto& run : res.runs) {
          d.stream() << variant_name(run.variant) << ',' << run.seed << ',' << detail::format_double(run.val.rmse) << ','
                     << detail::format_double(run.val.mae) << ',' << detail::format_double(run.val.mape) << '\n';
        }
        d.close();
      }
      return 0;
    }
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace stgm
