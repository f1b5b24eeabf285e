// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "stgm/ablation.hpp"
#include "stgm/cli.hpp"
#include "stgm/data.hpp"
#include "stgm/flops.hpp"
#include "stgm/gs3b.hpp"
#include "stgm/kfgn.hpp"
#include "stgm/model.hpp"
#include "stgm/ssm_scan.hpp"
#include "stgm/train.hpp"
#include "test_util.hpp"

using namespace stgm;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

double cpu_seconds(std::clock_t since) { return static_cast<double>(std::clock() - since) / CLOCKS_PER_SEC; }

Outcome conv_matches_recurrent() {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<std::size_t> len_d(1, 256), state_d(1, 16);
  std::uniform_real_distribution<double> a_d(-3.0, -0.01), u(-1.0, 1.0), delta_d(0.01, 1.0);
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t len = len_d(rng), n = state_d(rng);
    std::vector<double> a(n), b(n), c(n), x(len);
    for (std::size_t s = 0; s < n; ++s) {
      a[s] = a_d(rng);
      b[s] = u(rng);
      c[s] = u(rng);
    }
    for (auto& v : x) v = u(rng);
    const double d = u(rng);
    const auto disc = discretize_zoh(a, b, delta_d(rng));
    const auto yr = recurrent_scan(disc, c, d, x);
    const auto yc = conv_scan(make_conv_kernel(disc, c, len), d, x);
    worst = std::max(worst, tests::max_abs_diff(yr, yc));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst < 1e-10 && secs < 30.0, "max |diff| " + fmt(worst) + " over 1000 systems in " + fmt(secs) + " s"};
}

Outcome graph_scan_matches_dense() {
  std::mt19937_64 rng(102);
  std::uniform_int_distribution<std::size_t> n_d(1, 5), len_d(1, 16), small(1, 3);
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto in = tests::random_scan(rng, small(rng), len_d(rng), n_d(rng), small(rng), small(rng));
    worst = std::max(worst, tests::max_abs_diff(graph_scan(in).values(), tests::dense_graph_scan(in)));
  }
  return {worst < 1e-12, "max |diff| " + fmt(worst) + " over 200 trials"};
}

Outcome model_gradients() {
  ModelConfig c;
  c.n_nodes = 3;
  c.n_features = 2;
  c.steps_per_day = 4;
  c.n_encoder = 1;
  c.n_decoder = 1;
  c.history_p = 4;
  c.horizon_k = 2;
  c.d_model = 8;
  c.d_state = 2;
  c.expansion_factor = 2;
  c.gru_hidden = 5;
  c.lowrank = 2;
  std::size_t failures = 0, checked = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    ModelWeights w = init_model(c, rng);
    std::normal_distribution<double> nd(0, 0.3);
    w.visit([&](const std::string&, Tensor& t) {
      for (auto& v : t.mutable_values()) v += nd(rng);
    });
    const Tensor x = tests::uniform_tensor({2, 4, 3, 2}, rng, -1, 1);
    const Tensor y = tests::uniform_tensor({2, 2, 3, 2}, rng, -1, 1);
    const std::vector<std::size_t> idx{0, 1, 2, 3, 3, 0, 1, 2};
    std::vector<tests::NamedParam> ps;
    w.visit([&](const std::string& name, Tensor& t) { ps.push_back({name, &t}); });
    const auto r = tests::grad_check([&] { return mse_loss(model_forward(x, c, w, idx), y); }, ps);
    failures += r.failures.size();
    checked += r.checked;
  }
  return {failures == 0, std::to_string(failures) + " mismatches in " + std::to_string(checked) + " entries, 20 seeds"};
}

Outcome zoh_continuity_and_range() {
  double jump = 0;
  for (double delta : {1e-3, 0.1, 1.0, 10.0}) {
    const double a = -kZohSeriesThreshold / delta;
    const double below = std::nextafter(a, 0.0), above = std::nextafter(a, -1.0);
    jump = std::max(jump, std::abs(zoh_input_gain(delta, below) - zoh_input_gain(delta, above)));
    for (double ai : {below, a, above}) jump = std::max(jump, std::abs(zoh_input_gain(delta, ai) - std::expm1(delta * ai) / ai));
  }
  std::mt19937_64 rng(104);
  Tensor raw({100000});
  std::uniform_real_distribution<double> u(-10, 10), ud(-10, 5);
  for (auto& v : raw.mutable_values()) v = u(rng);
  const Tensor a = negative_state_matrix(raw);
  std::size_t outside = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double abar = discretize_zoh(std::span(&a.values()[i], 1), std::vector<double>{1.0}, detail::softplus(ud(rng))).a_bar[0];
    outside += !(abar > 0.0 && abar < 1.0);
  }
  return {jump <= 1e-14 && outside == 0,
          "gain jump " + fmt(jump) + ", " + std::to_string(outside) + " of 100000 discrete rates outside (0,1)"};
}

Outcome kalman_adjacency() {
  std::mt19937_64 rng(105);
  double worst_row = 0;
  std::size_t generated = 0;
  for (int set = 0; set < 2500; ++set) {
    const std::size_t n = 2 + set % 6, d = 1 + set % 3, hd = 3;
    BlockDims dims{n, d, 1, 2, hd, 1 + static_cast<std::size_t>(set % 2)};
    DeepKFParams p = init_gs3b(dims, rng).kf;
    std::normal_distribution<double> nd(0, 0.5);
    for (Tensor* t : {&p.gru.w_z, &p.gru.w_h, &p.f_head_w, &p.f_head_b, &p.lowrank_u, &p.lowrank_v, &p.h_head_w,
                      &p.h_head_b, &p.alpha0_logits})
      for (auto& v : t->mutable_values()) v += nd(rng);
    auto st = initial_adjacency(p, 1);
    Tensor hidden({1, hd});
    for (int step = 0; step < 4; ++step) {
      auto k = generate_adjacency(tests::uniform_tensor({1, n, d}, rng, -5, 5), hidden, st, p);
      const auto al = k.adjacency.alpha.values();
      for (std::size_t r = 0; r < n; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < n; ++j) s += al[r * n + j];
        worst_row = std::max(worst_row, std::abs(s - 1.0));
      }
      ++generated;
      st = k.adjacency;
      hidden = k.hidden;
    }
  }
  std::uniform_real_distribution<double> u(-1, 1), angle(0, 6.283185307179586);
  double worst_kf = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const double th = angle(rng);
    const std::array<double, 2> h{std::cos(th), std::sin(th)};
    const std::array<std::array<double, 2>, 2> prev{{{u(rng), u(rng)}, {u(rng), u(rng)}}};
    const std::array<double, 2> diag{1 + u(rng), 1 + u(rng)}, uu{u(rng), u(rng)}, vv{u(rng), u(rng)}, z{u(rng), u(rng)};
    const double logp = 2 * u(rng), logr = 2 * u(rng);
    const Tensor prev_t({1, 2, 2}, std::vector<double>{prev[0][0], prev[0][1], prev[1][0], prev[1][1]});
    const Transition f{Tensor({1, 2}, std::vector<double>{diag[0], diag[1]}), Tensor({2, 1}, std::vector<double>{uu[0], uu[1]}),
                       Tensor({2, 1}, std::vector<double>{vv[0], vv[1]})};
    const Tensor x({1, 2, 1}, std::vector<double>{z[0], z[1]});
    const Tensor hop({1, 2, 1}, std::vector<double>{h[0], h[1]});
    const Tensor k = kalman_gain(Tensor::vector({logp}), Tensor::vector({logr}));
    const Tensor composed = kf_update(kf_predict(prev_t, f), x, hop, k).logits;
    const Tensor fused = detail::kf_step_fused(prev_t, f, x, hop, k);
    for (std::size_t i = 0; i < 2; ++i) {
      const auto o = tests::classical_kf_two_node(prev[i], diag[i], uu, vv, h, z[i], std::exp(logp), std::exp(logr));
      for (std::size_t a = 0; a < 2; ++a) {
        worst_kf = std::max(worst_kf, std::abs(composed.at({0, i, a}) - o[a]));
        worst_kf = std::max(worst_kf, std::abs(fused.at({0, i, a}) - o[a]));
      }
    }
  }
  return {generated == 10000 && worst_row <= 1e-6 && worst_kf <= 1e-10,
          std::to_string(generated) + " adjacencies, max |row sum - 1| " + fmt(worst_row) +
              ", max |filter - classical| " + fmt(worst_kf)};
}

Outcome fresh_block_identity() {
  std::size_t mismatched = 0, runs = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(600 + seed);
    const std::size_t n = 1 + seed % 5, d = 1 + seed % 4;
    const GS3BWeights w = init_gs3b(BlockDims{n, d, 1 + seed % 2, 1 + seed % 4, 2 + seed % 3, 1 + seed % 2}, rng);
    const Tensor x = tests::uniform_tensor({1 + seed % 3, 1 + seed % 7, n, d}, rng, -3, 3);
    for (Variant v : {Variant::full, Variant::kfgn_off, Variant::gss_off}) {
      mismatched += !tests::bit_equal(gs3b_ablated_forward(x, w, v).values(), x.values());
      ++runs;
    }
  }
  return {mismatched == 0, std::to_string(mismatched) + " of " + std::to_string(runs) + " fresh blocks differ from input"};
}

// Shared by the training smoke test and the scenario check.
struct SmokeRun {
  PreparedData data;
  ModelConfig cfg;
  FitResult fit;
  double cpu = 0;
};

SmokeRun train_smoke() {
  const std::clock_t t0 = std::clock();
  SyntheticConfig sc;
  sc.seed = 7;
  SmokeRun r{prepare_data(generate_synthetic(sc, nullptr), 12, 1), {}, {}, 0};
  ModelConfig m;
  m.n_encoder = 1;
  m.n_decoder = 1;
  m.d_model = 4;
  m.expansion_factor = 1;
  m.d_state = 1;
  m.gru_hidden = 4;
  m.lowrank = 1;
  TrainConfig t;
  t.epochs = 200;
  t.seed = 1;
  t.weight_decay = 0.05;
  t.batch_size = 32;
  r.fit = fit(r.data.normalized, m, t);
  r.cfg = model_config_for(r.data.normalized.train, m);
  r.cpu = cpu_seconds(t0);
  return r;
}

Outcome training_smoke(const SmokeRun& r) {
  const auto& val = r.data.normalized.val;
  const Tensor truth = targets_split(val, 12, 1);
  const auto stamps = target_timestamps(val, 12, 1);
  const auto model = evaluate_forecast(predict_split(r.fit.weights, r.cfg, val), truth, r.data.norm, stamps);
  const auto pers = evaluate_forecast(persistence_forecast(val, 12, 1), truth, r.data.norm, stamps);
  const double mse_ratio = r.fit.final_train_mse / r.fit.initial_train_mse, rmse_ratio = model.rmse / pers.rmse;
  return {mse_ratio < 0.2 && rmse_ratio <= 0.9 && r.cpu < 300.0,
          "train mse ratio " + fmt(mse_ratio) + ", val rmse / persistence " + fmt(rmse_ratio) + ", cpu " + fmt(r.cpu) +
              " s"};
}

Outcome scaling() {
  ModelConfig c;
  c.n_encoder = 1;
  c.n_decoder = 1;
  c.d_model = 2;
  c.d_state = 4;
  c.gru_hidden = 8;
  c.lowrank = 2;
  c.n_nodes = 1;
  ScalingOptions off;
  off.measure_time = false;
  const auto analytic = scaling_experiment(SweepAxis::length, {256, 512, 1024, 2048, 4096}, c, off);
  const double scan_e = analytic.flops_fit.exponent, attn_e = analytic.attention_fit.exponent;

  ModelConfig tc = c;
  tc.d_model = 8;
  tc.n_nodes = 4;
  ScalingOptions timed;
  timed.trials = 5;
  const auto wall = scaling_experiment(SweepAxis::length, {64, 128, 256, 512, 1024}, tc, timed);
  const double time_e = wall.time_fit.exponent;

  ModelConfig nc = tc;
  const auto nodes = scaling_experiment(SweepAxis::nodes, {50, 100, 150, 200, 250, 300}, nc, off);
  const bool pass = std::abs(scan_e - 1.0) < 1e-6 && std::abs(attn_e - 2.0) <= 0.02 && time_e >= 0.85 &&
                    time_e <= 1.15 && nodes.points.size() == 6;
  return {pass, "scan flop exponent " + fmt(scan_e) + ", attention " + fmt(attn_e) + ", wall time " + fmt(time_e) +
                    ", node sweep rows " + std::to_string(nodes.points.size())};
}

Outcome ablation() {
  SyntheticConfig sc;
  sc.seed = 11;
  sc.n_nodes = 10;
  sc.t_steps = 1000;
  const PreparedData data = prepare_data(generate_synthetic(sc, nullptr), 12, 1);
  ModelConfig m;
  m.n_encoder = 1;
  m.n_decoder = 1;
  m.d_model = 4;
  m.expansion_factor = 1;
  m.d_state = 1;
  m.gru_hidden = 4;
  m.lowrank = 1;
  TrainConfig t;
  t.epochs = 20;
  t.cosine_t_max = 20;
  t.seed = 1;
  const AblationResult r = run_ablation(data, m, t);
  const double full = r.row(Variant::full).rmse;
  return {r.full_beats_kfgn_off() && r.full_beats_gss_off(),
          "median val rmse full " + fmt(full) + ", kfgn_off " + fmt(r.row(Variant::kfgn_off).rmse) + ", gss_off " +
              fmt(r.row(Variant::gss_off).rmse)};
}

Outcome scenarios(const SmokeRun& r) {
  const auto& test = r.data.normalized.test;
  const Tensor pred = predict_split(r.fit.weights, r.cfg, test), truth = targets_split(test, 12, 1);
  const auto stamps = target_timestamps(test, 12, 1);
  const auto rush = scenario_mask(stamps, Scenario::rush), non_rush = scenario_mask(stamps, Scenario::non_rush),
             weekend = scenario_mask(stamps, Scenario::weekend), weekday = scenario_mask(stamps, Scenario::non_weekend);
  std::size_t overlaps = 0;
  std::vector<bool> all(stamps.size());
  for (std::size_t i = 0; i < stamps.size(); ++i) {
    overlaps += (rush[i] && non_rush[i]) || ((rush[i] || non_rush[i]) != weekday[i]) || (weekend[i] == weekday[i]);
    all[i] = rush[i] || non_rush[i] || weekend[i];
  }
  const auto whole = compute_metrics(pred.values(), truth.values());
  const auto uni = compute_metrics(pred.values(), truth.values(), all);
  const auto a = compute_metrics(pred.values(), truth.values(), rush),
             b = compute_metrics(pred.values(), truth.values(), non_rush),
             c = compute_metrics(pred.values(), truth.values(), weekend);
  const double pooled = (a.mae * static_cast<double>(a.count) + b.mae * static_cast<double>(b.count) +
                         c.mae * static_cast<double>(c.count)) /
                        static_cast<double>(whole.count);
  const bool pass = overlaps == 0 && a.count + b.count + c.count == whole.count && uni.mae == whole.mae &&
                    std::abs(pooled - whole.mae) <= 1e-14;
  return {pass, std::to_string(overlaps) + " partition violations, union mae " + fmt(uni.mae) + " vs all " +
                    fmt(whole.mae) + ", pooled diff " + fmt(std::abs(pooled - whole.mae))};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

Outcome reproducible_training() {
  const fs::path dir = fs::temp_directory_path() / "stgm_acceptance_repro";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "cfg.json") << R"({"model": {"n_encoder": 1, "n_decoder": 1, "history_p": 6, "d_model": 4,
    "d_state": 2, "expansion_factor": 1, "gru_hidden": 3, "lowrank": 1},
    "train": {"epochs": 3, "cosine_T_max": 3}})";
  const auto run = [&](std::vector<std::string> args) {
    args.insert(args.begin(), "stgm");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  };
  const std::string cfg = (dir / "cfg.json").string(), ds = (dir / "ds.csv").string();
  int codes = run({"synth", "--nodes", "6", "--steps", "400", "--seed", "5", "-o", ds});
  for (const char* tag : {"a", "b"}) codes += run({"train", "-c", cfg, "-d", ds, "-o", (dir / tag).string() + ".ckpt"});
  const std::string ca = slurp(dir / "a.ckpt"), cb = slurp(dir / "b.ckpt");
  const std::string ha = slurp(dir / "a.ckpt.history.csv"), hb = slurp(dir / "b.ckpt.history.csv");
  fs::remove_all(dir);
  const bool pass = codes == 0 && !ca.empty() && !ha.empty() && ca == cb && ha == hb;
  return {pass, "exit codes " + std::to_string(codes) + ", checkpoint " + std::to_string(ca.size()) + " bytes " +
                    (ca == cb ? "identical" : "differ") + ", history " + (ha == hb ? "identical" : "differ")};
}

}  // namespace

// Arguments, when given, select criteria by name.
int main(int argc, char** argv) {
  const std::vector<std::string> only(argv + 1, argv + argc);
  int failed = 0;
  const auto report = [&](const std::string& name, const std::function<Outcome()>& fn) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) return;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  };
  report("conv_equals_recurrent_scan", conv_matches_recurrent);
  report("graph_scan_equals_dense_loop", graph_scan_matches_dense);
  report("model_gradient_check", model_gradients);
  report("zoh_continuity_and_stability", zoh_continuity_and_range);
  report("kalman_adjacency", kalman_adjacency);
  report("fresh_block_identity", fresh_block_identity);
  std::optional<SmokeRun> smoke;
  report("training_smoke", [&] {
    smoke = train_smoke();
    return training_smoke(*smoke);
  });
  report("scaling_exponents", scaling);
  report("ablation_medians", ablation);
  report("scenario_partition", [&] {
    if (!smoke) smoke = train_smoke();
    return scenarios(*smoke);
  });
  report("reproducible_training", reproducible_training);
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed") << std::endl;
  return failed ? 1 : 0;
}
