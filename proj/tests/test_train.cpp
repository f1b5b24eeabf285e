#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "stgm/data.hpp"
#include "stgm/train.hpp"
#include "test_util.hpp"

using namespace stgm;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("stgm_test_train_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ModelConfig small_model() {
  ModelConfig mc;
  mc.n_encoder = 1;
  mc.n_decoder = 1;
  mc.history_p = 6;
  mc.d_model = 4;
  mc.d_state = 2;
  mc.expansion_factor = 1;
  mc.gru_hidden = 3;
  mc.lowrank = 1;
  return mc;
}

TrainConfig small_train(std::size_t epochs = 4) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.cosine_t_max = 3;
  tc.batch_size = 16;
  tc.seed = 5;
  return tc;
}

const PreparedData& small_data() {
  static const PreparedData data = [] {
    SyntheticConfig sc;
    sc.n_nodes = 4;
    sc.t_steps = 200;
    sc.seed = 11;
    return prepare_data(generate_synthetic(sc, nullptr), 6, 1);
  }();
  return data;
}

std::vector<Timestamp> hourly(const std::string& start, std::size_t count) {
  const Timestamp t0 = parse_rfc3339(start);
  std::vector<Timestamp> ts;
  for (std::size_t i = 0; i < count; ++i) ts.push_back(t0.plus_minutes(60 * static_cast<std::int64_t>(i)));
  return ts;
}

}  // namespace

TEST(Metrics, IdenticalArraysScoreZero) {
  const std::vector<double> a{1, -2, 3.5};
  const auto r = compute_metrics(a, a);
  EXPECT_EQ(r.rmse, 0.0);
  EXPECT_EQ(r.mae, 0.0);
  EXPECT_EQ(r.mape, 0.0);
}

TEST(Metrics, HandComputedPair) {
  const std::vector<double> pred{0, 0}, truth{3, 4};
  const auto r = compute_metrics(pred, truth);
  EXPECT_NEAR(r.rmse, std::sqrt(12.5), 1e-15);
  EXPECT_NEAR(r.rmse, 3.53553, 1e-5);
  EXPECT_DOUBLE_EQ(r.mae, 3.5);
  EXPECT_DOUBLE_EQ(r.mape, 100.0);
}

TEST(Metrics, MapeSkipsNearZeroTruth) {
  const std::vector<double> pred{1, 2}, truth{0, 4};
  const auto r = compute_metrics(pred, truth);
  EXPECT_EQ(r.mape_count, 1u);
  EXPECT_DOUBLE_EQ(r.mape, 50.0);
}

TEST(Metrics, MaskEqualsSlicing) {
  std::mt19937_64 rng(1);
  const Tensor pred = tests::uniform_tensor({10, 3}, rng), truth = tests::uniform_tensor({10, 3}, rng);
  std::vector<bool> mask(10);
  std::vector<double> ps, ts;
  for (std::size_t i = 0; i < 10; ++i) {
    mask[i] = i % 2 == 1;
    if (!mask[i]) continue;
    for (std::size_t c = 0; c < 3; ++c) {
      ps.push_back(pred[i * 3 + c]);
      ts.push_back(truth[i * 3 + c]);
    }
  }
  const auto a = compute_metrics(pred, truth, mask);
  const auto b = compute_metrics(ps, ts);
  EXPECT_EQ(a.rmse, b.rmse);
  EXPECT_EQ(a.mae, b.mae);
  EXPECT_EQ(a.mape, b.mape);
  EXPECT_EQ(a.count, 15u);
}

TEST(Metrics, Contracts) {
  const std::vector<double> a{1, 2}, b{1};
  EXPECT_THROW(compute_metrics(a, b), DimensionError);
  EXPECT_THROW(compute_metrics(a, a, std::vector<bool>{false, false}), ContractError);
  EXPECT_THROW(compute_metrics(Tensor({2, 3}), Tensor({3, 2})), DimensionError);
}

TEST(Metrics, RmseDominatesMaeAndZeroOnlyWhenEqual) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor p = tests::uniform_tensor({7}, rng), t = tests::uniform_tensor({7}, rng);
    const auto r = compute_metrics(p, t);
    EXPECT_GE(r.rmse, r.mae);
    EXPECT_GT(r.mae, 0.0);
    EXPECT_GE(r.mape, 0.0);
  }
}

TEST(AdamW, ZeroGradientNoDecayIsNoOp) {
  Tensor p = Tensor::vector({1.5, -2});
  const std::vector<double> g{0, 0};
  AdamState st;
  adamw_step({&p}, {g}, st, 0.1, 0.0);
  EXPECT_EQ(p[0], 1.5);
  EXPECT_EQ(p[1], -2.0);
}

TEST(AdamW, FirstStepIsBiasCorrected) {
  Tensor p = Tensor::scalar(1.0);
  const std::vector<double> g{1.0};
  AdamState st;
  adamw_step({&p}, {g}, st, 0.1, 0.0);
  // m_hat = v_hat = 1 after correction.
  EXPECT_DOUBLE_EQ(p[0], 1.0 - 0.1 / (1.0 + 1e-8));
  EXPECT_NEAR(p[0], 0.9, 1e-8);
}

TEST(AdamW, DecayOnlyShrinksGeometrically) {
  Tensor p = Tensor::vector({2.0, -4.0});
  const std::vector<double> g{0, 0};
  AdamState st;
  double expect0 = 2.0;
  for (int i = 0; i < 5; ++i) {
    adamw_step({&p}, {g}, st, 0.01, 0.5);
    expect0 *= 1 - 0.01 * 0.5;
  }
  EXPECT_NEAR(p[0], expect0, 1e-15);
  EXPECT_NEAR(p[1], -2 * expect0, 1e-15);
}

TEST(AdamW, MatchesScalarReference) {
  Tensor p = Tensor::scalar(0.3);
  AdamState st;
  double ref = 0.3, m = 0, v = 0;
  const double grads[] = {0.5, -1.2, 0.1, 2.0};
  for (int t = 1; t <= 4; ++t) {
    const double g = grads[t - 1];
    adamw_step({&p}, {std::vector<double>{g}}, st, 1e-2, 0.05);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    ref -= 1e-2 * (mh / (std::sqrt(vh) + 1e-8) + 0.05 * ref);
  }
  EXPECT_NEAR(p[0], ref, 1e-15);
  EXPECT_EQ(st.t, 4u);
}

TEST(CosineLr, ScheduleEndpoints) {
  const TrainConfig c;
  EXPECT_DOUBLE_EQ(cosine_lr(0, c), 1e-3);
  EXPECT_NEAR(cosine_lr(50, c), 1e-5, 1e-18);
  EXPECT_NEAR(cosine_lr(25, c), 5.05e-4, 1e-15);
  EXPECT_EQ(cosine_lr(51, c), cosine_lr(50, c));
  EXPECT_EQ(cosine_lr(299, c), cosine_lr(50, c));
  for (std::size_t e = 1; e <= 50; ++e) EXPECT_LT(cosine_lr(e, c), cosine_lr(e - 1, c));
}

TEST(Fit, DeterministicForSeed) {
  const auto& data = small_data();
  const FitResult a = fit(data.normalized, small_model(), small_train());
  const FitResult b = fit(data.normalized, small_model(), small_train());
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
    EXPECT_EQ(a.history[i].val_loss, b.history[i].val_loss);
  }
  std::vector<std::span<const double>> wa, wb;
  a.weights.visit([&](const std::string&, const Tensor& t) { wa.push_back(t.values()); });
  b.weights.visit([&](const std::string&, const Tensor& t) { wb.push_back(t.values()); });
  for (std::size_t i = 0; i < wa.size(); ++i) EXPECT_TRUE(tests::bit_equal(wa[i], wb[i]));
}

TEST(Fit, HistoryRecordsScheduleAndBestEpoch) {
  const auto& data = small_data();
  const TrainConfig tc = small_train(5);
  const FitResult r = fit(data.normalized, small_model(), tc);
  ASSERT_EQ(r.history.size(), 5u);
  double best = r.history[0].val_loss;
  for (const auto& h : r.history) {
    EXPECT_EQ(h.lr, cosine_lr(h.epoch, tc));
    best = std::min(best, h.val_loss);
  }
  EXPECT_EQ(r.history[r.best_epoch].val_loss, best);
  ModelConfig full = model_config_for(data.normalized.train, small_model());
  EXPECT_EQ(split_mse(r.weights, full, data.normalized.val), best);
}

TEST(Fit, StopsWhenCallbackDeclines) {
  FitOptions opt;
  opt.on_epoch = [](const EpochRecord& rec) { return rec.epoch < 1; };
  const FitResult r = fit(small_data().normalized, small_model(), small_train(6), opt);
  EXPECT_EQ(r.history.size(), 2u);
}

TEST(Fit, RejectsSplitsWithoutWindows) {
  DatasetSplits s = small_data().normalized;
  s.val = time_slice(s.val, 0, 3);
  EXPECT_THROW(fit(s, small_model(), small_train()), ContractError);
}

TEST(PredictSplit, ThreadsAreBitIdentical) {
  const auto& data = small_data();
  const ModelConfig cfg = model_config_for(data.normalized.train, small_model());
  std::mt19937_64 rng(3);
  const ModelWeights w = init_model(cfg, rng);
  const Tensor serial = predict_split(w, cfg, data.normalized.train, 7, 1);
  const Tensor parallel = predict_split(w, cfg, data.normalized.train, 7, 3);
  EXPECT_EQ(serial.shape(), parallel.shape());
  EXPECT_TRUE(tests::bit_equal(serial.values(), parallel.values()));
  EXPECT_THROW(predict_split(w, cfg, data.normalized.train, 0, 1), ContractError);
}

TEST(Persistence, RepeatsLastObservation) {
  const auto& split = small_data().raw.val;
  const Tensor f = persistence_forecast(split, 6, 2);
  const std::size_t n = split.nodes();
  ASSERT_EQ(f.shape(), (Shape{split.steps() - 7, 2, n, 1}));
  for (std::size_t w = 0; w < f.dim(0); ++w)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < n; ++i) ASSERT_EQ(f.at({w, h, i, 0}), split.values.at({w + 5, i, 0}));
}

TEST(Scenario, PartitionsAndUnionMae) {
  // Two weeks hourly from a Monday, one forecast row of 3 entries per stamp.
  const auto stamps = hourly("2024-01-01T00:00:00Z", 24 * 14);
  std::mt19937_64 rng(4);
  const std::size_t per = 3;
  const Tensor pred = tests::uniform_tensor({stamps.size(), per}, rng);
  const Tensor truth = tests::uniform_tensor({stamps.size(), per}, rng);
  const auto rush = scenario_mask(stamps, Scenario::rush), non_rush = scenario_mask(stamps, Scenario::non_rush);
  const auto weekend = scenario_mask(stamps, Scenario::weekend);
  const auto weekday = scenario_mask(stamps, Scenario::non_weekend);
  std::vector<bool> all(stamps.size());
  std::size_t n_rush = 0, n_non = 0, n_weekend = 0;
  for (std::size_t i = 0; i < stamps.size(); ++i) {
    ASSERT_FALSE(rush[i] && non_rush[i]);
    ASSERT_EQ(rush[i] || non_rush[i], weekday[i]);
    ASSERT_NE(weekend[i], weekday[i]);
    all[i] = rush[i] || non_rush[i] || weekend[i];
    n_rush += rush[i];
    n_non += non_rush[i];
    n_weekend += weekend[i];
  }
  EXPECT_EQ(n_rush, 10u * 6u);
  EXPECT_EQ(n_weekend, 4u * 24u);
  const auto whole = compute_metrics(pred, truth);
  const auto uni = compute_metrics(pred, truth, all);
  EXPECT_EQ(uni.mae, whole.mae);
  EXPECT_EQ(uni.count, whole.count);
  const auto r = compute_metrics(pred, truth, rush), nr = compute_metrics(pred, truth, non_rush),
             we = compute_metrics(pred, truth, weekend);
  const double pooled = (r.mae * static_cast<double>(r.count) + nr.mae * static_cast<double>(nr.count) +
                         we.mae * static_cast<double>(we.count)) /
                        static_cast<double>(whole.count);
  EXPECT_NEAR(pooled, whole.mae, 1e-14);
}

TEST(Scenario, EvaluateForecastReportsOrRejects) {
  NormalizationState norm;
  norm.min = {0.0};
  norm.max = {2.0};
  norm.degenerate = {false};
  const auto stamps = hourly("2024-01-06T00:00:00Z", 48);  // Saturday and Sunday
  std::mt19937_64 rng(5);
  const Tensor pred = tests::uniform_tensor({48, 2, 1}, rng, 0, 1), truth = tests::uniform_tensor({48, 2, 1}, rng, 0, 1);
  const auto rep = evaluate_forecast(pred, truth, norm, stamps, {Scenario::rush, Scenario::weekend});
  EXPECT_EQ(rep.scenarios.count("rush"), 0u);
  ASSERT_EQ(rep.scenarios.count("weekend"), 1u);
  EXPECT_DOUBLE_EQ(rep.scenarios.at("weekend").mae, rep.mae);
  const auto scaled = compute_metrics(pred, truth);
  EXPECT_NEAR(rep.mae, 2 * scaled.mae, 1e-15);
  EXPECT_THROW(evaluate_forecast(pred, truth, norm, stamps, {Scenario::rush}, true), ContractError);
}

TEST(Checkpoint, RoundTripAndStableBytes) {
  const auto dir = scratch_dir("ckpt");
  const auto& data = small_data();
  Checkpoint ck;
  ck.model = model_config_for(data.normalized.train, small_model());
  ck.train = small_train();
  std::mt19937_64 rng(6);
  ck.weights = init_model(ck.model, rng, data.normalized.train.static_adjacency);
  ck.norm = data.norm;
  ck.extra = {{"epoch", 3}};
  save_checkpoint((dir / "a.bin").string(), ck);
  save_checkpoint((dir / "b.bin").string(), ck);
  EXPECT_EQ(slurp(dir / "a.bin"), slurp(dir / "b.bin"));

  const Checkpoint back = load_checkpoint((dir / "a.bin").string());
  EXPECT_EQ(to_json(back.model), to_json(ck.model));
  EXPECT_EQ(to_json(back.train), to_json(ck.train));
  EXPECT_EQ(back.norm.to_json(), ck.norm.to_json());
  EXPECT_EQ(back.extra, ck.extra);
  std::vector<std::span<const double>> a, b;
  ck.weights.visit([&](const std::string&, const Tensor& t) { a.push_back(t.values()); });
  back.weights.visit([&](const std::string&, const Tensor& t) { b.push_back(t.values()); });
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(tests::bit_equal(a[i], b[i]));
  ASSERT_TRUE(back.weights.static_alpha.has_value());
  EXPECT_TRUE(tests::bit_equal(back.weights.static_alpha->values(), ck.weights.static_alpha->values()));

  EXPECT_THROW(load_checkpoint((dir / "missing.bin").string()), IoError);
  {
    std::ofstream os(dir / "trunc.bin", std::ios::binary);
    const std::string bytes = slurp(dir / "a.bin");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  EXPECT_ANY_THROW(load_checkpoint((dir / "trunc.bin").string()));
  fs::remove_all(dir);
}

TEST(History, CsvLayout) {
  std::ostringstream os;
  write_history_csv(os, {{0, 1e-3, 0.5, 0.25}, {1, 5e-4, 0.125, 0.0625}});
  EXPECT_EQ(os.str(), "epoch,lr,train_loss,val_loss\n0,0.001,0.5,0.25\n1,5e-04,0.125,0.0625\n");
}

TEST(NeumaierSum, CompensatesCancellation) {
  NeumaierSum s;
  for (double v : {1.0, 1e100, 1.0, -1e100}) s.add(v);
  EXPECT_EQ(s.value(), 2.0);
}
