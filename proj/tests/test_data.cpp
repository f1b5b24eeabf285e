#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stgm/data.hpp"
#include "test_util.hpp"

using namespace stgm;
namespace fs = std::filesystem;

namespace {

STGDataset make_dataset(std::size_t t, std::size_t n, std::size_t d, std::mt19937_64& rng) {
  STGDataset ds;
  ds.values = tests::uniform_tensor({t, n, d}, rng);
  for (std::size_t i = 0; i < n; ++i) ds.node_ids.push_back("s" + std::to_string(i));
  ds.interval_minutes = 15;
  ds.start = parse_rfc3339("2024-03-05T06:00:00Z");
  return ds;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("stgm_test_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

SyntheticConfig quiet(std::uint64_t seed) {
  SyntheticConfig c;
  c.n_nodes = 8;
  c.t_steps = 300;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Normalization, LinearMapOnTrainColumn) {
  STGDataset ds;
  ds.values = Tensor({3, 1, 1}, std::vector<double>{2, 4, 6});
  ds.node_ids = {"a"};
  const auto s = NormalizationState::fit(ds);
  const Tensor z = s.normalize(ds.values);
  EXPECT_EQ(z[0], 0.0);
  EXPECT_EQ(z[1], 0.5);
  EXPECT_EQ(z[2], 1.0);
  EXPECT_FALSE(s.degenerate[0]);
}

TEST(Normalization, ConstantFeatureIsDegenerate) {
  STGDataset ds;
  ds.values = Tensor({4, 2, 2}, 3.0);
  ds.node_ids = {"a", "b"};
  for (std::size_t i = 0; i < 8; ++i) ds.values.mutable_values()[2 * i] = static_cast<double>(i);
  const auto s = NormalizationState::fit(ds);
  EXPECT_FALSE(s.degenerate[0]);
  EXPECT_TRUE(s.degenerate[1]);
  const Tensor z = s.normalize(ds.values);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(z[2 * i + 1], 0.0);
  const Tensor back = s.denormalize(z);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(back[2 * i + 1], 3.0);
}

TEST(Normalization, RoundTrip) {
  std::mt19937_64 rng(1);
  const STGDataset ds = make_dataset(50, 3, 2, rng);
  const auto s = NormalizationState::fit(ds);
  const Tensor z = s.normalize(ds.values);
  for (double v : z.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_LT(tests::max_abs_diff(s.denormalize(z).values(), ds.values.values()), 1e-12);
  EXPECT_THROW(s.normalize(Tensor({2, 3})), DimensionError);
}

TEST(Normalization, DependsOnlyOnTrainSplit) {
  std::mt19937_64 rng(2);
  STGDataset ds = make_dataset(100, 2, 1, rng);
  const auto before = NormalizationState::fit(split_dataset(ds, 3, 1).train);
  for (std::size_t i = 60 * 2; i < 100 * 2; ++i) ds.values.mutable_values()[i] = 1e6 * static_cast<double>(i);
  const auto after = NormalizationState::fit(split_dataset(ds, 3, 1).train);
  EXPECT_EQ(before.to_json(), after.to_json());
}

TEST(Split, SixTwoTwo) {
  std::mt19937_64 rng(3);
  const STGDataset ds = make_dataset(100, 2, 1, rng);
  const auto s = split_dataset(ds, 12, 1);
  EXPECT_EQ(s.train.steps(), 60u);
  EXPECT_EQ(s.val.steps(), 20u);
  EXPECT_EQ(s.test.steps(), 20u);
  EXPECT_EQ(s.val_start, 60u);
  EXPECT_EQ(s.test_start, 80u);
  EXPECT_EQ(s.val.start, ds.timestamp(60));
}

TEST(Split, TooShortForWindow) {
  std::mt19937_64 rng(4);
  const STGDataset ds = make_dataset(10, 2, 1, rng);
  EXPECT_THROW(split_dataset(ds, 12, 1), DomainError);
  EXPECT_THROW(split_dataset(ds, 1, 1, {0.5, 0.5, 0.5}), DomainError);
}

TEST(Split, ConcatenationReproducesCube) {
  std::mt19937_64 rng(5);
  for (std::size_t t : {37u, 100u, 253u}) {
    const STGDataset ds = make_dataset(t, 3, 2, rng);
    const auto s = split_dataset(ds, 2, 1);
    std::vector<double> joined;
    for (const auto* part : {&s.train, &s.val, &s.test})
      joined.insert(joined.end(), part->values.values().begin(), part->values.values().end());
    EXPECT_TRUE(tests::bit_equal(joined, ds.values.values()));
    EXPECT_EQ(s.train.steps(), static_cast<std::size_t>(std::floor(0.6 * static_cast<double>(t))));
  }
}

TEST(Windows, CountAndContracts) {
  std::mt19937_64 rng(6);
  const STGDataset ds = make_dataset(15, 2, 1, rng);
  EXPECT_EQ(window_iterator(ds, 12, 1).size(), 3u);
  EXPECT_THROW(window_iterator(ds, 12, 0), ContractError);
  EXPECT_THROW(window_iterator(ds, 0, 1), ContractError);
  EXPECT_EQ(window_iterator(ds, 12, 4).size(), 0u);
  EXPECT_THROW(window_iterator(ds, 12, 1)[3], ContractError);
}

TEST(Windows, CountFormulaRandomized) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> len(1, 60), small(1, 12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t t = len(rng), p = small(rng), k = small(rng);
    const STGDataset ds = make_dataset(t, 1, 1, rng);
    const std::size_t expect = t >= p + k ? t - p - k + 1 : 0;
    EXPECT_EQ(window_iterator(ds, p, k).size(), expect);
  }
}

TEST(Windows, AreViewsOfTheSplit) {
  std::mt19937_64 rng(8);
  const STGDataset ds = make_dataset(20, 3, 2, rng);
  const auto it = window_iterator(ds, 4, 2);
  const std::size_t row = 6;
  for (std::size_t i = 0; i < it.size(); ++i) {
    const Window w = it[i];
    EXPECT_EQ(w.history.data(), ds.values.data() + i * row);
    EXPECT_EQ(w.target.data(), ds.values.data() + (i + 4) * row);
    EXPECT_EQ(w.history.size(), 4 * row);
    EXPECT_EQ(w.target.size(), 2 * row);
    EXPECT_EQ(w.last_observed, ds.timestamp(i + 3));
    EXPECT_EQ(w.first_target, ds.timestamp(i + 4));
  }
  const std::vector<std::size_t> ids{2, 0};
  const auto [x, y] = it.batch(ids);
  EXPECT_EQ(x.shape(), (Shape{2, 4, 3, 2}));
  EXPECT_TRUE(tests::bit_equal(std::span<const double>(x.data(), 4 * row), it[2].history));
  EXPECT_TRUE(tests::bit_equal(std::span<const double>(y.data() + 2 * row, 2 * row), it[0].target));
}

TEST(Synthetic, DynamicsOffIsConstant) {
  SyntheticConfig c = quiet(1);
  c.noise_sigma = 0;
  c.amplitude = 0;
  c.diffusion = 0;
  const STGDataset ds = generate_synthetic(c, nullptr);
  const std::size_t n = ds.nodes();
  for (std::size_t t = 1; t < ds.steps(); ++t)
    for (std::size_t i = 0; i < n; ++i) ASSERT_EQ(ds.values[t * n + i], ds.values[i]);
}

TEST(Synthetic, SeedDeterminesDataset) {
  const STGDataset a = generate_synthetic(quiet(3), nullptr), b = generate_synthetic(quiet(3), nullptr);
  EXPECT_TRUE(tests::bit_equal(a.values.values(), b.values.values()));
  EXPECT_TRUE(tests::bit_equal(a.static_adjacency->values(), b.static_adjacency->values()));
  const STGDataset c = generate_synthetic(quiet(4), nullptr);
  EXPECT_FALSE(tests::bit_equal(a.values.values(), c.values.values()));
}

TEST(Synthetic, StaticAdjacencyIsRowNormalizedGeometricGraph) {
  const STGDataset ds = generate_synthetic(quiet(5), nullptr);
  const Tensor& a = *ds.static_adjacency;
  const std::size_t n = ds.nodes();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < n; ++j) {
      EXPECT_GE(a[i * n + j], 0.0);
      s += a[i * n + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-15);
    EXPECT_GT(a[i * n + i], 0.0);
    EXPECT_LT(a[i * n + i], 1.0);
  }
}

TEST(Synthetic, LagOneAutocorrelation) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    SyntheticConfig c = quiet(100 + seed);
    c.diffusion = 0.3;
    c.noise_sigma = 0.1;
    const STGDataset ds = generate_synthetic(c, nullptr);
    const std::size_t n = ds.nodes(), t = ds.steps();
    for (std::size_t i = 0; i < n; ++i) {
      double mean = 0;
      for (std::size_t s = 0; s < t; ++s) mean += ds.values[s * n + i];
      mean /= static_cast<double>(t);
      double num = 0, den = 0;
      for (std::size_t s = 0; s < t; ++s) {
        const double e = ds.values[s * n + i] - mean;
        den += e * e;
        if (s + 1 < t) num += e * (ds.values[(s + 1) * n + i] - mean);
      }
      EXPECT_GT(num / den, 0.5) << "seed " << seed << " node " << i;
    }
  }
}

TEST(Synthetic, BoundedOverLongRuns) {
  for (double c : {0.05, 0.5, 0.95}) {
    SyntheticConfig cfg = quiet(9);
    cfg.t_steps = 10000;
    cfg.diffusion = c;
    const STGDataset ds = generate_synthetic(cfg, nullptr);
    double peak = 0;
    for (double v : ds.values.values()) peak = std::max(peak, std::abs(v));
    EXPECT_LT(peak, 5.0) << "diffusion " << c;
  }
}

TEST(Synthetic, IsolatingRadiusFailsAfterRetries) {
  SyntheticConfig c = quiet(1);
  c.radius = 1e-6;
  std::ostringstream warn;
  EXPECT_THROW(generate_synthetic(c, &warn), DomainError);
  std::size_t lines = 0;
  for (char ch : warn.str()) lines += ch == '\n';
  EXPECT_EQ(lines, 11u);
  c.radius = -1;
  EXPECT_THROW(generate_synthetic(c, nullptr), DomainError);
}

TEST(Csv, RoundTrip) {
  std::mt19937_64 rng(10);
  const STGDataset ds = make_dataset(9, 3, 2, rng);
  std::stringstream ss;
  write_csv(ss, ds);
  const STGDataset back = read_csv(ss);
  EXPECT_TRUE(tests::bit_equal(back.values.values(), ds.values.values()));
  EXPECT_EQ(back.node_ids, ds.node_ids);
  EXPECT_EQ(back.interval_minutes, ds.interval_minutes);
  EXPECT_EQ(back.start, ds.start);
}

TEST(Csv, HandcraftedFixture) {
  std::istringstream is(
      "timestamp,node_id,feature_0\n"
      "2024-01-01T00:05:00Z,B,4\n"
      "2024-01-01T00:00:00Z,A,1\n"
      "2024-01-01T00:00:00Z,B,2\n"
      "2024-01-01T00:05:00Z,A,3\n"
      "2024-01-01T00:10:00Z,A,5.5\n"
      "2024-01-01T00:10:00Z,B,-6\n");
  const STGDataset ds = read_csv(is);
  ASSERT_EQ(ds.values.shape(), (Shape{3, 2, 1}));
  EXPECT_EQ(ds.node_ids, (std::vector<std::string>{"B", "A"}));
  const std::vector<double> want{2, 1, 4, 3, -6, 5.5};
  EXPECT_TRUE(tests::bit_equal(ds.values.values(), want));
  EXPECT_EQ(ds.interval_minutes, 5);
}

TEST(Csv, MissingCellIsNamed) {
  std::istringstream is(
      "timestamp,node_id,feature_0\n"
      "2024-01-01T00:00:00Z,A,1\n"
      "2024-01-01T00:00:00Z,B,2\n"
      "2024-01-01T00:05:00Z,A,3\n");
  try {
    read_csv(is);
    FAIL() << "expected an error";
  } catch (const ContractError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2024-01-01T00:05:00Z"), std::string::npos) << msg;
    EXPECT_NE(msg.find("B"), std::string::npos) << msg;
  }
}

TEST(Csv, BadRowsCarryLineNumbers) {
  std::istringstream bad_value("timestamp,node_id,feature_0\n2024-01-01T00:00:00Z,A,1\n2024-01-01T00:05:00Z,A,x\n");
  try {
    read_csv(bad_value, "f.csv");
    FAIL() << "expected an error";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("f.csv:3"), std::string::npos) << e.what();
  }
  std::istringstream bad_header("time,node,feature_0\n");
  EXPECT_THROW(read_csv(bad_header), ContractError);
  std::istringstream uneven(
      "timestamp,node_id,feature_0\n2024-01-01T00:00:00Z,A,1\n2024-01-01T00:05:00Z,A,1\n2024-01-01T00:15:00Z,A,1\n");
  EXPECT_THROW(read_csv(uneven), ContractError);
  std::istringstream dup("timestamp,node_id,feature_0\n2024-01-01T00:00:00Z,A,1\n2024-01-01T00:00:00Z,A,2\n");
  EXPECT_THROW(read_csv(dup), ContractError);
}

TEST(Csv, FilesAndCube) {
  const auto dir = scratch_dir("files");
  std::mt19937_64 rng(11);
  STGDataset ds = make_dataset(6, 2, 1, rng);
  ds.static_adjacency = Tensor::matrix({{1, 0.5}, {0, 2}});
  save_csv(ds, (dir / "d.csv").string());
  EXPECT_TRUE(tests::bit_equal(load_csv((dir / "d.csv").string()).values.values(), ds.values.values()));
  save_cube(ds, (dir / "d.cube").string());
  const STGDataset cube = load_cube((dir / "d.cube").string());
  EXPECT_TRUE(tests::bit_equal(cube.values.values(), ds.values.values()));
  EXPECT_TRUE(tests::bit_equal(cube.static_adjacency->values(), ds.static_adjacency->values()));
  EXPECT_EQ(cube.start, ds.start);
  save_adjacency_csv(*ds.static_adjacency, (dir / "a.csv").string());
  EXPECT_TRUE(tests::bit_equal(load_adjacency_csv((dir / "a.csv").string()).values(), ds.static_adjacency->values()));
  EXPECT_THROW(load_csv((dir / "nope.csv").string()), IoError);
  fs::remove_all(dir);
}

TEST(Scenarios, ClockAndWeekday) {
  const Timestamp tue = parse_rfc3339("2024-01-02T09:30:00Z");
  EXPECT_EQ(tue.iso_weekday(), 2);
  EXPECT_TRUE(in_scenario(tue, Scenario::rush));
  EXPECT_FALSE(in_scenario(tue, Scenario::non_rush));
  const Timestamp sat = parse_rfc3339("2024-01-06T09:30:00Z");
  EXPECT_EQ(sat.iso_weekday(), 6);
  EXPECT_FALSE(in_scenario(sat, Scenario::rush));
  EXPECT_TRUE(in_scenario(sat, Scenario::weekend));
  EXPECT_FALSE(in_scenario(parse_rfc3339("2024-01-02T11:00:00Z"), Scenario::rush));
  EXPECT_TRUE(in_scenario(parse_rfc3339("2024-01-02T16:00:00Z"), Scenario::rush));
  EXPECT_FALSE(in_scenario(parse_rfc3339("2024-01-02T19:00:00Z"), Scenario::rush));
  EXPECT_TRUE(in_scenario(parse_rfc3339("2024-01-02T10:59:00+05:00"), Scenario::rush));
  EXPECT_THROW(parse_scenario("peak"), ContractError);
}

TEST(Scenarios, PartitionIdentities) {
  std::vector<Timestamp> ts;
  const Timestamp t0 = parse_rfc3339("2023-12-30T00:00:00Z");
  for (int i = 0; i < 24 * 21 * 4; ++i) ts.push_back(t0.plus_minutes(15 * i));
  const auto rush = scenario_mask(ts, Scenario::rush), non_rush = scenario_mask(ts, Scenario::non_rush);
  const auto weekend = scenario_mask(ts, Scenario::weekend), weekday = scenario_mask(ts, Scenario::non_weekend);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    ASSERT_EQ(rush[i] || non_rush[i], weekday[i]);
    ASSERT_FALSE(rush[i] && non_rush[i]);
    ASSERT_TRUE(weekend[i] != weekday[i]);
  }
}

TEST(Rfc3339, ParseAndFormat) {
  const Timestamp t = parse_rfc3339("2024-02-29T23:59:58+05:30");
  EXPECT_EQ(t.utc_offset_minutes, 330);
  EXPECT_EQ(format_rfc3339(t), "2024-02-29T23:59:58+05:30");
  EXPECT_EQ(t.minute_of_day(), 23 * 60 + 59);
  EXPECT_EQ(parse_rfc3339("2024-02-29T18:29:58Z").utc_seconds(), t.utc_seconds());
  EXPECT_EQ(format_rfc3339(parse_rfc3339("1969-12-31 23:00:00.000Z")), "1969-12-31T23:00:00Z");
  EXPECT_EQ(parse_rfc3339("1969-12-31T23:00:00Z").iso_weekday(), 3);
  for (const char* bad : {"2023-02-29T00:00:00Z", "2024-01-01T24:00:00Z", "2024-01-01T00:00:00", "2024-01-01T00:00:00.5Z",
                          "2024-1-01T00:00:00Z", "2024-01-01T00:00:00Zjunk"}) {
    EXPECT_THROW(parse_rfc3339(bad), ContractError) << bad;
  }
}
