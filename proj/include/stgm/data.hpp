#pragma once

// Observation cubes [T, N, d], calendar handling, normalization, splitting,
// windowing, the synthetic generator and file formats.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "stgm/errors.hpp"
#include "stgm/serialize.hpp"
#include "stgm/tensor.hpp"

namespace stgm {

// Wall-clock instant: civil seconds in local time plus the UTC offset it was
// written with. Weekday and time of day are read from the local fields.
struct Timestamp {
  std::int64_t local_seconds = 0;  // since 1970-01-01T00:00:00 local
  int utc_offset_minutes = 0;

  Timestamp plus_minutes(std::int64_t m) const { return {local_seconds + 60 * m, utc_offset_minutes}; }
  std::int64_t utc_seconds() const { return local_seconds - 60 * static_cast<std::int64_t>(utc_offset_minutes); }
  std::int64_t minute_of_day() const {
    const std::int64_t s = ((local_seconds % 86400) + 86400) % 86400;
    return s / 60;
  }
  // ISO weekday: 1 = Monday ... 7 = Sunday.
  int iso_weekday() const {
    const std::int64_t days = local_seconds >= 0 ? local_seconds / 86400 : (local_seconds - 86399) / 86400;
    const std::int64_t w = ((days % 7) + 7 + 3) % 7;  // 1970-01-01 was a Thursday
    return static_cast<int>(w) + 1;
  }
  bool operator==(const Timestamp&) const = default;
};

namespace detail {

// Days since 1970-01-01 for a proleptic Gregorian date.
inline std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const auto yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

struct CivilDate {
  std::int64_t year;
  unsigned month, day;
};

inline CivilDate civil_from_days(std::int64_t z) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const auto doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  const unsigned d = doy - (153 * mp + 2) / 5 + 1;
  const unsigned m = mp < 10 ? mp + 3 : mp - 9;
  return {static_cast<std::int64_t>(yoe) + era * 400 + (m <= 2), m, d};
}

inline unsigned days_in_month(std::int64_t y, unsigned m) {
  static constexpr unsigned kDays[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  const bool leap = (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
  return m == 2 && leap ? 29 : kDays[m - 1];
}

}  // namespace detail

// Accepts YYYY-MM-DDTHH:MM:SS[.fff](Z|+hh:mm|-hh:mm); 't' and ' ' separators
// are allowed. Fractional seconds must be zero.
inline Timestamp parse_rfc3339(std::string_view s) {
  const auto fail = [&](const char* why) {
    return ContractError("invalid RFC 3339 timestamp '" + std::string(s) + "': " + why);
  };
  std::size_t pos = 0;
  const auto digits = [&](std::size_t count) {
    if (pos + count > s.size()) throw fail("truncated");
    std::int64_t v = 0;
    for (std::size_t i = 0; i < count; ++i) {
      const char c = s[pos + i];
      if (c < '0' || c > '9') throw fail("expected digit");
      v = v * 10 + (c - '0');
    }
    pos += count;
    return v;
  };
  const auto expect = [&](std::string_view any_of) {
    if (pos >= s.size() || any_of.find(s[pos]) == std::string_view::npos) throw fail("unexpected separator");
    ++pos;
  };
  const std::int64_t year = digits(4);
  expect("-");
  const auto month = static_cast<unsigned>(digits(2));
  expect("-");
  const auto day = static_cast<unsigned>(digits(2));
  expect("Tt ");
  const std::int64_t hour = digits(2);
  expect(":");
  const std::int64_t minute = digits(2);
  expect(":");
  const std::int64_t second = digits(2);
  if (month < 1 || month > 12 || day < 1 || day > detail::days_in_month(year, month)) throw fail("bad date");
  if (hour > 23 || minute > 59 || second > 59) throw fail("bad time");
  if (pos < s.size() && s[pos] == '.') {
    ++pos;
    const std::size_t start = pos;
    while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') {
      if (s[pos] != '0') throw fail("sub-second precision is not supported");
      ++pos;
    }
    if (pos == start) throw fail("empty fraction");
  }
  int offset = 0;
  if (pos >= s.size()) throw fail("missing UTC offset");
  if (s[pos] == 'Z' || s[pos] == 'z') {
    ++pos;
  } else {
    const int sign = s[pos] == '-' ? -1 : 1;
    expect("+-");
    const std::int64_t oh = digits(2);
    expect(":");
    const std::int64_t om = digits(2);
    if (oh > 23 || om > 59) throw fail("bad offset");
    offset = sign * static_cast<int>(oh * 60 + om);
  }
  if (pos != s.size()) throw fail("trailing characters");
  const std::int64_t days = detail::days_from_civil(year, month, day);
  return {days * 86400 + hour * 3600 + minute * 60 + second, offset};
}

inline std::string format_rfc3339(const Timestamp& ts) {
  const std::int64_t days = ts.local_seconds >= 0 ? ts.local_seconds / 86400 : (ts.local_seconds - 86399) / 86400;
  const std::int64_t sod = ts.local_seconds - days * 86400;
  const auto date = detail::civil_from_days(days);
  char buf[40];
  const int n = std::snprintf(buf, sizeof buf, "%04lld-%02u-%02uT%02lld:%02lld:%02lld",
                              static_cast<long long>(date.year), date.month, date.day,
                              static_cast<long long>(sod / 3600), static_cast<long long>(sod / 60 % 60),
                              static_cast<long long>(sod % 60));
  std::string out(buf, static_cast<std::size_t>(n));
  if (ts.utc_offset_minutes == 0) return out + "Z";
  const int off = std::abs(ts.utc_offset_minutes);
  std::snprintf(buf, sizeof buf, "%c%02d:%02d", ts.utc_offset_minutes < 0 ? '-' : '+', off / 60, off % 60);
  return out + buf;
}

struct STGDataset {
  Tensor values;  // [T, N, d]
  std::vector<std::string> node_ids;
  int interval_minutes = 5;
  Timestamp start;
  std::optional<Tensor> static_adjacency;  // [N, N], non-negative

  std::size_t steps() const { return values.rank() == 3 ? values.dim(0) : 0; }
  std::size_t nodes() const { return values.rank() == 3 ? values.dim(1) : 0; }
  std::size_t features() const { return values.rank() == 3 ? values.dim(2) : 0; }
  Timestamp timestamp(std::size_t step) const {
    return start.plus_minutes(static_cast<std::int64_t>(step) * interval_minutes);
  }
  std::size_t steps_per_day() const { return static_cast<std::size_t>(std::max(1, 1440 / interval_minutes)); }
};

inline void validate_dataset(const STGDataset& ds) {
  if (ds.values.rank() != 3) throw DimensionError("dataset values must be [T,N,d], got " + shape_str(ds.values.shape()));
  if (ds.node_ids.size() != ds.nodes()) {
    throw DimensionError("dataset has " + std::to_string(ds.node_ids.size()) + " node ids for " +
                         std::to_string(ds.nodes()) + " nodes");
  }
  if (ds.interval_minutes <= 0) throw DomainError("dataset interval must be a positive number of minutes");
  for (double v : ds.values.values()) {
    if (!std::isfinite(v)) throw NumericError("dataset contains a non-finite value");
  }
  if (ds.static_adjacency) {
    if (ds.static_adjacency->shape() != Shape{ds.nodes(), ds.nodes()}) {
      throw DimensionError("static adjacency " + shape_str(ds.static_adjacency->shape()) + " does not match " +
                           std::to_string(ds.nodes()) + " nodes");
    }
    for (double v : ds.static_adjacency->values()) {
      if (!(v >= 0)) throw DomainError("static adjacency entries must be non-negative");
    }
  }
}

// Rows [start, start + len) of the cube; metadata carried along.
inline STGDataset time_slice(const STGDataset& ds, std::size_t start, std::size_t len) {
  if (start + len > ds.steps()) throw DimensionError("time_slice: range exceeds dataset length");
  STGDataset out;
  const std::size_t row = ds.nodes() * ds.features();
  auto first = ds.values.values().begin() + static_cast<std::ptrdiff_t>(start * row);
  out.values = Tensor({len, ds.nodes(), ds.features()}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(len * row)));
  out.node_ids = ds.node_ids;
  out.interval_minutes = ds.interval_minutes;
  out.start = ds.timestamp(start);
  out.static_adjacency = ds.static_adjacency;
  return out;
}

// Per-feature min/max over the training split.
struct NormalizationState {
  std::vector<double> min, max;
  std::vector<bool> degenerate;

  static NormalizationState fit(const STGDataset& train) {
    const std::size_t d = train.features();
    if (train.steps() == 0 || train.nodes() == 0) throw ContractError("normalization: empty training split");
    NormalizationState s;
    s.min.assign(d, std::numeric_limits<double>::infinity());
    s.max.assign(d, -std::numeric_limits<double>::infinity());
    const auto v = train.values.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::size_t k = i % d;
      s.min[k] = std::min(s.min[k], v[i]);
      s.max[k] = std::max(s.max[k], v[i]);
    }
    s.degenerate.resize(d);
    for (std::size_t k = 0; k < d; ++k) s.degenerate[k] = s.max[k] == s.min[k];
    return s;
  }

  std::size_t features() const { return min.size(); }

  // Applies to any tensor whose last axis is the feature axis.
  Tensor normalize(const Tensor& x) const {
    check(x);
    Tensor out(x.shape());
    auto o = out.mutable_values();
    const std::size_t d = features();
    for (std::size_t i = 0; i < o.size(); ++i) {
      const std::size_t k = i % d;
      o[i] = degenerate[k] ? 0.0 : (x[i] - min[k]) / (max[k] - min[k]);
    }
    return out;
  }

  Tensor denormalize(const Tensor& x) const {
    check(x);
    Tensor out(x.shape());
    auto o = out.mutable_values();
    const std::size_t d = features();
    for (std::size_t i = 0; i < o.size(); ++i) {
      const std::size_t k = i % d;
      o[i] = degenerate[k] ? min[k] : x[i] * (max[k] - min[k]) + min[k];
    }
    return out;
  }

  STGDataset normalize(const STGDataset& ds) const {
    STGDataset out = ds;
    out.values = normalize(ds.values);
    return out;
  }

  nlohmann::json to_json() const {
    return {{"min", min}, {"max", max}, {"degenerate", degenerate}};
  }
  static NormalizationState from_json(const nlohmann::json& j) {
    NormalizationState s;
    s.min = j.at("min").get<std::vector<double>>();
    s.max = j.at("max").get<std::vector<double>>();
    s.degenerate = j.at("degenerate").get<std::vector<bool>>();
    if (s.max.size() != s.min.size() || s.degenerate.size() != s.min.size()) {
      throw ContractError("normalization state: inconsistent lengths");
    }
    return s;
  }

 private:
  void check(const Tensor& x) const {
    if (x.rank() == 0 || x.shape().back() != features()) {
      throw DimensionError("normalization fitted for " + std::to_string(features()) + " features, got " +
                           shape_str(x.shape()));
    }
  }
};

struct DatasetSplits {
  STGDataset train, val, test;
  std::size_t val_start = 0, test_start = 0;  // offsets in the original cube
};

// Contiguous split at floor(r0 T) and floor((r0 + r1) T). Every part must
// hold at least one (p, k) window.
inline DatasetSplits split_dataset(const STGDataset& ds, std::size_t p, std::size_t k,
                                   std::array<double, 3> ratios = {0.6, 0.2, 0.2}) {
  for (double r : ratios) {
    if (!(r > 0)) throw DomainError("split ratios must be positive");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw DomainError("split ratios must sum to 1");
  const std::size_t t = ds.steps();
  // The small bias keeps products such as 0.6 * 100 from rounding below the integer.
  const auto cut = [t](double r) { return static_cast<std::size_t>(std::floor(r * static_cast<double>(t) + 1e-9)); };
  const std::size_t b1 = cut(ratios[0]);
  const std::size_t b2 = std::max(b1, cut(ratios[0] + ratios[1]));
  const std::size_t need = p + k;
  const std::size_t lens[3] = {b1, b2 - b1, t - b2};
  const char* names[3] = {"train", "val", "test"};
  for (int i = 0; i < 3; ++i) {
    if (lens[i] < need) {
      throw DomainError(std::string(names[i]) + " split has " + std::to_string(lens[i]) + " steps, fewer than p + k = " +
                        std::to_string(need) + " (dataset length " + std::to_string(t) + ")");
    }
  }
  return {time_slice(ds, 0, b1), time_slice(ds, b1, b2 - b1), time_slice(ds, b2, t - b2), b1, b2};
}

// A (history, target) pair viewing the split's storage directly.
struct Window {
  std::span<const double> history;  // [p, N, d]
  std::span<const double> target;   // [k, N, d]
  std::size_t start = 0;            // first history step within the split
  Timestamp last_observed;          // timestamp of history step p - 1
  Timestamp first_target;
};

class WindowIterator {
 public:
  WindowIterator(const STGDataset& split, std::size_t p, std::size_t k) : ds_(&split), p_(p), k_(k) {
    if (p == 0) throw ContractError("window_iterator: history length p must be at least 1");
    if (k == 0) throw ContractError("window_iterator: horizon k must be at least 1");
    if (split.values.rank() != 3) throw DimensionError("window_iterator: split values must be [T,N,d]");
  }

  std::size_t size() const { return ds_->steps() >= p_ + k_ ? ds_->steps() - p_ - k_ + 1 : 0; }
  std::size_t history() const { return p_; }
  std::size_t horizon() const { return k_; }

  Window operator[](std::size_t i) const {
    if (i >= size()) throw ContractError("window index out of range");
    const std::size_t row = ds_->nodes() * ds_->features();
    const auto v = ds_->values.values();
    return {v.subspan(i * row, p_ * row), v.subspan((i + p_) * row, k_ * row), i, ds_->timestamp(i + p_ - 1),
            ds_->timestamp(i + p_)};
  }

  // Copies the selected windows into [B, p, N, d] and [B, k, N, d] tensors.
  std::pair<Tensor, Tensor> batch(std::span<const std::size_t> indices) const {
    const std::size_t n = ds_->nodes(), d = ds_->features(), row = n * d;
    Tensor x({indices.size(), p_, n, d});
    Tensor y({indices.size(), k_, n, d});
    auto xv = x.mutable_values();
    auto yv = y.mutable_values();
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const Window w = (*this)[indices[b]];
      std::copy(w.history.begin(), w.history.end(), xv.begin() + static_cast<std::ptrdiff_t>(b * p_ * row));
      std::copy(w.target.begin(), w.target.end(), yv.begin() + static_cast<std::ptrdiff_t>(b * k_ * row));
    }
    return {std::move(x), std::move(y)};
  }

 private:
  const STGDataset* ds_;
  std::size_t p_, k_;
};

inline WindowIterator window_iterator(const STGDataset& split, std::size_t p, std::size_t k) {
  return WindowIterator(split, p, k);
}

enum class Scenario { rush, non_rush, weekend, non_weekend };

inline Scenario parse_scenario(std::string_view s) {
  if (s == "rush") return Scenario::rush;
  if (s == "non_rush") return Scenario::non_rush;
  if (s == "weekend") return Scenario::weekend;
  if (s == "non_weekend") return Scenario::non_weekend;
  throw ContractError("unknown scenario '" + std::string(s) + "' (expected rush, non_rush, weekend, non_weekend)");
}

inline const char* scenario_name(Scenario s) {
  switch (s) {
    case Scenario::rush: return "rush";
    case Scenario::non_rush: return "non_rush";
    case Scenario::weekend: return "weekend";
    case Scenario::non_weekend: return "non_weekend";
  }
  return "rush";
}

// Rush hours are [08:00, 11:00) and [16:00, 19:00) on weekdays.
inline bool in_scenario(const Timestamp& ts, Scenario s) {
  const bool weekend = ts.iso_weekday() >= 6;
  const std::int64_t m = ts.minute_of_day();
  const bool rush_clock = (m >= 8 * 60 && m < 11 * 60) || (m >= 16 * 60 && m < 19 * 60);
  switch (s) {
    case Scenario::rush: return !weekend && rush_clock;
    case Scenario::non_rush: return !weekend && !rush_clock;
    case Scenario::weekend: return weekend;
    case Scenario::non_weekend: return !weekend;
  }
  return false;
}

inline std::vector<bool> scenario_mask(std::span<const Timestamp> timestamps, Scenario s) {
  std::vector<bool> mask(timestamps.size());
  for (std::size_t i = 0; i < timestamps.size(); ++i) mask[i] = in_scenario(timestamps[i], s);
  return mask;
}

struct SyntheticConfig {
  std::size_t n_nodes = 20;
  std::size_t t_steps = 2000;
  std::size_t n_features = 1;
  int interval_minutes = 60;
  std::uint64_t seed = 0;
  double radius = 0.35;
  double diffusion = 0.3;
  double amplitude = 0.1;
  double noise_sigma = 0.01;
  Timestamp start = parse_rfc3339("2024-01-01T00:00:00Z");  // a Monday
  std::size_t max_retries = 10;
};

// Random geometric graph with self-loops in the unit square; returns the raw
// 0/1 matrix or nullopt when some node has no neighbour but itself.
inline std::optional<Tensor> random_geometric_graph(std::size_t n, double radius, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> px(n), py(n);
  for (std::size_t i = 0; i < n; ++i) {
    px[i] = unit(rng);
    py[i] = unit(rng);
  }
  Tensor adj({n, n});
  auto a = adj.mutable_values();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t degree = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = px[i] - px[j], dy = py[i] - py[j];
      if (dx * dx + dy * dy <= radius * radius) {
        a[i * n + j] = 1.0;
        degree += j != i;
      }
    }
    if (degree == 0 && n > 1) return std::nullopt;
  }
  return adj;
}

// x_{t+1} = (1 - c) x_t + c A x_t + amp sin(2 pi minute / 1440 + phi_i) + sigma eps.
inline STGDataset generate_synthetic(const SyntheticConfig& cfg, std::ostream* warn = &std::cerr) {
  if (cfg.n_nodes == 0 || cfg.t_steps == 0 || cfg.n_features == 0 || cfg.interval_minutes <= 0) {
    throw DomainError("synthetic: nodes, steps, features and interval must be positive");
  }
  if (!(cfg.radius > 0) || cfg.diffusion < 0 || cfg.diffusion > 1 || cfg.amplitude < 0 || cfg.noise_sigma < 0) {
    throw DomainError("synthetic: radius > 0, diffusion in [0,1], amplitude and noise >= 0 required");
  }
  std::mt19937_64 rng(cfg.seed);
  const std::size_t n = cfg.n_nodes, d = cfg.n_features;
  std::optional<Tensor> raw;
  for (std::size_t attempt = 0; attempt <= cfg.max_retries && !raw; ++attempt) {
    raw = random_geometric_graph(n, cfg.radius, rng);
    if (!raw && warn) {
      *warn << "warning: synthetic graph with radius " << cfg.radius << " has an isolated node, regenerating ("
            << attempt + 1 << "/" << cfg.max_retries << ")\n";
    }
  }
  if (!raw) {
    throw DomainError("synthetic: radius " + std::to_string(cfg.radius) + " left a node isolated after " +
                      std::to_string(cfg.max_retries) + " retries");
  }
  Tensor adj({n, n});
  {
    auto a = adj.mutable_values();
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) s += (*raw)[i * n + j];
      for (std::size_t j = 0; j < n; ++j) a[i * n + j] = (*raw)[i * n + j] / s;
    }
  }

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> phase(n * d);
  for (auto& ph : phase) ph = 2 * std::numbers::pi * unit(rng);
  std::vector<double> x(n * d), next(n * d);
  for (auto& v : x) v = unit(rng);

  STGDataset ds;
  ds.values = Tensor({cfg.t_steps, n, d});
  ds.interval_minutes = cfg.interval_minutes;
  ds.start = cfg.start;
  ds.static_adjacency = adj;
  for (std::size_t i = 0; i < n; ++i) ds.node_ids.push_back("n" + std::to_string(i));
  auto out = ds.values.mutable_values();
  const double c = cfg.diffusion;
  for (std::size_t t = 0; t < cfg.t_steps; ++t) {
    std::copy(x.begin(), x.end(), out.begin() + static_cast<std::ptrdiff_t>(t * n * d));
    const double day_angle = 2 * std::numbers::pi * static_cast<double>(ds.timestamp(t).minute_of_day()) / 1440.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < d; ++k) {
        double mix = 0;
        for (std::size_t j = 0; j < n; ++j) mix += adj[i * n + j] * x[j * d + k];
        double v = (1 - c) * x[i * d + k] + c * mix;
        if (cfg.amplitude > 0) v += cfg.amplitude * std::sin(day_angle + phase[i * d + k]);
        if (cfg.noise_sigma > 0) v += cfg.noise_sigma * gauss(rng);
        next[i * d + k] = v;
      }
    }
    x.swap(next);
  }
  return ds;
}

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace detail

// Long-format CSV: one row per (timestamp, node). Rows may come in any order
// but the grid must be complete and the timestamps evenly spaced.
inline STGDataset read_csv(std::istream& is, const std::string& source = "<stream>") {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string_view> header;
  std::string header_line;
  while (std::getline(is, line)) {
    ++line_no;
    const auto t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    header_line = std::string(t);
    break;
  }
  if (header_line.empty()) throw ContractError(source + ": missing header row");
  header = detail::split_csv_line(header_line);
  if (header.size() < 3 || detail::trim(header[0]) != "timestamp" || detail::trim(header[1]) != "node_id") {
    throw ContractError(source + ":" + std::to_string(line_no) +
                        ": header must be timestamp,node_id,feature_0,...");
  }
  const std::size_t d = header.size() - 2;
  for (std::size_t k = 0; k < d; ++k) {
    if (detail::trim(header[k + 2]) != "feature_" + std::to_string(k)) {
      throw ContractError(source + ":" + std::to_string(line_no) + ": expected column feature_" + std::to_string(k));
    }
  }

  struct Row {
    std::int64_t utc;
    std::size_t node;
    std::vector<double> values;
    std::size_t line;
  };
  std::vector<Row> rows;
  std::vector<std::string> node_ids;
  std::unordered_map<std::string, std::size_t> node_index;
  std::map<std::int64_t, Timestamp> stamps;
  while (std::getline(is, line)) {
    ++line_no;
    const auto t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto cells = detail::split_csv_line(t);
    const std::string where = source + ":" + std::to_string(line_no);
    if (cells.size() != d + 2) {
      throw ContractError(where + ": expected " + std::to_string(d + 2) + " cells, found " +
                          std::to_string(cells.size()));
    }
    Row r;
    r.line = line_no;
    try {
      const Timestamp ts = parse_rfc3339(detail::trim(cells[0]));
      r.utc = ts.utc_seconds();
      stamps.emplace(r.utc, ts);
      for (std::size_t k = 0; k < d; ++k) r.values.push_back(detail::parse_double(detail::trim(cells[k + 2])));
    } catch (const ContractError& e) {
      throw ContractError(where + ": " + e.what());
    }
    for (double v : r.values) {
      if (!std::isfinite(v)) throw ContractError(where + ": non-finite value");
    }
    const std::string id(detail::trim(cells[1]));
    if (id.empty()) throw ContractError(where + ": empty node_id");
    auto [it, inserted] = node_index.emplace(id, node_ids.size());
    if (inserted) node_ids.push_back(id);
    r.node = it->second;
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw ContractError(source + ": no data rows");

  std::vector<std::int64_t> times;
  for (const auto& [utc, ts] : stamps) times.push_back(utc);
  std::int64_t interval = 0;
  if (times.size() > 1) {
    interval = times[1] - times[0];
    for (std::size_t i = 2; i < times.size(); ++i) {
      if (times[i] - times[i - 1] != interval) {
        throw ContractError(source + ": timestamps are not evenly spaced (" + format_rfc3339(stamps[times[i - 1]]) +
                            " to " + format_rfc3339(stamps[times[i]]) + ")");
      }
    }
    if (interval % 60 != 0) throw ContractError(source + ": interval must be a whole number of minutes");
  }
  const std::size_t steps = times.size(), n = node_ids.size();
  std::unordered_map<std::int64_t, std::size_t> step_of;
  for (std::size_t i = 0; i < steps; ++i) step_of[times[i]] = i;

  STGDataset ds;
  ds.values = Tensor({steps, n, d});
  ds.node_ids = node_ids;
  ds.interval_minutes = interval > 0 ? static_cast<int>(interval / 60) : 5;
  ds.start = stamps.begin()->second;
  std::vector<std::size_t> seen(steps * n, 0);
  auto out = ds.values.mutable_values();
  for (const auto& r : rows) {
    const std::size_t cell = step_of[r.utc] * n + r.node;
    if (seen[cell]) {
      throw ContractError(source + ":" + std::to_string(r.line) + ": duplicate cell (" +
                          format_rfc3339(stamps[r.utc]) + ", " + node_ids[r.node] + "), first at line " +
                          std::to_string(seen[cell]));
    }
    seen[cell] = r.line;
    std::copy(r.values.begin(), r.values.end(), out.begin() + static_cast<std::ptrdiff_t>(cell * d));
  }
  for (std::size_t c = 0; c < seen.size(); ++c) {
    if (!seen[c]) {
      throw ContractError(source + ": missing cell (" + format_rfc3339(stamps[times[c / n]]) + ", " +
                          node_ids[c % n] + ")");
    }
  }
  return ds;
}

inline STGDataset load_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open dataset '" + path + "'");
  return read_csv(is, path);
}

inline void write_csv(std::ostream& os, const STGDataset& ds) {
  validate_dataset(ds);
  os << "timestamp,node_id";
  for (std::size_t k = 0; k < ds.features(); ++k) os << ",feature_" << k;
  os << '\n';
  const std::size_t n = ds.nodes(), d = ds.features();
  for (std::size_t t = 0; t < ds.steps(); ++t) {
    const std::string ts = format_rfc3339(ds.timestamp(t));
    for (std::size_t i = 0; i < n; ++i) {
      os << ts << ',' << ds.node_ids[i];
      for (std::size_t k = 0; k < d; ++k) os << ',' << detail::format_double(ds.values[(t * n + i) * d + k]);
      os << '\n';
    }
  }
}

inline void save_csv(const STGDataset& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_csv(os, ds);
  if (!os) throw IoError("write failed for '" + path + "'");
}

// Square matrix, one comma-separated row per line.
inline Tensor load_adjacency_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open adjacency '" + path + "'");
  std::vector<double> vals;
  std::size_t rows = 0, cols = 0, line_no = 0;
  std::string line;
  while (std::getline(is, line)) {
    ++line_no;
    const auto t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto cells = detail::split_csv_line(t);
    if (rows == 0) cols = cells.size();
    if (cells.size() != cols) throw ContractError(path + ":" + std::to_string(line_no) + ": ragged adjacency row");
    try {
      for (auto c : cells) vals.push_back(detail::parse_double(detail::trim(c)));
    } catch (const ContractError& e) {
      throw ContractError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    ++rows;
  }
  if (rows != cols || rows == 0) throw DimensionError(path + ": adjacency must be a non-empty square matrix");
  return Tensor({rows, cols}, std::move(vals));
}

inline void save_adjacency_csv(const Tensor& adj, const std::string& path) {
  if (adj.rank() != 2) throw DimensionError("save_adjacency_csv: expected a matrix");
  std::ofstream os(path);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  for (std::size_t i = 0; i < adj.dim(0); ++i) {
    for (std::size_t j = 0; j < adj.dim(1); ++j) os << (j ? "," : "") << detail::format_double(adj[i * adj.dim(1) + j]);
    os << '\n';
  }
}

// Binary cube: tensor container at `path`, metadata in `path + ".json"`.
inline void save_cube(const STGDataset& ds, const std::string& path) {
  validate_dataset(ds);
  save_tensor(path, ds.values);
  nlohmann::json meta = {{"node_ids", ds.node_ids},
                         {"interval_minutes", ds.interval_minutes},
                         {"start", format_rfc3339(ds.start)}};
  if (ds.static_adjacency) {
    meta["static_adjacency"] = std::vector<double>(ds.static_adjacency->values().begin(), ds.static_adjacency->values().end());
  }
  std::ofstream os(path + ".json");
  if (!os) throw IoError("cannot open '" + path + ".json' for writing");
  os << meta.dump(2) << '\n';
}

inline STGDataset load_cube(const std::string& path) {
  STGDataset ds;
  ds.values = load_tensor(path);
  std::ifstream is(path + ".json");
  if (!is) throw IoError("cannot open '" + path + ".json'");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(is);
    ds.node_ids = meta.at("node_ids").get<std::vector<std::string>>();
    ds.interval_minutes = meta.at("interval_minutes").get<int>();
    ds.start = parse_rfc3339(meta.at("start").get<std::string>());
    if (meta.contains("static_adjacency")) {
      const std::size_t n = ds.node_ids.size();
      ds.static_adjacency = Tensor({n, n}, meta["static_adjacency"].get<std::vector<double>>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ".json: " + e.what());
  }
  validate_dataset(ds);
  return ds;
}

}  // namespace stgm
