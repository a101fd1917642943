#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "attnembed/common.hpp"
#include "attnembed/rng.hpp"

namespace attnembed {

// Numeric timestamps compare as numbers, anything else (ISO-8601 dates)
// lexicographically.
inline bool timestamp_less(const std::string& a, const std::string& b) {
  size_t ua = 0, ub = 0;
  double xa = 0.0, xb = 0.0;
  try {
    xa = std::stod(a, &ua);
    xb = std::stod(b, &ub);
  } catch (const std::exception&) {
    return a < b;
  }
  if (ua == a.size() && ub == b.size()) return xa < xb;
  return a < b;
}

// Timestamped multichannel series, row-major (rows x channels).
struct SeriesDataset {
  std::vector<std::string> timestamps;  // optional; empty or one per row
  std::vector<double> values;
  std::vector<std::string> channel_names;
  int rows = 0;
  int channels = 0;

  double at(int r, int c) const { return values[static_cast<size_t>(r) * channels + c]; }
  double& at(int r, int c) { return values[static_cast<size_t>(r) * channels + c]; }

  void validate() const {
    if (rows < 1) throw ConfigError("dataset: needs at least one row");
    if (channels < 1) throw ConfigError("dataset: needs at least one channel");
    if (static_cast<size_t>(rows) * channels != values.size())
      throw DimensionError("dataset: value count does not match rows x channels");
    for (double v : values)
      if (!std::isfinite(v)) throw NumericError("dataset: non-finite value");
    if (!timestamps.empty()) {
      if (static_cast<int>(timestamps.size()) != rows)
        throw DimensionError("dataset: timestamp count does not match rows");
      for (int i = 1; i < rows; ++i)
        if (!timestamp_less(timestamps[i - 1], timestamps[i]))
          throw ConfigError("dataset: timestamps must be strictly increasing (row " +
                            std::to_string(i + 1) + ")");
    }
  }
};

// Mixture of sinusoids plus cubic drift, sampled on x = t*delta. Component
// coefficients are either supplied explicitly or drawn from the documented
// ranges; noise_std < 0 requests 0.3x the standard deviation of the
// noiseless series.
struct SyntheticParams {
  int n_components = 10;
  int n_steps = 2000;
  double delta = 0.05;
  double noise_std = -1.0;
  uint64_t seed = 1;

  std::vector<double> amp, omega, phase;    // per-component sinusoid draws
  std::vector<double> c3, c2, c1, c0;       // per-component cubic draws

  bool drawn() const { return !amp.empty(); }

  void validate() const {
    if (n_components < 1) throw ConfigError("n_components: must be >= 1");
    if (n_steps < 1) throw ConfigError("n_steps: must be >= 1");
    if (!(delta > 0.0)) throw ConfigError("delta: must be positive");
  }
};

enum class SyntheticKind { f1, f2 };

namespace detail_data {

inline void draw_components(SyntheticParams& p) {
  Rng rng = Rng(p.seed).split(0x5eedc0de);
  p.amp.resize(p.n_components);
  p.omega.resize(p.n_components);
  p.phase.resize(p.n_components);
  p.c3.resize(p.n_components);
  p.c2.resize(p.n_components);
  p.c1.resize(p.n_components);
  p.c0.resize(p.n_components);
  for (int j = 0; j < p.n_components; ++j) {
    p.amp[j] = rng.uniform(0.5, 2.0);
    p.omega[j] = rng.uniform(0.1, 1.0);
    p.phase[j] = rng.uniform(0.0, 2.0 * M_PI);
    p.c3[j] = rng.uniform(-1e-9, 1e-9);
    p.c2[j] = rng.uniform(-1e-6, 1e-6);
    p.c1[j] = rng.uniform(-1e-3, 1e-3);
    p.c0[j] = rng.uniform(-1.0, 1.0);
  }
}

inline double noiseless_value(const SyntheticParams& p, int t) {
  const double x = t * p.delta;
  double v = 0.0;
  for (int j = 0; j < p.n_components; ++j) {
    v += p.amp[j] * std::sin(p.omega[j] * x + p.phase[j]);
    v += ((p.c3[j] * x + p.c2[j]) * x + p.c1[j]) * x + p.c0[j];
  }
  return v;
}

}  // namespace detail_data

inline SeriesDataset gen_synthetic(SyntheticKind kind, const SyntheticParams& params) {
  params.validate();
  SyntheticParams p = params;
  if (!p.drawn()) detail_data::draw_components(p);
  if (static_cast<int>(p.amp.size()) != p.n_components)
    throw ConfigError("n_components: does not match supplied component arrays");

  std::vector<double> base(static_cast<size_t>(p.n_steps));
  for (int t = 0; t < p.n_steps; ++t) base[static_cast<size_t>(t)] = detail_data::noiseless_value(p, t);

  double sigma = 0.0;
  if (kind == SyntheticKind::f2) {
    sigma = p.noise_std;
    if (sigma < 0.0) {
      double mean = 0.0;
      for (double v : base) mean += v;
      mean /= p.n_steps;
      double var = 0.0;
      for (double v : base) var += (v - mean) * (v - mean);
      var /= p.n_steps;
      sigma = 0.3 * std::sqrt(var);
    }
  }

  SeriesDataset ds;
  ds.rows = p.n_steps;
  ds.channels = 1;
  ds.channel_names = {kind == SyntheticKind::f1 ? "f1" : "f2"};
  ds.values = std::move(base);
  if (sigma > 0.0) {
    Rng noise = Rng(p.seed).split(0x401cebb5);
    for (auto& v : ds.values) v += sigma * noise.normal();
  }
  ds.timestamps.resize(static_cast<size_t>(p.n_steps));
  for (int t = 0; t < p.n_steps; ++t) ds.timestamps[static_cast<size_t>(t)] = std::to_string(t);
  return ds;
}

// CSV layout: header row, first column a timestamp, remaining columns
// decimal numbers, comma separated, '.' decimal point.
inline SeriesDataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  SeriesDataset ds;
  std::string line;
  int line_no = 0;
  if (!std::getline(in, line)) throw ParseError(path + ": empty file");
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  {
    std::stringstream ss(line);
    std::string cell;
    bool first = true;
    while (std::getline(ss, cell, ',')) {
      if (first) {
        first = false;
        continue;
      }
      ds.channel_names.push_back(cell);
    }
    if (ds.channel_names.empty())
      throw ParseError(path + ": header must name a timestamp column plus channels");
  }
  ds.channels = static_cast<int>(ds.channel_names.size());
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    int col = 0;
    while (std::getline(ss, cell, ',')) {
      if (col == 0) {
        ds.timestamps.push_back(cell);
      } else {
        if (col > ds.channels)
          throw ParseError(path + ": line " + std::to_string(line_no) + ": too many cells");
        size_t used = 0;
        double v = 0.0;
        try {
          v = std::stod(cell, &used);
        } catch (const std::exception&) {
          throw ParseError(path + ": line " + std::to_string(line_no) + ": non-numeric cell '" +
                           cell + "'");
        }
        if (used != cell.size())
          throw ParseError(path + ": line " + std::to_string(line_no) + ": non-numeric cell '" +
                           cell + "'");
        ds.values.push_back(v);
      }
      ++col;
    }
    if (col != ds.channels + 1)
      throw ParseError(path + ": line " + std::to_string(line_no) + ": expected " +
                       std::to_string(ds.channels + 1) + " cells, got " + std::to_string(col));
    ++ds.rows;
  }
  if (ds.rows == 0) throw ParseError(path + ": no data rows");
  return ds;
}

inline void save_csv(const SeriesDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "timestamp";
  for (const auto& name : ds.channel_names) out << ',' << name;
  out << '\n';
  out.precision(17);
  for (int r = 0; r < ds.rows; ++r) {
    out << (ds.timestamps.empty() ? std::to_string(r) : ds.timestamps[static_cast<size_t>(r)]);
    for (int c = 0; c < ds.channels; ++c) out << ',' << ds.at(r, c);
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path);
}

struct SplitSpec {
  double train_ratio = 0.6;
  double val_ratio = 0.2;
  double test_ratio = 0.2;
  std::vector<double> borders;  // optional fractional borders {b1, b2}
  bool lookback_warmup = true;

  void validate() const {
    if (!borders.empty()) {
      if (borders.size() != 2 || !(borders[0] > 0.0) || !(borders[1] > borders[0]) ||
          !(borders[1] < 1.0))
        throw ConfigError("borders: expected two increasing fractions in (0, 1)");
      return;
    }
    if (!(train_ratio > 0.0) || !(val_ratio > 0.0) || !(test_ratio > 0.0))
      throw ConfigError("split ratios: must be positive");
    if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9)
      throw ConfigError("split ratios: must sum to 1");
  }
};

struct SplitSegment {
  SeriesDataset data;
  int warmup_rows = 0;  // leading context rows copied from earlier in the series
};

struct SplitResult {
  SplitSegment train, val, test;
};

// Contiguous chronological split. With lookback_warmup, val and test are
// prefixed by the last L rows of the series before their start (context
// only; the partition itself stays exact).
inline SplitResult chronological_split(const SeriesDataset& ds, const SplitSpec& spec, int lookback) {
  spec.validate();
  if (lookback < 0) throw ConfigError("lookback: must be >= 0");
  const int n = ds.rows;
  int t1, t2;
  if (!spec.borders.empty()) {
    t1 = static_cast<int>(std::floor(n * spec.borders[0]));
    t2 = static_cast<int>(std::floor(n * spec.borders[1]));
  } else {
    t1 = static_cast<int>(std::floor(n * spec.train_ratio));
    t2 = static_cast<int>(std::floor(n * (spec.train_ratio + spec.val_ratio)));
  }
  if (t1 < 1 || t2 <= t1 || t2 >= n)
    throw ConfigError("split: a segment would be empty (borders " + std::to_string(t1) + ", " +
                      std::to_string(t2) + " on " + std::to_string(n) + " rows)");

  auto take = [&](int begin, int end, int warmup) {
    SplitSegment seg;
    seg.warmup_rows = warmup;
    const int start = begin - warmup;
    seg.data.rows = end - start;
    seg.data.channels = ds.channels;
    seg.data.channel_names = ds.channel_names;
    seg.data.values.assign(ds.values.begin() + static_cast<size_t>(start) * ds.channels,
                           ds.values.begin() + static_cast<size_t>(end) * ds.channels);
    if (!ds.timestamps.empty())
      seg.data.timestamps.assign(ds.timestamps.begin() + start, ds.timestamps.begin() + end);
    return seg;
  };

  SplitResult out;
  out.train = take(0, t1, 0);
  const int wv = spec.lookback_warmup ? std::min(lookback, t1) : 0;
  const int wt = spec.lookback_warmup ? std::min(lookback, t2) : 0;
  out.val = take(t1, t2, wv);
  out.test = take(t2, n, wt);
  return out;
}

// Sliding lookback/horizon windows over a univariate series.
struct SupervisedPairs {
  int lookback = 0;
  int horizon = 0;
  int stride = 1;
  bool too_short = false;            // set when the series cannot host one pair
  std::vector<int> input_start;      // original index of each pair's first input row
  std::vector<std::vector<double>> inputs;
  std::vector<std::vector<double>> targets;

  size_t size() const { return inputs.size(); }
};

inline SupervisedPairs make_supervised_pairs(const std::vector<double>& u, int lookback, int horizon,
                                             int stride = 1) {
  if (lookback < 1) throw ConfigError("lookback: must be >= 1");
  if (horizon < 1) throw ConfigError("horizon: must be >= 1");
  if (stride < 1) throw ConfigError("stride: must be >= 1");
  SupervisedPairs out;
  out.lookback = lookback;
  out.horizon = horizon;
  out.stride = stride;
  const int n = static_cast<int>(u.size());
  if (n < lookback + horizon) {
    out.too_short = true;
    return out;
  }
  const int count = (n - lookback - horizon) / stride + 1;
  out.inputs.reserve(static_cast<size_t>(count));
  out.targets.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int s = i * stride;
    out.input_start.push_back(s);
    out.inputs.emplace_back(u.begin() + s, u.begin() + s + lookback);
    out.targets.emplace_back(u.begin() + s + lookback, u.begin() + s + lookback + horizon);
  }
  return out;
}

}  // namespace attnembed
