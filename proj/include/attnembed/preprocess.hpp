#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "attnembed/common.hpp"
#include "attnembed/data.hpp"

namespace attnembed {

// Per-instance normalization statistics, restored on the way out.
struct InstanceStats {
  double mean = 0.0;
  double std = 1.0;  // clamped to >= eps
};

inline std::pair<std::vector<double>, InstanceStats> instance_normalize(
    const std::vector<double>& x, double eps = 1e-5) {
  if (!(eps > 0.0)) throw ConfigError("eps: must be positive");
  InstanceStats st;
  const int n = static_cast<int>(x.size());
  for (double v : x) st.mean += v;
  st.mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - st.mean) * (v - st.mean);
  var /= n;  // population variance
  st.std = std::max(std::sqrt(var), eps);
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - st.mean) / st.std;
  return {std::move(out), st};
}

inline std::vector<double> denormalize(const std::vector<double>& y_norm, const InstanceStats& st) {
  std::vector<double> out(y_norm.size());
  for (size_t i = 0; i < y_norm.size(); ++i) out[i] = y_norm[i] * st.std + st.mean;
  return out;
}

// Channel independence: one univariate series per column.
inline std::vector<std::vector<double>> channel_split(const SeriesDataset& ds) {
  std::vector<std::vector<double>> out(static_cast<size_t>(ds.channels));
  for (int c = 0; c < ds.channels; ++c) {
    out[static_cast<size_t>(c)].resize(static_cast<size_t>(ds.rows));
    for (int r = 0; r < ds.rows; ++r) out[static_cast<size_t>(c)][static_cast<size_t>(r)] = ds.at(r, c);
  }
  return out;
}

// Raw window tokens: N = floor((L - W) / S) + 1 contiguous slices; the
// trailing remainder shorter than one stride is dropped.
struct WindowBatch {
  int window_size = 0;
  int stride = 0;
  int source_length = 0;
  int count = 0;
  std::vector<double> windows;  // count x window_size, row-major

  const double* window(int i) const { return windows.data() + static_cast<size_t>(i) * window_size; }
};

inline WindowBatch window_tokenize(const std::vector<double>& u, int window_size, int stride) {
  const int L = static_cast<int>(u.size());
  if (window_size < 1) throw ConfigError("window_size: must be >= 1");
  if (stride < 1) throw ConfigError("stride: must be >= 1");
  if (window_size > L)
    throw ConfigError("window_size: " + std::to_string(window_size) + " exceeds series length " +
                      std::to_string(L));
  WindowBatch out;
  out.window_size = window_size;
  out.stride = stride;
  out.source_length = L;
  out.count = (L - window_size) / stride + 1;
  out.windows.resize(static_cast<size_t>(out.count) * window_size);
  for (int i = 0; i < out.count; ++i)
    for (int j = 0; j < window_size; ++j)
      out.windows[static_cast<size_t>(i) * window_size + j] = u[static_cast<size_t>(i) * stride + j];
  return out;
}

}  // namespace attnembed
