#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "attnembed/common.hpp"
#include "attnembed/rng.hpp"

namespace attnembed {

// Gaussian cluster generator: m unit-covariance clusters in R^d with
// orthogonal means of squared norm s, K samples each.
struct ClusterSpec {
  int clusters = 4;             // m
  int dim = 128;                // d
  double signal = 64.0;         // s, <mu_i, mu_j> = delta_ij * s
  int samples_per_cluster = 50; // K
  uint64_t seed = 42;

  int total() const { return clusters * samples_per_cluster; }

  void validate() const {
    if (clusters < 1) throw ConfigError("clusters: must be >= 1");
    if (clusters >= dim)
      throw ConfigError("clusters: need clusters < dim, got " + std::to_string(clusters) + " >= " +
                        std::to_string(dim));
    if (signal < 0.0) throw ConfigError("signal: must be >= 0");
    if (samples_per_cluster < 2) throw ConfigError("samples_per_cluster: must be >= 2");
  }
};

struct LabeledSamples {
  int clusters = 0;
  int dim = 0;
  int per_cluster = 0;
  std::vector<double> means;  // clusters x dim, mu_i = sqrt(s) * e_i
  std::vector<double> x;      // (clusters*per_cluster) x dim, cluster-major

  int total() const { return clusters * per_cluster; }
  int label(int i) const { return i / per_cluster; }
  const double* row(int i) const { return x.data() + static_cast<size_t>(i) * dim; }
  const double* mean_row(int c) const { return means.data() + static_cast<size_t>(c) * dim; }
};

inline LabeledSamples sample_clusters(const ClusterSpec& spec) {
  spec.validate();
  LabeledSamples out;
  out.clusters = spec.clusters;
  out.dim = spec.dim;
  out.per_cluster = spec.samples_per_cluster;
  out.means.assign(static_cast<size_t>(spec.clusters) * spec.dim, 0.0);
  const double root_s = std::sqrt(spec.signal);
  for (int c = 0; c < spec.clusters; ++c)
    out.means[static_cast<size_t>(c) * spec.dim + c] = root_s;

  Rng rng(spec.seed);
  out.x.assign(static_cast<size_t>(out.total()) * spec.dim, 0.0);
  for (int c = 0; c < spec.clusters; ++c) {
    Rng crng = rng.split(static_cast<uint64_t>(c));
    for (int k = 0; k < spec.samples_per_cluster; ++k) {
      double* row = out.x.data() + (static_cast<size_t>(c) * spec.samples_per_cluster + k) * spec.dim;
      for (int j = 0; j < spec.dim; ++j) row[j] = crng.normal();
      row[c] += root_s;
    }
  }
  return out;
}

struct DistanceStats {
  double within_mean = 0.0;
  double between_mean = 0.0;
  double within_se = 0.0;
  double between_se = 0.0;
  int64_t within_pairs = 0;
  int64_t between_pairs = 0;
};

namespace detail_theory {

inline DistanceStats pair_stats(const std::vector<double>& within, const std::vector<double>& between) {
  DistanceStats st;
  st.within_pairs = static_cast<int64_t>(within.size());
  st.between_pairs = static_cast<int64_t>(between.size());
  auto mean_se = [](const std::vector<double>& v, double& mean, double& se) {
    KahanSum s;
    for (double x : v) s.add(x);
    mean = s.value() / static_cast<double>(v.size());
    KahanSum q;
    for (double x : v) q.add((x - mean) * (x - mean));
    double var = q.value() / (static_cast<double>(v.size()) - 1.0);
    se = std::sqrt(var / static_cast<double>(v.size()));
  };
  mean_se(within, st.within_mean, st.within_se);
  mean_se(between, st.between_mean, st.between_se);
  return st;
}

// P(between < within) over all cross comparisons, by sorting the within set.
inline double misorder_rate(std::vector<double> within, const std::vector<double>& between) {
  std::sort(within.begin(), within.end());
  KahanSum count;
  for (double b : between) {
    auto it = std::upper_bound(within.begin(), within.end(), b);
    count.add(static_cast<double>(within.end() - it));
  }
  return count.value() / (static_cast<double>(within.size()) * static_cast<double>(between.size()));
}

}  // namespace detail_theory

// Unbiased pairwise squared-distance means, same cluster vs cross cluster.
inline DistanceStats raw_distance_stats(const LabeledSamples& s) {
  if (s.clusters < 2 || s.per_cluster < 2)
    throw ConfigError("raw_distance_stats: need >= 2 clusters with >= 2 samples each");
  const int n = s.total();
  std::vector<double> within, between;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double d2 = 0.0;
      const double* a = s.row(i);
      const double* b = s.row(j);
      for (int k = 0; k < s.dim; ++k) {
        const double c = a[k] - b[k];
        d2 += c * c;
      }
      (s.label(i) == s.label(j) ? within : between).push_back(d2);
    }
  return detail_theory::pair_stats(within, between);
}

// f(x) = (exp(lambda * <x, x_1>), ..., exp(lambda * <x, x_n>)) over the full
// anchor set. Components beyond double range raise rather than overflow.
inline std::vector<double> attention_representation(const std::vector<double>& x,
                                                    const LabeledSamples& anchors, double lambda) {
  if (lambda < 0.0) throw ConfigError("lambda: must be >= 0");
  if (static_cast<int>(x.size()) != anchors.dim)
    throw DimensionError("attention_representation: vector length " + std::to_string(x.size()) +
                         " != anchor dimension " + std::to_string(anchors.dim));
  const int n = anchors.total();
  std::vector<double> f(static_cast<size_t>(n));
  constexpr double kMaxExp = 709.0;  // log(DBL_MAX) minus margin
  for (int k = 0; k < n; ++k) {
    const double* a = anchors.row(k);
    double ip = 0.0;
    for (int j = 0; j < anchors.dim; ++j) ip += x[j] * a[j];
    const double logit = lambda * ip;
    if (logit > kMaxExp)
      throw NumericError("attention_representation: component " + std::to_string(k) +
                         " exceeds representable range at this lambda");
    f[static_cast<size_t>(k)] = std::exp(logit);
  }
  return f;
}

struct TrialStats {
  double raw_within = 0.0;
  double raw_between = 0.0;
  double repr_within = 0.0;
  double repr_between = 0.0;
  double relative_gap = 0.0;
  double raw_misorder = 0.0;
  double repr_misorder = 0.0;
};

struct SeparationReport {
  ClusterSpec spec;
  double lambda = 0.0;
  int trials = 0;
  bool include_pair_anchors = false;
  bool normalize_profiles = true;

  double raw_within_mean = 0.0, raw_within_se = 0.0;
  double raw_between_mean = 0.0, raw_between_se = 0.0;
  double repr_within_mean = 0.0, repr_within_se = 0.0;
  double repr_between_mean = 0.0, repr_between_se = 0.0;
  double relative_gap = 0.0, relative_gap_se = 0.0, relative_gap_lower95 = 0.0;
  double raw_misorder_rate = 0.0, raw_misorder_se = 0.0;
  double repr_misorder_rate = 0.0, repr_misorder_se = 0.0;

  std::vector<TrialStats> per_trial;
};

// Monte Carlo comparison of raw-space vs representation-space separation.
// Per trial: fresh samples, raw pair stats, then pair distances between the
// similarity profiles f(x_i) = exp(lambda * <x_i, x_k>) over the sample set.
// Logits are shifted by the trial-wide maximum before exponentiation, which
// keeps everything inside double range without touching ratios or orderings.
//
// Two defaults shape the profile distances; both carry flags to restore the
// literal full-vector form:
//  - a pair's own two anchor components are dropped (each point's self
//    component exp(lambda*<x,x>) is a heavy-tailed factor no other point
//    shares, and it drowns the cluster signal the remaining n-2 independent
//    anchors carry);
//  - profiles are L2-normalized per point before distances (the normalized
//    empirical kernel map), removing per-point scale noise.
inline SeparationReport separation_report(const ClusterSpec& spec, double lambda = 0.0,
                                          int trials = 200, bool include_pair_anchors = false,
                                          bool normalize_profiles = true) {
  spec.validate();
  if (trials < 30) throw ConfigError("trials: must be >= 30");
  if (lambda <= 0.0) lambda = 1.0 / std::sqrt(static_cast<double>(spec.dim));

  SeparationReport rep;
  rep.spec = spec;
  rep.lambda = lambda;
  rep.trials = trials;
  rep.include_pair_anchors = include_pair_anchors;
  rep.normalize_profiles = normalize_profiles;
  rep.per_trial.resize(static_cast<size_t>(trials));

  const int n = spec.total();
  std::vector<double> gram(static_cast<size_t>(n) * n);
  std::vector<double> f(static_cast<size_t>(n) * n);

  Rng root(spec.seed);
  for (int t = 0; t < trials; ++t) {
    ClusterSpec trial_spec = spec;
    trial_spec.seed = root.split(static_cast<uint64_t>(t)).seed();
    LabeledSamples s = sample_clusters(trial_spec);

    // raw pair distances
    std::vector<double> raw_within, raw_between;
    raw_within.reserve(static_cast<size_t>(n) * spec.samples_per_cluster / 2);
    raw_between.reserve(static_cast<size_t>(n) * n / 2);
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        const double* a = s.row(i);
        const double* b = s.row(j);
        double d2 = 0.0;
        for (int k = 0; k < s.dim; ++k) {
          const double c = a[k] - b[k];
          d2 += c * c;
        }
        (s.label(i) == s.label(j) ? raw_within : raw_between).push_back(d2);
      }

    for (int i = 0; i < n; ++i) {
      const double* a = s.row(i);
      for (int k = i; k < n; ++k) {
        const double* b = s.row(k);
        double ip = 0.0;
        for (int j = 0; j < s.dim; ++j) ip += a[j] * b[j];
        gram[static_cast<size_t>(i) * n + k] = ip;
        gram[static_cast<size_t>(k) * n + i] = ip;
      }
    }
    if (normalize_profiles) {
      // L2 normalization is invariant to per-row shifts, so each row can use
      // its own max logit for conditioning. Self components are dropped from
      // the profile (they are zeroed, not part of the norm).
      for (int i = 0; i < n; ++i) {
        double* fi = f.data() + static_cast<size_t>(i) * n;
        const double* gi = gram.data() + static_cast<size_t>(i) * n;
        double row_max = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < n; ++k)
          if (k != i) row_max = std::max(row_max, lambda * gi[k]);
        double nrm2 = 0.0;
        for (int k = 0; k < n; ++k) {
          fi[k] = (k == i) ? 0.0 : std::exp(lambda * gi[k] - row_max);
          nrm2 += fi[k] * fi[k];
        }
        const double inv = 1.0 / std::sqrt(nrm2);
        for (int k = 0; k < n; ++k) fi[k] *= inv;
      }
    } else {
      // Literal profiles need one shared shift so cross-row scales stay
      // comparable.
      double max_logit = -std::numeric_limits<double>::infinity();
      for (size_t i = 0; i < gram.size(); ++i) max_logit = std::max(max_logit, lambda * gram[i]);
      for (size_t i = 0; i < gram.size(); ++i) f[i] = std::exp(lambda * gram[i] - max_logit);
    }

    std::vector<double> repr_within, repr_between;
    repr_within.reserve(raw_within.size());
    repr_between.reserve(raw_between.size());
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        const double* fi = f.data() + static_cast<size_t>(i) * n;
        const double* fj = f.data() + static_cast<size_t>(j) * n;
        double d2 = 0.0;
        for (int k = 0; k < n; ++k) {
          if (!include_pair_anchors && (k == i || k == j)) continue;
          const double c = fi[k] - fj[k];
          d2 += c * c;
        }
        (s.label(i) == s.label(j) ? repr_within : repr_between).push_back(d2);
      }

    auto& ts = rep.per_trial[static_cast<size_t>(t)];
    auto raw_stats = detail_theory::pair_stats(raw_within, raw_between);
    auto repr_stats = detail_theory::pair_stats(repr_within, repr_between);
    ts.raw_within = raw_stats.within_mean;
    ts.raw_between = raw_stats.between_mean;
    ts.repr_within = repr_stats.within_mean;
    ts.repr_between = repr_stats.between_mean;
    ts.relative_gap = (repr_stats.between_mean - repr_stats.within_mean) / repr_stats.within_mean;
    ts.raw_misorder = detail_theory::misorder_rate(raw_within, raw_between);
    ts.repr_misorder = detail_theory::misorder_rate(repr_within, repr_between);
  }

  auto aggregate = [&](auto field, double& mean, double& se) {
    KahanSum s;
    for (const auto& ts : rep.per_trial) s.add(ts.*field);
    mean = s.value() / trials;
    KahanSum q;
    for (const auto& ts : rep.per_trial) q.add((ts.*field - mean) * (ts.*field - mean));
    se = std::sqrt(q.value() / (trials - 1.0) / trials);
  };
  aggregate(&TrialStats::raw_within, rep.raw_within_mean, rep.raw_within_se);
  aggregate(&TrialStats::raw_between, rep.raw_between_mean, rep.raw_between_se);
  aggregate(&TrialStats::repr_within, rep.repr_within_mean, rep.repr_within_se);
  aggregate(&TrialStats::repr_between, rep.repr_between_mean, rep.repr_between_se);
  aggregate(&TrialStats::relative_gap, rep.relative_gap, rep.relative_gap_se);
  aggregate(&TrialStats::raw_misorder, rep.raw_misorder_rate, rep.raw_misorder_se);
  aggregate(&TrialStats::repr_misorder, rep.repr_misorder_rate, rep.repr_misorder_se);
  rep.relative_gap_lower95 = rep.relative_gap - 1.645 * rep.relative_gap_se;
  return rep;
}

}  // namespace attnembed
