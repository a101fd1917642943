#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "attnembed/data.hpp"
#include "attnembed/forecaster.hpp"
#include "attnembed/preprocess.hpp"

namespace attnembed {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 128;
  int max_epochs = 100;
  int patience = 3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t seed = 42;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate: must be positive");
    if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
    if (max_epochs < 1) throw ConfigError("max_epochs: must be >= 1");
    if (patience < 0) throw ConfigError("patience: must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("beta1/beta2: must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("eps: must be positive");
  }
};

struct Metrics {
  double mse = 0.0;
  double mae = 0.0;
  std::vector<double> per_horizon_mse;  // optional breakdown
};

inline double mse(const std::vector<double>& pred, const std::vector<double>& target) {
  if (pred.size() != target.size()) throw DimensionError("mse: length mismatch");
  if (pred.empty()) throw DimensionError("mse: empty inputs");
  double acc = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const double r = pred[i] - target[i];
    acc += r * r;
  }
  return acc / static_cast<double>(pred.size());
}

inline double mae(const std::vector<double>& pred, const std::vector<double>& target) {
  if (pred.size() != target.size()) throw DimensionError("mae: length mismatch");
  if (pred.empty()) throw DimensionError("mae: empty inputs");
  double acc = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred[i] - target[i]);
  return acc / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamSlot {
  std::vector<double> m, v;
};

struct AdamState {
  std::vector<AdamSlot> slots;
  int64_t t = 0;
};

// Bias-corrected moment update for one tensor.
inline void adam_update(std::vector<double>& values, const std::vector<double>& grads, AdamSlot& slot,
                        int64_t t, const TrainConfig& cfg) {
  if (t < 1) throw ContractError("adam_update: step index must be >= 1");
  if (slot.m.size() != values.size()) {
    slot.m.assign(values.size(), 0.0);
    slot.v.assign(values.size(), 0.0);
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (size_t i = 0; i < values.size(); ++i) {
    const double g = i < grads.size() ? grads[i] : 0.0;
    slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
    slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = slot.m[i] / bc1;
    const double vhat = slot.v[i] / bc2;
    values[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

// One optimizer step over every parameter, consuming accumulated gradients.
inline void adam_step(std::vector<NamedParam>& params, AdamState& state, const TrainConfig& cfg) {
  if (state.slots.size() != params.size()) state.slots.resize(params.size());
  ++state.t;
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.tensor.requires_grad()) continue;
    adam_update(p.tensor.values(), p.tensor.grad(), state.slots[i], state.t, cfg);
  }
}

// ---------------------------------------------------------------------------
// Supervised pair preparation

// One training pair with its normalization statistics; loss runs on the
// normalized scale, metrics restore the raw one.
struct TrainPair {
  std::vector<double> input_norm;
  std::vector<double> target_norm;
  std::vector<double> target_raw;
  InstanceStats stats;
};

struct PairSet {
  int lookback = 0;
  int horizon = 0;
  std::vector<TrainPair> pairs;

  size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

// Pools pairs from every channel of a split segment; lookback statistics
// come from each pair's input window only.
inline PairSet prepare_pairs(const SeriesDataset& segment, int lookback, int horizon, int stride = 1) {
  PairSet out;
  out.lookback = lookback;
  out.horizon = horizon;
  for (const auto& channel : channel_split(segment)) {
    auto sp = make_supervised_pairs(channel, lookback, horizon, stride);
    for (size_t i = 0; i < sp.size(); ++i) {
      TrainPair p;
      auto [xn, st] = instance_normalize(sp.inputs[i]);
      p.input_norm = std::move(xn);
      p.stats = st;
      p.target_raw = sp.targets[i];
      p.target_norm.resize(p.target_raw.size());
      for (size_t j = 0; j < p.target_raw.size(); ++j)
        p.target_norm[j] = (p.target_raw[j] - st.mean) / st.std;
      out.pairs.push_back(std::move(p));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  int epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;      // 1-based epoch index of the restored checkpoint
  double best_val = 0.0;
};

namespace detail_train {

inline double validation_mse(const Model& model, const PairSet& set, int batch_size) {
  double sse = 0.0;
  int64_t count = 0;
  const int horizon = set.horizon;
  for (size_t start = 0; start < set.size(); start += static_cast<size_t>(batch_size)) {
    const size_t stop = std::min(set.size(), start + static_cast<size_t>(batch_size));
    std::vector<std::vector<double>> inputs;
    inputs.reserve(stop - start);
    for (size_t i = start; i < stop; ++i) inputs.push_back(set.pairs[i].input_norm);
    auto fwd = model.forward_normalized(inputs);
    const auto& pv = fwd.pred_norm.values();
    for (size_t i = start; i < stop; ++i) {
      const double* row = pv.data() + (i - start) * static_cast<size_t>(horizon);
      const auto& tgt = set.pairs[i].target_norm;
      for (int j = 0; j < horizon; ++j) {
        const double r = row[j] - tgt[static_cast<size_t>(j)];
        sse += r * r;
      }
      count += horizon;
    }
  }
  return sse / static_cast<double>(count);
}

}  // namespace detail_train

// Minimizes MSE on normalized targets with Adam, early-stopping on the
// validation MSE; the best-validation parameter set is restored before
// returning. Fully deterministic in cfg.seed (shuffling, dropout).
inline TrainResult train_model(Model& model, const PairSet& train, const PairSet& val,
                               const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw ConfigError("train split: no supervised pairs");
  if (val.empty()) throw ConfigError("val split: no supervised pairs");

  Rng shuffle_rng = Rng(cfg.seed).split(1);
  Rng dropout_rng = Rng(cfg.seed).split(2);
  AdamState adam;

  TrainResult result;
  std::vector<std::vector<double>> best_values;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int since_best = 0;

  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double train_sse = 0.0;
    int64_t train_count = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      const int b = static_cast<int>(stop - start);
      std::vector<std::vector<double>> inputs;
      std::vector<double> targets;
      inputs.reserve(static_cast<size_t>(b));
      targets.reserve(static_cast<size_t>(b) * train.horizon);
      for (size_t i = start; i < stop; ++i) {
        const auto& p = train.pairs[static_cast<size_t>(order[i])];
        inputs.push_back(p.input_norm);
        targets.insert(targets.end(), p.target_norm.begin(), p.target_norm.end());
      }
      auto fwd = model.forward_normalized(inputs, true, &dropout_rng);
      Tensor target = Tensor::from({b, train.horizon}, std::move(targets));
      Tensor diff = sub(fwd.pred_norm, target);
      Tensor loss = mean_all(mul(diff, diff));
      const double loss_value = loss.item();
      if (!std::isfinite(loss_value))
        throw NumericError("train_model: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(start / static_cast<size_t>(cfg.batch_size)));
      for (auto& p : model.params()) p.tensor.zero_grad();
      backward(loss);
      adam_step(model.params(), adam, cfg);
      train_sse += loss_value * b * train.horizon;
      train_count += static_cast<int64_t>(b) * train.horizon;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_mse = train_sse / static_cast<double>(train_count);
    rec.val_mse = detail_train::validation_mse(model, val, cfg.batch_size);
    result.history.push_back(rec);

    if (rec.val_mse < best_val) {
      best_val = rec.val_mse;
      best_epoch = epoch;
      since_best = 0;
      best_values.clear();
      for (const auto& p : model.params()) best_values.push_back(p.tensor.values());
    } else {
      ++since_best;
      if (since_best > cfg.patience) break;
    }
  }

  if (!best_values.empty())
    for (size_t i = 0; i < model.params().size(); ++i)
      model.params()[i].tensor.values() = best_values[i];
  result.best_epoch = best_epoch;
  result.best_val = best_val;
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  Metrics denorm;  // restored scale vs raw targets
  Metrics norm;    // normalized scale, the training objective
};

inline EvalReport evaluate_model(const Model& model, const PairSet& test, int batch_size = 128,
                                 bool per_horizon = false) {
  if (test.empty()) throw ConfigError("test split: no supervised pairs");
  const int horizon = test.horizon;
  EvalReport rep;
  double sse_d = 0.0, sae_d = 0.0, sse_n = 0.0, sae_n = 0.0;
  std::vector<double> horizon_sse(static_cast<size_t>(horizon), 0.0);
  int64_t count = 0;
  for (size_t start = 0; start < test.size(); start += static_cast<size_t>(batch_size)) {
    const size_t stop = std::min(test.size(), start + static_cast<size_t>(batch_size));
    std::vector<std::vector<double>> inputs;
    inputs.reserve(stop - start);
    for (size_t i = start; i < stop; ++i) inputs.push_back(test.pairs[i].input_norm);
    auto fwd = model.forward_normalized(inputs);
    const auto& pv = fwd.pred_norm.values();
    for (size_t i = start; i < stop; ++i) {
      const auto& p = test.pairs[i];
      const double* row = pv.data() + (i - start) * static_cast<size_t>(horizon);
      for (int j = 0; j < horizon; ++j) {
        const double pn = row[j];
        const double pd = pn * p.stats.std + p.stats.mean;
        const double rn = pn - p.target_norm[static_cast<size_t>(j)];
        const double rd = pd - p.target_raw[static_cast<size_t>(j)];
        sse_n += rn * rn;
        sae_n += std::abs(rn);
        sse_d += rd * rd;
        sae_d += std::abs(rd);
        horizon_sse[static_cast<size_t>(j)] += rd * rd;
      }
      count += horizon;
    }
  }
  const double n = static_cast<double>(count);
  rep.denorm.mse = sse_d / n;
  rep.denorm.mae = sae_d / n;
  rep.norm.mse = sse_n / n;
  rep.norm.mae = sae_n / n;
  if (per_horizon) {
    const double rows = n / horizon;
    for (auto& v : horizon_sse) v /= rows;
    rep.denorm.per_horizon_mse = std::move(horizon_sse);
  }
  return rep;
}

// Repeat-last-value reference predictor on the raw scale.
inline Metrics evaluate_naive_last(const PairSet& test) {
  if (test.empty()) throw ConfigError("test split: no supervised pairs");
  Metrics m;
  int64_t count = 0;
  for (const auto& p : test.pairs) {
    const double last = p.input_norm.back() * p.stats.std + p.stats.mean;
    for (double t : p.target_raw) {
      const double r = last - t;
      m.mse += r * r;
      m.mae += std::abs(r);
      ++count;
    }
  }
  m.mse /= static_cast<double>(count);
  m.mae /= static_cast<double>(count);
  return m;
}

// ---------------------------------------------------------------------------
// Ablation runner

struct AblationEntry {
  std::string variant;  // full | no_ema | no_landmark
  EvalReport eval;
  TrainResult train;
  int acat_width = 0;
};

struct AblationReport {
  std::vector<AblationEntry> entries;
};

// Trains {full, no_ema, no_landmark} under identical seeds and budget.
inline AblationReport run_ablation(const ModelConfig& base, const PairSet& train, const PairSet& val,
                                   const PairSet& test, const TrainConfig& tcfg) {
  if (!base.embed.use_ema || !base.embed.use_landmarks)
    throw ConfigError("ablation: base config must enable both use_ema and use_landmarks");
  AblationReport report;
  for (const std::string variant : {"full", "no_ema", "no_landmark"}) {
    ModelConfig cfg = base;
    if (variant == "no_ema") cfg.embed.use_ema = false;
    if (variant == "no_landmark") cfg.embed.use_landmarks = false;
    Model model(cfg);
    AblationEntry entry;
    entry.variant = variant;
    entry.acat_width = model.config().embed.acat_width(cfg.lookback);
    entry.train = train_model(model, train, val, tcfg);
    entry.eval = evaluate_model(model, test, tcfg.batch_size);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace attnembed
