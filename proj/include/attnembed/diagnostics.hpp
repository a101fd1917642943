#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "attnembed/forecaster.hpp"
#include "attnembed/training.hpp"

namespace attnembed {

// Distance of a token matrix from its best rank-one approximation of the
// form 1*x^T: the column-mean row is subtracted and the Frobenius norm of
// what remains is compared against the matrix norm.
inline double relative_residual_norm(const Mat& x) {
  if (x.rows < 1 || x.cols < 1) throw DimensionError("relative_residual_norm: empty matrix");
  std::vector<double> col_mean(static_cast<size_t>(x.cols), 0.0);
  for (int r = 0; r < x.rows; ++r)
    for (int c = 0; c < x.cols; ++c) col_mean[static_cast<size_t>(c)] += x.at(r, c);
  for (auto& v : col_mean) v /= x.rows;
  double res2 = 0.0, full2 = 0.0;
  for (int r = 0; r < x.rows; ++r)
    for (int c = 0; c < x.cols; ++c) {
      const double v = x.at(r, c);
      const double d = v - col_mean[static_cast<size_t>(c)];
      res2 += d * d;
      full2 += v * v;
    }
  if (full2 == 0.0) return 0.0;
  return std::sqrt(res2) / std::sqrt(full2);
}

struct RankProfile {
  std::string mode;
  int depth = 0;
  std::vector<double> layer_values;  // one relative residual norm per encoder layer
};

// Profile of one forward pass: token matrices recorded after each layer.
inline RankProfile residual_profile(const std::vector<Mat>& layer_tokens) {
  if (layer_tokens.empty()) throw DimensionError("residual_profile: no layers recorded");
  RankProfile p;
  p.depth = static_cast<int>(layer_tokens.size());
  p.layer_values.reserve(layer_tokens.size());
  for (const auto& m : layer_tokens) p.layer_values.push_back(relative_residual_norm(m));
  return p;
}

// Per-layer residual profiles for every embedding mode at the requested
// encoder depths, averaged over a batch of lookback windows. Models are
// freshly initialized from base.seed; when train/val sets and a training
// config are supplied each model is trained to its best-validation
// checkpoint first.
inline std::vector<RankProfile> rank_report(const ModelConfig& base,
                                            const std::vector<std::vector<double>>& batch,
                                            const std::vector<int>& depths,
                                            const PairSet* train = nullptr,
                                            const PairSet* val = nullptr,
                                            const TrainConfig* tcfg = nullptr) {
  if (batch.empty()) throw ConfigError("rank_report: empty batch");
  if (depths.empty()) throw ConfigError("rank_report: no depths requested");
  const bool trained = train != nullptr && val != nullptr && tcfg != nullptr;
  std::vector<RankProfile> out;
  for (EmbedMode mode : {EmbedMode::patch, EmbedMode::softmax, EmbedMode::rbf, EmbedMode::poly}) {
    for (int depth : depths) {
      ModelConfig cfg = base;
      cfg.embed.mode = mode;
      cfg.encoder_layers = depth;
      Model model(cfg);
      if (trained) train_model(model, *train, *val, *tcfg);
      auto fo = model.forward(batch, true);
      RankProfile profile;
      profile.mode = to_string(mode);
      profile.depth = depth;
      profile.layer_values.assign(static_cast<size_t>(depth), 0.0);
      for (int l = 0; l < depth; ++l) {
        double acc = 0.0;
        for (const auto& m : fo.encoder_tokens[static_cast<size_t>(l)])
          acc += relative_residual_norm(m);
        profile.layer_values[static_cast<size_t>(l)] = acc / static_cast<double>(batch.size());
      }
      out.push_back(std::move(profile));
    }
  }
  return out;
}

}  // namespace attnembed
