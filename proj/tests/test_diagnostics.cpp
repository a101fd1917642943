#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "attnembed/diagnostics.hpp"
#include "attnembed/rng.hpp"

using namespace attnembed;

TEST_CASE("identical token rows collapse the residual to zero") {
  Mat x(5, 3);
  for (int r = 0; r < 5; ++r) {
    x.at(r, 0) = 1.5;
    x.at(r, 1) = -2.0;
    x.at(r, 2) = 0.25;
  }
  REQUIRE(relative_residual_norm(x) == 0.0);
}

TEST_CASE("any rank-one matrix of the ones-outer-product form scores zero") {
  Rng rng(3);
  Mat x(7, 4);
  std::vector<double> row(4);
  for (auto& v : row) v = rng.uniform(-3, 3);
  for (int r = 0; r < 7; ++r)
    for (int c = 0; c < 4; ++c) x.at(r, c) = row[static_cast<size_t>(c)];
  REQUIRE(relative_residual_norm(x) < 1e-15);
}

TEST_CASE("residual matches the explicit column-mean oracle and stays in [0,1]") {
  Rng rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    Mat x(6, 5);
    for (auto& v : x.v) v = rng.uniform(-2, 2);
    const double got = relative_residual_norm(x);

    double res2 = 0.0, full2 = 0.0;
    for (int c = 0; c < 5; ++c) {
      double mean = 0.0;
      for (int r = 0; r < 6; ++r) mean += x.at(r, c);
      mean /= 6.0;
      for (int r = 0; r < 6; ++r) {
        res2 += (x.at(r, c) - mean) * (x.at(r, c) - mean);
        full2 += x.at(r, c) * x.at(r, c);
      }
    }
    REQUIRE(std::abs(got - std::sqrt(res2 / full2)) < 1e-12);
    REQUIRE(got >= 0.0);
    REQUIRE(got <= 1.0);
  }

  Mat zero(3, 3);
  REQUIRE(relative_residual_norm(zero) == 0.0);
}

TEST_CASE("rank_report covers four modes at every requested depth") {
  ModelConfig cfg;
  cfg.lookback = 24;
  cfg.horizon = 8;
  cfg.encoder_heads = 2;
  cfg.model_dim = 8;
  cfg.ffn_dim = 16;
  cfg.dropout = 0.0;
  cfg.seed = 5;
  cfg.embed.window_size = 6;
  cfg.embed.stride = 6;
  cfg.embed.landmark_kernel = 12;
  cfg.embed.landmark_stride = 12;
  cfg.embed.embed_layers = 1;
  cfg.embed.embed_heads = 2;
  cfg.embed.embed_dim = 8;

  Rng rng(2);
  std::vector<std::vector<double>> batch;
  for (int i = 0; i < 3; ++i) {
    std::vector<double> u(24);
    for (auto& v : u) v = std::sin(0.4 * (&v - u.data())) + 0.3 * rng.normal();
    batch.push_back(std::move(u));
  }

  auto profiles = rank_report(cfg, batch, {1, 2});
  REQUIRE(profiles.size() == 8);
  for (const auto& p : profiles) {
    REQUIRE(static_cast<int>(p.layer_values.size()) == p.depth);
    for (double v : p.layer_values) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
  }

  auto again = rank_report(cfg, batch, {1, 2});
  for (size_t i = 0; i < profiles.size(); ++i)
    REQUIRE(profiles[i].layer_values == again[i].layer_values);
}
