#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "attnembed/attn_embed.hpp"
#include "attnembed/gradcheck.hpp"

using namespace attnembed;

namespace {

EmbedConfig tiny_softmax_cfg() {
  EmbedConfig cfg;
  cfg.mode = EmbedMode::softmax;
  cfg.window_size = 4;
  cfg.stride = 4;
  cfg.use_landmarks = true;
  cfg.landmark_kernel = 8;
  cfg.landmark_stride = 8;  // G = 1 at lookback 8
  cfg.embed_layers = 1;
  cfg.embed_heads = 1;
  cfg.embed_dim = 4;
  cfg.out_dim = 6;
  cfg.ema_alpha = 0.7;
  return cfg;
}

// Symmetric eigenvalues via cyclic Jacobi rotations; oracle-quality only.
std::vector<double> jacobi_eigenvalues(std::vector<double> a, int n) {
  for (int sweep = 0; sweep < 200; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) off += a[i * n + j] * a[i * n + j];
    if (off < 1e-24) break;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (std::abs(apq) < 1e-18) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> eig(n);
  for (int i = 0; i < n; ++i) eig[i] = a[i * n + i];
  return eig;
}

}  // namespace

TEST_CASE("landmark counts follow the convolution formula") {
  EmbedConfig cfg;
  cfg.landmark_kernel = 48;
  cfg.landmark_stride = 48;
  REQUIRE(cfg.landmark_count(96) == 2);
  cfg.landmark_kernel = 96;
  cfg.landmark_stride = 96;
  REQUIRE(cfg.landmark_count(96) == 1);
  cfg.landmark_kernel = 97;
  REQUIRE_THROWS_AS(cfg.validate(96), ConfigError);
}

TEST_CASE("mean-pooling initialization turns a ramp into segment means") {
  EmbedConfig cfg;
  cfg.window_size = 10;
  cfg.stride = 10;
  cfg.landmark_kernel = 48;
  cfg.landmark_stride = 48;
  Embedder emb(cfg, 96, Rng(5));
  std::vector<double> ramp(96);
  for (int i = 0; i < 96; ++i) ramp[static_cast<size_t>(i)] = 0.25 * i - 3.0;
  Tensor lm = emb.compute_landmarks(Tensor::from({1, 96}, std::vector<double>(ramp)));
  REQUIRE(lm.shape() == Shape{1, 2});
  for (int g = 0; g < 2; ++g) {
    double mean = 0.0;
    for (int i = 0; i < 48; ++i) mean += ramp[static_cast<size_t>(g * 48 + i)];
    mean /= 48.0;
    REQUIRE(std::abs(lm.values()[g] - mean) < 1e-12);
  }
}

TEST_CASE("ema_smooth fixed points") {
  Tensor c = Tensor::full({5, 2}, 3.25);
  Tensor out = ema_smooth(c, 0.4);
  for (double v : out.values()) REQUIRE(v == 3.25);
}

TEST_CASE("softmax embedding widths and row-stochastic harvest") {
  EmbedConfig cfg;  // defaults: W=10, S=5, G=2 at L=96, La=3, Ha=4
  cfg.out_dim = 32;
  Embedder emb(cfg, 96, Rng(7));
  REQUIRE(emb.tokens() == 12);

  std::vector<double> u(96);
  Rng rng(3);
  for (auto& v : u) v = rng.uniform(-1, 1);
  auto res = emb.embed_series(u, true, true);
  REQUIRE(res.embeddings.shape() == Shape{1, emb.window_count(), 32});
  REQUIRE(res.acat.shape() == Shape{emb.window_count(), 3 * 4 * 12});

  // each harvested attention row sums to 1, so each window's acat sums to La*Ha
  for (int w = 0; w < emb.window_count(); ++w) {
    double s = 0.0;
    for (int j = 0; j < 144; ++j) s += res.acat.values()[static_cast<size_t>(w) * 144 + j];
    REQUIRE(std::abs(s - 12.0) < 1e-8);
  }

  // every bundle matrix is row-stochastic
  for (const auto& window_bundle : res.bundles[0]) {
    REQUIRE(window_bundle.mats.size() == 12);
    for (const auto& m : window_bundle.mats) {
      for (int r = 0; r < window_bundle.tokens; ++r) {
        double s = 0.0;
        for (int c2 = 0; c2 < window_bundle.tokens; ++c2) {
          const double v = m[static_cast<size_t>(r) * window_bundle.tokens + c2];
          REQUIRE(v >= 0.0);
          s += v;
        }
        REQUIRE(std::abs(s - 1.0) < 1e-10);
      }
    }
  }
}

TEST_CASE("softmax attention matches a straight-line oracle") {
  EmbedConfig cfg = tiny_softmax_cfg();
  Embedder emb(cfg, 8, Rng(99));
  std::vector<double> window = {0.5, -1.0, 0.25, 2.0};
  std::vector<double> landmarks = {0.75};
  auto [embedding, bundle] = emb.embed_window_softmax(window, landmarks);
  REQUIRE(embedding.shape() == Shape{6});
  REQUIRE(bundle.tokens == 5);

  const int t = 5, d = 4;
  const auto& liftw = emb.param("embed.lift.weight").values();
  const auto& liftb = emb.param("embed.lift.bias").values();
  const auto& pos = emb.param("embed.lift.pos").values();
  const auto& ln1g = emb.param("embed.attn.l0.ln1.gain").values();
  const auto& ln1o = emb.param("embed.attn.l0.ln1.offset").values();
  const auto& wq = emb.param("embed.attn.l0.wq").values();
  const auto& bq = emb.param("embed.attn.l0.bq").values();
  const auto& wk = emb.param("embed.attn.l0.wk").values();
  const auto& bk = emb.param("embed.attn.l0.bk").values();

  std::vector<double> tok = {0.75, 0.5, -1.0, 0.25, 2.0};
  std::vector<double> x(t * d), h(t * d), q(t * d), k(t * d);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < d; ++j) x[i * d + j] = tok[i] * liftw[j] + liftb[j] + pos[i * d + j];
  for (int i = 0; i < t; ++i) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < d; ++j) mean += x[i * d + j];
    mean /= d;
    for (int j = 0; j < d; ++j) var += (x[i * d + j] - mean) * (x[i * d + j] - mean);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (int j = 0; j < d; ++j) h[i * d + j] = ln1g[j] * (x[i * d + j] - mean) * inv + ln1o[j];
  }
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < d; ++j) {
      double aq = bq[j], ak = bk[j];
      for (int m = 0; m < d; ++m) {
        aq += h[i * d + m] * wq[m * d + j];
        ak += h[i * d + m] * wk[m * d + j];
      }
      q[i * d + j] = aq;
      k[i * d + j] = ak;
    }
  // EMA over local rows (start = G = 1)
  for (int i = 2; i < t; ++i)
    for (int j = 0; j < d; ++j) {
      q[i * d + j] = 0.7 * q[i * d + j] + 0.3 * q[(i - 1) * d + j];
      k[i * d + j] = 0.7 * k[i * d + j] + 0.3 * k[(i - 1) * d + j];
    }
  std::vector<double> attn(t * t);
  for (int i = 0; i < t; ++i) {
    double mx = -1e300;
    std::vector<double> row(t);
    for (int j = 0; j < t; ++j) {
      double s = 0.0;
      for (int m = 0; m < d; ++m) s += q[i * d + m] * k[j * d + m];
      row[j] = s / 2.0;  // sqrt(head_dim) = 2
      mx = std::max(mx, row[j]);
    }
    double denom = 0.0;
    for (int j = 0; j < t; ++j) {
      row[j] = std::exp(row[j] - mx);
      denom += row[j];
    }
    for (int j = 0; j < t; ++j) attn[i * t + j] = row[j] / denom;
  }
  const auto& mat = bundle.at(0, 0);
  for (int i = 0; i < t * t; ++i) REQUIRE(std::abs(mat[static_cast<size_t>(i)] - attn[static_cast<size_t>(i)]) < 1e-10);
}

TEST_CASE("kernel evaluation basics and Gram positive semidefiniteness") {
  Rng rng(8);
  std::vector<double> u(6), v(6);
  for (auto& x : u) x = rng.uniform(-2, 2);
  for (auto& x : v) x = rng.uniform(-2, 2);
  REQUIRE(kernel_eval(EmbedMode::rbf, u, u, 0.5, 0, 0) == 1.0);

  double ip = 0.0;
  for (int i = 0; i < 6; ++i) ip += u[i] * v[i];
  REQUIRE(std::abs(kernel_eval(EmbedMode::poly, u, v, 0, 1, 0.0) - ip / std::sqrt(6.0)) < 1e-12);

  // symmetry
  REQUIRE(kernel_eval(EmbedMode::rbf, u, v, 0.3, 0, 0) == kernel_eval(EmbedMode::rbf, v, u, 0.3, 0, 0));

  const int n = 16, dim = 5;
  std::vector<std::vector<double>> pts(n, std::vector<double>(dim));
  for (auto& p : pts)
    for (auto& x : p) x = rng.uniform(-1.5, 1.5);
  std::vector<double> gram(n * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) gram[i * n + j] = kernel_eval(EmbedMode::rbf, pts[i], pts[j], 0.7, 0, 0);
  auto eig = jacobi_eigenvalues(gram, n);
  for (double e : eig) REQUIRE(e >= -1e-8);
}

TEST_CASE("kernel embedding widths and self-similarity") {
  EmbedConfig cfg;
  cfg.mode = EmbedMode::rbf;
  cfg.out_dim = 16;
  Embedder emb(cfg, 96, Rng(21));
  // tie F_k to F_q so the query row equals its own key row
  emb.param("embed.fk.weight").values() = emb.param("embed.fq.weight").values();
  emb.param("embed.fk.bias").values() = emb.param("embed.fq.bias").values();

  std::vector<double> u(96);
  Rng rng(4);
  for (auto& v : u) v = rng.uniform(-1, 1);
  auto res = emb.embed_series(u, false, true);
  const int t = emb.tokens();
  REQUIRE(t == 12);
  REQUIRE(res.acat.shape() == Shape{emb.window_count(), 4 * 12});
  for (int w = 0; w < emb.window_count(); ++w)
    for (int h = 0; h < 4; ++h) {
      const double self_score = res.acat.values()[static_cast<size_t>(w) * 48 + h * t + (t - 1)];
      REQUIRE(std::abs(self_score - 1.0) < 1e-12);
    }
}

TEST_CASE("kernel scores match an explicit pairwise loop oracle") {
  for (EmbedMode mode : {EmbedMode::rbf, EmbedMode::poly}) {
    EmbedConfig cfg = tiny_softmax_cfg();
    cfg.mode = mode;
    cfg.embed_heads = 2;
    cfg.embed_dim = 4;
    cfg.poly_degree = 3;
    cfg.poly_coef = 0.5;
    Embedder emb(cfg, 8, Rng(77));
    std::vector<double> window = {1.0, -0.5, 0.0, 0.75};
    std::vector<double> landmarks = {-0.25};
    Tensor out = emb.embed_window_kernel(window, landmarks);
    REQUIRE(out.shape() == Shape{6});

    const std::vector<double> series = {1.0, -0.5, 0.0, 0.75, 1.0, -0.5, 0.0, 0.75};
    auto res = emb.embed_series_batch({series}, false, true);

    // landmark under the mean-pooling initialization: strided conv = segment mean
    double lm = 0.0;
    for (double v : series) lm += 0.125 * v;

    const int t = 5, d = 4, dh = 2;
    std::vector<double> tok = {lm, 1.0, -0.5, 0.0, 0.75};
    const auto& fqw = emb.param("embed.fq.weight").values();
    const auto& fqb = emb.param("embed.fq.bias").values();
    const auto& fkw = emb.param("embed.fk.weight").values();
    const auto& fkb = emb.param("embed.fk.bias").values();
    std::vector<double> q(t * d), k(t * d);
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < d; ++j) {
        q[i * d + j] = tok[i] * fqw[j] + fqb[j];
        k[i * d + j] = tok[i] * fkw[j] + fkb[j];
      }
    for (int i = 2; i < t; ++i)
      for (int j = 0; j < d; ++j) {
        q[i * d + j] = 0.7 * q[i * d + j] + 0.3 * q[(i - 1) * d + j];
        k[i * d + j] = 0.7 * k[i * d + j] + 0.3 * k[(i - 1) * d + j];
      }
    // oracle scores per head against the embed_window output expander
    std::vector<double> acat_oracle(2 * t);
    for (int h = 0; h < 2; ++h) {
      std::vector<double> qlast(dh), krow(dh);
      for (int j = 0; j < dh; ++j) qlast[j] = q[(t - 1) * d + h * dh + j];
      for (int i = 0; i < t; ++i) {
        for (int j = 0; j < dh; ++j) krow[j] = k[i * d + h * dh + j];
        if (mode == EmbedMode::rbf) {
          double d2 = 0.0;
          for (int j = 0; j < dh; ++j) d2 += (qlast[j] - krow[j]) * (qlast[j] - krow[j]);
          acat_oracle[h * t + i] = std::exp(-cfg.gamma() * d2);
        } else {
          double ip = 0.0;
          for (int j = 0; j < dh; ++j) ip += qlast[j] * krow[j];
          double base = ip / std::sqrt(double(dh)) + 0.5;
          acat_oracle[h * t + i] = base * base * base;
        }
      }
    }
    // first window of the series above is exactly `window`
    for (int i = 0; i < 2 * t; ++i)
      REQUIRE(std::abs(res.acat.values()[static_cast<size_t>(i)] - acat_oracle[static_cast<size_t>(i)]) < 1e-10);
  }
}

TEST_CASE("translation robustness of the rbf kernel") {
  Rng rng(15);
  std::vector<double> u(8), v(8), us(8), vs(8);
  for (int i = 0; i < 8; ++i) {
    u[i] = rng.uniform(-2, 2);
    v[i] = rng.uniform(-2, 2);
  }
  const double shift = rng.uniform(-5, 5);
  for (int i = 0; i < 8; ++i) {
    us[i] = u[i] + shift;
    vs[i] = v[i] + shift;
  }
  REQUIRE(std::abs(kernel_eval(EmbedMode::rbf, u, v, 0.4, 0, 0) -
                   kernel_eval(EmbedMode::rbf, us, vs, 0.4, 0, 0)) < 1e-10);
}

TEST_CASE("embed_series window count and landmark-free width") {
  EmbedConfig cfg;
  cfg.window_size = 10;
  cfg.stride = 10;
  cfg.out_dim = 8;
  Embedder emb(cfg, 96, Rng(1));
  std::vector<double> u(96, 0.5);
  auto res = emb.embed_series(u);
  REQUIRE(res.embeddings.extent(1) == 9);

  EmbedConfig free_cfg = cfg;
  free_cfg.use_landmarks = false;
  Embedder emb2(free_cfg, 96, Rng(1));
  auto res2 = emb2.embed_series(u, false, true);
  REQUIRE(res2.acat.shape() == Shape{9, 3 * 4 * 10});
}

TEST_CASE("identical parameters give bit-identical embeddings") {
  EmbedConfig cfg;
  cfg.out_dim = 12;
  Embedder emb(cfg, 96, Rng(42));
  std::vector<double> u(96);
  Rng rng(6);
  for (auto& v : u) v = rng.uniform(-3, 3);
  auto a = emb.embed_series(u);
  auto b = emb.embed_series(u);
  REQUIRE(a.embeddings.values() == b.embeddings.values());
}

TEST_CASE("alpha=1 EMA equals disabled EMA") {
  EmbedConfig on;
  on.ema_alpha = 1.0;
  on.use_ema = true;
  on.out_dim = 12;
  EmbedConfig off = on;
  off.use_ema = false;
  Embedder ea(on, 96, Rng(9));
  Embedder eb(off, 96, Rng(9));
  std::vector<double> u(96);
  Rng rng(10);
  for (auto& v : u) v = rng.uniform(-2, 2);
  auto ra = ea.embed_series(u);
  auto rb = eb.embed_series(u);
  REQUIRE(ra.embeddings.values() == rb.embeddings.values());
}

TEST_CASE("embedding gradients match finite differences on tiny configs") {
  for (EmbedMode mode : {EmbedMode::softmax, EmbedMode::rbf, EmbedMode::poly}) {
    EmbedConfig cfg = tiny_softmax_cfg();
    cfg.mode = mode;
    cfg.embed_heads = 2;
    cfg.out_dim = 4;
    Embedder emb(cfg, 8, Rng(123));
    std::vector<double> u = {0.3, -0.6, 0.9, 0.1, -0.4, 0.8, -0.2, 0.5};
    Rng wr(55);
    std::vector<double> w(static_cast<size_t>(emb.window_count()) * 4);
    for (auto& x : w) x = wr.uniform(-1, 1);
    auto loss = [&]() {
      auto res = emb.embed_series(u);
      Tensor flat = reshape(res.embeddings, {emb.window_count(), 4});
      return sum_all(mul(flat, Tensor::from({emb.window_count(), 4}, std::vector<double>(w))));
    };
    auto report = finite_difference_check(loss, emb.params());
    INFO("mode " << to_string(mode) << " worst " << report.worst_parameter);
    REQUIRE(report.max_relative_error <= 1e-4);
  }
}

TEST_CASE("kernel row normalization flag yields unit row sums for rbf") {
  EmbedConfig cfg;
  cfg.mode = EmbedMode::rbf;
  cfg.normalize_kernel_rows = true;
  cfg.out_dim = 8;
  Embedder emb(cfg, 96, Rng(33));
  std::vector<double> u(96);
  Rng rng(12);
  for (auto& v : u) v = rng.uniform(-1, 1);
  auto res = emb.embed_series(u, false, true);
  const int t = emb.tokens();
  for (int w = 0; w < emb.window_count(); ++w)
    for (int h = 0; h < 4; ++h) {
      double s = 0.0;
      for (int i = 0; i < t; ++i)
        s += res.acat.values()[(static_cast<size_t>(w) * 4 + h) * t + i];
      REQUIRE(std::abs(s - 1.0) < 1e-10);
    }
}
