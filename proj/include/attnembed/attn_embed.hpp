#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "attnembed/common.hpp"
#include "attnembed/preprocess.hpp"
#include "attnembed/rng.hpp"
#include "attnembed/tensor.hpp"

namespace attnembed {

enum class EmbedMode { softmax, rbf, poly, patch };

inline std::string to_string(EmbedMode m) {
  switch (m) {
    case EmbedMode::softmax: return "softmax";
    case EmbedMode::rbf: return "rbf";
    case EmbedMode::poly: return "poly";
    case EmbedMode::patch: return "patch";
  }
  return "?";
}

inline EmbedMode embed_mode_from_string(const std::string& s) {
  if (s == "softmax") return EmbedMode::softmax;
  if (s == "rbf") return EmbedMode::rbf;
  if (s == "poly") return EmbedMode::poly;
  if (s == "patch") return EmbedMode::patch;
  throw ConfigError("mode: unknown embedding mode '" + s + "'");
}

struct EmbedConfig {
  EmbedMode mode = EmbedMode::softmax;
  int window_size = 10;        // W
  int stride = 5;              // S
  bool use_landmarks = true;
  int landmark_kernel = 48;    // k_g
  int landmark_stride = 48;    // s_g
  bool use_ema = true;
  double ema_alpha = 0.7;
  bool ema_include_landmarks = false;
  int embed_layers = 3;        // attention layers inside the embedding block
  int embed_heads = 4;
  int embed_dim = 16;          // d, per-token width inside the block
  int out_dim = 128;           // D, embedding width handed to the encoder
  double rbf_gamma = 0.0;      // <= 0 resolves to 1/head_dim
  int poly_degree = 2;
  double poly_coef = 1.0;
  bool normalize_kernel_rows = false;
  int kernel_proj_depth = 1;   // 1 = linear lift, 2 = one hidden layer

  int head_dim() const { return embed_dim / embed_heads; }
  double gamma() const { return rbf_gamma > 0.0 ? rbf_gamma : 1.0 / head_dim(); }
  int landmark_count(int lookback) const {
    return use_landmarks ? (lookback - landmark_kernel) / landmark_stride + 1 : 0;
  }
  int tokens_per_window(int lookback) const { return landmark_count(lookback) + window_size; }
  int window_count(int lookback) const { return (lookback - window_size) / stride + 1; }

  // pre-projection concatenation width handed to the output projection
  int acat_width(int lookback) const {
    const int t = tokens_per_window(lookback);
    switch (mode) {
      case EmbedMode::softmax: return embed_layers * embed_heads * t;
      case EmbedMode::rbf:
      case EmbedMode::poly: return embed_heads * t;
      case EmbedMode::patch: return window_size;
    }
    return 0;
  }

  void validate(int lookback) const {
    if (window_size < 1) throw ConfigError("window_size: must be >= 1");
    if (stride < 1) throw ConfigError("stride: must be >= 1");
    if (window_size > lookback)
      throw ConfigError("window_size: exceeds lookback " + std::to_string(lookback));
    if (out_dim < 1) throw ConfigError("out_dim: must be >= 1");
    if (mode == EmbedMode::patch) return;
    if (embed_layers < 1) throw ConfigError("embed_layers: must be >= 1");
    if (embed_heads < 1) throw ConfigError("embed_heads: must be >= 1");
    if (embed_dim % embed_heads != 0)
      throw ConfigError("embed_dim: must be divisible by embed_heads");
    if (!(ema_alpha > 0.0) || ema_alpha > 1.0)
      throw ConfigError("ema_alpha: must be in (0, 1], got " + std::to_string(ema_alpha));
    if (use_landmarks) {
      if (landmark_kernel < 1 || landmark_stride < 1)
        throw ConfigError("landmark_kernel/landmark_stride: must be >= 1");
      if (landmark_kernel > lookback)
        throw ConfigError("landmark_kernel: exceeds lookback " + std::to_string(lookback));
      if (landmark_count(lookback) < 1) throw ConfigError("landmark_kernel: yields zero landmarks");
    }
    if (mode == EmbedMode::rbf && rbf_gamma < 0.0) throw ConfigError("rbf_gamma: must be > 0");
    if (mode == EmbedMode::poly && poly_degree < 1) throw ConfigError("poly_degree: must be >= 1");
    if (kernel_proj_depth != 1 && kernel_proj_depth != 2)
      throw ConfigError("kernel_proj_depth: must be 1 or 2");
  }
};

// Plain snapshot of one window's attention matrices, [layer][head] order.
struct AttentionBundle {
  int layers = 0;
  int heads = 0;
  int tokens = 0;
  std::vector<std::vector<double>> mats;  // layers*heads entries, tokens x tokens row-major

  const std::vector<double>& at(int layer, int head) const {
    return mats[static_cast<size_t>(layer) * heads + head];
  }
};

struct EmbedResult {
  Tensor embeddings;  // (B, N, D)
  Tensor acat;        // (B*N, acat_width); pre-projection concatenation
  std::vector<std::vector<AttentionBundle>> bundles;  // [sample][window] when retained
};

// Scalar kernel used by the scoring variants.
inline double kernel_eval(EmbedMode kind, const std::vector<double>& u, const std::vector<double>& v,
                          double gamma, int degree, double coef) {
  if (u.size() != v.size()) throw DimensionError("kernel_eval: vector lengths differ");
  if (kind == EmbedMode::rbf) {
    if (!(gamma > 0.0)) throw ConfigError("rbf_gamma: must be > 0");
    double d2 = 0.0;
    for (size_t i = 0; i < u.size(); ++i) d2 += (u[i] - v[i]) * (u[i] - v[i]);
    return std::exp(-gamma * d2);
  }
  if (kind == EmbedMode::poly) {
    if (degree < 1) throw ConfigError("poly_degree: must be >= 1");
    double ip = 0.0;
    for (size_t i = 0; i < u.size(); ++i) ip += u[i] * v[i];
    double base = ip / std::sqrt(static_cast<double>(u.size())) + coef;
    double r = 1.0;
    for (int i = 0; i < degree; ++i) r *= base;
    return r;
  }
  throw ConfigError("kernel_eval: kind must be rbf or poly");
}

// Non-parametric smoothing of a token sequence (rows = time).
inline Tensor ema_smooth(const Tensor& x, double alpha) { return ema_time(x, alpha, 0); }

// Turns windows of a pre-processed series into embeddings built from
// attention weights (softmax mode), kernel similarity scores against the
// last token (rbf/poly), or a plain linear map of the raw window (patch).
class Embedder {
 public:
  Embedder(EmbedConfig cfg, int lookback, Rng init_rng) : cfg_(cfg), lookback_(lookback) {
    cfg_.validate(lookback_);
    init_params(init_rng);
  }

  const EmbedConfig& config() const { return cfg_; }
  int lookback() const { return lookback_; }
  int tokens() const { return cfg_.tokens_per_window(lookback_); }
  int window_count() const { return cfg_.window_count(lookback_); }
  int landmark_count() const { return cfg_.landmark_count(lookback_); }

  std::vector<NamedParam>& params() { return params_; }
  const std::vector<NamedParam>& params() const { return params_; }

  Tensor param(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p.tensor;
    throw ContractError("no parameter named " + name);
  }

  // Learnable strided convolution over the whole lookback series; shared by
  // every window of that series. series is (B, L); result (B, G).
  Tensor compute_landmarks(const Tensor& series) const {
    if (!cfg_.use_landmarks) throw ConfigError("use_landmarks: landmarks disabled");
    if (series.shape().back() != lookback_)
      throw DimensionError("compute_landmarks: series length != lookback");
    return conv1d_valid(series, param("embed.landmark.weight"), param("embed.landmark.bias"),
                        cfg_.landmark_stride);
  }

  // Embedding of a (B, L) input tensor -> (B, N, D). The input may sit on a
  // differentiable path (a learnable pre-embedding affine, for instance).
  EmbedResult embed_input(const Tensor& input, bool keep_bundles = false,
                          bool keep_acat = false) const {
    if (input.rank() != 2 || input.extent(1) != lookback_)
      throw DimensionError("embed_input: expected (B, " + std::to_string(lookback_) + "), got " +
                           shape_str(input.shape()));
    const int B = input.extent(0);
    const int N = window_count();
    const int W = cfg_.window_size;

    std::vector<Tensor> slices;
    slices.reserve(static_cast<size_t>(N));
    for (int i = 0; i < N; ++i)
      slices.push_back(reshape(slice_axis(input, 1, i * cfg_.stride, i * cfg_.stride + W), {B, 1, W}));
    Tensor windows = reshape(concat_axis(slices, 1), {B * N, W});

    Tensor tokens_raw = windows;
    if (cfg_.mode != EmbedMode::patch && cfg_.use_landmarks) {
      Tensor lm = compute_landmarks(input);               // (B, G)
      Tensor lm_rep = repeat_rows(lm, N);                 // (B*N, G)
      tokens_raw = concat_axis({lm_rep, windows}, 1);     // (B*N, G+W)
    }

    EmbedResult out;
    std::vector<AttentionBundle> flat_bundles;
    Tensor emb = embed_tokens(tokens_raw, keep_bundles ? &flat_bundles : nullptr,
                              keep_acat ? &out.acat : nullptr);
    out.embeddings = reshape(emb, {B, N, cfg_.out_dim});
    if (keep_bundles && flat_bundles.size() == static_cast<size_t>(B) * N) {
      out.bundles.resize(static_cast<size_t>(B));
      for (int b = 0; b < B; ++b)
        out.bundles[static_cast<size_t>(b)] =
            std::vector<AttentionBundle>(flat_bundles.begin() + static_cast<long>(b) * N,
                                         flat_bundles.begin() + static_cast<long>(b + 1) * N);
    }
    return out;
  }

  // Batched embedding of B normalized lookback series -> (B, N, D).
  EmbedResult embed_series_batch(const std::vector<std::vector<double>>& series,
                                 bool keep_bundles = false, bool keep_acat = false) const {
    const int B = static_cast<int>(series.size());
    if (B < 1) throw DimensionError("embed_series_batch: empty batch");
    std::vector<double> flat;
    flat.reserve(static_cast<size_t>(B) * lookback_);
    for (const auto& s : series) {
      if (static_cast<int>(s.size()) != lookback_)
        throw DimensionError("embed_series_batch: series length != lookback");
      flat.insert(flat.end(), s.begin(), s.end());
    }
    return embed_input(Tensor::from({B, lookback_}, std::move(flat)), keep_bundles, keep_acat);
  }

  EmbedResult embed_series(const std::vector<double>& u, bool keep_bundles = false,
                           bool keep_acat = false) const {
    return embed_series_batch({u}, keep_bundles, keep_acat);
  }

  // Single-window surfaces with explicit landmark values.
  std::pair<Tensor, AttentionBundle> embed_window_softmax(const std::vector<double>& window,
                                                          const std::vector<double>& landmarks) const {
    if (cfg_.mode != EmbedMode::softmax)
      throw ConfigError("mode: embed_window_softmax requires softmax mode");
    std::vector<AttentionBundle> bundles;
    Tensor emb = embed_tokens(window_tokens(window, landmarks), &bundles, nullptr);
    return {reshape(emb, {cfg_.out_dim}), bundles.at(0)};
  }

  Tensor embed_window_kernel(const std::vector<double>& window,
                             const std::vector<double>& landmarks) const {
    if (cfg_.mode != EmbedMode::rbf && cfg_.mode != EmbedMode::poly)
      throw ConfigError("mode: embed_window_kernel requires rbf or poly mode");
    return reshape(embed_tokens(window_tokens(window, landmarks), nullptr, nullptr), {cfg_.out_dim});
  }

 private:
  Tensor window_tokens(const std::vector<double>& window, const std::vector<double>& landmarks) const {
    if (static_cast<int>(window.size()) != cfg_.window_size)
      throw DimensionError("window: expected " + std::to_string(cfg_.window_size) + " values");
    if (static_cast<int>(landmarks.size()) != landmark_count())
      throw DimensionError("landmarks: expected " + std::to_string(landmark_count()) + " values");
    std::vector<double> tok(landmarks);
    tok.insert(tok.end(), window.begin(), window.end());
    const int t = static_cast<int>(tok.size());
    return Tensor::from({1, t}, std::move(tok));
  }

  void add_param(const std::string& name, Shape shape, Rng& rng, double scale) {
    std::vector<double> v(static_cast<size_t>(shape_size(shape)));
    for (auto& x : v) x = rng.uniform(-scale, scale);
    params_.push_back({name, Tensor::from(std::move(shape), std::move(v), true)});
  }

  void add_zeros(const std::string& name, Shape shape) {
    params_.push_back({name, Tensor::zeros(std::move(shape), true)});
  }

  void add_ones(const std::string& name, Shape shape) {
    params_.push_back({name, Tensor::full(std::move(shape), 1.0, true)});
  }

  static double glorot(int fan_in, int fan_out) {
    return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  }

  void init_params(Rng& rng) {
    const int d = cfg_.embed_dim;
    const int t = tokens();
    if (cfg_.mode == EmbedMode::patch) {
      add_param("embed.patch.weight", {cfg_.window_size, cfg_.out_dim}, rng,
                glorot(cfg_.window_size, cfg_.out_dim));
      add_zeros("embed.patch.bias", {cfg_.out_dim});
      return;
    }
    if (cfg_.use_landmarks) {
      // mean-pooling start: landmarks begin life as segment averages
      params_.push_back({"embed.landmark.weight",
                         Tensor::full({cfg_.landmark_kernel}, 1.0 / cfg_.landmark_kernel, true)});
      add_zeros("embed.landmark.bias", {1});
    }
    if (cfg_.mode == EmbedMode::softmax) {
      add_param("embed.lift.weight", {1, d}, rng, glorot(1, d));
      add_zeros("embed.lift.bias", {d});
      add_param("embed.lift.pos", {t, d}, rng, 0.1);
      for (int l = 0; l < cfg_.embed_layers; ++l) {
        const std::string p = "embed.attn.l" + std::to_string(l) + ".";
        add_ones(p + "ln1.gain", {d});
        add_zeros(p + "ln1.offset", {d});
        for (const char* nm : {"wq", "wk", "wv", "wo"})
          add_param(p + nm, {d, d}, rng, glorot(d, d));
        for (const char* nm : {"bq", "bk", "bv", "bo"}) add_zeros(p + nm, {d});
        add_ones(p + "ln2.gain", {d});
        add_zeros(p + "ln2.offset", {d});
        add_param(p + "ffn.w1", {d, 2 * d}, rng, glorot(d, 2 * d));
        add_zeros(p + "ffn.b1", {2 * d});
        add_param(p + "ffn.w2", {2 * d, d}, rng, glorot(2 * d, d));
        add_zeros(p + "ffn.b2", {d});
      }
    } else {
      add_param("embed.fq.weight", {1, d}, rng, glorot(1, d));
      add_zeros("embed.fq.bias", {d});
      add_param("embed.fk.weight", {1, d}, rng, glorot(1, d));
      add_zeros("embed.fk.bias", {d});
      if (cfg_.kernel_proj_depth == 2) {
        add_param("embed.fq2.weight", {d, d}, rng, glorot(d, d));
        add_zeros("embed.fq2.bias", {d});
        add_param("embed.fk2.weight", {d, d}, rng, glorot(d, d));
        add_zeros("embed.fk2.bias", {d});
      }
    }
    const int width = cfg_.acat_width(lookback_);
    add_param("embed.proj.weight", {width, cfg_.out_dim}, rng, glorot(width, cfg_.out_dim));
    add_zeros("embed.proj.bias", {cfg_.out_dim});
  }

  // Shared stack over raw scalar tokens (R, t) where R = B*N windows.
  Tensor embed_tokens(const Tensor& tokens_raw, std::vector<AttentionBundle>* bundles,
                      Tensor* acat_out) const {
    const int R = tokens_raw.extent(0);
    if (cfg_.mode == EmbedMode::patch) {
      Tensor emb = add_broadcast(matmul(tokens_raw, param("embed.patch.weight")),
                                 param("embed.patch.bias"));
      if (acat_out) *acat_out = tokens_raw;
      return emb;
    }
    const int t = tokens();
    const int dh = cfg_.head_dim();
    const int ema_start = cfg_.ema_include_landmarks ? 0 : landmark_count();
    Tensor tokens3 = reshape(tokens_raw, {R, t, 1});

    Tensor acat;
    if (cfg_.mode == EmbedMode::softmax) {
      Tensor x = add_broadcast(add_broadcast(matmul(tokens3, param("embed.lift.weight")),
                                             param("embed.lift.bias")),
                               param("embed.lift.pos"));
      std::vector<Tensor> harvested;
      std::vector<Tensor> full_attn;  // only filled when bundles are requested
      harvested.reserve(static_cast<size_t>(cfg_.embed_layers) * cfg_.embed_heads);
      for (int l = 0; l < cfg_.embed_layers; ++l) {
        const std::string p = "embed.attn.l" + std::to_string(l) + ".";
        Tensor h = layer_normalize(x, param(p + "ln1.gain"), param(p + "ln1.offset"));
        Tensor q = add_broadcast(matmul(h, param(p + "wq")), param(p + "bq"));
        Tensor k = add_broadcast(matmul(h, param(p + "wk")), param(p + "bk"));
        Tensor v = add_broadcast(matmul(h, param(p + "wv")), param(p + "bv"));
        if (cfg_.use_ema && cfg_.ema_alpha < 1.0) {
          q = ema_time(q, cfg_.ema_alpha, ema_start);
          k = ema_time(k, cfg_.ema_alpha, ema_start);
        }
        std::vector<Tensor> head_outs;
        head_outs.reserve(static_cast<size_t>(cfg_.embed_heads));
        for (int hh = 0; hh < cfg_.embed_heads; ++hh) {
          Tensor qh = slice_axis(q, 2, hh * dh, (hh + 1) * dh);
          Tensor kh = slice_axis(k, 2, hh * dh, (hh + 1) * dh);
          Tensor vh = slice_axis(v, 2, hh * dh, (hh + 1) * dh);
          Tensor scores = scale(matmul(qh, transpose_last2(kh)), 1.0 / std::sqrt(double(dh)));
          Tensor a = softmax_rows(scores);  // (R, t, t), row-stochastic
          harvested.push_back(slice_axis(a, 1, t - 1, t));
          if (bundles) full_attn.push_back(a);
          head_outs.push_back(matmul(a, vh));
        }
        Tensor attn = add_broadcast(matmul(concat_axis(head_outs, 2), param(p + "wo")),
                                    param(p + "bo"));
        x = add(x, attn);
        Tensor h2 = layer_normalize(x, param(p + "ln2.gain"), param(p + "ln2.offset"));
        Tensor f1 = gelu(add_broadcast(matmul(h2, param(p + "ffn.w1")), param(p + "ffn.b1")));
        Tensor f2 = add_broadcast(matmul(f1, param(p + "ffn.w2")), param(p + "ffn.b2"));
        x = add(x, f2);
      }
      if (bundles) {
        bundles->assign(static_cast<size_t>(R), AttentionBundle{});
        for (int r = 0; r < R; ++r) {
          auto& b = (*bundles)[static_cast<size_t>(r)];
          b.layers = cfg_.embed_layers;
          b.heads = cfg_.embed_heads;
          b.tokens = t;
          b.mats.resize(full_attn.size());
          for (size_t m = 0; m < full_attn.size(); ++m) {
            const auto& av = full_attn[m].values();
            b.mats[m].assign(av.begin() + static_cast<long>(r) * t * t,
                             av.begin() + static_cast<long>(r + 1) * t * t);
          }
        }
      }
      acat = reshape(concat_axis(harvested, 2), {R, cfg_.embed_layers * cfg_.embed_heads * t});
    } else {
      Tensor q = add_broadcast(matmul(tokens3, param("embed.fq.weight")), param("embed.fq.bias"));
      Tensor k = add_broadcast(matmul(tokens3, param("embed.fk.weight")), param("embed.fk.bias"));
      if (cfg_.kernel_proj_depth == 2) {
        q = add_broadcast(matmul(gelu(q), param("embed.fq2.weight")), param("embed.fq2.bias"));
        k = add_broadcast(matmul(gelu(k), param("embed.fk2.weight")), param("embed.fk2.bias"));
      }
      if (cfg_.use_ema && cfg_.ema_alpha < 1.0) {
        q = ema_time(q, cfg_.ema_alpha, ema_start);
        k = ema_time(k, cfg_.ema_alpha, ema_start);
      }
      std::vector<Tensor> head_scores;
      head_scores.reserve(static_cast<size_t>(cfg_.embed_heads));
      for (int hh = 0; hh < cfg_.embed_heads; ++hh) {
        Tensor qh = slice_axis(q, 2, hh * dh, (hh + 1) * dh);
        Tensor kh = slice_axis(k, 2, hh * dh, (hh + 1) * dh);
        Tensor q_last = slice_axis(qh, 1, t - 1, t);  // (R, 1, dh)
        Tensor scores;
        if (cfg_.mode == EmbedMode::rbf) {
          Tensor diff = sub_row_broadcast(kh, q_last);
          scores = exp_elem(scale(sum_last(mul(diff, diff)), -cfg_.gamma()));
        } else {
          Tensor ip = reshape(matmul(kh, transpose_last2(q_last)), {R, t});
          scores = pow_int(add_scalar(scale(ip, 1.0 / std::sqrt(double(dh))), cfg_.poly_coef),
                           cfg_.poly_degree);
        }
        if (cfg_.normalize_kernel_rows) scores = normalize_rows_l1(scores);
        head_scores.push_back(scores);
      }
      acat = concat_axis(head_scores, 1);  // (R, heads*t)
    }
    if (acat_out) *acat_out = acat;
    return add_broadcast(matmul(acat, param("embed.proj.weight")), param("embed.proj.bias"));
  }

  EmbedConfig cfg_;
  int lookback_;
  std::vector<NamedParam> params_;
};

}  // namespace attnembed
