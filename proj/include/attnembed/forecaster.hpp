#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "attnembed/attn_embed.hpp"
#include "attnembed/preprocess.hpp"

namespace attnembed {

struct ModelConfig {
  EmbedConfig embed;
  int lookback = 96;    // L
  int horizon = 96;     // T
  int encoder_layers = 3;
  int encoder_heads = 8;
  int model_dim = 128;  // D, equals embed.out_dim
  int ffn_dim = 256;
  double dropout = 0.2;
  bool instance_affine = false;  // learnable gain/offset after instance normalization
  uint64_t seed = 42;

  int window_count() const { return embed.window_count(lookback); }

  void validate() const {
    if (horizon < 1) throw ConfigError("horizon: must be >= 1");
    if (encoder_layers < 1) throw ConfigError("encoder_layers: must be >= 1");
    if (encoder_heads < 1) throw ConfigError("encoder_heads: must be >= 1");
    if (model_dim % encoder_heads != 0)
      throw ConfigError("model_dim: must be divisible by encoder_heads");
    if (ffn_dim < 1) throw ConfigError("ffn_dim: must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout: must lie in [0, 1)");
    if (embed.out_dim != model_dim)
      throw ConfigError("model_dim: must equal embed.out_dim (" + std::to_string(embed.out_dim) +
                        " vs " + std::to_string(model_dim) + ")");
    embed.validate(lookback);
  }
};

inline void to_json(nlohmann::json& j, const EmbedConfig& c) {
  j = nlohmann::json{{"mode", to_string(c.mode)},
                     {"window_size", c.window_size},
                     {"stride", c.stride},
                     {"use_landmarks", c.use_landmarks},
                     {"landmark_kernel", c.landmark_kernel},
                     {"landmark_stride", c.landmark_stride},
                     {"use_ema", c.use_ema},
                     {"ema_alpha", c.ema_alpha},
                     {"ema_include_landmarks", c.ema_include_landmarks},
                     {"embed_layers", c.embed_layers},
                     {"embed_heads", c.embed_heads},
                     {"embed_dim", c.embed_dim},
                     {"rbf_gamma", c.rbf_gamma},
                     {"poly_degree", c.poly_degree},
                     {"poly_coef", c.poly_coef},
                     {"normalize_kernel_rows", c.normalize_kernel_rows},
                     {"kernel_proj_depth", c.kernel_proj_depth}};
}

inline void from_json(const nlohmann::json& j, EmbedConfig& c) {
  c.mode = embed_mode_from_string(j.value("mode", to_string(c.mode)));
  c.window_size = j.value("window_size", c.window_size);
  c.stride = j.value("stride", c.stride);
  c.use_landmarks = j.value("use_landmarks", c.use_landmarks);
  c.landmark_kernel = j.value("landmark_kernel", c.landmark_kernel);
  c.landmark_stride = j.value("landmark_stride", c.landmark_stride);
  c.use_ema = j.value("use_ema", c.use_ema);
  c.ema_alpha = j.value("ema_alpha", c.ema_alpha);
  c.ema_include_landmarks = j.value("ema_include_landmarks", c.ema_include_landmarks);
  c.embed_layers = j.value("embed_layers", c.embed_layers);
  c.embed_heads = j.value("embed_heads", c.embed_heads);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.rbf_gamma = j.value("rbf_gamma", c.rbf_gamma);
  c.poly_degree = j.value("poly_degree", c.poly_degree);
  c.poly_coef = j.value("poly_coef", c.poly_coef);
  c.normalize_kernel_rows = j.value("normalize_kernel_rows", c.normalize_kernel_rows);
  c.kernel_proj_depth = j.value("kernel_proj_depth", c.kernel_proj_depth);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"lookback", c.lookback},     {"horizon", c.horizon},
                     {"encoder_layers", c.encoder_layers}, {"encoder_heads", c.encoder_heads},
                     {"model_dim", c.model_dim},   {"ffn_dim", c.ffn_dim},
                     {"dropout", c.dropout},       {"instance_affine", c.instance_affine},
                     {"seed", c.seed},             {"embed", c.embed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.lookback = j.value("lookback", c.lookback);
  c.horizon = j.value("horizon", c.horizon);
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.encoder_heads = j.value("encoder_heads", c.encoder_heads);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.dropout = j.value("dropout", c.dropout);
  c.instance_affine = j.value("instance_affine", c.instance_affine);
  c.seed = j.value("seed", c.seed);
  if (j.contains("embed")) j.at("embed").get_to(c.embed);
  c.embed.out_dim = c.model_dim;
}

// One learnable linear map from a raw window to the encoder width.
inline Tensor patch_embed_baseline(const std::vector<double>& window, const Tensor& weight,
                                   const Tensor& bias) {
  const int w = static_cast<int>(window.size());
  if (weight.rank() != 2 || weight.extent(0) != w)
    throw DimensionError("patch_embed_baseline: weight shape does not match window");
  Tensor win = Tensor::from({1, w}, std::vector<double>(window));
  return reshape(add_broadcast(matmul(win, weight), bias), {weight.extent(1)});
}

struct ForecastOutput {
  std::vector<std::vector<double>> predictions;        // per channel, horizon values
  std::vector<std::vector<Mat>> encoder_tokens;        // [layer][channel], N x D
  std::vector<std::vector<AttentionBundle>> bundles;   // [channel][window] when retained
};

// Channel-independent forecaster: windowed embedding, transformer encoder
// over the window tokens, flattening linear head, statistics restored at the
// output.
class Model {
 public:
  explicit Model(ModelConfig cfg)
      : cfg_(normalized(std::move(cfg))), embedder_(make_embedder(cfg_)) {
    cfg_.validate();
    for (const auto& p : embedder_.params()) params_.push_back(p);
    init_encoder_head();
  }

  const ModelConfig& config() const { return cfg_; }
  Embedder& embedder() { return embedder_; }
  const Embedder& embedder() const { return embedder_; }

  std::vector<NamedParam>& params() { return params_; }
  const std::vector<NamedParam>& params() const { return params_; }

  Tensor param(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p.tensor;
    throw ContractError("no parameter named " + name);
  }

  struct Forward {
    Tensor pred_norm;                 // (B, T)
    std::vector<Tensor> layer_tokens; // per encoder layer, (B, N, D)
    std::vector<std::vector<AttentionBundle>> bundles;
  };

  // Batched forward over normalized lookback rows.
  Forward forward_normalized(const std::vector<std::vector<double>>& x_norm, bool training = false,
                             Rng* dropout_rng = nullptr, bool keep_tokens = false,
                             bool keep_attention = false) const {
    const int B = static_cast<int>(x_norm.size());
    if (B < 1) throw DimensionError("forward_normalized: empty batch");
    std::vector<double> flat;
    flat.reserve(static_cast<size_t>(B) * cfg_.lookback);
    for (const auto& row : x_norm) {
      if (static_cast<int>(row.size()) != cfg_.lookback)
        throw DimensionError("forward_normalized: row length != lookback");
      flat.insert(flat.end(), row.begin(), row.end());
    }
    Tensor input = Tensor::from({B, cfg_.lookback}, std::move(flat));
    if (cfg_.instance_affine)
      input = shift_by(scale_by(input, param("norm.gain")), param("norm.offset"));
    auto embedded = embedder_.embed_input(input, keep_attention);
    Forward fwd;
    fwd.bundles = std::move(embedded.bundles);
    Tensor hidden = encoder_forward(embedded.embeddings, training, dropout_rng,
                                    keep_tokens ? &fwd.layer_tokens : nullptr);
    fwd.pred_norm = forecast_head(hidden);
    return fwd;
  }

  // Encoder over window embeddings (B, N, D) -> (B, N, D). attn_mats, when
  // given, collects every head's (B, N, N) attention matrix in layer order.
  Tensor encoder_forward(const Tensor& embeddings, bool training = false, Rng* dropout_rng = nullptr,
                         std::vector<Tensor>* layer_tokens = nullptr,
                         std::vector<Tensor>* attn_mats = nullptr) const {
    const int n = cfg_.window_count();
    if (embeddings.rank() != 3 || embeddings.extent(1) != n || embeddings.extent(2) != cfg_.model_dim)
      throw DimensionError("encoder_forward: expected (B, " + std::to_string(n) + ", " +
                           std::to_string(cfg_.model_dim) + "), got " + shape_str(embeddings.shape()));
    const int dh = cfg_.model_dim / cfg_.encoder_heads;
    const bool drop = training && cfg_.dropout > 0.0 && dropout_rng != nullptr;
    Tensor x = add_broadcast(embeddings, param("encoder.pos"));
    for (int l = 0; l < cfg_.encoder_layers; ++l) {
      const std::string p = "encoder.l" + std::to_string(l) + ".";
      Tensor h = layer_normalize(x, param(p + "ln1.gain"), param(p + "ln1.offset"));
      Tensor q = add_broadcast(matmul(h, param(p + "wq")), param(p + "bq"));
      Tensor k = add_broadcast(matmul(h, param(p + "wk")), param(p + "bk"));
      Tensor v = add_broadcast(matmul(h, param(p + "wv")), param(p + "bv"));
      std::vector<Tensor> heads;
      heads.reserve(static_cast<size_t>(cfg_.encoder_heads));
      for (int hh = 0; hh < cfg_.encoder_heads; ++hh) {
        Tensor qh = slice_axis(q, 2, hh * dh, (hh + 1) * dh);
        Tensor kh = slice_axis(k, 2, hh * dh, (hh + 1) * dh);
        Tensor vh = slice_axis(v, 2, hh * dh, (hh + 1) * dh);
        Tensor a = softmax_rows(scale(matmul(qh, transpose_last2(kh)), 1.0 / std::sqrt(double(dh))));
        if (attn_mats) attn_mats->push_back(a);
        heads.push_back(matmul(a, vh));
      }
      Tensor attn = add_broadcast(matmul(concat_axis(heads, 2), param(p + "wo")), param(p + "bo"));
      if (drop) attn = dropout(attn, cfg_.dropout, *dropout_rng);
      x = add(x, attn);
      Tensor h2 = layer_normalize(x, param(p + "ln2.gain"), param(p + "ln2.offset"));
      Tensor f1 = gelu(add_broadcast(matmul(h2, param(p + "ffn.w1")), param(p + "ffn.b1")));
      Tensor f2 = add_broadcast(matmul(f1, param(p + "ffn.w2")), param(p + "ffn.b2"));
      if (drop) f2 = dropout(f2, cfg_.dropout, *dropout_rng);
      x = add(x, f2);
      if (layer_tokens) layer_tokens->push_back(x);
    }
    return x;
  }

  // Flatten the window tokens and map them to the horizon.
  Tensor forecast_head(const Tensor& hidden) const {
    const int n = cfg_.window_count();
    if (hidden.rank() != 3 || hidden.extent(1) != n || hidden.extent(2) != cfg_.model_dim)
      throw DimensionError("forecast_head: hidden shape " + shape_str(hidden.shape()) +
                           " does not match the trained head (" + std::to_string(n) + " windows)");
    Tensor flat = reshape(hidden, {hidden.extent(0), n * cfg_.model_dim});
    return add_broadcast(matmul(flat, param("head.weight")), param("head.bias"));
  }

  // Full forecast for one multichannel lookback; channels share parameters
  // and run as a batch.
  ForecastOutput forward(const std::vector<std::vector<double>>& channels, bool keep_tokens = false,
                         bool keep_attention = false) const {
    const int m = static_cast<int>(channels.size());
    if (m < 1) throw DimensionError("forward: no channels");
    std::vector<std::vector<double>> normed(static_cast<size_t>(m));
    std::vector<InstanceStats> stats(static_cast<size_t>(m));
    for (int c = 0; c < m; ++c) {
      if (static_cast<int>(channels[static_cast<size_t>(c)].size()) != cfg_.lookback)
        throw DimensionError("forward: channel " + std::to_string(c) + " length != lookback");
      auto [xn, st] = instance_normalize(channels[static_cast<size_t>(c)]);
      normed[static_cast<size_t>(c)] = std::move(xn);
      stats[static_cast<size_t>(c)] = st;
    }
    Forward fwd = forward_normalized(normed, false, nullptr, keep_tokens, keep_attention);

    ForecastOutput out;
    out.predictions.resize(static_cast<size_t>(m));
    const auto& pv = fwd.pred_norm.values();
    for (int c = 0; c < m; ++c) {
      std::vector<double> row(pv.begin() + static_cast<long>(c) * cfg_.horizon,
                              pv.begin() + static_cast<long>(c + 1) * cfg_.horizon);
      out.predictions[static_cast<size_t>(c)] = denormalize(row, stats[static_cast<size_t>(c)]);
    }
    if (keep_tokens) {
      const int n = cfg_.window_count();
      out.encoder_tokens.resize(fwd.layer_tokens.size());
      for (size_t l = 0; l < fwd.layer_tokens.size(); ++l) {
        const auto& tv = fwd.layer_tokens[l].values();
        out.encoder_tokens[l].resize(static_cast<size_t>(m));
        for (int c = 0; c < m; ++c) {
          Mat mat(n, cfg_.model_dim);
          std::copy_n(tv.data() + static_cast<size_t>(c) * n * cfg_.model_dim,
                      static_cast<size_t>(n) * cfg_.model_dim, mat.v.data());
          out.encoder_tokens[l][static_cast<size_t>(c)] = std::move(mat);
        }
      }
    }
    out.bundles = std::move(fwd.bundles);
    return out;
  }

  // Checkpoint: one-line JSON header (config, tensor names/shapes/offsets),
  // newline, then a little-endian float64 payload.
  void save_checkpoint(const std::string& path) const {
    nlohmann::json tensors = nlohmann::json::array();
    int64_t offset = 0;
    for (const auto& p : params_) {
      tensors.push_back({{"name", p.name},
                         {"shape", p.tensor.shape()},
                         {"offset", offset},
                         {"count", p.tensor.size()}});
      offset += static_cast<int64_t>(p.tensor.size()) * 8;
    }
    nlohmann::json header{{"format", "attnembed-checkpoint"},
                          {"version", 1},
                          {"config", cfg_},
                          {"tensors", tensors}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << header.dump() << '\n';
    for (const auto& p : params_) {
      for (double v : p.tensor.values()) {
        uint64_t bits;
        static_assert(sizeof(bits) == sizeof(v));
        std::memcpy(&bits, &v, 8);
        unsigned char bytes[8];
        for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
        out.write(reinterpret_cast<const char*>(bytes), 8);
      }
    }
    if (!out) throw IoError("write failed for " + path);
  }

  static Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string header_line;
    if (!std::getline(in, header_line)) throw ParseError(path + ": missing checkpoint header");
    nlohmann::json header = nlohmann::json::parse(header_line, nullptr, false);
    if (header.is_discarded() || header.value("format", "") != "attnembed-checkpoint")
      throw ParseError(path + ": not an attnembed checkpoint");
    ModelConfig cfg = header.at("config").get<ModelConfig>();
    Model model(cfg);
    const std::streampos payload_start = in.tellg();
    for (const auto& t : header.at("tensors")) {
      const std::string name = t.at("name").get<std::string>();
      Tensor tensor = model.param(name);
      const int64_t count = t.at("count").get<int64_t>();
      if (count != tensor.size())
        throw ParseError(path + ": tensor " + name + " count mismatch");
      in.seekg(payload_start + std::streampos(t.at("offset").get<int64_t>()));
      auto& vals = tensor.values();
      for (int64_t i = 0; i < count; ++i) {
        unsigned char bytes[8];
        in.read(reinterpret_cast<char*>(bytes), 8);
        if (!in) throw ParseError(path + ": truncated payload at tensor " + name);
        uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<uint64_t>(bytes[b]) << (8 * b);
        double v;
        std::memcpy(&v, &bits, 8);
        vals[static_cast<size_t>(i)] = v;
      }
    }
    return model;
  }

 private:
  // model_dim is authoritative for the embedding width
  static ModelConfig normalized(ModelConfig cfg) {
    cfg.embed.out_dim = cfg.model_dim;
    return cfg;
  }

  static Embedder make_embedder(const ModelConfig& cfg) {
    return Embedder(cfg.embed, cfg.lookback, Rng(cfg.seed).split(0));
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

  void init_encoder_head() {
    if (cfg_.instance_affine) {
      add_ones("norm.gain", {1});
      add_zeros("norm.offset", {1});
    }
    const int D = cfg_.model_dim;
    const int n = cfg_.window_count();
    Rng enc_rng = Rng(cfg_.seed).split(1);
    add_param("encoder.pos", {n, D}, enc_rng, 0.1);
    for (int l = 0; l < cfg_.encoder_layers; ++l) {
      const std::string p = "encoder.l" + std::to_string(l) + ".";
      add_ones(p + "ln1.gain", {D});
      add_zeros(p + "ln1.offset", {D});
      for (const char* nm : {"wq", "wk", "wv", "wo"}) add_param(p + nm, {D, D}, enc_rng, glorot(D, D));
      for (const char* nm : {"bq", "bk", "bv", "bo"}) add_zeros(p + nm, {D});
      add_ones(p + "ln2.gain", {D});
      add_zeros(p + "ln2.offset", {D});
      add_param(p + "ffn.w1", {D, cfg_.ffn_dim}, enc_rng, glorot(D, cfg_.ffn_dim));
      add_zeros(p + "ffn.b1", {cfg_.ffn_dim});
      add_param(p + "ffn.w2", {cfg_.ffn_dim, D}, enc_rng, glorot(cfg_.ffn_dim, D));
      add_zeros(p + "ffn.b2", {D});
    }
    Rng head_rng = Rng(cfg_.seed).split(2);
    add_param("head.weight", {n * D, cfg_.horizon}, head_rng, glorot(n * D, cfg_.horizon));
    add_zeros("head.bias", {cfg_.horizon});
  }

  ModelConfig cfg_;
  Embedder embedder_;
  std::vector<NamedParam> params_;
};

}  // namespace attnembed
