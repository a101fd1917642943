#pragma once

#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnembed/data.hpp"
#include "attnembed/forecaster.hpp"
#include "attnembed/theory.hpp"
#include "attnembed/training.hpp"

namespace attnembed {

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
                     {"max_epochs", c.max_epochs},       {"patience", c.patience},
                     {"beta1", c.beta1},                 {"beta2", c.beta2},
                     {"eps", c.eps}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
}

inline void to_json(nlohmann::json& j, const SyntheticParams& c) {
  j = nlohmann::json{{"n_components", c.n_components},
                     {"n_steps", c.n_steps},
                     {"delta", c.delta},
                     {"noise_std", c.noise_std},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticParams& c) {
  c.n_components = j.value("n_components", c.n_components);
  c.n_steps = j.value("n_steps", c.n_steps);
  c.delta = j.value("delta", c.delta);
  c.noise_std = j.value("noise_std", c.noise_std);
  c.seed = j.value("seed", c.seed);
}

inline void to_json(nlohmann::json& j, const SplitSpec& c) {
  j = nlohmann::json{{"train_ratio", c.train_ratio},
                     {"val_ratio", c.val_ratio},
                     {"test_ratio", c.test_ratio},
                     {"borders", c.borders},
                     {"lookback_warmup", c.lookback_warmup}};
}

inline void from_json(const nlohmann::json& j, SplitSpec& c) {
  c.train_ratio = j.value("train_ratio", c.train_ratio);
  c.val_ratio = j.value("val_ratio", c.val_ratio);
  c.test_ratio = j.value("test_ratio", c.test_ratio);
  c.borders = j.value("borders", c.borders);
  c.lookback_warmup = j.value("lookback_warmup", c.lookback_warmup);
}

inline void to_json(nlohmann::json& j, const ClusterSpec& c) {
  j = nlohmann::json{{"dim", c.dim},
                     {"clusters", c.clusters},
                     {"signal", c.signal},
                     {"samples_per_cluster", c.samples_per_cluster}};
}

inline void from_json(const nlohmann::json& j, ClusterSpec& c) {
  c.dim = j.value("dim", c.dim);
  c.clusters = j.value("clusters", c.clusters);
  c.signal = j.value("signal", c.signal);
  c.samples_per_cluster = j.value("samples_per_cluster", c.samples_per_cluster);
}

// Full experiment definition: defaults overlaid by a config file overlaid by
// --set flags; the resolved document is echoed next to every run's outputs.
struct RunConfig {
  nlohmann::json doc;

  std::string experiment() const { return doc.at("experiment").get<std::string>(); }
  uint64_t seed() const { return doc.at("seed").get<uint64_t>(); }

  std::string data_path() const { return doc.at("data").at("path").get<std::string>(); }
  SyntheticKind kind() const {
    const std::string k = doc.at("data").at("kind").get<std::string>();
    if (k == "f1") return SyntheticKind::f1;
    if (k == "f2") return SyntheticKind::f2;
    throw ConfigError("data.kind: must be f1 or f2, got '" + k + "'");
  }
  SyntheticParams synthetic() const { return doc.at("data").at("synthetic").get<SyntheticParams>(); }
  SplitSpec split() const { return doc.at("data").at("split").get<SplitSpec>(); }
  int pair_stride() const { return doc.at("data").at("pair_stride").get<int>(); }

  ModelConfig model() const {
    ModelConfig m = doc.at("model").get<ModelConfig>();
    m.seed = seed();
    return m;
  }

  TrainConfig train() const {
    TrainConfig t = doc.at("train").get<TrainConfig>();
    t.seed = seed();
    return t;
  }

  ClusterSpec cluster() const {
    ClusterSpec c = doc.at("theory").get<ClusterSpec>();
    c.seed = seed();
    return c;
  }
  double theory_lambda() const { return doc.at("theory").at("lambda").get<double>(); }
  int theory_trials() const { return doc.at("theory").at("trials").get<int>(); }
  bool theory_include_pair_anchors() const {
    return doc.at("theory").at("include_pair_anchors").get<bool>();
  }
  bool theory_normalize_profiles() const {
    return doc.at("theory").at("normalize_profiles").get<bool>();
  }

  std::vector<int> rank_depths() const { return doc.at("rank").at("depths").get<std::vector<int>>(); }
  int rank_batch() const { return doc.at("rank").at("batch").get<int>(); }
  bool rank_trained() const { return doc.at("rank").at("trained").get<bool>(); }

  std::string scan_parameter() const { return doc.at("scan").at("parameter").get<std::string>(); }
  std::vector<double> scan_values() const {
    return doc.at("scan").at("values").get<std::vector<double>>();
  }

  std::vector<uint64_t> compare_seeds() const {
    auto seeds = doc.at("compare").at("seeds").get<std::vector<uint64_t>>();
    if (seeds.empty()) seeds = {seed(), seed() + 1, seed() + 2};
    return seeds;
  }

  std::string eval_checkpoint() const { return doc.at("eval").at("checkpoint").get<std::string>(); }

  // Instantiates every typed sub-config so invariant violations surface with
  // their field names.
  void validate() const {
    model().validate();
    train().validate();
    synthetic().validate();
    split().validate();
    cluster().validate();
    kind();
    if (pair_stride() < 1) throw ConfigError("data.pair_stride: must be >= 1");
    if (theory_trials() < 30) throw ConfigError("theory.trials: must be >= 30");
    if (rank_batch() < 1) throw ConfigError("rank.batch: must be >= 1");
    for (int d : rank_depths())
      if (d < 1) throw ConfigError("rank.depths: entries must be >= 1");
    const std::string p = scan_parameter();
    if (p != "window_size" && p != "ema_alpha" && p != "landmark_stride" && p != "embed_layers")
      throw ConfigError(
          "scan.parameter: must be one of window_size|ema_alpha|landmark_stride|embed_layers");
    if (scan_values().empty()) throw ConfigError("scan.values: must not be empty");
  }
};

inline nlohmann::json default_config_json() {
  ModelConfig model;
  nlohmann::json model_json = model;
  model_json.erase("seed");  // the top-level seed governs runs

  nlohmann::json j{
      {"experiment", "default"},
      {"seed", 42},
      {"data",
       {{"path", ""},
        {"kind", "f2"},
        {"synthetic", SyntheticParams{}},
        {"split", SplitSpec{}},
        {"pair_stride", 1}}},
      {"model", model_json},
      {"train", TrainConfig{}},
      {"compare", {{"seeds", nlohmann::json::array()}}},
      {"scan", {{"parameter", "ema_alpha"}, {"values", {0.3, 0.5, 0.7, 0.9}}}},
      {"theory",
       {{"dim", 128},
        {"clusters", 4},
        {"signal", 64.0},
        {"samples_per_cluster", 50},
        {"lambda", 0.0},
        {"trials", 200},
        {"include_pair_anchors", false},
        {"normalize_profiles", true}}},
      {"rank", {{"depths", {3, 6}}, {"batch", 8}, {"trained", false}}},
      {"eval", {{"checkpoint", ""}}}};
  return j;
}

namespace detail_config {

// Defaults double as the schema: unknown keys are rejected with their path.
inline void merge_checked(nlohmann::json& base, const nlohmann::json& patch,
                          const std::string& prefix) {
  if (!patch.is_object())
    throw ConfigError("config: expected an object at " + (prefix.empty() ? "top level" : prefix));
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key: " + path);
    if (base[it.key()].is_object() && !it.value().is_object() && !it.value().is_null())
      throw ConfigError("config: " + path + " must be an object");
    if (base[it.key()].is_object())
      merge_checked(base[it.key()], it.value(), path);
    else
      base[it.key()] = it.value();
  }
}

}  // namespace detail_config

// key=value with a dotted path; the value parses as JSON when possible and
// falls back to a plain string.
inline void apply_set_expression(nlohmann::json& doc, const std::string& expr) {
  const auto eq = expr.find('=');
  if (eq == std::string::npos) throw ConfigError("--set: expected key=value, got '" + expr + "'");
  const std::string key = expr.substr(0, eq);
  const std::string raw = expr.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  nlohmann::json* node = &doc;
  size_t start = 0;
  std::vector<std::string> parts;
  while (true) {
    const auto dot = key.find('.', start);
    parts.push_back(key.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object())
      throw ConfigError("unknown config key: " + key);
    node = &(*node)[parts[i]];
  }
  if (!node->contains(parts.back())) throw ConfigError("unknown config key: " + key);
  if ((*node)[parts.back()].is_object()) throw ConfigError("--set: " + key + " is an object");
  (*node)[parts.back()] = value;
}

// Resolution order: defaults < file < --set flags < ATTNEMBED_SEED.
inline RunConfig resolve_config(const nlohmann::json& file_json,
                                const std::vector<std::string>& set_exprs,
                                bool honor_env_seed = true) {
  RunConfig cfg;
  cfg.doc = default_config_json();
  detail_config::merge_checked(cfg.doc, file_json, "");
  for (const auto& e : set_exprs) apply_set_expression(cfg.doc, e);
  if (honor_env_seed) {
    if (const char* env = std::getenv("ATTNEMBED_SEED")) {
      try {
        cfg.doc["seed"] = static_cast<uint64_t>(std::stoull(env));
      } catch (const std::exception&) {
        throw ConfigError("ATTNEMBED_SEED: not an unsigned integer: '" + std::string(env) + "'");
      }
    }
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& set_exprs = {},
                             bool honor_env_seed = true) {
  nlohmann::json file_json = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    file_json = nlohmann::json::parse(in, nullptr, false);
    if (file_json.is_discarded()) throw ConfigError(path + ": invalid JSON");
  }
  return resolve_config(file_json, set_exprs, honor_env_seed);
}

}  // namespace attnembed
