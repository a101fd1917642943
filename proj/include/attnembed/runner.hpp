#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnembed/config.hpp"
#include "attnembed/diagnostics.hpp"
#include "attnembed/gradcheck.hpp"
#include "attnembed/theory.hpp"

namespace attnembed {

namespace detail_run {

struct RunContext {
  RunConfig cfg;
  std::filesystem::path out_dir;
  std::vector<std::string> artifacts;

  std::filesystem::path path(const std::string& name) const { return out_dir / name; }

  void write_text(const std::string& name, const std::string& content) {
    std::ofstream out(path(name), std::ios::binary);
    if (!out) throw IoError("cannot write " + path(name).string());
    out << content;
    if (!out) throw IoError("write failed for " + path(name).string());
    artifacts.push_back(name);
  }

  void write_json(const std::string& name, const nlohmann::json& j) { write_text(name, j.dump(2) + "\n"); }

  void note_artifact(const std::string& name) { artifacts.push_back(name); }
};

inline std::string file_hash_hex(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot hash " + p.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  std::ostringstream hex;
  hex << std::hex << fnv1a64(bytes.data(), bytes.size());
  return hex.str();
}

// Every run ends with a config echo plus a summary carrying artifact hashes.
inline void finish(RunContext& ctx, const std::string& subcommand, const nlohmann::json& extra) {
  ctx.write_json("config_resolved.json", ctx.cfg.doc);
  nlohmann::json hashes = nlohmann::json::object();
  for (const auto& name : ctx.artifacts) hashes[name] = file_hash_hex(ctx.path(name));
  nlohmann::json summary{{"subcommand", subcommand},
                         {"experiment", ctx.cfg.experiment()},
                         {"seed", ctx.cfg.seed()},
                         {"config_echo", "config_resolved.json"},
                         {"artifacts", hashes}};
  if (!extra.is_null()) summary["results"] = extra;
  std::ofstream out(ctx.path("run_summary.json"));
  if (!out) throw IoError("cannot write run_summary.json");
  out << summary.dump(2) << "\n";
}

inline SeriesDataset load_dataset(const RunConfig& cfg) {
  if (!cfg.data_path().empty()) return load_csv(cfg.data_path());
  return gen_synthetic(cfg.kind(), cfg.synthetic());
}

struct Splits {
  PairSet train, val, test;
};

inline Splits make_splits(const RunConfig& cfg, const SeriesDataset& ds, int lookback, int horizon) {
  auto parts = chronological_split(ds, cfg.split(), lookback);
  Splits s;
  s.train = prepare_pairs(parts.train.data, lookback, horizon, cfg.pair_stride());
  s.val = prepare_pairs(parts.val.data, lookback, horizon, cfg.pair_stride());
  s.test = prepare_pairs(parts.test.data, lookback, horizon, cfg.pair_stride());
  return s;
}

inline nlohmann::json metrics_json(const EvalReport& rep) {
  nlohmann::json j{{"mse", rep.denorm.mse},
                   {"mae", rep.denorm.mae},
                   {"norm_mse", rep.norm.mse},
                   {"norm_mae", rep.norm.mae}};
  if (!rep.denorm.per_horizon_mse.empty()) j["per_horizon_mse"] = rep.denorm.per_horizon_mse;
  return j;
}

inline std::string csv_number(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail_run

// ---------------------------------------------------------------------------
// Subcommands. Each writes its artifacts into out_dir and returns a summary
// fragment stored in run_summary.json.

inline nlohmann::json run_synth(detail_run::RunContext& ctx) {
  SyntheticParams p = ctx.cfg.synthetic();
  auto f1 = gen_synthetic(SyntheticKind::f1, p);
  auto f2 = gen_synthetic(SyntheticKind::f2, p);
  save_csv(f1, ctx.path("f1.csv").string());
  ctx.note_artifact("f1.csv");
  save_csv(f2, ctx.path("f2.csv").string());
  ctx.note_artifact("f2.csv");
  return {{"rows", f1.rows}, {"files", {"f1.csv", "f2.csv"}}};
}

inline nlohmann::json run_train(detail_run::RunContext& ctx) {
  auto ds = detail_run::load_dataset(ctx.cfg);
  ModelConfig mcfg = ctx.cfg.model();
  auto splits = detail_run::make_splits(ctx.cfg, ds, mcfg.lookback, mcfg.horizon);
  Model model(mcfg);
  TrainConfig tcfg = ctx.cfg.train();
  auto result = train_model(model, splits.train, splits.val, tcfg);

  std::ostringstream hist;
  hist << "epoch,train_mse,val_mse\n";
  for (const auto& rec : result.history)
    hist << rec.epoch << ',' << detail_run::csv_number(rec.train_mse) << ','
         << detail_run::csv_number(rec.val_mse) << '\n';
  ctx.write_text("loss_history.csv", hist.str());

  auto rep = evaluate_model(model, splits.test, tcfg.batch_size, true);
  auto naive = evaluate_naive_last(splits.test);
  nlohmann::json metrics{{"test", detail_run::metrics_json(rep)},
                         {"naive_last", {{"mse", naive.mse}, {"mae", naive.mae}}},
                         {"best_epoch", result.best_epoch},
                         {"best_val_mse", result.best_val},
                         {"epochs_run", result.history.size()}};
  ctx.write_json("metrics.json", metrics);

  model.save_checkpoint(ctx.path("checkpoint.bin").string());
  ctx.note_artifact("checkpoint.bin");
  return metrics;
}

inline nlohmann::json run_eval(detail_run::RunContext& ctx) {
  const std::string ckpt = ctx.cfg.eval_checkpoint();
  if (ckpt.empty()) throw ConfigError("eval.checkpoint: required for the eval subcommand");
  Model model = Model::load_checkpoint(ckpt);
  auto ds = detail_run::load_dataset(ctx.cfg);
  auto splits =
      detail_run::make_splits(ctx.cfg, ds, model.config().lookback, model.config().horizon);
  auto rep = evaluate_model(model, splits.test, ctx.cfg.train().batch_size, true);
  nlohmann::json metrics{{"test", detail_run::metrics_json(rep)}, {"checkpoint", ckpt}};
  ctx.write_json("metrics.json", metrics);
  return metrics;
}

inline nlohmann::json run_compare(detail_run::RunContext& ctx) {
  ModelConfig base = ctx.cfg.model();
  if (base.embed.mode == EmbedMode::patch)
    throw ConfigError("model.embed.mode: compare needs an attention mode to pit against patch");
  auto ds = detail_run::load_dataset(ctx.cfg);
  auto splits = detail_run::make_splits(ctx.cfg, ds, base.lookback, base.horizon);
  TrainConfig tcfg = ctx.cfg.train();

  std::ostringstream csv;
  csv << "seed,mode,test_mse,test_mae,norm_mse,norm_mae,best_epoch,epochs_run\n";
  nlohmann::json rows = nlohmann::json::array();
  std::vector<double> attn_mse, patch_mse;
  for (uint64_t s : ctx.cfg.compare_seeds()) {
    for (bool patch : {false, true}) {
      ModelConfig mcfg = base;
      if (patch) mcfg.embed.mode = EmbedMode::patch;
      mcfg.seed = s;
      TrainConfig t = tcfg;
      t.seed = s;
      Model model(mcfg);
      auto result = train_model(model, splits.train, splits.val, t);
      auto rep = evaluate_model(model, splits.test, t.batch_size);
      (patch ? patch_mse : attn_mse).push_back(rep.denorm.mse);
      const std::string mode = to_string(mcfg.embed.mode);
      csv << s << ',' << mode << ',' << detail_run::csv_number(rep.denorm.mse) << ','
          << detail_run::csv_number(rep.denorm.mae) << ',' << detail_run::csv_number(rep.norm.mse)
          << ',' << detail_run::csv_number(rep.norm.mae) << ',' << result.best_epoch << ','
          << result.history.size() << '\n';
      rows.push_back({{"seed", s},
                      {"mode", mode},
                      {"test_mse", rep.denorm.mse},
                      {"test_mae", rep.denorm.mae},
                      {"norm_mse", rep.norm.mse},
                      {"norm_mae", rep.norm.mae}});
    }
  }
  ctx.write_text("compare.csv", csv.str());

  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  std::vector<double> ratios;
  for (size_t i = 0; i < attn_mse.size(); ++i) ratios.push_back(attn_mse[i] / patch_mse[i]);
  nlohmann::json summary{{"rows", rows},
                         {"attn_median_mse", median(attn_mse)},
                         {"patch_median_mse", median(patch_mse)},
                         {"mse_ratio_median", median(ratios)},
                         {"mse_ratio_worst", *std::max_element(ratios.begin(), ratios.end())}};
  ctx.write_json("compare.json", summary);
  return summary;
}

inline nlohmann::json run_ablate(detail_run::RunContext& ctx) {
  ModelConfig base = ctx.cfg.model();
  auto ds = detail_run::load_dataset(ctx.cfg);
  auto splits = detail_run::make_splits(ctx.cfg, ds, base.lookback, base.horizon);
  auto report = run_ablation(base, splits.train, splits.val, splits.test, ctx.cfg.train());

  std::ostringstream csv;
  csv << "variant,acat_width,test_mse,test_mae,norm_mse,norm_mae,best_epoch\n";
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : report.entries) {
    csv << e.variant << ',' << e.acat_width << ',' << detail_run::csv_number(e.eval.denorm.mse)
        << ',' << detail_run::csv_number(e.eval.denorm.mae) << ','
        << detail_run::csv_number(e.eval.norm.mse) << ',' << detail_run::csv_number(e.eval.norm.mae)
        << ',' << e.train.best_epoch << '\n';
    rows.push_back({{"variant", e.variant},
                    {"acat_width", e.acat_width},
                    {"test_mse", e.eval.denorm.mse},
                    {"test_mae", e.eval.denorm.mae},
                    {"norm_mse", e.eval.norm.mse},
                    {"norm_mae", e.eval.norm.mae}});
  }
  ctx.write_text("ablation.csv", csv.str());
  nlohmann::json summary{{"rows", rows}};
  ctx.write_json("ablation.json", summary);
  return summary;
}

inline nlohmann::json run_scan(detail_run::RunContext& ctx) {
  const std::string parameter = ctx.cfg.scan_parameter();
  auto ds = detail_run::load_dataset(ctx.cfg);
  ModelConfig base = ctx.cfg.model();
  TrainConfig tcfg = ctx.cfg.train();

  std::ostringstream csv;
  csv << "parameter,value,test_mse,test_mae,norm_mse,norm_mae\n";
  nlohmann::json rows = nlohmann::json::array();
  for (double value : ctx.cfg.scan_values()) {
    ModelConfig mcfg = base;
    if (parameter == "window_size")
      mcfg.embed.window_size = static_cast<int>(value);
    else if (parameter == "ema_alpha")
      mcfg.embed.ema_alpha = value;
    else if (parameter == "landmark_stride")
      mcfg.embed.landmark_stride = static_cast<int>(value);
    else
      mcfg.embed.embed_layers = static_cast<int>(value);
    mcfg.validate();
    auto splits = detail_run::make_splits(ctx.cfg, ds, mcfg.lookback, mcfg.horizon);
    Model model(mcfg);
    auto result = train_model(model, splits.train, splits.val, tcfg);
    (void)result;
    auto rep = evaluate_model(model, splits.test, tcfg.batch_size);
    csv << parameter << ',' << detail_run::csv_number(value) << ','
        << detail_run::csv_number(rep.denorm.mse) << ',' << detail_run::csv_number(rep.denorm.mae)
        << ',' << detail_run::csv_number(rep.norm.mse) << ',' << detail_run::csv_number(rep.norm.mae)
        << '\n';
    rows.push_back({{"parameter", parameter},
                    {"value", value},
                    {"test_mse", rep.denorm.mse},
                    {"test_mae", rep.denorm.mae}});
  }
  ctx.write_text("scan.csv", csv.str());
  nlohmann::json summary{{"rows", rows}};
  ctx.write_json("scan.json", summary);
  return summary;
}

inline nlohmann::json run_theory(detail_run::RunContext& ctx) {
  auto rep = separation_report(ctx.cfg.cluster(), ctx.cfg.theory_lambda(), ctx.cfg.theory_trials(),
                               ctx.cfg.theory_include_pair_anchors(),
                               ctx.cfg.theory_normalize_profiles());
  std::ostringstream csv;
  csv << "trial,raw_within,raw_between,repr_within,repr_between,relative_gap,raw_misorder,repr_"
         "misorder\n";
  for (size_t t = 0; t < rep.per_trial.size(); ++t) {
    const auto& ts = rep.per_trial[t];
    csv << t << ',' << detail_run::csv_number(ts.raw_within) << ','
        << detail_run::csv_number(ts.raw_between) << ',' << detail_run::csv_number(ts.repr_within)
        << ',' << detail_run::csv_number(ts.repr_between) << ','
        << detail_run::csv_number(ts.relative_gap) << ',' << detail_run::csv_number(ts.raw_misorder)
        << ',' << detail_run::csv_number(ts.repr_misorder) << '\n';
  }
  ctx.write_text("theory_trials.csv", csv.str());

  nlohmann::json summary{{"dim", rep.spec.dim},
                         {"clusters", rep.spec.clusters},
                         {"signal", rep.spec.signal},
                         {"samples_per_cluster", rep.spec.samples_per_cluster},
                         {"lambda", rep.lambda},
                         {"trials", rep.trials},
                         {"include_pair_anchors", rep.include_pair_anchors},
                         {"normalize_profiles", rep.normalize_profiles},
                         {"raw_within_mean", rep.raw_within_mean},
                         {"raw_within_se", rep.raw_within_se},
                         {"raw_between_mean", rep.raw_between_mean},
                         {"raw_between_se", rep.raw_between_se},
                         {"repr_within_mean", rep.repr_within_mean},
                         {"repr_between_mean", rep.repr_between_mean},
                         {"relative_gap", rep.relative_gap},
                         {"relative_gap_se", rep.relative_gap_se},
                         {"relative_gap_lower95", rep.relative_gap_lower95},
                         {"raw_misorder_rate", rep.raw_misorder_rate},
                         {"repr_misorder_rate", rep.repr_misorder_rate}};
  ctx.write_json("theory.json", summary);
  return summary;
}

inline nlohmann::json run_rank(detail_run::RunContext& ctx) {
  auto ds = detail_run::load_dataset(ctx.cfg);
  ModelConfig base = ctx.cfg.model();
  auto channels = channel_split(ds);
  const auto& u = channels.at(0);
  const int L = base.lookback;
  if (static_cast<int>(u.size()) < L) throw ConfigError("rank: series shorter than the lookback");
  const int want = ctx.cfg.rank_batch();
  const int max_start = static_cast<int>(u.size()) - L;
  std::vector<std::vector<double>> batch;
  for (int i = 0; i < want; ++i) {
    const int start = want == 1 ? 0 : static_cast<int>(static_cast<int64_t>(max_start) * i / (want - 1));
    batch.emplace_back(u.begin() + start, u.begin() + start + L);
  }

  std::vector<RankProfile> profiles;
  if (ctx.cfg.rank_trained()) {
    auto splits = detail_run::make_splits(ctx.cfg, ds, base.lookback, base.horizon);
    TrainConfig tcfg = ctx.cfg.train();
    profiles = rank_report(base, batch, ctx.cfg.rank_depths(), &splits.train, &splits.val, &tcfg);
  } else {
    profiles = rank_report(base, batch, ctx.cfg.rank_depths());
  }

  std::ostringstream csv;
  csv << "mode,depth,layer_index,relative_residual_norm\n";
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& p : profiles)
    for (size_t l = 0; l < p.layer_values.size(); ++l) {
      csv << p.mode << ',' << p.depth << ',' << (l + 1) << ','
          << detail_run::csv_number(p.layer_values[l]) << '\n';
      rows.push_back({{"mode", p.mode},
                      {"depth", p.depth},
                      {"layer_index", l + 1},
                      {"relative_residual_norm", p.layer_values[l]}});
    }
  ctx.write_text("rank.csv", csv.str());
  nlohmann::json summary{{"rows", rows}, {"trained", ctx.cfg.rank_trained()}};
  ctx.write_json("rank.json", summary);
  return summary;
}

// Fixed pocket-sized architecture exercised end to end in every mode; exits
// nonzero when any analytic gradient drifts from central differences.
inline ModelConfig gradcheck_config(EmbedMode mode, uint64_t seed) {
  ModelConfig cfg;
  cfg.lookback = 24;
  cfg.horizon = 12;
  cfg.encoder_layers = 1;
  cfg.encoder_heads = 2;
  cfg.model_dim = 16;
  cfg.ffn_dim = 32;
  cfg.dropout = 0.0;
  cfg.seed = seed;
  cfg.embed.mode = mode;
  cfg.embed.window_size = 6;
  cfg.embed.stride = 6;
  cfg.embed.landmark_kernel = 12;
  cfg.embed.landmark_stride = 12;
  cfg.embed.ema_alpha = 0.7;
  cfg.embed.embed_layers = 1;
  cfg.embed.embed_heads = 2;
  cfg.embed.embed_dim = 8;
  return cfg;
}

inline nlohmann::json run_gradcheck(detail_run::RunContext& ctx) {
  SyntheticParams sp = ctx.cfg.synthetic();
  sp.n_steps = std::max(sp.n_steps, 80);
  auto ds = gen_synthetic(SyntheticKind::f2, sp);
  auto pairs = prepare_pairs(ds, 24, 12);
  if (pairs.size() < 2) throw ConfigError("gradcheck: synthetic series too short");

  std::vector<std::vector<double>> inputs{pairs.pairs[0].input_norm, pairs.pairs[1].input_norm};
  std::vector<double> targets;
  for (int i = 0; i < 2; ++i)
    targets.insert(targets.end(), pairs.pairs[static_cast<size_t>(i)].target_norm.begin(),
                   pairs.pairs[static_cast<size_t>(i)].target_norm.end());

  nlohmann::json rows = nlohmann::json::array();
  bool all_pass = true;
  for (EmbedMode mode : {EmbedMode::softmax, EmbedMode::rbf, EmbedMode::poly, EmbedMode::patch}) {
    Model model(gradcheck_config(mode, ctx.cfg.seed()));
    auto loss = [&]() {
      auto fwd = model.forward_normalized(inputs);
      Tensor target = Tensor::from({2, 12}, std::vector<double>(targets));
      Tensor diff = sub(fwd.pred_norm, target);
      return mean_all(mul(diff, diff));
    };
    auto report = finite_difference_check(loss, model.params(), 1e-5);
    const bool pass = report.max_relative_error <= 1e-4;
    all_pass = all_pass && pass;
    std::cout << "gradcheck mode=" << to_string(mode)
              << " max_relative_error=" << report.max_relative_error
              << " worst=" << report.worst_parameter << " pass=" << (pass ? "yes" : "no") << "\n";
    rows.push_back({{"mode", to_string(mode)},
                    {"max_relative_error", report.max_relative_error},
                    {"worst_parameter", report.worst_parameter},
                    {"checked_entries", report.checked_entries},
                    {"skipped_entries", report.skipped_entries},
                    {"pass", pass}});
  }
  nlohmann::json summary{{"rows", rows}, {"tolerance", 1e-4}, {"pass", all_pass}};
  ctx.write_json("gradcheck.json", summary);
  if (!all_pass) throw NumericError("gradcheck: max relative error exceeds 1e-4");
  return summary;
}

// Dispatch with the documented exit-code contract: 0 ok, 2 config, 3
// numeric, 4 I/O.
inline int run_subcommand(const std::string& name, const RunConfig& cfg, const std::string& out_dir) {
  detail_run::RunContext ctx{cfg, out_dir, {}};
  auto fail = [](int code, const std::string& kind, const std::string& message) {
    nlohmann::json line{{"error", kind}, {"message", message}, {"exit", code}};
    std::cerr << line.dump() << "\n";
    return code;
  };
  try {
    std::filesystem::create_directories(ctx.out_dir);
    nlohmann::json result;
    if (name == "synth")
      result = run_synth(ctx);
    else if (name == "train")
      result = run_train(ctx);
    else if (name == "eval")
      result = run_eval(ctx);
    else if (name == "compare")
      result = run_compare(ctx);
    else if (name == "ablate")
      result = run_ablate(ctx);
    else if (name == "scan")
      result = run_scan(ctx);
    else if (name == "theory")
      result = run_theory(ctx);
    else if (name == "rank")
      result = run_rank(ctx);
    else if (name == "gradcheck")
      result = run_gradcheck(ctx);
    else
      throw ConfigError("unknown subcommand: " + name);
    detail_run::finish(ctx, name, result);
    return 0;
  } catch (const ConfigError& e) {
    return fail(2, "config", e.what());
  } catch (const NumericError& e) {
    return fail(3, "numeric", e.what());
  } catch (const IoError& e) {
    return fail(4, "io", e.what());
  } catch (const ParseError& e) {
    return fail(4, "parse", e.what());
  } catch (const std::exception& e) {
    return fail(1, "internal", e.what());
  }
}

}  // namespace attnembed
