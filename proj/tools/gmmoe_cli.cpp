// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

// gmmoe: train, evaluate, enhance and ablate from the command line.
//
// Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
// 4 numeric or other runtime error.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "gmmoe/checkpoint.hpp"
#include "gmmoe/config.hpp"
#include "gmmoe/data.hpp"
#include "gmmoe/trainer.hpp"

namespace fs = std::filesystem;
using namespace gmmoe;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitRuntime = 4;

fs::path resolve_data_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("GMMOE_DATA_ROOT"); env && *env) return env;
  throw DataError("no dataset root: pass --data-root or set GMMOE_DATA_ROOT");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

void write_report(const MetricReport& report, const fs::path& json_path, const fs::path& csv_path) {
  write_text(json_path, report.to_json().dump(2) + "\n");
  write_text(csv_path, report.to_csv());
  std::printf("mean PSNR %.4f dB, mean SSIM %.4f over %zu images\n", report.mean_psnr_db, report.mean_ssim,
              report.count);
}

struct Datasets {
  PairCache train;
  PairCache test;
};

Datasets load_datasets(const fs::path& root, Layout layout) {
  return {PairCache(load_manifest(root, layout, Split::train)),
          PairCache(load_manifest(root, layout, Split::test))};
}

TrainOptions train_options(const RunConfig& cfg, const fs::path& out) {
  TrainOptions opts;
  opts.patch_mode = cfg.data.patch_mode;
  opts.augment = cfg.data.augment;
  opts.out_dir = out;
  opts.config_digest = config_digest(cfg);
  opts.run_config = to_json(cfg);
  opts.on_iteration = [every = cfg.train.log_every, total = cfg.train.total_iters](const IterationRecord& r) {
    if (r.iter % every == 0 || r.iter + 1 == total) {
      std::printf("iter %lld  lr %.3g  loss %.5f\n", static_cast<long long>(r.iter), r.lr, r.loss);
      std::fflush(stdout);
    }
  };
  return opts;
}

struct TrainArgs {
  std::string config;
  std::string data_root;
  std::string out;
  std::string resume;
  std::optional<std::uint64_t> seed;
};

// Shared by train and ablate; returns the final test-split report.
MetricReport run_training(RunConfig cfg, const TrainArgs& args) {
  if (args.seed) cfg.train.master_seed = *args.seed;
  if (cfg.ablation.preset) cfg.model = ablation_config(ablation_preset(*cfg.ablation.preset), cfg.model);
  validate(cfg);
  const Datasets data = load_datasets(resolve_data_root(args.data_root), cfg.data.layout);
  const fs::path out(args.out);

  Model<float> model = build_model<float>(cfg.model, cfg.train.master_seed);
  OptimizerState state;
  std::int64_t start = 0;
  if (!args.resume.empty()) {
    const Checkpoint ckpt = load_checkpoint(args.resume);
    if (!(ckpt.model_config == cfg.model)) {
      throw ConfigError("--resume checkpoint was trained with a different model config");
    }
    if (ckpt.master_seed != cfg.train.master_seed) {
      throw ConfigError("--resume checkpoint was trained with master_seed " + std::to_string(ckpt.master_seed));
    }
    model = model_from_checkpoint(ckpt);
    state = ckpt.optimizer;
    start = ckpt.iteration;
    std::printf("resuming from iteration %lld\n", static_cast<long long>(start));
  }
  const TrainResult result = train(model, data.train, cfg.train, train_options(cfg, out), &state, start);
  if (result.last_checkpoint) std::printf("checkpoint %s\n", result.last_checkpoint->string().c_str());
  const MetricReport report = evaluate(model, data.test, config_digest(cfg));
  write_report(report, out / "report.json", out / "report.csv");
  return report;
}

int cmd_enhance(const std::string& ckpt_path, const std::string& in, const std::string& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Model<float> model = model_from_checkpoint(ckpt);
  std::vector<fs::path> inputs;
  if (fs::is_directory(in)) {
    for (const auto& e : fs::directory_iterator(in)) {
      if (e.is_regular_file()) inputs.push_back(e.path());
    }
    std::sort(inputs.begin(), inputs.end());
  } else if (fs::exists(in)) {
    inputs.push_back(in);
  } else {
    throw DataError("input not found: " + in);
  }
  fs::create_directories(out);
  int failures = 0;
  for (const auto& p : inputs) {
    try {
      const ImageBatch img = decode_image(p);
      const ImageBatch enhanced = enhance(model, img);
      const fs::path dst = fs::path(out) / (p.stem().string() + ".png");
      encode_png(enhanced, dst);
      std::printf("%s -> %s\n", p.string().c_str(), dst.string().c_str());
    } catch (const std::exception& e) {
      ++failures;
      std::fprintf(stderr, "error: %s: %s\n", p.string().c_str(), e.what());
    }
  }
  return failures == 0 ? 0 : kExitData;
}

void write_ablation_row(const AblationPreset& preset, const MetricReport& report, const fs::path& out) {
  nlohmann::ordered_json row;
  row["preset"] = preset.id;
  row["label"] = preset.label();
  row["components"] = {{"baseline", preset.baseline}, {"sfeb", preset.sfeb},       {"net1", preset.expert1},
                       {"net2", preset.expert2},       {"net3", preset.expert3},   {"wa", preset.gate}};
  row["measured"] = {{"psnr_db", report.mean_psnr_db}, {"ssim", report.mean_ssim}, {"count", report.count}};
  row["reference"] = {{"lol_v2_real", {{"psnr_db", preset.ref_real_psnr}, {"ssim", preset.ref_real_ssim}}},
                      {"lol_v2_syn", {{"psnr_db", preset.ref_syn_psnr}, {"ssim", preset.ref_syn_ssim}}}};
  row["note"] = "reference numbers are published full-scale results, shown for context only";
  write_text(out / "ablation_row.json", row.dump(2) + "\n");

  char line[512];
  std::snprintf(line, sizeof(line),
                "| ID | Config | PSNR | SSIM | ref LOL-v2-real PSNR/SSIM | ref LOL-v2-syn PSNR/SSIM |\n"
                "|---|---|---|---|---|---|\n"
                "| %d | %s | %.2f | %.4f | %.2f / %.4f | %.2f / %.4f |\n",
                preset.id, preset.label().c_str(), report.mean_psnr_db, report.mean_ssim, preset.ref_real_psnr,
                preset.ref_real_ssim, preset.ref_syn_psnr, preset.ref_syn_ssim);
  write_text(out / "ablation_row.md", line);
  std::fputs(line, stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gmmoe: gated mixture-of-experts low-light enhancement"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a model and evaluate it on the test split");
  train_cmd->add_option("--config", train_args.config, "Run config (TOML or JSON)")->required();
  train_cmd->add_option("--data-root", train_args.data_root, "Dataset root (default: $GMMOE_DATA_ROOT)");
  train_cmd->add_option("--out", train_args.out, "Output directory")->required();
  train_cmd->add_option("--resume", train_args.resume, "Checkpoint to resume from");
  train_cmd->add_option("--seed", train_args.seed, "Override train.master_seed");

  std::string eval_ckpt, eval_root, eval_layout = "generic_paired", eval_report;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--data-root", eval_root, "Dataset root (default: $GMMOE_DATA_ROOT)");
  eval_cmd->add_option("--layout", eval_layout, "lol_v1, lol_v2_real, lol_v2_syn, lsrw, generic_paired");
  eval_cmd->add_option("--report", eval_report, "Report JSON path (CSV written alongside)")->required();

  std::string enh_ckpt, enh_in, enh_out;
  auto* enh_cmd = app.add_subcommand("enhance", "Enhance one image or a directory of images");
  enh_cmd->add_option("--ckpt", enh_ckpt, "Checkpoint")->required();
  enh_cmd->add_option("--in", enh_in, "Image file or directory")->required();
  enh_cmd->add_option("--out", enh_out, "Output directory")->required();

  int preset_id = 0;
  TrainArgs ablate_args;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate one ablation preset");
  ablate_cmd->add_option("--preset", preset_id, "Preset 1..8")->required();
  ablate_cmd->add_option("--config", ablate_args.config, "Run config (TOML or JSON)")->required();
  ablate_cmd->add_option("--data-root", ablate_args.data_root, "Dataset root (default: $GMMOE_DATA_ROOT)");
  ablate_cmd->add_option("--out", ablate_args.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*train_cmd) {
      run_training(load_run_config(train_args.config), train_args);
    } else if (*eval_cmd) {
      const Layout layout = parse_layout(eval_layout);
      const fs::path root = resolve_data_root(eval_root);
      const Checkpoint ckpt = load_checkpoint(eval_ckpt);
      const Model<float> model = model_from_checkpoint(ckpt);
      const PairCache test(load_manifest(root, layout, Split::test));
      const fs::path report_path(eval_report);
      fs::path csv_path = report_path;
      csv_path.replace_extension(".csv");
      write_report(evaluate(model, test, ckpt.config_digest), report_path, csv_path);
    } else if (*enh_cmd) {
      return cmd_enhance(enh_ckpt, enh_in, enh_out);
    } else if (*ablate_cmd) {
      const AblationPreset preset = ablation_preset(preset_id);
      RunConfig cfg = load_run_config(ablate_args.config);
      cfg.ablation.preset = preset.id;
      const MetricReport report = run_training(cfg, ablate_args);
      write_ablation_row(preset, report, ablate_args.out);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kExitConfig;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return kExitData;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return 0;
}
