// vmapnet: dataset generation, training, evaluation and rendering.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vmap/pipeline.hpp"
#include "vmap/svg.hpp"

namespace fs = std::filesystem;
using namespace vmap;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

std::string read_config_file(const std::string& path) {
  try {
    return read_text(path);
  } catch (const DatasetError&) {
    throw ConfigError("cannot read config file " + path);
  }
}

std::pair<std::string, std::string> split_setting(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
  return {detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1))};
}

std::vector<double> parse_thresholds(const std::string& s) {
  std::vector<double> out;
  std::istringstream is(s);
  std::string part;
  while (std::getline(is, part, ',')) out.push_back(detail::parse_number<double>("thresholds", detail::trim(part)));
  return out;
}

std::vector<MetricKind> parse_metric(const std::string& m) {
  if (m == "chamfer") return {MetricKind::kChamfer};
  if (m == "frechet") return {MetricKind::kFrechet};
  if (m == "both") return {MetricKind::kChamfer, MetricKind::kFrechet};
  throw ConfigError("metric must be chamfer, frechet or both");
}

TrainConfig load_train_config(const std::string& path, const std::vector<std::string>& sets) {
  TrainConfig tc;
  if (!path.empty()) {
    for (const auto& [k, v] : parse_flat_config(read_config_file(path))) apply_setting(tc, k, v);
  }
  for (const auto& s : sets) {
    const auto [k, v] = split_setting(s);
    apply_setting(tc, k, v);
  }
  tc.validate();
  return tc;
}

void write_report(const std::string& path, const EvalOutput& out) {
  if (path.empty()) return;
  write_text(path, report_json(out).dump(2) + "\n");
}

void log_step(const StepLog& l) {
  std::fprintf(stderr, "stage %d step %6ld  lr %.2e  L_det %9.4f  L_gen %9.4f  total %9.4f  |g| %8.3f\n", l.stage,
               l.step, l.lr, l.l_det, l.l_gen, l.total, l.grad_norm);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vectorized HD map construction on synthetic BEV scenes"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  std::optional<int> gen_n;
  std::optional<std::uint64_t> gen_seed;
  std::string gen_out, gen_config, gen_splits;
  std::vector<std::string> gen_sets;
  gen->add_option("--n", gen_n, "Number of scenes");
  gen->add_option("--seed", gen_seed, "Dataset seed");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--config", gen_config, "Flat key=value data config");
  gen->add_option("--splits", gen_splits, "Split ratios, e.g. 0.8,0.2");
  gen->add_option("--set", gen_sets, "Override a config key (key=value)");

  // train
  auto* tr = app.add_subcommand("train", "Train the detector and generator");
  std::string tr_config, tr_stage = "both", tr_out, tr_dataset, tr_init;
  std::optional<std::uint64_t> tr_seed;
  std::vector<std::string> tr_sets;
  tr->add_option("--config", tr_config, "Flat key=value training config");
  tr->add_option("--stage", tr_stage, "1, 2 or both")->check(CLI::IsMember({"1", "2", "both"}));
  tr->add_option("--out", tr_out, "Output directory for checkpoints and the loss log")->required();
  tr->add_option("--dataset", tr_dataset, "Dataset directory");
  tr->add_option("--init", tr_init, "Checkpoint to start from (required for --stage 2)");
  tr->add_option("--seed", tr_seed, "Training seed");
  tr->add_option("--set", tr_sets, "Override a config key (key=value)");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint with Chamfer/Frechet AP");
  std::string ev_ckpt, ev_split = "val", ev_metric = "both", ev_thresholds = "0.5,1.0,1.5", ev_report, ev_dataset;
  double ev_score = 0.2;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--split", ev_split, "Dataset split");
  ev->add_option("--metric", ev_metric, "chamfer, frechet or both");
  ev->add_option("--thresholds", ev_thresholds, "Comma-separated distance thresholds (m)");
  ev->add_option("--report", ev_report, "Write the JSON report here");
  ev->add_option("--dataset", ev_dataset, "Dataset directory (default: the one used in training)");
  ev->add_option("--score-threshold", ev_score, "Minimum detection score");

  // oracle-eval
  auto* oe = app.add_subcommand("oracle-eval", "Evaluate ground truth against itself");
  std::string oe_split = "val", oe_dataset, oe_report, oe_thresholds = "0.5,1.0,1.5";
  oe->add_option("--split", oe_split, "Dataset split");
  oe->add_option("--dataset", oe_dataset, "Dataset directory")->required();
  oe->add_option("--thresholds", oe_thresholds, "Comma-separated distance thresholds (m)");
  oe->add_option("--report", oe_report, "Write the JSON report here");

  // render
  auto* rd = app.add_subcommand("render", "Render ground truth and predictions to SVG");
  std::string rd_scene, rd_ckpt, rd_out;
  double rd_score = 0.2;
  rd->add_option("--scene", rd_scene, "Scene file <dataset>/scenes/<id>.json")->required();
  rd->add_option("--ckpt", rd_ckpt, "Checkpoint; omit to draw ground truth only");
  rd->add_option("--out", rd_out, "Output SVG path")->required();
  rd->add_option("--score-threshold", rd_score, "Minimum detection score");

  // ablate-keypoints
  auto* ab = app.add_subcommand("ablate-keypoints", "Train and evaluate BBOX, SME and EXTREME keypoints");
  std::string ab_config, ab_dataset, ab_out, ab_split = "val", ab_report;
  std::vector<std::string> ab_sets;
  ab->add_option("--config", ab_config, "Flat key=value training config");
  ab->add_option("--dataset", ab_dataset, "Dataset directory");
  ab->add_option("--out", ab_out, "Output directory")->required();
  ab->add_option("--split", ab_split, "Evaluation split");
  ab->add_option("--report", ab_report, "Write the JSON results here");
  ab->add_option("--set", ab_sets, "Override a training config key (key=value)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*gen) {
      DatasetSpec spec;
      if (!gen_config.empty()) {
        for (const auto& [k, v] : parse_flat_config(read_config_file(gen_config))) apply_data_setting(spec, k, v);
      }
      for (const auto& s : gen_sets) {
        const auto [k, v] = split_setting(s);
        apply_data_setting(spec, k, v);
      }
      if (gen_n) spec.n_scenes = *gen_n;
      if (gen_seed) spec.seed = *gen_seed;
      if (!gen_splits.empty()) apply_data_setting(spec, "split_ratios", gen_splits);
      build_dataset(gen_out, spec);
      std::printf("wrote %d scenes to %s (hash %s)\n", spec.n_scenes, gen_out.c_str(), dataset_hash(gen_out).c_str());
    } else if (*tr) {
      TrainConfig tc = load_train_config(tr_config, tr_sets);
      if (!tr_dataset.empty()) tc.dataset = tr_dataset;
      if (tr_seed) tc.seed = *tr_seed;
      if (tc.dataset.empty()) throw ConfigError("no dataset given (--dataset or dataset = ... in the config)");
      const Dataset ds = load_dataset(tc.dataset);
      const int stages = tr_stage == "1" ? 1 : tr_stage == "2" ? 2 : 3;
      std::optional<fs::path> init;
      if (!tr_init.empty()) init = tr_init;
      const auto run = train(tc, ds, stages, tr_out, init, log_step);
      std::printf("final checkpoint %s\n", run.final_checkpoint.c_str());
    } else if (*ev) {
      const auto model = load_model(ev_ckpt);
      std::string dataset = ev_dataset;
      if (dataset.empty()) {
        dataset = read_checkpoint(ev_ckpt).config.at("train").value("dataset", "");
        if (dataset.empty()) throw ConfigError("no dataset given and the checkpoint does not name one");
      }
      EvalConfig ec;
      ec.split = ev_split;
      ec.thresholds = parse_thresholds(ev_thresholds);
      ec.kinds = parse_metric(ev_metric);
      ec.score_threshold = ev_score;
      const auto out = evaluate(*model, load_dataset(dataset), ec);
      std::fputs(format_table(out.report).c_str(), stdout);
      write_report(ev_report, out);
    } else if (*oe) {
      EvalConfig ec;
      ec.split = oe_split;
      ec.thresholds = parse_thresholds(oe_thresholds);
      const auto out = oracle_evaluate(load_dataset(oe_dataset), ec);
      std::fputs(format_table(out.report).c_str(), stdout);
      write_report(oe_report, out);
    } else if (*rd) {
      const fs::path scene_path(rd_scene);
      const fs::path root = scene_path.parent_path().parent_path();
      const std::string id = scene_path.stem().string();
      VectorMap gt;
      try {
        gt = map_from_json(nlohmann::json::parse(read_text(scene_path)));
      } catch (const nlohmann::json::exception& e) {
        throw DatasetError("malformed scene " + scene_path.string() + ": " + e.what());
      }
      const nlohmann::json manifest = nlohmann::json::parse(read_text(root / "manifest.json"));
      const GridSpec grid = grid_from_json(manifest.at("grid"));
      VectorMap pred;
      if (!rd_ckpt.empty()) {
        const auto model = load_model(rd_ckpt);
        for (auto& e : model->predict_map(read_raster(root / "rasters", id), rd_score).elements) {
          pred.push_back(std::move(e.element));
        }
      }
      write_svg(rd_out, render_svg(gt, pred, grid));
      std::printf("wrote %s\n", rd_out.c_str());
    } else if (*ab) {
      TrainConfig tc = load_train_config(ab_config, ab_sets);
      if (!ab_dataset.empty()) tc.dataset = ab_dataset;
      if (tc.dataset.empty()) throw ConfigError("no dataset given (--dataset or dataset = ... in the config)");
      const Dataset ds = load_dataset(tc.dataset);
      EvalConfig ec;
      ec.split = ab_split;
      const auto rows = keypoint_ablation(tc, ds, ec, ab_out, log_step);
      const std::string table = format_ablation_table(rows);
      std::fputs(table.c_str(), stdout);
      write_text(fs::path(ab_out) / "ablation_table.txt", table);
      if (!ab_report.empty()) write_text(ab_report, ablation_json(rows).dump(2) + "\n");
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const ad::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const DatasetError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const GeometryError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
