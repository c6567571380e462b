#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "warpdet/experiment.hpp"
#include "warpdet/version.hpp"

using namespace warpdet;

namespace {

ExperimentConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return ExperimentConfig{};
  return load_experiment_config(path);
}

void write_error_manifest(const ExperimentConfig& cfg, const std::string& message) {
  try {
    const auto dir = resolve_output_dir(cfg.output_dir);
    std::filesystem::create_directories(dir);
    std::ofstream f(dir / "error.json");
    f << json{{"error", message}, {"version", kVersion}}.dump(2) << '\n';
  } catch (...) {
    // the error itself is already being reported
  }
}

struct CommonOpts {
  std::string config_path;
  std::string output_dir;
  std::vector<std::uint64_t> seeds;
  std::optional<double> alpha;
  std::optional<int> gamma;
  std::optional<int> iterations;
  std::string preset;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "experiment config file (JSON)");
    cmd->add_option("-o,--output-dir", output_dir, "override the output directory");
    cmd->add_option("--seeds", seeds, "override the seed list")->delimiter(',');
    cmd->add_option("--alpha", alpha, "override the distillation weight");
    cmd->add_option("--gamma", gamma, "override the warp update interval");
    cmd->add_option("--iterations", iterations, "override per-task iterations");
    cmd->add_option("--preset", preset, "task preset (10+10, 15+5, 19+1, 15+1x5, joint)");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig cfg = load_config_or_default(config_path);
    if (!output_dir.empty()) cfg.output_dir = output_dir;
    if (!seeds.empty()) cfg.seeds = seeds;
    if (alpha) cfg.train.alpha = *alpha;
    if (gamma) cfg.train.gamma = *gamma;
    if (iterations) cfg.train.iterations = *iterations;
    if (!preset.empty()) cfg.preset = preset;
    return cfg;
  }
};

int exit_validation(const std::exception& e) {
  std::cerr << "error: " << e.what() << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"warpdet: incremental object detection with meta-learned gradient preconditioning"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "render a synthetic dataset to disk");
  std::string gen_config, gen_out = "data";
  gen->add_option("-c,--config", gen_config, "experiment config file (JSON)");
  gen->add_option("-o,--out", gen_out, "output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "run the incremental task sequence per seed");
  CommonOpts train_opts;
  train_opts.attach(train);
  bool no_distill = false, no_warp = false, no_finetune = false;
  train->add_flag("--no-distill", no_distill, "disable distillation");
  train->add_flag("--no-warp", no_warp, "disable gradient preconditioning updates");
  train->add_flag("--no-finetune", no_finetune, "disable exemplar fine-tuning before evaluation");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "run the D/G/F ablation matrix on a two-task preset");
  CommonOpts ablate_opts;
  ablate_opts.attach(ablate);

  // sweep-alpha
  auto* sweep = app.add_subcommand("sweep-alpha", "distillation weight sensitivity sweep");
  CommonOpts sweep_opts;
  sweep_opts.attach(sweep);
  std::vector<double> sweep_alphas{0.1, 0.2, 0.4, 0.6, 0.8};
  sweep->add_option("--alphas", sweep_alphas, "alpha values")->delimiter(',');

  // grid-gamma-alpha
  auto* grid = app.add_subcommand("grid-gamma-alpha", "warp interval / distillation weight grid");
  CommonOpts grid_opts;
  grid_opts.attach(grid);
  std::vector<int> grid_gammas{20, 100};
  std::vector<double> grid_alphas{0.1, 0.4, 0.8};
  grid->add_option("--gammas", grid_gammas, "gamma values")->delimiter(',');
  grid->add_option("--alphas", grid_alphas, "alpha values")->delimiter(',');

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "score a checkpoint on a serialized dataset");
  std::string eval_ckpt, eval_data, eval_out;
  std::vector<int> eval_old;
  bool eval_sweep = false;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "dataset directory (annotations.jsonl + images/)")->required();
  eval->add_option("--out", eval_out, "write the report JSON here");
  eval->add_option("--old-classes", eval_old, "class ids counted as previously seen")->delimiter(',');
  eval->add_flag("--iou-sweep", eval_sweep, "also evaluate the 0.50:0.05:0.95 threshold sweep");

  // report
  auto* report = app.add_subcommand("report", "regenerate tables and plots from persisted run artifacts");
  std::string report_dir;
  report->add_option("--run-dir", report_dir, "experiment output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      ExperimentConfig cfg = load_config_or_default(gen_config);
      cfg.data.scene.validate();
      const auto out = resolve_output_dir(gen_out);
      auto train_set =
          make_synthetic_dataset(cfg.data.scene, cfg.data.train_images, mix_seed(cfg.data.data_seed, 0x7124), "tr_");
      auto test_set =
          make_synthetic_dataset(cfg.data.scene, cfg.data.test_images, mix_seed(cfg.data.data_seed, 0x7e57), "te_");
      save_dataset(train_set, out / "train");
      save_dataset(test_set, out / "test");
      std::cout << "wrote " << train_set.size() << " train and " << test_set.size() << " test samples under " << out
                << '\n';
      return 0;
    }

    if (train->parsed()) {
      ExperimentConfig cfg = train_opts.resolve();
      if (no_distill) cfg.train.flags.distill = false;
      if (no_warp) cfg.train.flags.warp = false;
      if (no_finetune) cfg.train.flags.finetune = false;
      try {
        cfg.validate();
      } catch (const std::invalid_argument& e) {
        return exit_validation(e);
      }
      try {
        auto result = run_experiment(cfg, &std::cout);
        std::cout << "artifacts under " << result.out_dir << '\n';
      } catch (const std::exception& e) {
        std::cerr << "run failed: " << e.what() << '\n';
        write_error_manifest(cfg, e.what());
        return 2;
      }
      return 0;
    }

    if (ablate->parsed()) {
      ExperimentConfig cfg = ablate_opts.resolve();
      try {
        cfg.validate();
        if (experiment_tasks(cfg).size() != 2)
          throw std::invalid_argument("ablation matrix needs a two-task preset");
      } catch (const std::invalid_argument& e) {
        return exit_validation(e);
      }
      try {
        auto rows = run_ablation_matrix(cfg, &std::cout);
        std::cout << ablation_table_markdown(rows);
      } catch (const std::exception& e) {
        std::cerr << "run failed: " << e.what() << '\n';
        write_error_manifest(cfg, e.what());
        return 2;
      }
      return 0;
    }

    if (sweep->parsed()) {
      ExperimentConfig cfg = sweep_opts.resolve();
      try {
        cfg.validate();
      } catch (const std::invalid_argument& e) {
        return exit_validation(e);
      }
      try {
        auto rows = run_alpha_sweep(cfg, sweep_alphas, &std::cout);
        std::cout << alpha_sweep_table_markdown(rows);
      } catch (const std::exception& e) {
        std::cerr << "run failed: " << e.what() << '\n';
        write_error_manifest(cfg, e.what());
        return 2;
      }
      return 0;
    }

    if (grid->parsed()) {
      ExperimentConfig cfg = grid_opts.resolve();
      try {
        cfg.validate();
      } catch (const std::invalid_argument& e) {
        return exit_validation(e);
      }
      try {
        auto rows = run_gamma_alpha_grid(cfg, grid_gammas, grid_alphas, &std::cout);
        std::cout << grid_table_markdown(grid_gammas, rows);
      } catch (const std::exception& e) {
        std::cerr << "run failed: " << e.what() << '\n';
        write_error_manifest(cfg, e.what());
        return 2;
      }
      return 0;
    }

    if (eval->parsed()) {
      auto model = load_checkpoint(eval_ckpt);
      auto registry = ClassRegistry::numbered(model.cfg.num_classes);
      auto samples = load_dataset(eval_data, registry);
      EvalOptions opts;
      if (eval_sweep)
        for (double t = 0.55; t < 0.96; t += 0.05) opts.iou_thresholds.push_back(t);
      auto rep = evaluate_model(model, samples, eval_old, opts);
      json rj = rep;
      if (!eval_out.empty()) {
        std::ofstream f(eval_out);
        f << rj.dump(2) << '\n';
      }
      std::cout << "mAP@" << opts.iou_thresholds[0] << " = " << fmt_pct(rep.map_all) << "%";
      if (rep.map_old) std::cout << ", mAP-old = " << fmt_pct(*rep.map_old) << "%";
      if (rep.map_sweep) std::cout << ", mAP sweep mean = " << fmt_pct(*rep.map_sweep) << "%";
      std::cout << '\n';
      return 0;
    }

    if (report->parsed()) {
      emit_report(report_dir);
      std::cout << "tables and plots regenerated under " << report_dir << '\n';
      return 0;
    }
  } catch (const std::invalid_argument& e) {
    return exit_validation(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
