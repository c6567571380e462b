#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "warpdet/evaluation.hpp"
#include "warpdet/task_stream.hpp"
#include "warpdet/trainer.hpp"
#include "warpdet/version.hpp"

namespace warpdet {

// ---------------------------------------------------------------------------
// configuration

struct DataConfig {
  SceneConfig scene;
  int train_images = 200;
  int test_images = 100;
  std::uint64_t data_seed = 1234;
};

inline void to_json(json& j, const DataConfig& d) {
  j = json{{"classes", d.scene.num_classes},
           {"image_size", d.scene.image_size},
           {"objects_min", d.scene.objects_min},
           {"objects_max", d.scene.objects_max},
           {"object_min_px", d.scene.object_min_px},
           {"object_max_px", d.scene.object_max_px},
           {"clutter", d.scene.clutter_count},
           {"noise", d.scene.noise_sigma},
           {"train_images", d.train_images},
           {"test_images", d.test_images},
           {"data_seed", d.data_seed}};
}

inline void from_json(const json& j, DataConfig& d) {
  d = DataConfig{};
  if (j.contains("classes")) j.at("classes").get_to(d.scene.num_classes);
  if (j.contains("image_size")) j.at("image_size").get_to(d.scene.image_size);
  if (j.contains("objects_min")) j.at("objects_min").get_to(d.scene.objects_min);
  if (j.contains("objects_max")) j.at("objects_max").get_to(d.scene.objects_max);
  if (j.contains("object_min_px")) j.at("object_min_px").get_to(d.scene.object_min_px);
  if (j.contains("object_max_px")) j.at("object_max_px").get_to(d.scene.object_max_px);
  if (j.contains("clutter")) j.at("clutter").get_to(d.scene.clutter_count);
  if (j.contains("noise")) j.at("noise").get_to(d.scene.noise_sigma);
  if (j.contains("train_images")) j.at("train_images").get_to(d.train_images);
  if (j.contains("test_images")) j.at("test_images").get_to(d.test_images);
  if (j.contains("data_seed")) j.at("data_seed").get_to(d.data_seed);
}

inline void to_json(json& j, const EvalOptions& e) {
  j = json{{"iou_thresholds", e.iou_thresholds},
           {"score_thresh", e.score_thresh},
           {"nms_thresh", e.nms_thresh},
           {"max_dets", e.max_dets}};
}

inline void from_json(const json& j, EvalOptions& e) {
  e = EvalOptions{};
  if (j.contains("iou_thresholds")) j.at("iou_thresholds").get_to(e.iou_thresholds);
  if (j.contains("score_thresh")) j.at("score_thresh").get_to(e.score_thresh);
  if (j.contains("nms_thresh")) j.at("nms_thresh").get_to(e.nms_thresh);
  if (j.contains("max_dets")) j.at("max_dets").get_to(e.max_dets);
}

struct ExperimentConfig {
  std::string name = "experiment";
  DataConfig data;
  std::string preset = "10+10";
  std::vector<std::vector<int>> explicit_tasks;  // non-empty overrides preset
  DetectorConfig detector;
  TrainConfig train;
  EvalOptions eval;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string output_dir = "runs/experiment";

  void validate() const {
    if (seeds.empty()) throw std::invalid_argument("experiment config: seeds must be non-empty");
    data.scene.validate();
    train.validate();
    if (detector.num_classes != data.scene.num_classes)
      throw std::invalid_argument("experiment config: detector class count must match the dataset registry");
  }
};

inline void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"name", c.name},        {"data", c.data},   {"preset", c.preset},
           {"tasks", c.explicit_tasks}, {"detector", c.detector}, {"train", c.train},
           {"eval", c.eval},        {"seeds", c.seeds}, {"output_dir", c.output_dir}};
}

inline void from_json(const json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  if (j.contains("name")) j.at("name").get_to(c.name);
  if (j.contains("data")) j.at("data").get_to(c.data);
  if (j.contains("preset")) j.at("preset").get_to(c.preset);
  if (j.contains("tasks")) j.at("tasks").get_to(c.explicit_tasks);
  if (j.contains("detector")) j.at("detector").get_to(c.detector);
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("eval")) j.at("eval").get_to(c.eval);
  if (j.contains("seeds")) j.at("seeds").get_to(c.seeds);
  if (j.contains("output_dir")) j.at("output_dir").get_to(c.output_dir);
  c.detector.num_classes = c.data.scene.num_classes;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot open config " + path.string());
  json j;
  f >> j;
  return j.get<ExperimentConfig>();
}

// output_dir is resolved under $WARPDET_OUTPUT_ROOT when set and relative
inline std::filesystem::path resolve_output_dir(const std::string& dir) {
  std::filesystem::path p(dir);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("WARPDET_OUTPUT_ROOT")) return std::filesystem::path(root) / p;
  return p;
}

// ---------------------------------------------------------------------------
// task presets (class ids are 1-based and dense)

inline std::vector<std::string> known_presets() { return {"10+10", "15+5", "19+1", "15+1x5", "joint"}; }

inline std::vector<TaskSpec> expand_preset(const std::string& preset, int num_classes) {
  auto range = [](int lo, int hi) {
    std::vector<int> v;
    for (int c = lo; c <= hi; ++c) v.push_back(c);
    return v;
  };
  auto need = [&](int n) {
    if (num_classes < n)
      throw std::invalid_argument("preset '" + preset + "' needs a registry of at least " + std::to_string(n) +
                                  " classes");
  };
  if (preset == "10+10") {
    need(20);
    return {{1, range(1, 10)}, {2, range(11, 20)}};
  }
  if (preset == "15+5") {
    need(20);
    return {{1, range(1, 15)}, {2, range(16, 20)}};
  }
  if (preset == "19+1") {
    need(20);
    return {{1, range(1, 19)}, {2, {20}}};
  }
  if (preset == "15+1x5") {
    need(20);
    std::vector<TaskSpec> specs{{1, range(1, 15)}};
    for (int c = 16; c <= 20; ++c) specs.push_back({static_cast<int>(specs.size()) + 1, {c}});
    return specs;
  }
  if (preset == "joint") return {{1, range(1, num_classes)}};
  std::string valid;
  for (const auto& p : known_presets()) valid += (valid.empty() ? "" : ", ") + p;
  throw std::invalid_argument("unknown preset '" + preset + "' (valid presets: " + valid + ")");
}

inline std::vector<TaskSpec> experiment_tasks(const ExperimentConfig& cfg) {
  if (!cfg.explicit_tasks.empty()) {
    std::vector<TaskSpec> specs;
    for (std::size_t i = 0; i < cfg.explicit_tasks.size(); ++i)
      specs.push_back({static_cast<int>(i) + 1, cfg.explicit_tasks[i]});
    validate_disjoint_specs(specs);
    return specs;
  }
  return expand_preset(cfg.preset, cfg.data.scene.num_classes);
}

// ---------------------------------------------------------------------------
// helpers

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty set");
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

inline std::string fmt_pct(double v) {  // mAP as percent with one decimal, paper style
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << v * 100.0;
  return os.str();
}

inline std::uint64_t config_hash(const json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// minimal deterministic SVG line chart (values in [0,1] on the y axis)
struct ChartSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

inline void write_svg_chart(const std::filesystem::path& path, const std::string& title,
                            const std::string& x_label, const std::vector<ChartSeries>& series) {
  const int w = 640, h = 420, ml = 60, mr = 140, mt = 40, mb = 50;
  double xmin = 1e300, xmax = -1e300;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
    }
  if (xmin >= xmax) {
    xmin -= 0.5;
    xmax += 0.5;
  }
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
  auto py = [&](double y) { return h - mb - y * (h - mt - mb); };
  const char* colors[] = {"#2b6cb0", "#c05621", "#2f855a", "#9b2c2c", "#6b46c1", "#4a5568"};

  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write chart " + path.string());
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  f << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << title << "</text>\n";
  f << "<line x1=\"" << ml << "\" y1=\"" << py(0) << "\" x2=\"" << w - mr << "\" y2=\"" << py(0)
    << "\" stroke=\"black\"/>\n";
  f << "<line x1=\"" << ml << "\" y1=\"" << py(0) << "\" x2=\"" << ml << "\" y2=\"" << py(1)
    << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double y = tick * 0.25;
    f << "<text x=\"" << ml - 8 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\" font-size=\"11\">"
      << std::fixed << std::setprecision(2) << y << "</text>\n";
    f << "<line x1=\"" << ml << "\" y1=\"" << py(y) << "\" x2=\"" << w - mr << "\" y2=\"" << py(y)
      << "\" stroke=\"#dddddd\"/>\n";
  }
  f << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
    << x_label << "</text>\n";
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    f << "<polyline fill=\"none\" stroke=\"" << colors[si % 6] << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : s.points) f << px(x) << "," << py(y) << " ";
    f << "\"/>\n";
    for (const auto& [x, y] : s.points)
      f << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << colors[si % 6] << "\"/>\n";
    f << "<text x=\"" << w - mr + 10 << "\" y=\"" << mt + 16 * si << "\" font-size=\"12\" fill=\""
      << colors[si % 6] << "\">" << s.label << "</text>\n";
    for (const auto& [x, y] : s.points) {
      f << "<text x=\"" << px(x) << "\" y=\"" << py(y) - 6 << "\" text-anchor=\"middle\" font-size=\"9\">"
        << std::fixed << std::setprecision(3) << y << "</text>\n";
    }
  }
  f << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
    << x_label << "</text>\n";
  f << "</svg>\n";
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  f << content;
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

// ---------------------------------------------------------------------------
// experiment execution

struct SeedRunResult {
  std::uint64_t seed = 0;
  std::vector<TaskResult> tasks;
};

struct ExperimentResult {
  std::vector<TaskSpec> specs;
  std::vector<SeedRunResult> per_seed;
  std::filesystem::path out_dir;
};

namespace detail {

struct BuiltData {
  ClassRegistry registry;
  std::vector<DetectionSample> train, test;
  std::vector<TaskDataset> splits;
};

inline BuiltData build_data(const ExperimentConfig& cfg, const std::vector<TaskSpec>& specs) {
  BuiltData d{cfg.data.scene.make_registry(), {}, {}, {}};
  d.train = make_synthetic_dataset(cfg.data.scene, cfg.data.train_images, mix_seed(cfg.data.data_seed, 0x7124), "tr_");
  // disjoint seed range; test annotations stay complete for all classes
  d.test = make_synthetic_dataset(cfg.data.scene, cfg.data.test_images, mix_seed(cfg.data.data_seed, 0x7e57), "te_");
  d.splits = build_incremental_splits(d.train, specs, d.registry);
  return d;
}

inline void write_manifest(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                           const std::string& command) {
  json cj = cfg;
  json manifest{{"command", command},
                {"version", kVersion},
                {"config", cj},
                {"config_hash", config_hash(cj)},
                {"seeds", cfg.seeds}};
  write_text_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
}

}  // namespace detail

// Runs the configured task sequence once per seed, persisting checkpoints,
// logs and reports under output_dir, plus aggregate median tables.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* progress = nullptr) {
  cfg.validate();
  const auto specs = experiment_tasks(cfg);
  const auto out_dir = resolve_output_dir(cfg.output_dir);
  std::filesystem::create_directories(out_dir);
  detail::write_manifest(cfg, out_dir, "train");
  auto data = detail::build_data(cfg, specs);

  ExperimentResult result;
  result.specs = specs;
  result.out_dir = out_dir;
  for (std::uint64_t seed : cfg.seeds) {
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    if (progress) *progress << "[seed " << seed << "] training " << specs.size() << " task(s)\n";
    auto tasks = run_sequence(data.splits, data.test, cfg.detector, tc, cfg.eval,
                              out_dir / ("seed_" + std::to_string(seed)), nullptr, progress);
    result.per_seed.push_back({seed, std::move(tasks)});
  }

  // aggregate: per task, median mAP over seeds (all / old / per-task-subset)
  std::ostringstream md, csv;
  md << "# " << cfg.name << "\n\n";
  md << "| task | mAP | mAP-old |";
  for (std::size_t t = 0; t < specs.size(); ++t) md << " T" << t + 1 << " mAP |";
  md << "\n|---|---|---|";
  for (std::size_t t = 0; t < specs.size(); ++t) md << "---|";
  md << "\n";
  csv << "task,map,map_old";
  for (std::size_t t = 0; t < specs.size(); ++t) csv << ",t" << t + 1 << "_map";
  csv << "\n";

  std::vector<ChartSeries> curve{{"mAP (all classes)", {}}, {"mAP (old classes)", {}}};
  for (std::size_t t = 0; t < specs.size(); ++t) {
    std::vector<double> maps, olds;
    std::vector<std::vector<double>> subsets(specs.size());
    for (const auto& sr : result.per_seed) {
      const auto& rep = sr.tasks[t].report;
      maps.push_back(rep.map_all);
      if (rep.map_old) olds.push_back(*rep.map_old);
      for (std::size_t k = 0; k < specs.size(); ++k)
        subsets[k].push_back(mean_ap_over(rep.per_class_ap, specs[k].class_ids));
    }
    const double m = median(maps);
    md << "| " << t + 1 << " | " << fmt_pct(m) << " | " << (olds.empty() ? "-" : fmt_pct(median(olds))) << " |";
    csv << t + 1 << "," << m << "," << (olds.empty() ? "" : std::to_string(median(olds)));
    for (std::size_t k = 0; k < specs.size(); ++k) {
      md << " " << fmt_pct(median(subsets[k])) << " |";
      csv << "," << median(subsets[k]);
    }
    md << "\n";
    csv << "\n";
    curve[0].points.push_back({static_cast<double>(t + 1), m});
    if (!olds.empty()) curve[1].points.push_back({static_cast<double>(t + 1), median(olds)});
  }
  write_text_file(out_dir / "tables" / "summary.md", md.str());
  write_text_file(out_dir / "tables" / "summary.csv", csv.str());
  std::filesystem::create_directories(out_dir / "plots");
  if (curve[1].points.empty()) curve.pop_back();
  write_svg_chart(out_dir / "plots" / "forgetting_curve.svg", "mAP across the task sequence", "task index", curve);
  return result;
}

// ---------------------------------------------------------------------------
// ablation matrix (distillation / gradient preconditioning / fine-tuning)

struct AblationRow {
  AblationFlags flags;
  double t1 = 0, t2 = 0, all = 0;  // median mAP over seeds, final checkpoint
};

inline const std::vector<AblationFlags>& ablation_combos() {
  static const std::vector<AblationFlags> combos{
      {true, false, false}, {true, false, true}, {false, true, false},
      {false, true, true},  {true, true, false}, {true, true, true},
  };
  return combos;
}

inline std::string ablation_table_markdown(const std::vector<AblationRow>& rows) {
  std::ostringstream md;
  md << "| D | G | F | T1 mAP | T2 mAP | All mAP |\n|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    md << "| " << (r.flags.distill ? "on" : "off") << " | " << (r.flags.warp ? "on" : "off") << " | "
       << (r.flags.finetune ? "on" : "off") << " | " << fmt_pct(r.t1) << " | " << fmt_pct(r.t2) << " | "
       << fmt_pct(r.all) << " |\n";
  }
  return md.str();
}

// Runs the six flag combinations on a two-task preset and reports median
// T1/T2/All mAP of the final checkpoint per combination.
inline std::vector<AblationRow> run_ablation_matrix(const ExperimentConfig& cfg, std::ostream* progress = nullptr) {
  cfg.validate();
  const auto specs = experiment_tasks(cfg);
  if (specs.size() != 2) throw std::invalid_argument("ablation matrix needs a two-task preset");
  const auto out_dir = resolve_output_dir(cfg.output_dir);
  std::filesystem::create_directories(out_dir);
  detail::write_manifest(cfg, out_dir, "ablate");
  auto data = detail::build_data(cfg, specs);

  std::vector<AblationRow> rows;
  for (const auto& flags : ablation_combos()) {
    const std::string tag = std::string(flags.distill ? "D" : "") + (flags.warp ? "G" : "") +
                            (flags.finetune ? "F" : "");
    std::vector<double> t1s, t2s, alls;
    for (std::uint64_t seed : cfg.seeds) {
      TrainConfig tc = cfg.train;
      tc.seed = seed;
      tc.flags = flags;
      if (progress) *progress << "[ablate " << tag << " seed " << seed << "]\n";
      auto tasks = run_sequence(data.splits, data.test, cfg.detector, tc, cfg.eval,
                                out_dir / ("combo_" + tag) / ("seed_" + std::to_string(seed)), nullptr, progress);
      const auto& rep = tasks.back().report;
      t1s.push_back(mean_ap_over(rep.per_class_ap, specs[0].class_ids));
      t2s.push_back(mean_ap_over(rep.per_class_ap, specs[1].class_ids));
      alls.push_back(rep.map_all);
    }
    rows.push_back({flags, median(t1s), median(t2s), median(alls)});
  }

  write_text_file(out_dir / "tables" / "ablation.md", ablation_table_markdown(rows));
  std::ostringstream csv;
  csv << "distill,warp,finetune,t1_map,t2_map,all_map\n";
  for (const auto& r : rows)
    csv << r.flags.distill << "," << r.flags.warp << "," << r.flags.finetune << "," << r.t1 << "," << r.t2 << ","
        << r.all << "\n";
  write_text_file(out_dir / "tables" / "ablation.csv", csv.str());
  return rows;
}

// ---------------------------------------------------------------------------
// alpha sweep (distillation-only protocol) and gamma-alpha grid

struct SweepRow {
  double alpha = 0;
  double t1 = 0, t2 = 0, all = 0;
};

inline std::string alpha_sweep_table_markdown(const std::vector<SweepRow>& rows) {
  std::ostringstream md;
  md << "| alpha | T1 mAP | T2 mAP | All mAP |\n|---|---|---|---|\n";
  for (const auto& r : rows)
    md << "| " << r.alpha << " | " << fmt_pct(r.t1) << " | " << fmt_pct(r.t2) << " | " << fmt_pct(r.all) << " |\n";
  return md.str();
}

// Distillation weight sensitivity on a two-task preset. Distillation is
// forced on (the sweep is meaningless without it); preconditioning and
// fine-tuning stay as configured.
inline std::vector<SweepRow> run_alpha_sweep(const ExperimentConfig& cfg, const std::vector<double>& alphas,
                                             std::ostream* progress = nullptr) {
  cfg.validate();
  if (alphas.empty()) throw std::invalid_argument("alpha sweep: need at least one alpha");
  for (double a : alphas)
    if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("alpha sweep: alpha outside [0,1]");
  const auto specs = experiment_tasks(cfg);
  if (specs.size() != 2) throw std::invalid_argument("alpha sweep needs a two-task preset");
  const auto out_dir = resolve_output_dir(cfg.output_dir);
  std::filesystem::create_directories(out_dir);
  detail::write_manifest(cfg, out_dir, "sweep-alpha");
  auto data = detail::build_data(cfg, specs);

  std::vector<SweepRow> rows;
  for (double alpha : alphas) {
    std::vector<double> t1s, t2s, alls;
    for (std::uint64_t seed : cfg.seeds) {
      TrainConfig tc = cfg.train;
      tc.seed = seed;
      tc.alpha = alpha;
      tc.flags.distill = true;
      if (progress) *progress << "[alpha " << alpha << " seed " << seed << "]\n";
      std::ostringstream dir;
      dir << "alpha_" << alpha << "/seed_" << seed;
      auto tasks = run_sequence(data.splits, data.test, cfg.detector, tc, cfg.eval, out_dir / dir.str(), nullptr,
                                progress);
      const auto& rep = tasks.back().report;
      t1s.push_back(mean_ap_over(rep.per_class_ap, specs[0].class_ids));
      t2s.push_back(mean_ap_over(rep.per_class_ap, specs[1].class_ids));
      alls.push_back(rep.map_all);
    }
    rows.push_back({alpha, median(t1s), median(t2s), median(alls)});
  }

  write_text_file(out_dir / "tables" / "alpha_sweep.md", alpha_sweep_table_markdown(rows));
  std::ostringstream csv;
  csv << "alpha,t1_map,t2_map,all_map\n";
  for (const auto& r : rows) csv << r.alpha << "," << r.t1 << "," << r.t2 << "," << r.all << "\n";
  write_text_file(out_dir / "tables" / "alpha_sweep.csv", csv.str());

  std::vector<ChartSeries> series{{"T1 mAP", {}}, {"T2 mAP", {}}, {"All mAP", {}}};
  for (const auto& r : rows) {
    series[0].points.push_back({r.alpha, r.t1});
    series[1].points.push_back({r.alpha, r.t2});
    series[2].points.push_back({r.alpha, r.all});
  }
  std::filesystem::create_directories(out_dir / "plots");
  write_svg_chart(out_dir / "plots" / "alpha_sweep.svg", "Distillation weight sensitivity", "alpha", series);
  return rows;
}

struct GridRow {
  double alpha = 0;
  std::vector<std::tuple<int, double, double, double>> by_gamma;  // gamma, t1, t2, all
};

inline std::string grid_table_markdown(const std::vector<int>& gammas, const std::vector<GridRow>& rows) {
  std::ostringstream md;
  md << "| alpha |";
  for (int gm : gammas) md << " g" << gm << " T1 | g" << gm << " T2 | g" << gm << " All |";
  md << "\n|---|";
  for (std::size_t i = 0; i < gammas.size() * 3; ++i) md << "---|";
  md << "\n";
  for (const auto& r : rows) {
    md << "| " << r.alpha << " |";
    for (const auto& [gm, t1, t2, all] : r.by_gamma)
      md << " " << fmt_pct(t1) << " | " << fmt_pct(t2) << " | " << fmt_pct(all) << " |";
    md << "\n";
  }
  return md.str();
}

// Warp-interval / distillation-weight interaction grid, full method engaged.
inline std::vector<GridRow> run_gamma_alpha_grid(const ExperimentConfig& cfg, const std::vector<int>& gammas,
                                                 const std::vector<double>& alphas,
                                                 std::ostream* progress = nullptr) {
  cfg.validate();
  if (gammas.empty() || alphas.empty()) throw std::invalid_argument("grid: need gammas and alphas");
  const auto specs = experiment_tasks(cfg);
  if (specs.size() != 2) throw std::invalid_argument("grid needs a two-task preset");
  const auto out_dir = resolve_output_dir(cfg.output_dir);
  std::filesystem::create_directories(out_dir);
  detail::write_manifest(cfg, out_dir, "grid-gamma-alpha");
  auto data = detail::build_data(cfg, specs);

  std::vector<GridRow> rows;
  for (double alpha : alphas) {
    GridRow row;
    row.alpha = alpha;
    for (int gamma : gammas) {
      std::vector<double> t1s, t2s, alls;
      for (std::uint64_t seed : cfg.seeds) {
        TrainConfig tc = cfg.train;
        tc.seed = seed;
        tc.alpha = alpha;
        tc.gamma = gamma;
        tc.flags = {true, true, true};
        if (progress) *progress << "[grid alpha " << alpha << " gamma " << gamma << " seed " << seed << "]\n";
        std::ostringstream dir;
        dir << "alpha_" << alpha << "_gamma_" << gamma << "/seed_" << seed;
        auto tasks = run_sequence(data.splits, data.test, cfg.detector, tc, cfg.eval, out_dir / dir.str(),
                                  nullptr, progress);
        const auto& rep = tasks.back().report;
        t1s.push_back(mean_ap_over(rep.per_class_ap, specs[0].class_ids));
        t2s.push_back(mean_ap_over(rep.per_class_ap, specs[1].class_ids));
        alls.push_back(rep.map_all);
      }
      row.by_gamma.push_back({gamma, median(t1s), median(t2s), median(alls)});
    }
    rows.push_back(std::move(row));
  }

  write_text_file(out_dir / "tables" / "gamma_alpha_grid.md", grid_table_markdown(gammas, rows));
  std::ostringstream csv;
  csv << "alpha,gamma,t1_map,t2_map,all_map\n";
  for (const auto& r : rows)
    for (const auto& [gm, t1, t2, all] : r.by_gamma)
      csv << r.alpha << "," << gm << "," << t1 << "," << t2 << "," << all << "\n";
  write_text_file(out_dir / "tables" / "gamma_alpha_grid.csv", csv.str());
  return rows;
}

// ---------------------------------------------------------------------------
// report regeneration from persisted artifacts (no training)

inline void emit_report(const std::filesystem::path& run_dir) {
  const auto manifest_path = run_dir / "manifest.json";
  std::ifstream mf(manifest_path);
  if (!mf) throw std::invalid_argument("no manifest.json under " + run_dir.string());
  json manifest;
  mf >> manifest;
  ExperimentConfig cfg = manifest.at("config").get<ExperimentConfig>();
  const auto specs = experiment_tasks(cfg);

  std::ostringstream md, csv;
  md << "# " << cfg.name << " (regenerated)\n\n";
  md << "| seed | task | mAP | mAP-old |";
  for (std::size_t t = 0; t < specs.size(); ++t) md << " T" << t + 1 << " mAP |";
  md << "\n|---|---|---|---|";
  for (std::size_t t = 0; t < specs.size(); ++t) md << "---|";
  md << "\n";
  csv << "seed,task,map,map_old";
  for (std::size_t t = 0; t < specs.size(); ++t) csv << ",t" << t + 1 << "_map";
  csv << "\n";

  std::vector<ChartSeries> curve;
  bool any = false;
  for (std::uint64_t seed : cfg.seeds) {
    ChartSeries series{"seed " + std::to_string(seed), {}};
    for (std::size_t t = 0; t < specs.size(); ++t) {
      const auto path = run_dir / ("seed_" + std::to_string(seed)) / ("task_" + std::to_string(t + 1)) / "report.json";
      std::ifstream rf(path);
      if (!rf) continue;
      json rj;
      rf >> rj;
      EvalReport rep = rj.get<EvalReport>();
      any = true;
      md << "| " << seed << " | " << t + 1 << " | " << fmt_pct(rep.map_all) << " | "
         << (rep.map_old ? fmt_pct(*rep.map_old) : "-") << " |";
      csv << seed << "," << t + 1 << "," << rep.map_all << "," << (rep.map_old ? std::to_string(*rep.map_old) : "");
      for (std::size_t k = 0; k < specs.size(); ++k) {
        const double v = mean_ap_over(rep.per_class_ap, specs[k].class_ids);
        md << " " << fmt_pct(v) << " |";
        csv << "," << v;
      }
      md << "\n";
      csv << "\n";
      series.points.push_back({static_cast<double>(t + 1), rep.map_all});
    }
    if (!series.points.empty()) curve.push_back(std::move(series));
  }
  if (!any) throw std::invalid_argument("no task reports found under " + run_dir.string());
  write_text_file(run_dir / "tables" / "per_seed.md", md.str());
  write_text_file(run_dir / "tables" / "per_seed.csv", csv.str());
  std::filesystem::create_directories(run_dir / "plots");
  write_svg_chart(run_dir / "plots" / "forgetting_curve_per_seed.svg", "mAP across the task sequence", "task index",
                  curve);
}

}  // namespace warpdet
