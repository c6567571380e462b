#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "warpdet/detector.hpp"
#include "warpdet/geometry.hpp"
#include "warpdet/task_stream.hpp"

namespace warpdet {

struct Detection {
  BoundingBox box;
  int class_id = 0;
  double score = 0.0;
  std::string image_id;
};

// Greedy NMS over detections of one class on one image: keep by descending
// score, suppress IoU > threshold against any kept box, ties by insertion order.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double threshold) {
  for (const auto& d : dets)
    if (d.class_id != dets.front().class_id || d.image_id != dets.front().image_id)
      throw std::invalid_argument("nms: detections must share one class and image");
  std::vector<BoundingBox> boxes;
  std::vector<double> scores;
  for (const auto& d : dets) {
    boxes.push_back(d.box);
    scores.push_back(d.score);
  }
  std::vector<Detection> out;
  for (int i : nms_keep_indices(boxes, scores, threshold)) out.push_back(dets[i]);
  return out;
}

struct GroundTruthBox {
  BoundingBox box;
  std::string image_id;
};

// Average precision for one class: greedy matching (highest-score detection
// first, each ground truth matched at most once, IoU >= threshold), then the
// area under the precision-recall curve with all-points interpolation.
// Returns nullopt when the class has no ground-truth instances.
inline std::optional<double> average_precision(std::vector<Detection> dets, const std::vector<GroundTruthBox>& gts,
                                               double iou_thresh) {
  if (gts.empty()) return std::nullopt;
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });

  std::map<std::string, std::vector<int>> gt_by_image;
  for (std::size_t i = 0; i < gts.size(); ++i) gt_by_image[gts[i].image_id].push_back(static_cast<int>(i));
  std::vector<char> matched(gts.size(), 0);

  std::vector<char> is_tp(dets.size(), 0);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    auto it = gt_by_image.find(dets[d].image_id);
    if (it == gt_by_image.end()) continue;
    double best = 0.0;
    int best_gt = -1;
    for (int gi : it->second) {
      if (matched[gi]) continue;
      const double v = iou(dets[d].box, gts[gi].box);
      if (v > best) {
        best = v;
        best_gt = gi;
      }
    }
    if (best_gt >= 0 && best >= iou_thresh) {
      matched[best_gt] = 1;
      is_tp[d] = 1;
    }
  }

  const double n_gt = static_cast<double>(gts.size());
  std::vector<double> recall, precision;
  double tp = 0, fp = 0;
  for (std::size_t d = 0; d < dets.size(); ++d) {
    is_tp[d] ? ++tp : ++fp;
    recall.push_back(tp / n_gt);
    precision.push_back(tp / (tp + fp));
  }

  // precision envelope integrated over recall
  double ap = 0.0, prev_recall = 0.0;
  std::vector<double> env_right(precision.size());
  double run = 0.0;
  for (std::size_t i = precision.size(); i-- > 0;) {
    run = std::max(run, precision[i]);
    env_right[i] = run;
  }
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * env_right[i];
    prev_recall = recall[i];
  }
  return ap;
}

struct EvalOptions {
  std::vector<double> iou_thresholds{0.5};  // first entry is the primary threshold
  double score_thresh = 0.05;
  double nms_thresh = 0.4;
  int max_dets = 100;
};

struct EvalReport {
  std::map<int, double> per_class_ap;  // at the primary IoU threshold; only classes with ground truth
  std::vector<int> excluded_classes;   // zero ground-truth instances: AP undefined
  double map_all = 0.0;
  std::optional<double> map_old;
  std::vector<double> iou_thresholds;
  std::map<int, double> per_class_ap_sweep;  // mean over thresholds, present when >1 threshold
  std::optional<double> map_sweep;
  double score_thresh = 0.0;
  double nms_thresh = 0.0;
  int max_dets = 0;
  int num_images = 0;
};

inline double mean_ap_over(const std::map<int, double>& per_class, const std::vector<int>& classes) {
  double s = 0.0;
  int n = 0;
  for (int c : classes) {
    auto it = per_class.find(c);
    if (it == per_class.end()) continue;
    s += it->second;
    ++n;
  }
  return n > 0 ? s / n : 0.0;
}

// Full-protocol evaluation: detect() on every test image, per-class AP at the
// primary threshold (plus an optional threshold sweep), mAP over evaluated
// classes, and mAP over `old_classes` when given.
inline EvalReport evaluate_model(const DetectorModel& model, const std::vector<DetectionSample>& test_samples,
                                 const std::vector<int>& old_classes = {}, const EvalOptions& opts = {}) {
  if (opts.iou_thresholds.empty()) throw std::invalid_argument("evaluate_model: no IoU thresholds");
  std::map<int, std::vector<Detection>> dets_by_class;
  std::map<int, std::vector<GroundTruthBox>> gts_by_class;
  for (const auto& s : test_samples) {
    for (const auto& a : s.annotations) gts_by_class[a.class_id].push_back({a.box, s.sample_id});
    for (const auto& d : detect(model, s.image, opts.score_thresh, opts.nms_thresh, opts.max_dets))
      dets_by_class[d.class_id].push_back({d.box, d.class_id, d.score, s.sample_id});
  }

  EvalReport report;
  report.iou_thresholds = opts.iou_thresholds;
  report.score_thresh = opts.score_thresh;
  report.nms_thresh = opts.nms_thresh;
  report.max_dets = opts.max_dets;
  report.num_images = static_cast<int>(test_samples.size());

  for (int c = 1; c <= model.cfg.num_classes; ++c) {
    const auto& gts = gts_by_class[c];
    if (gts.empty()) {
      report.excluded_classes.push_back(c);
      continue;
    }
    const auto& dets = dets_by_class[c];
    double sweep_sum = 0.0;
    for (std::size_t t = 0; t < opts.iou_thresholds.size(); ++t) {
      const double ap = average_precision(dets, gts, opts.iou_thresholds[t]).value();
      if (t == 0) report.per_class_ap[c] = ap;
      sweep_sum += ap;
    }
    if (opts.iou_thresholds.size() > 1)
      report.per_class_ap_sweep[c] = sweep_sum / static_cast<double>(opts.iou_thresholds.size());
  }

  double s = 0.0;
  for (const auto& [c, ap] : report.per_class_ap) s += ap;
  report.map_all = report.per_class_ap.empty() ? 0.0 : s / static_cast<double>(report.per_class_ap.size());
  if (!report.per_class_ap_sweep.empty()) {
    double ss = 0.0;
    for (const auto& [c, ap] : report.per_class_ap_sweep) ss += ap;
    report.map_sweep = ss / static_cast<double>(report.per_class_ap_sweep.size());
  }
  if (!old_classes.empty()) report.map_old = mean_ap_over(report.per_class_ap, old_classes);
  return report;
}

inline void to_json(json& j, const EvalReport& r) {
  json pc = json::object();
  for (const auto& [c, ap] : r.per_class_ap) pc[std::to_string(c)] = ap;
  j = json{{"per_class_ap", pc},
           {"excluded_classes", r.excluded_classes},
           {"map_all", r.map_all},
           {"iou_thresholds", r.iou_thresholds},
           {"score_thresh", r.score_thresh},
           {"nms_thresh", r.nms_thresh},
           {"max_dets", r.max_dets},
           {"num_images", r.num_images}};
  if (r.map_old) j["map_old"] = *r.map_old;
  if (r.map_sweep) {
    j["map_sweep"] = *r.map_sweep;
    json sw = json::object();
    for (const auto& [c, ap] : r.per_class_ap_sweep) sw[std::to_string(c)] = ap;
    j["per_class_ap_sweep"] = sw;
  }
}

inline void from_json(const json& j, EvalReport& r) {
  r.per_class_ap.clear();
  for (const auto& [k, v] : j.at("per_class_ap").items()) r.per_class_ap[std::stoi(k)] = v.get<double>();
  j.at("excluded_classes").get_to(r.excluded_classes);
  j.at("map_all").get_to(r.map_all);
  j.at("iou_thresholds").get_to(r.iou_thresholds);
  j.at("score_thresh").get_to(r.score_thresh);
  j.at("nms_thresh").get_to(r.nms_thresh);
  j.at("max_dets").get_to(r.max_dets);
  j.at("num_images").get_to(r.num_images);
  r.map_old.reset();
  if (j.contains("map_old")) r.map_old = j.at("map_old").get<double>();
  r.map_sweep.reset();
  r.per_class_ap_sweep.clear();
  if (j.contains("map_sweep")) {
    r.map_sweep = j.at("map_sweep").get<double>();
    for (const auto& [k, v] : j.at("per_class_ap_sweep").items()) r.per_class_ap_sweep[std::stoi(k)] = v.get<double>();
  }
}

}  // namespace warpdet
