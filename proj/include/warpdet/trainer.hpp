#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "warpdet/detector.hpp"
#include "warpdet/evaluation.hpp"
#include "warpdet/losses.hpp"
#include "warpdet/stores.hpp"
#include "warpdet/task_stream.hpp"

namespace warpdet {

struct AblationFlags {
  bool distill = true;  // D: knowledge distillation from the previous-task model
  bool warp = true;     // G: meta-learned gradient preconditioning
  bool finetune = true; // F: exemplar fine-tuning before evaluation
};

struct TrainConfig {
  // task step length schedule: linear warm-up to mu, step decay to mu_final
  // at two thirds of the per-task iteration budget
  double mu = 0.02;
  double mu_final = 0.0002;
  int warmup_iters = 100;
  std::optional<double> upsilon;  // warp step length; unset -> follows the scheduled mu
  int gamma = 20;                 // warp update interval, counted in image steps
  double alpha = 0.2;             // distillation weight in the convex combination
  int iterations = 500;           // image steps per task
  int batch_size = 4;
  std::uint64_t seed = 1;
  AblationFlags flags;
  std::optional<double> ema_nu;   // mean-teacher variant; unset -> frozen teacher
  int finetune_steps = 300;
  double finetune_lr = 0.005;
  int store_capacity = 10;        // queue length for both stores
  double momentum = 0.9;
  bool hflip = false;

  // proposal/anchor sampling, pinned
  int roi_batch = 32;
  double roi_fg_fraction = 0.25;
  double roi_fg_iou = 0.5;
  double rpn_pos_iou = 0.7;
  double rpn_neg_iou = 0.3;
  int rpn_batch = 32;

  KlDirection kl_direction = KlDirection::kPrevToCur;
  bool store_background = true;

  void validate() const {
    if (gamma < 1) throw std::invalid_argument("train config: gamma must be >= 1");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("train config: alpha must lie in [0,1]");
    if (iterations <= 0) throw std::invalid_argument("train config: iterations must be positive");
    if (batch_size <= 0 || store_capacity <= 0 || roi_batch <= 0 || rpn_batch <= 0)
      throw std::invalid_argument("train config: sizes must be positive");
    if (ema_nu && !(*ema_nu >= 0.0 && *ema_nu <= 1.0))
      throw std::invalid_argument("train config: ema nu must lie in [0,1]");
  }

  double mu_at(int iter) const {  // 1-based image step within the task
    double lr = mu;
    if (warmup_iters > 0 && iter <= warmup_iters) lr = mu * static_cast<double>(iter) / warmup_iters;
    if (iter > (2 * iterations) / 3) lr = mu_final;
    return lr;
  }

  // a configured upsilon is the peak value and tracks the mu schedule shape,
  // so preconditioning updates settle together with the task updates
  double upsilon_at(int iter) const {
    if (!upsilon) return mu_at(iter);
    return *upsilon * (mu_at(iter) / mu);
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"mu", c.mu},
           {"mu_final", c.mu_final},
           {"warmup_iters", c.warmup_iters},
           {"gamma", c.gamma},
           {"alpha", c.alpha},
           {"iterations", c.iterations},
           {"batch_size", c.batch_size},
           {"seed", c.seed},
           {"distill", c.flags.distill},
           {"warp", c.flags.warp},
           {"finetune", c.flags.finetune},
           {"finetune_steps", c.finetune_steps},
           {"finetune_lr", c.finetune_lr},
           {"store_capacity", c.store_capacity},
           {"momentum", c.momentum},
           {"hflip", c.hflip},
           {"roi_batch", c.roi_batch},
           {"roi_fg_fraction", c.roi_fg_fraction},
           {"roi_fg_iou", c.roi_fg_iou},
           {"rpn_pos_iou", c.rpn_pos_iou},
           {"rpn_neg_iou", c.rpn_neg_iou},
           {"rpn_batch", c.rpn_batch},
           {"kl_direction", c.kl_direction == KlDirection::kPrevToCur ? "prev_to_cur" : "cur_to_prev"},
           {"store_background", c.store_background}};
  if (c.upsilon) j["upsilon"] = *c.upsilon;
  if (c.ema_nu) j["ema_nu"] = *c.ema_nu;
}

inline void from_json(const json& j, TrainConfig& c) {
  c = TrainConfig{};
  if (j.contains("mu")) j.at("mu").get_to(c.mu);
  if (j.contains("mu_final")) j.at("mu_final").get_to(c.mu_final);
  if (j.contains("warmup_iters")) j.at("warmup_iters").get_to(c.warmup_iters);
  if (j.contains("upsilon") && !j.at("upsilon").is_null()) c.upsilon = j.at("upsilon").get<double>();
  if (j.contains("gamma")) j.at("gamma").get_to(c.gamma);
  if (j.contains("alpha")) j.at("alpha").get_to(c.alpha);
  if (j.contains("iterations")) j.at("iterations").get_to(c.iterations);
  if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("distill")) j.at("distill").get_to(c.flags.distill);
  if (j.contains("warp")) j.at("warp").get_to(c.flags.warp);
  if (j.contains("finetune")) j.at("finetune").get_to(c.flags.finetune);
  if (j.contains("ema_nu") && !j.at("ema_nu").is_null()) c.ema_nu = j.at("ema_nu").get<double>();
  if (j.contains("finetune_steps")) j.at("finetune_steps").get_to(c.finetune_steps);
  if (j.contains("finetune_lr")) j.at("finetune_lr").get_to(c.finetune_lr);
  if (j.contains("store_capacity")) j.at("store_capacity").get_to(c.store_capacity);
  if (j.contains("momentum")) j.at("momentum").get_to(c.momentum);
  if (j.contains("hflip")) j.at("hflip").get_to(c.hflip);
  if (j.contains("roi_batch")) j.at("roi_batch").get_to(c.roi_batch);
  if (j.contains("roi_fg_fraction")) j.at("roi_fg_fraction").get_to(c.roi_fg_fraction);
  if (j.contains("roi_fg_iou")) j.at("roi_fg_iou").get_to(c.roi_fg_iou);
  if (j.contains("rpn_pos_iou")) j.at("rpn_pos_iou").get_to(c.rpn_pos_iou);
  if (j.contains("rpn_neg_iou")) j.at("rpn_neg_iou").get_to(c.rpn_neg_iou);
  if (j.contains("rpn_batch")) j.at("rpn_batch").get_to(c.rpn_batch);
  if (j.contains("kl_direction"))
    c.kl_direction = j.at("kl_direction").get<std::string>() == "cur_to_prev" ? KlDirection::kCurToPrev
                                                                              : KlDirection::kPrevToCur;
  if (j.contains("store_background")) j.at("store_background").get_to(c.store_background);
}

// Raised when a training step produces a non-finite loss; carries the batch
// contents for diagnosis.
struct TrainingDiverged : std::runtime_error {
  explicit TrainingDiverged(const std::string& what) : std::runtime_error(what) {}
};

struct TrainState {
  DetectorModel model;
  std::optional<DetectorModel> prev_model;  // frozen copy of the previous-task model
  ImageStore image_store;
  long long global_iteration = 0;
  int current_task = 0;
  Rng rng_batch, rng_store, rng_roi, rng_aug;
  LossDiagnostics diag;

  static TrainState create(const DetectorConfig& det_cfg, const TrainConfig& cfg) {
    cfg.validate();
    return TrainState{DetectorModel::create(det_cfg, cfg.seed),
                      std::nullopt,
                      ImageStore(cfg.store_capacity),
                      0,
                      0,
                      Rng(mix_seed(cfg.seed, 0xba7c0)),   // batch sampling
                      Rng(mix_seed(cfg.seed, 0x570e0)),   // store class assignment
                      Rng(mix_seed(cfg.seed, 0x0201)),    // anchor / RoI sampling
                      Rng(mix_seed(cfg.seed, 0x0a06)),    // augmentation
                      LossDiagnostics{}};
  }
};

// Hooks for instrumentation; called after each parameter update.
struct TrainObserver {
  virtual void on_task_update(const DetectorModel&, int iter) {}
  virtual void on_warp_update(const DetectorModel&, int iter) {}
  virtual ~TrainObserver() = default;
};

// ---------------------------------------------------------------------------
// anchor / RoI target assignment

struct AnchorAssignment {
  std::vector<int> labels;    // per flat anchor: 1 positive, 0 negative, -1 ignored
  std::vector<int> gt_index;  // matched ground truth for positives
};

inline AnchorAssignment assign_rpn_targets(const DetectorConfig& cfg, int hf, int wf,
                                           const std::vector<Annotation>& gts, double pos_iou, double neg_iou) {
  const int a_n = cfg.num_anchors();
  const std::size_t total = static_cast<std::size_t>(a_n) * hf * wf;
  AnchorAssignment out;
  out.labels.assign(total, 0);
  out.gt_index.assign(total, -1);
  if (gts.empty()) return out;

  std::vector<double> best_gt_iou(gts.size(), 0.0);
  std::vector<double> anchor_best(total, 0.0);
  std::vector<int> anchor_best_gt(total, -1);
  for (int a = 0; a < a_n; ++a) {
    for (int y = 0; y < hf; ++y) {
      for (int x = 0; x < wf; ++x) {
        const std::size_t fi = anchor_flat(a, y, x, hf, wf);
        const BoundingBox ab = anchor_box(cfg, a, y, x);
        for (std::size_t gi = 0; gi < gts.size(); ++gi) {
          const double v = iou(ab, gts[gi].box);
          if (v > anchor_best[fi]) {
            anchor_best[fi] = v;
            anchor_best_gt[fi] = static_cast<int>(gi);
          }
          best_gt_iou[gi] = std::max(best_gt_iou[gi], v);
        }
      }
    }
  }
  for (std::size_t fi = 0; fi < total; ++fi) {
    if (anchor_best[fi] >= pos_iou) {
      out.labels[fi] = 1;
      out.gt_index[fi] = anchor_best_gt[fi];
    } else if (anchor_best[fi] <= neg_iou) {
      out.labels[fi] = 0;
    } else {
      out.labels[fi] = -1;
    }
  }
  // every ground truth claims its best-overlap anchors, so positives exist
  for (std::size_t fi = 0; fi < total; ++fi) {
    const int gi = anchor_best_gt[fi];
    if (gi >= 0 && anchor_best[fi] > 0.0 && anchor_best[fi] >= best_gt_iou[gi] - 1e-12) {
      out.labels[fi] = 1;
      out.gt_index[fi] = gi;
    }
  }
  return out;
}

struct RoiTarget {
  BoundingBox box;          // the sampled region itself
  int label = 0;            // 0 background, else class id
  std::array<double, 4> reg{0, 0, 0, 0};
};

inline std::vector<RoiTarget> sample_rois(const std::vector<Proposal>& proposals,
                                          const std::vector<Annotation>& gts, const TrainConfig& cfg, Rng& rng) {
  std::vector<RoiTarget> cands;
  auto label_box = [&](const BoundingBox& box) {
    RoiTarget t;
    t.box = box;
    double best = 0.0;
    const Annotation* hit = nullptr;
    for (const auto& a : gts) {
      const double v = iou(box, a.box);
      if (v > best) {
        best = v;
        hit = &a;
      }
    }
    if (hit && best >= cfg.roi_fg_iou) {
      t.label = hit->class_id;
      t.reg = encode_box(hit->box, box);
    }
    return t;
  };
  for (const auto& p : proposals) cands.push_back(label_box(p.box));
  for (const auto& a : gts) cands.push_back(label_box(a.box));  // ground truth joins the pool during training

  std::vector<int> fg, bg;
  for (std::size_t i = 0; i < cands.size(); ++i) (cands[i].label > 0 ? fg : bg).push_back(static_cast<int>(i));
  const int want_fg = std::min<int>(static_cast<int>(fg.size()),
                                    std::max(1, static_cast<int>(std::lround(cfg.roi_batch * cfg.roi_fg_fraction))));
  rng.shuffle(fg);
  rng.shuffle(bg);
  std::vector<RoiTarget> out;
  for (int i = 0; i < want_fg; ++i) out.push_back(cands[fg[i]]);
  const int want_bg = std::min<int>(static_cast<int>(bg.size()), cfg.roi_batch - want_fg);
  for (int i = 0; i < want_bg; ++i) out.push_back(cands[bg[i]]);
  return out;
}

// ---------------------------------------------------------------------------
// one detection training step (shared by task training and fine-tuning)

struct StepResult {
  LossBundle losses;
  std::vector<Tensor> grads;
};

inline StepResult detection_step(const DetectorModel& model, const DetectorModel* teacher,
                                 const std::vector<int>& old_classes, const DetectionSample& sample,
                                 double alpha_eff, const TrainConfig& cfg, Rng& rng, LossDiagnostics* diag) {
  ad::Graph g;
  BoundModel bm = bind(g, model, true);
  const int ih = sample.height(), iw = sample.width();
  ad::NodeRef fmap = backbone_forward(bm, sample.image);
  RpnOut rpn = rpn_forward(bm, fmap, ih, iw);

  // objectness / box loss over a sampled set of anchors
  AnchorAssignment assign =
      assign_rpn_targets(model.cfg, rpn.hf, rpn.wf, sample.annotations, cfg.rpn_pos_iou, cfg.rpn_neg_iou);
  std::vector<int> pos, neg;
  for (std::size_t fi = 0; fi < assign.labels.size(); ++fi) {
    if (assign.labels[fi] == 1) pos.push_back(static_cast<int>(fi));
    else if (assign.labels[fi] == 0) neg.push_back(static_cast<int>(fi));
  }
  rng.shuffle(pos);
  rng.shuffle(neg);
  const int n_pos = std::min<int>(static_cast<int>(pos.size()), cfg.rpn_batch / 2);
  const int n_neg = std::min<int>(static_cast<int>(neg.size()), cfg.rpn_batch - n_pos);

  ad::NodeRef rpn_sum = nullptr;
  int rpn_count = 0;
  const int hfwf = rpn.hf * rpn.wf;
  auto anchor_term = [&](int fi, int label) {
    ad::NodeRef o = ad::sigmoid(g, ad::pick(g, rpn.obj_logits, static_cast<std::size_t>(fi)));
    ad::NodeRef pred = nullptr, target = nullptr;
    if (label == 1) {
      const int a = fi / hfwf, rem = fi % hfwf;
      const int y = rem / rpn.wf, x = rem % rpn.wf;
      std::vector<std::size_t> idx;
      for (int k = 0; k < 4; ++k)
        idx.push_back((static_cast<std::size_t>(a) * 4 + k) * hfwf + static_cast<std::size_t>(rem));
      pred = ad::gather(g, rpn.deltas, idx);
      const auto enc = encode_box(sample.annotations[assign.gt_index[fi]].box, anchor_box(model.cfg, a, y, x));
      target = g.constant(Tensor::from({4}, {enc[0], enc[1], enc[2], enc[3]}));
    } else {
      pred = g.constant(Tensor({4}));
      target = g.constant(Tensor({4}));
    }
    ad::NodeRef term = rpn_loss(g, o, label, pred, target, 1.0, diag);
    rpn_sum = rpn_sum ? ad::add(g, rpn_sum, term) : term;
    ++rpn_count;
  };
  for (int i = 0; i < n_pos; ++i) anchor_term(pos[i], 1);
  for (int i = 0; i < n_neg; ++i) anchor_term(neg[i], 0);
  ad::NodeRef l_rpn = rpn_count > 0 ? ad::scale(g, rpn_sum, 1.0 / rpn_count) : g.constant(Tensor::scalar(0.0));

  // RoI head loss over sampled proposals (+ ground truth boxes)
  std::vector<RoiTarget> rois = sample_rois(rpn.proposals, sample.annotations, cfg, rng);

  ad::NodeRef roi_sum = nullptr;
  for (const auto& roi : rois) {
    ad::NodeRef pooled = roi_pool(bm, fmap, roi.box);
    HeadOut head = roi_head_forward(bm, pooled);
    ad::NodeRef masked = mask_unseen_logits(g, head.class_logits, model.cfg.num_classes, model.seen_classes);
    ad::NodeRef probs = ad::softmax(g, masked);
    ad::NodeRef target =
        g.constant(Tensor::from({4}, {roi.reg[0], roi.reg[1], roi.reg[2], roi.reg[3]}));
    ad::NodeRef term = roi_head_loss(g, probs, roi.label, head.box_deltas, target, 1.0, diag);
    roi_sum = roi_sum ? ad::add(g, roi_sum, term) : term;
  }
  const double n_roi = static_cast<double>(rois.size());
  ad::NodeRef l_roi = roi_sum ? ad::scale(g, roi_sum, 1.0 / n_roi) : g.constant(Tensor::scalar(0.0));

  // distillation runs over the strongest current proposals: both heads consume
  // the same pooled features, the teacher branch detached
  ad::NodeRef distill_sum = nullptr;
  int distill_count = 0;
  if (teacher && alpha_eff > 0.0) {
    BoundModel tm = bind(g, *teacher, false);
    ad::NodeRef fmap_t = backbone_forward(tm, sample.image);
    const int n_distill = std::min<int>(cfg.roi_batch, static_cast<int>(rpn.proposals.size()));
    for (int i = 0; i < n_distill; ++i) {
      ad::NodeRef pooled = roi_pool(bm, fmap, rpn.proposals[i].box);
      HeadOut head = roi_head_forward(bm, pooled);
      ad::NodeRef probs =
          ad::softmax(g, mask_unseen_logits(g, head.class_logits, model.cfg.num_classes, model.seen_classes));
      ad::NodeRef pooled_stop = g.constant(pooled->value);
      HeadOut thead = roi_head_forward(tm, pooled_stop);
      ad::NodeRef tprobs =
          ad::softmax(g, mask_unseen_logits(g, thead.class_logits, teacher->cfg.num_classes, old_classes));
      ad::NodeRef dterm = distill_loss(g, fmap, fmap_t, probs, tprobs, head.box_deltas, thead.box_deltas,
                                       old_classes, cfg.kl_direction, diag);
      distill_sum = distill_sum ? ad::add(g, distill_sum, dterm) : dterm;
      ++distill_count;
    }
  }
  ad::NodeRef l_distill =
      distill_sum ? ad::scale(g, distill_sum, 1.0 / distill_count) : g.constant(Tensor::scalar(0.0));

  ad::NodeRef l_task = task_loss(g, l_distill, l_rpn, l_roi, distill_sum ? alpha_eff : 0.0);

  StepResult res;
  res.losses.rpn = l_rpn->value[0];
  res.losses.roi_head = l_roi->value[0];
  res.losses.distill = l_distill->value[0];
  res.losses.task = l_task->value[0];
  res.losses.has_distill = distill_sum != nullptr;
  if (!std::isfinite(res.losses.task))
    throw TrainingDiverged("non-finite task loss on sample " + sample.sample_id + " (rpn=" +
                           std::to_string(res.losses.rpn) + ", roi=" + std::to_string(res.losses.roi_head) +
                           ", distill=" + std::to_string(res.losses.distill) + ")");
  g.backward(l_task);
  res.grads = bm.grads();
  return res;
}

// ---------------------------------------------------------------------------
// warp loss over the feature store (rebuilt from the image store each time)

struct WarpLossResult {
  double value = 0.0;
  std::vector<Tensor> grads;
  int entries = 0;
};

inline WarpLossResult compute_warp_loss(const DetectorModel& model, const ImageStore& image_store,
                                        const TrainConfig& cfg, LossDiagnostics* diag = nullptr,
                                        std::ostream* warn = nullptr) {
  WarpLossResult res;
  if (image_store.empty()) {
    if (warn) *warn << "warp loss: image store is empty, no update\n";
    return res;
  }
  FeatureStore fstore(cfg.store_capacity);
  FeatureStoreFillOptions fill;
  fill.match_iou = cfg.roi_fg_iou;
  fill.keep_background = cfg.store_background;
  feature_store_fill(fstore, model, image_store, fill, warn);
  if (fstore.empty()) {
    if (warn) *warn << "warp loss: feature store is empty, no update\n";
    return res;
  }

  ad::Graph g;
  BoundModel bm = bind(g, model, true);
  ad::NodeRef total = nullptr;
  for (const auto& [cls, entry] : fstore.snapshot()) {
    ad::NodeRef feat = g.constant(entry.feature);  // gradients stop at stored features
    HeadOut head = roi_head_forward(bm, feat);
    ad::NodeRef masked = mask_unseen_logits(g, head.class_logits, model.cfg.num_classes, model.seen_classes);
    ad::NodeRef probs = ad::softmax(g, masked);
    ad::NodeRef target = g.constant(
        Tensor::from({4}, {entry.box_target[0], entry.box_target[1], entry.box_target[2], entry.box_target[3]}));
    ad::NodeRef term = warp_loss_per_roi(g, probs, entry.true_class, head.box_deltas, target, diag);
    total = total ? ad::add(g, total, term) : term;
    ++res.entries;
  }
  res.value = total->value[0];
  g.backward(total);
  res.grads = bm.grads();
  return res;
}

// Spec-facing scalar form.
inline double get_warp_loss(const DetectorModel& model, const ImageStore& image_store, const TrainConfig& cfg,
                            std::ostream* warn = nullptr) {
  return compute_warp_loss(model, image_store, cfg, nullptr, warn).value;
}

// ---------------------------------------------------------------------------
// Algorithm: learning one task

inline void learn_task(TrainState& state, const TaskDataset& dataset, const TrainConfig& cfg,
                       std::ostream* log = nullptr, TrainObserver* obs = nullptr, std::ostream* warn = nullptr) {
  cfg.validate();
  validate_task_dataset(dataset);
  if (dataset.spec.task_index > 1 && cfg.flags.distill && !state.prev_model)
    throw std::invalid_argument("learn_task: distillation requested but no previous model present");

  state.current_task = dataset.spec.task_index;
  for (int c : dataset.spec.class_ids) {
    if (std::find(state.model.seen_classes.begin(), state.model.seen_classes.end(), c) ==
        state.model.seen_classes.end())
      state.model.seen_classes.push_back(c);
  }

  std::vector<int> old_classes;
  if (state.prev_model) old_classes = state.prev_model->seen_classes;

  // mean-teacher variant: distillation targets come from an EMA copy; the
  // frozen previous model itself is never touched
  std::optional<DetectorModel> ema_teacher;
  if (cfg.ema_nu && state.prev_model) ema_teacher = *state.prev_model;

  const bool use_distill = cfg.flags.distill && state.prev_model.has_value();
  const double alpha_eff = use_distill ? cfg.alpha : 0.0;

  std::vector<int> batch;
  const int n_samples = static_cast<int>(dataset.samples.size());
  for (int iter = 1; iter <= cfg.iterations; ++iter) {
    if (batch.empty())
      for (int b = 0; b < cfg.batch_size; ++b)
        batch.push_back(static_cast<int>(state.rng_batch.next_below(static_cast<std::uint64_t>(n_samples))));
    const int idx = batch.back();
    batch.pop_back();

    DetectionSample sample = dataset.samples[idx];
    if (cfg.hflip && state.rng_aug.next_double() < 0.5) {
      const double w = sample.width();
      Tensor flipped = sample.image;
      for (int c = 0; c < sample.channels(); ++c)
        for (int y = 0; y < sample.height(); ++y)
          for (int x = 0; x < sample.width(); ++x) flipped.at(c, y, x) = sample.image.at(c, y, sample.width() - 1 - x);
      sample.image = std::move(flipped);
      for (auto& a : sample.annotations) a.box = a.box.hflipped(w);
    }

    image_store_add(state.image_store, sample, state.rng_store);

    const DetectorModel* teacher = nullptr;
    if (use_distill) teacher = ema_teacher ? &*ema_teacher : &*state.prev_model;

    StepResult step;
    try {
      step = detection_step(state.model, teacher, old_classes, sample, alpha_eff, cfg, state.rng_roi, &state.diag);
    } catch (const TrainingDiverged& e) {
      std::ostringstream os;
      os << e.what() << "; batch samples:";
      os << " " << sample.sample_id;
      for (int b : batch) os << " " << dataset.samples[b].sample_id;
      throw TrainingDiverged(os.str());
    }

    const double lr = cfg.mu_at(iter);
    apply_task_update(state.model, step.grads, lr, cfg.momentum);
    ++state.global_iteration;
    if (obs) obs->on_task_update(state.model, iter);

    if (ema_teacher) ema_teacher_update(*ema_teacher, state.model, *cfg.ema_nu);

    json line{{"iter", iter},
              {"task", dataset.spec.task_index},
              {"lr", lr},
              {"rpn", step.losses.rpn},
              {"roi_head", step.losses.roi_head},
              {"distill", step.losses.distill},
              {"task_loss", step.losses.task}};

    if (cfg.flags.warp && iter % cfg.gamma == 0) {
      WarpLossResult wl = compute_warp_loss(state.model, state.image_store, cfg, &state.diag, warn);
      if (wl.entries > 0) {
        apply_warp_update(state.model, wl.grads, cfg.upsilon_at(iter));
        if (obs) obs->on_warp_update(state.model, iter);
      }
      line["warp"] = wl.value;
      line["warp_update"] = wl.entries > 0;
    }
    if (log) *log << line.dump() << '\n';
  }
}

// Task-parameter adaptation on exemplar images before evaluation: detection
// loss only, preconditioning layers untouched, training model left intact.
// Each step averages gradients over a batch drawn from the store.
inline DetectorModel finetune_for_inference(const TrainState& state, int steps, const TrainConfig& cfg,
                                            std::ostream* log = nullptr) {
  if (state.image_store.empty()) throw std::invalid_argument("finetune_for_inference: image store is empty");
  DetectorModel tuned = state.model;
  for (auto& p : tuned.params) p.momentum.fill(0.0);  // fresh optimizer state

  auto snapshot = state.image_store.snapshot();
  Rng rng(mix_seed(cfg.seed, 0xf17e));
  LossDiagnostics diag;
  for (int s = 1; s <= steps; ++s) {
    std::vector<Tensor> acc;
    double rpn_sum = 0, roi_sum = 0;
    const int batch = cfg.batch_size;
    for (int b = 0; b < batch; ++b) {
      const auto& entry = snapshot[rng.next_below(snapshot.size())].second;
      StepResult step = detection_step(tuned, nullptr, {}, entry.sample, 0.0, cfg, rng, &diag);
      rpn_sum += step.losses.rpn;
      roi_sum += step.losses.roi_head;
      if (acc.empty()) {
        acc = std::move(step.grads);
      } else {
        for (std::size_t i = 0; i < acc.size(); ++i) {
          if (acc[i].empty()) continue;
          for (std::size_t k = 0; k < acc[i].numel(); ++k) acc[i][k] += step.grads[i][k];
        }
      }
    }
    for (auto& g : acc)
      for (std::size_t k = 0; k < g.numel(); ++k) g[k] /= batch;
    apply_task_update(tuned, acc, cfg.finetune_lr, cfg.momentum);
    if (log)
      *log << json{{"finetune_step", s}, {"rpn", rpn_sum / batch}, {"roi_head", roi_sum / batch}}.dump() << '\n';
  }
  return tuned;
}

// ---------------------------------------------------------------------------
// image store persistence (sample ids + assigned classes)

inline void save_image_store(const ImageStore& store, const std::filesystem::path& path) {
  json entries = json::array();
  for (const auto& [cls, e] : store.snapshot())
    entries.push_back({{"class", cls}, {"sample_id", e.sample.sample_id}});
  json j{{"capacity", store.capacity_per_class()}, {"entries", entries}};
  std::ofstream f(path);
  f << j.dump(2) << '\n';
  if (!f) throw std::runtime_error("cannot write image store " + path.string());
}

// ---------------------------------------------------------------------------
// full incremental sequence

struct TaskResult {
  int task_index = 0;
  EvalReport report;
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> finetuned_checkpoint;
};

// Trains the ordered task datasets, freezing a teacher copy before each task
// after the first, optionally fine-tuning before each evaluation on the
// all-classes test set. Artifacts land under out_dir when it is non-empty.
inline std::vector<TaskResult> run_sequence(const std::vector<TaskDataset>& datasets,
                                            const std::vector<DetectionSample>& test_samples,
                                            const DetectorConfig& det_cfg, const TrainConfig& cfg,
                                            const EvalOptions& eval_opts = {},
                                            const std::filesystem::path& out_dir = {},
                                            TrainObserver* obs = nullptr, std::ostream* warn = nullptr) {
  for (std::size_t i = 0; i < datasets.size(); ++i)
    if (datasets[i].spec.task_index != static_cast<int>(i) + 1)
      throw std::invalid_argument("run_sequence: datasets must be ordered by task index starting at 1");

  TrainState state = TrainState::create(det_cfg, cfg);
  std::vector<TaskResult> results;
  std::vector<int> old_classes;

  for (const auto& ds : datasets) {
    if (ds.spec.task_index > 1) state.prev_model = state.model;  // frozen teacher

    std::filesystem::path task_dir;
    std::ofstream log_file;
    if (!out_dir.empty()) {
      task_dir = out_dir / ("task_" + std::to_string(ds.spec.task_index));
      std::filesystem::create_directories(task_dir);
      log_file.open(task_dir / "train_log.jsonl");
    }
    learn_task(state, ds, cfg, log_file.is_open() ? &log_file : nullptr, obs, warn);

    DetectorModel eval_model = state.model;
    std::optional<std::filesystem::path> ft_path;
    if (cfg.flags.finetune) {
      eval_model = finetune_for_inference(state, cfg.finetune_steps, cfg);
      if (!task_dir.empty()) {
        ft_path = task_dir / "finetuned.ckpt";
        save_checkpoint(eval_model, *ft_path);
      }
    }

    EvalReport report = evaluate_model(eval_model, test_samples, old_classes, eval_opts);

    TaskResult tr;
    tr.task_index = ds.spec.task_index;
    tr.report = report;
    if (!task_dir.empty()) {
      tr.checkpoint = task_dir / "checkpoint.ckpt";
      save_checkpoint(state.model, tr.checkpoint);
      save_image_store(state.image_store, task_dir / "istore.json");
      std::ofstream rf(task_dir / "report.json");
      rf << json(report).dump(2) << '\n';
      tr.finetuned_checkpoint = ft_path;
    }
    results.push_back(std::move(tr));

    old_classes.insert(old_classes.end(), ds.spec.class_ids.begin(), ds.spec.class_ids.end());
  }
  return results;
}

}  // namespace warpdet
