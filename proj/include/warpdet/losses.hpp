#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "warpdet/autodiff.hpp"
#include "warpdet/detector.hpp"
#include "warpdet/tensor.hpp"

namespace warpdet {

constexpr double kLogEps = 1e-12;

// Clamp events on log terms; owned by the caller (the trainer keeps one per run).
struct LossDiagnostics {
  std::uint64_t log_clamp_hits = 0;
};

// Scalar loss components of one training step, for the JSONL log.
struct LossBundle {
  double rpn = 0.0;
  double roi_head = 0.0;
  double distill = 0.0;
  double task = 0.0;
  bool has_distill = false;
};

// ---------------------------------------------------------------------------
// elementary losses

// sum over coordinates of 0.5 d^2 (|d|<1) else |d|-0.5
inline ad::NodeRef smooth_l1(ad::Graph& g, ad::NodeRef pred, ad::NodeRef target) {
  if (pred->value.numel() != target->value.numel())
    throw std::invalid_argument("smooth_l1: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < pred->value.numel(); ++i) {
    const double d = pred->value[i] - target->value[i];
    s += std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
  }
  ad::NodeRef n = g.make(Tensor::scalar(s), pred->needs_grad || target->needs_grad);
  if (n->needs_grad)
    n->backprop = [n, pred, target] {
      for (std::size_t i = 0; i < pred->value.numel(); ++i) {
        const double d = pred->value[i] - target->value[i];
        const double dd = std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0);
        if (pred->needs_grad) pred->grad[i] += n->grad[0] * dd;
        if (target->needs_grad) target->grad[i] -= n->grad[0] * dd;
      }
    };
  return n;
}

// -log p[label], log clamped at kLogEps
inline ad::NodeRef class_log_loss(ad::Graph& g, ad::NodeRef probs, int label, LossDiagnostics* diag = nullptr) {
  if (label < 0 || static_cast<std::size_t>(label) >= probs->value.numel())
    throw std::invalid_argument("class_log_loss: label out of range");
  std::uint64_t* hits = diag ? &diag->log_clamp_hits : nullptr;
  return ad::scale(g, ad::log_clamped(g, ad::pick(g, probs, static_cast<std::size_t>(label)), kLogEps, hits), -1.0);
}

// Per-RoI detection loss: classification log loss plus lambda-weighted
// localization for foreground targets. `probs` is a probability vector over
// masked logits; label 0 is background and carries no box term.
inline ad::NodeRef roi_head_loss(ad::Graph& g, ad::NodeRef probs, int true_class, ad::NodeRef box_pred,
                                 ad::NodeRef box_target, double lambda = 1.0, LossDiagnostics* diag = nullptr) {
  ad::NodeRef loss = class_log_loss(g, probs, true_class, diag);
  if (true_class >= 1) loss = ad::add_scaled(g, loss, 1.0, smooth_l1(g, box_pred, box_target), lambda);
  return loss;
}

// Same structure with the localization weight fixed to 1; this is the per-RoI
// term accumulated over the feature store.
inline ad::NodeRef warp_loss_per_roi(ad::Graph& g, ad::NodeRef probs, int true_class, ad::NodeRef box_pred,
                                     ad::NodeRef box_target, LossDiagnostics* diag = nullptr) {
  return roi_head_loss(g, probs, true_class, box_pred, box_target, 1.0, diag);
}

// Per-anchor objectness loss: binary cross-entropy on the probability plus
// lambda-weighted localization for positive anchors.
inline ad::NodeRef rpn_loss(ad::Graph& g, ad::NodeRef objectness, int obj_target, ad::NodeRef box_pred,
                            ad::NodeRef box_target, double lambda = 1.0, LossDiagnostics* diag = nullptr) {
  if (objectness->value.numel() != 1) throw std::invalid_argument("rpn_loss: objectness must be scalar");
  if (obj_target != 0 && obj_target != 1) throw std::invalid_argument("rpn_loss: target must be 0 or 1");
  const double o = objectness->value[0];
  const double po = std::max(o, kLogEps);
  const double qo = std::max(1.0 - o, kLogEps);
  if (diag && (o < kLogEps || 1.0 - o < kLogEps)) ++diag->log_clamp_hits;
  const double bce = obj_target == 1 ? -std::log(po) : -std::log(qo);
  ad::NodeRef n = g.make(Tensor::scalar(bce), objectness->needs_grad);
  if (n->needs_grad)
    n->backprop = [n, objectness, obj_target] {
      const double o2 = objectness->value[0];
      if (obj_target == 1) {
        if (o2 >= kLogEps) objectness->grad[0] -= n->grad[0] / o2;
      } else {
        if (1.0 - o2 >= kLogEps) objectness->grad[0] += n->grad[0] / (1.0 - o2);
      }
    };
  if (obj_target == 1) n = ad::add_scaled(g, n, 1.0, smooth_l1(g, box_pred, box_target), lambda);
  return n;
}

// ---------------------------------------------------------------------------
// distillation

enum class KlDirection { kPrevToCur, kCurToPrev };

// KL(p || q) after renormalizing both distributions over `subset`.
// Gradients are exact wherever no clamp fires.
inline ad::NodeRef kl_subset(ad::Graph& g, ad::NodeRef p, ad::NodeRef q, const std::vector<int>& subset,
                             LossDiagnostics* diag = nullptr) {
  if (subset.empty()) throw std::invalid_argument("kl_subset: empty index set");
  if (p->value.numel() != q->value.numel()) throw std::invalid_argument("kl_subset: length mismatch");
  for (int i : subset)
    if (i < 0 || static_cast<std::size_t>(i) >= p->value.numel())
      throw std::invalid_argument("kl_subset: index out of range");

  double ps = 0.0, qs = 0.0;
  for (int i : subset) {
    ps += std::max(p->value[i], 0.0);
    qs += std::max(q->value[i], 0.0);
  }
  bool clamped = ps < kLogEps || qs < kLogEps;
  ps = std::max(ps, kLogEps);
  qs = std::max(qs, kLogEps);
  double kl = 0.0;
  for (int i : subset) {
    const double a = std::max(p->value[i], 0.0) / ps;
    const double b = std::max(q->value[i], 0.0) / qs;
    if (a <= 0.0) continue;  // 0 log 0 = 0
    if (b < kLogEps / qs) clamped = true;
    kl += a * std::log(std::max(a, kLogEps) / std::max(b, kLogEps));
  }
  kl = std::max(kl, 0.0);  // numerical floor; KL is non-negative
  if (clamped && diag) ++diag->log_clamp_hits;

  ad::NodeRef n = g.make(Tensor::scalar(kl), p->needs_grad || q->needs_grad);
  if (n->needs_grad)
    n->backprop = [n, p, q, subset, kl] {
      double ps2 = 0.0, qs2 = 0.0;
      for (int i : subset) {
        ps2 += std::max(p->value[i], 0.0);
        qs2 += std::max(q->value[i], 0.0);
      }
      if (ps2 < kLogEps || qs2 < kLogEps) return;  // clamped region: no gradient
      for (int i : subset) {
        const double a = p->value[i] / ps2;
        const double b = q->value[i] / qs2;
        if (a < kLogEps || b < kLogEps) continue;
        if (q->needs_grad) q->grad[i] += n->grad[0] * (1.0 / qs2 - a / q->value[i]);
        if (p->needs_grad) p->grad[i] += n->grad[0] * (std::log(a / b) - kl) / ps2;
      }
    };
  return n;
}

// Feature regression + class-distribution KL over previously seen classes +
// box regression, between current outputs and a frozen previous model.
// Both probability vectors are renormalized over old_classes plus background
// before the KL term.
inline ad::NodeRef distill_loss(ad::Graph& g, ad::NodeRef feat_cur, ad::NodeRef feat_prev, ad::NodeRef probs_cur,
                                ad::NodeRef probs_prev, ad::NodeRef box_cur, ad::NodeRef box_prev,
                                const std::vector<int>& old_classes,
                                KlDirection direction = KlDirection::kPrevToCur,
                                LossDiagnostics* diag = nullptr) {
  if (old_classes.empty()) throw std::invalid_argument("distill_loss: no previously seen classes");
  std::vector<int> subset{kBackgroundClass};
  subset.insert(subset.end(), old_classes.begin(), old_classes.end());
  ad::NodeRef kl = direction == KlDirection::kPrevToCur ? kl_subset(g, probs_prev, probs_cur, subset, diag)
                                                        : kl_subset(g, probs_cur, probs_prev, subset, diag);
  ad::NodeRef reg_feat = ad::mse(g, feat_cur, feat_prev);
  ad::NodeRef reg_box = ad::mse(g, box_cur, box_prev);
  return ad::add(g, ad::add(g, reg_feat, kl), reg_box);
}

// Adds backbone-feature regression terms over unlabeled auxiliary images to
// an existing distillation loss. Empty set is the identity.
inline ad::NodeRef aux_distill_loss(ad::Graph& g, ad::NodeRef distill,
                                    const std::vector<std::pair<ad::NodeRef, ad::NodeRef>>& aux_feature_pairs) {
  ad::NodeRef loss = distill;
  for (const auto& [cur, prev] : aux_feature_pairs) loss = ad::add(g, loss, ad::mse(g, cur, prev));
  return loss;
}

// Convex combination of the distillation and detection losses.
inline ad::NodeRef task_loss(ad::Graph& g, ad::NodeRef distill, ad::NodeRef rpn, ad::NodeRef roi_head, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("task_loss: alpha must lie in [0,1]");
  return ad::add_scaled(g, distill, alpha, ad::add(g, rpn, roi_head), 1.0 - alpha);
}

// ---------------------------------------------------------------------------
// mean-teacher update: teacher <- nu * teacher + (1 - nu) * student

inline void ema_teacher_update(std::map<std::string, Tensor>& teacher, const std::map<std::string, Tensor>& student,
                               double nu) {
  if (!(nu >= 0.0 && nu <= 1.0)) throw std::invalid_argument("ema_teacher_update: nu must lie in [0,1]");
  if (teacher.size() != student.size()) throw std::invalid_argument("ema_teacher_update: parameter name sets differ");
  if (nu == 1.0) return;  // exact identity
  for (auto& [name, t] : teacher) {
    auto it = student.find(name);
    if (it == student.end()) throw std::invalid_argument("ema_teacher_update: missing student parameter " + name);
    if (!t.same_shape(it->second)) throw std::invalid_argument("ema_teacher_update: shape mismatch on " + name);
    if (nu == 0.0) {
      t = it->second;  // exact copy
      continue;
    }
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = nu * t[i] + (1.0 - nu) * it->second[i];
  }
}

inline void ema_teacher_update(DetectorModel& teacher, const DetectorModel& student, double nu) {
  if (!(nu >= 0.0 && nu <= 1.0)) throw std::invalid_argument("ema_teacher_update: nu must lie in [0,1]");
  if (teacher.params.size() != student.params.size())
    throw std::invalid_argument("ema_teacher_update: parameter name sets differ");
  if (nu == 1.0) return;
  for (std::size_t i = 0; i < teacher.params.size(); ++i) {
    if (teacher.params[i].name != student.params[i].name)
      throw std::invalid_argument("ema_teacher_update: parameter name sets differ at " + teacher.params[i].name);
    Tensor& t = teacher.params[i].value;
    const Tensor& s = student.params[i].value;
    if (nu == 0.0) {
      t = s;
      continue;
    }
    for (std::size_t k = 0; k < t.numel(); ++k) t[k] = nu * t[k] + (1.0 - nu) * s[k];
  }
}

}  // namespace warpdet
