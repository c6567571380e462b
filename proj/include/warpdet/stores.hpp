#pragma once

#include <deque>
#include <iostream>
#include <map>
#include <set>
#include <stdexcept>
#include <vector>

#include "warpdet/detector.hpp"
#include "warpdet/rng.hpp"
#include "warpdet/task_stream.hpp"

namespace warpdet {

// Bounded per-class FIFO. Eviction happens only on overflow, oldest first,
// so each queue always holds the most recent <= capacity additions.
template <typename Entry>
class ClassQueueStore {
 public:
  explicit ClassQueueStore(int capacity_per_class = 10) : capacity_(capacity_per_class) {
    if (capacity_per_class <= 0) throw std::invalid_argument("ClassQueueStore: capacity must be positive");
  }

  void push(int class_id, Entry entry) {
    auto& q = queues_[class_id];
    q.push_back(std::move(entry));
    if (static_cast<int>(q.size()) > capacity_) q.pop_front();
  }

  int capacity_per_class() const { return capacity_; }

  std::size_t total_entries() const {
    std::size_t n = 0;
    for (const auto& [c, q] : queues_) n += q.size();
    return n;
  }

  std::size_t class_count(int class_id) const {
    auto it = queues_.find(class_id);
    return it == queues_.end() ? 0 : it->second.size();
  }

  std::vector<int> classes() const {
    std::vector<int> out;
    for (const auto& [c, q] : queues_)
      if (!q.empty()) out.push_back(c);
    return out;
  }

  bool empty() const { return total_entries() == 0; }

  void clear() { queues_.clear(); }

  // Immutable copy, class-ascending then FIFO within class.
  std::vector<std::pair<int, Entry>> snapshot() const {
    std::vector<std::pair<int, Entry>> out;
    out.reserve(total_entries());
    for (const auto& [c, q] : queues_)
      for (const auto& e : q) out.push_back({c, e});
    return out;
  }

  const std::deque<Entry>& queue(int class_id) const {
    static const std::deque<Entry> kEmpty;
    auto it = queues_.find(class_id);
    return it == queues_.end() ? kEmpty : it->second;
  }

 private:
  int capacity_;
  std::map<int, std::deque<Entry>> queues_;  // ordered keys keep snapshots deterministic
};

// Exemplar image with its visible annotations, filed under one of its
// constituent classes.
struct ImageStoreEntry {
  DetectionSample sample;
  int assigned_class = 0;
};

using ImageStore = ClassQueueStore<ImageStoreEntry>;

// RoI feature with its matched label and regression target. Background
// entries use class id 0 and an all-zero target.
struct FeatureStoreEntry {
  Tensor feature;
  int true_class = kBackgroundClass;
  std::array<double, 4> box_target{0, 0, 0, 0};
};

using FeatureStore = ClassQueueStore<FeatureStoreEntry>;

// Enqueue a sample under one uniformly chosen constituent class.
inline void image_store_add(ImageStore& store, const DetectionSample& sample, Rng& rng) {
  if (sample.annotations.empty()) throw std::invalid_argument("image_store_add: sample has no annotations");
  std::set<int> classes;
  for (const auto& a : sample.annotations) classes.insert(a.class_id);
  std::vector<int> ordered(classes.begin(), classes.end());
  const int assigned = ordered[rng.next_below(ordered.size())];
  store.push(assigned, {sample, assigned});
}

struct FeatureStoreFillOptions {
  double match_iou = 0.5;
  bool keep_background = true;
};

// Rebuild the feature store from the image store using the current model:
// every stored image runs through backbone + RPN and its pooled RoIs are
// labeled against the image's visible annotations and enqueued per class.
// Near-duplicate proposals of one object would crowd a 10-slot queue with
// copies of the most recent instance, so each annotation contributes its
// best-overlap proposal and each image one hard negative.
inline int feature_store_fill(FeatureStore& store, const DetectorModel& model, const ImageStore& image_store,
                              const FeatureStoreFillOptions& opts = {}, std::ostream* warn = nullptr) {
  int enqueued = 0;
  for (const auto& [assigned_class, entry] : image_store.snapshot()) {
    const DetectionSample& s = entry.sample;
    ad::Graph g;
    BoundModel bm = bind(g, model, false);
    ad::NodeRef fmap = backbone_forward(bm, s.image);
    RpnOut rpn = rpn_forward(bm, fmap, s.height(), s.width());
    if (rpn.proposals.empty()) {
      if (warn) *warn << "feature_store_fill: no proposals for sample " << s.sample_id << ", skipping\n";
      continue;
    }

    // best proposal per annotation
    std::vector<int> best_prop(s.annotations.size(), -1);
    std::vector<double> best_iou(s.annotations.size(), 0.0);
    int hard_negative = -1;
    for (std::size_t pi = 0; pi < rpn.proposals.size(); ++pi) {
      double any = 0.0;
      for (std::size_t ai = 0; ai < s.annotations.size(); ++ai) {
        const double v = iou(rpn.proposals[pi].box, s.annotations[ai].box);
        any = std::max(any, v);
        if (v > best_iou[ai]) {
          best_iou[ai] = v;
          best_prop[ai] = static_cast<int>(pi);
        }
      }
      if (hard_negative < 0 && any < opts.match_iou) hard_negative = static_cast<int>(pi);
    }

    for (std::size_t ai = 0; ai < s.annotations.size(); ++ai) {
      if (best_prop[ai] < 0 || best_iou[ai] < opts.match_iou) continue;
      const auto& prop = rpn.proposals[best_prop[ai]];
      FeatureStoreEntry fe;
      fe.true_class = s.annotations[ai].class_id;
      fe.box_target = encode_box(s.annotations[ai].box, prop.box);
      fe.feature = roi_pool(bm, fmap, prop.box)->value;
      store.push(fe.true_class, std::move(fe));
      ++enqueued;
    }
    if (opts.keep_background && hard_negative >= 0) {
      FeatureStoreEntry fe;
      fe.feature = roi_pool(bm, fmap, rpn.proposals[hard_negative].box)->value;
      store.push(kBackgroundClass, std::move(fe));
      ++enqueued;
    }
  }
  return enqueued;
}

}  // namespace warpdet
