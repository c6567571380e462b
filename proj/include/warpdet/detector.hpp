#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "warpdet/autodiff.hpp"
#include "warpdet/geometry.hpp"
#include "warpdet/rng.hpp"
#include "warpdet/task_stream.hpp"
#include "warpdet/tensor.hpp"

namespace warpdet {

constexpr double kMaskSentinel = -1e10;

struct DetectorConfig {
  int num_classes = 20;  // foreground classes; head outputs num_classes+1 logits
  int in_channels = 3;
  std::array<int, 4> backbone_channels{16, 24, 32, 32};
  std::array<int, 4> backbone_strides{2, 2, 2, 1};
  int stride = 8;  // product of backbone strides
  std::vector<double> anchor_sizes{12.0, 20.0, 32.0};
  double rpn_nms_thresh = 0.7;
  int rpn_top_n = 64;
  int pool_size = 4;
  int head_blocks = 3;
  int head_mid_channels = 16;
  std::vector<int> warp_blocks{3};  // 1-based block indices carrying the preconditioning layer

  int feature_channels() const { return backbone_channels[3]; }
  int num_anchors() const { return static_cast<int>(anchor_sizes.size()); }
  int head_input_numel() const { return feature_channels() * pool_size * pool_size; }

  void validate() const {
    if (num_classes < 1) throw std::invalid_argument("detector config: need at least one class");
    if (anchor_sizes.empty()) throw std::invalid_argument("detector config: no anchor sizes");
    int s = 1;
    for (int st : backbone_strides) s *= st;
    if (s != stride) throw std::invalid_argument("detector config: stride does not match backbone strides");
    for (int b : warp_blocks)
      if (b < 1 || b > head_blocks) throw std::invalid_argument("detector config: warp block out of range");
  }
};

inline void to_json(json& j, const DetectorConfig& c) {
  j = json{{"num_classes", c.num_classes},
           {"in_channels", c.in_channels},
           {"backbone_channels", c.backbone_channels},
           {"backbone_strides", c.backbone_strides},
           {"stride", c.stride},
           {"anchor_sizes", c.anchor_sizes},
           {"rpn_nms_thresh", c.rpn_nms_thresh},
           {"rpn_top_n", c.rpn_top_n},
           {"pool_size", c.pool_size},
           {"head_blocks", c.head_blocks},
           {"head_mid_channels", c.head_mid_channels},
           {"warp_blocks", c.warp_blocks}};
}

inline void from_json(const json& j, DetectorConfig& c) {
  j.at("num_classes").get_to(c.num_classes);
  j.at("in_channels").get_to(c.in_channels);
  j.at("backbone_channels").get_to(c.backbone_channels);
  j.at("backbone_strides").get_to(c.backbone_strides);
  j.at("stride").get_to(c.stride);
  j.at("anchor_sizes").get_to(c.anchor_sizes);
  j.at("rpn_nms_thresh").get_to(c.rpn_nms_thresh);
  j.at("rpn_top_n").get_to(c.rpn_top_n);
  j.at("pool_size").get_to(c.pool_size);
  j.at("head_blocks").get_to(c.head_blocks);
  j.at("head_mid_channels").get_to(c.head_mid_channels);
  j.at("warp_blocks").get_to(c.warp_blocks);
}

// One trainable tensor plus its optimizer state. `warp` marks membership in
// the meta-learned parameter set; everything else is a task parameter.
struct ParamTensor {
  std::string name;
  Tensor value;
  Tensor momentum;
  bool warp = false;
};

struct ParamPartition {
  std::vector<std::string> task_names;  // psi
  std::vector<std::string> warp_names;  // phi
};

struct Proposal {
  BoundingBox box;
  double objectness = 0.0;
  int anchor_index = 0;
};

// Plain-tensor head output, used on the inference path and by tests.
struct HeadOutput {
  Tensor class_logits;  // [K+1], index 0 = background
  Tensor box_deltas;    // [4]
};

class DetectorModel {
 public:
  DetectorConfig cfg;
  std::vector<ParamTensor> params;  // fixed order, set at construction
  std::vector<int> seen_classes;    // ordered foreground ids

  static DetectorModel create(const DetectorConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    DetectorModel m;
    m.cfg = cfg;
    Rng rng(mix_seed(seed, 0x6d6f64656cULL));  // "model" stream

    auto conv = [&](const std::string& name, int cout, int cin, int k, double std_override = -1.0) {
      ParamTensor w{name + ".w", Tensor({cout, cin, k, k}), Tensor({cout, cin, k, k}), false};
      const double std = std_override > 0.0 ? std_override : std::sqrt(2.0 / (cin * k * k));
      for (auto& v : w.value.vec()) v = rng.next_normal(0.0, std);
      m.params.push_back(std::move(w));
      m.params.push_back({name + ".b", Tensor({cout}), Tensor({cout}), false});
    };
    auto fc = [&](const std::string& name, int out, int in, double std) {
      ParamTensor w{name + ".w", Tensor({out, in}), Tensor({out, in}), false};
      for (auto& v : w.value.vec()) v = rng.next_normal(0.0, std);
      m.params.push_back(std::move(w));
      m.params.push_back({name + ".b", Tensor({out}), Tensor({out}), false});
    };

    int cin = cfg.in_channels;
    for (int i = 0; i < 4; ++i) {
      conv("backbone.conv" + std::to_string(i + 1), cfg.backbone_channels[i], cin, 3);
      cin = cfg.backbone_channels[i];
    }
    conv("rpn.shared", cin, cin, 3);
    conv("rpn.obj", cfg.num_anchors(), cin, 1, 0.01);
    conv("rpn.delta", 4 * cfg.num_anchors(), cin, 1, 0.01);
    for (int b = 1; b <= cfg.head_blocks; ++b) {
      const std::string base = "head.block" + std::to_string(b);
      conv(base + ".conv1", cfg.head_mid_channels, cfg.feature_channels(), 1);
      conv(base + ".conv2", cfg.head_mid_channels, cfg.head_mid_channels, 3);
      conv(base + ".conv3", cfg.feature_channels(), cfg.head_mid_channels, 1);
    }
    fc("head.cls", cfg.num_classes + 1, cfg.head_input_numel(), 0.01);
    fc("head.reg", 4, cfg.head_input_numel(), 0.001);

    for (auto& p : m.params) {
      // the designated preconditioning layers: middle conv of selected blocks
      for (int b : cfg.warp_blocks) {
        const std::string mid = "head.block" + std::to_string(b) + ".conv2.";
        if (p.name.rfind(mid, 0) == 0) p.warp = true;
      }
    }
    return m;
  }

  int param_index(const std::string& name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return static_cast<int>(i);
    throw std::out_of_range("unknown parameter: " + name);
  }

  ParamPartition partition() const {
    ParamPartition p;
    for (const auto& t : params) (t.warp ? p.warp_names : p.task_names).push_back(t.name);
    return p;
  }

  std::uint64_t checksum(bool warp_set) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : params)
      if (p.warp == warp_set) h ^= byte_checksum(p.value) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return h;
  }
  std::uint64_t task_checksum() const { return checksum(false); }
  std::uint64_t warp_checksum() const { return checksum(true); }

  // number of foreground classes the head can express
  int num_classes() const { return cfg.num_classes; }
};

// Parameters of one model materialized as graph leaves. Gradients are read
// back through `grads()` in parameter order.
struct BoundModel {
  const DetectorModel* model = nullptr;
  ad::Graph* g = nullptr;
  std::vector<ad::NodeRef> nodes;
  bool trainable = false;

  ad::NodeRef of(int idx) const { return nodes[idx]; }

  std::vector<Tensor> grads() const {
    std::vector<Tensor> out;
    out.reserve(nodes.size());
    for (auto* n : nodes) out.push_back(n->needs_grad ? n->grad : Tensor());
    return out;
  }
};

inline BoundModel bind(ad::Graph& g, const DetectorModel& m, bool trainable) {
  BoundModel b;
  b.model = &m;
  b.g = &g;
  b.trainable = trainable;
  b.nodes.reserve(m.params.size());
  for (const auto& p : m.params) b.nodes.push_back(g.make(p.value, trainable));
  return b;
}

namespace detail {
struct LayerIdx {
  int w, b;
};
inline LayerIdx layer(const DetectorModel& m, const std::string& base) {
  return {m.param_index(base + ".w"), m.param_index(base + ".b")};
}
}  // namespace detail

// ---------------------------------------------------------------------------
// forward passes

inline ad::NodeRef backbone_forward(BoundModel& bm, const Tensor& image) {
  const auto& cfg = bm.model->cfg;
  if (image.shape().size() != 3 || image.shape()[0] != cfg.in_channels)
    throw std::invalid_argument("backbone_forward: image shape mismatch, got " + image.shape_str());
  ad::NodeRef x = bm.g->constant(image);
  for (int i = 0; i < 4; ++i) {
    auto l = detail::layer(*bm.model, "backbone.conv" + std::to_string(i + 1));
    x = ad::relu(*bm.g, ad::conv2d(*bm.g, x, bm.of(l.w), bm.of(l.b), cfg.backbone_strides[i], 1));
  }
  return x;
}

struct RpnOut {
  ad::NodeRef obj_logits = nullptr;  // [A,Hf,Wf]
  ad::NodeRef deltas = nullptr;      // [4A,Hf,Wf]
  std::vector<Proposal> proposals;   // post-NMS top-N, by descending objectness
  int hf = 0, wf = 0;
};

inline BoundingBox anchor_box(const DetectorConfig& cfg, int a, int y, int x) {
  const double cx = (x + 0.5) * cfg.stride;
  const double cy = (y + 0.5) * cfg.stride;
  const double s = cfg.anchor_sizes[a];
  return {cx - 0.5 * s, cy - 0.5 * s, cx + 0.5 * s, cy + 0.5 * s};
}

inline std::size_t anchor_flat(int a, int y, int x, int hf, int wf) {
  return (static_cast<std::size_t>(a) * hf + y) * wf + x;
}

// Greedy NMS over raw boxes; returns kept indices in descending-score order,
// ties broken by insertion order.
inline std::vector<int> nms_keep_indices(const std::vector<BoundingBox>& boxes, const std::vector<double>& scores,
                                         double thresh) {
  std::vector<int> order(boxes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> kept;
  for (int i : order) {
    bool ok = true;
    for (int k : kept)
      if (iou(boxes[i], boxes[k]) > thresh) {
        ok = false;
        break;
      }
    if (ok) kept.push_back(i);
  }
  return kept;
}

inline RpnOut rpn_forward(BoundModel& bm, ad::NodeRef fmap, int image_h, int image_w) {
  const auto& cfg = bm.model->cfg;
  auto shared = detail::layer(*bm.model, "rpn.shared");
  auto obj = detail::layer(*bm.model, "rpn.obj");
  auto del = detail::layer(*bm.model, "rpn.delta");
  ad::NodeRef s = ad::relu(*bm.g, ad::conv2d(*bm.g, fmap, bm.of(shared.w), bm.of(shared.b), 1, 1));
  RpnOut out;
  out.obj_logits = ad::conv2d(*bm.g, s, bm.of(obj.w), bm.of(obj.b), 1, 0);
  out.deltas = ad::conv2d(*bm.g, s, bm.of(del.w), bm.of(del.b), 1, 0);
  out.hf = fmap->value.shape()[1];
  out.wf = fmap->value.shape()[2];

  const int a_n = cfg.num_anchors();
  std::vector<BoundingBox> boxes;
  std::vector<double> scores;
  std::vector<int> anchor_ids;
  boxes.reserve(static_cast<std::size_t>(a_n) * out.hf * out.wf);
  for (int a = 0; a < a_n; ++a) {
    for (int y = 0; y < out.hf; ++y) {
      for (int x = 0; x < out.wf; ++x) {
        const std::size_t fi = anchor_flat(a, y, x, out.hf, out.wf);
        const double score = 1.0 / (1.0 + std::exp(-out.obj_logits->value[fi]));
        std::array<double, 4> t;
        for (int k = 0; k < 4; ++k)
          t[k] = out.deltas->value[(static_cast<std::size_t>(a) * 4 + k) * out.hf * out.wf +
                                   static_cast<std::size_t>(y) * out.wf + x];
        BoundingBox box = decode_box(t, anchor_box(cfg, a, y, x)).clipped(image_w, image_h);
        if (box.width() < 1e-3 || box.height() < 1e-3) continue;
        boxes.push_back(box);
        scores.push_back(score);
        anchor_ids.push_back(static_cast<int>(fi));
      }
    }
  }
  auto kept = nms_keep_indices(boxes, scores, cfg.rpn_nms_thresh);
  const int n = std::min<int>(cfg.rpn_top_n, static_cast<int>(kept.size()));
  out.proposals.reserve(n);
  for (int i = 0; i < n; ++i)
    out.proposals.push_back({boxes[kept[i]], scores[kept[i]], anchor_ids[kept[i]]});
  return out;
}

// Pool a fixed grid from the feature map for a box given in image
// coordinates. Degenerate boxes clamp to a single feature cell.
inline ad::NodeRef roi_pool(BoundModel& bm, ad::NodeRef fmap, const BoundingBox& box) {
  const double s = bm.model->cfg.stride;
  const int p = bm.model->cfg.pool_size;
  return ad::grid_max_pool(*bm.g, fmap, box.x1 / s, box.y1 / s, box.x2 / s, box.y2 / s, p, p);
}

struct HeadOut {
  ad::NodeRef class_logits = nullptr;  // [K+1]
  ad::NodeRef box_deltas = nullptr;    // [4]
};

inline HeadOut roi_head_forward(BoundModel& bm, ad::NodeRef roi) {
  const auto& cfg = bm.model->cfg;
  if (roi->value.shape() != std::vector<int>{cfg.feature_channels(), cfg.pool_size, cfg.pool_size})
    throw std::invalid_argument("roi_head_forward: feature shape mismatch, got " + roi->value.shape_str());
  ad::Graph& g = *bm.g;
  ad::NodeRef x = roi;
  for (int b = 1; b <= cfg.head_blocks; ++b) {
    const std::string base = "head.block" + std::to_string(b);
    auto c1 = detail::layer(*bm.model, base + ".conv1");
    auto c2 = detail::layer(*bm.model, base + ".conv2");
    auto c3 = detail::layer(*bm.model, base + ".conv3");
    ad::NodeRef h = ad::relu(g, ad::conv2d(g, x, bm.of(c1.w), bm.of(c1.b), 1, 0));
    h = ad::relu(g, ad::conv2d(g, h, bm.of(c2.w), bm.of(c2.b), 1, 1));
    h = ad::conv2d(g, h, bm.of(c3.w), bm.of(c3.b), 1, 0);
    x = ad::relu(g, ad::add(g, x, h));
  }
  ad::NodeRef flat = ad::reshape(g, x, {cfg.head_input_numel()});
  auto cls = detail::layer(*bm.model, "head.cls");
  auto reg = detail::layer(*bm.model, "head.reg");
  HeadOut out;
  out.class_logits = ad::linear(g, flat, bm.of(cls.w), bm.of(cls.b));
  out.box_deltas = ad::linear(g, flat, bm.of(reg.w), bm.of(reg.b));
  return out;
}

// ---------------------------------------------------------------------------
// logit masking

inline std::vector<char> unseen_mask(int num_classes, const std::vector<int>& seen_classes) {
  if (seen_classes.empty()) throw std::invalid_argument("mask_unseen_logits: no seen classes");
  std::vector<char> blocked(static_cast<std::size_t>(num_classes) + 1, 1);
  blocked[0] = 0;  // background is never masked
  for (int c : seen_classes) {
    if (c < 1 || c > num_classes) throw std::invalid_argument("mask_unseen_logits: class id out of range");
    blocked[c] = 0;
  }
  return blocked;
}

inline ad::NodeRef mask_unseen_logits(ad::Graph& g, ad::NodeRef logits, int num_classes,
                                      const std::vector<int>& seen_classes) {
  return ad::masked_fill(g, logits, unseen_mask(num_classes, seen_classes), kMaskSentinel);
}

inline HeadOutput mask_unseen_logits(const HeadOutput& out, const std::vector<int>& seen_classes) {
  const int k1 = static_cast<int>(out.class_logits.numel());
  auto blocked = unseen_mask(k1 - 1, seen_classes);
  HeadOutput masked = out;
  for (int i = 0; i < k1; ++i)
    if (blocked[i]) masked.class_logits[i] = kMaskSentinel;
  return masked;
}

// ---------------------------------------------------------------------------
// parameter updates (the selective-zeroing rule: each loss touches only its
// half of the partition)

inline void check_finite_grad(const ParamTensor& p, const Tensor& g) {
  if (!g.all_finite()) throw std::runtime_error("non-finite gradient for parameter " + p.name);
}

// psi <- psi - mu * m, with m <- 0.9 m + g; phi stays bit-identical.
inline void apply_task_update(DetectorModel& m, const std::vector<Tensor>& grads, double mu,
                              double momentum = 0.9) {
  if (grads.size() != m.params.size()) throw std::invalid_argument("apply_task_update: gradient count mismatch");
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    ParamTensor& p = m.params[i];
    if (p.warp) continue;
    if (grads[i].empty()) continue;
    check_finite_grad(p, grads[i]);
    for (std::size_t k = 0; k < p.value.numel(); ++k) {
      p.momentum[k] = momentum * p.momentum[k] + grads[i][k];
      p.value[k] -= mu * p.momentum[k];
    }
  }
}

// phi <- phi - upsilon * g (plain step, no momentum); psi stays bit-identical.
inline void apply_warp_update(DetectorModel& m, const std::vector<Tensor>& grads, double upsilon) {
  if (grads.size() != m.params.size()) throw std::invalid_argument("apply_warp_update: gradient count mismatch");
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    ParamTensor& p = m.params[i];
    if (!p.warp) continue;
    if (grads[i].empty()) continue;
    check_finite_grad(p, grads[i]);
    for (std::size_t k = 0; k < p.value.numel(); ++k) p.value[k] -= upsilon * grads[i][k];
  }
}

// ---------------------------------------------------------------------------
// inference

struct RawDetection {
  BoundingBox box;
  int class_id = 0;
  double score = 0.0;
};

inline std::vector<RawDetection> detect(const DetectorModel& m, const Tensor& image, double score_thresh,
                                        double nms_thresh = 0.4, int max_dets = 100) {
  ad::Graph g;
  BoundModel bm = bind(g, m, false);
  const int ih = image.shape()[1], iw = image.shape()[2];
  ad::NodeRef fmap = backbone_forward(bm, image);
  RpnOut rpn = rpn_forward(bm, fmap, ih, iw);

  struct Cand {
    BoundingBox box;
    int class_id;
    double score;
  };
  std::vector<Cand> cands;
  for (const auto& prop : rpn.proposals) {
    ad::NodeRef pooled = roi_pool(bm, fmap, prop.box);
    HeadOut head = roi_head_forward(bm, pooled);
    ad::NodeRef masked = mask_unseen_logits(g, head.class_logits, m.cfg.num_classes, m.seen_classes);
    ad::NodeRef probs = ad::softmax(g, masked);
    std::array<double, 4> t;
    for (int k = 0; k < 4; ++k) t[k] = head.box_deltas->value[k];
    const BoundingBox refined = decode_box(t, prop.box).clipped(iw, ih);
    if (!refined.valid()) continue;
    for (int c = 1; c <= m.cfg.num_classes; ++c) {
      const double p = probs->value[c];
      if (p >= score_thresh && p > 0.0) cands.push_back({refined, c, p});
    }
  }

  // class-wise NMS, then a global cap by score
  std::vector<RawDetection> dets;
  for (int c = 1; c <= m.cfg.num_classes; ++c) {
    std::vector<BoundingBox> boxes;
    std::vector<double> scores;
    for (const auto& cd : cands)
      if (cd.class_id == c) {
        boxes.push_back(cd.box);
        scores.push_back(cd.score);
      }
    for (int k : nms_keep_indices(boxes, scores, nms_thresh)) dets.push_back({boxes[k], c, scores[k]});
  }
  std::stable_sort(dets.begin(), dets.end(), [](const RawDetection& a, const RawDetection& b) { return a.score > b.score; });
  if (static_cast<int>(dets.size()) > max_dets) dets.resize(max_dets);
  return dets;
}

// ---------------------------------------------------------------------------
// checkpoints: versioned header + raw little-endian parameter bytes

inline void save_checkpoint(const DetectorModel& m, const std::filesystem::path& path) {
  json header{{"version", 1},
              {"config", m.cfg},
              {"seen_classes", m.seen_classes}};
  json plist = json::array();
  for (const auto& p : m.params) plist.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"warp", p.warp}});
  header["params"] = std::move(plist);
  const std::string h = header.dump();

  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
  f.write("WDCKPT01", 8);
  const std::uint64_t len = h.size();
  f.write(reinterpret_cast<const char*>(&len), sizeof(len));
  f.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& p : m.params) {
    f.write(reinterpret_cast<const char*>(p.value.data()), static_cast<std::streamsize>(p.value.numel() * 8));
    f.write(reinterpret_cast<const char*>(p.momentum.data()), static_cast<std::streamsize>(p.momentum.numel() * 8));
  }
  if (!f) throw std::runtime_error("failed writing checkpoint " + path.string());
}

inline DetectorModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (!f || std::string(magic, 8) != "WDCKPT01")
    throw std::runtime_error("bad checkpoint magic in " + path.string());
  std::uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string h(len, '\0');
  f.read(h.data(), static_cast<std::streamsize>(len));
  json header = json::parse(h);

  DetectorModel m;
  m.cfg = header.at("config").get<DetectorConfig>();
  m.seen_classes = header.at("seen_classes").get<std::vector<int>>();
  for (const auto& pj : header.at("params")) {
    ParamTensor p;
    p.name = pj.at("name").get<std::string>();
    p.warp = pj.at("warp").get<bool>();
    auto shape = pj.at("shape").get<std::vector<int>>();
    p.value = Tensor(shape);
    p.momentum = Tensor(shape);
    f.read(reinterpret_cast<char*>(p.value.data()), static_cast<std::streamsize>(p.value.numel() * 8));
    f.read(reinterpret_cast<char*>(p.momentum.data()), static_cast<std::streamsize>(p.momentum.numel() * 8));
    m.params.push_back(std::move(p));
  }
  if (!f) throw std::runtime_error("truncated checkpoint " + path.string());
  return m;
}

}  // namespace warpdet
