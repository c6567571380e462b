#include <catch2/catch.hpp>

#include <set>

#include "warpdet/detector.hpp"
#include "warpdet/losses.hpp"

using namespace warpdet;

namespace {

DetectorConfig small_cfg(int classes = 4) {
  DetectorConfig c;
  c.num_classes = classes;
  return c;
}

Tensor random_image(Rng& r, int size = 64) {
  Tensor t({3, size, size});
  for (auto& v : t.vec()) v = r.next_double();
  return t;
}

}  // namespace

TEST_CASE("partition covers every parameter exactly once") {
  auto m = DetectorModel::create(small_cfg(), 1);
  auto part = m.partition();
  REQUIRE(part.task_names.size() + part.warp_names.size() == m.params.size());
  std::set<std::string> all(part.task_names.begin(), part.task_names.end());
  for (const auto& n : part.warp_names) REQUIRE(all.insert(n).second);
  REQUIRE(all.size() == m.params.size());
  // default: the middle conv of the last residual block is the warp layer
  REQUIRE(part.warp_names == std::vector<std::string>{"head.block3.conv2.w", "head.block3.conv2.b"});
}

TEST_CASE("backbone output shape and determinism") {
  auto m = DetectorModel::create(small_cfg(), 2);
  m.seen_classes = {1};
  Rng r(5);

  SECTION("zero image stays finite") {
    ad::Graph g;
    auto bm = bind(g, m, false);
    auto f = backbone_forward(bm, Tensor({3, 64, 64}));
    REQUIRE(f->value.all_finite());
    REQUIRE(f->value.shape() == std::vector<int>{32, 8, 8});
  }

  SECTION("64x64 input, stride 8, 32 channels gives a 32x8x8 map") {
    ad::Graph g;
    auto bm = bind(g, m, false);
    auto f = backbone_forward(bm, random_image(r));
    REQUIRE(f->value.shape() == std::vector<int>{32, 8, 8});
  }

  SECTION("same image twice gives identical output") {
    Tensor img = random_image(r);
    ad::Graph g1, g2;
    auto b1 = bind(g1, m, false);
    auto b2 = bind(g2, m, false);
    REQUIRE(backbone_forward(b1, img)->value == backbone_forward(b2, img)->value);
  }

  SECTION("shape mismatch is an error") {
    ad::Graph g;
    auto bm = bind(g, m, false);
    REQUIRE_THROWS_AS(backbone_forward(bm, Tensor({1, 64, 64})), std::invalid_argument);
  }
}

TEST_CASE("rpn tie-break and clamp semantics") {
  auto cfg = small_cfg();
  cfg.rpn_top_n = 10000;
  cfg.rpn_nms_thresh = 1.0;  // keep everything: IoU can never exceed 1
  auto m = DetectorModel::create(cfg, 3);
  // zero the rpn heads: all objectness logits 0, all deltas 0
  for (auto& p : m.params)
    if (p.name.rfind("rpn.obj", 0) == 0 || p.name.rfind("rpn.delta", 0) == 0) p.value.fill(0.0);

  Rng r(9);
  ad::Graph g;
  auto bm = bind(g, m, false);
  auto f = backbone_forward(bm, random_image(r));
  auto rpn = rpn_forward(bm, f, 64, 64);

  // every anchor comes back (N exceeds the anchor count), ordered by index
  REQUIRE(rpn.proposals.size() == 3u * 8u * 8u);
  for (std::size_t i = 1; i < rpn.proposals.size(); ++i)
    REQUIRE(rpn.proposals[i].anchor_index > rpn.proposals[i - 1].anchor_index);
  for (const auto& p : rpn.proposals) REQUIRE(p.objectness == Approx(0.5));
}

TEST_CASE("roi pooling through the model contract") {
  auto m = DetectorModel::create(small_cfg(), 4);
  Rng r(17);
  Tensor img = random_image(r);
  ad::Graph g;
  auto bm = bind(g, m, false);
  auto f = backbone_forward(bm, img);

  // identical boxes pool identically
  BoundingBox box{8, 8, 40, 40};
  REQUIRE(roi_pool(bm, f, box)->value == roi_pool(bm, f, box)->value);

  // degenerate 1-pixel box clamps to one cell, stays finite
  auto tiny = roi_pool(bm, f, {13.0, 13.0, 14.0, 14.0});
  REQUIRE(tiny->value.all_finite());
  REQUIRE(tiny->value.shape() == std::vector<int>{32, 4, 4});
}

TEST_CASE("roi head output shapes and warp connectivity") {
  auto m = DetectorModel::create(small_cfg(6), 5);
  Rng r(23);
  Tensor feat({32, 4, 4});
  for (auto& v : feat.vec()) v = r.next_normal(0, 1);

  ad::Graph g;
  auto bm = bind(g, m, false);
  auto out = roi_head_forward(bm, g.constant(feat));
  REQUIRE(out.class_logits->value.shape() == std::vector<int>{7});  // K+1
  REQUIRE(out.box_deltas->value.shape() == std::vector<int>{4});

  // perturbing warp parameters changes the forward output
  auto m2 = m;
  m2.params[m2.param_index("head.block3.conv2.w")].value[0] += 0.5;
  ad::Graph g2;
  auto bm2 = bind(g2, m2, false);
  auto out2 = roi_head_forward(bm2, g2.constant(feat));
  REQUIRE_FALSE(out.class_logits->value == out2.class_logits->value);
}

TEST_CASE("task gradients depend on warp parameter values") {
  // the preconditioning pathway: d(loss)/d(psi) must differ under two phi settings
  auto m = DetectorModel::create(small_cfg(3), 11);
  m.seen_classes = {1, 2, 3};
  Rng r(29);
  Tensor feat({32, 4, 4});
  for (auto& v : feat.vec()) v = r.next_normal(0, 1);

  auto grad_of_first_block = [&](const DetectorModel& model) {
    ad::Graph g;
    auto bm = bind(g, model, true);
    auto out = roi_head_forward(bm, g.constant(feat));
    auto probs = ad::softmax(g, mask_unseen_logits(g, out.class_logits, model.cfg.num_classes, model.seen_classes));
    auto loss = roi_head_loss(g, probs, 1, out.box_deltas, g.constant(Tensor({4})), 1.0);
    g.backward(loss);
    return bm.of(model.param_index("head.block1.conv1.w"))->grad;
  };

  Tensor g1 = grad_of_first_block(m);
  auto m2 = m;
  auto& warp_w = m2.params[m2.param_index("head.block3.conv2.w")].value;
  for (auto& v : warp_w.vec()) v += 0.2;
  Tensor g2 = grad_of_first_block(m2);
  REQUIRE_FALSE(g1 == g2);
}

TEST_CASE("logit masking") {
  SECTION("spec vector example") {
    HeadOutput ho;
    ho.class_logits = Tensor::from({3}, {2.0, 1.0, 0.5});
    ho.box_deltas = Tensor({4});
    auto masked = mask_unseen_logits(ho, {1});
    REQUIRE(masked.class_logits[0] == 2.0);
    REQUIRE(masked.class_logits[1] == 1.0);
    REQUIRE(masked.class_logits[2] == kMaskSentinel);

    ad::Graph g;
    auto probs = ad::softmax(g, g.constant(masked.class_logits));
    REQUIRE(probs->value[2] == 0.0);
  }

  SECTION("all classes seen leaves logits unchanged") {
    HeadOutput ho;
    ho.class_logits = Tensor::from({3}, {2.0, 1.0, 0.5});
    auto masked = mask_unseen_logits(ho, {1, 2});
    REQUIRE(masked.class_logits == ho.class_logits);
  }

  SECTION("empty seen set is an error") {
    HeadOutput ho;
    ho.class_logits = Tensor::from({3}, {2.0, 1.0, 0.5});
    REQUIRE_THROWS_AS(mask_unseen_logits(ho, {}), std::invalid_argument);
  }

  SECTION("argmax over masked logits never selects an unseen class") {
    Rng r(41);
    for (int trial = 0; trial < 1000; ++trial) {
      Tensor logits({6});
      for (auto& v : logits.vec()) v = r.next_normal(0, 100);
      HeadOutput ho;
      ho.class_logits = logits;
      auto masked = mask_unseen_logits(ho, {2, 4});
      int best = 0;
      for (int i = 1; i < 6; ++i)
        if (masked.class_logits[i] > masked.class_logits[best]) best = i;
      REQUIRE((best == 0 || best == 2 || best == 4));
    }
  }
}

TEST_CASE("task and warp updates respect the partition") {
  auto m = DetectorModel::create(small_cfg(), 7);
  std::vector<Tensor> grads;
  Rng r(3);
  for (const auto& p : m.params) {
    Tensor g(p.value.shape());
    for (auto& v : g.vec()) v = r.next_normal(0, 1);
    grads.push_back(std::move(g));
  }

  SECTION("zero gradient and fresh momentum leave the model unchanged") {
    auto before_task = m.task_checksum();
    auto before_warp = m.warp_checksum();
    std::vector<Tensor> zeros;
    for (const auto& p : m.params) zeros.push_back(Tensor(p.value.shape()));
    apply_task_update(m, zeros, 0.02);
    apply_warp_update(m, zeros, 0.02);
    REQUIRE(m.task_checksum() == before_task);
    REQUIRE(m.warp_checksum() == before_warp);
  }

  SECTION("task update leaves warp parameters bit-identical and vice versa") {
    auto warp_before = m.warp_checksum();
    apply_task_update(m, grads, 0.02);
    REQUIRE(m.warp_checksum() == warp_before);
    auto task_before = m.task_checksum();
    apply_warp_update(m, grads, 0.01);
    REQUIRE(m.task_checksum() == task_before);
    REQUIRE(m.warp_checksum() != warp_before);
  }

  SECTION("sgd step with fresh momentum is p - mu g") {
    const int idx = m.param_index("head.cls.b");
    const double before = m.params[idx].value[0];
    const double g0 = grads[idx][0];
    apply_task_update(m, grads, 0.02);
    REQUIRE(m.params[idx].value[0] == Approx(before - 0.02 * g0));
  }

  SECTION("alternating updates touch each parameter set exactly once per its loss") {
    for (int round = 0; round < 10; ++round) {
      auto snap_warp = m.warp_checksum();
      apply_task_update(m, grads, 0.01);
      REQUIRE(m.warp_checksum() == snap_warp);
      auto snap_task = m.task_checksum();
      apply_warp_update(m, grads, 0.01);
      REQUIRE(m.task_checksum() == snap_task);
    }
  }

  SECTION("non-finite gradient names the parameter") {
    grads[m.param_index("rpn.obj.w")][0] = std::nan("");
    REQUIRE_THROWS_WITH(apply_task_update(m, grads, 0.02), Catch::Contains("rpn.obj.w"));
  }
}

TEST_CASE("detect on an untrained model with threshold 1 returns nothing") {
  auto m = DetectorModel::create(small_cfg(), 19);
  m.seen_classes = {1, 2};
  Rng r(55);
  auto dets = detect(m, random_image(r), 1.0);
  REQUIRE(dets.empty());
}

TEST_CASE("checkpoint round trip is bit exact") {
  auto m = DetectorModel::create(small_cfg(5), 23);
  m.seen_classes = {1, 3};
  // make optimizer state non-trivial
  std::vector<Tensor> grads;
  Rng r(8);
  for (const auto& p : m.params) {
    Tensor g(p.value.shape());
    for (auto& v : g.vec()) v = r.next_normal(0, 1);
    grads.push_back(std::move(g));
  }
  apply_task_update(m, grads, 0.01);

  auto path = std::filesystem::temp_directory_path() / "warpdet_ckpt_test.ckpt";
  save_checkpoint(m, path);
  auto loaded = load_checkpoint(path);
  REQUIRE(loaded.seen_classes == m.seen_classes);
  REQUIRE(loaded.params.size() == m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    REQUIRE(loaded.params[i].name == m.params[i].name);
    REQUIRE(loaded.params[i].warp == m.params[i].warp);
    REQUIRE(loaded.params[i].value == m.params[i].value);
    REQUIRE(loaded.params[i].momentum == m.params[i].momentum);
  }
  std::filesystem::remove(path);
}

TEST_CASE("model creation is seed deterministic") {
  auto a = DetectorModel::create(small_cfg(), 99);
  auto b = DetectorModel::create(small_cfg(), 99);
  auto c = DetectorModel::create(small_cfg(), 100);
  REQUIRE(a.task_checksum() == b.task_checksum());
  REQUIRE(a.warp_checksum() == b.warp_checksum());
  REQUIRE(a.task_checksum() != c.task_checksum());
}
