#include <catch2/catch.hpp>

#include <cmath>

#include "warpdet/losses.hpp"

using namespace warpdet;

namespace {

ad::NodeRef vec(ad::Graph& g, std::vector<double> v, bool grad = false) {
  const int n = static_cast<int>(v.size());
  Tensor t = Tensor::from({n}, std::move(v));
  return grad ? g.leaf(t) : g.constant(t);
}

double scalar(ad::NodeRef n) { return n->value[0]; }

// finite-difference check of d(loss)/d(input) for a builder over one leaf
template <typename BuildFn>
void fd_check(Tensor input, BuildFn build, double tol = 1e-6) {
  ad::Graph g;
  ad::NodeRef x = g.leaf(input);
  g.backward(build(g, x));
  Tensor analytic = x->grad;
  const double h = 1e-6;
  for (std::size_t i = 0; i < input.numel(); ++i) {
    Tensor p = input, m = input;
    p[i] += h;
    m[i] -= h;
    ad::Graph gp, gm;
    const double numeric = (scalar(build(gp, gp.constant(p))) - scalar(build(gm, gm.constant(m)))) / (2 * h);
    REQUIRE(ad::grad_rel_err(analytic[i], numeric) < tol);
  }
}

}  // namespace

TEST_CASE("smooth l1 closed forms") {
  ad::Graph g;
  REQUIRE(scalar(smooth_l1(g, vec(g, {1, 2, 3, 4}), vec(g, {1, 2, 3, 4}))) == 0.0);
  REQUIRE(scalar(smooth_l1(g, vec(g, {2, 0, 0, 0}), vec(g, {0, 0, 0, 0}))) == Approx(1.5));
  REQUIRE(scalar(smooth_l1(g, vec(g, {0.5, 0, 0, 0}), vec(g, {0, 0, 0, 0}))) == Approx(0.125));
  REQUIRE_THROWS_AS(smooth_l1(g, vec(g, {1, 2}), vec(g, {1, 2, 3})), std::invalid_argument);
}

TEST_CASE("smooth l1 is continuously differentiable at |d| = 1") {
  const double h = 1e-7;
  auto f = [](double d) { return std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5; };
  const double left = (f(1.0) - f(1.0 - h)) / h;
  const double right = (f(1.0 + h) - f(1.0)) / h;
  REQUIRE(left == Approx(1.0).margin(1e-5));
  REQUIRE(right == Approx(1.0).margin(1e-5));
}

TEST_CASE("roi head loss closed forms") {
  ad::Graph g;
  // background target: only the classification term, boxes irrelevant
  auto bg1 = roi_head_loss(g, vec(g, {0.5, 0.3, 0.2}), 0, vec(g, {9, 9, 9, 9}), vec(g, {0, 0, 0, 0}));
  auto bg2 = roi_head_loss(g, vec(g, {0.5, 0.3, 0.2}), 0, vec(g, {1, 2, 3, 4}), vec(g, {0, 0, 0, 0}));
  REQUIRE(scalar(bg1) == Approx(-std::log(0.5)));
  REQUIRE(scalar(bg1) == scalar(bg2));
  // one-hot with exact box: zero
  auto perfect = roi_head_loss(g, vec(g, {0, 1, 0}), 1, vec(g, {1, 2, 3, 4}), vec(g, {1, 2, 3, 4}));
  REQUIRE(scalar(perfect) == 0.0);
  // lambda weights the localization term
  auto l2 = roi_head_loss(g, vec(g, {0, 1, 0}), 1, vec(g, {2, 0, 0, 0}), vec(g, {0, 0, 0, 0}), 2.0);
  REQUIRE(scalar(l2) == Approx(3.0));
}

TEST_CASE("log clamp flags diagnostics") {
  ad::Graph g;
  LossDiagnostics diag;
  auto l = roi_head_loss(g, vec(g, {0.0, 1.0}), 0, vec(g, {0, 0, 0, 0}), vec(g, {0, 0, 0, 0}), 1.0, &diag);
  REQUIRE(scalar(l) == Approx(-std::log(1e-12)));
  REQUIRE(diag.log_clamp_hits == 1);
}

TEST_CASE("rpn loss closed forms") {
  ad::Graph g;
  // negative anchor: the box term vanishes no matter the boxes
  auto neg1 = rpn_loss(g, vec(g, {0.3}), 0, vec(g, {5, 5, 5, 5}), vec(g, {0, 0, 0, 0}));
  auto neg2 = rpn_loss(g, vec(g, {0.3}), 0, vec(g, {1, 1, 1, 1}), vec(g, {0, 0, 0, 0}));
  REQUIRE(scalar(neg1) == Approx(-std::log(0.7)));
  REQUIRE(scalar(neg1) == scalar(neg2));
  // perfect positive: zero... bce of o=1 target 1 is 0
  auto pos = rpn_loss(g, vec(g, {1.0}), 1, vec(g, {1, 2, 3, 4}), vec(g, {1, 2, 3, 4}));
  REQUIRE(scalar(pos) == 0.0);
  // o=0.5 positive with exact box: ln 2
  auto half = rpn_loss(g, vec(g, {0.5}), 1, vec(g, {1, 2, 3, 4}), vec(g, {1, 2, 3, 4}));
  REQUIRE(scalar(half) == Approx(std::log(2.0)));
  REQUIRE_THROWS_AS(rpn_loss(g, vec(g, {0.5}), 2, vec(g, {0}), vec(g, {0})), std::invalid_argument);
}

TEST_CASE("kl over a subset renormalizes both distributions") {
  ad::Graph g;
  // identical over old classes after renormalization, despite new-class mass
  auto prev = vec(g, {0.3, 0.7, 0.0});
  auto cur = vec(g, {0.15, 0.35, 0.5});
  REQUIRE(scalar(kl_subset(g, prev, cur, {0, 1})) == Approx(0.0).margin(1e-12));

  // hand-computed: prev (0.6,0.4), cur (0.5,0.5) over the subset
  auto p2 = vec(g, {0.6, 0.4, 0.0});
  auto c2 = vec(g, {0.25, 0.25, 0.5});
  const double expect = 0.6 * std::log(0.6 / 0.5) + 0.4 * std::log(0.4 / 0.5);
  REQUIRE(scalar(kl_subset(g, p2, c2, {0, 1})) == Approx(expect));
  REQUIRE_THROWS_AS(kl_subset(g, p2, c2, {}), std::invalid_argument);
}

TEST_CASE("distill loss zero at agreement and frozen-teacher contract") {
  ad::Graph g;
  Tensor feat({2, 3, 3});
  for (std::size_t i = 0; i < feat.numel(); ++i) feat[i] = 0.1 * static_cast<double>(i);
  auto f_cur = g.leaf(feat);
  auto f_prev = g.constant(feat);
  auto p = vec(g, {0.2, 0.5, 0.3});
  auto box = vec(g, {0.1, 0.2, 0.3, 0.4});
  auto zero = distill_loss(g, f_cur, f_prev, p, p, box, box, {1, 2});
  REQUIRE(scalar(zero) == Approx(0.0).margin(1e-12));
  REQUIRE_THROWS_AS(distill_loss(g, f_cur, f_prev, p, p, box, box, {}), std::invalid_argument);

  // teacher inputs are constants: backward leaves no gradient anywhere on them
  ad::Graph g2;
  auto fc = g2.leaf(feat);
  Tensor feat2 = feat;
  feat2[0] += 0.5;
  auto fp = g2.constant(feat2);
  auto pc = g2.leaf(Tensor::from({3}, {0.2, 0.5, 0.3}));
  auto pp = g2.constant(Tensor::from({3}, {0.4, 0.4, 0.2}));
  auto bc = g2.leaf(Tensor::from({4}, {0, 0, 0, 0}));
  auto bp = g2.constant(Tensor::from({4}, {0.1, 0, 0, 0}));
  auto loss = distill_loss(g2, fc, fp, pc, pp, bc, bp, {1});
  REQUIRE(scalar(loss) > 0.0);
  g2.backward(loss);
  REQUIRE_FALSE(fp->needs_grad);
  REQUIRE_FALSE(pp->needs_grad);
  bool cur_has_grad = false;
  for (std::size_t i = 0; i < fc->grad.numel(); ++i) cur_has_grad |= fc->grad[i] != 0.0;
  REQUIRE(cur_has_grad);
}

TEST_CASE("task loss convex combination") {
  ad::Graph g;
  auto d = vec(g, {1.0});
  auto r = vec(g, {0.75});
  auto h = vec(g, {1.25});
  REQUIRE(scalar(task_loss(g, d, r, h, 0.0)) == Approx(2.0));
  REQUIRE(scalar(task_loss(g, d, r, h, 1.0)) == Approx(1.0));
  REQUIRE(scalar(task_loss(g, d, r, h, 0.2)) == Approx(0.2 * 1.0 + 0.8 * 2.0));
  REQUIRE_THROWS_AS(task_loss(g, d, r, h, 1.5), std::invalid_argument);
  REQUIRE_THROWS_AS(task_loss(g, d, r, h, -0.1), std::invalid_argument);

  // linear in alpha: three-point collinearity
  const double a0 = scalar(task_loss(g, d, r, h, 0.1));
  const double a1 = scalar(task_loss(g, d, r, h, 0.5));
  const double a2 = scalar(task_loss(g, d, r, h, 0.9));
  REQUIRE(a1 == Approx(0.5 * (a0 + a2)));
}

TEST_CASE("warp per-roi loss mirrors the detection head loss at lambda 1") {
  ad::Graph g;
  auto probs = vec(g, {0.1, 0.6, 0.3});
  auto bp = vec(g, {0.3, 0, 0, 0});
  auto bt = vec(g, {0, 0, 0, 0});
  REQUIRE(scalar(warp_loss_per_roi(g, probs, 1, bp, bt)) ==
          Approx(scalar(roi_head_loss(g, probs, 1, bp, bt, 1.0))));
  // background entries carry no localization term
  REQUIRE(scalar(warp_loss_per_roi(g, probs, 0, bp, bt)) == Approx(-std::log(0.1)));
}

TEST_CASE("aux distill adds backbone terms over auxiliary images") {
  ad::Graph g;
  auto d = vec(g, {0.4});
  REQUIRE(scalar(aux_distill_loss(g, d, {})) == Approx(0.4));
  Tensor f({2, 2, 2}, 0.3);
  auto same = aux_distill_loss(g, d, {{g.constant(f), g.constant(f)}});
  REQUIRE(scalar(same) == Approx(0.4));
  Tensor f2 = f;
  f2[0] += 0.2;
  auto bumped = aux_distill_loss(g, d, {{g.constant(f2), g.constant(f)}});
  REQUIRE(scalar(bumped) > 0.4);
}

TEST_CASE("ema teacher update") {
  std::map<std::string, Tensor> teacher{{"a", Tensor::scalar(1.0)}};
  std::map<std::string, Tensor> student{{"a", Tensor::scalar(0.0)}};
  auto t0 = teacher;
  ema_teacher_update(teacher, student, 1.0);
  REQUIRE(teacher.at("a")[0] == 1.0);
  ema_teacher_update(teacher, student, 0.9);
  REQUIRE(teacher.at("a")[0] == Approx(0.9));
  ema_teacher_update(teacher, student, 0.0);
  REQUIRE(teacher.at("a")[0] == 0.0);
  std::map<std::string, Tensor> other{{"b", Tensor::scalar(0.0)}};
  REQUIRE_THROWS_AS(ema_teacher_update(teacher, other, 0.5), std::invalid_argument);
  REQUIRE_THROWS_AS(ema_teacher_update(teacher, student, 1.5), std::invalid_argument);
}

TEST_CASE("losses are non-negative on random inputs") {
  Rng r(77);
  for (int trial = 0; trial < 200; ++trial) {
    ad::Graph g;
    // random probability vectors via softmax of random logits
    std::vector<double> logits(5), logits2(5);
    for (auto& v : logits) v = r.next_normal(0, 2);
    for (auto& v : logits2) v = r.next_normal(0, 2);
    auto probs = ad::softmax(g, vec(g, logits));
    auto probs2 = ad::softmax(g, vec(g, logits2));
    std::vector<double> bp(4), bt(4);
    for (auto& v : bp) v = r.next_normal(0, 2);
    for (auto& v : bt) v = r.next_normal(0, 2);
    const int label = r.next_int(0, 4);

    REQUIRE(scalar(roi_head_loss(g, probs, label, vec(g, bp), vec(g, bt))) >= 0.0);
    REQUIRE(scalar(rpn_loss(g, vec(g, {r.next_uniform(0.01, 0.99)}), r.next_int(0, 1), vec(g, bp), vec(g, bt))) >=
            0.0);
    REQUIRE(scalar(kl_subset(g, probs, probs2, {0, 1, 2})) >= 0.0);
    REQUIRE(scalar(smooth_l1(g, vec(g, bp), vec(g, bt))) >= 0.0);
  }
}

TEST_CASE("loss gradients match finite differences through softmax") {
  Rng r(31);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits({6});
    for (auto& v : logits.vec()) v = r.next_normal(0, 1.5);
    Tensor box({4});
    for (auto& v : box.vec()) v = r.next_normal(0, 0.8);
    Tensor target({4});
    for (auto& v : target.vec()) v = r.next_normal(0, 0.8);
    const int label = r.next_int(0, 5);

    fd_check(logits, [&](ad::Graph& g, ad::NodeRef x) {
      return roi_head_loss(g, ad::softmax(g, x), label, g.constant(box), g.constant(target));
    });
    fd_check(box, [&](ad::Graph& g, ad::NodeRef b) {
      return roi_head_loss(g, ad::softmax(g, g.constant(logits)), 1, b, g.constant(target));
    });

    Tensor logits2({6});
    for (auto& v : logits2.vec()) v = r.next_normal(0, 1.5);
    fd_check(logits, [&](ad::Graph& g, ad::NodeRef x) {
      return kl_subset(g, ad::softmax(g, g.constant(logits2)), ad::softmax(g, x), {0, 2, 4});
    });
    fd_check(logits, [&](ad::Graph& g, ad::NodeRef x) {
      return kl_subset(g, ad::softmax(g, x), ad::softmax(g, g.constant(logits2)), {0, 2, 4});
    });
  }
}
