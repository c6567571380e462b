#include <catch2/catch.hpp>

#include "warpdet/autodiff.hpp"
#include "warpdet/geometry.hpp"
#include "warpdet/rng.hpp"
#include "warpdet/tensor.hpp"

using namespace warpdet;

TEST_CASE("rng is deterministic and in range") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) {
    REQUIRE(a.next_u64() == b.next_u64());
  }
  Rng r(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.next_double();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    const int k = r.next_int(3, 9);
    REQUIRE(k >= 3);
    REQUIRE(k <= 9);
  }
}

TEST_CASE("tensor shape and checksum behave") {
  Tensor t({2, 3, 4});
  REQUIRE(t.numel() == 24);
  t.at(1, 2, 3) = 5.0;
  REQUIRE(t[23] == 5.0);
  Tensor u = t;
  REQUIRE(byte_checksum(t) == byte_checksum(u));
  u[0] = 1e-300;
  REQUIRE(byte_checksum(t) != byte_checksum(u));
  REQUIRE_THROWS_AS(Tensor({0, 2}), std::invalid_argument);
}

TEST_CASE("iou closed forms") {
  BoundingBox a{0, 0, 10, 10};
  REQUIRE(iou(a, a) == Approx(1.0));
  REQUIRE(iou(a, {20, 20, 30, 30}) == 0.0);
  // hand computation: inter 25, union 100+100-25=175
  REQUIRE(iou(a, {5, 5, 15, 15}) == Approx(25.0 / 175.0));
  REQUIRE(iou(a, {5, 5, 15, 15}) == Approx(iou({5, 5, 15, 15}, a)));
}

TEST_CASE("box encode/decode round trip") {
  Rng r(3);
  for (int i = 0; i < 200; ++i) {
    BoundingBox anchor{r.next_uniform(0, 20), r.next_uniform(0, 20), 0, 0};
    anchor.x2 = anchor.x1 + r.next_uniform(2, 30);
    anchor.y2 = anchor.y1 + r.next_uniform(2, 30);
    BoundingBox box{r.next_uniform(0, 20), r.next_uniform(0, 20), 0, 0};
    box.x2 = box.x1 + r.next_uniform(2, 30);
    box.y2 = box.y1 + r.next_uniform(2, 30);
    auto enc = encode_box(box, anchor);
    BoundingBox dec = decode_box(enc, anchor);
    REQUIRE(dec.x1 == Approx(box.x1).margin(1e-9));
    REQUIRE(dec.y2 == Approx(box.y2).margin(1e-9));
  }
}

namespace {

// central finite difference through an arbitrary scalar-valued graph builder
template <typename BuildFn>
void check_gradients(Tensor& input, BuildFn build, double tol = 1e-6) {
  ad::Graph g;
  ad::NodeRef x = g.leaf(input);
  ad::NodeRef y = build(g, x);
  g.backward(y);
  Tensor analytic = x->grad;

  const double h = 1e-6;
  for (std::size_t i = 0; i < input.numel(); ++i) {
    const double keep = input[i];
    input[i] = keep + h;
    ad::Graph gp;
    double fp = build(gp, gp.constant(input))->value[0];
    input[i] = keep - h;
    ad::Graph gm;
    double fm = build(gm, gm.constant(input))->value[0];
    input[i] = keep;
    const double numeric = (fp - fm) / (2 * h);
    INFO("coordinate " << i << " analytic " << analytic[i] << " numeric " << numeric);
    REQUIRE(ad::grad_rel_err(analytic[i], numeric) < tol);
  }
}

}  // namespace

TEST_CASE("autodiff matches finite differences on composite graphs") {
  Rng r(11);

  SECTION("conv + relu + mean") {
    Tensor x({2, 5, 5});
    for (auto& v : x.vec()) v = r.next_normal(0, 1);
    Tensor w({3, 2, 3, 3});
    for (auto& v : w.vec()) v = r.next_normal(0, 0.5);
    Tensor b({3});
    for (auto& v : b.vec()) v = r.next_normal(0, 0.5);
    check_gradients(x, [&](ad::Graph& g, ad::NodeRef in) {
      return ad::mean(g, ad::relu(g, ad::conv2d(g, in, g.constant(w), g.constant(b), 2, 1)));
    });
    check_gradients(w, [&](ad::Graph& g, ad::NodeRef wn) {
      return ad::mean(g, ad::relu(g, ad::conv2d(g, g.constant(x), wn, g.constant(b), 2, 1)));
    });
  }

  SECTION("linear + softmax + pick + log") {
    Tensor x({6});
    for (auto& v : x.vec()) v = r.next_normal(0, 1);
    Tensor w({4, 6});
    for (auto& v : w.vec()) v = r.next_normal(0, 0.5);
    Tensor b({4});
    check_gradients(x, [&](ad::Graph& g, ad::NodeRef in) {
      auto sm = ad::softmax(g, ad::linear(g, in, g.constant(w), g.constant(b)));
      return ad::scale(g, ad::log_clamped(g, ad::pick(g, sm, 2), 1e-12), -1.0);
    });
  }

  SECTION("grid max pool") {
    Tensor x({2, 8, 8});
    for (auto& v : x.vec()) v = r.next_normal(0, 1);
    check_gradients(x, [&](ad::Graph& g, ad::NodeRef in) {
      return ad::sum(g, ad::grid_max_pool(g, in, 1.2, 0.7, 6.9, 7.3, 4, 4));
    });
  }

  SECTION("mse and masked_fill") {
    Tensor x({5});
    for (auto& v : x.vec()) v = r.next_normal(0, 1);
    Tensor t({5});
    for (auto& v : t.vec()) v = r.next_normal(0, 1);
    std::vector<char> blocked{0, 1, 0, 0, 1};
    check_gradients(x, [&](ad::Graph& g, ad::NodeRef in) {
      return ad::mse(g, ad::masked_fill(g, in, blocked, -1e10), ad::masked_fill(g, g.constant(t), blocked, -1e10));
    });
  }

  SECTION("sigmoid") {
    Tensor x({3});
    for (auto& v : x.vec()) v = r.next_normal(0, 1);
    check_gradients(x, [&](ad::Graph& g, ad::NodeRef in) { return ad::sum(g, ad::sigmoid(g, in)); });
  }
}

TEST_CASE("grid max pool on a full box equals block-wise max") {
  // brute-force oracle over each grid cell with an 8x8 map pooled to 4x4
  Rng r(5);
  Tensor x({1, 8, 8});
  for (auto& v : x.vec()) v = r.next_normal(0, 1);
  ad::Graph g;
  auto pooled = ad::grid_max_pool(g, g.constant(x), 0, 0, 8, 8, 4, 4);
  for (int oy = 0; oy < 4; ++oy)
    for (int ox = 0; ox < 4; ++ox) {
      double m = -1e300;
      for (int yy = oy * 2; yy < oy * 2 + 2; ++yy)
        for (int xx = ox * 2; xx < ox * 2 + 2; ++xx) m = std::max(m, x.at(0, yy, xx));
      REQUIRE(pooled->value.at(0, oy, ox) == m);
    }
}

TEST_CASE("degenerate one-pixel box pools without NaN") {
  Tensor x({1, 8, 8}, 0.5);
  ad::Graph g;
  auto pooled = ad::grid_max_pool(g, g.constant(x), 3.0, 3.0, 3.1, 3.1, 4, 4);
  REQUIRE(pooled->value.all_finite());
  REQUIRE(pooled->value[0] == 0.5);
}
