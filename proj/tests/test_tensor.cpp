#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dermfoundry/nn.hpp"
#include "dermfoundry/tensor.hpp"
#include "testutil.hpp"

using namespace dermfoundry;
using namespace dermfoundry::nn;

TEST_CASE("matmul forward value") {
  Mat a(2, 2);
  a(0, 0) = 1; a(0, 1) = 2; a(1, 0) = 3; a(1, 1) = 4;
  Mat b(2, 2);
  b(0, 0) = 5; b(0, 1) = 6; b(1, 0) = 7; b(1, 1) = 8;
  const Var y = matmul(constant(a), constant(b));
  CHECK(y->value(0, 0) == 19);
  CHECK(y->value(0, 1) == 22);
  CHECK(y->value(1, 0) == 43);
  CHECK(y->value(1, 1) == 50);
}

TEST_CASE("shape mismatch raises ShapeError") {
  CHECK_THROWS_AS(matmul(constant(Mat(2, 3)), constant(Mat(2, 3))), ShapeError);
  CHECK_THROWS_AS(add(constant(Mat(2, 3)), constant(Mat(3, 2))), ShapeError);
}

TEST_CASE("gradients of composite expression match finite differences") {
  Rng init(5);
  ParamStore store;
  const Var w1 = store.add("w1", random_normal(6, 4, 0.5, init));
  const Var b1 = store.add("b1", random_normal(1, 4, 0.5, init));
  const Var w2 = store.add("w2", random_normal(4, 3, 0.5, init));
  const Mat x = random_normal(5, 6, 1.0, init);
  const Mat tgt = random_normal(5, 3, 1.0, init);

  auto forward = [&]() {
    Var h = gelu(add_rowvec(matmul(constant(x), w1), b1));
    h = layer_norm_rows(h);
    Var out = matmul(h, w2);
    Var d = sub(out, constant(tgt));
    return mean_all(mul(d, d));
  };
  Rng pick(17);
  CHECK(testutil::finite_diff_max_rel_err(store, forward, 30, pick) < 1e-5);
}

TEST_CASE("gradients flow through softmax, l2norm, abs, sqrt, gather, concat") {
  Rng init(6);
  ParamStore store;
  const Var w = store.add("w", random_normal(4, 4, 0.7, init));
  const Var v = store.add("v", random_normal(1, 4, 0.7, init));
  const Mat x = random_normal(6, 4, 1.0, init);

  auto forward = [&]() {
    Var h = matmul(constant(x), w);
    Var s = row_softmax(h);
    Var n = l2_normalize_rows(add_rowvec(h, v));
    Var g = gather_rows(n, {0, 2, 2, 5});
    Var cat = concat_rows({s, g});
    Var a = abs_(cat);
    Var r = sqrt_(a, 1e-9);
    return mean_all(mul(r, relu(cat)));
  };
  Rng pick(23);
  CHECK(testutil::finite_diff_max_rel_err(store, forward, 30, pick) < 1e-5);
}

TEST_CASE("gradients flow through attention block") {
  Rng init(7);
  ParamStore store;
  const auto blk = make_block(store, "blk", 8, 2.0, 1.0, false, init);
  const Mat x = random_normal(5, 8, 0.8, init);

  BlockRuntime rt;
  rt.heads = 2;
  auto forward = [&]() {
    const Var h = transformer_block(constant(x), nullptr, blk, rt);
    return mean_all(mul(h, h));
  };
  Rng pick(29);
  CHECK(testutil::finite_diff_max_rel_err(store, forward, 40, pick) < 1e-4);
}

TEST_CASE("cross_entropy_logits matches hand computation and gradient") {
  ParamStore store;
  Rng init(8);
  const Var w = store.add("w", random_normal(3, 3, 0.6, init));
  Mat x = random_normal(4, 3, 1.0, init);
  Mat t(4, 3);
  t(0, 0) = 1; t(1, 2) = 1; t(2, 1) = 1; t(3, 2) = 1;

  auto forward = [&]() { return cross_entropy_logits(matmul(constant(x), w), t); };
  const Var loss = forward();

  // hand-computed reference
  Mat logits(4, 3);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 3; ++c) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += x(r, k) * w->value(k, c);
      logits(r, c) = s;
    }
  double ref = 0.0;
  for (int r = 0; r < 4; ++r) {
    double mx = std::max({logits(r, 0), logits(r, 1), logits(r, 2)});
    double z = 0;
    for (int c = 0; c < 3; ++c) z += std::exp(logits(r, c) - mx);
    for (int c = 0; c < 3; ++c)
      if (t(r, c) > 0) ref -= std::log(std::exp(logits(r, c) - mx) / z);
  }
  ref /= 4;
  CHECK(loss->value(0, 0) == doctest::Approx(ref).epsilon(1e-10));

  Rng pick(31);
  CHECK(testutil::finite_diff_max_rel_err(store, forward, 9, pick) < 1e-5);
}

TEST_CASE("frozen parameters receive no gradient") {
  ParamStore teacher;
  Rng init(9);
  const Var tw = teacher.add("tw", random_normal(3, 3, 0.5, init));
  teacher.freeze();

  ParamStore student;
  const Var sw = student.add("sw", random_normal(3, 3, 0.5, init));

  const Mat x = random_normal(2, 3, 1.0, init);
  const Var target = matmul(constant(x), tw);
  CHECK_FALSE(target->requires_grad);
  const Var pred = matmul(constant(x), sw);
  const Var d = sub(pred, target);
  student.zero_grad();
  teacher.zero_grad();
  backward(mean_all(mul(d, d)));

  double tg = 0, sg = 0;
  for (double g : tw->grad.data) tg += std::fabs(g);
  for (double g : sw->grad.data) sg += std::fabs(g);
  CHECK(tg == 0.0);
  CHECK(sg > 0.0);
}

TEST_CASE("AdamW: zero lr leaves parameters unchanged; positive lr moves them") {
  ParamStore store;
  Rng init(10);
  const Var w = store.add("w", random_normal(3, 3, 0.5, init));
  const Mat before = w->value;

  auto do_step = [&](double lr) {
    AdamW opt(store.params(), lr);
    store.zero_grad();
    const Var loss = mean_all(mul(w, w));
    backward(loss);
    opt.step();
  };
  do_step(0.0);
  CHECK(w->value.data == before.data);
  do_step(0.1);
  CHECK(w->value.data != before.data);
}

TEST_CASE("gradient clipping caps the global norm") {
  ParamStore store;
  Rng init(11);
  const Var w = store.add("w", random_normal(4, 4, 1.0, init));
  store.zero_grad();
  backward(scale(sum_all(mul(w, w)), 100.0));
  CHECK(store.grad_norm() > 3.0);
  store.clip_grad_norm(3.0);
  CHECK(store.grad_norm() == doctest::Approx(3.0).epsilon(1e-9));
}

TEST_CASE("warmup cosine schedule") {
  CHECK(warmup_cosine_lr(1.0, 10, 100, 0) == doctest::Approx(0.1));
  CHECK(warmup_cosine_lr(1.0, 10, 100, 9) == doctest::Approx(1.0));
  CHECK(warmup_cosine_lr(1.0, 10, 100, 10) == doctest::Approx(1.0));
  CHECK(warmup_cosine_lr(1.0, 10, 100, 100) == doctest::Approx(0.0).epsilon(1e-9));
  const double mid = warmup_cosine_lr(1.0, 0, 100, 50);
  CHECK(mid == doctest::Approx(0.5).epsilon(1e-2));
}

TEST_CASE("layer decay multipliers shallow to deep") {
  const auto m = layer_lr_multipliers(0.75, 4);
  REQUIRE(m.size() == 4);
  CHECK(m[0] == doctest::Approx(0.75 * 0.75 * 0.75));
  CHECK(m[1] == doctest::Approx(0.75 * 0.75));
  CHECK(m[2] == doctest::Approx(0.75));
  CHECK(m[3] == doctest::Approx(1.0));
}

TEST_CASE("state dict round trip and shape mismatch") {
  ParamStore a;
  Rng init(12);
  a.add("x", random_normal(2, 3, 1.0, init));
  a.add("y", random_normal(1, 4, 1.0, init));
  const StateDict sd = a.state_dict();

  ParamStore b;
  b.add("x", Mat(2, 3));
  b.add("y", Mat(1, 4));
  b.load_state_dict(sd);
  CHECK(b.find("x")->value.data == a.find("x")->value.data);

  ParamStore c;
  c.add("x", Mat(3, 2));
  try {
    c.load_state_dict(sd);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("'x'") != std::string::npos);
  }
}
