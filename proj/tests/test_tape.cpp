#include "bilevel/tape.hpp"

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"

using namespace bilevel;
using testutil::rel_err;

namespace {

FlatVector scalar_input(double x) {
  return FlatVector(make_layout({{"x", Shape{1, 1}}}), {x});
}

Tape square_tape() {
  TapeBuilder tb;
  int x = tb.input("x", {1, 1});
  return std::move(tb).build(tb.mul(x, x));
}

}  // namespace

TEST_SUITE_BEGIN("tape");

TEST_CASE("forward: x^2 at 3 is 9") {
  CHECK(forward_eval(square_tape(), scalar_input(3.0))[0] == doctest::Approx(9.0).epsilon(0));
}

TEST_CASE("forward: x + 0 is identity") {
  TapeBuilder tb;
  int x = tb.input("x", {1, 1});
  int zero = tb.constant_scalar(0.0);
  Tape t = std::move(tb).build(tb.add(x, zero));
  for (double v : {-2.5, 0.0, 13.75})
    CHECK(forward_eval(t, scalar_input(v))[0] == v);
}

TEST_CASE("forward: log(exp(x)+exp(y)) at (0,0) is ln 2") {
  TapeBuilder tb;
  int x = tb.input("x", {1, 1});
  int y = tb.input("y", {1, 1});
  Tape t = std::move(tb).build(tb.log(tb.add(tb.exp(x), tb.exp(y))));
  FlatVector in(make_layout({{"x", Shape{1, 1}}, {"y", Shape{1, 1}}}), {0.0, 0.0});
  CHECK(forward_eval(t, in)[0] == doctest::Approx(0.6931471805599453).epsilon(1e-15));
}

TEST_CASE("forward: re-evaluation is bit-identical") {
  auto c = testutil::make_random_tape(99);
  double a = forward_eval(c.tape, c.inputs)[0];
  double b = forward_eval(c.tape, c.inputs)[0];
  CHECK(a == b);
  CHECK(a == doctest::Approx(c.naive_value).epsilon(1e-12));
}

TEST_CASE("forward errors: missing slot and non-finite intermediate") {
  TapeBuilder tb;
  int x = tb.input("x", {1, 1});
  int y = tb.input("y", {1, 1});
  Tape t = std::move(tb).build(tb.add(x, y));
  CHECK_THROWS_AS(forward_eval(t, scalar_input(1.0)), ConfigError);

  TapeBuilder tb2;
  int a = tb2.input("x", {1, 1});
  Tape texp = std::move(tb2).build(tb2.exp(a));
  try {
    forward_eval(texp, scalar_input(1e4));  // exp overflows to inf
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.where() >= 0);  // carries the node index
  }
}

TEST_CASE("vjp: power rule, identity, sigmoid'(0)=0.25") {
  const double cot[1] = {1.0};
  CHECK(vjp(square_tape(), scalar_input(3.0), cot)[0] == doctest::Approx(6.0).epsilon(1e-15));

  TapeBuilder tb;
  int x = tb.input("x", {1, 1});
  Tape ident = std::move(tb).build(x);
  CHECK(vjp(ident, scalar_input(-7.0), cot)[0] == 1.0);

  TapeBuilder tb2;
  int x2 = tb2.input("x", {1, 1});
  Tape sig = std::move(tb2).build(tb2.sigmoid(x2));
  CHECK(vjp(sig, scalar_input(0.0), cot)[0] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("vjp: cotangent shape mismatch") {
  const double cot[2] = {1.0, 1.0};
  CHECK_THROWS_AS(vjp(square_tape(), scalar_input(3.0), cot), ShapeError);
}

TEST_CASE("jvp: scalar cases and product rule") {
  FlatVector t1(scalar_input(1.0)), t2(scalar_input(2.0));
  CHECK(jvp(square_tape(), scalar_input(3.0), t1)[0] == doctest::Approx(6.0).epsilon(1e-15));
  CHECK(jvp(square_tape(), scalar_input(3.0), t2)[0] == doctest::Approx(12.0).epsilon(1e-15));

  TapeBuilder tb;
  int x = tb.input("x", {1, 1});
  int y = tb.input("y", {1, 1});
  Tape prod = std::move(tb).build(tb.mul(x, y));
  auto layout = make_layout({{"x", Shape{1, 1}}, {"y", Shape{1, 1}}});
  FlatVector in(layout, {2.0, 5.0});
  FlatVector tang(layout, {1.0, 0.0});
  CHECK(jvp(prod, in, tang)[0] == doctest::Approx(5.0).epsilon(1e-15));
}

TEST_CASE("matmul kernels against naive loops (all transpose combos)") {
  Rng rng(7);
  std::vector<double> A(6), B(6);
  for (auto& e : A) e = rng.uniform(-2, 2);
  for (auto& e : B) e = rng.uniform(-2, 2);
  // A is 2x3, B is 3x2 -> C 2x2; transposed variants reuse the same buffers.
  auto expect = testutil::naive_matmul(A, 2, 3, B, 3, 2);

  struct Case {
    Shape sa, sb;
    bool ta, tb;
  };
  for (const Case& c : {Case{{2, 3}, {3, 2}, false, false}, Case{{3, 2}, {3, 2}, true, false},
                        Case{{2, 3}, {2, 3}, false, true}, Case{{3, 2}, {2, 3}, true, true}}) {
    std::vector<double> a = c.ta ? testutil::naive_transpose(A, 2, 3) : A;
    std::vector<double> b = c.tb ? testutil::naive_transpose(B, 3, 2) : B;
    TapeBuilder tb;
    int na = tb.input("a", c.sa);
    int nb = tb.input("b", c.sb);
    Tape t = std::move(tb).build(tb.matmul(na, nb, c.ta, c.tb));
    std::vector<double> flat = a;
    flat.insert(flat.end(), b.begin(), b.end());
    FlatVector in(make_layout({{"a", c.sa}, {"b", c.sb}}), flat);
    auto out = forward_eval(t, in);
    for (int i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(expect[i]).epsilon(1e-14));
  }
}

TEST_CASE("gather/pack/colsum forward and adjoint") {
  TapeBuilder tb;
  int a = tb.input("a", {2, 3});
  int picked = tb.gather_cols(a, {2, 0});  // a[0,2], a[1,0]
  int cs = tb.col_sum(a);
  int packed = tb.pack({picked, cs});
  Tape t = std::move(tb).build(packed);

  FlatVector in(make_layout({{"a", Shape{2, 3}}}), {1, 2, 3, 4, 5, 6});
  auto out = forward_eval(t, in);
  CHECK(out.values().size() == 5);
  CHECK(out[0] == 3.0);
  CHECK(out[1] == 4.0);
  CHECK(out[2] == 5.0);
  CHECK(out[3] == 7.0);
  CHECK(out[4] == 9.0);

  // adjoint of sum(tape output) via all-ones cotangent: gather scatters,
  // colsum broadcasts
  std::vector<double> cot(5, 1.0);
  auto g = vjp(t, in, cot);
  std::vector<double> expect = {1, 1, 2, 2, 1, 1};
  for (int i = 0; i < 6; ++i) CHECK(g[i] == expect[i]);
}

TEST_CASE("property: vjp matches central differences on random tapes") {
  const double cot[1] = {1.0};
  int checked = 0;
  for (uint64_t seed = 1; seed <= 40; ++seed) {
    auto c = testutil::make_random_tape(seed);
    auto g = vjp(c.tape, c.inputs, cot);
    auto f = [&](const FlatVector& x) { return forward_eval(c.tape, x)[0]; };
    auto fd = testutil::fd_gradient(f, c.inputs, 1e-5);
    const double scale = std::max({fd.max_abs(), g.max_abs(), 1e-8});
    for (int i = 0; i < g.size(); ++i) {
      const double denom = std::max({std::fabs(fd[i]), std::fabs(g[i]), 1e-3 * scale});
      CHECK(std::fabs(fd[i] - g[i]) / denom <= 1e-6);
    }
    ++checked;
  }
  CHECK(checked == 40);
}

TEST_CASE("property: transpose identity <c, Jt> == <J^T c, t>") {
  for (uint64_t seed = 100; seed < 130; ++seed) {
    auto c = testutil::make_random_tape(seed);
    Rng rng(seed * 31 + 1);
    FlatVector t(c.inputs.layout_ptr());
    for (int i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1, 1);
    const double cvec[1] = {rng.uniform(-1, 1)};

    auto jv = jvp(c.tape, c.inputs, t);
    auto vj = vjp(c.tape, c.inputs, cvec);
    double lhs = cvec[0] * jv[0];
    double rhs = vj.dot(t);
    CHECK(std::fabs(lhs - rhs) <= 1e-12 * std::max(1.0, std::fabs(lhs)));
  }
}

TEST_CASE("property: jvp is linear in the tangent") {
  for (uint64_t seed = 200; seed < 215; ++seed) {
    auto c = testutil::make_random_tape(seed);
    Rng rng(seed * 17 + 3);
    FlatVector t1(c.inputs.layout_ptr()), t2(c.inputs.layout_ptr()), mix(c.inputs.layout_ptr());
    const double alpha = rng.uniform(-2, 2), beta = rng.uniform(-2, 2);
    for (int i = 0; i < t1.size(); ++i) {
      t1[i] = rng.uniform(-1, 1);
      t2[i] = rng.uniform(-1, 1);
      mix[i] = alpha * t1[i] + beta * t2[i];
    }
    double lhs = jvp(c.tape, c.inputs, mix)[0];
    double rhs = alpha * jvp(c.tape, c.inputs, t1)[0] + beta * jvp(c.tape, c.inputs, t2)[0];
    CHECK(std::fabs(lhs - rhs) <= 1e-12 * std::max(1.0, std::fabs(lhs)));
  }
}

TEST_CASE("relu/max derivative is 0 exactly at the kink") {
  TapeBuilder tb;
  int x = tb.input("x", {1, 1});
  Tape t = std::move(tb).build(tb.relu(x));
  const double cot[1] = {1.0};
  CHECK(vjp(t, scalar_input(0.0), cot)[0] == 0.0);

  TapeBuilder tb2;
  int a = tb2.input("x", {1, 1});
  int b = tb2.constant_scalar(0.0);
  Tape tm = std::move(tb2).build(tb2.max(a, b));
  CHECK(vjp(tm, scalar_input(0.0), cot)[0] == 0.0);
}

TEST_SUITE_END();
