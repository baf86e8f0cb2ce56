#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "smmrec/errors.hpp"
#include "smmrec/tensor.hpp"

using namespace smmrec;
using namespace smmrec::ad;

namespace {

using TD = Tensor<double>;

TD random_tensor(Shape shape, std::uint32_t seed, double scale = 1.0, bool grad = true) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = n(rng);
  return TD(std::move(shape), std::move(v), grad);
}

// Reduces an arbitrary tensor to a scalar through fixed random weights, so
// that gradients are not trivially constant (e.g. softmax rows sum to 1).
TD weighted_sum(Tape<double>& tape, const TD& x, std::uint32_t seed = 99) {
  auto w = random_tensor(x.shape(), seed, 1.0, false);
  return tape.sum(tape.mul(x, w));
}

double check(const std::function<TD(Tape<double>&)>& f, std::vector<Parameter<double>> params) {
  return gradient_check(f, params, 1e-5).max_rel_error;
}

}  // namespace

TEST(Autodiff, SumOfSquares) {
  TD x({3}, {1.0, -2.0, 0.5}, true);
  Tape<double> tape;
  auto loss = tape.sum(tape.mul(x, x));
  EXPECT_DOUBLE_EQ(loss.item(), 5.25);
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -4.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 1.0);
}

TEST(Autodiff, SharedWeightAccumulatesBothUses) {
  // loss = sum(W x) + sum(W^T y) with one W used twice
  auto w = random_tensor({3, 3}, 1);
  auto x = random_tensor({3, 1}, 2, 1.0, false);
  auto y = random_tensor({3, 1}, 3, 1.0, false);
  auto f = [&](Tape<double>& tape) {
    auto a = tape.sum(tape.matmul(w, x));
    auto b = tape.sum(tape.matmul(tape.transpose(w), y));
    return tape.add(a, b);
  };
  Tape<double> tape;
  tape.backward(f(tape));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      // d/dW_ij = x_j + y_i
      EXPECT_NEAR(w.grad()[i * 3 + j], x.values()[j] + y.values()[i], 1e-12);
    }
  }
  EXPECT_LT(check(f, {{"w", w}}), 1e-7);
}

TEST(Autodiff, ConstantsGetNoGradient) {
  auto a = random_tensor({2, 2}, 4);
  auto c = random_tensor({2, 2}, 5, 1.0, false);
  Tape<double> tape;
  tape.backward(tape.sum(tape.mul(a, c)));
  EXPECT_TRUE(a.has_grad());
  EXPECT_FALSE(c.has_grad());
}

TEST(Autodiff, NonScalarBackwardIsUsageError) {
  auto a = random_tensor({2}, 6);
  Tape<double> tape;
  auto y = tape.scale(a, 2.0);
  EXPECT_THROW(tape.backward(y), UsageError);
}

TEST(Autodiff, TapeIsSingleUse) {
  auto a = random_tensor({2}, 6);
  Tape<double> tape;
  auto y = tape.sum(a);
  tape.backward(y);
  EXPECT_THROW(tape.backward(y), UsageError);
}

TEST(Autodiff, ShapeMismatchIsDimensionError) {
  Tape<double> tape;
  EXPECT_THROW(tape.add(random_tensor({2, 3}, 1), random_tensor({2}, 2)), DimensionError);
  EXPECT_THROW(tape.matmul(random_tensor({2, 3}, 1), random_tensor({2, 3}, 2)), DimensionError);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  auto x = random_tensor({4, 7}, 8, 5.0);
  Tape<double> tape(false);
  auto y = tape.softmax(x);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 7; ++c) s += y.values()[r * 7 + c];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Ops, SoftmaxOfFullyMaskedRowIsZero) {
  const double inf = std::numeric_limits<double>::infinity();
  TD x({2, 2}, {-inf, -inf, 0.0, 1.0}, false);
  Tape<double> tape(false);
  auto y = tape.softmax(x);
  EXPECT_EQ(y.values()[0], 0.0);
  EXPECT_EQ(y.values()[1], 0.0);
  EXPECT_NEAR(y.values()[3], 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
}

TEST(Ops, DropoutKeepsExpectation) {
  TD x = TD::zeros({20000}, false);
  for (auto& v : x.values()) v = 1.0;
  Tape<double> tape(false);
  auto y = tape.dropout(x, 0.25, 7);
  double mean = 0;
  std::size_t zeros = 0;
  for (double v : y.values()) {
    mean += v;
    if (v == 0.0) ++zeros;
    else EXPECT_NEAR(v, 1.0 / 0.75, 1e-12);
  }
  EXPECT_NEAR(mean / 20000, 1.0, 0.03);
  EXPECT_NEAR(static_cast<double>(zeros) / 20000, 0.25, 0.02);
  auto again = tape.dropout(x, 0.25, 7);
  EXPECT_TRUE(std::equal(y.values().begin(), y.values().end(), again.values().begin()));
  EXPECT_TRUE(tape.dropout(x, 0.0, 7).same_storage(x));
}

TEST(Ops, RmsNormIsScaleInvariant) {
  auto x = random_tensor({3, 5}, 10, 1.0, false);
  auto gain = random_tensor({5}, 11, 1.0, false);
  auto x7 = TD(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), false);
  for (auto& v : x7.values()) v *= 7.0;
  Tape<double> tape(false);
  auto a = tape.rms_norm(x, gain, 0.0);
  auto b = tape.rms_norm(x7, gain, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.values()[i], b.values()[i], 1e-12);
}

TEST(Ops, CrossEntropyOfUniformLogits) {
  TD logits = TD::zeros({2, 100}, false);
  std::vector<int> targets = {5, 77};
  Tape<double> tape(false);
  EXPECT_NEAR(tape.cross_entropy(logits, targets).item(), std::log(100.0), 1e-12);
}

TEST(Ops, QuadraticGradientIsExact) {
  auto x = random_tensor({6}, 12);
  auto f = [&](Tape<double>& tape) { return tape.sum(tape.mul(x, x)); };
  EXPECT_LT(check(f, {{"x", x}}), 1e-9);
}

TEST(GradCheck, EveryOp) {
  auto a = random_tensor({2, 3, 4}, 20);
  auto b = random_tensor({2, 3, 4}, 21);
  auto bias = random_tensor({4}, 22);
  auto m = random_tensor({4, 5}, 23);
  auto bm = random_tensor({2, 4, 3}, 24);
  auto gain = random_tensor({4}, 25);
  auto table = random_tensor({6, 4}, 26);
  auto tol = 1e-6;

  EXPECT_LT(check([&](auto& t) { return weighted_sum(t, t.add(a, bias)); },
                  {{"a", a}, {"bias", bias}}), tol);
  EXPECT_LT(check([&](auto& t) { return weighted_sum(t, t.mul(a, b)); }, {{"a", a}, {"b", b}}),
            tol);
  EXPECT_LT(check([&](auto& t) { return weighted_sum(t, t.scale(a, -1.7)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&](auto& t) { return weighted_sum(t, t.matmul(a, m)); }, {{"a", a}, {"m", m}}),
            tol);
  EXPECT_LT(check([&](auto& t) { return weighted_sum(t, t.matmul(a, bm)); },
                  {{"a", a}, {"bm", bm}}), tol);
  EXPECT_LT(check([&](auto& t) { return weighted_sum(t, t.transpose(a)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&](auto& t) { return weighted_sum(t, t.reshape(a, {6, 4})); }, {{"a", a}}), tol);
  EXPECT_LT(check([&](auto& t) { return weighted_sum(t, t.permute(a, {2, 0, 1})); }, {{"a", a}}),
            tol);
  EXPECT_LT(check(
                [&](auto& t) {
                  std::vector<TD> parts = {a, b};
                  return weighted_sum(t, t.concat(parts, 1));
                },
                {{"a", a}, {"b", b}}),
            tol);
  EXPECT_LT(check([&](auto& t) { return weighted_sum(t, t.slice(a, 2, 1, 3)); }, {{"a", a}}), tol);
  EXPECT_LT(check(
                [&](auto& t) {
                  std::vector<int> idx = {3, 0, 3, 5};
                  return weighted_sum(t, t.embedding_lookup(table, idx, {2, 2}));
                },
                {{"table", table}}),
            tol);
  EXPECT_LT(check(
                [&](auto& t) {
                  std::vector<std::size_t> rows = {5, 1, 1};
                  return weighted_sum(t, t.gather_rows(a, rows));
                },
                {{"a", a}}),
            tol);
  EXPECT_LT(check([&](auto& t) { return weighted_sum(t, t.gelu(a)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&](auto& t) { return weighted_sum(t, t.sigmoid(a)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&](auto& t) { return weighted_sum(t, t.softmax(a)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&](auto& t) { return weighted_sum(t, t.softmax(a, 1)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&](auto& t) { return weighted_sum(t, t.rms_norm(a, gain, 1e-6)); },
                  {{"a", a}, {"gain", gain}}), tol);
  EXPECT_LT(check([&](auto& t) { return weighted_sum(t, t.layer_norm(a, gain, bias, 1e-6)); },
                  {{"a", a}, {"gain", gain}, {"bias", bias}}), tol);
  EXPECT_LT(check(
                [&](auto& t) {
                  Mask mask(12, 0);
                  mask[1] = mask[7] = 1;
                  return weighted_sum(t, t.softmax(t.masked_fill(a, mask, -1e9)));
                },
                {{"a", a}}),
            tol);
  EXPECT_LT(check(
                [&](auto& t) {
                  std::vector<int> targets = {0, 3, 2, 1, 1, 0};
                  return t.cross_entropy(t.reshape(a, {6, 4}), targets);
                },
                {{"a", a}}),
            tol);
}

TEST(GradCheck, DropoutWithFixedSeed) {
  auto a = random_tensor({3, 4}, 30);
  EXPECT_LT(check([&](auto& t) { return weighted_sum(t, t.dropout(a, 0.3, 5)); }, {{"a", a}}),
            1e-6);
}

namespace {

// Direct evaluation of the contextual position logits for one [L, d] group.
std::vector<double> cope_oracle(const std::vector<double>& q, const std::vector<double>& scores,
                                const Mask& mask, const std::vector<double>& table,
                                std::size_t len, std::size_t d, std::size_t p_max) {
  std::vector<double> out(len * len, 0.0);
  auto gate = [&](std::size_t i, std::size_t u) {
    return mask[i * len + u] ? 0.0 : 1.0 / (1.0 + std::exp(-scores[i * len + u]));
  };
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = 0; j < len; ++j) {
      if (mask[i * len + j]) continue;
      double p = 0;
      for (std::size_t u = std::min(i, j); u <= std::max(i, j); ++u) p += gate(i, u);
      p = std::min(p, static_cast<double>(p_max));
      const auto lo = static_cast<std::size_t>(std::floor(p));
      const std::size_t hi = std::min(lo + 1, p_max);
      const double w = p - static_cast<double>(lo);
      double dot_lo = 0, dot_hi = 0;
      for (std::size_t c = 0; c < d; ++c) {
        dot_lo += q[i * d + c] * table[lo * d + c];
        dot_hi += q[i * d + c] * table[hi * d + c];
      }
      out[i * len + j] = (1 - w) * dot_lo + w * dot_hi;
    }
  }
  return out;
}

}  // namespace

TEST(Cope, ZeroScoresGiveHalfSpanPositions) {
  const std::size_t len = 5, d = 3, p_max = 8;
  auto q = random_tensor({len, d}, 40, 1.0, false);
  TD scores = TD::zeros({len, len}, false);
  auto table = random_tensor({p_max + 1, d}, 41, 1.0, false);
  Mask mask(len * len, 0);
  CopeState<double> state;
  Tape<double> tape(false);
  tape.cope_position_logits(q, scores, mask, table, p_max, &state);
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = 0; j < len; ++j) {
      const double expected = 0.5 * (static_cast<double>(i > j ? i - j : j - i) + 1.0);
      EXPECT_NEAR(state.positions[i * len + j], expected, 1e-12);
    }
    EXPECT_NEAR(state.positions[i * len + i], state.gates[i * len + i], 1e-15);
  }
}

TEST(Cope, MatchesDirectEvaluation) {
  const std::size_t len = 6, d = 4;
  for (std::size_t p_max : {2u, 6u}) {
    for (std::uint32_t seed = 0; seed < 5; ++seed) {
      auto q = random_tensor({len, d}, 50 + seed, 1.0, false);
      auto scores = random_tensor({len, len}, 60 + seed, 3.0, false);
      auto table = random_tensor({p_max + 1, d}, 70 + seed, 1.0, false);
      Mask mask(len * len, 0);
      mask[2] = mask[len + 4] = 1;
      Tape<double> tape(false);
      auto got = tape.cope_position_logits(q, scores, mask, table, p_max);
      auto want = cope_oracle({q.values().begin(), q.values().end()},
                              {scores.values().begin(), scores.values().end()}, mask,
                              {table.values().begin(), table.values().end()}, len, d, p_max);
      for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got.values()[i], want[i], 1e-12);
    }
  }
}

TEST(Cope, IntegerPositionReadsSingleRow) {
  // one key, gate saturated at 1: p = 1 exactly, the output is q . e_1
  const std::size_t d = 2;
  TD q({1, d}, {0.3, -0.7}, false);
  TD scores({1, 1}, {60.0}, false);
  TD table({3, d}, {9, 9, 2, 5, 9, 9}, false);
  Tape<double> tape(false);
  auto out = tape.cope_position_logits(q, scores, Mask(1, 0), table, 2);
  EXPECT_NEAR(out.item(), 0.3 * 2 - 0.7 * 5, 1e-12);
}

TEST(Cope, GradientCheck) {
  const std::size_t len = 5, d = 3, p_max = 7;
  auto q = random_tensor({2, len, d}, 80);
  auto scores = random_tensor({2, len, len}, 81, 0.7);
  auto table = random_tensor({p_max + 1, d}, 82);
  Mask mask(2 * len * len, 0);
  for (std::size_t i = 0; i < len; ++i) mask[len * len + i * len] = 1;
  auto f = [&](Tape<double>& t) {
    return weighted_sum(t, t.cope_position_logits(q, scores, mask, table, p_max));
  };
  EXPECT_LT(check(f, {{"q", q}, {"scores", scores}, {"table", table}}), 1e-5);
}

TEST(GradCheck, NonFiniteLossIsNumericError) {
  auto a = random_tensor({2}, 90);
  auto f = [&](Tape<double>& t) {
    return t.scale(t.sum(a), std::numeric_limits<double>::infinity());
  };
  EXPECT_THROW(gradient_check(f, std::vector<Parameter<double>>{{"a", a}}), NumericError);
}
