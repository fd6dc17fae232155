#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "stmixer/autograd.hpp"
#include "stmixer/gradcheck.hpp"
#include "stmixer/nn.hpp"
#include "stmixer/rng.hpp"
#include "stmixer/tensor_io.hpp"

using namespace stmx;

namespace {

Var leaf(Shape dims, std::vector<double> data) { return Var(Tensor(std::move(dims), std::move(data)), true); }

// Scalar reference attention for one unbatched set of queries.
std::vector<double> attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionParams& p) {
  const std::size_t nq = q.dim(0), nk = k.dim(0), d = q.dim(1), heads = p.heads, dh = d / heads;
  auto project = [d](const Tensor& x, const Linear& l, std::size_t row, std::size_t col) {
    double acc = l.bias->value()[col];
    for (std::size_t i = 0; i < d; ++i) acc += x[row * d + i] * l.weight->value()[i * d + col];
    return acc;
  };
  std::vector<double> ctx(nq * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < nq; ++i) {
      std::vector<double> logits(nk);
      for (std::size_t j = 0; j < nk; ++j) {
        double s = 0.0;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) s += project(q, p.q_proj, i, c) * project(k, p.k_proj, j, c);
        logits[j] = s / std::sqrt(static_cast<double>(dh));
      }
      double mx = logits[0];
      for (double l : logits) mx = std::max(mx, l);
      double z = 0.0;
      for (double& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t j = 0; j < nk; ++j)
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) ctx[i * d + c] += logits[j] / z * project(v, p.v_proj, j, c);
    }
  }
  std::vector<double> out(nq * d);
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      double acc = p.out_proj.bias->value()[c];
      for (std::size_t e = 0; e < d; ++e) acc += ctx[i * d + e] * p.out_proj.weight->value()[e * d + c];
      out[i * d + c] = acc;
    }
  return out;
}

}  // namespace

TEST(Tensor, RejectsMismatchedData) { EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError); }

TEST(Tensor, IndexingIsRowMajor) {
  Tensor t({2, 3}, {0, 1, 2, 3, 4, 5});
  EXPECT_EQ(t.at({1, 2}), 5.0);
  EXPECT_EQ(t.at({0, 1}), 1.0);
  EXPECT_THROW(t.at({2, 0}), ShapeError);
}

TEST(Rng, SameSeedSameSequence) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng d(42), e(43);
  EXPECT_NE(d.next_u64(), e.next_u64());
}

TEST(Rng, UniformAndNormalMoments) {
  Rng rng(7);
  double s = 0.0, s2 = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const double g = rng.normal();
    s += g;
    s2 += g * g;
  }
  EXPECT_NEAR(s / n, 0.0, 0.03);
  EXPECT_NEAR(s2 / n, 1.0, 0.05);
}

TEST(LinearApply, IdentityWeights) {
  Var x = constant(Tensor({1, 2}, {1, 2}));
  Var w = constant(Tensor({2, 2}, {1, 0, 0, 1}));
  Var b = constant(Tensor({2}, {0, 0}));
  const Var y = linear(x, w, b);
  EXPECT_EQ(y.value().vec(), (std::vector<double>{1, 2}));
}

TEST(LinearApply, HandArithmetic) {
  const Var y = linear(constant(Tensor({1, 2}, {1, 1})), constant(Tensor({2, 1}, {1, -1})), constant(Tensor({1}, {0.5})));
  EXPECT_DOUBLE_EQ(y.item(), 0.5);
}

TEST(LinearApply, ZeroWeightsAnnihilate) {
  Rng rng(1);
  const Var y = linear(constant(rng.normal_tensor({3, 4}, 1.0)), constant(Tensor({4, 5})), constant(Tensor({5})));
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(y.dims(), (Shape{3, 5}));
}

TEST(LinearApply, DimensionMismatchThrows) {
  EXPECT_THROW(linear(constant(Tensor({1, 3})), constant(Tensor({2, 2})), constant(Tensor({2}))), ShapeError);
}

TEST(LayerNormOp, ZeroMeanUnitVarianceInput) {
  const Var y = layer_norm(constant(Tensor({2}, {1, -1})), constant(Tensor::full({2}, 1.0)), constant(Tensor({2})), 1e-12);
  EXPECT_NEAR(y.value()[0], 1.0, 1e-6);
  EXPECT_NEAR(y.value()[1], -1.0, 1e-6);
}

TEST(LayerNormOp, ConstantInputGivesZeros) {
  const Var y = layer_norm(constant(Tensor::full({4}, 3.5)), constant(Tensor::full({4}, 1.0)), constant(Tensor({4})), 1e-5);
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNormOp, HandComputation) {
  const Var y = layer_norm(constant(Tensor({2}, {0, 2})), constant(Tensor::full({2}, 1.0)), constant(Tensor({2})), 1e-12);
  EXPECT_NEAR(y.value()[0], -1.0, 1e-9);
  EXPECT_NEAR(y.value()[1], 1.0, 1e-9);
}

TEST(LayerNormOp, StandardizesRows) {
  Rng rng(3);
  const Var y = layer_norm(constant(rng.normal_tensor({5, 8}, 3.0)), constant(Tensor::full({8}, 1.0)), constant(Tensor({8})), 1e-5);
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < 8; ++i) m += y.value()[r * 8 + i];
    m /= 8;
    for (std::size_t i = 0; i < 8; ++i) v += std::pow(y.value()[r * 8 + i] - m, 2);
    v /= 8;
    EXPECT_LE(std::abs(m), 1e-9);
    EXPECT_NEAR(v, 1.0, 1e-5);  // eps=1e-5 shifts variance by ~eps/var
  }
}

TEST(Activations, ReluAndSoftmax) {
  EXPECT_EQ(relu(constant(Tensor({3}, {-1, 0, 2}))).value().vec(), (std::vector<double>{0, 0, 2}));
  const Var u = softmax(constant(Tensor({3}, {0, 0, 0})));
  for (double v : u.value().data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  const Var s = softmax(constant(Tensor({2}, {std::log(2.0), 0.0})));
  EXPECT_NEAR(s.value()[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(s.value()[1], 1.0 / 3.0, 1e-15);
}

TEST(Activations, SoftmaxRowsAreSimplexPoints) {
  Rng rng(9);
  const Var s = softmax(constant(rng.normal_tensor({6, 5}, 4.0)));
  for (std::size_t r = 0; r < 6; ++r) {
    double total = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_GT(s.value()[r * 5 + i], 0.0);
      total += s.value()[r * 5 + i];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Autograd, NonFiniteIsAnError) {
  EXPECT_THROW(scale(constant(Tensor({1}, {1e300})), 1e300), NumericError);
}

TEST(Autograd, LeavesAccumulateAcrossBackwardCalls) {
  Var w = leaf({1}, {3.0});
  Var y = mul(w, w);
  y.backward();
  EXPECT_DOUBLE_EQ(w.grad()[0], 6.0);
  y.backward();
  EXPECT_DOUBLE_EQ(w.grad()[0], 12.0);
}

TEST(Autograd, NoGradGuardSkipsRecording) {
  Var w = leaf({1}, {2.0});
  NoGradGuard guard;
  Var y = mul(w, w);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, OpsAreDeterministic) {
  Rng r1(5), r2(5);
  const Var a = softmax(matmul(constant(r1.normal_tensor({4, 6}, 1.0)), constant(r1.normal_tensor({6, 3}, 1.0))));
  const Var b = softmax(matmul(constant(r2.normal_tensor({4, 6}, 1.0)), constant(r2.normal_tensor({6, 3}, 1.0))));
  EXPECT_EQ(a.value().vec(), b.value().vec());
}

TEST(Attention, SingleKeyReturnsProjectedValue) {
  Rng rng(11);
  ParameterStore store;
  const auto p = AttentionParams::create(store, "attn", 8, 2, rng);
  const Var k = constant(rng.normal_tensor({1, 8}, 1.0));
  const Var v = constant(rng.normal_tensor({1, 8}, 1.0));
  const Var out1 = multi_head_attention(constant(rng.normal_tensor({3, 8}, 1.0)), k, v, p);
  const Var out2 = multi_head_attention(constant(rng.normal_tensor({3, 8}, 5.0)), k, v, p);
  const Var expected = p.out_proj(p.v_proj(v));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 8; ++c) {
      EXPECT_NEAR(out1.value()[i * 8 + c], expected.value()[c], 1e-12);
      EXPECT_NEAR(out2.value()[i * 8 + c], expected.value()[c], 1e-12);
    }
}

TEST(Attention, KeyValuePermutationInvariance) {
  Rng rng(12);
  ParameterStore store;
  const auto p = AttentionParams::create(store, "attn", 8, 4, rng);
  const Tensor q = rng.normal_tensor({2, 8}, 1.0);
  const Tensor k = rng.normal_tensor({4, 8}, 1.0);
  const Tensor v = rng.normal_tensor({4, 8}, 1.0);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  const Var a = multi_head_attention(constant(q), constant(k), constant(v), p);
  const Var b = multi_head_attention(constant(q), index_select(constant(k), 0, perm), index_select(constant(v), 0, perm), p);
  EXPECT_LT(max_abs_diff(a.value(), b.value()), 1e-12);
}

TEST(Attention, MatchesScalarOracle) {
  Rng rng(13);
  ParameterStore store;
  const auto p = AttentionParams::create(store, "attn", 4, 2, rng);
  const Tensor q = rng.normal_tensor({2, 4}, 1.0);
  const Tensor k = rng.normal_tensor({2, 4}, 1.0);
  const Tensor v = rng.normal_tensor({2, 4}, 1.0);
  const Var out = multi_head_attention(constant(q), constant(k), constant(v), p);
  const auto expected = attention_oracle(q, k, v, p);
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(out.value()[i], expected[i], 1e-10);
}

TEST(Attention, HeadsMustDivideDim) {
  Rng rng(1);
  ParameterStore store;
  EXPECT_THROW(AttentionParams::create(store, "attn", 10, 4, rng), ConfigError);
}

TEST(GradCheck, Quadratic) {
  Var w = leaf({1}, {3.0});
  const auto report = check_gradients([&] { return mul(w, w); }, {{"w", w}}, 1e-5, 1e-8);
  EXPECT_TRUE(report.passed());
  EXPECT_DOUBLE_EQ(w.grad()[0], 6.0);
}

TEST(GradCheck, LayerNormSum) {
  Rng rng(21);
  Var x(rng.normal_tensor({4}, 1.0), true);
  Var g(rng.normal_tensor({4}, 1.0), true);
  Var b(rng.normal_tensor({4}, 1.0), true);
  Var weights = constant(rng.normal_tensor({4}, 1.0));
  // Plain sum of a LayerNorm output has zero gradient w.r.t. x; weighting
  // makes the check informative.
  const auto report = check_gradients([&] { return sum(mul(layer_norm(x, g, b, 1e-5), weights)); },
                                      {{"x", x}, {"gain", g}, {"bias", b}}, 1e-5, 1e-6);
  EXPECT_TRUE(report.passed()) << report.max_error;
}

TEST(GradCheck, BrokenGradientIsReported) {
  Var w = leaf({2}, {1.0, 2.0});
  auto broken = [&] {
    // Correct value, wrong gradient (twice the truth).
    Tensor out = Tensor::scalar(w.value()[0] * w.value()[0] + w.value()[1]);
    return make_op(std::move(out), {w}, [](Node& self) {
      auto& g = self.parents[0]->grad_buffer();
      g[0] += self.grad[0] * 4.0 * self.parents[0]->value[0];
      g[1] += self.grad[0];
    });
  };
  const auto report = check_gradients(broken, {{"w", w}});
  ASSERT_EQ(report.failures.size(), 1u);
  EXPECT_EQ(report.failures[0].index, 0u);
}

TEST(GradCheck, NonFiniteFunctionIsHarnessError) {
  // log(max(w - h, 0)) is -inf on the minus side of the difference.
  Var w = leaf({1}, {5e-6});
  EXPECT_THROW(check_gradients([&] { return log_clamped(w, 0.0); }, {{"w", w}}, 1e-5), NumericError);
}

TEST(GradCheck, ComposedOpsPass) {
  Rng rng(31);
  Var a(rng.normal_tensor({2, 3, 4}, 1.0), true);
  Var b(rng.normal_tensor({2, 4, 5}, 1.0), true);
  Var w(rng.normal_tensor({5, 3}, 1.0), true);
  Var bias(rng.normal_tensor({3}, 1.0), true);
  Var coeff = constant(rng.normal_tensor({3, 2, 3}, 1.0));
  auto f = [&] {
    Var y = linear(bmm(a, b), w, bias);                 // [2,3,3]
    y = softmax(permute(y, {1, 0, 2}));                 // [3,2,3]
    Var c = concat({slice(y, 2, 0, 1), index_select(y, 2, {2, 1})}, 2);
    Var m = mean_axis(repeat_new_axis(sigmoid(mul(c, coeff)), 1, 2), 1);
    return add(sum(square(m)), mean(abs(sub(c, coeff))));
  };
  const auto report = check_gradients(f, {{"a", a}, {"b", b}, {"w", w}, {"bias", bias}}, 1e-5, 1e-6);
  EXPECT_TRUE(report.passed()) << report.max_error;
}

TEST(GradCheck, BmmTransposedAndAttention) {
  Rng rng(32);
  ParameterStore store;
  const auto p = AttentionParams::create(store, "attn", 8, 2, rng);
  Var q(rng.normal_tensor({2, 3, 8}, 1.0), true);
  Var kv(rng.normal_tensor({2, 4, 8}, 1.0), true);
  const Var coeff = constant(rng.normal_tensor({2, 3, 8}, 1.0));
  auto f = [&] { return sum(mul(multi_head_attention(q, kv, kv, p), coeff)); };
  auto targets = std::vector<GradTarget>{{"q", q}, {"kv", kv}};
  for (auto& prm : store.all()) targets.push_back({prm.name(), prm.var()});
  const auto report = check_gradients(f, targets, 1e-5, 1e-6);
  EXPECT_TRUE(report.passed()) << report.max_error;
}

TEST(ParameterStoreTest, ZeroGradClearsAndKeepsDims) {
  ParameterStore store;
  Rng rng(1);
  auto l = Linear::create(store, "fc", 3, 2, rng);
  sum(l(constant(rng.normal_tensor({4, 3}, 1.0)))).backward();
  EXPECT_EQ(l.weight->grad().dims(), l.weight->value().dims());
  store.zero_grad();
  for (auto& p : store.all())
    for (double g : p.grad().data()) EXPECT_EQ(g, 0.0);
  EXPECT_THROW(store.add("fc.weight", Tensor({1})), ConfigError);
}

TEST(TensorIo, StmxRoundTripAtFloatPrecision) {
  Rng rng(3);
  const Tensor t = rng.normal_tensor({2, 3, 4}, 1.0);
  std::stringstream buf;
  write_stmx(buf, t);
  const std::string bytes = buf.str();
  ASSERT_EQ(bytes.size(), 4u + 1u + 3u * 8u + 24u * 4u);
  EXPECT_EQ(bytes.substr(0, 4), "STMX");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 3u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 2u);  // first extent, little-endian
  const Tensor back = read_stmx(buf);
  ASSERT_EQ(back.dims(), t.dims());
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(back[i], static_cast<double>(static_cast<float>(t[i])));
}

TEST(TensorIo, BadMagicRejected) {
  std::stringstream buf("NOPE\x01");
  EXPECT_THROW(read_stmx(buf), LoadError);
}
