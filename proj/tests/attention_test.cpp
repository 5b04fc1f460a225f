#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "captionforge/attention.hpp"
#include "captionforge/errors.hpp"
#include "test_util.hpp"

using namespace captionforge;
using testutil::random_tensor;

namespace {

// Plain-loop attention for one sequence, used as the oracle.
Tensor naive_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  const std::size_t tq = q.dim(0), tk = k.dim(0), dk = q.dim(1), dv = v.dim(1);
  Tensor out({tq, dv}, 0.0);
  for (std::size_t i = 0; i < tq; ++i) {
    std::vector<double> s(tk);
    for (std::size_t j = 0; j < tk; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < dk; ++c) dot += q.at(i, c) * k.at(j, c);
      s[j] = dot / std::sqrt(static_cast<double>(dk));
    }
    const double m = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (double& x : s) z += (x = std::exp(x - m));
    for (std::size_t j = 0; j < tk; ++j)
      for (std::size_t c = 0; c < dv; ++c) out.at(i, c) += s[j] / z * v.at(j, c);
  }
  return out;
}

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.dim(0), b.dim(1)}, 0.0);
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t k = 0; k < a.dim(1); ++k)
      for (std::size_t j = 0; j < b.dim(1); ++j) c.at(i, j) += a.at(i, k) * b.at(k, j);
  return c;
}

Tensor columns(const Tensor& m, std::size_t from, std::size_t count) {
  Tensor out({m.dim(0), count});
  for (std::size_t r = 0; r < m.dim(0); ++r)
    for (std::size_t c = 0; c < count; ++c) out.at(r, c) = m.at(r, from + c);
  return out;
}

}  // namespace

TEST(Attention, SingleKeyReturnsValue) {
  Graph g;
  Rng rng(0);
  const Tensor v = random_tensor(rng, {1, 3});
  auto r = scaled_dot_product_attention(g.constant(random_tensor(rng, {2, 4})), g.constant(random_tensor(rng, {1, 4})),
                                        g.constant(v));
  EXPECT_EQ(r.weights.value(), Tensor({2, 1}, 1.0));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(r.output.value().at(i, c), v.at(0, c));
}

TEST(Attention, OrthogonalQueryAveragesValues) {
  Graph g;
  const Tensor v = Tensor::matrix({{1, 2}, {3, 6}});
  auto r = scaled_dot_product_attention(g.constant(Tensor::matrix({{1, 0}})), g.constant(Tensor::matrix({{0, 1}, {0, -2}})),
                                        g.constant(v));
  EXPECT_DOUBLE_EQ(r.output.value().at(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(r.output.value().at(0, 1), 4.0);
}

TEST(Attention, ClosedFormWeightWithScaling) {
  // d_k = 4, q.k1 = 2, q.k2 = 0 -> weight1 = e / (e + 1)
  Graph g;
  auto r = scaled_dot_product_attention(g.constant(Tensor::matrix({{1, 1, 0, 0}})),
                                        g.constant(Tensor::matrix({{1, 1, 0, 0}, {0, 0, 1, 1}})),
                                        g.constant(Tensor({2, 1}, 1.0)));
  const double e = std::exp(1.0);
  EXPECT_NEAR(r.weights.value()[0], e / (e + 1.0), 1e-15);
  EXPECT_NEAR(r.weights.value()[0], 0.7311, 1e-4);
}

TEST(Attention, ZeroKeyWidthIsConfigError) {
  Graph g;
  // A [2, 0] tensor cannot exist, so d_k = 0 is reachable only through heads.
  EXPECT_THROW(MultiHeadWeights(g.constant(Tensor({4, 4})), g.constant(Tensor({4, 4})), g.constant(Tensor({4, 4})),
                                g.constant(Tensor({4, 4})), 8),
               ConfigError);
  EXPECT_THROW(MultiHeadWeights(g.constant(Tensor({6, 6})), g.constant(Tensor({6, 6})), g.constant(Tensor({6, 6})),
                                g.constant(Tensor({6, 6})), 4),
               ConfigError);
}

TEST(MultiHead, SingleHeadReducesToAttentionThenOutput) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    const Tensor x = random_tensor(rng, {3, 4}), m = random_tensor(rng, {5, 4});
    const Tensor wq = random_tensor(rng, {4, 4}), wk = random_tensor(rng, {4, 4}), wv = random_tensor(rng, {4, 4}),
                 wo = random_tensor(rng, {4, 4});
    const MultiHeadWeights w(g.constant(wq), g.constant(wk), g.constant(wv), g.constant(wo), 1);
    const Tensor got = multi_head_attention(g.constant(x), g.constant(m), w).value();
    const Tensor want = naive_matmul(naive_attention(naive_matmul(x, wq), naive_matmul(m, wk), naive_matmul(m, wv)), wo);
    EXPECT_LT(max_abs_diff(got, want), 1e-12);
  }
}

TEST(MultiHead, ZeroOutputProjectionGivesZeros) {
  Rng rng(2);
  Graph g;
  const MultiHeadWeights w(g.constant(random_tensor(rng, {4, 4})), g.constant(random_tensor(rng, {4, 4})),
                           g.constant(random_tensor(rng, {4, 4})), g.constant(Tensor({4, 4}, 0.0)), 2);
  const Tensor y = multi_head_attention(g.constant(random_tensor(rng, {3, 4})), g.constant(random_tensor(rng, {3, 4})), w)
                       .value();
  EXPECT_EQ(y, Tensor({3, 4}, 0.0));
}

TEST(MultiHead, TwoHeadsMatchHandComputation) {
  // d_model 4, two heads of width 2, 2x4 inputs and hand-set projections.
  const Tensor x = Tensor::matrix({{1, 0, 2, -1}, {0, 1, -1, 3}});
  const Tensor wq = Tensor::matrix({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
  const Tensor wk = Tensor::matrix({{0, 1, 0, 0}, {1, 0, 0, 0}, {0, 0, 0.5, 0}, {0, 0, 0, 2}});
  const Tensor wv = Tensor::matrix({{1, 1, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 1, 1}});
  const Tensor wo = Tensor::matrix({{1, 0, 0, 1}, {0, 2, 0, 0}, {0, 0, 1, 0}, {1, 0, 0, -1}});

  Graph g;
  const MultiHeadWeights w(g.constant(wq), g.constant(wk), g.constant(wv), g.constant(wo), 2);
  const Tensor got = multi_head_attention(g.constant(x), g.constant(x), w).value();

  const Tensor q = naive_matmul(x, wq), k = naive_matmul(x, wk), v = naive_matmul(x, wv);
  Tensor concat({2, 4});
  for (std::size_t h = 0; h < 2; ++h) {
    const Tensor head = naive_attention(columns(q, 2 * h, 2), columns(k, 2 * h, 2), columns(v, 2 * h, 2));
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < 2; ++c) concat.at(r, 2 * h + c) = head.at(r, c);
  }
  const Tensor want = naive_matmul(concat, wo);
  EXPECT_LT(max_abs_diff(got, want), 1e-14);

  // Head 0 by hand, row 0: q = (1, 0), keys (0, 1) and (1, 0) -> scores 0 and 1/sqrt2.
  const double a = std::exp(1.0 / std::sqrt(2.0));
  const double w1 = a / (1.0 + a);
  // v rows for head 0: (1, 1) and (0, 1)
  EXPECT_NEAR(concat.at(0, 0), (1.0 - w1) * 1.0 + w1 * 0.0, 1e-15);
  EXPECT_NEAR(concat.at(0, 1), 1.0, 1e-15);
}

TEST(CausalMask, Structure) {
  EXPECT_EQ(causal_mask(1).additive, Tensor({1, 1}, 0.0));
  const AttentionMask m = causal_mask(3);
  for (std::size_t i = 0; i < 3; ++i) {
    std::size_t visible = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      visible += m.visible(i, j);
      EXPECT_EQ(m.visible(i, j), j <= i);
      if (j > i) {
        EXPECT_TRUE(std::isinf(m.additive.at(i, j)));
        EXPECT_LT(m.additive.at(i, j), 0.0);
      }
    }
    EXPECT_EQ(visible, i + 1);
  }
}

TEST(CausalMask, LaterPositionsDoNotLeak) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t t = 2 + rng.below(6);
    const Tensor x = random_tensor(rng, {t, 4});
    const AttentionMask mask = causal_mask(t);
    auto run = [&](const Tensor& in) {
      Graph g;
      Var v = g.constant(in);
      return scaled_dot_product_attention(v, v, v, &mask).output.value();
    };
    const Tensor base = run(x);
    const std::size_t j = 1 + rng.below(t - 1);
    Tensor bumped = x;
    for (std::size_t c = 0; c < 4; ++c) bumped.at(j, c) += rng.uniform(-3.0, 3.0);
    const Tensor after = run(bumped);
    for (std::size_t i = 0; i < j; ++i)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(base.at(i, c), after.at(i, c)) << "row " << i << " col " << j;
  }
}

TEST(PaddingMask, Columns) {
  const std::vector<std::size_t> full{4};
  EXPECT_EQ(padding_mask(full, 4)[0].additive, Tensor({4, 4}, 0.0));
  const std::vector<std::size_t> two{2};
  const AttentionMask m = padding_mask(two, 4)[0];
  for (std::size_t q = 0; q < 4; ++q)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(m.visible(q, k), k < 2);
}

TEST(PaddingMask, RejectsEmptyAndOverlongSequences) {
  const std::vector<std::size_t> zero{3, 0};
  EXPECT_THROW(padding_mask(zero, 3), DataError);
  const std::vector<std::size_t> over{5};
  EXPECT_THROW(padding_mask(over, 3), ShapeError);
}

TEST(PaddingMask, PaddedBatchMatchesSingleSequences) {
  Rng rng(4);
  const std::vector<std::size_t> lengths{5, 2, 3};
  const std::size_t t_max = 5, d = 4;
  std::vector<Tensor> seqs;
  Tensor batch({3, t_max, d}, 0.0);
  for (std::size_t b = 0; b < 3; ++b) {
    seqs.push_back(random_tensor(rng, {lengths[b], d}));
    std::copy_n(seqs[b].data(), seqs[b].size(), batch.data() + b * t_max * d);
  }
  const Tensor wq = random_tensor(rng, {d, d}), wk = random_tensor(rng, {d, d}), wv = random_tensor(rng, {d, d}),
               wo = random_tensor(rng, {d, d});
  const auto masks = padding_mask(lengths, t_max);
  const AttentionMask mask = stack_masks(masks);

  Graph g;
  const MultiHeadWeights w(g.constant(wq), g.constant(wk), g.constant(wv), g.constant(wo), 2);
  const Tensor got = multi_head_attention(g.constant(batch), g.constant(batch), w, &mask).value();
  for (std::size_t b = 0; b < 3; ++b) {
    Graph h;
    const MultiHeadWeights ws(h.constant(wq), h.constant(wk), h.constant(wv), h.constant(wo), 2);
    const Tensor single = multi_head_attention(h.constant(seqs[b]), h.constant(seqs[b]), ws).value();
    for (std::size_t i = 0; i < lengths[b]; ++i)
      for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(got[(b * t_max + i) * d + c], single.at(i, c), 1e-10);
  }
}

TEST(Positions, Values) {
  const Tensor p = sinusoidal_positions(6, 8);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(p.at(0, c), c % 2 == 0 ? 0.0 : 1.0);
  EXPECT_NEAR(p.at(1, 0), std::sin(1.0), 1e-15);
  EXPECT_NEAR(p.at(1, 0), 0.84147, 1e-5);
  EXPECT_NEAR(p.at(3, 5), std::cos(3.0 / std::pow(10000.0, 4.0 / 8.0)), 1e-15);
  for (double v : p.values()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Positions, OddWidthEndsWithCosine) {
  const Tensor p = sinusoidal_positions(3, 5);
  // columns 0..3 are two sin/cos pairs; column 4 is the cosine of the third pair
  EXPECT_NEAR(p.at(2, 4), std::cos(2.0 / std::pow(10000.0, 4.0 / 5.0)), 1e-15);
  EXPECT_EQ(p.at(0, 4), 1.0);
}

// 1,000 randomized cases of the invariants.
TEST(Attention, RandomizedInvariants) {
  Rng rng(5);
  double worst_sum = 0.0, worst_perm = 0.0, worst_scale = 0.0, worst_heads = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t tq = 1 + rng.below(6), tk = 1 + rng.below(6), dk = 1 + rng.below(6);
    const Tensor q = random_tensor(rng, {tq, dk}), k = random_tensor(rng, {tk, dk}), v = random_tensor(rng, {tk, 3});
    Graph g;
    const auto r = scaled_dot_product_attention(g.constant(q), g.constant(k), g.constant(v));
    // copies: later pushes may move the graph's storage
    const Tensor out = r.output.value(), weights = r.weights.value();
    for (std::size_t i = 0; i < tq; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < tk; ++j) s += weights.at(i, j);
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    }

    // joint permutation of keys and values
    std::vector<std::size_t> perm(tk);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm.begin(), perm.end());
    Tensor kp({tk, dk}), vp({tk, 3});
    for (std::size_t j = 0; j < tk; ++j) {
      for (std::size_t c = 0; c < dk; ++c) kp.at(j, c) = k.at(perm[j], c);
      for (std::size_t c = 0; c < 3; ++c) vp.at(j, c) = v.at(perm[j], c);
    }
    worst_perm = std::max(worst_perm, max_abs_diff(scaled_dot_product_attention(g.constant(q), g.constant(kp),
                                                                                g.constant(vp))
                                                       .output.value(),
                                                   out));

    // q * c, k / c
    const double c = rng.uniform(0.25, 4.0);
    Tensor qs = q, ks = k;
    for (double& x : qs.values()) x *= c;
    for (double& x : ks.values()) x /= c;
    worst_scale = std::max(
        worst_scale,
        max_abs_diff(scaled_dot_product_attention(g.constant(qs), g.constant(ks), g.constant(v)).weights.value(),
                     weights));

    // one head with identity output projection is plain attention after projection
    const std::size_t d = 1 + rng.below(5);
    const Tensor x = random_tensor(rng, {tq, d}), m = random_tensor(rng, {tk, d});
    const Tensor wq = random_tensor(rng, {d, d}), wk = random_tensor(rng, {d, d}), wv = random_tensor(rng, {d, d}),
                 wo = random_tensor(rng, {d, d});
    const MultiHeadWeights w(g.constant(wq), g.constant(wk), g.constant(wv), g.constant(wo), 1);
    const Tensor mh = multi_head_attention(g.constant(x), g.constant(m), w).value();
    const Tensor single = matmul(scaled_dot_product_attention(matmul(g.constant(x), g.constant(wq)),
                                                              matmul(g.constant(m), g.constant(wk)),
                                                              matmul(g.constant(m), g.constant(wv)))
                                     .output,
                                 g.constant(wo))
                              .value();
    worst_heads = std::max(worst_heads, max_abs_diff(mh, single));
  }
  EXPECT_LT(worst_sum, 1e-10);
  EXPECT_LT(worst_perm, 1e-10);
  EXPECT_LT(worst_scale, 1e-10);
  EXPECT_LT(worst_heads, 1e-12);
}
