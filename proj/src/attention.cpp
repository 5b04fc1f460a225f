#include "captionforge/attention.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "captionforge/errors.hpp"

namespace captionforge {

namespace {

constexpr double kHidden = -std::numeric_limits<double>::infinity();

// Repeats each of the Bm mask slices Bq/Bm times, matching split_heads' b*H+h layout.
Tensor expand_mask(const Tensor& mask, std::size_t batch) {
  const std::size_t bm = mask.dim(0);
  if (batch % bm != 0) {
    throw ShapeError("attention mask batch " + std::to_string(bm) + " does not divide query batch " +
                     std::to_string(batch));
  }
  if (bm == batch) return mask;
  const std::size_t repeat = batch / bm;
  const std::size_t slice = mask.size() / bm;
  Tensor out({batch, mask.dim(1), mask.dim(2)});
  for (std::size_t b = 0; b < bm; ++b)
    for (std::size_t r = 0; r < repeat; ++r)
      std::copy_n(mask.data() + b * slice, slice, out.data() + (b * repeat + r) * slice);
  return out;
}

}  // namespace

AttentionMask causal_mask(std::size_t t) {
  if (t == 0) throw ShapeError("causal_mask: length must be at least 1");
  Tensor m({t, t}, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j) m.at(i, j) = kHidden;
  return {std::move(m)};
}

std::vector<AttentionMask> padding_mask(std::span<const std::size_t> lengths, std::size_t t_max,
                                        std::size_t t_query) {
  if (t_query == 0) t_query = t_max;
  std::vector<AttentionMask> masks;
  masks.reserve(lengths.size());
  for (std::size_t s = 0; s < lengths.size(); ++s) {
    const std::size_t len = lengths[s];
    if (len == 0) throw DataError("padding_mask: sequence " + std::to_string(s) + " is empty");
    if (len > t_max) {
      throw ShapeError("padding_mask: length " + std::to_string(len) + " exceeds t_max " +
                       std::to_string(t_max));
    }
    Tensor m({t_query, t_max}, 0.0);
    for (std::size_t i = 0; i < t_query; ++i)
      for (std::size_t j = len; j < t_max; ++j) m.at(i, j) = kHidden;
    masks.push_back({std::move(m)});
  }
  return masks;
}

AttentionMask stack_masks(std::span<const AttentionMask> masks) {
  if (masks.empty()) throw ShapeError("stack_masks: no masks");
  const Shape& s = masks[0].additive.shape();
  Tensor out({masks.size(), s[0], s[1]});
  const std::size_t n = masks[0].additive.size();
  for (std::size_t b = 0; b < masks.size(); ++b) {
    if (masks[b].additive.shape() != s) throw ShapeError("stack_masks: masks differ in shape");
    std::copy_n(masks[b].additive.data(), n, out.data() + b * n);
  }
  return {std::move(out)};
}

Tensor sinusoidal_positions(std::size_t t, std::size_t d) {
  Tensor table({t, d}, 0.0);
  for (std::size_t pos = 0; pos < t; ++pos) {
    for (std::size_t col = 0; col < d; col += 2) {
      const double rate = std::pow(10000.0, static_cast<double>(col) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) / rate;
      if (col + 1 < d) {
        table.at(pos, col) = std::sin(angle);
        table.at(pos, col + 1) = std::cos(angle);
      } else {
        table.at(pos, col) = std::cos(angle);
      }
    }
  }
  return table;
}

AttentionResult scaled_dot_product_attention(Var q, Var k, Var v, const AttentionMask* mask) {
  const bool unbatched = q.shape().size() == 2;
  if (unbatched) {
    if (k.shape().size() != 2 || v.shape().size() != 2) {
      throw ShapeError("attention: q " + shape_string(q.shape()) + ", k " + shape_string(k.shape()) +
                       ", v " + shape_string(v.shape()) + " must share rank");
    }
    q = reshape(q, {1, q.shape()[0], q.shape()[1]});
    k = reshape(k, {1, k.shape()[0], k.shape()[1]});
    v = reshape(v, {1, v.shape()[0], v.shape()[1]});
  }
  if (k.shape()[1] != v.shape()[1]) {
    throw ShapeError("attention: keys " + shape_string(k.shape()) + " and values " +
                     shape_string(v.shape()) + " differ in length");
  }
  const std::size_t d_k = q.shape()[2];
  if (d_k == 0) throw ConfigError("attention: d_k must be positive");

  Var scores = scale(bmm(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(static_cast<double>(d_k)));
  if (mask) {
    const Tensor& m = mask->additive;
    const std::size_t tq = scores.shape()[1], tk = scores.shape()[2];
    const bool fits = m.rank() >= 2 && m.dim(m.rank() - 2) == tq && m.dim(m.rank() - 1) == tk;
    if (!fits || m.rank() > 3) {
      throw ShapeError("attention: mask " + shape_string(m.shape()) + " does not match scores " +
                       shape_string(scores.shape()));
    }
    Graph& g = *q.graph;
    if (m.rank() == 2) {
      scores = add_trailing(scores, g.constant(m));
    } else {
      scores = add(scores, g.constant(expand_mask(m, scores.shape()[0])));
    }
  }
  Var weights = softmax_lastdim(scores);
  Var out = bmm(weights, v);
  if (unbatched) {
    out = reshape(out, {out.shape()[1], out.shape()[2]});
    weights = reshape(weights, {weights.shape()[1], weights.shape()[2]});
  }
  return {out, weights};
}

MultiHeadWeights::MultiHeadWeights(Var q, Var k, Var v, Var o, std::size_t n_heads)
    : w_q(q), w_k(k), w_v(v), w_o(o), heads(n_heads) {
  const Shape& s = w_q.shape();
  if (s.size() != 2 || heads == 0 || s[1] % heads != 0) {
    throw ConfigError("multi-head attention: projection width " + shape_string(s) +
                      " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (w_k.shape() != s || w_v.shape() != s || w_o.shape() != Shape{s[1], s[0]}) {
    throw ShapeError("multi-head attention: projections " + shape_string(s) + ", " +
                     shape_string(w_k.shape()) + ", " + shape_string(w_v.shape()) + ", " +
                     shape_string(w_o.shape()) + " disagree");
  }
}

Var multi_head_attention(Var x_q, Var x_kv, const MultiHeadWeights& p, const AttentionMask* mask) {
  const bool unbatched = x_q.shape().size() == 2;
  if (unbatched) {
    x_q = reshape(x_q, {1, x_q.shape()[0], x_q.shape()[1]});
    x_kv = reshape(x_kv, {1, x_kv.shape()[0], x_kv.shape()[1]});
  }
  Var q = split_heads(matmul(x_q, p.w_q), p.heads);
  Var k = split_heads(matmul(x_kv, p.w_k), p.heads);
  Var v = split_heads(matmul(x_kv, p.w_v), p.heads);
  Var heads = scaled_dot_product_attention(q, k, v, mask).output;
  Var out = matmul(merge_heads(heads, p.heads), p.w_o);
  if (unbatched) out = reshape(out, {out.shape()[1], out.shape()[2]});
  return out;
}

}  // namespace captionforge
