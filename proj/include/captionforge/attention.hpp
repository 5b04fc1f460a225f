#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "captionforge/autograd.hpp"

namespace captionforge {

/// Additive mask: 0 where a key is visible, -inf where it is hidden.
/// Shape is [Tq, Tk], or [B, Tq, Tk] for a batch.
struct AttentionMask {
  Tensor additive;

  bool visible(std::size_t q, std::size_t k) const { return additive.at(q, k) == 0.0; }
};

/// Entry (i, j) is visible iff j <= i.
AttentionMask causal_mask(std::size_t t);

/// One [t_query, t_max] mask per sequence hiding key columns at and beyond
/// its length. t_query defaults to t_max (self-attention).
std::vector<AttentionMask> padding_mask(std::span<const std::size_t> lengths, std::size_t t_max,
                                        std::size_t t_query = 0);

/// Stacks per-sequence masks into one [B, Tq, Tk] mask.
AttentionMask stack_masks(std::span<const AttentionMask> masks);

/// Sinusoidal position table: sin at even columns, cos at odd columns, with
/// wavelengths 10000^(2i/d). For odd d the last column carries the cosine.
Tensor sinusoidal_positions(std::size_t t, std::size_t d);

struct AttentionResult {
  Var output;
  Var weights;
};

/// softmax(q kᵀ / sqrt(d_k) + mask) v. Accepts rank-2 inputs or batched
/// rank-3 inputs; a rank-2 mask is shared by every batch entry.
AttentionResult scaled_dot_product_attention(Var q, Var k, Var v,
                                             const AttentionMask* mask = nullptr);

/// Fused projections: column block h of w_q / w_k / w_v is head h's
/// d_model x d_k projection; w_o maps the concatenated heads back.
struct MultiHeadWeights {
  Var w_q, w_k, w_v, w_o;
  std::size_t heads = 1;

  /// Throws ConfigError unless d_model divides evenly into `heads`.
  MultiHeadWeights(Var q, Var k, Var v, Var o, std::size_t n_heads);
  std::size_t d_model() const { return w_q.shape()[0]; }
  std::size_t d_k() const { return d_model() / heads; }
};

/// Heads attend independently, are concatenated along features and
/// projected by w_o. x_q is [Tq, d] or [B, Tq, d]; mask as above.
Var multi_head_attention(Var x_q, Var x_kv, const MultiHeadWeights& p,
                         const AttentionMask* mask = nullptr);

}  // namespace captionforge
