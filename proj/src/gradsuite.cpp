#include "captionforge/gradsuite.hpp"

#include "captionforge/attention.hpp"
#include "captionforge/model.hpp"
#include "captionforge/rng.hpp"

namespace captionforge {

namespace {

Tensor random_tensor(Rng& rng, Shape shape) {
  Tensor t(std::move(shape), 0.0);
  for (double& x : t.values()) x = rng.uniform(-2.0, 2.0);
  return t;
}

// Weighted sum with fixed random weights, so every output element carries a
// distinct gradient.
Var project(Graph& g, Var x, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(x, g.constant(random_tensor(rng, x.shape()))));
}

struct Case {
  std::string name;
  double tolerance;
  std::vector<Shape> shapes;
  ScalarFn f;
};

std::vector<Case> op_cases() {
  std::vector<Case> cases;
  auto add_case = [&](std::string name, std::vector<Shape> shapes, ScalarFn f, double t = 1e-5) {
    cases.push_back({std::move(name), t, std::move(shapes), std::move(f)});
  };

  add_case("matmul", {{3, 4}, {4, 2}}, [](Graph& g, std::span<const Var> v) { return project(g, matmul(v[0], v[1]), 1); });
  add_case("matmul_batched", {{2, 3, 4}, {4, 5}},
           [](Graph& g, std::span<const Var> v) { return project(g, matmul(v[0], v[1]), 2); });
  add_case("bmm", {{2, 3, 4}, {2, 4, 2}}, [](Graph& g, std::span<const Var> v) { return project(g, bmm(v[0], v[1]), 3); });
  add_case("bmm_transposed", {{2, 3, 4}, {2, 5, 4}},
           [](Graph& g, std::span<const Var> v) { return project(g, bmm(v[0], v[1], true), 4); });
  add_case("transpose", {{3, 5}}, [](Graph& g, std::span<const Var> v) { return project(g, transpose(v[0]), 5); });
  add_case("reshape", {{2, 6}}, [](Graph& g, std::span<const Var> v) { return project(g, reshape(v[0], {3, 4}), 6); });
  add_case("add", {{2, 3}, {2, 3}}, [](Graph& g, std::span<const Var> v) { return project(g, add(v[0], v[1]), 7); });
  add_case("sub", {{2, 3}, {2, 3}}, [](Graph& g, std::span<const Var> v) { return project(g, sub(v[0], v[1]), 8); });
  add_case("mul", {{2, 3}, {2, 3}}, [](Graph& g, std::span<const Var> v) { return project(g, mul(v[0], v[1]), 9); });
  add_case("add_trailing", {{2, 3, 4}, {3, 4}},
           [](Graph& g, std::span<const Var> v) { return project(g, add_trailing(v[0], v[1]), 10); });
  add_case("mul_rows", {{2, 3, 4}, {2, 3}},
           [](Graph& g, std::span<const Var> v) { return project(g, mul_rows(v[0], v[1]), 11); });
  add_case("scale", {{4}}, [](Graph& g, std::span<const Var> v) { return project(g, scale(v[0], -1.7), 12); });
  add_case("add_scalar", {{4}}, [](Graph& g, std::span<const Var> v) { return project(g, add_scalar(v[0], 0.3), 13); });
  add_case("relu", {{3, 4}}, [](Graph& g, std::span<const Var> v) { return project(g, relu(v[0]), 14); });
  add_case("sigmoid", {{3, 4}}, [](Graph& g, std::span<const Var> v) { return project(g, sigmoid(v[0]), 15); });
  add_case("sum", {{2, 3}}, [](Graph&, std::span<const Var> v) { return sum(mul(v[0], v[0])); });
  add_case("mean", {{2, 3}}, [](Graph&, std::span<const Var> v) { return mean(mul(v[0], v[0])); });
  add_case("sum_rows", {{4, 3}}, [](Graph& g, std::span<const Var> v) { return project(g, sum_rows(v[0]), 16); });
  add_case("softmax_lastdim", {{3, 5}},
           [](Graph& g, std::span<const Var> v) { return project(g, softmax_lastdim(v[0]), 17); });
  add_case("softmax_matmul", {{3, 4}, {4, 5}},
           [](Graph& g, std::span<const Var> v) { return project(g, softmax_lastdim(matmul(v[0], v[1])), 18); });
  add_case("layer_norm", {{3, 6}, {6}, {6}},
           [](Graph& g, std::span<const Var> v) { return project(g, layer_norm(v[0], v[1], v[2]), 19); });
  add_case("embedding", {{5, 3}}, [](Graph& g, std::span<const Var> v) {
    return project(g, embedding(v[0], {4, 1, 1, 0}, {2, 2}), 20);
  });
  add_case("split_heads", {{2, 3, 4}}, [](Graph& g, std::span<const Var> v) { return project(g, split_heads(v[0], 2), 21); });
  add_case("merge_heads", {{4, 3, 2}}, [](Graph& g, std::span<const Var> v) { return project(g, merge_heads(v[0], 2), 22); });
  add_case("stack", {{2, 3}, {2, 3}}, [](Graph& g, std::span<const Var> v) { return project(g, stack(v), 23); });
  add_case("dropout", {{3, 4}}, [](Graph& g, std::span<const Var> v) {
    Rng rng(24);  // same mask in every evaluation
    return project(g, dropout(v[0], 0.3, rng), 24);
  });
  add_case("cross_entropy_masked", {{2, 3, 5}}, [](Graph&, std::span<const Var> v) {
    const std::vector<std::size_t> targets{1, 4, 0, 2, 0, 3};
    return cross_entropy_masked(v[0], targets, 0);
  });
  add_case("bce_with_logits", {{3, 4}}, [](Graph&, std::span<const Var> v) {
    Tensor y({3, 4}, 0.0);
    for (std::size_t i = 0; i < y.size(); i += 3) y[i] = 1.0;
    return bce_with_logits(v[0], y);
  });
  add_case("attention_masked", {{2, 3, 4}, {2, 3, 4}, {2, 3, 4}}, [](Graph& g, std::span<const Var> v) {
    const AttentionMask mask = causal_mask(3);
    return project(g, scaled_dot_product_attention(v[0], v[1], v[2], &mask).output, 25);
  });
  add_case("multi_head_attention", {{2, 3, 4}, {2, 5, 4}, {4, 4}, {4, 4}, {4, 4}, {4, 4}},
           [](Graph& g, std::span<const Var> v) {
             const std::vector<std::size_t> lengths{5, 3};
             const AttentionMask mask = stack_masks(padding_mask(lengths, 5, 3));
             const MultiHeadWeights w(v[2], v[3], v[4], v[5], 2);
             return project(g, multi_head_attention(v[0], v[1], w, &mask), 26);
           });
  return cases;
}

ModelConfig tiny_config(Variant variant) {
  ModelConfig c;
  c.variant = variant;
  c.layers = variant == Variant::vanilla ? 1 : 2;
  c.d_model = 8;
  c.heads = 2;
  c.d_ff = 16;
  c.dropout = 0.0;
  c.vocab_size = 11;
  c.max_decode_len = 6;
  c.feature_dim = 6;
  return c;
}

GradSuiteEntry model_entry(std::string name, double tolerance, const ModelConfig& config, std::uint64_t seed) {
  const Model model = build(config, seed);
  Rng rng(seed + 1);
  const std::vector<std::size_t> lengths{3, 2};
  Tensor features = random_tensor(rng, {2, 3, config.feature_dim});
  for (std::size_t j = 0; j < config.feature_dim; ++j) features[(1 * 3 + 2) * config.feature_dim + j] = 0.0;
  const std::vector<std::size_t> input{1, 5, 7, 9, 1, 4, 6, 0};
  const std::vector<std::size_t> targets{5, 7, 9, 2, 4, 6, 2, 0};

  ScalarFn f = [&](Graph& g, std::span<const Var> vars) {
    const BoundParams p = bind(model, vars);
    const EncodeResult enc = encode(p, g.constant(features), lengths);
    Var loss = cross_entropy_masked(decode_forward(p, input, enc.memory, lengths), targets, 0);
    if (enc.act) loss = add(loss, scale(sum(enc.act->ponder), config.act->ponder_weight / 5.0));
    return loss;
  };
  std::vector<Tensor> inputs(model.params.tensors().begin(), model.params.tensors().end());
  // 4-point rule at h = 3e-5: round-off near 1e-11, and ReLU kinks are rarely
  // crossed.
  return {std::move(name), tolerance, grad_check(f, std::move(inputs), 3e-5, Stencil::four_point)};
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed) {
  std::vector<GradSuiteEntry> out;
  Rng rng(seed);
  for (auto& c : op_cases()) {
    std::vector<Tensor> inputs;
    for (const auto& s : c.shapes) inputs.push_back(random_tensor(rng, s));
    out.push_back({c.name, c.tolerance, grad_check(c.f, std::move(inputs))});
  }
  out.push_back(model_entry("model_vanilla", 1e-5, tiny_config(Variant::vanilla), seed));
  out.push_back(model_entry("model_universal", 1e-5, tiny_config(Variant::universal), seed));
  ModelConfig act = tiny_config(Variant::universal);
  act.act = ActConfig{0.01, 4, 0.01};
  out.push_back(model_entry("model_universal_act", 1e-4, act, seed));
  return out;
}

}  // namespace captionforge
