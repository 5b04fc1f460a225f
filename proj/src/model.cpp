#include "captionforge/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "captionforge/errors.hpp"
#include "captionforge/rng.hpp"

namespace captionforge {

std::string_view to_string(Variant v) { return v == Variant::vanilla ? "vanilla" : "universal"; }

Variant parse_variant(std::string_view text) {
  if (text == "vanilla") return Variant::vanilla;
  if (text == "universal") return Variant::universal;
  throw ConfigError("unknown model variant '" + std::string(text) + "' (expected vanilla or universal)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (d_model == 0) fail("d_model must be positive");
  if (heads == 0) fail("heads must be positive");
  if (d_model % heads != 0) {
    fail("d_model " + std::to_string(d_model) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (layers == 0) fail("layers must be at least 1");
  if (d_ff == 0) fail("d_ff must be positive");
  if (feature_dim == 0) fail("feature_dim must be positive");
  if (vocab_size == 0) fail("vocab_size must be positive");
  if (max_decode_len == 0) fail("max_decode_len must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (variant == Variant::universal && layers > kMaxUniversalSteps) {
    fail("universal steps " + std::to_string(layers) + " exceed the step table size " +
         std::to_string(kMaxUniversalSteps));
  }
  if (act) {
    if (variant != Variant::universal) fail("adaptive halting requires the universal variant");
    if (!(act->epsilon > 0.0 && act->epsilon < 1.0)) fail("act epsilon must lie in (0, 1)");
    if (act->max_steps == 0 || act->max_steps > kMaxUniversalSteps) {
      fail("act max_steps must lie in [1, " + std::to_string(kMaxUniversalSteps) + "]");
    }
    if (act->ponder_weight < 0.0) fail("ponder_weight must be non-negative");
  }
}

ModelConfig ModelConfig::msvd_vanilla(std::size_t vocab_size) {
  ModelConfig c;
  c.variant = Variant::vanilla;
  c.layers = 6;
  c.d_model = 512;
  c.heads = 8;
  c.d_ff = 4 * c.d_model;
  c.feature_dim = 512;
  c.vocab_size = vocab_size;
  c.max_decode_len = 20;
  return c;
}

ModelConfig ModelConfig::msvd_universal(std::size_t vocab_size) {
  ModelConfig c = msvd_vanilla(vocab_size);
  c.variant = Variant::universal;
  c.layers = 8;
  return c;
}

ModelConfig ModelConfig::activitynet_universal(std::size_t vocab_size) {
  ModelConfig c;
  c.variant = Variant::universal;
  c.layers = 8;
  c.d_model = 500;
  c.heads = 10;
  c.d_ff = 4 * c.d_model;
  c.feature_dim = 500;
  c.vocab_size = vocab_size;
  c.max_decode_len = 80;
  return c;
}

// ---- ParameterSet -------------------------------------------------------------

std::size_t ParameterSet::add(std::string name, Tensor value) {
  if (lookup_.contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
  lookup_.emplace(name, tensors_.size());
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(value));
  return tensors_.size() - 1;
}

std::size_t ParameterSet::index(std::string_view name) const {
  auto it = lookup_.find(std::string(name));
  if (it == lookup_.end()) throw DataError("missing parameter '" + std::string(name) + "'");
  return it->second;
}

bool ParameterSet::contains(std::string_view name) const { return lookup_.contains(std::string(name)); }

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

// ---- layout -------------------------------------------------------------------

namespace {

using Init = ParamSpec::Init;

void attention_specs(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t d) {
  for (const char* w : {"w_q", "w_k", "w_v", "w_o"}) out.push_back({prefix + w, {d, d}, Init::xavier});
}

void norm_specs(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t d) {
  out.push_back({prefix + "gain", {d}, Init::ones});
  out.push_back({prefix + "bias", {d}, Init::zeros});
}

void ff_specs(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t d, std::size_t d_ff) {
  out.push_back({prefix + "w1", {d, d_ff}, Init::xavier});
  out.push_back({prefix + "b1", {d_ff}, Init::zeros});
  out.push_back({prefix + "w2", {d_ff, d}, Init::xavier});
  out.push_back({prefix + "b2", {d}, Init::zeros});
}

std::vector<std::string> block_prefixes(const ModelConfig& c, const std::string& side) {
  std::vector<std::string> out;
  if (c.variant == Variant::universal) {
    out.push_back(side + ".shared.");
  } else {
    for (std::size_t l = 0; l < c.layers; ++l) out.push_back(side + "." + std::to_string(l) + ".");
  }
  return out;
}

AttentionSlots attention_slots(const ParameterSet& ps, const std::string& prefix) {
  return {ps.index(prefix + "w_q"), ps.index(prefix + "w_k"), ps.index(prefix + "w_v"),
          ps.index(prefix + "w_o")};
}
NormSlots norm_slots(const ParameterSet& ps, const std::string& prefix) {
  return {ps.index(prefix + "gain"), ps.index(prefix + "bias")};
}
FeedForwardSlots ff_slots(const ParameterSet& ps, const std::string& prefix) {
  return {ps.index(prefix + "w1"), ps.index(prefix + "b1"), ps.index(prefix + "w2"),
          ps.index(prefix + "b2")};
}

}  // namespace

std::vector<ParamSpec> parameter_specs(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model;
  std::vector<ParamSpec> specs;
  if (c.uses_input_projection()) specs.push_back({"encoder.input_projection", {c.feature_dim, d}, Init::xavier});
  for (const auto& prefix : block_prefixes(c, "encoder")) {
    attention_specs(specs, prefix + "self.", d);
    norm_specs(specs, prefix + "norm1.", d);
    ff_specs(specs, prefix + "ff.", d, c.d_ff);
    norm_specs(specs, prefix + "norm2.", d);
  }
  if (c.variant == Variant::universal) specs.push_back({"encoder.step_embedding", {kMaxUniversalSteps, d}, Init::xavier});
  if (c.act) {
    specs.push_back({"encoder.halting.weight", {d, 1}, Init::xavier});
    specs.push_back({"encoder.halting.bias", {1}, Init::zeros});
  }
  specs.push_back({"decoder.token_embedding", {c.vocab_size, d}, Init::xavier});
  for (const auto& prefix : block_prefixes(c, "decoder")) {
    attention_specs(specs, prefix + "self.", d);
    norm_specs(specs, prefix + "norm1.", d);
    attention_specs(specs, prefix + "cross.", d);
    norm_specs(specs, prefix + "norm2.", d);
    ff_specs(specs, prefix + "ff.", d, c.d_ff);
    norm_specs(specs, prefix + "norm3.", d);
  }
  if (c.variant == Variant::universal) specs.push_back({"decoder.step_embedding", {kMaxUniversalSteps, d}, Init::xavier});
  specs.push_back({"decoder.output_projection", {d, c.vocab_size}, Init::xavier});
  return specs;
}

std::size_t param_count(const ModelConfig& config) {
  std::size_t n = 0;
  for (const auto& spec : parameter_specs(config)) n += shape_size(spec.shape);
  return n;
}

Model build(const ModelConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  ParameterSet params;
  for (auto& spec : parameter_specs(config)) {
    Tensor t(spec.shape, spec.init == Init::ones ? 1.0 : 0.0);
    if (spec.init == Init::xavier) {
      const double fan_in = static_cast<double>(spec.shape[0]);
      const double fan_out = static_cast<double>(spec.shape[1]);
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      for (double& v : t.values()) v = rng.uniform(-limit, limit);
    }
    params.add(std::move(spec.name), std::move(t));
  }
  return assemble(config, std::move(params));
}

Model assemble(const ModelConfig& config, ParameterSet params) {
  const auto specs = parameter_specs(config);
  if (specs.size() != params.size()) {
    throw DataError("parameter set holds " + std::to_string(params.size()) + " tensors, config expects " +
                    std::to_string(specs.size()));
  }
  for (const auto& spec : specs) {
    const Tensor& t = params[params.index(spec.name)];
    if (t.shape() != spec.shape) {
      throw DataError("parameter '" + spec.name + "' has shape " + shape_string(t.shape()) + ", expected " +
                      shape_string(spec.shape));
    }
  }
  ModelLayout layout;
  for (const auto& prefix : block_prefixes(config, "encoder")) {
    layout.encoder.push_back({attention_slots(params, prefix + "self."), norm_slots(params, prefix + "norm1."),
                              ff_slots(params, prefix + "ff."), norm_slots(params, prefix + "norm2.")});
  }
  for (const auto& prefix : block_prefixes(config, "decoder")) {
    layout.decoder.push_back({attention_slots(params, prefix + "self."), norm_slots(params, prefix + "norm1."),
                              attention_slots(params, prefix + "cross."), norm_slots(params, prefix + "norm2."),
                              ff_slots(params, prefix + "ff."), norm_slots(params, prefix + "norm3.")});
  }
  layout.token_embedding = params.index("decoder.token_embedding");
  layout.output_projection = params.index("decoder.output_projection");
  if (config.uses_input_projection()) layout.input_projection = params.index("encoder.input_projection");
  if (config.variant == Variant::universal) {
    layout.encoder_steps = params.index("encoder.step_embedding");
    layout.decoder_steps = params.index("decoder.step_embedding");
  }
  if (config.act) {
    layout.halting_weight = params.index("encoder.halting.weight");
    layout.halting_bias = params.index("encoder.halting.bias");
  }
  return Model{config, std::move(params), std::move(layout)};
}

BoundParams bind(Graph& g, const Model& model, bool requires_grad) {
  BoundParams b{&model, {}};
  b.vars.reserve(model.params.size());
  for (const auto& t : model.params.tensors()) b.vars.push_back(g.param(t, requires_grad));
  return b;
}

BoundParams bind(const Model& model, std::span<const Var> vars) {
  if (vars.size() != model.params.size()) {
    throw ShapeError("bind: " + std::to_string(vars.size()) + " vars for " +
                     std::to_string(model.params.size()) + " parameters");
  }
  return BoundParams{&model, std::vector<Var>(vars.begin(), vars.end())};
}

// ---- forward ------------------------------------------------------------------

namespace {

MultiHeadWeights heads_of(const BoundParams& p, const AttentionSlots& s) {
  return MultiHeadWeights(p[s.w_q], p[s.w_k], p[s.w_v], p[s.w_o], p.model->config.heads);
}

Var feed_forward(const BoundParams& p, const FeedForwardSlots& s, Var x) {
  Var h = relu(add_trailing(matmul(x, p[s.w1]), p[s.b1]));
  return add_trailing(matmul(h, p[s.w2]), p[s.b2]);
}

Var norm(const BoundParams& p, const NormSlots& s, Var x) { return layer_norm(x, p[s.gain], p[s.bias]); }

Var maybe_dropout(Var x, ForwardContext ctx) {
  if (ctx.dropout <= 0.0) return x;
  if (!ctx.rng) throw ConfigError("dropout requested without a random generator");
  return dropout(x, ctx.dropout, *ctx.rng);
}

Var step_row(const BoundParams& p, std::size_t table, std::size_t step) {
  return embedding(p[table], {step}, {});
}

// Lifts [T, F] to [1, T, F]; returns whether the input was unbatched.
bool ensure_batched(Var& x) {
  if (x.shape().size() == 2) {
    x = reshape(x, {1, x.shape()[0], x.shape()[1]});
    return true;
  }
  if (x.shape().size() != 3) throw ShapeError("expected [T, d] or [B, T, d], got " + shape_string(x.shape()));
  return false;
}

Var unbatch(Var x) { return reshape(x, Shape(x.shape().begin() + 1, x.shape().end())); }

void check_lengths(std::span<const std::size_t> lengths, std::size_t batch, std::size_t t_max) {
  if (lengths.empty()) return;
  if (lengths.size() != batch) {
    throw ShapeError(std::to_string(lengths.size()) + " sequence lengths for a batch of " + std::to_string(batch));
  }
  for (auto len : lengths) {
    if (len == 0 || len > t_max) throw DataError("sequence length " + std::to_string(len) + " outside [1, " + std::to_string(t_max) + "]");
  }
}

}  // namespace

std::optional<AttentionMask> memory_mask(std::span<const std::size_t> lengths, std::size_t t_max,
                                         std::size_t t_query) {
  bool padded = false;
  for (auto len : lengths) padded = padded || len < t_max;
  if (!padded) return std::nullopt;
  auto masks = padding_mask(lengths, t_max, t_query);
  return stack_masks(masks);
}

Var encoder_layer(const BoundParams& p, const EncoderLayerSlots& s, Var x, const AttentionMask* mask,
                  ForwardContext ctx) {
  Var attended = multi_head_attention(x, x, heads_of(p, s.self), mask);
  x = norm(p, s.norm1, add(x, maybe_dropout(attended, ctx)));
  Var ff = feed_forward(p, s.ff, x);
  return norm(p, s.norm2, add(x, maybe_dropout(ff, ctx)));
}

Var decoder_layer(const BoundParams& p, const DecoderLayerSlots& s, Var y, Var memory,
                  const AttentionMask* self_mask, const AttentionMask* mem_mask, ForwardContext ctx) {
  Var attended = multi_head_attention(y, y, heads_of(p, s.self), self_mask);
  y = norm(p, s.norm1, add(y, maybe_dropout(attended, ctx)));
  Var crossed = multi_head_attention(y, memory, heads_of(p, s.cross), mem_mask);
  y = norm(p, s.norm2, add(y, maybe_dropout(crossed, ctx)));
  Var ff = feed_forward(p, s.ff, y);
  return norm(p, s.norm3, add(y, maybe_dropout(ff, ctx)));
}

Var encoder_input(const BoundParams& p, Var features) {
  const ModelConfig& c = p.model->config;
  if (features.shape().back() != c.feature_dim) {
    throw ShapeError("encoder: feature dimension " + std::to_string(features.shape().back()) +
                     " does not match configured feature_dim " + std::to_string(c.feature_dim));
  }
  Var x = features;
  if (p.model->layout.input_projection) x = matmul(x, p[*p.model->layout.input_projection]);
  if (c.encoder_positions) {
    const std::size_t t = x.shape()[x.shape().size() - 2];
    x = add_trailing(x, features.graph->constant(sinusoidal_positions(t, c.d_model)));
  }
  return x;
}

EncodeResult encode(const BoundParams& p, Var features, std::span<const std::size_t> lengths,
                    ForwardContext ctx) {
  const ModelConfig& c = p.model->config;
  if (c.act) return universal_act_encode(p, features, lengths, ctx);
  const bool unbatched = ensure_batched(features);
  const std::size_t batch = features.shape()[0], t = features.shape()[1];
  check_lengths(lengths, batch, t);
  const auto mask = memory_mask(lengths, t, t);
  const AttentionMask* m = mask ? &*mask : nullptr;

  Var x = maybe_dropout(encoder_input(p, features), ctx);
  const ModelLayout& layout = p.model->layout;
  if (c.variant == Variant::vanilla) {
    for (const auto& layer : layout.encoder) x = encoder_layer(p, layer, x, m, ctx);
  } else {
    for (std::size_t s = 0; s < c.layers; ++s) {
      x = add_trailing(x, step_row(p, *layout.encoder_steps, s));
      x = encoder_layer(p, layout.encoder.front(), x, m, ctx);
    }
  }
  return {unbatched ? unbatch(x) : x, std::nullopt};
}

EncodeResult universal_act_encode(const BoundParams& p, Var features, std::span<const std::size_t> lengths,
                                  ForwardContext ctx) {
  const ModelConfig& c = p.model->config;
  if (!c.act || c.variant != Variant::universal) {
    throw ConfigError("universal_act_encode requires the universal variant with act enabled");
  }
  const ActConfig& act = *c.act;
  const ModelLayout& layout = p.model->layout;
  Graph& g = *features.graph;
  const bool unbatched = ensure_batched(features);
  const std::size_t batch = features.shape()[0], t = features.shape()[1];
  check_lengths(lengths, batch, t);
  const auto mask = memory_mask(lengths, t, t);
  const AttentionMask* m = mask ? &*mask : nullptr;

  // Padded positions never run: zero weight, zero steps.
  std::vector<char> running(batch * t, 1);
  if (!lengths.empty()) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = lengths[b]; i < t; ++i) running[b * t + i] = 0;
  }
  std::vector<double> cumulative(batch * t, 0.0);

  ActTrace trace;
  trace.steps = Tensor({batch, t}, 0.0);
  Var cum = g.constant(Tensor({batch, t}, 0.0));
  Var remainder = g.constant(Tensor({batch, t}, 0.0));
  std::optional<Var> final_state;

  Var state = maybe_dropout(encoder_input(p, features), ctx);
  for (std::size_t s = 0; s < act.max_steps; ++s) {
    if (std::none_of(running.begin(), running.end(), [](char r) { return r != 0; })) break;
    state = add_trailing(state, step_row(p, *layout.encoder_steps, s));
    state = encoder_layer(p, layout.encoder.front(), state, m, ctx);

    Var logits = reshape(add_trailing(matmul(state, p[*layout.halting_weight]), p[*layout.halting_bias]),
                         {batch, t});
    Var prob = sigmoid(logits);

    Tensor continue_mask({batch, t}, 0.0);
    Tensor halt_mask({batch, t}, 0.0);
    const bool last = s + 1 == act.max_steps;
    for (std::size_t i = 0; i < batch * t; ++i) {
      if (!running[i]) continue;
      const double p_i = prob.value()[i];
      if (last || cumulative[i] + p_i > 1.0 - act.epsilon) {
        halt_mask[i] = 1.0;
        running[i] = 0;
        trace.steps[i] = static_cast<double>(s + 1);
      } else {
        continue_mask[i] = 1.0;
        cumulative[i] += p_i;
      }
    }
    // weight = p while continuing; the remainder 1 - sum(p) at the halting step.
    Var used = mul(g.constant(std::move(continue_mask)), prob);
    Var rest = mul(g.constant(std::move(halt_mask)), add_scalar(scale(cum, -1.0), 1.0));
    Var weight = add(used, rest);
    remainder = add(remainder, rest);
    cum = add(cum, used);

    Var contribution = mul_rows(state, weight);
    final_state = final_state ? add(*final_state, contribution) : contribution;
    trace.step_states.push_back(state);
    trace.step_weights.push_back(weight);
  }

  trace.remainder = remainder.value();
  trace.ponder = add(g.constant(trace.steps), remainder);
  Var memory = *final_state;
  if (unbatched) {
    memory = unbatch(memory);
    trace.ponder = reshape(trace.ponder, {t});
  }
  return {memory, std::move(trace)};
}

Var decode_forward(const BoundParams& p, std::span<const std::size_t> tokens, Var memory,
                   std::span<const std::size_t> memory_lengths, ForwardContext ctx) {
  const ModelConfig& c = p.model->config;
  const ModelLayout& layout = p.model->layout;
  Graph& g = *memory.graph;
  const bool unbatched = ensure_batched(memory);
  const std::size_t batch = memory.shape()[0], t_mem = memory.shape()[1];
  if (tokens.empty() || tokens.size() % batch != 0) {
    throw ShapeError("decode_forward: " + std::to_string(tokens.size()) + " tokens for a batch of " +
                     std::to_string(batch));
  }
  check_lengths(memory_lengths, batch, t_mem);
  const std::size_t t = tokens.size() / batch;

  Var y = embedding(p[layout.token_embedding], std::vector<std::size_t>(tokens.begin(), tokens.end()), {batch, t});
  y = scale(y, std::sqrt(static_cast<double>(c.d_model)));
  y = add_trailing(y, g.constant(sinusoidal_positions(t, c.d_model)));
  y = maybe_dropout(y, ctx);

  const AttentionMask causal = causal_mask(t);
  const auto mem_mask = memory_mask(memory_lengths, t_mem, t);
  const AttentionMask* mm = mem_mask ? &*mem_mask : nullptr;
  if (c.variant == Variant::vanilla) {
    for (const auto& layer : layout.decoder) y = decoder_layer(p, layer, y, memory, &causal, mm, ctx);
  } else {
    for (std::size_t s = 0; s < c.layers; ++s) {
      y = add_trailing(y, step_row(p, *layout.decoder_steps, s));
      y = decoder_layer(p, layout.decoder.front(), y, memory, &causal, mm, ctx);
    }
  }
  Var logits = matmul(y, p[layout.output_projection]);
  return unbatched ? unbatch(logits) : logits;
}

}  // namespace captionforge
