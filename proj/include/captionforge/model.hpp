#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "captionforge/attention.hpp"
#include "captionforge/autograd.hpp"

namespace captionforge {

class Rng;

enum class Variant { vanilla, universal };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view text);

/// Size of the learned per-step embedding tables of the universal variant.
/// Fixed so the parameter count does not depend on the step count.
inline constexpr std::size_t kMaxUniversalSteps = 16;

struct ActConfig {
  double epsilon = 0.01;  // halt once cumulative probability exceeds 1 - epsilon
  std::size_t max_steps = 8;
  double ponder_weight = 0.01;
};

struct ModelConfig {
  Variant variant = Variant::vanilla;
  std::size_t layers = 6;  // layers (vanilla) or shared-layer steps (universal)
  std::size_t d_model = 512;
  std::size_t heads = 8;
  std::size_t d_ff = 2048;
  double dropout = 0.1;
  std::size_t vocab_size = 0;
  std::size_t max_decode_len = 20;
  std::size_t feature_dim = 512;
  bool encoder_positions = true;
  std::optional<ActConfig> act;  // universal variant only; encoder only

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;
  bool uses_input_projection() const { return feature_dim != d_model; }

  // MSVD vanilla, MSVD universal and ActivityNet universal hyperparameters.
  static ModelConfig msvd_vanilla(std::size_t vocab_size);
  static ModelConfig msvd_universal(std::size_t vocab_size);
  static ModelConfig activitynet_universal(std::size_t vocab_size);
};

/// Named tensors in a fixed, deterministic order.
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor value);
  std::size_t index(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const noexcept { return tensors_.size(); }
  Tensor& operator[](std::size_t i) { return tensors_[i]; }
  const Tensor& operator[](std::size_t i) const { return tensors_[i]; }
  const std::string& name(std::size_t i) const { return names_[i]; }
  std::span<Tensor> tensors() noexcept { return tensors_; }
  std::span<const Tensor> tensors() const noexcept { return tensors_; }

  std::size_t scalar_count() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

struct AttentionSlots {
  std::size_t w_q, w_k, w_v, w_o;
};
struct FeedForwardSlots {
  std::size_t w1, b1, w2, b2;
};
struct NormSlots {
  std::size_t gain, bias;
};
struct EncoderLayerSlots {
  AttentionSlots self;
  NormSlots norm1;
  FeedForwardSlots ff;
  NormSlots norm2;
};
struct DecoderLayerSlots {
  AttentionSlots self;
  NormSlots norm1;
  AttentionSlots cross;
  NormSlots norm2;
  FeedForwardSlots ff;
  NormSlots norm3;
};

/// Where each parameter lives in the ParameterSet. The universal variant has
/// exactly one encoder and one decoder entry.
struct ModelLayout {
  std::vector<EncoderLayerSlots> encoder;
  std::vector<DecoderLayerSlots> decoder;
  std::size_t token_embedding = 0;
  std::size_t output_projection = 0;
  std::optional<std::size_t> input_projection;
  std::optional<std::size_t> encoder_steps;
  std::optional<std::size_t> decoder_steps;
  std::optional<std::size_t> halting_weight;
  std::optional<std::size_t> halting_bias;
};

struct ParamSpec {
  std::string name;
  Shape shape;
  enum class Init { xavier, zeros, ones } init;
};

struct Model {
  ModelConfig config;
  ParameterSet params;
  ModelLayout layout;
};

/// Parameter names and shapes for a config, in allocation order.
std::vector<ParamSpec> parameter_specs(const ModelConfig& config);

/// Deterministic from seed: Xavier-uniform matrices, zero biases and norm
/// offsets, unit norm gains.
Model build(const ModelConfig& config, std::uint64_t seed);

/// Rebuilds a model around existing parameter tensors (checkpoint loading).
Model assemble(const ModelConfig& config, ParameterSet params);

std::size_t param_count(const ModelConfig& config);

/// The model's parameters bound as leaves of one graph.
struct BoundParams {
  const Model* model = nullptr;
  std::vector<Var> vars;

  Var operator[](std::size_t slot) const { return vars[slot]; }
};

BoundParams bind(Graph& g, const Model& model, bool requires_grad);
BoundParams bind(const Model& model, std::span<const Var> vars);

/// Dropout settings for one forward pass; rate 0 (the default) is inference.
struct ForwardContext {
  double dropout = 0.0;
  Rng* rng = nullptr;
};

/// One post-norm encoder block: self-attention and feed-forward sublayers,
/// each with residual connection then layer norm.
Var encoder_layer(const BoundParams& p, const EncoderLayerSlots& slots, Var x,
                  const AttentionMask* mask, ForwardContext ctx = {});

Var decoder_layer(const BoundParams& p, const DecoderLayerSlots& slots, Var y, Var memory,
                  const AttentionMask* self_mask, const AttentionMask* memory_mask,
                  ForwardContext ctx = {});

/// Encoder input: optional projection, optional positions. No embedding.
Var encoder_input(const BoundParams& p, Var features);

/// Per-position halting record of an adaptive-computation encoder pass.
struct ActTrace {
  Var ponder;                     // [B, T] steps used + remainder
  Tensor steps;                   // [B, T] steps used
  Tensor remainder;               // [B, T]
  std::vector<Var> step_states;   // state after each step, [B, T, d]
  std::vector<Var> step_weights;  // weight of each step state, [B, T]
};

struct EncodeResult {
  Var memory;
  std::optional<ActTrace> act;
};

/// features is [T, F] or [B, T, F]. `lengths` gives the valid rows of each
/// sequence; empty means every row is valid.
EncodeResult encode(const BoundParams& p, Var features, std::span<const std::size_t> lengths = {},
                    ForwardContext ctx = {});

/// Universal encoder with adaptive halting. Requires config.act.
EncodeResult universal_act_encode(const BoundParams& p, Var features,
                                  std::span<const std::size_t> lengths = {},
                                  ForwardContext ctx = {});

/// Key mask hiding padded memory rows, [B, t_query, T]; nullopt when
/// nothing is padded.
std::optional<AttentionMask> memory_mask(std::span<const std::size_t> lengths, std::size_t t_max,
                                         std::size_t t_query);

/// Teacher-forced decoder pass. `tokens` holds B x T' ids row-major where B
/// is memory's batch; returns logits [B, T', V] (or [T', V] when memory is
/// rank 2).
Var decode_forward(const BoundParams& p, std::span<const std::size_t> tokens, Var memory,
                   std::span<const std::size_t> memory_lengths = {}, ForwardContext ctx = {});

}  // namespace captionforge
