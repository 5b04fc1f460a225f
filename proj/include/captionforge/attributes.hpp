#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "captionforge/autograd.hpp"
#include "captionforge/corpus.hpp"

namespace captionforge {

/// Function words excluded from attribute labels by default.
const std::vector<std::string>& default_stoplist();

/// The k most frequent tokens outside the stoplist, ties in lexicographic
/// order. Throws DataError when fewer than k tokens qualify.
std::vector<std::string> select_frequent_words(std::span<const VideoRecord> records, std::size_t k = 10,
                                               std::span<const std::string> stoplist = default_stoplist());

enum class PoolingMode { elementwise, scored };
std::string_view to_string(PoolingMode m);
PoolingMode parse_pooling(std::string_view text);

/// frames[T, d] -> v_in[d].
/// elementwise: softmax over frames separately for every dimension j, then
///   v_in[j] = sum_i alpha_i[j] * v_i[j].
/// scored: alpha = softmax over frames of frames . score, v_in = sum_i alpha_i v_i.
Var frame_attention_pool(Var frames, PoolingMode mode, std::optional<Var> score = std::nullopt);

struct AttributeHead {
  std::vector<std::string> labels;
  PoolingMode mode = PoolingMode::elementwise;
  Tensor weight;  // [d, k]
  Tensor bias;    // [k]
  Tensor score;   // [d], scored mode only

  std::size_t input_dim() const { return weight.dim(0); }
  std::size_t size() const { return labels.size(); }
};

/// Small uniform weights, zero bias and score vector.
AttributeHead make_attribute_head(std::vector<std::string> labels, std::size_t input_dim, PoolingMode mode,
                                  std::uint64_t seed);

/// Logits of the final affine layer: v_in[..., d] -> [..., k].
Var attribute_logits(Var v_in, Var weight, Var bias);
/// Per-label probabilities, logistic of the logits.
Var attribute_forward(Var v_in, Var weight, Var bias);

/// Probabilities for one video.
std::vector<double> predict_attributes(const AttributeHead& head, const Tensor& frames);

/// 0/1 targets: label j is positive when any caption contains it.
Tensor attribute_targets(const VideoRecord& record, std::span<const std::string> labels);

struct AttributeTrainConfig {
  std::size_t k = 10;
  bool use_stoplist = true;
  PoolingMode mode = PoolingMode::elementwise;
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  double lr = 1e-2;
  std::uint64_t seed = 0;
  double threshold = 0.5;
};

struct AttributeMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;
  double subset_accuracy = 0.0;  // every label correct
  std::vector<double> f1;        // per label
};

struct AttributeTrainResult {
  AttributeHead head;
  std::vector<AttributeMetrics> metrics;
  std::vector<std::string> warnings;
};

/// Evaluates a head over a labelled set.
AttributeMetrics evaluate_attributes(const AttributeHead& head, std::span<const FeatureMatrix> features,
                                     std::span<const Tensor> targets, double threshold = 0.5);

/// Binary cross-entropy training with Adam. Labels come from
/// select_frequent_words unless `labels` is given.
AttributeTrainResult train_attributes(std::span<const VideoRecord> records, std::span<const FeatureMatrix> features,
                                      const AttributeTrainConfig& config,
                                      std::optional<std::vector<std::string>> labels = std::nullopt);

/// [{"video_id", "labels": [[word, probability], ...]}, ...]
nlohmann::json export_attributes(const AttributeHead& head, std::span<const VideoRecord> records,
                                 std::span<const FeatureMatrix> features);

}  // namespace captionforge
