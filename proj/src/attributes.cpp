#include "captionforge/attributes.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "captionforge/errors.hpp"
#include "captionforge/rng.hpp"
#include "captionforge/training.hpp"

namespace captionforge {

const std::vector<std::string>& default_stoplist() {
  static const std::vector<std::string> words = {"a", "the", "is", "in", "on", "of", "to", "and"};
  return words;
}

std::vector<std::string> select_frequent_words(std::span<const VideoRecord> records, std::size_t k,
                                               std::span<const std::string> stoplist) {
  if (records.empty()) throw DataError("select_frequent_words: empty corpus");
  if (k == 0) throw ConfigError("attribute count k must be at least 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& r : records)
    for (const auto& caption : r.captions)
      for (const auto& token : caption) {
        if (token == kSeparator || std::find(stoplist.begin(), stoplist.end(), token) != stoplist.end()) continue;
        ++counts[token];
      }
  if (counts.size() < k) {
    throw DataError("select_frequent_words: only " + std::to_string(counts.size()) +
                    " eligible words for k = " + std::to_string(k));
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(ranked[i].first);
  return out;
}

std::string_view to_string(PoolingMode m) { return m == PoolingMode::elementwise ? "elementwise" : "scored"; }

PoolingMode parse_pooling(std::string_view text) {
  if (text == "elementwise") return PoolingMode::elementwise;
  if (text == "scored") return PoolingMode::scored;
  throw ConfigError("unknown pooling mode '" + std::string(text) + "' (expected elementwise or scored)");
}

Var frame_attention_pool(Var frames, PoolingMode mode, std::optional<Var> score) {
  if (frames.shape().size() != 2) throw ShapeError("frame_attention_pool: frames must be [T, d], got " +
                                                   shape_string(frames.shape()));
  const std::size_t t = frames.shape()[0], d = frames.shape()[1];
  if (mode == PoolingMode::elementwise) {
    Var alpha = transpose(softmax_lastdim(transpose(frames)));
    return sum_rows(mul(alpha, frames));
  }
  if (!score) throw ConfigError("scored pooling needs a score vector");
  if (score->shape() != Shape{d}) {
    throw ShapeError("frame_attention_pool: score " + shape_string(score->shape()) + " for frames " +
                     shape_string(frames.shape()));
  }
  Var scores = reshape(matmul(frames, reshape(*score, {d, 1})), {1, t});
  Var alpha = reshape(softmax_lastdim(scores), {t});
  return sum_rows(mul_rows(frames, alpha));
}

AttributeHead make_attribute_head(std::vector<std::string> labels, std::size_t input_dim, PoolingMode mode,
                                  std::uint64_t seed) {
  if (labels.empty()) throw ConfigError("attribute head needs at least one label");
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = i + 1; j < labels.size(); ++j)
      if (labels[i] == labels[j]) throw ConfigError("duplicate attribute label '" + labels[i] + "'");
  AttributeHead head;
  const std::size_t k = labels.size();
  head.labels = std::move(labels);
  head.mode = mode;
  head.weight = Tensor({input_dim, k}, 0.0);
  Rng rng(seed);
  const double limit = std::sqrt(6.0 / static_cast<double>(input_dim + k));
  for (double& w : head.weight.values()) w = rng.uniform(-limit, limit);
  head.bias = Tensor({k}, 0.0);
  head.score = Tensor({input_dim}, 0.0);
  return head;
}

Var attribute_logits(Var v_in, Var weight, Var bias) {
  if (v_in.shape().size() == 1) {
    const std::size_t k = weight.shape().back();
    return reshape(attribute_logits(reshape(v_in, {1, v_in.shape()[0]}), weight, bias), {k});
  }
  return add_trailing(matmul(v_in, weight), bias);
}

Var attribute_forward(Var v_in, Var weight, Var bias) { return sigmoid(attribute_logits(v_in, weight, bias)); }

namespace {

struct HeadVars {
  Var weight, bias, score;
};

HeadVars bind_head(Graph& g, const AttributeHead& head, bool requires_grad) {
  return {g.param(head.weight, requires_grad), g.param(head.bias, requires_grad),
          g.param(head.score, requires_grad && head.mode == PoolingMode::scored)};
}

Var pooled_batch(Graph& g, const AttributeHead& head, const HeadVars& v, std::span<const FeatureMatrix> features,
                 std::span<const std::size_t> indices) {
  std::vector<Var> pooled;
  for (auto i : indices) {
    if (features[i].dim() != head.input_dim()) {
      throw ShapeError("attribute head expects " + std::to_string(head.input_dim()) + "-dim features, '" +
                       features[i].video_id + "' has " + std::to_string(features[i].dim()));
    }
    pooled.push_back(frame_attention_pool(g.constant(features[i].values), head.mode, v.score));
  }
  return stack(pooled);
}

}  // namespace

std::vector<double> predict_attributes(const AttributeHead& head, const Tensor& frames) {
  Graph g;
  const HeadVars v = bind_head(g, head, false);
  Var pooled = frame_attention_pool(g.constant(frames), head.mode, v.score);
  Var probs = attribute_forward(pooled, v.weight, v.bias);
  return {probs.value().values().begin(), probs.value().values().end()};
}

Tensor attribute_targets(const VideoRecord& record, std::span<const std::string> labels) {
  Tensor t({labels.size()}, 0.0);
  for (std::size_t j = 0; j < labels.size(); ++j)
    for (const auto& caption : record.captions)
      if (std::find(caption.begin(), caption.end(), labels[j]) != caption.end()) t[j] = 1.0;
  return t;
}

AttributeMetrics evaluate_attributes(const AttributeHead& head, std::span<const FeatureMatrix> features,
                                     std::span<const Tensor> targets, double threshold) {
  const std::size_t k = head.size();
  std::vector<std::size_t> tp(k, 0), fp(k, 0), fn(k, 0);
  std::size_t exact = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto probs = predict_attributes(head, features[i].values);
    bool all = true;
    for (std::size_t j = 0; j < k; ++j) {
      const bool predicted = probs[j] >= threshold;
      const bool actual = targets[i][j] > 0.5;
      all = all && predicted == actual;
      tp[j] += predicted && actual;
      fp[j] += predicted && !actual;
      fn[j] += !predicted && actual;
      const double p = std::clamp(probs[j], 1e-15, 1.0 - 1e-15);
      loss -= actual ? std::log(p) : std::log(1.0 - p);
    }
    exact += all;
  }
  AttributeMetrics m;
  const auto n = static_cast<double>(std::max<std::size_t>(features.size(), 1));
  m.loss = loss / (n * static_cast<double>(k));
  m.subset_accuracy = static_cast<double>(exact) / n;
  for (std::size_t j = 0; j < k; ++j) {
    const double denom = 2.0 * static_cast<double>(tp[j]) + static_cast<double>(fp[j] + fn[j]);
    m.f1.push_back(denom == 0.0 ? 1.0 : 2.0 * static_cast<double>(tp[j]) / denom);
  }
  return m;
}

AttributeTrainResult train_attributes(std::span<const VideoRecord> records, std::span<const FeatureMatrix> features,
                                      const AttributeTrainConfig& config,
                                      std::optional<std::vector<std::string>> labels) {
  if (records.empty()) throw DataError("train_attributes: no records");
  if (records.size() != features.size()) throw DataError("train_attributes: records and features differ in count");
  if (config.epochs == 0) throw ConfigError("epochs must be at least 1");
  if (config.batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (!(config.lr > 0.0)) throw ConfigError("lr must be positive");

  if (!labels) {
    labels = config.use_stoplist ? select_frequent_words(records, config.k)
                                 : select_frequent_words(records, config.k, std::span<const std::string>{});
  }
  AttributeTrainResult result{make_attribute_head(*labels, features.front().dim(), config.mode, config.seed), {}, {}};
  AttributeHead& head = result.head;

  std::vector<Tensor> targets;
  std::size_t positives = 0;
  for (const auto& r : records) {
    targets.push_back(attribute_targets(r, head.labels));
    for (double x : targets.back().values()) positives += x > 0.5;
  }
  if (positives == 0) result.warnings.push_back("degenerate data: no video has any positive attribute label");

  Rng rng(config.seed);
  OptState opt;
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      std::span<const std::size_t> idx(order.data() + start, std::min(config.batch_size, order.size() - start));
      Graph g;
      const HeadVars v = bind_head(g, head, true);
      Var pooled = pooled_batch(g, head, v, features, idx);
      Tensor y({idx.size(), head.size()}, 0.0);
      for (std::size_t n = 0; n < idx.size(); ++n)
        std::copy_n(targets[idx[n]].data(), head.size(), y.data() + n * head.size());
      Var loss = bce_with_logits(attribute_logits(pooled, v.weight, v.bias), y);
      g.backward(loss);
      if (head.mode == PoolingMode::scored) {
        std::vector<Tensor> params{head.weight, head.bias, head.score};
        const std::vector<Tensor> grads{g.grad(v.weight), g.grad(v.bias), g.grad(v.score)};
        adam_step(params, grads, opt, config.lr, std::vector<std::string>{"weight", "bias", "score"});
        head.weight = std::move(params[0]);
        head.bias = std::move(params[1]);
        head.score = std::move(params[2]);
      } else {
        std::vector<Tensor> params{head.weight, head.bias};
        const std::vector<Tensor> grads{g.grad(v.weight), g.grad(v.bias)};
        adam_step(params, grads, opt, config.lr, std::vector<std::string>{"weight", "bias"});
        head.weight = std::move(params[0]);
        head.bias = std::move(params[1]);
      }
    }
    AttributeMetrics m = evaluate_attributes(head, features, targets, config.threshold);
    m.epoch = epoch;
    result.metrics.push_back(std::move(m));
  }
  return result;
}

nlohmann::json export_attributes(const AttributeHead& head, std::span<const VideoRecord> records,
                                 std::span<const FeatureMatrix> features) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto probs = predict_attributes(head, features[i].values);
    nlohmann::json labels = nlohmann::json::array();
    for (std::size_t j = 0; j < head.size(); ++j) labels.push_back({head.labels[j], probs[j]});
    rows.push_back({{"video_id", records[i].video_id}, {"labels", labels}});
  }
  return rows;
}

}  // namespace captionforge
