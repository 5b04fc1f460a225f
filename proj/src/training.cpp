#include "captionforge/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "captionforge/checkpoint.hpp"
#include "captionforge/errors.hpp"
#include "captionforge/rng.hpp"

namespace captionforge {

std::string_view to_string(Schedule s) { return s == Schedule::decay ? "decay" : "cosine"; }

Schedule parse_schedule(std::string_view text) {
  if (text == "decay") return Schedule::decay;
  if (text == "cosine" || text == "cosine-restarts") return Schedule::cosine_restarts;
  throw ConfigError("unknown schedule '" + std::string(text) + "' (expected decay or cosine)");
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be at least 1");
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw ConfigError("lr must be positive and finite");
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (restart_period == 0) throw ConfigError("restart_period must be at least 1");
  if (!(grad_clip_norm > 0.0)) throw ConfigError("grad_clip must be positive");
  if (!(divergence_threshold > 0.0)) throw ConfigError("divergence_threshold must be positive");
  if (max_len < 2) throw ConfigError("max_len must be at least 2");
}

double lr_decay(double lr0, std::size_t epoch) { return lr0 * std::pow(kDecayFactor, static_cast<double>(epoch)); }

double lr_cosine_restarts(double lr0, std::size_t step, std::size_t warmup, std::size_t period) {
  if (period == 0) throw ConfigError("restart period must be at least 1");
  if (step < warmup) return lr0 * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double phase = static_cast<double>((step - warmup) % period) / static_cast<double>(period);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * phase));
}

void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, OptState& state, double lr,
               std::span<const std::string> names, const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter and gradient counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape()) {
      throw ShapeError("adam_step: gradient shape " + shape_string(grads[i].shape()) + " for parameter " +
                       shape_string(params[i].shape()));
    }
    if (!all_finite(grads[i])) {
      const std::string name = i < names.size() ? names[i] : "#" + std::to_string(i);
      throw DivergenceError("non-finite gradient for parameter '" + name + "'", -1,
                            static_cast<long>(state.step));
    }
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.shape(), 0.0);
      state.v.emplace_back(p.shape(), 0.0);
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* w = params[i].data();
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    const double* g = grads[i].data();
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
    }
  }
}

void adam_step(ParameterSet& params, std::span<const Tensor> grads, OptState& state, double lr,
               const AdamConfig& cfg) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < params.size(); ++i) names.push_back(params.name(i));
  adam_step(params.tensors(), grads, state, lr, names, cfg);
}

double clip_grad_norm(std::span<Tensor> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_grad_norm: max_norm must be positive");
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g.values()) sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& g : grads)
      for (double& x : g.values()) x *= factor;
  }
  return norm;
}

namespace {

struct Accuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
};

Accuracy token_accuracy(const Tensor& logits, std::span<const std::size_t> targets) {
  const std::size_t v = logits.last_dim();
  Accuracy acc;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] == token_id::pad) continue;
    const double* row = logits.data() + r * v;
    const auto best = static_cast<std::size_t>(std::max_element(row, row + v) - row);
    acc.correct += best == targets[r];
    ++acc.total;
  }
  return acc;
}

void check_dataset(const Dataset& d, const char* what) {
  if (d.records.size() != d.features.size()) {
    throw DataError(std::string(what) + ": " + std::to_string(d.records.size()) + " records but " +
                    std::to_string(d.features.size()) + " feature matrices");
  }
}

}  // namespace

BatchLoss batch_loss(const BoundParams& p, const CaptionBatch& batch, ForwardContext ctx) {
  Graph& g = *p.vars.front().graph;
  Var features = g.constant(batch.features);
  EncodeResult enc = encode(p, features, batch.feature_lengths, ctx);
  Var logits = decode_forward(p, batch.decoder_input, enc.memory, batch.feature_lengths, ctx);
  Var ce = cross_entropy_masked(logits, batch.targets, token_id::pad);
  BatchLoss out{ce, logits, ce.value().item()};
  if (enc.act) {
    std::size_t valid = 0;
    for (auto len : batch.feature_lengths) valid += len;
    const double w = p.model->config.act->ponder_weight / static_cast<double>(valid);
    out.loss = add(ce, scale(sum(enc.act->ponder), w));
  }
  return out;
}

TeacherForcedEval evaluate_teacher_forced(const Model& model, const Dataset& data, const Vocabulary& vocab,
                                          std::size_t max_len, std::size_t batch_size) {
  check_dataset(data, "evaluate_teacher_forced");
  if (data.records.empty()) throw DataError("evaluate_teacher_forced: no records");
  std::vector<std::size_t> indices;
  std::vector<const Tokens*> captions;
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    for (const auto& c : data.records[i].captions) {
      indices.push_back(i);
      captions.push_back(&c);
    }
  }
  double loss_sum = 0.0;
  Accuracy acc;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, indices.size() - start);
    const CaptionBatch batch =
        collate(data.records, data.features, std::span(indices).subspan(start, n),
                std::span<const Tokens* const>(captions).subspan(start, n), vocab, max_len);
    Graph g;
    const BoundParams p = bind(g, model, false);
    const BatchLoss bl = batch_loss(p, batch);
    const Accuracy a = token_accuracy(bl.logits.value(), batch.targets);
    loss_sum += bl.cross_entropy * static_cast<double>(a.total);
    acc.correct += a.correct;
    acc.total += a.total;
  }
  return {loss_sum / static_cast<double>(acc.total),
          static_cast<double>(acc.correct) / static_cast<double>(acc.total), acc.total};
}

TrainResult train(const ModelConfig& model_config, const TrainConfig& config, const Dataset& train_set,
                  const Vocabulary& vocab, const Dataset* val_set, const EpochCallback& on_epoch) {
  config.validate();
  model_config.validate();
  check_dataset(train_set, "train");
  if (train_set.records.empty()) throw DataError("train: the training split is empty");
  if (model_config.vocab_size != vocab.size()) {
    throw ConfigError("train: model vocab_size " + std::to_string(model_config.vocab_size) +
                      " differs from the vocabulary's " + std::to_string(vocab.size()));
  }
  const bool use_val = val_set && !val_set->records.empty();
  if (use_val) check_dataset(*val_set, "validation");

  std::ofstream metrics;
  if (!config.metrics_path.empty()) {
    metrics.open(config.metrics_path);
    if (!metrics) throw DataError("cannot write metrics file '" + config.metrics_path.string() + "'");
    metrics << "epoch,loss,token_acc,lr\n";
  }

  Model model = build(model_config, config.seed);
  Rng batch_rng(config.seed);
  Rng dropout_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  OptState opt;
  TrainResult result{model, {}, 0, 0};
  double best = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto batches = make_batches(train_set.records, train_set.features, vocab, config.batch_size,
                                      config.max_len, batch_rng);
    double loss_sum = 0.0;
    Accuracy acc;
    double lr = 0.0;
    for (const auto& batch : batches) {
      lr = config.schedule == Schedule::decay
               ? lr_decay(config.lr0, epoch)
               : lr_cosine_restarts(config.lr0, result.steps, config.warmup_steps, config.restart_period);
      Graph g;
      const BoundParams p = bind(g, model, true);
      const BatchLoss bl = batch_loss(p, batch, {model_config.dropout, &dropout_rng});
      const double value = bl.loss.value().item();
      if (!std::isfinite(value) || value > config.divergence_threshold) {
        throw DivergenceError("training diverged: loss " + std::to_string(value) + " at epoch " +
                                  std::to_string(epoch) + ", step " + std::to_string(result.steps),
                              static_cast<int>(epoch), static_cast<long>(result.steps));
      }
      g.backward(bl.loss);
      std::vector<Tensor> grads;
      grads.reserve(p.vars.size());
      for (const Var& v : p.vars) grads.push_back(g.grad(v));
      clip_grad_norm(grads, config.grad_clip_norm);
      try {
        adam_step(model.params, grads, opt, lr);
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(epoch), static_cast<int>(epoch),
                              e.step());
      }
      ++result.steps;

      const Accuracy a = token_accuracy(bl.logits.value(), batch.targets);
      loss_sum += value;
      acc.correct += a.correct;
      acc.total += a.total;
      if (config.max_steps && result.steps >= config.max_steps) break;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.loss = loss_sum / static_cast<double>(batches.size());
    m.token_acc = static_cast<double>(acc.correct) / static_cast<double>(std::max<std::size_t>(acc.total, 1));
    m.lr = lr;
    if (use_val) m.val_loss = evaluate_teacher_forced(model, *val_set, vocab, config.max_len, config.batch_size).loss;
    if (metrics) {
      char line[128];
      std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g\n", m.epoch, m.loss, m.token_acc, m.lr);
      metrics << line << std::flush;
    }
    if (!use_val || *m.val_loss < best) {
      if (use_val) best = *m.val_loss;
      result.model = model;
      result.best_epoch = epoch;
    }
    result.metrics.push_back(m);
    if (on_epoch) on_epoch(m);
    if (config.max_steps && result.steps >= config.max_steps) break;
  }

  if (!config.checkpoint_path.empty()) {
    save_checkpoint(config.checkpoint_path, result.model, training_metadata(vocab, config, result));
  }
  return result;
}

nlohmann::json training_metadata(const Vocabulary& vocab, const TrainConfig& config, const TrainResult& result) {
  return {{"vocabulary", vocab.tokens()},
          {"min_count", vocab.min_count()},
          {"max_len", config.max_len},
          {"train",
           {{"seed", config.seed},
            {"batch_size", config.batch_size},
            {"lr", config.lr0},
            {"schedule", std::string(to_string(config.schedule))},
            {"epochs", config.epochs},
            {"steps", result.steps},
            {"best_epoch", result.best_epoch}}}};
}

Vocabulary vocabulary_from_metadata(const nlohmann::json& metadata) {
  if (!metadata.contains("vocabulary")) throw DataError("checkpoint metadata has no vocabulary");
  return Vocabulary::from_tokens(metadata.at("vocabulary").get<std::vector<std::string>>(),
                                 metadata.value("min_count", std::size_t{1}));
}

}  // namespace captionforge
