#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "captionforge/corpus.hpp"
#include "captionforge/model.hpp"

namespace captionforge {

enum class Schedule { decay, cosine_restarts };
std::string_view to_string(Schedule s);
Schedule parse_schedule(std::string_view text);

inline constexpr double kDecayFactor = 0.98;

struct TrainConfig {
  std::size_t batch_size = 64;
  double lr0 = 1e-4;
  Schedule schedule = Schedule::decay;
  std::size_t warmup_steps = 400;
  std::size_t restart_period = 1000;
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0: no cap on optimizer steps
  std::uint64_t seed = 0;
  double grad_clip_norm = 1.0;
  double divergence_threshold = 20.0;
  std::size_t max_len = 20;  // caption tokens including <eos>
  std::filesystem::path metrics_path;     // empty: no metrics file
  std::filesystem::path checkpoint_path;  // empty: no checkpoint

  void validate() const;
};

/// lr0 * 0.98^epoch.
double lr_decay(double lr0, std::size_t epoch);

/// Linear warm-up to lr0 over `warmup` steps, then cosine annealing that
/// restarts every `period` steps.
double lr_cosine_restarts(double lr0, std::size_t step, std::size_t warmup, std::size_t period);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update. Moments are allocated on first use.
/// A non-finite gradient throws DivergenceError naming the parameter and
/// leaves every parameter untouched.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, OptState& state, double lr,
               std::span<const std::string> names = {}, const AdamConfig& cfg = {});
void adam_step(ParameterSet& params, std::span<const Tensor> grads, OptState& state, double lr,
               const AdamConfig& cfg = {});

/// Rescales every gradient by max_norm / g when the global L2 norm g exceeds
/// max_norm. Returns g.
double clip_grad_norm(std::span<Tensor> grads, double max_norm);

struct Dataset {
  std::span<const VideoRecord> records;
  std::span<const FeatureMatrix> features;  // parallel to records
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;       // mean over the epoch's batches
  double token_acc = 0.0;  // teacher-forced, over the epoch's batches
  double lr = 0.0;         // rate at the epoch's last step
  std::optional<double> val_loss;
};

struct TrainResult {
  Model model;  // best validation loss, or final parameters without a val set
  std::vector<EpochMetrics> metrics;
  std::size_t steps = 0;
  std::size_t best_epoch = 0;
};

/// Loss of one batch, plus ACT ponder cost when enabled.
struct BatchLoss {
  Var loss;
  Var logits;
  double cross_entropy = 0.0;
};
BatchLoss batch_loss(const BoundParams& p, const CaptionBatch& batch, ForwardContext ctx = {});

struct TeacherForcedEval {
  double loss = 0.0;
  double token_acc = 0.0;
  std::size_t tokens = 0;
};

/// Teacher-forced cross-entropy and token accuracy over every caption of
/// every record, without dropout.
TeacherForcedEval evaluate_teacher_forced(const Model& model, const Dataset& data, const Vocabulary& vocab,
                                          std::size_t max_len, std::size_t batch_size = 64);

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Teacher-forced training from a fresh model built with config.seed.
/// Throws DivergenceError when the loss exceeds the threshold or any value
/// turns non-finite, DataError on an empty training set.
TrainResult train(const ModelConfig& model_config, const TrainConfig& config, const Dataset& train_set,
                  const Vocabulary& vocab, const Dataset* val_set = nullptr,
                  const EpochCallback& on_epoch = {});

/// Metadata stored next to trained weights: the vocabulary and the run.
nlohmann::json training_metadata(const Vocabulary& vocab, const TrainConfig& config, const TrainResult& result);
Vocabulary vocabulary_from_metadata(const nlohmann::json& metadata);

}  // namespace captionforge
