#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "nezha/codec.hpp"
#include "nezha/model.hpp"

namespace nezha {

struct TrainConfig {
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::uint64_t seed = 42;
  double clip_norm = 1.0;  // global-norm gradient clip; 0 disables
  // Joint objective weights; either loss can be switched off by zeroing
  // its weight (separate training as in the source setup).
  double draft_loss_weight = 1.0;
  double lm_loss_weight = 1.0;
  // Train only the head, leaving every backbone.* tensor untouched.
  bool freeze_backbone = false;

  void validate() const;
};

struct TrainingExample {
  std::vector<std::uint32_t> query;
  std::vector<SemanticId> history;
  SemanticId target;
};

struct LossBreakdown {
  double draft_nll = 0;  // mean per example over the batch
  double lm_nll = 0;
  double total = 0;  // weighted sum actually optimized
};

// Adam with bias correction and optional global-norm clipping. Moment
// buffers live in the ParamStore; the step counter lives here, so one
// optimizer instance must span a training run.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(ParamStore& params);
  std::uint64_t steps_taken() const { return t_; }

 private:
  TrainConfig cfg_;
  std::uint64_t t_ = 0;
};

// Instrumentation hook: called once per teacher-forced state transition
// with the (level, token) actually fed to the cell.
using TransitionProbe = std::function<void(std::size_t level, std::uint32_t token)>;

// One optimization step over a batch: teacher-forced draft-head pass
// (placeholder prompt), optional lm-head pass (next-token prompt),
// backprop, clipped Adam update. Returns the pre-update loss.
LossBreakdown train_step(const std::vector<TrainingExample>& batch, GrModel& model,
                         const TrainConfig& cfg, AdamOptimizer& opt,
                         const TransitionProbe& probe = {});

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  LossBreakdown mean_loss;
};

// Returning false stops training after the current epoch.
using EpochCallback = std::function<bool(const EpochStats&)>;

struct FitResult {
  std::vector<EpochStats> history;
  std::size_t epochs_run = 0;
};

// Epoch loop with a seeded shuffle per epoch.
FitResult fit(GrModel& model, const std::vector<TrainingExample>& train, const TrainConfig& cfg,
              const EpochCallback& on_epoch = {});

}  // namespace nezha
