#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "ecgmamba/config.hpp"
#include "ecgmamba/data.hpp"
#include "ecgmamba/metrics.hpp"
#include "ecgmamba/model.hpp"

namespace ecgmamba {

struct OptimizerState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  /// Zero moments shaped like `params`.
  static OptimizerState zeros_like(std::span<Tensor* const> params, double beta1 = 0.9, double beta2 = 0.999,
                                   double eps = 1e-8, double weight_decay = 0.01);
};

/// Decoupled weight decay: p <- p * (1 - lr * wd), then the bias-corrected
/// Adam step p <- p - lr * m_hat / (sqrt(v_hat) + eps). Increments state.step.
void adamw_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptimizerState& state, double lr);

/// Classic Adam with L2 decay folded into the gradient (g + wd * p). Equal to
/// adamw_step when weight_decay is 0.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptimizerState& state, double lr);

/// Linear ramp lr_peak * step / warmup up to `warmup`, then constant or a
/// cosine decay to 0 at `total_steps`.
double warmup_lr(std::size_t step, double lr_peak, std::size_t warmup, LrSchedule schedule = LrSchedule::constant_after_warmup,
                 std::size_t total_steps = 0);

/// Mean sigmoid binary cross-entropy over all B * C cells.
double multilabel_loss(const Tensor& logits, const Tensor& targets);
Var multilabel_loss(Var logits, Var targets);

/// Scales `grads` in place so their joint L2 norm is at most max_norm;
/// returns the norm before clipping.
double clip_global_norm(std::span<Tensor> grads, double max_norm);

/// One optimisation step on `batch`; returns the batch mean loss before the
/// update. Micro-batches (cfg.micro_batch) run on up to cfg.workers threads
/// and their gradients are summed in a fixed order.
double train_step(Model& model, OptimizerState& state, const Batch& batch, const TrainConfig& cfg, double lr,
                  std::uint64_t step_seed);

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_auc;
  std::optional<double> val_f1;
  std::optional<double> val_acc;
};

struct FitOptions {
  /// Called after every epoch; returning false stops training.
  std::function<bool(const EpochRecord&, const Model&)> on_epoch;
  /// Progress lines go here when set.
  std::ostream* log = nullptr;
};

struct FitResult {
  std::vector<EpochRecord> history;
  /// Weights with the best validation AUC (the final weights when there is
  /// no validation split or AUC is never defined).
  Model best;
  std::size_t best_epoch = 0;
  std::optional<double> best_val_auc;
};

/// Seeded epoch loop over shuffled batches. Throws ConfigError for an empty
/// training split or a class-count mismatch.
FitResult fit(Model& model, const Dataset& train, const Dataset& val, const TrainConfig& cfg,
              const FitOptions& options = {});

/// history.csv: epoch,step,lr,train_loss,val_auc,val_f1,val_acc
void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

/// Inference-mode logits [N, n_classes] and pooled features [N, D].
struct Predictions {
  Tensor logits;
  Tensor features;
};
Predictions predict(const Model& model, const Dataset& data, std::size_t batch_size = 64, std::size_t workers = 1);

/// Metrics on `data` plus the model's parameter and per-sample FLOP counts.
MetricsReport evaluate(const Model& model, const Dataset& data, std::size_t batch_size = 64, std::size_t workers = 1);

}  // namespace ecgmamba
