#include "ecgmamba/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <numbers>
#include <numeric>
#include <ostream>
#include <thread>

#include "ecgmamba/error.hpp"
#include "ecgmamba/random.hpp"
#include "ecgmamba/runtime.hpp"
#include "ecgmamba/text.hpp"

namespace ecgmamba {

namespace {

void check_step_inputs(std::span<Tensor* const> params, std::span<const Tensor> grads, const OptimizerState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size()) {
    throw ContractError("optimizer: parameter, gradient and moment counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i]->shape() || state.m[i].shape() != params[i]->shape()) {
      throw DimensionError("optimizer: gradient " + std::to_string(i) + " has shape " + to_string(grads[i].shape()) +
                           ", parameter has " + to_string(params[i]->shape()));
    }
    if (runtime::checked_mode() && !grads[i].all_finite()) {
      throw NonFiniteError("optimizer: non-finite gradient in parameter " + std::to_string(i) + " at step " +
                           std::to_string(state.step + 1));
    }
  }
}

/// Runs fn(0..n-1) on up to `workers` threads; rethrows the first failure.
template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::vector<std::vector<std::size_t>> chunks(std::size_t n, std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += size) {
    std::vector<std::size_t> idx(std::min(size, n - start));
    std::iota(idx.begin(), idx.end(), start);
    out.push_back(std::move(idx));
  }
  return out;
}

Batch slice(const Batch& batch, std::span<const std::size_t> rows) {
  const std::size_t per_signal = batch.signals.size() / batch.ids.size();
  const std::size_t per_label = batch.labels.size() / batch.ids.size();
  Shape shape = batch.signals.shape();
  shape[0] = rows.size();
  Batch out;
  out.signals = Tensor(shape);
  out.labels = Tensor({rows.size(), per_label});
  for (std::size_t j = 0; j < rows.size(); ++j) {
    out.ids.push_back(batch.ids[rows[j]]);
    std::copy_n(batch.signals.data() + rows[j] * per_signal, per_signal, out.signals.data() + j * per_signal);
    std::copy_n(batch.labels.data() + rows[j] * per_label, per_label, out.labels.data() + j * per_label);
  }
  return out;
}

}  // namespace

OptimizerState OptimizerState::zeros_like(std::span<Tensor* const> params, double beta1, double beta2, double eps,
                                          double weight_decay) {
  OptimizerState s;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  s.weight_decay = weight_decay;
  for (const Tensor* p : params) {
    s.m.push_back(Tensor::zeros_like(*p));
    s.v.push_back(Tensor::zeros_like(*p));
  }
  return s;
}

void adamw_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptimizerState& state, double lr) {
  check_step_inputs(params, grads, state);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  const double decay = 1.0 - lr * state.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* p = params[i]->data();
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    const double* g = grads[i].data();
    for (std::size_t j = 0; j < params[i]->size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      p[j] *= decay;
      p[j] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptimizerState& state, double lr) {
  check_step_inputs(params, grads, state);
  ++state.step;
  const double t = static_cast<double>(state.step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = grads[i][j] + state.weight_decay * p[j];
      state.m[i][j] = state.beta1 * state.m[i][j] + (1.0 - state.beta1) * g;
      state.v[i][j] = state.beta2 * state.v[i][j] + (1.0 - state.beta2) * g * g;
      const double m_hat = state.m[i][j] / (1.0 - std::pow(state.beta1, t));
      const double v_hat = state.v[i][j] / (1.0 - std::pow(state.beta2, t));
      p[j] = p[j] - lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

double warmup_lr(std::size_t step, double lr_peak, std::size_t warmup, LrSchedule schedule, std::size_t total_steps) {
  if (warmup == 0) throw ConfigError("warmup_steps must be >= 1");
  if (step < warmup) return lr_peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (schedule == LrSchedule::constant_after_warmup || total_steps <= warmup) return lr_peak;
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup));
  return 0.5 * lr_peak * (1.0 + std::cos(std::numbers::pi * progress));
}

double multilabel_loss(const Tensor& logits, const Tensor& targets) { return bce_with_logits(logits, targets); }
Var multilabel_loss(Var logits, Var targets) { return bce_with_logits(logits, targets); }

double clip_global_norm(std::span<Tensor> grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads) {
    for (double v : g.values()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (Tensor& g : grads) {
      for (double& v : g.values()) v *= factor;
    }
  }
  return norm;
}

double train_step(Model& model, OptimizerState& state, const Batch& batch, const TrainConfig& cfg, double lr,
                  std::uint64_t step_seed) {
  const std::size_t n = batch.ids.size();
  if (n == 0) throw ContractError("train_step: empty batch");
  const std::vector<Tensor*> params = model.parameters();
  const auto groups = chunks(n, cfg.resolved_micro_batch());

  struct MicroResult {
    std::vector<Tensor> grads;
    std::vector<BatchStats> stats;
    double loss = 0.0;
  };
  std::vector<MicroResult> results(groups.size());
  const Model& frozen = model;
  auto run = [&](std::size_t j) {
    const Batch micro = slice(batch, groups[j]);
    Tape tape;
    ParamBinder bind(tape, true);
    Var signals = tape.constant(micro.signals);
    Var targets = tape.constant(micro.labels);
    Model::Output out = frozen.forward(bind, signals, true, step_seed * 7919ull + j);
    Var loss = multilabel_loss(out.logits, targets);
    // Weight each micro-batch by its share so the sum is the batch mean.
    Var weighted = scale(loss, static_cast<double>(groups[j].size()) / static_cast<double>(n));
    tape.release_recomputable();
    tape.backward(weighted);
    MicroResult& r = results[j];
    r.loss = weighted.value().item();
    r.stats = std::move(out.bn_stats);
    r.grads.reserve(params.size());
    for (const Tensor* p : params) r.grads.push_back(bind.grad(*p));
  };

  std::vector<Tensor> grads;
  for (const Tensor* p : params) grads.push_back(Tensor::zeros_like(*p));
  double loss = 0.0;
  // Accumulate wave by wave so at most `workers` micro-batch gradients are alive.
  for (std::size_t start = 0; start < groups.size(); start += cfg.workers) {
    const std::size_t count = std::min(cfg.workers, groups.size() - start);
    parallel_for(count, cfg.workers, [&](std::size_t k) { run(start + k); });
    for (std::size_t j = start; j < start + count; ++j) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        double* acc = grads[i].data();
        const double* g = results[j].grads[i].data();
        for (std::size_t e = 0; e < grads[i].size(); ++e) acc[e] += g[e];
      }
      loss += results[j].loss;
      model.update_batch_norm(results[j].stats);
      results[j] = MicroResult{};
    }
  }

  if (runtime::checked_mode() && !std::isfinite(loss)) throw NonFiniteError("training loss is not finite");
  clip_global_norm(grads, cfg.clip_norm);
  adamw_step(params, grads, state, lr);
  if (cfg.dtype == DType::f32) model.set_dtype(DType::f32);
  return loss;
}

FitResult fit(Model& model, const Dataset& train, const Dataset& val, const TrainConfig& cfg, const FitOptions& options) {
  cfg.validate();
  if (train.size() == 0) throw ConfigError("training split is empty");
  if (train.n_classes() != model.config().n_classes) {
    throw ConfigError("dataset has " + std::to_string(train.n_classes()) + " classes, model expects " +
                      std::to_string(model.config().n_classes));
  }
  if (cfg.dtype == DType::f32) model.set_dtype(DType::f32);

  const std::vector<Tensor*> params = model.parameters();
  OptimizerState state = OptimizerState::zeros_like(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;

  FitResult result;
  result.best = model;
  Rng shuffle_rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Batch batch = train.batch(idx);
      ++step;
      lr = warmup_lr(step, cfg.lr_peak, cfg.warmup_steps, cfg.schedule, total_steps);
      loss_sum += train_step(model, state, batch, cfg, lr, cfg.seed * 1000003ull + step) * static_cast<double>(idx.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.step = step;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    if (val.size() > 0) {
      const Predictions p = predict(model, val, cfg.resolved_micro_batch(), cfg.workers);
      const MetricsReport report = make_report(p.logits, val.labels, val.class_names);
      rec.val_auc = report.auc_macro;
      rec.val_f1 = report.f1_macro;
      rec.val_acc = report.acc_subset;
    }
    result.history.push_back(rec);
    if (options.log != nullptr) {
      *options.log << "epoch " << epoch << " step " << step << " lr " << text::format_number(lr) << " loss "
                   << text::format_number(rec.train_loss);
      if (rec.val_auc) *options.log << " val_auc " << text::format_number(*rec.val_auc);
      *options.log << '\n';
    }

    const bool improves = rec.val_auc && (!result.best_val_auc || *rec.val_auc > *result.best_val_auc);
    if (improves || !result.best_val_auc) {
      result.best = model;
      result.best_epoch = epoch;
      if (rec.val_auc) result.best_val_auc = rec.val_auc;
    }
    if (options.on_epoch && !options.on_epoch(rec, model)) break;
  }
  return result;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write history '" + path.string() + "'");
  auto opt = [](const std::optional<double>& v) { return v ? text::format_number(*v) : std::string(); };
  out << "epoch,step,lr,train_loss,val_auc,val_f1,val_acc\n";
  for (const EpochRecord& r : history) {
    out << r.epoch << ',' << r.step << ',' << text::format_number(r.lr) << ',' << text::format_number(r.train_loss)
        << ',' << opt(r.val_auc) << ',' << opt(r.val_f1) << ',' << opt(r.val_acc) << '\n';
  }
}

Predictions predict(const Model& model, const Dataset& data, std::size_t batch_size, std::size_t workers) {
  if (data.size() == 0) throw ConfigError("cannot predict on an empty dataset");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  const std::size_t n_classes = model.config().n_classes;
  const std::size_t dim = model.config().d_model;
  Predictions out{Tensor({data.size(), n_classes}), Tensor({data.size(), dim})};
  const auto groups = chunks(data.size(), batch_size);
  parallel_for(groups.size(), workers, [&](std::size_t j) {
    const Batch batch = data.batch(groups[j]);
    Tape tape;
    ParamBinder bind(tape, false);
    const Model::Output o = model.forward(bind, tape.constant(batch.signals), false);
    const std::size_t first = groups[j].front();
    std::copy_n(o.logits.value().data(), o.logits.value().size(), out.logits.data() + first * n_classes);
    std::copy_n(o.features.value().data(), o.features.value().size(), out.features.data() + first * dim);
  });
  return out;
}

MetricsReport evaluate(const Model& model, const Dataset& data, std::size_t batch_size, std::size_t workers) {
  if (data.n_classes() != model.config().n_classes) {
    throw ConfigError("dataset has " + std::to_string(data.n_classes()) + " classes, model expects " +
                      std::to_string(model.config().n_classes));
  }
  const Predictions p = predict(model, data, batch_size, workers);
  MetricsReport report = make_report(p.logits, data.labels, data.class_names);
  const ModelCost cost =
      count_params_flops(model, Shape{1, model.config().n_leads, model.config().input_length});
  report.param_count = cost.params;
  report.flop_count = cost.flops;
  return report;
}

}  // namespace ecgmamba
