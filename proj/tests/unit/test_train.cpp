#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "ecgmamba/error.hpp"
#include "ecgmamba/train.hpp"
#include "oracles.hpp"

using namespace ecgmamba;

namespace {

Dataset tiny_dataset(std::size_t n, std::uint64_t seed, double snr = 4.0) {
  SynthOptions opt;
  opt.n_records = n;
  opt.n_classes = 2;
  opt.n_leads = 2;
  opt.samples = 200;
  opt.seed = seed;
  opt.snr = snr;
  opt.cooccurrence = 0.0;
  return make_dataset(synth_records(opt), synth_class_names(2), 100, 2);
}

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.ssm_state = 4;
  cfg.n_leads = 2;
  cfg.input_length = 200;
  cfg.encoder = {{8, 10, 10}};
  cfg.n_classes = 2;
  return cfg;
}

TrainConfig tiny_train() {
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = 3;
  cfg.warmup_steps = 2;
  cfg.lr_peak = 5e-3;
  cfg.dtype = DType::f64;
  return cfg;
}

// Single-parameter AdamW evaluated from the update formulas.
double adamw_oracle(double p, double g, double lr, double wd, int steps) {
  double m = 0.0, v = 0.0;
  for (int t = 1; t <= steps; ++t) {
    p *= 1.0 - lr * wd;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double m_hat = m / (1.0 - std::pow(0.9, t)), v_hat = v / (1.0 - std::pow(0.999, t));
    p -= lr * m_hat / (std::sqrt(v_hat) + 1e-8);
  }
  return p;
}

}  // namespace

TEST(AdamW, SingleStepExample) {
  Tensor p({1}, 1.0);
  std::vector<Tensor*> params{&p};
  const std::vector<Tensor> grads{Tensor({1}, 1.0)};
  OptimizerState state = OptimizerState::zeros_like(params, 0.9, 0.999, 1e-8, 0.0);
  adamw_step(params, grads, state, 0.1);
  EXPECT_NEAR(p[0], 0.900000001, 1e-15);
  EXPECT_NEAR(p[0], adamw_oracle(1.0, 1.0, 0.1, 0.0, 1), 1e-15);
  EXPECT_EQ(state.step, 1u);
}

TEST(AdamW, DecoupledDecay) {
  Tensor p({2}, {1.0, -2.0});
  std::vector<Tensor*> params{&p};
  const std::vector<Tensor> zero{Tensor({2}, 0.0)};
  OptimizerState fixed = OptimizerState::zeros_like(params, 0.9, 0.999, 1e-8, 0.0);
  adamw_step(params, zero, fixed, 0.1);
  EXPECT_TRUE(identical(p, Tensor({2}, {1.0, -2.0})));

  OptimizerState decay = OptimizerState::zeros_like(params, 0.9, 0.999, 1e-8, 0.5);
  adamw_step(params, zero, decay, 0.1);
  EXPECT_DOUBLE_EQ(p[0], 0.95);
  EXPECT_DOUBLE_EQ(p[1], -1.9);

  Tensor q({1}, 0.7);
  std::vector<Tensor*> qs{&q};
  OptimizerState s = OptimizerState::zeros_like(qs, 0.9, 0.999, 1e-8, 0.01);
  for (int i = 0; i < 5; ++i) adamw_step(qs, std::vector<Tensor>{Tensor({1}, 0.3)}, s, 0.01);
  EXPECT_NEAR(q[0], adamw_oracle(0.7, 0.3, 0.01, 0.01, 5), 1e-14);
}

TEST(Adam, EqualsAdamWWithoutDecay) {
  Tensor a({3}, {0.1, 0.2, 0.3}), b = a;
  std::vector<Tensor*> pa{&a}, pb{&b};
  OptimizerState sa = OptimizerState::zeros_like(pa, 0.9, 0.999, 1e-8, 0.0), sb = sa;
  const std::vector<Tensor> g{Tensor({3}, {1.0, -0.5, 0.25})};
  adamw_step(pa, g, sa, 0.01);
  adam_step(pb, g, sb, 0.01);
  EXPECT_TRUE(identical(a, b));
}

TEST(Schedule, WarmupRamp) {
  EXPECT_EQ(warmup_lr(0, 1e-3, 500), 0.0);
  EXPECT_DOUBLE_EQ(warmup_lr(500, 1e-3, 500), 1e-3);
  EXPECT_DOUBLE_EQ(warmup_lr(250, 1e-3, 500), 5e-4);
  EXPECT_DOUBLE_EQ(warmup_lr(9000, 1e-3, 500), 1e-3);
  EXPECT_NEAR(warmup_lr(1000, 1e-3, 100, LrSchedule::cosine, 1000), 0.0, 1e-18);
  EXPECT_NEAR(warmup_lr(550, 1e-3, 100, LrSchedule::cosine, 1000), 5e-4, 1e-15);
  EXPECT_THROW(warmup_lr(3, 1e-3, 0), ConfigError);
}

TEST(Loss, Examples) {
  EXPECT_NEAR(multilabel_loss(Tensor({2, 3}, 0.0), Tensor({2, 3}, {1, 0, 1, 0, 0, 1})), std::numbers::ln2, 1e-15);
  const Tensor targets({1, 2}, {1, 0});
  EXPECT_LT(multilabel_loss(Tensor({1, 2}, {40, -40}), targets), 1e-12);
  EXPECT_NEAR(multilabel_loss(Tensor({1, 2}, {1, -1}), targets), 0.31326168751822286, 1e-15);
  EXPECT_NEAR(multilabel_loss(Tensor({1, 2}, {1, -1}), targets), oracle::softplus(-1.0), 1e-15);
  EXPECT_THROW(multilabel_loss(Tensor({1, 2}, 0.0), Tensor({1, 3}, 0.0)), DimensionError);
}

TEST(ClipNorm, ScalesJointly) {
  std::vector<Tensor> g{Tensor({1}, 3.0), Tensor({1}, 4.0)};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g[0][0], 0.6, 1e-15);
  EXPECT_NEAR(g[1][0], 0.8, 1e-15);
  std::vector<Tensor> small{Tensor({1}, 0.3)};
  clip_global_norm(small, 1.0);
  EXPECT_EQ(small[0][0], 0.3);
}

TEST(TrainStep, MicroBatchesMatchFullBatchWithoutBatchNorm) {
  ModelConfig cfg = tiny_model();
  cfg.use_encoder = false;
  cfg.input_length = 20;
  const Dataset data = tiny_dataset(4, 1);
  Dataset cropped = data;
  cropped.signals = Tensor({4, 2, 20});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t t = 0; t < 20; ++t) cropped.signals.at({i, c, t}) = data.signals.at({i, c, t});

  TrainConfig full = tiny_train(), micro = tiny_train();
  full.batch_size = micro.batch_size = 4;
  micro.micro_batch = 1;
  Model a = Model::build(cfg, 3), b = Model::build(cfg, 3);
  OptimizerState sa = OptimizerState::zeros_like(a.parameters()), sb = OptimizerState::zeros_like(b.parameters());
  const double la = train_step(a, sa, cropped.all(), full, 1e-3, 0);
  const double lb = train_step(b, sb, cropped.all(), micro, 1e-3, 0);
  EXPECT_NEAR(la, lb, 1e-12);
  const std::vector<Tensor*> pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_LT(max_abs_diff(*pa[i], *pb[i]), 1e-12);
}

TEST(Fit, SeededRunsAreBitIdentical) {
  const Dataset train = tiny_dataset(16, 2), val = tiny_dataset(8, 3);
  std::vector<double> losses[2];
  for (int run = 0; run < 2; ++run) {
    Model model = Model::build(tiny_model(), 4);
    const FitResult r = fit(model, train, val, tiny_train());
    for (const EpochRecord& e : r.history) losses[run].push_back(e.train_loss);
  }
  ASSERT_EQ(losses[0].size(), 3u);
  EXPECT_EQ(losses[0], losses[1]);

  TrainConfig two_workers = tiny_train();
  two_workers.micro_batch = 4;
  two_workers.workers = 2;
  std::vector<double> threaded[2];
  for (int run = 0; run < 2; ++run) {
    Model model = Model::build(tiny_model(), 4);
    for (const EpochRecord& e : fit(model, train, val, two_workers).history) threaded[run].push_back(e.train_loss);
  }
  EXPECT_EQ(threaded[0], threaded[1]);
}

TEST(Fit, RejectsBadInput) {
  Model model = Model::build(tiny_model(), 5);
  const Dataset val = tiny_dataset(4, 6);
  EXPECT_THROW(fit(model, Dataset{}, val, tiny_train()), ConfigError);
  TrainConfig bad = tiny_train();
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Fit, TinyModelOverfitsEightSamples) {
  const Dataset train = tiny_dataset(8, 7);
  Model model = Model::build(tiny_model(), 8);
  TrainConfig cfg = tiny_train();
  cfg.epochs = 150;
  cfg.warmup_steps = 10;
  cfg.lr_peak = 1e-2;
  cfg.weight_decay = 0.0;
  std::vector<double> losses;
  FitOptions opts;
  opts.on_epoch = [&](const EpochRecord& e, const Model& m) {
    losses.push_back(e.train_loss);
    return accuracy(binarize(predict(m, train).logits), train.labels) < 1.0;
  };
  const FitResult r = fit(model, train, Dataset{}, cfg, opts);
  EXPECT_DOUBLE_EQ(accuracy(binarize(predict(r.best, train).logits), train.labels), 1.0);
  EXPECT_LT(losses.back(), losses.front());
}

TEST(Fit, HistoryCsv) {
  oracle::TempDir dir("hist");
  std::vector<EpochRecord> h(2);
  h[0] = {1, 4, 1e-3, 0.5, 0.75, std::nullopt, 0.5};
  h[1] = {2, 8, 1e-3, 0.25, std::nullopt, std::nullopt, std::nullopt};
  write_history_csv(dir / "h.csv", h);
  EXPECT_EQ(oracle::read_file(dir / "h.csv"),
            "epoch,step,lr,train_loss,val_auc,val_f1,val_acc\n1,4,0.001,0.5,0.75,,0.5\n2,8,0.001,0.25,,,\n");
}
