#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ecgmamba/ssm.hpp"

namespace ecgmamba {

/// One encoder stage: Conv1d(kernel, stride) -> BatchNorm -> ReLU.
struct EncoderStage {
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;

  bool operator==(const EncoderStage&) const = default;
};

/// [(64,5,5), (128,5,5), (d_model,4,4)]: 1000 samples -> 10 steps.
std::vector<EncoderStage> default_encoder(std::size_t d_model);

struct ModelConfig {
  std::size_t n_layers = 8;
  std::size_t d_model = 128;
  std::size_t ssm_state = 32;
  std::size_t conv_kernel = 4;
  std::size_t expand = 2;
  /// Low rank of the delta projection; 0 means ceil(d_model / 16).
  std::size_t dt_rank = 0;
  /// Empty means default_encoder(d_model).
  std::vector<EncoderStage> encoder;
  std::size_t n_leads = 12;
  std::size_t input_length = 1000;
  /// 0 means "take it from the dataset taxonomy".
  std::size_t n_classes = 0;
  std::size_t ffn_kernel = 3;
  /// 0 means 2 * d_model.
  std::size_t ffn_hidden = 0;
  bool use_encoder = true;
  bool use_ln = true;
  bool use_ffn = true;
  double dropout = 0.0;
  double ln_eps = 1e-5;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  DiscretizationRule rule = DiscretizationRule::euler_b;
  ScanStrategy scan_strategy = ScanStrategy::recompute;

  std::size_t inner_dim() const { return expand * d_model; }
  std::size_t resolved_dt_rank() const { return dt_rank != 0 ? dt_rank : (d_model + 15) / 16; }
  std::size_t resolved_ffn_hidden() const { return ffn_hidden != 0 ? ffn_hidden : 2 * d_model; }
  std::vector<EncoderStage> resolved_encoder() const { return encoder.empty() ? default_encoder(d_model) : encoder; }
  /// Sequence length after the encoder (or input_length without one).
  std::size_t sequence_length() const;

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;
};

enum class LrSchedule { constant_after_warmup, cosine };

struct TrainConfig {
  std::size_t batch_size = 64;
  /// Samples per forward/backward pass; gradients are accumulated up to
  /// batch_size. 0 means batch_size.
  std::size_t micro_batch = 0;
  std::size_t epochs = 10;
  double lr_peak = 1e-3;
  std::size_t warmup_steps = 500;
  LrSchedule schedule = LrSchedule::constant_after_warmup;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  /// Global gradient norm limit; 0 disables clipping.
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  DType dtype = DType::f32;
  std::size_t workers = 1;

  std::size_t resolved_micro_batch() const { return micro_batch != 0 ? micro_batch : batch_size; }
  void validate() const;
};

struct DataConfig {
  std::string manifest;
  /// Empty means "taxonomy.txt next to the manifest".
  std::string taxonomy;
  std::size_t target_hz = 100;
  std::size_t target_seconds = 10;
  std::size_t n_folds = 10;
  std::uint64_t split_seed = 0;
  std::vector<int> train_folds{1, 2, 3, 4, 5, 6, 7, 8};
  std::vector<int> val_folds{9};
  std::vector<int> test_folds{10};
  /// Records without any positive label are skipped (with a warning) when
  /// true and rejected when false.
  bool skip_unlabeled = true;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::string output_dir = "run";

  void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
nlohmann::json to_json(const DataConfig& cfg);
nlohmann::json to_json(const RunConfig& cfg);

/// Parsers reject unknown keys and wrongly typed values with ConfigError.
/// Missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
DataConfig data_config_from_json(const nlohmann::json& j);
RunConfig run_config_from_json(const nlohmann::json& j);

RunConfig load_run_config(const std::string& path);
void save_run_config(const std::string& path, const RunConfig& cfg);

/// Sorted keys, two-space indent, trailing newline.
std::string canonical_json(const nlohmann::json& j);

}  // namespace ecgmamba
