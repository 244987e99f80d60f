#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ecgmamba/config.hpp"
#include "ecgmamba/nn.hpp"
#include "ecgmamba/ssm.hpp"

namespace ecgmamba {

/// Sinusoidal table: PE[pos, 2i] = sin(pos / 10000^(2i/D)), PE[pos, 2i+1] = cos(same).
/// Throws ConfigError for odd D.
Tensor positional_encoding(std::size_t length, std::size_t dim);

struct MambaBlockParams {
  Linear in_x;  // D -> ED, no bias
  Linear in_z;  // D -> ED, no bias
  SsmDirectionParams forward;
  SsmDirectionParams backward;
  Linear out_proj;  // ED -> D, no bias

  static MambaBlockParams init(const ModelConfig& cfg, Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    in_x.visit(prefix + ".in_x", f);
    in_z.visit(prefix + ".in_z", f);
    forward.visit(prefix + ".fwd", f);
    backward.visit(prefix + ".bwd", f);
    out_proj.visit(prefix + ".out_proj", f);
  }
};

/// x[B,L,D] -> [B,L,D]: two projections to ED, bidirectional selective scan
/// on the x branch, gate with swish(z), project back to D.
Var mamba_block(ParamBinder& bind, const MambaBlockParams& p, Var x, const SsmOptions& options);

struct FfnParams {
  Conv1dLayer up;    // D -> hidden, zero-symmetric padding
  Conv1dLayer down;  // hidden -> D

  static FfnParams init(std::size_t dim, std::size_t hidden, std::size_t kernel, Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    up.visit(prefix + ".up", f);
    down.visit(prefix + ".down", f);
  }
};

/// x[B,L,D] -> [B,L,D] with L preserved.
Var ffn(ParamBinder& bind, const FfnParams& p, Var x);

struct LayerFlags {
  bool use_ln = true;
  bool use_ffn = true;
  double dropout = 0.0;
};

struct MambaLayerParams {
  MambaBlockParams block;
  LayerNormParams ln_block;
  FfnParams ffn;
  LayerNormParams ln_ffn;

  template <typename F>
  void visit(const std::string& prefix, const LayerFlags& flags, F&& f) {
    block.visit(prefix + ".block", f);
    if (flags.use_ln) ln_block.visit(prefix + ".ln_block", f);
    if (flags.use_ffn) {
      ffn.visit(prefix + ".ffn", f);
      if (flags.use_ln) ln_ffn.visit(prefix + ".ln_ffn", f);
    }
  }
};

/// u = LN(x + block(x)); out = LN(u + ffn(u)). Disabled LN is the identity;
/// a disabled FFN skips the second sublayer. `dropout_seed` is only used when
/// flags.dropout > 0.
Var mamba_layer(ParamBinder& bind, const MambaLayerParams& p, Var x, const LayerFlags& flags,
                const SsmOptions& options, std::uint64_t dropout_seed = 0);

struct EncoderStageParams {
  Conv1dLayer conv;
  BatchNormParams bn;
};

class Model {
 public:
  /// Validates the config (which must have n_classes > 0) and initialises
  /// every parameter from `seed`.
  static Model build(const ModelConfig& config, std::uint64_t seed);

  struct Output {
    Var logits;                        // [B, n_classes]
    Var features;                      // [B, D], pooled input of the head
    std::vector<BatchStats> bn_stats;  // one per encoder stage in training mode
  };

  /// signal[B, n_leads, input_length]. Training mode uses batch statistics
  /// in the encoder (reported through Output::bn_stats) and dropout.
  Output forward(ParamBinder& bind, Var signal, bool training, std::uint64_t dropout_seed = 0) const;

  /// Folds training-mode batch statistics into the running statistics.
  void update_batch_norm(const std::vector<BatchStats>& stats);

  const ModelConfig& config() const { return config_; }
  std::size_t sequence_length() const { return config_.sequence_length(); }
  std::size_t parameter_count() const;

  /// Learnable tensors in a fixed order with stable names.
  template <typename F>
  void visit_parameters(F&& f) {
    const LayerFlags flags = layer_flags();
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
      const std::string prefix = "encoder." + std::to_string(i);
      encoder_[i].conv.visit(prefix + ".conv", f);
      encoder_[i].bn.visit(prefix + ".bn", f);
    }
    if (!config_.use_encoder) lead_proj_.visit("lead_proj", f);
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].visit("layers." + std::to_string(i), flags, f);
    head_.visit("head", f);
  }
  template <typename F>
  void visit_parameters(F&& f) const {
    const_cast<Model*>(this)->visit_parameters([&](const std::string& name, Tensor& t) { f(name, std::as_const(t)); });
  }

  /// Non-learnable state (batch-norm running statistics).
  template <typename F>
  void visit_buffers(F&& f) {
    for (std::size_t i = 0; i < encoder_.size(); ++i) encoder_[i].bn.visit_buffers("encoder." + std::to_string(i) + ".bn", f);
  }

  std::vector<Tensor*> parameters();
  /// Sets every learnable tensor to zero.
  void zero_weights();
  /// Rounds every learnable tensor and buffer to the given storage dtype.
  void set_dtype(DType dtype);

  const std::vector<MambaLayerParams>& layers() const { return layers_; }
  std::vector<MambaLayerParams>& layers() { return layers_; }
  const std::vector<EncoderStageParams>& encoder() const { return encoder_; }
  std::vector<EncoderStageParams>& encoder() { return encoder_; }

 private:
  LayerFlags layer_flags() const { return {config_.use_ln, config_.use_ffn, config_.dropout}; }
  SsmOptions ssm_options() const { return {config_.rule, config_.scan_strategy, true}; }

  ModelConfig config_;
  std::vector<EncoderStageParams> encoder_;
  Linear lead_proj_;  // used instead of the encoder when use_encoder is false
  Tensor pos_table_;  // [L, D]
  std::vector<MambaLayerParams> layers_;
  Linear head_;
};

struct ModelCost {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

/// Exact learnable-scalar count plus the floating point operations of one
/// inference forward pass at `input_shape` ([B, n_leads, input_length]).
ModelCost count_params_flops(const Model& model, const Shape& input_shape);

}  // namespace ecgmamba
