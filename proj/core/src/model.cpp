#include "ecgmamba/model.hpp"

#include <cmath>

#include "ecgmamba/error.hpp"
#include "ecgmamba/runtime.hpp"

namespace ecgmamba {

Tensor positional_encoding(std::size_t length, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw ConfigError("positional encoding needs an even dimension, got " + std::to_string(dim));
  if (length == 0) throw ConfigError("positional encoding needs a positive length");
  Tensor pe({length, dim});
  for (std::size_t i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(2 * i) / static_cast<double>(dim));
    for (std::size_t pos = 0; pos < length; ++pos) {
      const double angle = static_cast<double>(pos) * freq;
      pe[pos * dim + 2 * i] = std::sin(angle);
      pe[pos * dim + 2 * i + 1] = std::cos(angle);
    }
  }
  return pe;
}

MambaBlockParams MambaBlockParams::init(const ModelConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.d_model;
  const std::size_t ed = cfg.inner_dim();
  MambaBlockParams p;
  p.in_x = Linear::init(d, ed, false, rng);
  p.in_z = Linear::init(d, ed, false, rng);
  p.forward = SsmDirectionParams::init(ed, cfg.ssm_state, cfg.conv_kernel, cfg.resolved_dt_rank(), rng);
  p.backward = SsmDirectionParams::init(ed, cfg.ssm_state, cfg.conv_kernel, cfg.resolved_dt_rank(), rng);
  p.out_proj = Linear::init(ed, d, false, rng);
  return p;
}

Var mamba_block(ParamBinder& bind, const MambaBlockParams& p, Var x, const SsmOptions& options) {
  Var xi = p.in_x(bind, x);
  Var z = p.in_z(bind, x);
  const BiScanOutput scans = bidirectional_scan(bind, p.forward, p.backward, xi, xi, options);
  Var gated = mul(add(scans.forward, scans.backward), activation(Activation::swish, z));
  return p.out_proj(bind, gated);
}

FfnParams FfnParams::init(std::size_t dim, std::size_t hidden, std::size_t kernel, Rng& rng) {
  const Conv1dOptions same{1, Padding::zero_symmetric, 1};
  return FfnParams{Conv1dLayer::init(dim, hidden, kernel, same, true, rng),
                   Conv1dLayer::init(hidden, dim, kernel, same, true, rng)};
}

Var ffn(ParamBinder& bind, const FfnParams& p, Var x) {
  Var h = p.up(bind, transpose_last2(x));
  h = activation(Activation::relu, h);
  return transpose_last2(p.down(bind, h));
}

namespace {

void check_sequence_shape(const char* where, Var in, Var out) {
  if (runtime::checked_mode() && in.shape() != out.shape()) {
    throw DimensionError(std::string(where) + ": shape changed from " + to_string(in.shape()) + " to " +
                         to_string(out.shape()));
  }
}

}  // namespace

Var mamba_layer(ParamBinder& bind, const MambaLayerParams& p, Var x, const LayerFlags& flags,
                const SsmOptions& options, std::uint64_t dropout_seed) {
  Var h = mamba_block(bind, p.block, x, options);
  check_sequence_shape("mamba_block", x, h);
  if (flags.dropout > 0.0) h = dropout(h, flags.dropout, dropout_seed);
  Var u = add(x, h);
  if (flags.use_ln) u = p.ln_block(bind, u);
  if (!flags.use_ffn) return u;
  Var f = ffn(bind, p.ffn, u);
  check_sequence_shape("ffn", u, f);
  if (flags.dropout > 0.0) f = dropout(f, flags.dropout, dropout_seed ^ 0x9e3779b97f4a7c15ull);
  Var out = add(u, f);
  if (flags.use_ln) out = p.ln_ffn(bind, out);
  return out;
}

Model Model::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  if (config.n_classes == 0) throw ConfigError("model: n_classes must be >= 1");
  Model m;
  m.config_ = config;
  Rng rng(seed);
  if (config.use_encoder) {
    std::size_t in = config.n_leads;
    for (const EncoderStage& s : config.resolved_encoder()) {
      EncoderStageParams stage;
      stage.conv = Conv1dLayer::init(in, s.out_channels, s.kernel, Conv1dOptions{s.stride, Padding::none, 1}, true, rng);
      stage.bn = BatchNormParams::init(s.out_channels, config.bn_eps, config.bn_momentum);
      m.encoder_.push_back(std::move(stage));
      in = s.out_channels;
    }
  } else {
    m.lead_proj_ = Linear::init(config.n_leads, config.d_model, true, rng);
  }
  m.pos_table_ = positional_encoding(config.sequence_length(), config.d_model);
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    MambaLayerParams layer;
    layer.block = MambaBlockParams::init(config, rng);
    layer.ln_block = LayerNormParams::init(config.d_model, config.ln_eps);
    layer.ffn = FfnParams::init(config.d_model, config.resolved_ffn_hidden(), config.ffn_kernel, rng);
    layer.ln_ffn = LayerNormParams::init(config.d_model, config.ln_eps);
    m.layers_.push_back(std::move(layer));
  }
  m.head_ = Linear::init(config.d_model, config.n_classes, true, rng);
  return m;
}

Model::Output Model::forward(ParamBinder& bind, Var signal, bool training, std::uint64_t dropout_seed) const {
  const Shape expected{signal.shape().empty() ? 0 : signal.shape()[0], config_.n_leads, config_.input_length};
  if (signal.shape().size() != 3 || signal.shape() != expected) {
    throw DimensionError("model input must be [B, " + std::to_string(config_.n_leads) + ", " +
                         std::to_string(config_.input_length) + "], got " + to_string(signal.shape()));
  }
  Output out;
  Var h = signal;
  if (config_.use_encoder) {
    for (const EncoderStageParams& stage : encoder_) {
      h = stage.conv(bind, h);
      BatchStats stats;
      h = stage.bn(bind, h, training, training ? &stats : nullptr);
      if (training) out.bn_stats.push_back(std::move(stats));
      h = activation(Activation::relu, h);
    }
    h = transpose_last2(h);
  } else {
    h = lead_proj_(bind, transpose_last2(signal));
  }
  h = add(h, bind.tape().constant(pos_table_));
  const LayerFlags flags = layer_flags();
  const LayerFlags active{flags.use_ln, flags.use_ffn, training ? flags.dropout : 0.0};
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = mamba_layer(bind, layers_[i], h, active, ssm_options(), dropout_seed * 1000003ull + i);
  }
  out.features = mean_time(h);
  out.logits = head_(bind, out.features);
  return out;
}

void Model::update_batch_norm(const std::vector<BatchStats>& stats) {
  if (stats.size() != encoder_.size()) {
    throw ContractError("expected " + std::to_string(encoder_.size()) + " batch-norm statistics, got " +
                        std::to_string(stats.size()));
  }
  for (std::size_t i = 0; i < encoder_.size(); ++i) encoder_[i].bn.update_running(stats[i]);
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  visit_parameters([&](const std::string&, const Tensor& t) { total += t.size(); });
  return total;
}

std::vector<Tensor*> Model::parameters() {
  std::vector<Tensor*> out;
  visit_parameters([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

void Model::zero_weights() {
  visit_parameters([](const std::string&, Tensor& t) { t.fill(0.0); });
}

void Model::set_dtype(DType dtype) {
  visit_parameters([&](const std::string&, Tensor& t) { t.set_dtype(dtype); });
  visit_buffers([&](const std::string&, Tensor& t) { t.set_dtype(dtype); });
}

ModelCost count_params_flops(const Model& model, const Shape& input_shape) {
  Tape tape;
  ParamBinder bind(tape, false);
  Var signal = tape.constant(Tensor(input_shape));
  (void)model.forward(bind, signal, false);
  return {model.parameter_count(), tape.total_flops()};
}

}  // namespace ecgmamba
