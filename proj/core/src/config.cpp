#include "ecgmamba/config.hpp"

#include <fstream>
#include <set>
#include <type_traits>

#include "ecgmamba/error.hpp"
#include "ecgmamba/ops.hpp"

namespace ecgmamba {

using nlohmann::json;

std::vector<EncoderStage> default_encoder(std::size_t d_model) {
  return {{64, 5, 5}, {128, 5, 5}, {d_model, 4, 4}};
}

std::size_t ModelConfig::sequence_length() const {
  if (!use_encoder) return input_length;
  std::size_t length = input_length;
  for (const EncoderStage& stage : resolved_encoder()) {
    try {
      length = conv1d_output_length(length, stage.kernel, Conv1dOptions{stage.stride, Padding::none, 1});
    } catch (const DimensionError&) {
      throw ConfigError("input_length " + std::to_string(input_length) +
                        " is too short for the encoder stride chain");
    }
  }
  return length;
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model: " + what);
  };
  require(n_layers >= 1, "n_layers must be >= 1");
  require(d_model >= 1, "d_model must be >= 1");
  require(d_model % 2 == 0, "d_model must be even for the positional encoding");
  require(ssm_state >= 1, "ssm_state must be >= 1");
  require(conv_kernel >= 1, "conv_kernel must be >= 1");
  require(expand >= 1, "expand must be >= 1");
  require(n_leads >= 1, "n_leads must be >= 1");
  require(input_length >= 1, "input_length must be >= 1");
  require(ffn_kernel >= 1, "ffn_kernel must be >= 1");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  require(ln_eps > 0.0 && bn_eps > 0.0, "normalisation eps must be positive");
  require(bn_momentum > 0.0 && bn_momentum <= 1.0, "bn_momentum must lie in (0, 1]");
  if (use_encoder) {
    const auto stages = resolved_encoder();
    for (const EncoderStage& s : stages) {
      require(s.out_channels >= 1 && s.kernel >= 1 && s.stride >= 1, "encoder stages need positive extents");
    }
    require(stages.back().out_channels == d_model, "last encoder stage must output d_model channels");
  }
  (void)sequence_length();
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("train: " + what);
  };
  require(batch_size >= 1, "batch_size must be >= 1");
  require(epochs >= 1, "epochs must be >= 1");
  require(lr_peak > 0.0, "lr_peak must be positive");
  require(warmup_steps >= 1, "warmup_steps must be >= 1");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must lie in [0, 1)");
  require(adam_eps > 0.0, "adam_eps must be positive");
  require(weight_decay >= 0.0, "weight_decay must be >= 0");
  require(clip_norm >= 0.0, "clip_norm must be >= 0");
  require(workers >= 1, "workers must be >= 1");
}

void DataConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("data: " + what);
  };
  require(target_hz >= 1 && target_seconds >= 1, "target_hz and target_seconds must be >= 1");
  require(n_folds >= 1, "n_folds must be >= 1");
  std::set<int> seen;
  for (const auto* folds : {&train_folds, &val_folds, &test_folds}) {
    for (int f : *folds) {
      require(f >= 1 && static_cast<std::size_t>(f) <= n_folds, "fold ids must lie in 1..n_folds");
      require(seen.insert(f).second, "a fold is assigned to more than one split");
    }
  }
  require(!train_folds.empty(), "train_folds must not be empty");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.validate();
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

// ---------------------------------------------------------------- JSON

namespace {

const char* schedule_name(LrSchedule s) { return s == LrSchedule::cosine ? "cosine" : "constant_after_warmup"; }

LrSchedule parse_schedule(const std::string& name) {
  if (name == "constant_after_warmup") return LrSchedule::constant_after_warmup;
  if (name == "cosine") return LrSchedule::cosine;
  throw ConfigError("unknown schedule '" + name + "' (expected constant_after_warmup or cosine)");
}

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seed fields are read as size_t");

/// Reads keys out of one JSON object and rejects any it was not asked for.
class StrictReader {
 public:
  StrictReader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j.is_object()) throw ConfigError(section_ + ": expected a JSON object");
  }

  void read(const char* key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || v->get<std::int64_t>() < 0) fail(key, "a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void read(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void read(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "a boolean");
      out = v->get<bool>();
    }
  }
  void read(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  void read(const char* key, std::vector<int>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(key, "an array of integers");
      out.clear();
      for (const json& e : *v) {
        if (!e.is_number_integer()) fail(key, "an array of integers");
        out.push_back(e.get<int>());
      }
    }
  }
  const json* find(const char* key) {
    consumed_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!consumed_.count(it.key())) throw ConfigError(section_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  [[noreturn]] void fail(const char* key, const char* expected) const {
    throw ConfigError(section_ + "." + key + ": expected " + expected);
  }

  const json& j_;
  std::string section_;
  std::set<std::string> consumed_;
};

}  // namespace

json to_json(const ModelConfig& c) {
  json encoder = json::array();
  for (const EncoderStage& s : c.encoder) encoder.push_back({s.out_channels, s.kernel, s.stride});
  return json{{"n_layers", c.n_layers},
              {"d_model", c.d_model},
              {"ssm_state", c.ssm_state},
              {"conv_kernel", c.conv_kernel},
              {"expand", c.expand},
              {"dt_rank", c.dt_rank},
              {"encoder", encoder},
              {"n_leads", c.n_leads},
              {"input_length", c.input_length},
              {"n_classes", c.n_classes},
              {"ffn_kernel", c.ffn_kernel},
              {"ffn_hidden", c.ffn_hidden},
              {"use_encoder", c.use_encoder},
              {"use_ln", c.use_ln},
              {"use_ffn", c.use_ffn},
              {"dropout", c.dropout},
              {"ln_eps", c.ln_eps},
              {"bn_eps", c.bn_eps},
              {"bn_momentum", c.bn_momentum},
              {"discretization", to_string(c.rule)},
              {"scan_strategy", to_string(c.scan_strategy)}};
}

json to_json(const TrainConfig& c) {
  return json{{"batch_size", c.batch_size},
              {"micro_batch", c.micro_batch},
              {"epochs", c.epochs},
              {"lr_peak", c.lr_peak},
              {"warmup_steps", c.warmup_steps},
              {"schedule", schedule_name(c.schedule)},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"weight_decay", c.weight_decay},
              {"clip_norm", c.clip_norm},
              {"seed", c.seed},
              {"dtype", to_string(c.dtype)},
              {"workers", c.workers}};
}

json to_json(const DataConfig& c) {
  return json{{"manifest", c.manifest},
              {"taxonomy", c.taxonomy},
              {"target_hz", c.target_hz},
              {"target_seconds", c.target_seconds},
              {"n_folds", c.n_folds},
              {"split_seed", c.split_seed},
              {"train_folds", c.train_folds},
              {"val_folds", c.val_folds},
              {"test_folds", c.test_folds},
              {"skip_unlabeled", c.skip_unlabeled}};
}

json to_json(const RunConfig& c) {
  return json{{"model", to_json(c.model)},
              {"train", to_json(c.train)},
              {"data", to_json(c.data)},
              {"output_dir", c.output_dir}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  StrictReader r(j, "model");
  r.read("n_layers", c.n_layers);
  r.read("d_model", c.d_model);
  r.read("ssm_state", c.ssm_state);
  r.read("conv_kernel", c.conv_kernel);
  r.read("expand", c.expand);
  r.read("dt_rank", c.dt_rank);
  if (const json* enc = r.find("encoder")) {
    if (!enc->is_array()) throw ConfigError("model.encoder: expected an array of [channels, kernel, stride]");
    for (const json& s : *enc) {
      if (!s.is_array() || s.size() != 3 || !s[0].is_number_unsigned() || !s[1].is_number_unsigned() ||
          !s[2].is_number_unsigned()) {
        throw ConfigError("model.encoder: each stage must be [channels, kernel, stride]");
      }
      c.encoder.push_back({s[0].get<std::size_t>(), s[1].get<std::size_t>(), s[2].get<std::size_t>()});
    }
  }
  r.read("n_leads", c.n_leads);
  r.read("input_length", c.input_length);
  r.read("n_classes", c.n_classes);
  r.read("ffn_kernel", c.ffn_kernel);
  r.read("ffn_hidden", c.ffn_hidden);
  r.read("use_encoder", c.use_encoder);
  r.read("use_ln", c.use_ln);
  r.read("use_ffn", c.use_ffn);
  r.read("dropout", c.dropout);
  r.read("ln_eps", c.ln_eps);
  r.read("bn_eps", c.bn_eps);
  r.read("bn_momentum", c.bn_momentum);
  std::string rule = to_string(c.rule);
  std::string strategy = to_string(c.scan_strategy);
  r.read("discretization", rule);
  r.read("scan_strategy", strategy);
  c.rule = parse_rule(rule);
  c.scan_strategy = parse_strategy(strategy);
  r.finish();
  return c;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  StrictReader r(j, "train");
  r.read("batch_size", c.batch_size);
  r.read("micro_batch", c.micro_batch);
  r.read("epochs", c.epochs);
  r.read("lr_peak", c.lr_peak);
  r.read("warmup_steps", c.warmup_steps);
  std::string schedule = schedule_name(c.schedule);
  r.read("schedule", schedule);
  c.schedule = parse_schedule(schedule);
  r.read("beta1", c.beta1);
  r.read("beta2", c.beta2);
  r.read("adam_eps", c.adam_eps);
  r.read("weight_decay", c.weight_decay);
  r.read("clip_norm", c.clip_norm);
  r.read("seed", c.seed);
  std::string dtype = to_string(c.dtype);
  r.read("dtype", dtype);
  try {
    c.dtype = parse_dtype(dtype);
  } catch (const Error& e) {
    throw ConfigError(std::string("train.dtype: ") + e.what());
  }
  r.read("workers", c.workers);
  r.finish();
  return c;
}

DataConfig data_config_from_json(const json& j) {
  DataConfig c;
  StrictReader r(j, "data");
  r.read("manifest", c.manifest);
  r.read("taxonomy", c.taxonomy);
  r.read("target_hz", c.target_hz);
  r.read("target_seconds", c.target_seconds);
  r.read("n_folds", c.n_folds);
  r.read("split_seed", c.split_seed);
  r.read("train_folds", c.train_folds);
  r.read("val_folds", c.val_folds);
  r.read("test_folds", c.test_folds);
  r.read("skip_unlabeled", c.skip_unlabeled);
  r.finish();
  return c;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  StrictReader r(j, "config");
  if (const json* m = r.find("model")) c.model = model_config_from_json(*m);
  if (const json* t = r.find("train")) c.train = train_config_from_json(*t);
  if (const json* d = r.find("data")) c.data = data_config_from_json(*d);
  r.read("output_dir", c.output_dir);
  r.finish();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void save_run_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config file '" + path + "'");
  out << canonical_json(to_json(cfg));
}

std::string canonical_json(const json& j) { return j.dump(2) + "\n"; }

}  // namespace ecgmamba
