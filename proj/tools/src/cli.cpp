#include "ecgmamba/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>

#include <CLI11.hpp>

#include "ecgmamba/bench.hpp"
#include "ecgmamba/checkpoint.hpp"
#include "ecgmamba/config.hpp"
#include "ecgmamba/data.hpp"
#include "ecgmamba/error.hpp"
#include "ecgmamba/runtime.hpp"
#include "ecgmamba/text.hpp"
#include "ecgmamba/train.hpp"
#include "ecgmamba/verify.hpp"

namespace fs = std::filesystem;

namespace ecgmamba::cli {
namespace {

void write_text(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f << content;
}

struct TrainArgs {
  std::string config;
  std::string manifest;
  std::string output;
  std::optional<std::size_t> layers, epochs, workers, batch_size, micro_batch;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  bool no_encoder = false, no_ln = false, no_ffn = false;
};

struct DataArgs {
  std::string config;
  std::string manifest;
  std::string split = "test";
  std::string checkpoint;
  std::string output;
  std::size_t batch_size = 64;
  std::size_t workers = 1;
};

RunConfig base_config(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

/// Picks the split a command operates on; "all" merges every fold.
Dataset select_split(DataConfig data, const std::string& split) {
  if (split == "all") {
    data.train_folds.resize(data.n_folds);
    std::iota(data.train_folds.begin(), data.train_folds.end(), 1);
    data.val_folds.clear();
    data.test_folds.clear();
    return load_splits(data).train;
  }
  DatasetSplits s = load_splits(data);
  if (split == "train") return std::move(s.train);
  if (split == "val") return std::move(s.val);
  if (split == "test") return std::move(s.test);
  throw ConfigError("unknown split '" + split + "' (expected train, val, test or all)");
}

void check_compatible(const ModelConfig& model, const Dataset& data) {
  if (data.size() == 0) return;
  if (model.n_classes != data.n_classes()) {
    throw ConfigError("model has " + std::to_string(model.n_classes) + " classes, dataset taxonomy has " +
                      std::to_string(data.n_classes()));
  }
  if (model.n_leads != data.signals.dim(1) || model.input_length != data.signals.dim(2)) {
    throw ConfigError("model expects [" + std::to_string(model.n_leads) + ", " + std::to_string(model.input_length) +
                      "] signals, dataset provides [" + std::to_string(data.signals.dim(1)) + ", " +
                      std::to_string(data.signals.dim(2)) + "]");
  }
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig cfg = base_config(a.config);
  if (!a.manifest.empty()) cfg.data.manifest = a.manifest;
  if (!a.output.empty()) cfg.output_dir = a.output;
  if (a.layers) cfg.model.n_layers = *a.layers;
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.workers) cfg.train.workers = *a.workers;
  if (a.batch_size) cfg.train.batch_size = *a.batch_size;
  if (a.micro_batch) cfg.train.micro_batch = *a.micro_batch;
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.lr) cfg.train.lr_peak = *a.lr;
  if (a.no_encoder) cfg.model.use_encoder = false;
  if (a.no_ln) cfg.model.use_ln = false;
  if (a.no_ffn) cfg.model.use_ffn = false;
  cfg.validate();

  DatasetSplits data = load_splits(cfg.data);
  for (const std::string& w : data.warnings) err << "warning: " << w << '\n';
  if (data.train.size() == 0) throw ConfigError("the training split is empty");
  if (cfg.model.n_classes == 0) cfg.model.n_classes = data.train.n_classes();
  check_compatible(cfg.model, data.train);
  cfg.validate();

  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  save_run_config((dir / "config.json").string(), cfg);

  Model model = Model::build(cfg.model, cfg.train.seed);
  out << "model: " << model.parameter_count() << " parameters, sequence length " << model.sequence_length() << '\n';
  FitOptions options;
  options.log = &out;
  FitResult fitted = fit(model, data.train, data.val, cfg.train, options);
  write_history_csv(dir / "history.csv", fitted.history);
  save_checkpoint(dir / "model.ckpt", fitted.best);

  const char* split = data.test.size() > 0 ? "test" : data.val.size() > 0 ? "val" : "train";
  const Dataset& eval_set = data.test.size() > 0 ? data.test : data.val.size() > 0 ? data.val : data.train;
  const MetricsReport report = evaluate(fitted.best, eval_set, cfg.train.resolved_micro_batch(), cfg.train.workers);
  nlohmann::json j = to_json(report);
  j["split"] = split;
  j["best_epoch"] = fitted.best_epoch;
  write_text(dir / "metrics.json", canonical_json(j));
  out << "metrics (" << split << "): " << metrics_csv_header() << '\n' << metrics_csv_row(report) << '\n';
  out << "wrote " << (dir / "model.ckpt").string() << ", history.csv, metrics.json, config.json\n";
  return 0;
}

Dataset load_eval_data(const DataArgs& a) {
  RunConfig cfg = base_config(a.config);
  if (!a.manifest.empty()) cfg.data.manifest = a.manifest;
  return select_split(cfg.data, a.split);
}

int cmd_eval(const DataArgs& a, std::ostream& out) {
  if (!fs::exists(a.checkpoint)) throw IoError("checkpoint '" + a.checkpoint + "' does not exist");
  const Model model = load_checkpoint(a.checkpoint);
  const Dataset data = load_eval_data(a);
  if (data.size() == 0) throw ConfigError("split '" + a.split + "' is empty");
  check_compatible(model.config(), data);
  const MetricsReport report = evaluate(model, data, a.batch_size, a.workers);
  nlohmann::json j = to_json(report);
  j["split"] = a.split;
  const std::string text = canonical_json(j);
  out << text;
  if (!a.output.empty()) write_text(a.output, text);
  return 0;
}

int cmd_export(const DataArgs& a, std::ostream& out) {
  if (!fs::exists(a.checkpoint)) throw IoError("checkpoint '" + a.checkpoint + "' does not exist");
  const Model model = load_checkpoint(a.checkpoint);
  const Dataset data = load_eval_data(a);
  check_compatible(model.config(), data);
  const Predictions p = predict(model, data, a.batch_size, a.workers);

  std::ostringstream csv;
  csv << "id";
  for (const std::string& name : data.class_names) csv << ",label_" << name;
  const std::size_t dim = model.config().d_model;
  for (std::size_t f = 0; f < dim; ++f) csv << ",feat_" << f;
  csv << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    csv << data.ids[i];
    for (std::size_t k = 0; k < data.n_classes(); ++k) csv << ',' << data.labels[i * data.n_classes() + k];
    for (std::size_t f = 0; f < dim; ++f) csv << ',' << text::format_number(p.features[i * dim + f]);
    csv << '\n';
  }
  write_text(a.output, csv.str());
  out << "wrote " << data.size() << " embeddings of width " << dim << " to " << a.output << '\n';
  return 0;
}

int cmd_verify(const std::string& filter, const std::string& output, const std::string& fault, bool list,
               std::ostream& out) {
  if (list) {
    for (const verify::CheckInfo& c : verify::list_checks()) out << c.name << "  " << c.description << '\n';
    return 0;
  }
  runtime::ScopedFault scoped(fault.empty() ? runtime::Fault::none : runtime::parse_fault(fault));
  const std::vector<verify::CheckResult> results = verify::run_checks(filter, &out);
  if (results.empty()) throw ConfigError("filter '" + filter + "' matches no check");
  if (!output.empty()) write_text(output, canonical_json(verify::to_json(results)));
  std::size_t failed = 0;
  for (const verify::CheckResult& r : results) failed += !r.passed;
  if (failed == 0) {
    out << "all " << results.size() << " checks passed\n";
    return 0;
  }
  out << failed << " of " << results.size() << " checks failed:";
  for (const verify::CheckResult& r : results) {
    if (!r.passed) out << ' ' << r.name;
  }
  out << '\n';
  return 1;
}

int cmd_bench(const ScanBenchOptions& o, const std::string& output, std::ostream& out) {
  const std::vector<ScanBenchRow> rows = run_scan_bench(o);
  write_bench_csv(output, rows);
  std::vector<double> lengths, scan, quad;
  out << "L        scan_ms     quad_ms     bytes_recompute  bytes_cached\n";
  for (const ScanBenchRow& r : rows) {
    out << r.length << "  " << text::format_number(r.scan_ms) << "  " << text::format_number(r.quad_ms) << "  "
        << r.scan_peak_bytes_recompute << "  " << r.scan_peak_bytes_cached << '\n';
    lengths.push_back(static_cast<double>(r.length));
    scan.push_back(r.scan_ms);
    quad.push_back(r.quad_ms);
  }
  if (rows.size() >= 2) {
    out << "log-log slope: scan " << text::format_number(loglog_slope(lengths, scan));
    if (o.run_quadratic) out << ", pairwise baseline " << text::format_number(loglog_slope(lengths, quad));
    out << '\n';
  }
  out << "wrote " << output << '\n';
  return 0;
}

int cmd_info(const std::string& checkpoint, std::ostream& out) {
  if (!checkpoint.empty()) {
    const Model model = load_checkpoint(checkpoint);
    nlohmann::json j;
    j["model"] = to_json(model.config());
    j["parameters"] = model.parameter_count();
    j["sequence_length"] = model.sequence_length();
    const ModelCost cost = count_params_flops(model, Shape{1, model.config().n_leads, model.config().input_length});
    j["flops_per_sample"] = cost.flops;
    out << canonical_json(j);
    return 0;
  }
  out << "ecgmamba " << ECGMAMBA_VERSION << '\n'
      << "checked mode: " << (runtime::checked_mode() ? "on" : "off") << " (ECGMAMBA_CHECKED)\n"
      << "default run config:\n"
      << canonical_json(to_json(RunConfig{}));
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bidirectional selective state-space models for multi-label ECG classification", "ecgmamba"};
  app.require_subcommand(1);
  app.set_version_flag("--version", ECGMAMBA_VERSION);
  bool checked = false;
  app.add_flag("--checked", checked, "Assert finite values after every op (same as ECGMAMBA_CHECKED=1)");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoint, history and metrics");
  train_cmd->add_option("--config", train.config, "Run config JSON");
  train_cmd->add_option("--manifest", train.manifest, "Override data.manifest");
  train_cmd->add_option("--out", train.output, "Override output_dir");
  train_cmd->add_option("--layers", train.layers, "Number of Mamba layers");
  train_cmd->add_option("--epochs", train.epochs);
  train_cmd->add_option("--seed", train.seed);
  train_cmd->add_option("--workers", train.workers, "Data-parallel threads (1 is bit-reproducible)");
  train_cmd->add_option("--batch-size", train.batch_size);
  train_cmd->add_option("--micro-batch", train.micro_batch);
  train_cmd->add_option("--lr", train.lr, "Peak learning rate");
  train_cmd->add_flag("--no-encoder", train.no_encoder, "Replace the conv encoder by a per-step lead projection");
  train_cmd->add_flag("--no-ln", train.no_ln, "Drop layer normalisation");
  train_cmd->add_flag("--no-ffn", train.no_ffn, "Drop the feed-forward sublayer");

  DataArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  eval_cmd->add_option("--checkpoint", eval.checkpoint)->required();
  eval_cmd->add_option("--config", eval.config, "Run config JSON for the data section");
  eval_cmd->add_option("--manifest", eval.manifest);
  eval_cmd->add_option("--split", eval.split, "train, val, test or all")->capture_default_str();
  eval_cmd->add_option("--out", eval.output, "Also write metrics JSON here");
  eval_cmd->add_option("--batch-size", eval.batch_size)->capture_default_str();
  eval_cmd->add_option("--workers", eval.workers)->capture_default_str();

  DataArgs exp;
  exp.split = "all";
  exp.output = "embeddings.csv";
  auto* export_cmd = app.add_subcommand("export-embeddings", "Write pooled features per record as CSV");
  export_cmd->add_option("--checkpoint", exp.checkpoint)->required();
  export_cmd->add_option("--config", exp.config);
  export_cmd->add_option("--manifest", exp.manifest);
  export_cmd->add_option("--split", exp.split)->capture_default_str();
  export_cmd->add_option("--out", exp.output)->capture_default_str();
  export_cmd->add_option("--batch-size", exp.batch_size)->capture_default_str();
  export_cmd->add_option("--workers", exp.workers)->capture_default_str();

  std::string filter, verify_out = "verify.json", fault;
  bool list = false;
  auto* verify_cmd = app.add_subcommand("verify", "Run the numerical property checks");
  verify_cmd->add_option("--filter", filter, "Comma-separated check names or prefixes");
  verify_cmd->add_option("--out", verify_out)->capture_default_str();
  verify_cmd->add_flag("--list", list, "List the checks and exit");
  verify_cmd->add_option("--inject-fault", fault)->group("");

  ScanBenchOptions bench;
  std::string bench_out = "bench.csv";
  bool no_quadratic = false;
  auto* bench_cmd = app.add_subcommand("bench", "Time the scan against the quadratic baseline");
  bench_cmd->add_option("--lengths", bench.lengths)->delimiter(',')->capture_default_str();
  bench_cmd->add_option("--repeats", bench.repeats)->capture_default_str();
  bench_cmd->add_option("--batch", bench.batch)->capture_default_str();
  bench_cmd->add_option("--channels", bench.channels)->capture_default_str();
  bench_cmd->add_option("--state", bench.state)->capture_default_str();
  bench_cmd->add_option("--seed", bench.seed)->capture_default_str();
  bench_cmd->add_flag("--no-quadratic", no_quadratic);
  bench_cmd->add_option("--out", bench_out)->capture_default_str();

  SynthOptions synth;
  std::string synth_dir = "synth";
  std::size_t synth_folds = 10;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic labelled dataset");
  synth_cmd->add_option("--out", synth_dir)->capture_default_str();
  synth_cmd->add_option("--records", synth.n_records)->capture_default_str();
  synth_cmd->add_option("--classes", synth.n_classes)->capture_default_str();
  synth_cmd->add_option("--leads", synth.n_leads)->capture_default_str();
  synth_cmd->add_option("--samples", synth.samples)->capture_default_str();
  synth_cmd->add_option("--rate", synth.sample_rate_hz)->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed)->capture_default_str();
  synth_cmd->add_option("--snr", synth.snr)->capture_default_str();
  synth_cmd->add_option("--cooccurrence", synth.cooccurrence)->capture_default_str();
  synth_cmd->add_option("--folds", synth_folds)->capture_default_str();

  std::string info_checkpoint;
  auto* info_cmd = app.add_subcommand("info", "Show version and defaults, or summarise a checkpoint");
  info_cmd->add_option("--checkpoint", info_checkpoint);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    std::optional<runtime::ScopedCheckedMode> scoped_checked;
    if (checked) scoped_checked.emplace(true);
    if (*train_cmd) return cmd_train(train, out, err);
    if (*eval_cmd) return cmd_eval(eval, out);
    if (*export_cmd) return cmd_export(exp, out);
    if (*verify_cmd) return cmd_verify(filter, verify_out, fault, list, out);
    if (*bench_cmd) {
      bench.run_quadratic = !no_quadratic;
      return cmd_bench(bench, bench_out, out);
    }
    if (*synth_cmd) {
      const fs::path manifest = write_synth_dataset(synth_dir, synth, synth_folds);
      out << "wrote " << synth.n_records << " records and " << manifest.string() << '\n';
      return 0;
    }
    if (*info_cmd) return cmd_info(info_checkpoint, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace ecgmamba::cli
