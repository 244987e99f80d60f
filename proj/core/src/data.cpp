#include "ecgmamba/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "ecgmamba/binary_io.hpp"
#include "ecgmamba/error.hpp"
#include "ecgmamba/random.hpp"
#include "ecgmamba/text.hpp"

namespace ecgmamba {

namespace {

constexpr std::string_view kRecordMagic = "ECGB";
constexpr std::uint32_t kRecordVersion = 1;

}  // namespace

// ---------------------------------------------------------------- ECGB

void write_record(std::ostream& out, const EcgRecord& rec) {
  if (rec.signal.rank() != 2) throw DimensionError("record signal must be [channels, samples], got " + to_string(rec.signal.shape()));
  binary::write_bytes(out, kRecordMagic);
  binary::write_u32(out, kRecordVersion);
  binary::write_u32(out, static_cast<std::uint32_t>(rec.signal.dim(0)));
  binary::write_u32(out, static_cast<std::uint32_t>(rec.signal.dim(1)));
  binary::write_u32(out, rec.sample_rate_hz);
  for (double v : rec.signal.values()) binary::write_f32(out, static_cast<float>(v));
}

EcgRecord read_record(std::istream& in) {
  const std::string magic = binary::read_bytes(in, 4, "record magic");
  if (magic != kRecordMagic) throw FormatError("bad record magic '" + magic + "' (expected ECGB)");
  const std::uint32_t version = binary::read_u32(in, "record version");
  if (version != kRecordVersion) throw FormatError("unsupported record version " + std::to_string(version));
  const std::uint32_t channels = binary::read_u32(in, "record channels");
  const std::uint32_t samples = binary::read_u32(in, "record samples");
  EcgRecord rec;
  rec.sample_rate_hz = binary::read_u32(in, "record sample rate");
  if (channels == 0 || samples == 0) throw FormatError("record has an empty signal");
  if (rec.sample_rate_hz == 0) throw FormatError("record sample rate must be positive");
  std::vector<double> values(static_cast<std::size_t>(channels) * samples);
  for (double& v : values) v = binary::read_f32(in, "record payload");
  rec.signal = Tensor({channels, samples}, std::move(values));
  rec.signal.set_dtype(DType::f32);
  return rec;
}

void save_record(const std::filesystem::path& path, const EcgRecord& rec) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write record '" + path.string() + "'");
  write_record(out, rec);
  if (!out) throw IoError("failed while writing record '" + path.string() + "'");
}

EcgRecord load_record(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open record '" + path.string() + "'");
  EcgRecord rec = read_record(in);
  rec.id = path.stem().string();
  return rec;
}

// ---------------------------------------------------------------- preprocessing

Tensor preprocess(const Tensor& signal, std::size_t sample_rate_hz, std::size_t target_hz, std::size_t target_seconds) {
  if (signal.rank() != 2) throw DimensionError("preprocess expects [channels, samples], got " + to_string(signal.shape()));
  if (target_hz == 0 || sample_rate_hz == 0) throw UnsupportedRateError("sample rates must be positive");
  if (sample_rate_hz < target_hz || sample_rate_hz % target_hz != 0) {
    throw UnsupportedRateError("cannot decimate " + std::to_string(sample_rate_hz) + " Hz to " +
                               std::to_string(target_hz) + " Hz by an integer factor");
  }
  const std::size_t factor = sample_rate_hz / target_hz;
  const std::size_t channels = signal.dim(0);
  const std::size_t samples = signal.dim(1);
  const std::size_t decimated = samples / factor;
  const std::size_t out_len = target_hz * target_seconds;
  const std::size_t keep = std::min(decimated, out_len);
  Tensor out({channels, out_len});
  for (std::size_t c = 0; c < channels; ++c) {
    const double* src = signal.data() + c * samples;
    for (std::size_t t = 0; t < keep; ++t) {
      double acc = 0.0;
      for (std::size_t j = 0; j < factor; ++j) acc += src[t * factor + j];
      out[c * out_len + t] = acc / static_cast<double>(factor);
    }
  }
  return out;
}

Tensor preprocess(const EcgRecord& rec, std::size_t target_hz, std::size_t target_seconds) {
  return preprocess(rec.signal, rec.sample_rate_hz, target_hz, target_seconds);
}

// ---------------------------------------------------------------- manifest

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  Manifest m;
  m.base_dir = path.parent_path();
  std::string line;
  if (!std::getline(in, line)) throw FormatError("manifest '" + path.string() + "' is empty");
  const auto header = text::split(text::trim(line), ',');
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[std::string(text::trim(header[i]))] = i;
  for (const char* required : {"id", "path", "labels"}) {
    if (!col.count(required)) throw FormatError("manifest header lacks a '" + std::string(required) + "' column");
  }
  const bool split_column = col.count("split") > 0;
  std::set<std::string> ids;
  std::size_t with_split = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    const auto fields = text::split(text::trim(line), ',');
    if (fields.size() != header.size()) {
      throw FormatError("manifest line " + std::to_string(line_no) + " has " + std::to_string(fields.size()) +
                        " fields, expected " + std::to_string(header.size()));
    }
    ManifestEntry e;
    e.id = std::string(text::trim(fields[col["id"]]));
    e.path = std::string(text::trim(fields[col["path"]]));
    if (e.id.empty()) throw FormatError("manifest line " + std::to_string(line_no) + " has an empty id");
    if (!ids.insert(e.id).second) throw FormatError("duplicate record id '" + e.id + "' in manifest");
    for (const std::string& label : text::split(fields[col["labels"]], ';')) {
      const auto name = text::trim(label);
      if (!name.empty()) e.labels.emplace_back(name);
    }
    if (split_column) {
      const auto value = text::trim(fields[col["split"]]);
      if (!value.empty()) {
        try {
          e.split = std::stoi(std::string(value));
        } catch (const std::exception&) {
          throw FormatError("manifest line " + std::to_string(line_no) + ": bad split '" + std::string(value) + "'");
        }
        if (e.split < 1) throw FormatError("manifest line " + std::to_string(line_no) + ": split must be >= 1");
        ++with_split;
      }
    }
    m.entries.push_back(std::move(e));
  }
  m.has_split = !m.entries.empty() && with_split == m.entries.size();
  return m;
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest '" + path.string() + "'");
  out << "id,path,labels,split\n";
  auto plain = [](const std::string& field, const char* forbidden) {
    if (field.find_first_of(forbidden) != std::string::npos) {
      throw FormatError("manifest field '" + field + "' contains a separator; quoting is not supported");
    }
  };
  for (const ManifestEntry& e : manifest.entries) {
    plain(e.id, ",\n");
    plain(e.path, ",\n");
    for (const std::string& label : e.labels) plain(label, ",;\n");
    out << e.id << ',' << e.path << ',' << text::join(e.labels, ";") << ',';
    if (e.split > 0) out << e.split;
    out << '\n';
  }
}

std::vector<std::string> read_taxonomy(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open taxonomy '" + path.string() + "'");
  std::vector<std::string> classes;
  std::set<std::string> seen;
  std::string line;
  while (std::getline(in, line)) {
    const auto name = text::trim(line);
    if (name.empty()) continue;
    if (!seen.emplace(name).second) throw FormatError("duplicate class '" + std::string(name) + "' in taxonomy");
    classes.emplace_back(name);
  }
  if (classes.empty()) throw FormatError("taxonomy '" + path.string() + "' lists no classes");
  return classes;
}

void write_taxonomy(const std::filesystem::path& path, const std::vector<std::string>& classes) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write taxonomy '" + path.string() + "'");
  for (const std::string& c : classes) out << c << '\n';
}

std::vector<std::vector<std::uint8_t>> encode_labels(const Manifest& manifest, const std::vector<std::string>& classes) {
  std::map<std::string, std::size_t> index;
  for (std::size_t k = 0; k < classes.size(); ++k) index[classes[k]] = k;
  std::vector<std::vector<std::uint8_t>> out;
  out.reserve(manifest.entries.size());
  for (const ManifestEntry& e : manifest.entries) {
    std::vector<std::uint8_t> hot(classes.size(), 0);
    for (const std::string& name : e.labels) {
      auto it = index.find(name);
      if (it == index.end()) throw FormatError("record '" + e.id + "' has label '" + name + "' outside the taxonomy");
      hot[it->second] = 1;
    }
    out.push_back(std::move(hot));
  }
  return out;
}

// ---------------------------------------------------------------- splitting

SplitResult stratified_split(const std::vector<std::vector<std::uint8_t>>& labels, std::size_t n_folds,
                             std::uint64_t seed) {
  if (n_folds == 0) throw ConfigError("stratified_split: n_folds must be >= 1");
  SplitResult result;
  const std::size_t n = labels.size();
  result.folds.assign(n, 0);
  if (n == 0) return result;
  const std::size_t n_classes = labels.front().size();
  for (const auto& row : labels) {
    if (row.size() != n_classes) throw DimensionError("stratified_split: label vectors differ in length");
  }

  Rng rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<std::size_t> fold_order(n_folds);
  std::iota(fold_order.begin(), fold_order.end(), 0);
  std::shuffle(fold_order.begin(), fold_order.end(), rng.engine());

  const double share = 1.0 / static_cast<double>(n_folds);
  std::vector<double> total_demand(n_folds, static_cast<double>(n) * share);
  std::vector<std::vector<double>> demand(n_classes, std::vector<double>(n_folds));
  std::vector<std::size_t> remaining(n_classes, 0);
  for (const auto& row : labels) {
    for (std::size_t k = 0; k < n_classes; ++k) remaining[k] += row[k];
  }
  for (std::size_t k = 0; k < n_classes; ++k) {
    std::fill(demand[k].begin(), demand[k].end(), static_cast<double>(remaining[k]) * share);
    if (remaining[k] > 0 && remaining[k] < n_folds) {
      result.warnings.push_back("class " + std::to_string(k) + " has " + std::to_string(remaining[k]) +
                                " positives for " + std::to_string(n_folds) + " folds; balance is best effort");
    }
  }

  auto assign = [&](std::size_t i, std::size_t fold) {
    result.folds[i] = static_cast<int>(fold + 1);
    total_demand[fold] -= 1.0;
    for (std::size_t k = 0; k < n_classes; ++k) {
      if (labels[i][k]) {
        demand[k][fold] -= 1.0;
        --remaining[k];
      }
    }
  };

  while (true) {
    std::size_t rarest = n_classes;
    for (std::size_t k = 0; k < n_classes; ++k) {
      if (remaining[k] > 0 && (rarest == n_classes || remaining[k] < remaining[rarest])) rarest = k;
    }
    if (rarest == n_classes) break;
    for (std::size_t i : order) {
      if (result.folds[i] != 0 || !labels[i][rarest]) continue;
      std::size_t best = fold_order[0];
      for (std::size_t f : fold_order) {
        const bool better = demand[rarest][f] > demand[rarest][best] ||
                            (demand[rarest][f] == demand[rarest][best] && total_demand[f] > total_demand[best]);
        if (better) best = f;
      }
      assign(i, best);
    }
  }
  for (std::size_t i : order) {
    if (result.folds[i] != 0) continue;
    std::size_t best = fold_order[0];
    for (std::size_t f : fold_order) {
      if (total_demand[f] > total_demand[best]) best = f;
    }
    assign(i, best);
  }
  return result;
}

SplitResult stratified_split(const Manifest& manifest, const std::vector<std::string>& classes, std::size_t n_folds,
                             std::uint64_t seed) {
  if (manifest.has_split) {
    SplitResult result;
    for (const ManifestEntry& e : manifest.entries) {
      if (static_cast<std::size_t>(e.split) > n_folds) {
        throw ConfigError("record '" + e.id + "' is in fold " + std::to_string(e.split) + " but only " +
                          std::to_string(n_folds) + " folds are configured");
      }
      result.folds.push_back(e.split);
    }
    return result;
  }
  return stratified_split(encode_labels(manifest, classes), n_folds, seed);
}

// ---------------------------------------------------------------- datasets

Batch Dataset::batch(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw ContractError("cannot build an empty batch");
  const std::size_t per_signal = signals.size() / size();
  const std::size_t per_label = n_classes();
  Shape signal_shape = signals.shape();
  signal_shape[0] = indices.size();
  Batch b;
  b.signals = Tensor(signal_shape);
  b.labels = Tensor({indices.size(), per_label});
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const std::size_t i = indices[j];
    if (i >= size()) throw ContractError("batch index " + std::to_string(i) + " out of range");
    b.ids.push_back(ids[i]);
    std::copy_n(signals.data() + i * per_signal, per_signal, b.signals.data() + j * per_signal);
    std::copy_n(labels.data() + i * per_label, per_label, b.labels.data() + j * per_label);
  }
  return b;
}

Batch Dataset::all() const {
  std::vector<std::size_t> idx(size());
  std::iota(idx.begin(), idx.end(), 0);
  return batch(idx);
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d;
  d.class_names = class_names;
  if (indices.empty()) return d;
  Batch b = batch(indices);
  d.ids = std::move(b.ids);
  d.signals = std::move(b.signals);
  d.labels = std::move(b.labels);
  return d;
}

Dataset make_dataset(const std::vector<EcgRecord>& records, const std::vector<std::string>& class_names,
                     std::size_t target_hz, std::size_t target_seconds) {
  Dataset d;
  d.class_names = class_names;
  if (records.empty()) return d;
  const std::size_t channels = records.front().signal.dim(0);
  const std::size_t length = target_hz * target_seconds;
  d.signals = Tensor({records.size(), channels, length});
  d.labels = Tensor({records.size(), class_names.size()});
  for (std::size_t i = 0; i < records.size(); ++i) {
    const EcgRecord& rec = records[i];
    if (rec.signal.dim(0) != channels) {
      throw FormatError("record '" + rec.id + "' has " + std::to_string(rec.signal.dim(0)) + " channels, expected " +
                        std::to_string(channels));
    }
    if (rec.labels.size() != class_names.size()) {
      throw DimensionError("record '" + rec.id + "' has " + std::to_string(rec.labels.size()) + " labels for " +
                           std::to_string(class_names.size()) + " classes");
    }
    const Tensor x = preprocess(rec, target_hz, target_seconds);
    std::copy_n(x.data(), x.size(), d.signals.data() + i * x.size());
    for (std::size_t k = 0; k < class_names.size(); ++k) d.labels[i * class_names.size() + k] = rec.labels[k];
    d.ids.push_back(rec.id);
  }
  return d;
}

DatasetSplits load_splits(const DataConfig& cfg) {
  cfg.validate();
  if (cfg.manifest.empty()) throw ConfigError("data.manifest is not set");
  const std::filesystem::path manifest_path(cfg.manifest);
  Manifest manifest = read_manifest(manifest_path);
  const std::filesystem::path taxonomy_path =
      cfg.taxonomy.empty() ? manifest_path.parent_path() / "taxonomy.txt" : std::filesystem::path(cfg.taxonomy);
  const std::vector<std::string> classes = read_taxonomy(taxonomy_path);

  DatasetSplits out;
  auto hot = encode_labels(manifest, classes);
  Manifest kept;
  kept.base_dir = manifest.base_dir;
  std::vector<std::vector<std::uint8_t>> kept_hot;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const bool labelled = std::any_of(hot[i].begin(), hot[i].end(), [](std::uint8_t v) { return v != 0; });
    if (!labelled) {
      if (!cfg.skip_unlabeled) throw FormatError("record '" + manifest.entries[i].id + "' has no labels");
      out.warnings.push_back("skipping unlabelled record '" + manifest.entries[i].id + "'");
      continue;
    }
    kept.entries.push_back(manifest.entries[i]);
    kept_hot.push_back(std::move(hot[i]));
  }
  kept.has_split = manifest.has_split;

  SplitResult split = stratified_split(kept, classes, cfg.n_folds, cfg.split_seed);
  out.warnings.insert(out.warnings.end(), split.warnings.begin(), split.warnings.end());

  std::vector<EcgRecord> train, val, test;
  auto contains = [](const std::vector<int>& folds, int f) { return std::find(folds.begin(), folds.end(), f) != folds.end(); };
  for (std::size_t i = 0; i < kept.entries.size(); ++i) {
    const int fold = split.folds[i];
    std::vector<EcgRecord>* target = contains(cfg.train_folds, fold) ? &train
                                     : contains(cfg.val_folds, fold) ? &val
                                     : contains(cfg.test_folds, fold) ? &test
                                                                      : nullptr;
    if (target == nullptr) continue;
    const ManifestEntry& e = kept.entries[i];
    std::filesystem::path p(e.path);
    if (p.is_relative()) p = kept.base_dir / p;
    EcgRecord rec = load_record(p);
    rec.id = e.id;
    rec.labels = kept_hot[i];
    target->push_back(std::move(rec));
  }
  out.train = make_dataset(train, classes, cfg.target_hz, cfg.target_seconds);
  out.val = make_dataset(val, classes, cfg.target_hz, cfg.target_seconds);
  out.test = make_dataset(test, classes, cfg.target_hz, cfg.target_seconds);
  return out;
}

}  // namespace ecgmamba
