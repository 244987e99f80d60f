#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ecgmamba/config.hpp"
#include "ecgmamba/tensor.hpp"

namespace ecgmamba {

struct EcgRecord {
  std::string id;
  Tensor signal;  // [channels, samples], f32 storage
  std::uint32_t sample_rate_hz = 100;
  std::vector<std::uint8_t> labels;  // multi-hot; empty when unknown
};

// ECGB, little-endian:
//   "ECGB" | u32 version (1) | u32 channels | u32 samples | u32 sample_rate_hz
//   | channels * samples f32, channel-major
void write_record(std::ostream& out, const EcgRecord& rec);
EcgRecord read_record(std::istream& in);
void save_record(const std::filesystem::path& path, const EcgRecord& rec);
/// The id is the file stem; labels are left empty (they live in the manifest).
EcgRecord load_record(const std::filesystem::path& path);

/// Mean decimation to target_hz (integer factors only; a trailing partial
/// window is dropped), then crop to the first target_seconds or pad with
/// trailing zeros. Returns [channels, target_hz * target_seconds].
Tensor preprocess(const Tensor& signal, std::size_t sample_rate_hz, std::size_t target_hz = 100,
                  std::size_t target_seconds = 10);
Tensor preprocess(const EcgRecord& rec, std::size_t target_hz = 100, std::size_t target_seconds = 10);

struct ManifestEntry {
  std::string id;
  std::string path;  // relative paths resolve against the manifest's directory
  std::vector<std::string> labels;
  int split = 0;  // 0 when unassigned
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  bool has_split = false;
  std::filesystem::path base_dir;
};

/// CSV with a header naming at least id, path, labels (split is optional).
/// Fields may not contain commas; labels are separated by ';'.
Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

/// One class name per line; blank lines are ignored.
std::vector<std::string> read_taxonomy(const std::filesystem::path& path);
void write_taxonomy(const std::filesystem::path& path, const std::vector<std::string>& classes);

/// Multi-hot vectors of manifest entries; unknown class names raise FormatError.
std::vector<std::vector<std::uint8_t>> encode_labels(const Manifest& manifest, const std::vector<std::string>& classes);

struct SplitResult {
  std::vector<int> folds;  // 1..n_folds per record
  std::vector<std::string> warnings;
};

/// Iterative stratification: classes are handled rarest first; each record
/// goes to the fold with the largest remaining demand for that class (ties:
/// largest remaining total demand, then a seeded order).
SplitResult stratified_split(const std::vector<std::vector<std::uint8_t>>& labels, std::size_t n_folds,
                             std::uint64_t seed);
/// Uses the manifest's split column when every entry has one.
SplitResult stratified_split(const Manifest& manifest, const std::vector<std::string>& classes, std::size_t n_folds,
                             std::uint64_t seed);

struct Batch {
  std::vector<std::string> ids;
  Tensor signals;  // [B, channels, T]
  Tensor labels;   // [B, n_classes]
};

struct Dataset {
  std::vector<std::string> ids;
  Tensor signals;  // [N, channels, T]
  Tensor labels;   // [N, n_classes]
  std::vector<std::string> class_names;

  std::size_t size() const { return ids.size(); }
  std::size_t n_classes() const { return class_names.size(); }
  Batch batch(std::span<const std::size_t> indices) const;
  Batch all() const;
  Dataset subset(std::span<const std::size_t> indices) const;
};

/// Preprocesses and stacks records that already carry labels.
Dataset make_dataset(const std::vector<EcgRecord>& records, const std::vector<std::string>& class_names,
                     std::size_t target_hz = 100, std::size_t target_seconds = 10);

struct DatasetSplits {
  Dataset train;
  Dataset val;
  Dataset test;
  std::vector<std::string> warnings;
};

/// Loads the manifest, taxonomy and records named by `cfg`, assigns folds
/// and preprocesses every record.
DatasetSplits load_splits(const DataConfig& cfg);

// ---------------------------------------------------------------- synthesis

struct SynthOptions {
  std::size_t n_records = 128;
  std::size_t n_classes = 5;
  std::size_t n_leads = 12;
  std::size_t samples = 1000;
  std::uint32_t sample_rate_hz = 100;
  std::uint64_t seed = 0;
  /// Amplitude of each planted class signature relative to unit-variance noise.
  double snr = 2.0;
  /// Probability that each non-primary class is also present.
  double cooccurrence = 0.1;
};

std::vector<std::string> synth_class_names(std::size_t n_classes);

/// Every record has one primary class (balanced across classes) plus
/// co-occurring ones. Each class adds a class-specific sinusoid and a
/// Gaussian transient at a class-specific time on top of AR(1) noise.
std::vector<EcgRecord> synth_records(const SynthOptions& options);

/// Writes records/<id>.ecgb, manifest.csv (with stratified folds) and
/// taxonomy.txt under `dir`; returns the manifest path.
std::filesystem::path write_synth_dataset(const std::filesystem::path& dir, const SynthOptions& options,
                                          std::size_t n_folds = 10);

}  // namespace ecgmamba
