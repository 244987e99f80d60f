#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "ecgmamba/data.hpp"
#include "ecgmamba/error.hpp"
#include "ecgmamba/random.hpp"

namespace ecgmamba {

std::vector<std::string> synth_class_names(std::size_t n_classes) {
  std::vector<std::string> names;
  for (std::size_t k = 0; k < n_classes; ++k) names.push_back("C" + std::to_string(k));
  return names;
}

std::vector<EcgRecord> synth_records(const SynthOptions& o) {
  if (o.n_classes == 0 || o.n_leads == 0 || o.samples == 0 || o.sample_rate_hz == 0) {
    throw ConfigError("synth: classes, leads, samples and sample rate must be positive");
  }
  if (o.n_records < o.n_classes) throw ConfigError("synth: need at least one record per class");
  if (o.cooccurrence < 0.0 || o.cooccurrence > 1.0) throw ConfigError("synth: cooccurrence must lie in [0, 1]");

  Rng rng(o.seed);
  std::vector<std::size_t> primary(o.n_records);
  for (std::size_t i = 0; i < o.n_records; ++i) primary[i] = i % o.n_classes;
  std::shuffle(primary.begin(), primary.end(), rng.engine());

  const double rate = static_cast<double>(o.sample_rate_hz);
  const double seconds = static_cast<double>(o.samples) / rate;
  const double nyquist = rate / 2.0;
  constexpr double kAr = 0.8;
  const double innovation = std::sqrt(1.0 - kAr * kAr);

  std::vector<EcgRecord> records;
  records.reserve(o.n_records);
  const int id_width = static_cast<int>(std::to_string(o.n_records).size());
  for (std::size_t i = 0; i < o.n_records; ++i) {
    EcgRecord rec;
    std::ostringstream id;
    id << "synth_" << std::setw(id_width) << std::setfill('0') << i;
    rec.id = id.str();
    rec.sample_rate_hz = o.sample_rate_hz;
    rec.labels.assign(o.n_classes, 0);
    rec.labels[primary[i]] = 1;
    for (std::size_t k = 0; k < o.n_classes; ++k) {
      if (k != primary[i] && rng.bernoulli(o.cooccurrence)) rec.labels[k] = 1;
    }
    rec.signal = Tensor({o.n_leads, o.samples});
    for (std::size_t c = 0; c < o.n_leads; ++c) {
      double* x = rec.signal.data() + c * o.samples;
      double state = rng.normal();
      for (std::size_t t = 0; t < o.samples; ++t) {
        state = kAr * state + innovation * rng.normal();
        x[t] = state;
      }
      const double gain = 0.6 + 0.4 * static_cast<double>((c * 7) % 12) / 11.0;
      for (std::size_t k = 0; k < o.n_classes; ++k) {
        if (!rec.labels[k]) continue;
        // Class signature: a tone and a transient whose positions depend on k only.
        const double freq = std::fmod(1.0 + 2.5 * static_cast<double>(k), std::max(1.0, nyquist - 1.0));
        const double phase = 0.3 * static_cast<double>(c);
        const double centre = (static_cast<double>(k) + 1.0) / (static_cast<double>(o.n_classes) + 1.0) * seconds;
        const double width = 0.02 * seconds;
        for (std::size_t t = 0; t < o.samples; ++t) {
          const double time = static_cast<double>(t) / rate;
          const double z = (time - centre) / width;
          x[t] += gain * o.snr *
                  (std::sin(2.0 * std::numbers::pi * freq * time + phase) + 2.0 * std::exp(-0.5 * z * z));
        }
      }
    }
    rec.signal.set_dtype(DType::f32);
    records.push_back(std::move(rec));
  }
  return records;
}

std::filesystem::path write_synth_dataset(const std::filesystem::path& dir, const SynthOptions& options,
                                          std::size_t n_folds) {
  const auto records = synth_records(options);
  const auto classes = synth_class_names(options.n_classes);
  std::filesystem::create_directories(dir / "records");

  std::vector<std::vector<std::uint8_t>> labels;
  for (const EcgRecord& rec : records) labels.push_back(rec.labels);
  const SplitResult split = stratified_split(labels, n_folds, options.seed);

  Manifest manifest;
  manifest.has_split = true;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const EcgRecord& rec = records[i];
    const std::string rel = "records/" + rec.id + ".ecgb";
    save_record(dir / rel, rec);
    ManifestEntry e;
    e.id = rec.id;
    e.path = rel;
    for (std::size_t k = 0; k < classes.size(); ++k) {
      if (rec.labels[k]) e.labels.push_back(classes[k]);
    }
    e.split = split.folds[i];
    manifest.entries.push_back(std::move(e));
  }
  const auto manifest_path = dir / "manifest.csv";
  write_manifest(manifest_path, manifest);
  write_taxonomy(dir / "taxonomy.txt", classes);
  return manifest_path;
}

}  // namespace ecgmamba
