#include "ecgmamba/checkpoint.hpp"

#include <fstream>
#include <map>
#include <string_view>

#include "ecgmamba/binary_io.hpp"
#include "ecgmamba/error.hpp"
#include "ecgmamba/serialize.hpp"

namespace ecgmamba {

namespace {

constexpr std::string_view kMagic = "ECGM0001";

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  const std::string manifest = canonical_json(nlohmann::json{{"model", to_json(model.config())}});
  binary::write_bytes(out, kMagic);
  binary::write_u32(out, static_cast<std::uint32_t>(manifest.size()));
  binary::write_bytes(out, manifest);

  std::vector<std::pair<std::string, const Tensor*>> tensors;
  model.visit_parameters([&](const std::string& name, const Tensor& t) { tensors.emplace_back(name, &t); });
  const_cast<Model&>(model).visit_buffers([&](const std::string& name, Tensor& t) { tensors.emplace_back(name, &t); });

  binary::write_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    binary::write_u32(out, static_cast<std::uint32_t>(name.size()));
    binary::write_bytes(out, name);
    write_tensor(out, *tensor);
  }
  if (!out) throw IoError("failed while writing checkpoint '" + path.string() + "'");
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  if (binary::read_bytes(in, kMagic.size(), "checkpoint magic") != kMagic) throw FormatError("not an ECGM0001 checkpoint: " + path.string());

  const std::uint32_t manifest_len = binary::read_u32(in, "manifest length");
  const std::string manifest = binary::read_bytes(in, manifest_len, "manifest");
  ModelConfig config;
  try {
    const auto j = nlohmann::json::parse(manifest);
    if (!j.contains("model")) throw FormatError("checkpoint manifest has no model section");
    config = model_config_from_json(j.at("model"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }

  std::map<std::string, Tensor> stored;
  const std::uint32_t count = binary::read_u32(in, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = binary::read_u32(in, "tensor name length");
    std::string name = binary::read_bytes(in, name_len, "tensor name");
    if (!stored.emplace(name, read_tensor(in)).second) throw FormatError("duplicate tensor '" + name + "' in checkpoint");
  }

  Model model = Model::build(config, 0);
  std::size_t restored = 0;
  auto restore = [&](const std::string& name, Tensor& t) {
    auto it = stored.find(name);
    if (it == stored.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw FormatError("tensor '" + name + "' has shape " + to_string(it->second.shape()) + ", expected " +
                        to_string(t.shape()));
    }
    t = it->second;
    ++restored;
  };
  model.visit_parameters(restore);
  model.visit_buffers(restore);
  if (restored != stored.size()) throw FormatError("checkpoint holds tensors the model does not use");
  return model;
}

}  // namespace ecgmamba
