#pragma once

#include <filesystem>

#include "ecgmamba/model.hpp"

namespace ecgmamba {

// Checkpoint container, little-endian:
//   "ECGM0001" | u32 manifest length | canonical JSON manifest (model config)
//   | u32 tensor count | per tensor: u32 name length, name bytes, TSR1 record
//
// Tensors are the learnable parameters followed by the batch-norm running
// statistics, in Model::visit_parameters / visit_buffers order.
void save_checkpoint(const std::filesystem::path& path, const Model& model);

/// Rebuilds the model from the embedded config and restores every tensor.
/// Throws FormatError on a bad magic, a missing or surplus tensor, or a shape
/// that disagrees with the config.
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace ecgmamba
