#pragma once

#include <filesystem>
#include <iosfwd>

#include "ecgmamba/tensor.hpp"

namespace ecgmamba {

// TSR1 record, little-endian:
//   "TSR1" | u8 dtype (0 = f64, 1 = f32) | u8 rank | rank x u32 extents | row-major payload
void write_tensor(std::ostream& out, const Tensor& tensor);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace ecgmamba
