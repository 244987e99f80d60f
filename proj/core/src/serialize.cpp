#include "ecgmamba/serialize.hpp"

#include <fstream>
#include <limits>

#include "ecgmamba/binary_io.hpp"
#include "ecgmamba/error.hpp"

namespace ecgmamba {

namespace {
constexpr std::string_view kTensorMagic = "TSR1";
}

void write_tensor(std::ostream& out, const Tensor& tensor) {
  if (!tensor.defined()) throw ContractError("cannot serialize an undefined tensor");
  if (tensor.rank() > std::numeric_limits<std::uint8_t>::max()) throw ContractError("tensor rank exceeds 255");
  binary::write_bytes(out, kTensorMagic);
  binary::write_u8(out, static_cast<std::uint8_t>(tensor.dtype()));
  binary::write_u8(out, static_cast<std::uint8_t>(tensor.rank()));
  for (std::size_t extent : tensor.shape()) {
    if (extent > std::numeric_limits<std::uint32_t>::max()) throw ContractError("tensor extent exceeds u32");
    binary::write_u32(out, static_cast<std::uint32_t>(extent));
  }
  if (tensor.dtype() == DType::f64) {
    for (double v : tensor.values()) binary::write_f64(out, v);
  } else {
    for (double v : tensor.values()) binary::write_f32(out, static_cast<float>(v));
  }
}

Tensor read_tensor(std::istream& in) {
  const std::string magic = binary::read_bytes(in, 4, "tensor magic");
  if (magic != kTensorMagic) throw FormatError("bad tensor magic '" + magic + "'");
  const std::uint8_t code = binary::read_u8(in, "tensor dtype");
  if (code > 1) throw FormatError("unknown tensor dtype code " + std::to_string(code));
  const std::uint8_t rank = binary::read_u8(in, "tensor rank");
  if (rank == 0) throw FormatError("tensor rank must be positive");
  Shape shape(rank);
  for (auto& extent : shape) {
    extent = binary::read_u32(in, "tensor extent");
    if (extent == 0) throw FormatError("tensor extent must be positive");
  }
  std::vector<double> values(numel(shape));
  const auto dtype = static_cast<DType>(code);
  if (dtype == DType::f64) {
    for (double& v : values) v = binary::read_f64(in, "tensor payload");
  } else {
    for (double& v : values) v = binary::read_f32(in, "tensor payload");
  }
  Tensor tensor(std::move(shape), std::move(values));
  tensor.set_dtype(dtype);
  return tensor;
}

void save_tensor(const std::filesystem::path& path, const Tensor& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(out, tensor);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_tensor(in);
}

}  // namespace ecgmamba
