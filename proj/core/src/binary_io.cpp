#include "ecgmamba/binary_io.hpp"

#include <array>
#include <bit>
#include <istream>
#include <ostream>

#include "ecgmamba/error.hpp"

namespace ecgmamba::binary {

namespace {

template <typename U>
void put_le(std::ostream& out, U value) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFFu);
  out.write(bytes.data(), bytes.size());
  if (!out) throw IoError("write failed");
}

template <typename U>
U get_le(std::istream& in, std::string_view what) {
  std::array<unsigned char, sizeof(U)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw LengthError("truncated input while reading " + std::string(what));
  }
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace

void write_u8(std::ostream& out, std::uint8_t value) { put_le<std::uint8_t>(out, value); }
void write_u32(std::ostream& out, std::uint32_t value) { put_le<std::uint32_t>(out, value); }
void write_f32(std::ostream& out, float value) { put_le(out, std::bit_cast<std::uint32_t>(value)); }
void write_f64(std::ostream& out, double value) { put_le(out, std::bit_cast<std::uint64_t>(value)); }

void write_bytes(std::ostream& out, std::string_view bytes) {
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed");
}

std::uint8_t read_u8(std::istream& in, std::string_view what) { return get_le<std::uint8_t>(in, what); }
std::uint32_t read_u32(std::istream& in, std::string_view what) { return get_le<std::uint32_t>(in, what); }
float read_f32(std::istream& in, std::string_view what) {
  return std::bit_cast<float>(get_le<std::uint32_t>(in, what));
}
double read_f64(std::istream& in, std::string_view what) {
  return std::bit_cast<double>(get_le<std::uint64_t>(in, what));
}

std::string read_bytes(std::istream& in, std::size_t count, std::string_view what) {
  std::string bytes(count, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(count));
  if (in.gcount() != static_cast<std::streamsize>(count)) {
    throw LengthError("truncated input while reading " + std::string(what));
  }
  return bytes;
}

}  // namespace ecgmamba::binary
