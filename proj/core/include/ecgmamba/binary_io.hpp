#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>

// Little-endian primitive encoding shared by the TSR1, ECGB and checkpoint formats.
namespace ecgmamba::binary {

void write_u8(std::ostream& out, std::uint8_t value);
void write_u32(std::ostream& out, std::uint32_t value);
void write_f32(std::ostream& out, float value);
void write_f64(std::ostream& out, double value);
void write_bytes(std::ostream& out, std::string_view bytes);

// Readers throw LengthError when the stream ends early; `what` names the field.
std::uint8_t read_u8(std::istream& in, std::string_view what);
std::uint32_t read_u32(std::istream& in, std::string_view what);
float read_f32(std::istream& in, std::string_view what);
double read_f64(std::istream& in, std::string_view what);
std::string read_bytes(std::istream& in, std::size_t count, std::string_view what);

}  // namespace ecgmamba::binary
