#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "ecgmamba/binary_io.hpp"
#include "ecgmamba/error.hpp"
#include "ecgmamba/serialize.hpp"
#include "ecgmamba/tensor.hpp"
#include "oracles.hpp"

using namespace ecgmamba;

TEST(Tensor, ShapeAndIndexing) {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.at({1, 2}), 6.0);
  EXPECT_EQ(to_string(t.shape()), "(2, 3)");
  EXPECT_THROW(t.at({2, 0}), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), DimensionError);
}

TEST(Tensor, UndefinedAndScalar) {
  Tensor none;
  EXPECT_FALSE(none.defined());
  EXPECT_DOUBLE_EQ(Tensor::scalar(4.5).item(), 4.5);
  EXPECT_THROW(Tensor({2}, 1.0).item(), ContractError);
}

TEST(Tensor, F32StorageRounds) {
  Tensor t({1}, {0.1});
  t.set_dtype(DType::f32);
  EXPECT_EQ(t[0], static_cast<double>(0.1f));
  EXPECT_NE(t[0], 0.1);
  EXPECT_EQ(parse_dtype("f32"), DType::f32);
  EXPECT_THROW(parse_dtype("f16"), ConfigError);
}

TEST(Tensor, ReshapeKeepsValues) {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor r = t.reshaped({3, 2});
  EXPECT_EQ(r.at({2, 1}), 6.0);
  EXPECT_THROW(t.reshaped({4, 2}), DimensionError);
}

TEST(Tensor, GradientSlot) {
  Tensor t({3});
  EXPECT_FALSE(t.has_grad());
  t.ensure_grad()[1] = 2.0;
  EXPECT_TRUE(t.has_grad());
  t.zero_grad();
  EXPECT_EQ(t.grad()[1], 0.0);
}

TEST(Tensor, AllFinite) {
  Tensor t({2}, {1.0, NAN});
  EXPECT_FALSE(t.all_finite());
}

TEST(Serialize, RoundTripBitExact) {
  for (DType dtype : {DType::f64, DType::f32}) {
    Tensor t = oracle::random_normal({2, 3, 4}, 1).as(dtype);
    std::stringstream ss;
    write_tensor(ss, t);
    Tensor back = read_tensor(ss);
    EXPECT_TRUE(identical(t, back));
    EXPECT_EQ(back.dtype(), dtype);
  }
}

TEST(Serialize, HandBuiltBytes) {
  std::string bytes = "TSR1";
  bytes += '\x01';  // f32
  bytes += '\x01';  // rank
  bytes += std::string("\x02\x00\x00\x00", 4);
  bytes += std::string("\x00\x00\x80\x3f", 4);  // 1.0f
  bytes += std::string("\x00\x00\x00\xc0", 4);  // -2.0f
  std::istringstream in(bytes);
  Tensor t = read_tensor(in);
  EXPECT_EQ(t.shape(), Shape({2}));
  EXPECT_EQ(t[0], 1.0);
  EXPECT_EQ(t[1], -2.0);
}

TEST(Serialize, BadMagicAndTruncation) {
  std::istringstream bad("XXXX\x00\x01");
  EXPECT_THROW(read_tensor(bad), FormatError);

  std::stringstream ss;
  write_tensor(ss, Tensor({4}, 1.0));
  std::string cut = ss.str();
  cut.resize(cut.size() - 3);
  std::istringstream short_in(cut);
  EXPECT_THROW(read_tensor(short_in), LengthError);
}

TEST(BinaryIo, LittleEndian) {
  std::ostringstream out;
  binary::write_u32(out, 0x01020304u);
  EXPECT_EQ(out.str(), std::string("\x04\x03\x02\x01", 4));
  std::istringstream in(out.str());
  EXPECT_EQ(binary::read_u32(in, "x"), 0x01020304u);
  EXPECT_THROW(binary::read_u8(in, "y"), LengthError);
}
