#include "memoryformer/binary_io.h"

#include <array>
#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace mf::io {

namespace {

template <std::size_t N>
void put_le(std::ostream& os, std::uint64_t v) {
  std::array<char, N> buf{};
  for (std::size_t i = 0; i < N; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(buf.data(), N);
  if (!os) throw std::runtime_error("binary write failed");
}

template <std::size_t N>
std::uint64_t get_le(std::istream& is) {
  std::array<unsigned char, N> buf{};
  is.read(reinterpret_cast<char*>(buf.data()), N);
  if (!is) throw std::runtime_error("unexpected end of binary stream");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < N; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { put_le<4>(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { put_le<8>(os, v); }
void write_f32(std::ostream& os, float v) { put_le<4>(os, std::bit_cast<std::uint32_t>(v)); }
void write_f64(std::ostream& os, double v) { put_le<8>(os, std::bit_cast<std::uint64_t>(v)); }

void write_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

std::uint32_t read_u32(std::istream& is) { return static_cast<std::uint32_t>(get_le<4>(is)); }
std::uint64_t read_u64(std::istream& is) { return get_le<8>(is); }
float read_f32(std::istream& is) { return std::bit_cast<float>(static_cast<std::uint32_t>(get_le<4>(is))); }
double read_f64(std::istream& is) { return std::bit_cast<double>(get_le<8>(is)); }

void expect_magic(std::istream& is, const char (&magic)[5]) {
  char buf[4] = {};
  is.read(buf, 4);
  if (!is || std::memcmp(buf, magic, 4) != 0) {
    throw std::runtime_error(std::string("bad magic, expected ") + magic);
  }
}

void write_tensor(std::ostream& os, const Tensor<float>& t) {
  write_magic(os, "MFTN");
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) write_u32(os, static_cast<std::uint32_t>(d));
  for (float v : t.values()) write_f32(os, v);
}

Tensor<float> read_tensor(std::istream& is) {
  expect_magic(is, "MFTN");
  const std::uint32_t rank = read_u32(is);
  if (rank > 8) throw std::runtime_error("tensor blob: implausible rank");
  Shape shape(rank);
  for (auto& d : shape) d = read_u32(is);
  Tensor<float> t(shape);
  for (float& v : t.values()) v = read_f32(is);
  return t;
}

}  // namespace mf::io
