#pragma once

// Little-endian primitives shared by the table and checkpoint formats.

#include <cstdint>
#include <iosfwd>
#include <string>

#include "memoryformer/tensor.h"

namespace mf::io {

void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f32(std::ostream& os, float v);
void write_f64(std::ostream& os, double v);
void write_magic(std::ostream& os, const char (&magic)[5]);

std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
float read_f32(std::istream& is);
double read_f64(std::istream& is);
// Throws std::runtime_error if the next four bytes differ.
void expect_magic(std::istream& is, const char (&magic)[5]);

// "MFTN" | u32 rank | u32 dims[rank] | f32 data
void write_tensor(std::ostream& os, const Tensor<float>& t);
Tensor<float> read_tensor(std::istream& is);

}  // namespace mf::io
