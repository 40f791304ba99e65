#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "emkd/tensor.hpp"

namespace emkd::io {

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

// Binary tensor record: magic "EMKD", u32 LE version = 1, u8 dtype
// (0 = f32, 1 = f64), u8 rank, rank x u32 LE extents, then the payload in
// row-major little-endian order. f32 is a storage option only; tensors are
// always f64 in memory.
void write_tensor_record(std::ostream& out, const Tensor& t, Dtype dtype = Dtype::f64);
// base_offset is added to reported offsets so records embedded in container
// files name their absolute position.
Tensor read_tensor_record(std::istream& in, std::uint64_t base_offset = 0);

void write_u16(std::ostream& out, std::uint16_t v);
void write_u32(std::ostream& out, std::uint32_t v);
std::uint16_t read_u16(std::istream& in, std::uint64_t offset, const char* what);
std::uint32_t read_u32(std::istream& in, std::uint64_t offset, const char* what);
void read_exact(std::istream& in, char* dst, std::size_t n, std::uint64_t offset, const char* what);

}  // namespace emkd::io
