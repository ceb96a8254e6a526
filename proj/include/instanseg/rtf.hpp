#pragma once

// Raw Tensor File: "RTF1", u8 dtype (0 = f64, 1 = f32), u8 rank,
// rank x u64 extents, then the row-major payload. Everything little-endian.

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "instanseg/tensor.hpp"

namespace instanseg::rtf {

enum class DType : std::uint8_t { kFloat64 = 0, kFloat32 = 1 };

void write(std::ostream& os, const Tensor& t, DType dtype = DType::kFloat64);
Tensor read(std::istream& is);

void save(const std::filesystem::path& path, const Tensor& t, DType dtype = DType::kFloat64);
Tensor load(const std::filesystem::path& path);

}  // namespace instanseg::rtf
