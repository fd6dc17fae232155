#pragma once

#include <filesystem>
#include <iosfwd>

#include "stmixer/tensor.hpp"

namespace stmx {

// STMX1 layout: magic "STMX", u8 rank, rank x u64 little-endian extents, then
// row-major f32 little-endian values. Values are narrowed to 32 bits on write.
inline constexpr char kStmxMagic[4] = {'S', 'T', 'M', 'X'};

void write_stmx(std::ostream& out, const Tensor& t);
Tensor read_stmx(std::istream& in);

void save_stmx(const std::filesystem::path& path, const Tensor& t);
Tensor load_stmx(const std::filesystem::path& path);

}  // namespace stmx
