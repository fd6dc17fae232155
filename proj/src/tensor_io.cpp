#include "stmixer/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace stmx {

namespace {

template <typename U>
void put_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& in) {
  std::array<unsigned char, sizeof(U)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw LoadError("STMX1: truncated stream");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void write_stmx(std::ostream& out, const Tensor& t) {
  if (t.rank() > 255) throw ShapeError("STMX1: rank exceeds 255");
  out.write(kStmxMagic, 4);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.dims()) put_le<std::uint64_t>(out, d);
  for (double v : t.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!out) throw LoadError("STMX1: write failed");
}

Tensor read_stmx(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kStmxMagic, 4) != 0) throw LoadError("STMX1: bad magic");
  const auto rank = get_le<std::uint8_t>(in);
  Shape dims(rank);
  for (auto& d : dims) d = static_cast<std::size_t>(get_le<std::uint64_t>(in));
  Tensor t(dims);
  for (auto& v : t.data()) v = static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(in)));
  return t;
}

void save_stmx(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot open for writing: " + path.string());
  write_stmx(out, t);
}

Tensor load_stmx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open: " + path.string());
  return read_stmx(in);
}

}  // namespace stmx
