#include "canopy/cfr.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "canopy/error.hpp"

namespace canopy::cfr {
namespace {

template <typename U>
void put_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> buf{};
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(buf.data(), buf.size());
}

template <typename U>
U get_le(std::istream& in) {
  std::array<unsigned char, sizeof(U)> buf{};
  in.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (!in) throw ValidationError("CFR1: truncated stream");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write(std::ostream& out, const Raster& r) {
  r.validate("CFR1 write");
  out.write("CFR1", 4);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.width));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.height));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.bands));
  put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(r.pixel_size_m));
  put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(r.origin_lat));
  put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(r.origin_lon));
  for (float v : r.data) {
    const float disk = is_nodata(v) ? kDiskNoData : v;
    put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(disk));
  }
  if (!out) throw ValidationError("CFR1: write failed");
}

Raster read(std::istream& in, GridKind grid) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "CFR1", 4) != 0) throw ValidationError("CFR1: bad magic");
  Raster r;
  r.width = static_cast<int>(get_le<std::uint32_t>(in));
  r.height = static_cast<int>(get_le<std::uint32_t>(in));
  r.bands = static_cast<int>(get_le<std::uint32_t>(in));
  r.pixel_size_m = std::bit_cast<double>(get_le<std::uint64_t>(in));
  r.origin_lat = std::bit_cast<double>(get_le<std::uint64_t>(in));
  r.origin_lon = std::bit_cast<double>(get_le<std::uint64_t>(in));
  r.grid = grid;
  if (r.width <= 0 || r.height <= 0 || r.bands <= 0 || r.bands > 64)
    throw ValidationError("CFR1: invalid dimensions");
  r.data.resize(r.pixel_count() * r.bands);
  for (float& v : r.data) {
    v = std::bit_cast<float>(get_le<std::uint32_t>(in));
    if (v == kDiskNoData) v = kNoData;
  }
  r.validate("CFR1 read");
  return r;
}

void write_file(const std::string& path, const Raster& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open " + path + " for writing");
  write(out, r);
}

Raster read_file(const std::string& path, GridKind grid) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  return read(in, grid);
}

}  // namespace canopy::cfr
