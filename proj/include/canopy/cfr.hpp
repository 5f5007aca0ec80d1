#pragma once

#include <iosfwd>
#include <string>

#include "canopy/raster.hpp"

namespace canopy::cfr {

// "CFR1" container: magic, u32 width, u32 height, u32 bands, f64 pixel size,
// f64 origin lat, f64 origin lon, then little-endian f32 samples
// band-interleaved by pixel. NaN nodata is written as -9999.
inline constexpr std::size_t kHeaderBytes = 40;

void write(std::ostream& out, const Raster& r);
Raster read(std::istream& in, GridKind grid = GridKind::local_tangent);

void write_file(const std::string& path, const Raster& r);
Raster read_file(const std::string& path, GridKind grid = GridKind::local_tangent);

}  // namespace canopy::cfr
