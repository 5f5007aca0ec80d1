#include "canopy/raster.hpp"

#include "canopy/error.hpp"

namespace canopy {

Raster::Raster(int w, int h, int nbands, double pixel_size, float fill)
    : width(w), height(h), bands(nbands), pixel_size_m(pixel_size) {
  if (w < 0 || h < 0 || nbands < 1) throw ValidationError("invalid raster dimensions");
  data.assign(static_cast<std::size_t>(w) * h * nbands, fill);
}

Raster Raster::band(int b) const {
  if (b < 0 || b >= bands) throw ValidationError("band index " + std::to_string(b) + " out of range");
  Raster out = *this;
  out.bands = 1;
  out.data.resize(pixel_count());
  for (std::size_t i = 0; i < pixel_count(); ++i) out.data[i] = data[i * bands + b];
  return out;
}

void Raster::validate(const std::string& what) const {
  if (width <= 0 || height <= 0 || bands <= 0)
    throw ValidationError(what + ": empty raster");
  if (data.size() != pixel_count() * static_cast<std::size_t>(bands))
    throw ValidationError(what + ": data length does not match width*height*bands");
  if (!(pixel_size_m > 0.0)) throw ValidationError(what + ": pixel size must be positive");
}

std::vector<double> valid_values(const Raster& r, int band) {
  std::vector<double> out;
  out.reserve(r.pixel_count());
  for (std::size_t i = 0; i < r.pixel_count(); ++i) {
    const float v = r.data[i * r.bands + band];
    if (!is_nodata(v)) out.push_back(v);
  }
  return out;
}

}  // namespace canopy
