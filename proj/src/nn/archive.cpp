#include "canopy/nn/archive.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>

#include "canopy/error.hpp"

namespace canopy::nn {
namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw ValidationError("archive: truncated stream");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_archive(std::ostream& out, const std::map<std::string, Tensor>& tensors) {
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  if (!out) throw ValidationError("archive: write failed");
}

std::map<std::string, Tensor> read_archive(std::istream& in) {
  std::map<std::string, Tensor> out;
  const std::uint32_t count = get_u32(in);
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t len = get_u32(in);
    if (len > 4096) throw ValidationError("archive: implausible name length");
    std::string name(len, '\0');
    in.read(name.data(), len);
    const std::uint32_t rank = get_u32(in);
    if (rank > 8) throw ValidationError("archive: implausible rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = get_u32(in);
    std::vector<double> values(numel(shape));
    for (double& v : values) v = std::bit_cast<float>(get_u32(in));
    out.emplace(name, Tensor::from(std::move(shape), std::move(values)));
  }
  return out;
}

void save_archive(const std::string& path, const std::map<std::string, Tensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open " + path + " for writing");
  write_archive(out, tensors);
}

std::map<std::string, Tensor> load_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  return read_archive(in);
}

void assign_from(std::map<std::string, Tensor>& dst, const std::map<std::string, Tensor>& src) {
  for (auto& [name, t] : dst) {
    auto it = src.find(name);
    if (it == src.end()) throw ValidationError("checkpoint is missing " + name);
    if (it->second.shape() != t.shape())
      throw ValidationError("checkpoint shape mismatch for " + name + ": " +
                            shape_str(it->second.shape()) + " vs " + shape_str(t.shape()));
    std::copy(it->second.data().begin(), it->second.data().end(), t.data().begin());
  }
}

}  // namespace canopy::nn
