#pragma once

#include <iosfwd>
#include <map>
#include <string>

#include "canopy/nn/tensor.hpp"

namespace canopy::nn {

// Named-tensor archive: u32 count, then per tensor u32 name length, UTF-8
// name, u32 rank, u32 dims, little-endian f32 values. Entries are written in
// lexicographic name order.
void write_archive(std::ostream& out, const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> read_archive(std::istream& in);

void save_archive(const std::string& path, const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> load_archive(const std::string& path);

// Copies archived values into existing tensors of the same names and shapes.
// Throws ValidationError on a missing name or shape mismatch.
void assign_from(std::map<std::string, Tensor>& dst, const std::map<std::string, Tensor>& src);

}  // namespace canopy::nn
