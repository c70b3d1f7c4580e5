#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ulp/tensor.hpp"

namespace ulp {

// Element type used on disk. Everything is widened to double in memory.
enum class Dtype { F4, F8, I8, U1 };

struct NamedTensor {
  std::string name;
  Tensor tensor;
  Dtype dtype = Dtype::F8;
};

// Single-array NumPy .npy file (format version 1.0, little endian).
void write_npy(const std::filesystem::path& path, const Tensor& t, Dtype dtype);
Tensor read_npy(const std::filesystem::path& path);

// Multi-array .npz archive: a zip container of .npy entries. Entries are
// written uncompressed; both stored and deflated entries can be read back.
void write_npz(const std::filesystem::path& path, const std::vector<NamedTensor>& arrays);
std::map<std::string, Tensor> read_npz(const std::filesystem::path& path);

}  // namespace ulp
