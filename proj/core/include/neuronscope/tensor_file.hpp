#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace neuronscope {

// Container shared by weight bundles and importance tables:
//   u64 little-endian header length | JSON header | raw little-endian tensors
// The header carries caller metadata plus a "tensors" directory mapping
// name -> {dtype, shape, offset}; offsets are relative to the data section and
// tensors are laid out back to back in directory order.
struct TensorView {
  std::string name;
  std::string dtype;  // "f32" or "f64"
  std::vector<std::int64_t> shape;
  std::span<const std::byte> bytes;
};

struct TensorEntry {
  std::string name;
  std::string dtype;
  std::vector<std::int64_t> shape;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
};

struct TensorFile {
  nlohmann::ordered_json header;
  std::vector<TensorEntry> entries;
  std::vector<std::byte> data;

  const TensorEntry* find(const std::string& name) const;

  // Copies a tensor out as host floats/doubles; dtype must match.
  std::vector<float> read_f32(const TensorEntry& e) const;
  std::vector<double> read_f64(const TensorEntry& e) const;
};

std::size_t dtype_size(const std::string& dtype);

void write_tensor_file(const std::filesystem::path& path, nlohmann::ordered_json header,
                       std::span<const TensorView> tensors);

// Throws BundleError: io, malformed_header (bad length/JSON/directory),
// shape_mismatch (declared shape disagrees with directory layout) or
// truncated (data section shorter than the directory requires).
TensorFile read_tensor_file(const std::filesystem::path& path);

}  // namespace neuronscope
