#include "neuronscope/tensor_file.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "neuronscope/errors.hpp"

namespace neuronscope {

static_assert(std::endian::native == std::endian::little,
              "tensor files are written in host order; big-endian hosts need byte swapping");

namespace {

constexpr std::uint64_t kMaxHeaderBytes = 64ull << 20;

using Kind = BundleError::Kind;

std::uint64_t element_count(const std::vector<std::int64_t>& shape) {
  std::uint64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw BundleError(Kind::malformed_header, "negative dimension in tensor shape");
    n *= static_cast<std::uint64_t>(d);
  }
  return n;
}

}  // namespace

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  throw BundleError(Kind::malformed_header, "unsupported dtype '" + dtype + "'");
}

const TensorEntry* TensorFile::find(const std::string& name) const {
  auto it = std::find_if(entries.begin(), entries.end(),
                         [&](const TensorEntry& e) { return e.name == name; });
  return it == entries.end() ? nullptr : &*it;
}

std::vector<float> TensorFile::read_f32(const TensorEntry& e) const {
  if (e.dtype != "f32") throw BundleError(Kind::malformed_header, e.name + ": expected f32");
  std::vector<float> out(e.nbytes / sizeof(float));
  std::memcpy(out.data(), data.data() + e.offset, e.nbytes);
  return out;
}

std::vector<double> TensorFile::read_f64(const TensorEntry& e) const {
  if (e.dtype != "f64") throw BundleError(Kind::malformed_header, e.name + ": expected f64");
  std::vector<double> out(e.nbytes / sizeof(double));
  std::memcpy(out.data(), data.data() + e.offset, e.nbytes);
  return out;
}

void write_tensor_file(const std::filesystem::path& path, nlohmann::ordered_json header,
                       std::span<const TensorView> tensors) {
  nlohmann::ordered_json dir = nlohmann::ordered_json::object();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    const auto expected = element_count(t.shape) * dtype_size(t.dtype);
    if (expected != t.bytes.size()) {
      throw BundleError(Kind::shape_mismatch, t.name + ": byte size does not match shape");
    }
    dir[t.name] = {{"dtype", t.dtype}, {"shape", t.shape}, {"offset", offset}};
    offset += t.bytes.size();
  }
  header["tensors"] = std::move(dir);
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw BundleError(Kind::io, "cannot open " + path.string() + " for writing");
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) {
    out.write(reinterpret_cast<const char*>(t.bytes.data()),
              static_cast<std::streamsize>(t.bytes.size()));
  }
  if (!out) throw BundleError(Kind::io, "write failed for " + path.string());
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BundleError(Kind::io, "cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::uint64_t len = 0;
  if (raw.size() < sizeof(len)) {
    throw BundleError(Kind::malformed_header, "file too short for header length prefix");
  }
  std::memcpy(&len, raw.data(), sizeof(len));
  if (len == 0 || len > kMaxHeaderBytes || sizeof(len) + len > raw.size()) {
    throw BundleError(Kind::malformed_header, "header length prefix out of range");
  }

  TensorFile file;
  try {
    file.header = nlohmann::ordered_json::parse(raw.begin() + sizeof(len),
                                                raw.begin() + sizeof(len) + len);
  } catch (const nlohmann::json::exception& e) {
    throw BundleError(Kind::malformed_header, std::string("header is not valid JSON: ") + e.what());
  }
  if (!file.header.is_object() || !file.header.contains("tensors") ||
      !file.header["tensors"].is_object()) {
    throw BundleError(Kind::malformed_header, "header lacks a tensor directory");
  }

  std::uint64_t expected_offset = 0;
  try {
    for (const auto& [name, meta] : file.header["tensors"].items()) {
      TensorEntry e;
      e.name = name;
      e.dtype = meta.at("dtype").get<std::string>();
      e.shape = meta.at("shape").get<std::vector<std::int64_t>>();
      e.offset = meta.at("offset").get<std::uint64_t>();
      e.nbytes = element_count(e.shape) * dtype_size(e.dtype);
      if (e.offset != expected_offset) {
        throw BundleError(Kind::shape_mismatch,
                          name + ": directory offset disagrees with the declared shapes of "
                                 "preceding tensors");
      }
      expected_offset += e.nbytes;
      file.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw BundleError(Kind::malformed_header, std::string("bad tensor directory: ") + e.what());
  }

  const std::size_t data_start = sizeof(len) + len;
  const std::size_t available = raw.size() - data_start;
  if (available < expected_offset) {
    throw BundleError(Kind::truncated, "tensor data truncated: need " +
                                           std::to_string(expected_offset) + " bytes, have " +
                                           std::to_string(available));
  }
  if (available > expected_offset) {
    throw BundleError(Kind::shape_mismatch, "tensor data longer than the directory declares");
  }
  file.data.resize(available);
  std::memcpy(file.data.data(), raw.data() + data_start, available);
  return file;
}

}  // namespace neuronscope
