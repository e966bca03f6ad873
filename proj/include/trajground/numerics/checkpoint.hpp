#pragma once

// Checkpoint container: a text manifest followed by little-endian raw arrays.
//
//   TRAJGROUND-CHECKPOINT 1
//   meta <single-line JSON>
//   tensor <name> <f32|f64> <byte offset> <rank> <dim0> ... <dimN-1>
//   ...
//   end
//   <data section; offsets are relative to its first byte>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "trajground/error.hpp"
#include "trajground/numerics/param_store.hpp"

namespace trajground::num {

inline constexpr const char* kCheckpointMagic = "TRAJGROUND-CHECKPOINT 1";

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

namespace detail {
template <class U>
void append_le(std::string& out, U value) {
  using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
  Bits bits;
  std::memcpy(&bits, &value, sizeof bits);
  for (std::size_t i = 0; i < sizeof bits; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <class U>
U read_le(const unsigned char* p) {
  using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
  Bits bits = 0;
  for (std::size_t i = 0; i < sizeof bits; ++i) bits |= static_cast<Bits>(p[i]) << (8 * i);
  U value;
  std::memcpy(&value, &bits, sizeof value);
  return value;
}
}  // namespace detail

template <class T>
void save_checkpoint(const std::filesystem::path& file, const ParamStore<T>& params, const nlohmann::json& meta) {
  std::ostringstream manifest;
  std::string data;
  manifest << kCheckpointMagic << '\n' << "meta " << meta.dump() << '\n';
  for (const auto& p : params) {
    if (p.name.find_first_of(" \n\t") != std::string::npos) fail(ErrorCode::IoError, "parameter names may not contain whitespace");
    manifest << "tensor " << p.name << ' ' << dtype_name<T>() << ' ' << data.size() << ' ' << p.value.rank();
    for (auto d : p.value.shape()) manifest << ' ' << d;
    manifest << '\n';
    for (auto v : p.value.values()) detail::append_le(data, v);
  }
  manifest << "end\n";
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot open '" + file.string() + "' for writing");
  const std::string head = manifest.str();
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) fail(ErrorCode::IoError, "write to '" + file.string() + "' failed");
}

/// Loads every tensor into a store of scalar type T (converting if the file
/// holds the other precision). `meta` receives the manifest's meta object.
template <class T>
ParamStore<T> load_checkpoint(const std::filesystem::path& file, nlohmann::json* meta = nullptr) {
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open '" + file.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) fail(ErrorCode::IoError, "'" + file.string() + "' is not a checkpoint");

  struct Entry {
    std::string name, dtype;
    std::size_t offset;
    Shape shape;
  };
  std::vector<Entry> entries;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    if (line.rfind("meta ", 0) == 0) {
      if (meta) *meta = nlohmann::json::parse(line.substr(5));
      continue;
    }
    std::istringstream ls(line);
    std::string tag;
    Entry e;
    std::size_t rank = 0;
    ls >> tag >> e.name >> e.dtype >> e.offset >> rank;
    if (tag != "tensor" || !ls) fail(ErrorCode::IoError, "bad manifest line '" + line + "'");
    e.shape.resize(rank);
    for (auto& d : e.shape) ls >> d;
    if (!ls) fail(ErrorCode::IoError, "bad shape in manifest line '" + line + "'");
    entries.push_back(std::move(e));
  }
  if (!ended) fail(ErrorCode::IoError, "checkpoint manifest not terminated");
  std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  ParamStore<T> store;
  for (const auto& e : entries) {
    const std::size_t n = shape_size(e.shape);
    const std::size_t width = e.dtype == "f32" ? 4 : e.dtype == "f64" ? 8 : 0;
    if (width == 0) fail(ErrorCode::IoError, "unknown dtype '" + e.dtype + "'");
    if (e.offset + n * width > data.size()) fail(ErrorCode::IoError, "tensor '" + e.name + "' extends past end of file");
    Tensor<T> t(e.shape);
    const unsigned char* base = data.data() + e.offset;
    for (std::size_t i = 0; i < n; ++i)
      t[i] = width == 4 ? static_cast<T>(detail::read_le<float>(base + 4 * i)) : static_cast<T>(detail::read_le<double>(base + 8 * i));
    store.add(e.name, std::move(t));
  }
  return store;
}

}  // namespace trajground::num
