// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lum/rng.hpp"
#include "lum/tensor.hpp"

// Binary parameter container.
//
// Layout (little-endian):
//   magic "LUM1" | u32 format version | u8 dtype (1=f32, 2=f64)
//   u64 config length | config bytes (opaque JSON)
//   u32 parameter count
//   per parameter: u32 name length | name | u32 ndim | u64 dims...
//   raw values for each parameter, in header order
//
// Round-trips are bitwise: values are written as raw IEEE bytes.

namespace lum::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian host");

namespace ckpt_detail {

template <typename T>
constexpr uint8_t dtype_code() {
  if constexpr (std::is_same_v<T, float>) return 1;
  else if constexpr (std::is_same_v<T, double>) return 2;
  else static_assert(sizeof(T) == 0, "unsupported dtype");
}

template <typename V>
void write_pod(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is, const char* what) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V)))
    throw std::runtime_error(std::string("checkpoint: truncated while reading ") + what);
  return v;
}

}  // namespace ckpt_detail

template <typename T>
void save_parameters(const ParameterStoreT<T>& ps, const std::string& config_json, std::ostream& os) {
  using namespace ckpt_detail;
  os.write("LUM1", 4);
  write_pod<uint32_t>(os, 1u);
  write_pod<uint8_t>(os, dtype_code<T>());
  write_pod<uint64_t>(os, config_json.size());
  os.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
  write_pod<uint32_t>(os, static_cast<uint32_t>(ps.order.size()));
  for (const auto& name : ps.order) {
    const auto& t = *ps.by_name.at(name);
    write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<uint32_t>(os, static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) write_pod<uint64_t>(os, static_cast<uint64_t>(d));
  }
  for (const auto& name : ps.order) {
    const auto& t = *ps.by_name.at(name);
    os.write(reinterpret_cast<const char*>(t.v.data()),
             static_cast<std::streamsize>(t.v.size() * sizeof(T)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

template <typename T>
void save_parameters(const ParameterStoreT<T>& ps, const std::string& config_json,
                     const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  save_parameters(ps, config_json, os);
}

template <typename T>
std::string serialize_parameters(const ParameterStoreT<T>& ps, const std::string& config_json) {
  std::ostringstream os(std::ios::binary);
  save_parameters(ps, config_json, os);
  return os.str();
}

// Loads into a fresh store; returns the config blob through `config_json`.
template <typename T>
ParameterStoreT<T> load_parameters(std::istream& is, std::string* config_json) {
  using namespace ckpt_detail;
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "LUM1", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic (not a LUM1 file)");
  const auto version = read_pod<uint32_t>(is, "version");
  if (version != 1) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const auto dtype = read_pod<uint8_t>(is, "dtype");
  if (dtype != dtype_code<T>())
    throw std::runtime_error("checkpoint: dtype mismatch (file has code " + std::to_string(int(dtype)) + ")");
  const auto cfg_len = read_pod<uint64_t>(is, "config length");
  std::string cfg(cfg_len, '\0');
  if (cfg_len && !is.read(cfg.data(), static_cast<std::streamsize>(cfg_len)))
    throw std::runtime_error("checkpoint: truncated while reading config");
  if (config_json) *config_json = std::move(cfg);
  const auto num_params = read_pod<uint32_t>(is, "parameter count");
  ParameterStoreT<T> ps;
  std::vector<std::string> names;
  for (uint32_t i = 0; i < num_params; ++i) {
    const auto name_len = read_pod<uint32_t>(is, "name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw std::runtime_error("checkpoint: truncated while reading name");
    const auto ndim = read_pod<uint32_t>(is, "ndim");
    std::vector<int> shape;
    for (uint32_t j = 0; j < ndim; ++j)
      shape.push_back(static_cast<int>(read_pod<uint64_t>(is, "dimension")));
    ps.create(name, shape);
    names.push_back(std::move(name));
  }
  for (const auto& name : names) {
    auto& t = *ps.by_name.at(name);
    if (!is.read(reinterpret_cast<char*>(t.v.data()),
                 static_cast<std::streamsize>(t.v.size() * sizeof(T))))
      throw std::runtime_error("checkpoint: truncated while reading values of " + name);
  }
  return ps;
}

template <typename T>
ParameterStoreT<T> load_parameters(const std::string& path, std::string* config_json) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  return load_parameters<T>(is, config_json);
}

// 64-bit content hash of a serialized store; used as the model version.
template <typename T>
std::string parameters_fingerprint(const ParameterStoreT<T>& ps, const std::string& config_json) {
  const std::string bytes = serialize_parameters(ps, config_json);
  const uint64_t h = lum::rng::fnv1a(lum::rng::fnv1a_init(), bytes.data(), bytes.size());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace lum::nn
