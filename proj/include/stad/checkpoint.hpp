#pragma once

// MPRM parameter checkpoints, shared by every training stage.
//
// Layout (little-endian):
//   "MPRM"  magic, 4 bytes
//   u16     format version (currently 1)
//   then for each array until EOF:
//   u32     name length, followed by that many UTF-8 bytes
//   u32     ndim
//   u32[ndim] dimension sizes
//   f32[product(dims)] row-major values

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "stad/nn.hpp"
#include "stad/tensor.hpp"

namespace stad {

class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

struct NamedArray {
  Shape shape;
  std::vector<double> data;
};

namespace detail {

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw CheckpointError("MPRM: truncated file");
  return v;
}

}  // namespace detail

inline void save_mprm(const std::string& path,
                      const std::map<std::string, NamedArray>& arrays) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("MPRM: cannot open for writing: " + path);
  out.write("MPRM", 4);
  detail::write_pod<std::uint16_t>(out, 1);
  for (const auto& [name, arr] : arrays) {
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(arr.shape.size()));
    std::size_t n = 1;
    for (int d : arr.shape) {
      detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(d));
      n *= static_cast<std::size_t>(d);
    }
    if (n != arr.data.size()) throw CheckpointError("MPRM: shape/data mismatch for " + name);
    for (double v : arr.data) detail::write_pod<float>(out, static_cast<float>(v));
  }
  if (!out) throw CheckpointError("MPRM: write failed: " + path);
}

inline std::map<std::string, NamedArray> load_mprm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("MPRM: cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "MPRM", 4) != 0) {
    throw CheckpointError("MPRM: bad magic in " + path);
  }
  const auto version = detail::read_pod<std::uint16_t>(in);
  if (version != 1) throw CheckpointError("MPRM: unsupported version " + std::to_string(version));
  std::map<std::string, NamedArray> arrays;
  while (true) {
    std::uint32_t name_len;
    in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    if (in.eof()) break;
    if (!in) throw CheckpointError("MPRM: truncated file");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw CheckpointError("MPRM: truncated name");
    const auto ndim = detail::read_pod<std::uint32_t>(in);
    NamedArray arr;
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
      const auto d = detail::read_pod<std::uint32_t>(in);
      arr.shape.push_back(static_cast<int>(d));
      n *= d;
    }
    arr.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) arr.data[i] = detail::read_pod<float>(in);
    arrays.emplace(std::move(name), std::move(arr));
  }
  return arrays;
}

inline void save_params(const std::string& path, const ParamStore& ps) {
  std::map<std::string, NamedArray> arrays;
  for (const auto& [name, t] : ps.items()) arrays.emplace(name, NamedArray{t.shape(), t.data()});
  save_mprm(path, arrays);
}

// Loads values into an already-built store; every stored name must exist with
// a matching element count. Extra names in the file are an error (a wrong or
// stale checkpoint should fail loudly, not half-load).
inline void load_params(const std::string& path, ParamStore& ps) {
  auto arrays = load_mprm(path);
  for (const auto& [name, arr] : arrays) {
    if (!ps.has(name)) throw CheckpointError("MPRM: unexpected parameter " + name);
    ps.set_values(name, arr.data);
  }
  for (const auto& [name, t] : ps.items()) {
    if (!arrays.count(name)) throw CheckpointError("MPRM: checkpoint missing " + name);
  }
}

}  // namespace stad
