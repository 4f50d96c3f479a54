#pragma once

// Binary checkpoint container (little-endian):
//   magic "MSCLCKPT" | u32 version | i64 step | u64 config hash
//   u64 len | config YAML
//   u64 count | count x (u64 len | name | u32 rank | rank x i64 | numel x f64)

#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mscl/tensor.hpp"

namespace mscl {

inline constexpr char kCheckpointMagic[8] = {'M', 'S', 'C', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  using Error::Error;
};

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<double> data;

  bool operator==(const StoredTensor&) const = default;
};

struct Checkpoint {
  std::int64_t step = 0;
  std::uint64_t config_hash = 0;
  std::string config_yaml;
  std::vector<StoredTensor> tensors;

  bool operator==(const Checkpoint&) const = default;

  const StoredTensor& find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return t;
    }
    throw CheckpointError("checkpoint has no tensor '" + name + "'");
  }
  bool contains(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return true;
    }
    return false;
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <class T>
T get(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw CheckpointError("checkpoint '" + path + "' is truncated");
  }
  return v;
}

inline std::string get_string(std::istream& is, const std::string& path, std::uint64_t limit) {
  const auto n = get<std::uint64_t>(is, path);
  if (n > limit) throw CheckpointError("checkpoint '" + path + "' is corrupt (string length)");
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n))) {
    throw CheckpointError("checkpoint '" + path + "' is truncated");
  }
  return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const auto tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write checkpoint '" + tmp + "'");
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put(os, kCheckpointVersion);
    detail::put(os, ckpt.step);
    detail::put(os, ckpt.config_hash);
    detail::put_string(os, ckpt.config_yaml);
    detail::put<std::uint64_t>(os, ckpt.tensors.size());
    for (const auto& t : ckpt.tensors) {
      if (static_cast<std::int64_t>(t.data.size()) != numel_of(t.shape)) {
        throw CheckpointError("tensor '" + t.name + "' data does not match its shape");
      }
      detail::put_string(os, t.name);
      detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
      for (auto e : t.shape) detail::put(os, e);
      os.write(reinterpret_cast<const char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    if (!os) throw CheckpointError("failed writing checkpoint '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw CheckpointError("cannot move checkpoint into place at '" + path + "'");
  }
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint '" + path + "'");
  char magic[sizeof kCheckpointMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw CheckpointError("'" + path + "' is not a checkpoint");
  }
  const auto version = detail::get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint '" + path + "' has version " + std::to_string(version) +
                          ", expected " + std::to_string(kCheckpointVersion));
  }
  Checkpoint ckpt;
  ckpt.step = detail::get<std::int64_t>(is, path);
  ckpt.config_hash = detail::get<std::uint64_t>(is, path);
  ckpt.config_yaml = detail::get_string(is, path, 1u << 24);
  const auto count = detail::get<std::uint64_t>(is, path);
  if (count > (1u << 20)) throw CheckpointError("checkpoint '" + path + "' is corrupt (tensor count)");
  ckpt.tensors.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = detail::get_string(is, path, 4096);
    const auto rank = detail::get<std::uint32_t>(is, path);
    if (rank == 0 || rank > 8) throw CheckpointError("checkpoint '" + path + "' is corrupt (rank)");
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto e = detail::get<std::int64_t>(is, path);
      if (e <= 0 || e > (std::int64_t{1} << 32)) throw CheckpointError("checkpoint '" + path + "' is corrupt (shape)");
      t.shape.push_back(e);
    }
    t.data.resize(static_cast<std::size_t>(numel_of(t.shape)));
    if (!is.read(reinterpret_cast<char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(double)))) {
      throw CheckpointError("checkpoint '" + path + "' is truncated");
    }
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

}  // namespace mscl
