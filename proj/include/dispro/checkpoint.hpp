// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file, little-endian:
//   "DSPR" | version u16 | count u32 | count records
//   record: name_len u16 | name (UTF-8) | rank u8 | dims u32 x rank | f32 values, row-major
#pragma once

#include "dispro/binary_io.hpp"
#include "dispro/optim.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace dispro {

inline constexpr char kCheckpointMagic[4] = {'D', 'S', 'P', 'R'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct StoredTensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  std::size_t rows() const { return dims.size() == 2 ? dims[0] : 1; }
  std::size_t cols() const { return dims.empty() ? 1 : dims.back(); }
};

/// Ordered by name so files are byte-stable for a given state.
using Checkpoint = std::map<std::string, StoredTensor>;

template <class T>
StoredTensor store(const Mat<T>& m, int rank) {
  require(rank == 1 || rank == 2, ErrorCode::InvalidArgument, "checkpoint: rank must be 1 or 2");
  require(rank == 2 || m.rows() == 1, ErrorCode::ShapeMismatch,
          "checkpoint: rank-1 tensor must be a single row");
  StoredTensor t;
  if (rank == 2) t.dims.push_back(static_cast<std::uint32_t>(m.rows()));
  t.dims.push_back(static_cast<std::uint32_t>(m.cols()));
  t.values.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.values.push_back(static_cast<float>(m(r, c)));
  return t;
}

template <class T>
Checkpoint to_checkpoint(const ParamList<T>& params) {
  Checkpoint ck;
  for (const auto& p : params) {
    require(!ck.count(p.name), ErrorCode::InvalidArgument, "checkpoint: duplicate name " + p.name);
    ck.emplace(p.name, store(p.var.value(), p.rank));
  }
  return ck;
}

inline void write_checkpoint(const Checkpoint& ck, std::ostream& os) {
  os.write(kCheckpointMagic, 4);
  io::put_le<std::uint16_t>(os, kCheckpointVersion);
  io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.size()));
  for (const auto& [name, t] : ck) {
    require(name.size() <= 0xFFFF, ErrorCode::InvalidArgument, "checkpoint: name too long");
    io::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(t.dims.size()));
    for (auto d : t.dims) io::put_le<std::uint32_t>(os, d);
    for (float f : t.values) io::put_f32(os, f);
  }
}

inline Checkpoint read_checkpoint(std::istream& is, const std::string& what = "checkpoint") {
  io::Reader rd(is, what);
  char magic[4];
  rd.bytes(magic, 4);
  require(std::memcmp(magic, kCheckpointMagic, 4) == 0, ErrorCode::Format,
          "DSPR magic mismatch in " + what);
  const auto version = rd.le<std::uint16_t>();
  require(version == kCheckpointVersion, ErrorCode::Format,
          "unsupported checkpoint version " + std::to_string(version) + " in " + what +
              " (reader supports " + std::to_string(kCheckpointVersion) + ")");
  const auto count = rd.le<std::uint32_t>();
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = rd.le<std::uint16_t>();
    std::string name(len, '\0');
    rd.bytes(name.data(), len);
    const auto rank = rd.le<std::uint8_t>();
    require(rank == 1 || rank == 2, ErrorCode::Format,
            what + ": tensor " + name + " has unsupported rank " + std::to_string(rank));
    StoredTensor t;
    std::size_t n = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      t.dims.push_back(rd.le<std::uint32_t>());
      n *= t.dims.back();
    }
    t.values.resize(n);
    for (auto& f : t.values) f = rd.f32();
    require(ck.emplace(std::move(name), std::move(t)).second, ErrorCode::Format,
            what + ": duplicate tensor name");
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::Io, "cannot open " + path.string() + " for writing");
  write_checkpoint(ck, os);
  require(static_cast<bool>(os), ErrorCode::Io, "write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorCode::Io, "cannot open checkpoint " + path.string());
  return read_checkpoint(is, path.string());
}

template <class T>
Mat<T> restore(const StoredTensor& t, const std::string& name) {
  Mat<T> m(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
  require(t.values.size() == t.rows() * t.cols(), ErrorCode::Format,
          "checkpoint: value count mismatch for " + name);
  for (std::size_t i = 0; i < t.values.size(); ++i) m.data()[i] = static_cast<T>(t.values[i]);
  return m;
}

/// Writes checkpoint values into existing parameters. Every parameter must be
/// present with a matching shape; names in the file that no parameter claims
/// are an error unless allow_unknown is set.
template <class T>
void assign(const ParamList<T>& params, const Checkpoint& ck, bool allow_unknown = false) {
  std::size_t used = 0;
  for (const auto& p : params) {
    const auto it = ck.find(p.name);
    require(it != ck.end(), ErrorCode::Format, "checkpoint: missing tensor " + p.name);
    const auto& t = it->second;
    require(static_cast<Eigen::Index>(t.rows()) == p.var.rows() &&
                static_cast<Eigen::Index>(t.cols()) == p.var.cols(),
            ErrorCode::ShapeMismatch, "checkpoint: shape mismatch for " + p.name);
    auto var = p.var;
    var.mutable_value() = restore<T>(t, p.name);
    ++used;
  }
  if (!allow_unknown && used != ck.size()) {
    for (const auto& [name, t] : ck) {
      const bool known = std::any_of(params.begin(), params.end(),
                                     [&](const auto& p) { return p.name == name; });
      require(known, ErrorCode::Format, "checkpoint: unknown tensor " + name);
    }
  }
}

}  // namespace dispro
