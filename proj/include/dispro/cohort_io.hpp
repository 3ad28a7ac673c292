// SPDX-License-Identifier: Apache-2.0
//
// File-backed cohorts.
//
// Feature matrix (".bagf"), little-endian:
//   "BAGF" | version u16 = 1 | rows u32 | cols u32 | rows*cols f32, row-major
//
// Manifest, UTF-8 JSON lines, one record per patient:
//   {"id": str, "time": float, "censor": 0|1, "path_feat": str|null, "gene_feat": str|null}
// Feature paths are resolved relative to the manifest's directory; null marks
// the modality absent for that patient.
#pragma once

#include "dispro/binary_io.hpp"
#include "dispro/cohort.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>

namespace dispro {

inline constexpr char kBagMagic[4] = {'B', 'A', 'G', 'F'};
inline constexpr std::uint16_t kBagVersion = 1;

inline void write_bag_file(const std::filesystem::path& path, const MatD& m) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::Io, "cannot open " + path.string() + " for writing");
  os.write(kBagMagic, 4);
  io::put_le<std::uint16_t>(os, kBagVersion);
  io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
  io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) io::put_f32(os, static_cast<float>(m(r, c)));
  require(static_cast<bool>(os), ErrorCode::Io, "write failed: " + path.string());
}

inline MatD read_bag_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorCode::Io, "cannot open feature file " + path.string());
  io::Reader rd(is, path.string());
  char magic[4];
  rd.bytes(magic, 4);
  require(std::memcmp(magic, kBagMagic, 4) == 0, ErrorCode::Format,
          "BAGF magic mismatch in " + path.string());
  const auto version = rd.le<std::uint16_t>();
  require(version == kBagVersion, ErrorCode::Format,
          "unsupported BAGF version " + std::to_string(version) + " in " + path.string());
  const auto rows = rd.le<std::uint32_t>();
  const auto cols = rd.le<std::uint32_t>();
  require(rows > 0, ErrorCode::Format, "empty bag (rows = 0) in " + path.string());
  require(cols > 0, ErrorCode::Format, "zero-width bag in " + path.string());
  MatD m(rows, cols);
  for (std::uint32_t r = 0; r < rows; ++r)
    for (std::uint32_t c = 0; c < cols; ++c) {
      const float f = rd.f32();
      require(std::isfinite(f), ErrorCode::Format,
              "non-finite value at (" + std::to_string(r) + ", " + std::to_string(c) + ") in " +
                  path.string());
      m(r, c) = f;
    }
  return m;
}

/// Reads the manifest and its feature files, then discretizes survival times
/// into n_intervals bins.
inline Cohort load_manifest(const std::filesystem::path& manifest, int n_intervals) {
  std::ifstream is(manifest);
  require(static_cast<bool>(is), ErrorCode::Io, "cannot open manifest " + manifest.string());
  const auto base = manifest.parent_path();

  Cohort c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = manifest.string() + ":" + std::to_string(lineno);
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Format, where + ": " + e.what());
    }
    Patient p;
    try {
      p.id = rec.at("id").get<std::string>();
      p.label.time_months = rec.at("time").get<double>();
      p.label.censorship = rec.at("censor").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Format, where + ": " + e.what());
    }
    require(p.label.censorship == 0 || p.label.censorship == 1, ErrorCode::Format,
            where + ": censor must be 0 or 1");

    for (auto [key, m] : {std::pair{"path_feat", Modality::Pathology},
                          std::pair{"gene_feat", Modality::Genomics}}) {
      const auto it = rec.find(key);
      if (it == rec.end() || it->is_null()) continue;
      require(it->is_string(), ErrorCode::Format, where + ": " + key + " must be string or null");
      const auto path = base / it->get<std::string>();
      MatD x;
      try {
        x = read_bag_file(path);
      } catch (const Error& e) {
        throw Error(e.code(), "patient " + p.id + ": " + e.what());
      }
      auto& width = m == Modality::Pathology ? c.d_pathology : c.d_genomics;
      if (width == 0) width = x.cols();
      require(x.cols() == width, ErrorCode::ShapeMismatch,
              "patient " + p.id + ": width " + std::to_string(x.cols()) + " in " + path.string() +
                  " != " + std::to_string(width));
      p.bag(m) = Bag{p.id, m, std::move(x)};
    }
    require(p.pathology || p.genomics, ErrorCode::Format,
            where + ": patient " + p.id + " has no modality");
    c.patients.push_back(std::move(p));
  }
  require(!c.patients.empty(), ErrorCode::Format, "manifest " + manifest.string() + " is empty");
  discretize_times(c, n_intervals);
  validate_cohort(c);
  return c;
}

/// Writes <dir>/manifest.jsonl plus one .bagf file per present bag under
/// <dir>/features. Returns the manifest path.
inline std::filesystem::path save_manifest(const Cohort& c, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "features");
  const auto manifest = dir / "manifest.jsonl";
  std::ofstream os(manifest);
  require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + manifest.string());
  for (const auto& p : c.patients) {
    nlohmann::json rec;
    rec["id"] = p.id;
    rec["time"] = p.label.time_months;
    rec["censor"] = p.label.censorship;
    for (auto [key, m] : {std::pair{"path_feat", Modality::Pathology},
                          std::pair{"gene_feat", Modality::Genomics}}) {
      if (!p.has(m)) {
        rec[key] = nullptr;
        continue;
      }
      const auto rel = fs::path("features") / (p.id + "_" + std::string(tag(m)) + ".bagf");
      write_bag_file(dir / rel, p.bag(m)->instances);
      rec[key] = rel.generic_string();
    }
    os << rec.dump() << '\n';
  }
  return manifest;
}

}  // namespace dispro
