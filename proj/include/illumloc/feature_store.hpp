#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "illumloc/common.hpp"
#include "illumloc/features.hpp"

namespace illumloc {

// Binary feature store, little-endian:
//   "FSTR" | u32 version (1) | u32 descriptor dim D | u32 record count
//   per record: u32 image_id | f32 u.x | f32 u.y | u8 origin | u8 has_scene_point
//               | f32 x3 scene point (zeros if absent) | f32 x D descriptor
// Image points and scene points are narrowed to f32 on write.
inline constexpr std::uint32_t kFeatureStoreVersion = 1;

inline void write_feature_store(std::ostream& os, const std::vector<FeatureRecord>& records,
                                std::uint32_t dim) {
  io::write_magic(os, "FSTR");
  io::write_le<std::uint32_t>(os, kFeatureStoreVersion);
  io::write_le<std::uint32_t>(os, dim);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (r.descriptor.size() != static_cast<Eigen::Index>(dim)) {
      throw DimensionMismatch("feature store: record descriptor dim differs from store dim");
    }
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(r.image_id));
    io::write_le<float>(os, static_cast<float>(r.u.x()));
    io::write_le<float>(os, static_cast<float>(r.u.y()));
    io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(r.origin));
    io::write_le<std::uint8_t>(os, r.scene_point ? 1 : 0);
    const ScenePoint sp = r.scene_point.value_or(ScenePoint::Zero());
    for (int k = 0; k < 3; ++k) io::write_le<float>(os, static_cast<float>(sp[k]));
    for (Eigen::Index k = 0; k < r.descriptor.size(); ++k) io::write_le<float>(os, r.descriptor[k]);
  }
}

struct FeatureStore {
  std::uint32_t dim = 0;
  std::vector<FeatureRecord> records;
};

inline FeatureStore read_feature_store(std::istream& is) {
  io::expect_magic(is, "FSTR");
  const auto version = io::read_le<std::uint32_t>(is, "version");
  if (version != kFeatureStoreVersion) {
    throw ValidationError("feature store: unsupported version " + std::to_string(version));
  }
  FeatureStore store;
  store.dim = io::read_le<std::uint32_t>(is, "descriptor dim");
  const auto count = io::read_le<std::uint32_t>(is, "record count");
  store.records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    FeatureRecord r;
    r.image_id = static_cast<int>(io::read_le<std::uint32_t>(is, "image_id"));
    const float ux = io::read_le<float>(is, "u.x");
    const float uy = io::read_le<float>(is, "u.y");
    r.u = {ux, uy};
    const auto origin = io::read_le<std::uint8_t>(is, "origin");
    if (origin > 1) throw ValidationError("feature store: record " + std::to_string(i) + " has bad origin");
    r.origin = static_cast<Origin>(origin);
    const auto has_point = io::read_le<std::uint8_t>(is, "has_scene_point");
    ScenePoint sp;
    for (int k = 0; k < 3; ++k) sp[k] = io::read_le<float>(is, "scene point");
    if (has_point) r.scene_point = sp;
    r.descriptor.resize(store.dim);
    for (std::uint32_t k = 0; k < store.dim; ++k) r.descriptor[k] = io::read_le<float>(is, "descriptor");
    store.records.push_back(std::move(r));
  }
  return store;
}

inline void save_feature_store(const std::filesystem::path& path, const std::vector<FeatureRecord>& records,
                               std::uint32_t dim) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure("cannot write " + path.string());
  write_feature_store(os, records, dim);
}

inline FeatureStore load_feature_store(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeFailure("missing feature store " + path.string());
  return read_feature_store(is);
}

}  // namespace illumloc
