#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "illumloc/common.hpp"
#include "illumloc/geometry.hpp"
#include "illumloc/image.hpp"

namespace illumloc {

class ManifestParseError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};
class MissingImage : public ValidationError {
 public:
  using ValidationError::ValidationError;
};
class MalformedMatrix : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

struct ExternalImage {
  std::filesystem::path path;
  Image image;
  ProjectionMatrix P;
  std::string lighting;
};

// Manifest: JSON array of {"image": path, "P": [12 numbers, row-major],
// "lighting": label}. Image paths are relative to the manifest's directory.
// With load_pixels = false only paths are checked.
inline std::vector<ExternalImage> load_external_dataset(const std::filesystem::path& manifest_path,
                                                        bool load_pixels = true) {
  std::ifstream is(manifest_path);
  if (!is) throw ManifestParseError("manifest not found: " + manifest_path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ManifestParseError("manifest " + manifest_path.string() + ": " + e.what());
  }
  if (!doc.is_array()) throw ManifestParseError("manifest: top level must be an array");

  const auto base = manifest_path.parent_path();
  std::vector<ExternalImage> out;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& e = doc[i];
    const std::string where = "manifest entry " + std::to_string(i);
    if (!e.is_object() || !e.contains("image") || !e["image"].is_string()) {
      throw ManifestParseError(where + ": missing string field \"image\"");
    }
    if (!e.contains("P") || !e["P"].is_array()) {
      throw MalformedMatrix(where + ": field \"P\" must be an array of 12 numbers");
    }
    const auto& pj = e["P"];
    if (pj.size() != 12) {
      throw MalformedMatrix(where + ": \"P\" has " + std::to_string(pj.size()) + " numbers, expected 12");
    }
    ExternalImage rec;
    for (int k = 0; k < 12; ++k) {
      if (!pj[k].is_number()) throw MalformedMatrix(where + ": \"P\" contains a non-number");
      rec.P.P(k / 4, k % 4) = pj[k].get<double>();
    }
    if (!rec.P.P.allFinite()) throw MalformedMatrix(where + ": \"P\" is not finite");
    rec.lighting = e.value("lighting", std::string{});
    std::filesystem::path img = e["image"].get<std::string>();
    rec.path = img.is_absolute() ? img : base / img;
    if (!std::filesystem::exists(rec.path)) {
      throw MissingImage(where + ": image not found: " + rec.path.string());
    }
    if (load_pixels) rec.image = read_ppm(rec.path);
    out.push_back(std::move(rec));
  }
  return out;
}

// Splits P = K [R | t] (RQ decomposition of the left 3x3 block) with
// positive focal lengths and det(R) = +1.
inline std::pair<Mat3, Pose> decompose_projection(const ProjectionMatrix& P) {
  Mat3 M = P.P.leftCols<3>();
  Vec3 p4 = P.P.col(3);
  if (M.determinant() < 0.0) {
    M = -M;
    p4 = -p4;
  }
  // RQ via QR of the row-reversed transpose.
  Mat3 flip;
  flip << 0, 0, 1, 0, 1, 0, 1, 0, 0;
  Eigen::HouseholderQR<Mat3> qr((flip * M).transpose());
  Mat3 Q = qr.householderQ();
  Mat3 Rt = qr.matrixQR().triangularView<Eigen::Upper>();
  Mat3 K = flip * Rt.transpose() * flip;
  Mat3 R = flip * Q.transpose();
  for (int i = 0; i < 3; ++i) {
    if (K(i, i) < 0.0) {
      K.col(i) = -K.col(i);
      R.row(i) = -R.row(i);
    }
  }
  const double scale = K(2, 2);
  const Vec3 t = K.inverse() * p4;
  K /= scale;
  return {K, Pose{R, t}};
}

}  // namespace illumloc
