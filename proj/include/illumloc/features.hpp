#pragma once

#include <Eigen/Dense>

#include <array>
#include <bitset>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "illumloc/common.hpp"
#include "illumloc/geometry.hpp"
#include "illumloc/image.hpp"

namespace illumloc {

// Feature vector of any dimension (128 for the built-in descriptor, 256 for
// bit-split binary descriptors, ...).
using Descriptor = Eigen::VectorXf;

enum class Origin : std::uint8_t { Real = 0, Synthetic = 1 };

struct FeatureRecord {
  Descriptor descriptor;
  ImagePoint u = ImagePoint::Zero();
  int image_id = 0;
  Origin origin = Origin::Real;
  std::optional<ScenePoint> scene_point;
};

class BorderViolation : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Integer lattice cell of a scene point (coordinates rounded to multiples of
// the lattice pitch).
struct LatticeKey {
  std::int64_t x = 0, y = 0, z = 0;
  auto operator<=>(const LatticeKey&) const = default;
};

inline LatticeKey lattice_key(const ScenePoint& p, double pitch) {
  return {static_cast<std::int64_t>(std::llround(p.x() / pitch)),
          static_cast<std::int64_t>(std::llround(p.y() / pitch)),
          static_cast<std::int64_t>(std::llround(p.z() / pitch))};
}

// All features of one origin that belong to one scene point. `scene_point`
// is the mean of the members' ray-cast points; every member quantizes to
// `key`.
struct FeatureCluster {
  LatticeKey key;
  ScenePoint scene_point = ScenePoint::Zero();
  Origin origin = Origin::Synthetic;
  std::vector<FeatureRecord> members;

  std::size_t size() const { return members.size(); }
};

// ---------------------------------------------------------------------------
// Harris detector
// ---------------------------------------------------------------------------

struct DetectorParams {
  double harris_k = 0.04;
  double window_sigma = 1.5;
  double threshold_ratio = 0.01;  // of the maximum response
  int nms_radius = 5;
  int border = 16;
  std::size_t max_features = 800;
};

namespace detail {

inline std::vector<float> gaussian_kernel(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> k(2 * r + 1);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    const double v = std::exp(-0.5 * i * i / (sigma * sigma));
    k[i + r] = static_cast<float>(v);
    sum += v;
  }
  for (auto& v : k) v = static_cast<float>(v / sum);
  return k;
}

// Separable convolution with clamp-to-edge.
inline GrayImage blur(const GrayImage& src, const std::vector<float>& k) {
  const int r = static_cast<int>(k.size() / 2);
  const int w = src.width, h = src.height;
  GrayImage tmp(w, h), out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float s = 0.0f;
      for (int i = -r; i <= r; ++i) s += k[i + r] * src(std::clamp(x + i, 0, w - 1), y);
      tmp(x, y) = s;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float s = 0.0f;
      for (int i = -r; i <= r; ++i) s += k[i + r] * tmp(x, std::clamp(y + i, 0, h - 1));
      out(x, y) = s;
    }
  }
  return out;
}

}  // namespace detail

inline GrayImage harris_response(const GrayImage& img, const DetectorParams& params = {}) {
  const int w = img.width, h = img.height;
  GrayImage ixx(w, h), iyy(w, h), ixy(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int xm = std::max(x - 1, 0), xp = std::min(x + 1, w - 1);
      const int ym = std::max(y - 1, 0), yp = std::min(y + 1, h - 1);
      // Sobel, scaled by 1/8.
      const float gx = (img(xp, ym) + 2 * img(xp, y) + img(xp, yp) - img(xm, ym) - 2 * img(xm, y) -
                        img(xm, yp)) * 0.125f;
      const float gy = (img(xm, yp) + 2 * img(x, yp) + img(xp, yp) - img(xm, ym) - 2 * img(x, ym) -
                        img(xp, ym)) * 0.125f;
      ixx(x, y) = gx * gx;
      iyy(x, y) = gy * gy;
      ixy(x, y) = gx * gy;
    }
  }
  const auto k = detail::gaussian_kernel(params.window_sigma);
  const GrayImage sxx = detail::blur(ixx, k), syy = detail::blur(iyy, k), sxy = detail::blur(ixy, k);
  GrayImage r(w, h);
  for (std::size_t i = 0; i < r.data.size(); ++i) {
    const double a = sxx.data[i], b = syy.data[i], c = sxy.data[i];
    r.data[i] = static_cast<float>(a * b - c * c - params.harris_k * (a + b) * (a + b));
  }
  return r;
}

// Harris corners: local maxima over a (2r+1)^2 window above
// threshold_ratio * max response, outside the border, strongest first, refined
// to sub-pixel precision by a separable quadratic fit.
inline std::vector<ImagePoint> detect_keypoints(const GrayImage& img, const DetectorParams& params = {}) {
  if (img.width < 32 || img.height < 32) throw ValidationError("detect_keypoints: image smaller than 32x32");
  const GrayImage r = harris_response(img, params);
  const int w = img.width, h = img.height, b = params.border, nms = params.nms_radius;

  float max_r = 0.0f;
  for (int y = b; y < h - b; ++y)
    for (int x = b; x < w - b; ++x) max_r = std::max(max_r, r(x, y));
  if (!(max_r > 0.0f)) return {};
  const float threshold = static_cast<float>(params.threshold_ratio * max_r);

  struct Candidate {
    float response;
    int x, y;
  };
  std::vector<Candidate> cands;
  for (int y = b; y < h - b; ++y) {
    for (int x = b; x < w - b; ++x) {
      const float v = r(x, y);
      if (v < threshold || v <= 0.0f) continue;
      bool is_max = true;
      for (int dy = -nms; dy <= nms && is_max; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx = -nms; dx <= nms; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= w || (dx == 0 && dy == 0)) continue;
          const float o = r(xx, yy);
          // Plateaus keep the first pixel in raster order.
          if (o > v || (o == v && (dy < 0 || (dy == 0 && dx < 0)))) {
            is_max = false;
            break;
          }
        }
      }
      if (is_max) cands.push_back({v, x, y});
    }
  }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Candidate& a, const Candidate& c) { return a.response > c.response; });
  if (cands.size() > params.max_features) cands.resize(params.max_features);

  std::vector<ImagePoint> out;
  out.reserve(cands.size());
  for (const auto& c : cands) {
    auto offset = [](float m, float c0, float p) {
      const float denom = m - 2.0f * c0 + p;
      if (denom >= 0.0f) return 0.0;
      return std::clamp(0.5 * (m - p) / denom, -0.5, 0.5);
    };
    const double ox = offset(r(c.x - 1, c.y), c.response, r(c.x + 1, c.y));
    const double oy = offset(r(c.x, c.y - 1), c.response, r(c.x, c.y + 1));
    out.emplace_back(c.x + ox, c.y + oy);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Descriptor
// ---------------------------------------------------------------------------

inline constexpr int kDescriptorDim = 128;
inline constexpr int kPatchSize = 16;
inline constexpr int kDescriptorMargin = 16;

// 4x4 cells x 8 orientation bins over the 16x16 patch centred on the rounded
// keypoint. Gradient magnitudes are Gaussian weighted (sigma = 8 px) and
// distributed trilinearly over cells and bins; the result is L2-normalized,
// clipped at 0.2 and renormalized.
inline Descriptor describe(const GrayImage& img, const ImagePoint& kp) {
  const int cx = static_cast<int>(std::lround(kp.x()));
  const int cy = static_cast<int>(std::lround(kp.y()));
  if (cx < kDescriptorMargin || cy < kDescriptorMargin || cx > img.width - 1 - kDescriptorMargin ||
      cy > img.height - 1 - kDescriptorMargin) {
    throw BorderViolation("describe: keypoint closer than 16 px to the border");
  }
  std::array<double, kDescriptorDim> hist{};
  constexpr double sigma = 0.5 * kPatchSize;
  constexpr int half = kPatchSize / 2;
  for (int py = 0; py < kPatchSize; ++py) {
    for (int px = 0; px < kPatchSize; ++px) {
      const int x = cx - half + px, y = cy - half + py;
      const double gx = 0.5 * (img(x + 1, y) - img(x - 1, y));
      const double gy = 0.5 * (img(x, y + 1) - img(x, y - 1));
      const double mag = std::hypot(gx, gy);
      if (mag == 0.0) continue;
      // Patch-centred coordinates of this sample.
      const double dx = px - half + 0.5, dy = py - half + 0.5;
      const double weight = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      double angle = std::atan2(gy, gx);
      if (angle < 0.0) angle += 2.0 * std::numbers::pi;
      // Continuous cell / bin coordinates; cell centres sit at 1.5, 5.5, ...
      const double cell_x = (px + 0.5) / 4.0 - 0.5;
      const double cell_y = (py + 0.5) / 4.0 - 0.5;
      const double bin = angle / (2.0 * std::numbers::pi) * 8.0;
      const int x0 = static_cast<int>(std::floor(cell_x));
      const int y0 = static_cast<int>(std::floor(cell_y));
      const int b0 = static_cast<int>(std::floor(bin));
      const double fx = cell_x - x0, fy = cell_y - y0, fb = bin - b0;
      const double v = weight * mag;
      for (int iy = 0; iy < 2; ++iy) {
        const int yy = y0 + iy;
        if (yy < 0 || yy > 3) continue;
        const double wy = iy ? fy : 1.0 - fy;
        for (int ix = 0; ix < 2; ++ix) {
          const int xx = x0 + ix;
          if (xx < 0 || xx > 3) continue;
          const double wx = ix ? fx : 1.0 - fx;
          for (int ib = 0; ib < 2; ++ib) {
            const int bb = (b0 + ib) % 8;
            const double wb = ib ? fb : 1.0 - fb;
            hist[(yy * 4 + xx) * 8 + bb] += v * wx * wy * wb;
          }
        }
      }
    }
  }
  auto normalize = [&hist] {
    double n2 = 0.0;
    for (double h : hist) n2 += h * h;
    if (n2 <= 0.0) return false;
    const double inv = 1.0 / std::sqrt(n2);
    for (double& h : hist) h *= inv;
    return true;
  };
  Descriptor d(kDescriptorDim);
  if (!normalize()) {
    // Flat patch: uniform unit vector keeps the unit-norm contract.
    d.setConstant(static_cast<float>(1.0 / std::sqrt(static_cast<double>(kDescriptorDim))));
    return d;
  }
  for (double& h : hist) h = std::min(h, 0.2);
  normalize();
  for (int i = 0; i < kDescriptorDim; ++i) d[i] = static_cast<float>(hist[i]);
  return d;
}

// Keypoints plus descriptors for every keypoint that admits a full patch.
inline std::vector<std::pair<ImagePoint, Descriptor>> extract_features(
    const GrayImage& img, const DetectorParams& params = {}) {
  std::vector<std::pair<ImagePoint, Descriptor>> out;
  for (const auto& kp : detect_keypoints(img, params)) {
    try {
      out.emplace_back(kp, describe(img, kp));
    } catch (const BorderViolation&) {
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary descriptors
// ---------------------------------------------------------------------------

// One float per bit, in {0, 1}. Bit i is bit (7 - i % 8) of byte i / 8, i.e.
// most significant bit first.
inline Descriptor binary_to_float(std::span<const std::uint8_t> bytes, std::size_t bits) {
  if (bits == 0) throw ValidationError("binary_to_float: zero-length descriptor");
  if (bytes.size() * 8 < bits) throw ValidationError("binary_to_float: not enough bytes");
  Descriptor d(static_cast<Eigen::Index>(bits));
  for (std::size_t i = 0; i < bits; ++i) {
    d[static_cast<Eigen::Index>(i)] = ((bytes[i / 8] >> (7 - i % 8)) & 1u) ? 1.0f : 0.0f;
  }
  return d;
}

// Bitset overload; the leftmost character of the bitset's string form is
// component 0.
template <std::size_t B>
Descriptor binary_to_float(const std::bitset<B>& bits) {
  static_assert(B > 0);
  Descriptor d(static_cast<Eigen::Index>(B));
  for (std::size_t i = 0; i < B; ++i) d[static_cast<Eigen::Index>(i)] = bits[B - 1 - i] ? 1.0f : 0.0f;
  return d;
}

// ---------------------------------------------------------------------------
// Representative subset
// ---------------------------------------------------------------------------

// Medoids of a k-medoid partition of `points` (columns) under Euclidean
// distance. Deterministic: farthest-point initialisation from the global
// medoid, then alternating assignment / medoid update until stable.
inline std::vector<std::size_t> k_medoids(const Eigen::MatrixXd& points, std::size_t k,
                                          int max_iters = 50) {
  const std::size_t n = static_cast<std::size_t>(points.cols());
  if (k >= n) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return all;
  }
  Eigen::MatrixXd dist(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    dist(i, i) = 0.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      dist(i, j) = dist(j, i) = (points.col(i) - points.col(j)).norm();
    }
  }
  std::vector<std::size_t> medoids;
  {
    Eigen::Index best;
    dist.colwise().sum().minCoeff(&best);
    medoids.push_back(static_cast<std::size_t>(best));
  }
  Eigen::VectorXd nearest = dist.col(medoids[0]);
  while (medoids.size() < k) {
    Eigen::Index far;
    nearest.maxCoeff(&far);
    medoids.push_back(static_cast<std::size_t>(far));
    nearest = nearest.cwiseMin(dist.col(far));
  }

  std::vector<std::size_t> assign(n);
  for (int iter = 0; iter < max_iters; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t m = 1; m < k; ++m) {
        if (dist(i, medoids[m]) < dist(i, medoids[best])) best = m;
      }
      assign[i] = best;
    }
    bool changed = false;
    for (std::size_t m = 0; m < k; ++m) {
      std::size_t best = medoids[m];
      double best_cost = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < n; ++c) {
        if (assign[c] != m) continue;
        double cost = 0.0;
        for (std::size_t i = 0; i < n; ++i)
          if (assign[i] == m) cost += dist(c, i);
        if (cost < best_cost) {
          best_cost = cost;
          best = c;
        }
      }
      if (best != medoids[m]) {
        medoids[m] = best;
        changed = true;
      }
    }
    if (!changed) break;
  }
  std::sort(medoids.begin(), medoids.end());
  return medoids;
}

// Keeps `budget` medoid members per cluster; smaller clusters stay whole.
// Member order is preserved.
inline std::vector<FeatureCluster> select_representative(const std::vector<FeatureCluster>& clusters,
                                                         std::size_t budget) {
  if (budget < 1) throw ValidationError("select_representative: budget must be >= 1");
  std::vector<FeatureCluster> out(clusters.size());
  parallel_for(clusters.size(), [&](std::size_t c) {
    const FeatureCluster& in = clusters[c];
    FeatureCluster& dst = out[c];
    dst.key = in.key;
    dst.scene_point = in.scene_point;
    dst.origin = in.origin;
    if (in.size() <= budget) {
      dst.members = in.members;
      return;
    }
    Eigen::MatrixXd pts(in.members.front().descriptor.size(), static_cast<Eigen::Index>(in.size()));
    for (std::size_t i = 0; i < in.size(); ++i) {
      pts.col(static_cast<Eigen::Index>(i)) = in.members[i].descriptor.cast<double>();
    }
    for (std::size_t i : k_medoids(pts, budget)) dst.members.push_back(in.members[i]);
  });
  return out;
}

}  // namespace illumloc
