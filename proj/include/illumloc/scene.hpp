#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "illumloc/common.hpp"
#include "illumloc/geometry.hpp"
#include "illumloc/image.hpp"

namespace illumloc {

class EmptyView : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};

struct Triangle {
  std::array<Vec3, 3> v;
  std::array<Vec2, 3> uv;

  Vec3 normal() const { return (v[1] - v[0]).cross(v[2] - v[0]).normalized(); }
};

// Triangles grouped with a bounding box so most rays skip them cheaply.
struct Mesh {
  std::vector<Triangle> triangles;
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = Vec3::Constant(-std::numeric_limits<double>::infinity());

  void add(const Triangle& tri) {
    triangles.push_back(tri);
    for (const auto& p : tri.v) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
  }
};

// RGB float texture in [0, 1], row-major, v = 0 at the first row.
struct Texture {
  int width = 0;
  int height = 0;
  std::vector<float> rgb;

  Texture() = default;
  Texture(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0.0f) {}

  float* texel(int x, int y) { return &rgb[(static_cast<std::size_t>(y) * width + x) * 3]; }
  const float* texel(int x, int y) const {
    return &rgb[(static_cast<std::size_t>(y) * width + x) * 3];
  }

  // Bilinear lookup with clamp-to-edge.
  Vec3 sample(const Vec2& uv) const {
    const double fx = std::clamp(uv.x(), 0.0, 1.0) * width - 0.5;
    const double fy = std::clamp(uv.y(), 0.0, 1.0) * height - 0.5;
    const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, width - 1);
    const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, height - 1);
    const int x1 = std::min(x0 + 1, width - 1);
    const int y1 = std::min(y0 + 1, height - 1);
    const double ax = std::clamp(fx - x0, 0.0, 1.0);
    const double ay = std::clamp(fy - y0, 0.0, 1.0);
    Vec3 out;
    for (int c = 0; c < 3; ++c) {
      const double top = (1 - ax) * texel(x0, y0)[c] + ax * texel(x1, y0)[c];
      const double bot = (1 - ax) * texel(x0, y1)[c] + ax * texel(x1, y1)[c];
      out[c] = (1 - ay) * top + ay * bot;
    }
    return out;
  }
};

struct Scene {
  std::vector<Mesh> meshes;
  Texture texture;
  Vec3 albedo{0.7, 0.7, 0.7};

  std::size_t triangle_count() const {
    std::size_t n = 0;
    for (const auto& m : meshes) n += m.triangles.size();
    return n;
  }

  void validate() const {
    if (triangle_count() == 0) throw ValidationError("scene: at least one triangle is required");
    if (texture.width <= 0 || texture.height <= 0 || texture.rgb.empty()) {
      throw ValidationError("scene: texture is empty");
    }
    for (const auto& m : meshes) {
      for (const auto& tri : m.triangles) {
        for (const auto& uv : tri.uv) {
          if (!(uv.x() >= 0.0 && uv.x() <= 1.0 && uv.y() >= 0.0 && uv.y() <= 1.0)) {
            throw ValidationError("scene: texture coordinates must lie in [0,1]^2");
          }
        }
      }
    }
    for (int c = 0; c < 3; ++c) {
      if (!(albedo[c] >= 0.0 && albedo[c] <= 1.0)) throw ValidationError("scene: albedo outside [0,1]");
    }
  }
};

// ---------------------------------------------------------------------------
// Lighting
// ---------------------------------------------------------------------------

struct LightingCondition {
  double theta = 45.0;  // latitude, degrees
  double phi = 0.0;     // longitude, degrees
  double top_intensity = 0.6;
  double moving_intensity = 0.8;

  void validate() const {
    if (!(theta >= 0.0 && theta <= 90.0)) throw ValidationError("lighting: theta outside [0, 90]");
    if (!(phi >= 0.0 && phi < 360.0)) throw ValidationError("lighting: phi outside [0, 360)");
  }
};

// Direction in which light travels from a source at latitude theta and
// longitude phi (+z up).
inline Vec3 light_direction(double theta_deg, double phi_deg) {
  const double th = theta_deg * kDegToRad;
  const double ph = phi_deg * kDegToRad;
  return -Vec3(std::cos(th) * std::cos(ph), std::cos(th) * std::sin(ph), std::sin(th));
}

// 8 latitudes x 7 longitudes, row-major by theta.
inline std::vector<LightingCondition> generate_lighting_grid(double top_intensity = 0.6,
                                                             double moving_intensity = 0.8) {
  std::vector<LightingCondition> grid;
  grid.reserve(56);
  for (int theta = 10; theta <= 80; theta += 10) {
    for (int phi = 0; phi <= 180; phi += 30) {
      grid.push_back({static_cast<double>(theta), static_cast<double>(phi), top_intensity,
                      moving_intensity});
    }
  }
  return grid;
}

// Eight conditions spread over the grid: one per latitude, longitude stepping
// by 90 degrees modulo the 7-entry longitude row.
inline std::vector<LightingCondition> desk_lighting_subset(const std::vector<LightingCondition>& grid) {
  std::vector<LightingCondition> out;
  for (std::size_t i = 0; i < 8 && i * 7 < grid.size(); ++i) {
    out.push_back(grid[i * 7 + (i * 3) % 7]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cameras and render profiles
// ---------------------------------------------------------------------------

enum class RenderMode { Synthetic, PseudoReal };

struct RenderProfile {
  RenderMode mode = RenderMode::Synthetic;
  double specular_strength = 0.0;
  double specular_exponent = 16.0;
  Vec3 gamma{1.0, 1.0, 1.0};
  double noise_sigma = 0.0;  // gray levels
  double vignette_strength = 0.0;
  std::uint64_t seed = 0;

  static RenderProfile synthetic() { return {}; }

  static RenderProfile pseudo_real(std::uint64_t seed = 0) {
    RenderProfile p;
    p.mode = RenderMode::PseudoReal;
    p.specular_strength = 0.3;
    p.specular_exponent = 16.0;
    p.gamma = {1.1, 1.0, 0.9};
    p.noise_sigma = 2.0;
    p.vignette_strength = 0.15;
    p.seed = seed;
    return p;
  }

  // SYNTHETIC ignores every perturbation.
  RenderProfile effective() const {
    if (mode == RenderMode::PseudoReal) return *this;
    RenderProfile p = synthetic();
    p.seed = seed;
    return p;
  }
};

struct CameraView {
  int id = 0;
  Intrinsics intrinsics;
  Pose pose;
  ProjectionMatrix P;
  LightingCondition lighting;
  RenderProfile profile;
  double yaw_deg = 180.0;
  int position_index = -1;

  static CameraView make(int id, const Intrinsics& intr, const Pose& pose,
                         const LightingCondition& light = {}, const RenderProfile& profile = {}) {
    CameraView v;
    v.id = id;
    v.intrinsics = intr;
    v.pose = pose;
    v.P = ProjectionMatrix::from(intr, pose);
    v.lighting = light;
    v.profile = profile;
    return v;
  }
};

// Rectangle of camera centres in front of the scene (at y = distance, looking
// toward -y) plus the point all cameras aim at before the yaw offset.
struct CameraGridExtents {
  double x_min = -30.0;
  double x_max = 30.0;
  double z_min = 70.0;
  double z_max = 100.0;
  double y = 110.0;
  Vec3 target = Vec3::Zero();

  void validate() const {
    if (!(x_max > x_min && z_max > z_min)) throw ValidationError("camera extents: empty rectangle");
    if (!((Vec3(0.5 * (x_min + x_max), y, 0.5 * (z_min + z_max)) - target).norm() > 1e-9)) {
      throw ValidationError("camera extents: target coincides with camera rectangle");
    }
  }
};

inline constexpr std::array<double, 5> kCameraYaws{170.0, 175.0, 180.0, 185.0, 190.0};

// Pose looking from `center` toward `target`, then turned about world +z so
// that yaw 180 is the straight-on view.
inline Pose yawed_look_pose(const Vec3& center, const Vec3& target, double yaw_deg) {
  const Vec3 forward0 = target - center;
  const Vec3 forward = rotation_about(Vec3::UnitZ(), (yaw_deg - 180.0) * kDegToRad) * forward0;
  return Pose::from_center(look_rotation(forward), center);
}

// 4x4 positions x 5 yaws = 80 views, position-major then yaw.
inline std::vector<CameraView> generate_camera_grid(const Intrinsics& base,
                                                    const CameraGridExtents& ext) {
  ext.validate();
  std::vector<CameraView> views;
  views.reserve(80);
  int id = 0;
  for (int row = 0; row < 4; ++row) {
    const double z = ext.z_max - row * (ext.z_max - ext.z_min) / 3.0;
    for (int col = 0; col < 4; ++col) {
      const double x = ext.x_min + col * (ext.x_max - ext.x_min) / 3.0;
      for (double yaw : kCameraYaws) {
        CameraView v = CameraView::make(id++, base, yawed_look_pose({x, ext.y, z}, ext.target, yaw));
        v.yaw_deg = yaw;
        v.position_index = row * 4 + col;
        views.push_back(v);
      }
    }
  }
  return views;
}

// One view per grid position, yaw cycling through the five angles.
inline std::vector<CameraView> desk_camera_subset(const std::vector<CameraView>& grid) {
  std::vector<CameraView> out;
  for (std::size_t p = 0; p < 16 && p * 5 < grid.size(); ++p) out.push_back(grid[p * 5 + p % 5]);
  return out;
}

// ---------------------------------------------------------------------------
// Ray casting
// ---------------------------------------------------------------------------

struct RayHit {
  double t = std::numeric_limits<double>::infinity();
  Vec3 point = Vec3::Zero();
  Vec3 normal = Vec3::Zero();
  Vec2 uv = Vec2::Zero();
};

namespace detail {

inline bool ray_box(const Vec3& o, const Vec3& inv_d, const Vec3& lo, const Vec3& hi, double t_max) {
  double t0 = 0.0;
  double t1 = t_max;
  for (int a = 0; a < 3; ++a) {
    double ta = (lo[a] - o[a]) * inv_d[a];
    double tb = (hi[a] - o[a]) * inv_d[a];
    if (ta > tb) std::swap(ta, tb);
    // NaN from 0 * inf is ignored by the comparisons below.
    if (ta > t0) t0 = ta;
    if (tb < t1) t1 = tb;
    if (t0 > t1 + 1e-9) return false;
  }
  return true;
}

// Moller-Trumbore. Returns t and barycentrics (b1, b2).
inline bool ray_triangle(const Vec3& o, const Vec3& d, const Triangle& tri, double& t, double& b1,
                         double& b2) {
  const Vec3 e1 = tri.v[1] - tri.v[0];
  const Vec3 e2 = tri.v[2] - tri.v[0];
  const Vec3 p = d.cross(e2);
  const double det = e1.dot(p);
  if (std::abs(det) < 1e-14) return false;
  const double inv = 1.0 / det;
  const Vec3 s = o - tri.v[0];
  b1 = s.dot(p) * inv;
  if (b1 < 0.0 || b1 > 1.0) return false;
  const Vec3 q = s.cross(e1);
  b2 = d.dot(q) * inv;
  if (b2 < 0.0 || b1 + b2 > 1.0) return false;
  t = e2.dot(q) * inv;
  return t > 1e-9;
}

}  // namespace detail

// Nearest intersection along origin + t * dir, t > 0.
inline std::optional<RayHit> intersect(const Scene& scene, const Vec3& origin, const Vec3& dir) {
  const Vec3 inv_d = dir.cwiseInverse();
  RayHit best;
  const Triangle* best_tri = nullptr;
  double best_b1 = 0.0;
  double best_b2 = 0.0;
  for (const auto& mesh : scene.meshes) {
    if (!detail::ray_box(origin, inv_d, mesh.lo, mesh.hi, best.t)) continue;
    for (const auto& tri : mesh.triangles) {
      double t, b1, b2;
      if (detail::ray_triangle(origin, dir, tri, t, b1, b2) && t < best.t) {
        best.t = t;
        best_tri = &tri;
        best_b1 = b1;
        best_b2 = b2;
      }
    }
  }
  if (!best_tri) return std::nullopt;
  const double b0 = 1.0 - best_b1 - best_b2;
  best.point = b0 * best_tri->v[0] + best_b1 * best_tri->v[1] + best_b2 * best_tri->v[2];
  best.uv = b0 * best_tri->uv[0] + best_b1 * best_tri->uv[1] + best_b2 * best_tri->uv[2];
  best.normal = best_tri->normal();
  return best;
}

// Back-projected ray through an image location: origin at the camera centre,
// direction in world coordinates (not normalized; depth 1 in camera frame).
inline std::pair<Vec3, Vec3> pixel_ray(const CameraView& view, const ImagePoint& px) {
  const Intrinsics& k = view.intrinsics;
  const Vec3 cam((px.x() - k.cx) / k.fx, (px.y() - k.cy) / k.fy, 1.0);
  return {view.pose.center(), view.pose.R.transpose() * cam};
}

// Scene point seen at `pixel`, or nullopt for a miss.
inline std::optional<ScenePoint> raycast(const Scene& scene, const CameraView& view,
                                         const ImagePoint& pixel) {
  const Intrinsics& k = view.intrinsics;
  if (!(pixel.x() >= -0.5 && pixel.x() <= k.width - 0.5 && pixel.y() >= -0.5 &&
        pixel.y() <= k.height - 0.5)) {
    throw ValidationError("raycast: pixel outside image bounds");
  }
  const auto [o, d] = pixel_ray(view, pixel);
  if (auto hit = intersect(scene, o, d)) return hit->point;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

// Linear radiance (before gamma) at a hit, for a ray travelling along `dir`.
inline Vec3 shade(const Scene& scene, const RayHit& hit, const Vec3& dir,
                  const LightingCondition& light, const RenderProfile& profile) {
  Vec3 n = hit.normal;
  if (n.dot(dir) > 0.0) n = -n;
  const Vec3 base = scene.albedo.cwiseProduct(scene.texture.sample(hit.uv));

  const std::array<std::pair<Vec3, double>, 2> lights{
      std::pair{Vec3(0.0, 0.0, -1.0), light.top_intensity},
      std::pair{light_direction(light.theta, light.phi), light.moving_intensity}};

  double diffuse = 0.0;
  double specular = 0.0;
  const Vec3 view_dir = -dir.normalized();
  for (const auto& [travel, intensity] : lights) {
    const Vec3 to_light = -travel;
    const double ndl = n.dot(to_light);
    if (ndl <= 0.0) continue;
    diffuse += intensity * ndl;
    if (profile.specular_strength > 0.0) {
      const Vec3 r = 2.0 * ndl * n - to_light;
      const double rv = std::max(0.0, r.dot(view_dir));
      specular += intensity * std::pow(rv, profile.specular_exponent);
    }
  }
  return base * diffuse + Vec3::Constant(profile.specular_strength * specular);
}

inline Image render(const Scene& scene, const CameraView& view) {
  const Intrinsics& k = view.intrinsics;
  const RenderProfile prof = view.profile.effective();
  const bool pseudo_real = prof.mode == RenderMode::PseudoReal;
  Image img(k.width, k.height);
  Rng noise(derive_seed(prof.seed, "render-noise", static_cast<std::uint64_t>(view.id)));
  const double r_max2 = 0.25 * (static_cast<double>(k.width) * k.width +
                                static_cast<double>(k.height) * k.height);
  bool any_hit = false;
  const Vec3 origin = view.pose.center();
  const Mat3 Rt = view.pose.R.transpose();

  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      const Vec3 dir = Rt * Vec3((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
      Vec3 c = Vec3::Zero();
      if (auto hit = intersect(scene, origin, dir)) {
        any_hit = true;
        c = shade(scene, *hit, dir, view.lighting, prof);
      }
      if (pseudo_real) {
        for (int ch = 0; ch < 3; ++ch) c[ch] = std::pow(std::clamp(c[ch], 0.0, 1.0), prof.gamma[ch]);
        const double dx = x - 0.5 * (k.width - 1);
        const double dy = y - 0.5 * (k.height - 1);
        c *= 1.0 - prof.vignette_strength * (dx * dx + dy * dy) / r_max2;
      }
      std::uint8_t* px = img.at(x, y);
      for (int ch = 0; ch < 3; ++ch) {
        double v = 255.0 * c[ch];
        if (pseudo_real && prof.noise_sigma > 0.0) v += prof.noise_sigma * noise.normal();
        px[ch] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  if (!any_hit) throw EmptyView("view " + std::to_string(view.id) + " sees no geometry");
  return img;
}

// ---------------------------------------------------------------------------
// Procedural scene
// ---------------------------------------------------------------------------

struct BoxSpec {
  Vec2 center;  // x, y on the ground plane
  Vec3 size;    // sx, sy, height
};

struct ProceduralSceneParams {
  double plane_size = 100.0;
  std::vector<BoxSpec> boxes{{{-25.0, -12.0}, {20.0, 16.0, 24.0}},
                             {{22.0, -26.0}, {16.0, 20.0, 34.0}},
                             {{4.0, 22.0}, {12.0, 12.0, 12.0}}};
  std::uint64_t texture_seed = 7;
  double texels_per_cm = 10.0;
  std::vector<int> cell_sizes_cm{2, 3, 4, 5};
  double checker_contrast = 0.45;  // brightness drop of odd cells
  double texture_noise = 0.04;
  Vec3 albedo{0.7, 0.7, 0.7};
  std::optional<std::filesystem::path> texture_path;
  std::vector<Triangle> extra_triangles;
};

namespace detail {

struct AtlasRect {
  int x = 0, y = 0, w = 0, h = 0;  // texels
};

// Axis-aligned rectangles in the scene mapped onto a texture atlas.
struct Face {
  Vec3 origin, axis_u, axis_v;  // origin + s*axis_u + t*axis_v, s,t in cm
  double width_cm, height_cm;
  AtlasRect rect;
};

inline std::vector<float> mosaic_breaks(int extent_texels, int texels_per_cm,
                                        const std::vector<int>& sizes, Rng& rng) {
  std::vector<float> b{0.0f};
  while (b.back() < extent_texels) {
    b.push_back(b.back() + static_cast<float>(sizes[rng.index(sizes.size())] * texels_per_cm));
  }
  return b;
}

// Irregular checkerboard: random row/column widths, random colour per cell,
// alternate cells darkened, plus fine per-texel noise.
inline Texture mosaic_texture(int w, int h, const ProceduralSceneParams& p) {
  Rng rng(derive_seed(p.texture_seed, "mosaic"));
  const int tpc = static_cast<int>(std::lround(p.texels_per_cm));
  const auto cols = mosaic_breaks(w, tpc, p.cell_sizes_cm, rng);
  const auto rows = mosaic_breaks(h, tpc, p.cell_sizes_cm, rng);
  const std::size_t nc = cols.size(), nr = rows.size();
  std::vector<Vec3> colours(nc * nr);
  for (auto& c : colours) c = Vec3(rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0));

  Texture tex(w, h);
  std::size_t row = 0;
  for (int y = 0; y < h; ++y) {
    while (row + 1 < nr && rows[row + 1] <= y) ++row;
    std::size_t col = 0;
    for (int x = 0; x < w; ++x) {
      while (col + 1 < nc && cols[col + 1] <= x) ++col;
      Vec3 c = colours[row * nc + col];
      if ((row + col) % 2 == 1) c *= 1.0 - p.checker_contrast;
      float* t = tex.texel(x, y);
      for (int ch = 0; ch < 3; ++ch) {
        const double v = c[ch] * (1.0 + p.texture_noise * (2.0 * rng.uniform() - 1.0));
        t[ch] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return tex;
}

inline Texture texture_from_image(const Image& img) {
  Texture tex(img.width, img.height);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) tex.rgb[i] = img.rgb[i] / 255.0f;
  return tex;
}

}  // namespace detail

// Ground plane centred at the origin (z = 0, +z up) with box protrusions. The
// plane and every visible box face get their own region of one texture atlas.
inline Scene make_procedural_scene(const ProceduralSceneParams& p) {
  using detail::Face;
  const int tpc = static_cast<int>(std::lround(p.texels_per_cm));
  if (tpc < 1) throw ValidationError("scene: texels_per_cm must be >= 1");
  if (!(p.plane_size > 0.0)) throw ValidationError("scene: plane_size must be positive");
  const double half = 0.5 * p.plane_size;

  std::vector<Face> faces;
  faces.push_back({{-half, -half, 0.0}, Vec3::UnitX(), Vec3::UnitY(), p.plane_size, p.plane_size, {}});
  for (const auto& b : p.boxes) {
    if (!(b.size.minCoeff() > 0.0)) throw ValidationError("scene: box sizes must be positive");
    const double x0 = b.center.x() - 0.5 * b.size.x(), x1 = b.center.x() + 0.5 * b.size.x();
    const double y0 = b.center.y() - 0.5 * b.size.y(), y1 = b.center.y() + 0.5 * b.size.y();
    const double h = b.size.z();
    faces.push_back({{x0, y0, h}, Vec3::UnitX(), Vec3::UnitY(), b.size.x(), b.size.y(), {}});  // top
    faces.push_back({{x0, y1, 0.0}, Vec3::UnitX(), Vec3::UnitZ(), b.size.x(), h, {}});       // +y
    faces.push_back({{x0, y0, 0.0}, Vec3::UnitX(), Vec3::UnitZ(), b.size.x(), h, {}});       // -y
    faces.push_back({{x1, y0, 0.0}, Vec3::UnitY(), Vec3::UnitZ(), b.size.y(), h, {}});       // +x
    faces.push_back({{x0, y0, 0.0}, Vec3::UnitY(), Vec3::UnitZ(), b.size.y(), h, {}});       // -x
  }

  // Shelf packing: the plane occupies the first shelf, box faces follow.
  const int atlas_w = static_cast<int>(std::ceil(p.plane_size * tpc));
  int cursor_x = 0, cursor_y = 0, shelf_h = 0;
  for (auto& f : faces) {
    const int w = static_cast<int>(std::ceil(f.width_cm * tpc));
    const int h = static_cast<int>(std::ceil(f.height_cm * tpc));
    if (w > atlas_w) throw ValidationError("scene: face wider than the ground plane");
    if (cursor_x + w > atlas_w) {
      cursor_x = 0;
      cursor_y += shelf_h;
      shelf_h = 0;
    }
    f.rect = {cursor_x, cursor_y, w, h};
    cursor_x += w;
    shelf_h = std::max(shelf_h, h);
  }
  const int atlas_h = cursor_y + shelf_h;

  Scene scene;
  scene.albedo = p.albedo;
  if (p.texture_path) {
    scene.texture = detail::texture_from_image(read_ppm(*p.texture_path));
  } else {
    scene.texture = detail::mosaic_texture(atlas_w, atlas_h, p);
  }
  const double tw = scene.texture.width, th = scene.texture.height;
  const double sx = tw / atlas_w, sy = th / atlas_h;

  for (std::size_t i = 0; i < faces.size(); ++i) {
    const Face& f = faces[i];
    auto corner = [&](double s, double t) -> std::pair<Vec3, Vec2> {
      const Vec3 pos = f.origin + s * f.axis_u + t * f.axis_v;
      const Vec2 uv((f.rect.x + s * tpc) * sx / tw, (f.rect.y + t * tpc) * sy / th);
      return {pos, uv.cwiseMax(0.0).cwiseMin(1.0)};
    };
    const auto a = corner(0, 0), b = corner(f.width_cm, 0), c = corner(f.width_cm, f.height_cm),
               d = corner(0, f.height_cm);
    // Ground plane and each box are separate meshes; box faces share one.
    if (i == 0 || (i - 1) % 5 == 0) scene.meshes.emplace_back();
    Mesh& mesh = scene.meshes.back();
    mesh.add({{a.first, b.first, c.first}, {a.second, b.second, c.second}});
    mesh.add({{a.first, c.first, d.first}, {a.second, c.second, d.second}});
  }
  if (!p.extra_triangles.empty()) {
    scene.meshes.emplace_back();
    for (const auto& tri : p.extra_triangles) scene.meshes.back().add(tri);
  }
  scene.validate();
  return scene;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

namespace detail {
inline Vec3 json_vec3(const nlohmann::json& j, const std::string& field) {
  if (!j.is_array() || j.size() != 3) throw ValidationError("scene." + field + ": expected 3 numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}
inline Vec2 json_vec2(const nlohmann::json& j, const std::string& field) {
  if (!j.is_array() || j.size() != 2) throw ValidationError("scene." + field + ": expected 2 numbers");
  return {j[0].get<double>(), j[1].get<double>()};
}
}  // namespace detail

// Reads the "scene" object of a config. Relative texture paths resolve
// against `base_dir`. Missing fields keep their defaults.
inline ProceduralSceneParams scene_params_from_json(const nlohmann::json& j,
                                                    const std::filesystem::path& base_dir = {}) {
  ProceduralSceneParams p;
  if (j.is_null()) return p;
  if (!j.is_object()) throw ValidationError("scene: expected an object");
  try {
    p.plane_size = j.value("plane_size", p.plane_size);
    if (j.contains("boxes")) {
      p.boxes.clear();
      for (std::size_t i = 0; i < j["boxes"].size(); ++i) {
        const auto& b = j["boxes"][i];
        const std::string f = "boxes[" + std::to_string(i) + "]";
        p.boxes.push_back({detail::json_vec2(b.at("center"), f + ".center"),
                           detail::json_vec3(b.at("size"), f + ".size")});
      }
    }
    if (j.contains("triangles")) {
      for (std::size_t i = 0; i < j["triangles"].size(); ++i) {
        const auto& t = j["triangles"][i];
        const std::string f = "triangles[" + std::to_string(i) + "]";
        Triangle tri;
        for (int k = 0; k < 3; ++k) {
          tri.v[k] = detail::json_vec3(t.at("v").at(k), f + ".v");
          tri.uv[k] = detail::json_vec2(t.at("uv").at(k), f + ".uv");
        }
        p.extra_triangles.push_back(tri);
      }
    }
    if (j.contains("albedo")) p.albedo = detail::json_vec3(j["albedo"], "albedo");
    if (j.contains("texture")) {
      const auto& t = j["texture"];
      p.texture_seed = t.value("seed", p.texture_seed);
      p.texels_per_cm = t.value("texels_per_cm", p.texels_per_cm);
      p.checker_contrast = t.value("checker_contrast", p.checker_contrast);
      p.texture_noise = t.value("noise", p.texture_noise);
      if (t.contains("cell_sizes_cm")) p.cell_sizes_cm = t["cell_sizes_cm"].get<std::vector<int>>();
      if (t.contains("path")) {
        std::filesystem::path path = t["path"].get<std::string>();
        p.texture_path = path.is_absolute() ? path : base_dir / path;
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("scene: ") + e.what());
  }
  if (p.cell_sizes_cm.empty()) throw ValidationError("scene.texture.cell_sizes_cm: must be nonempty");
  return p;
}

}  // namespace illumloc
