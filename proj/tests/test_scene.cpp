#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "illumloc/image.hpp"
#include "illumloc/scene.hpp"

using namespace illumloc;

namespace {

const Intrinsics kSmall{130.0, 130.0, 63.5, 47.5, 128, 96};

CameraView front_view(int id = 0, const RenderProfile& profile = RenderProfile::synthetic()) {
  return CameraView::make(id, kSmall, yawed_look_pose({0.0, 110.0, 85.0}, Vec3::Zero(), 180.0), {45.0, 60.0},
                          profile);
}

const Scene& scene() {
  static const Scene s = make_procedural_scene({});
  return s;
}

}  // namespace

TEST(Scene, LightingGridHas56Conditions) {
  const auto grid = generate_lighting_grid();
  ASSERT_EQ(grid.size(), 56u);
  EXPECT_EQ(grid.front().theta, 10.0);
  EXPECT_EQ(grid.front().phi, 0.0);
  EXPECT_EQ(grid.back().theta, 80.0);
  EXPECT_EQ(grid.back().phi, 180.0);
  std::set<std::pair<double, double>> unique;
  for (const auto& l : grid) unique.insert({l.theta, l.phi});
  EXPECT_EQ(unique.size(), 56u);
}

TEST(Scene, DeskSubsetsAreDistinctGridMembers) {
  const auto lights = desk_lighting_subset(generate_lighting_grid());
  ASSERT_EQ(lights.size(), 8u);
  std::set<double> thetas;
  for (const auto& l : lights) thetas.insert(l.theta);
  EXPECT_EQ(thetas.size(), 8u);

  const auto cams = generate_camera_grid(kSmall, {});
  ASSERT_EQ(cams.size(), 80u);
  const auto desk = desk_camera_subset(cams);
  ASSERT_EQ(desk.size(), 16u);
  std::set<int> positions;
  for (const auto& v : desk) positions.insert(v.position_index);
  EXPECT_EQ(positions.size(), 16u);
  EXPECT_EQ(lights.size() * desk.size(), 128u);
}

TEST(Scene, LightDirectionPointsDownward) {
  for (const auto& l : generate_lighting_grid()) {
    const Vec3 d = light_direction(l.theta, l.phi);
    EXPECT_NEAR(d.norm(), 1.0, 1e-12);
    EXPECT_LT(d.z(), 0.0);
  }
}

TEST(Scene, CameraGridLooksAtScene) {
  for (const auto& v : generate_camera_grid(kSmall, {})) {
    EXPECT_TRUE(v.pose.is_valid(1e-9));
    EXPECT_GT(projective_depth(v.P, ScenePoint::Zero()), 0.0);
  }
}

TEST(Scene, RaycastHitReprojectsToPixel) {
  const CameraView v = front_view();
  int hits = 0;
  for (int y = 4; y < kSmall.height; y += 9) {
    for (int x = 4; x < kSmall.width; x += 9) {
      const ImagePoint u(x + 0.25, y - 0.25);
      const auto p = raycast(scene(), v, u);
      if (!p) continue;
      ++hits;
      EXPECT_LT(reprojection_error(v.P, *p, u), 1e-6);
    }
  }
  EXPECT_GT(hits, 50);
  EXPECT_THROW(raycast(scene(), v, ImagePoint(-3.0, 10.0)), ValidationError);
}

TEST(Scene, RenderIsDeterministic) {
  const CameraView v = front_view(3, RenderProfile::pseudo_real(5));
  EXPECT_EQ(render(scene(), v), render(scene(), v));
}

TEST(Scene, PseudoRealDiffersFromSynthetic) {
  const Image syn = render(scene(), front_view(0));
  const Image real = render(scene(), front_view(0, RenderProfile::pseudo_real(1)));
  ASSERT_EQ(syn.rgb.size(), real.rgb.size());
  double diff = 0.0;
  for (std::size_t i = 0; i < syn.rgb.size(); ++i) diff += std::abs(int(syn.rgb[i]) - int(real.rgb[i]));
  EXPECT_GT(diff / syn.rgb.size(), 2.0);
}

TEST(Scene, SyntheticProfileIgnoresPerturbations) {
  RenderProfile p = RenderProfile::pseudo_real(9);
  p.mode = RenderMode::Synthetic;
  EXPECT_EQ(render(scene(), front_view(0, p)), render(scene(), front_view(0)));
}

TEST(Scene, EmptyViewThrows) {
  const CameraView away = CameraView::make(0, kSmall, yawed_look_pose({0, 110, 85}, {0, 300, 150}, 180.0));
  EXPECT_THROW(render(scene(), away), EmptyView);
}

TEST(Scene, PpmRoundTrip) {
  const Image img = render(scene(), front_view());
  const auto path = std::filesystem::temp_directory_path() / "illumloc_scene_roundtrip.ppm";
  write_ppm(path, img);
  EXPECT_EQ(read_ppm(path), img);
  std::filesystem::remove(path);
}

TEST(Scene, JsonParamsOverrideDefaults) {
  const auto p = scene_params_from_json(nlohmann::json::parse(
      R"({"plane_size": 80, "boxes": [{"center": [0, 0], "size": [10, 10, 5]}], "texture": {"seed": 3}})"));
  EXPECT_EQ(p.plane_size, 80.0);
  ASSERT_EQ(p.boxes.size(), 1u);
  EXPECT_EQ(p.texture_seed, 3u);
  EXPECT_THROW(scene_params_from_json(nlohmann::json::parse(R"({"boxes": [{"center": [0]}]})")), ValidationError);
}
