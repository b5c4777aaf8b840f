#include <gtest/gtest.h>

#include "illumloc/common.hpp"
#include "illumloc/geometry.hpp"

using namespace illumloc;

namespace {

Pose random_pose(Rng& rng) {
  const Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  return {rotation_about(axis, rng.uniform(-3.0, 3.0)), Vec3(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(20, 40))};
}

}  // namespace

TEST(Geometry, ProjectionMatchesPinholeFormula) {
  Rng rng(11);
  const Intrinsics K{650.0, 640.0, 319.5, 239.5, 640, 480};
  for (int i = 0; i < 1000; ++i) {
    const Pose pose = random_pose(rng);
    const ScenePoint x(rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-10, 10));
    const Vec3 c = pose.R * x + pose.t;
    ASSERT_GT(c.z(), 0.0);
    const ImagePoint u = project(ProjectionMatrix::from(K, pose), x);
    EXPECT_NEAR(u.x(), K.fx * c.x() / c.z() + K.cx, 1e-9);
    EXPECT_NEAR(u.y(), K.fy * c.y() / c.z() + K.cy, 1e-9);
    EXPECT_NEAR(projective_depth(ProjectionMatrix::from(K, pose), x), c.z(), 1e-9);
  }
}

TEST(Geometry, DivideByZeroDepthThrows) {
  EXPECT_THROW(perspective_divide(Vec3(1.0, 2.0, 0.0)), DegenerateProjection);
  EXPECT_THROW(perspective_divide(Vec3(1.0, 2.0, 1e-13)), DegenerateProjection);
  EXPECT_NO_THROW(perspective_divide(Vec3(1.0, 2.0, -1.0)));
}

TEST(Geometry, ReprojectionErrorIsPixelDistance) {
  const Intrinsics K{100.0, 100.0, 50.0, 50.0, 100, 100};
  const auto P = ProjectionMatrix::from(K, Pose{});
  EXPECT_NEAR(reprojection_error(P, ScenePoint(0, 0, 10), ImagePoint(53, 54)), 5.0, 1e-12);
}

TEST(Geometry, PoseErrors) {
  const Pose gt = Pose::from_center(rotation_about(Vec3::UnitY(), 0.3), Vec3(1, 2, 3));
  const Pose est = Pose::from_center(rotation_about(Vec3(1, 1, 0), 10.0 * kDegToRad) * gt.R, Vec3(4, 6, 3));
  EXPECT_NEAR(position_error(est, gt), 5.0, 1e-12);
  EXPECT_NEAR(orientation_error(est, gt), 10.0, 1e-9);
  EXPECT_NEAR(orientation_error(gt, gt), 0.0, 1e-6);
}

TEST(Geometry, NearestRotationProjectsOntoSO3) {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const Mat3 R = random_pose(rng).R;
    EXPECT_LT((nearest_rotation(R) - R).norm(), 1e-12);
    Mat3 noisy = R;
    for (int k = 0; k < 9; ++k) noisy(k / 3, k % 3) += 0.05 * rng.normal();
    const Mat3 Q = nearest_rotation(noisy);
    EXPECT_TRUE((Pose{Q, Vec3::Zero()}).is_valid(1e-9));
  }
}

TEST(Geometry, LookRotationPointsOpticalAxisForward) {
  const Vec3 f = Vec3(0.2, -1.0, -0.7).normalized();
  const Mat3 R = look_rotation(f);
  EXPECT_LT((R * f - Vec3::UnitZ()).norm(), 1e-12);
  EXPECT_NEAR(R.determinant(), 1.0, 1e-12);
  // World up appears towards the top of the image (negative camera y).
  EXPECT_LT((R * Vec3::UnitZ()).y(), 0.0);
}

TEST(Geometry, SeedDerivationIsStableAndLabelled) {
  EXPECT_EQ(derive_seed(1, "forest"), derive_seed(1, "forest"));
  EXPECT_NE(derive_seed(1, "forest"), derive_seed(1, "rest"));
  EXPECT_NE(derive_seed(1, "ransac", 0), derive_seed(1, "ransac", 1));
  EXPECT_NE(derive_seed(1, "forest"), derive_seed(2, "forest"));
}
