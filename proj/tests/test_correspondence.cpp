#include <gtest/gtest.h>

#include <algorithm>
#include <limits>

#include "illumloc/correspondence.hpp"

using namespace illumloc;

namespace {

FeatureCluster random_cluster(Rng& rng, std::size_t n, int dim, const LatticeKey& key, Origin origin,
                              double shift = 0.0) {
  FeatureCluster c;
  c.key = key;
  c.origin = origin;
  for (std::size_t i = 0; i < n; ++i) {
    FeatureRecord r;
    r.descriptor = Descriptor(dim);
    for (int k = 0; k < dim; ++k) r.descriptor[k] = static_cast<float>(shift + rng.normal() * (1.0 + 0.3 * k));
    r.origin = origin;
    c.members.push_back(r);
  }
  return c;
}

}  // namespace

TEST(Correspondence, AssignmentMatchesBruteForce) {
  Rng rng(21);
  const Intrinsics K{650, 650, 319.5, 239.5, 640, 480};
  for (int trial = 0; trial < 500; ++trial) {
    const Pose pose = Pose::from_center(look_rotation(Vec3(rng.uniform(-0.3, 0.3), -1.0, -0.8)),
                                        Vec3(rng.uniform(-20, 20), 110, rng.uniform(70, 100)));
    const auto P = ProjectionMatrix::from(K, pose);
    std::vector<ScenePoint> pts;
    const std::size_t n = 1 + rng.index(40);
    for (std::size_t i = 0; i < n; ++i) pts.emplace_back(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(0, 30));
    // Duplicates exercise the lowest-index tie-break.
    if (n > 3 && trial % 4 == 0) pts[n - 1] = pts[1];
    const ScenePoint target = pts[rng.index(n)];
    const ImagePoint u = project(P, target) + Vec2(rng.uniform(-4, 4), rng.uniform(-4, 4));

    std::size_t best = 0;
    double best_err = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 c = pose.R * pts[i] + pose.t;
      const double du = K.fx * c.x() / c.z() + K.cx - u.x(), dv = K.fy * c.y() / c.z() + K.cy - u.y();
      const double e = std::sqrt(du * du + dv * dv);
      if (e < best_err) best_err = e, best = i;
    }
    const auto got = assign_scene_point(u, P, pts, 3.0);
    if (best_err <= 3.0) {
      ASSERT_TRUE(got.has_value()) << "trial " << trial;
      EXPECT_EQ(got->index, best) << "trial " << trial;
      EXPECT_NEAR(got->error_px, best_err, 1e-9);
    } else {
      EXPECT_FALSE(got.has_value()) << "trial " << trial;
    }
  }
}

TEST(Correspondence, AssignmentRejectsPointsBehindCamera) {
  const Intrinsics K{100, 100, 50, 50, 100, 100};
  const auto P = ProjectionMatrix::from(K, Pose{});
  const std::vector<ScenePoint> pts{ScenePoint(0, 0, -10)};
  // Projects to the principal point, but from behind.
  EXPECT_FALSE(assign_scene_point({50, 50}, P, pts).has_value());
}

TEST(Correspondence, ClustersPartitionByCellAndOrigin) {
  Rng rng(22);
  std::vector<FeatureRecord> feats;
  for (int i = 0; i < 600; ++i) {
    FeatureRecord r;
    r.descriptor = Descriptor::Zero(4);
    r.origin = i % 2 ? Origin::Real : Origin::Synthetic;
    if (i % 7 != 0) r.scene_point = ScenePoint(rng.index(6) * 0.5 + rng.uniform(-0.2, 0.2), rng.index(3) * 0.5, 0.0);
    feats.push_back(r);
  }
  const auto clusters = build_clusters(feats, 0.5);
  std::size_t total = 0;
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    total += clusters[c].size();
    for (const auto& m : clusters[c].members) {
      EXPECT_EQ(lattice_key(*m.scene_point, 0.5), clusters[c].key);
      EXPECT_EQ(m.origin, clusters[c].origin);
    }
    if (c > 0) {
      EXPECT_TRUE(std::pair(clusters[c - 1].key, clusters[c - 1].origin) < std::pair(clusters[c].key, clusters[c].origin));
    }
  }
  std::size_t with_point = 0;
  for (const auto& f : feats) with_point += f.scene_point ? 1 : 0;
  EXPECT_EQ(total, with_point);
}

TEST(Correspondence, WhiteningStatistics) {
  Rng rng(23);
  for (int trial = 0; trial < 500; ++trial) {
    const int d = 2 + static_cast<int>(rng.index(6));
    const int n = d + 5 + static_cast<int>(rng.index(40));
    Eigen::MatrixXd A(d, d), X(d, n);
    for (int i = 0; i < d * d; ++i) A(i / d, i % d) = rng.normal();
    // Random rotation times bounded scales keeps the covariance well conditioned.
    const Eigen::MatrixXd Q = Eigen::HouseholderQR<Eigen::MatrixXd>(A).householderQ();
    Eigen::VectorXd scales(d);
    for (int i = 0; i < d; ++i) scales[i] = rng.uniform(0.3, 3.0);
    A = Q * scales.asDiagonal();
    for (int i = 0; i < d * n; ++i) X(i % d, i / d) = rng.normal();
    X = A * X;
    X.colwise() += Eigen::VectorXd::Constant(d, rng.uniform(-5, 5));
    const auto kind = trial % 2 ? WhiteningKind::ZCA : WhiteningKind::PCA;
    const auto w = fit_whitening(X, 1e-12, kind);
    const Eigen::MatrixXd Y = w.apply_columns(X);
    const Eigen::VectorXd mean = Y.rowwise().mean();
    const Eigen::MatrixXd cov = (Y.colwise() - mean) * (Y.colwise() - mean).transpose() / double(n - 1);
    EXPECT_LT(mean.cwiseAbs().maxCoeff(), 1e-6) << "trial " << trial;
    EXPECT_LT((cov - Eigen::MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff(), 1e-6) << "trial " << trial;
    if (kind == WhiteningKind::ZCA) EXPECT_LT((w.W - w.W.transpose()).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Correspondence, WhiteningNeedsTwoSamples) {
  EXPECT_THROW(fit_whitening(Eigen::MatrixXd::Ones(3, 1)), ClusterTooSmall);
  // Constant samples stay finite thanks to the regularizer.
  const auto w = fit_whitening(Eigen::MatrixXd::Ones(3, 4));
  EXPECT_TRUE(w.W.allFinite());
}

TEST(Correspondence, KFollowsFloorOfGammaSqrtN) {
  EXPECT_EQ(compute_k(100), 2u);
  EXPECT_EQ(compute_k(25), 1u);
  EXPECT_EQ(compute_k(1), 1u);
  EXPECT_EQ(compute_k(2500), 10u);
  EXPECT_EQ(compute_k(100, {0.4, 1}), 4u);
  EXPECT_EQ(compute_k(3, {5.0, 1}), 3u);
  EXPECT_EQ(compute_k(10, {0.2, 4}), 4u);
  EXPECT_THROW(compute_k(0), ValidationError);
}

TEST(Correspondence, WhitenedKnnMatchesBruteForce) {
  Rng rng(24);
  for (int trial = 0; trial < 500; ++trial) {
    const int d = 2 + static_cast<int>(rng.index(5));
    const LatticeKey key{trial, 0, 0};
    const auto real = random_cluster(rng, 2 + rng.index(10), d, key, Origin::Real, 1.0);
    const auto syn = random_cluster(rng, 2 + rng.index(60), d, key, Origin::Synthetic);
    PairingOptions opt;
    opt.augmentation.gamma = rng.uniform(0.2, 1.0);
    opt.space = trial % 3 == 0 ? PairingSpace::Raw : PairingSpace::Whitened;
    opt.whitening = trial % 2 ? WhiteningKind::ZCA : WhiteningKind::PCA;
    const auto pairs = make_training_pairs(real, syn, opt);
    const std::size_t k = compute_k(syn.size(), opt.augmentation);
    ASSERT_EQ(pairs.size(), real.size() * k);

    const Eigen::MatrixXd rm = descriptor_matrix(real.members), sm = descriptor_matrix(syn.members);
    std::optional<WhiteningTransform> wr, ws;
    if (opt.space == PairingSpace::Whitened) {
      wr = fit_whitening(rm, opt.epsilon, opt.whitening);
      ws = fit_whitening(sm, opt.epsilon, opt.whitening);
    }
    for (std::size_t i = 0; i < real.size(); ++i) {
      const Eigen::VectorXd q = wr ? wr->apply(rm.col(i)) : Eigen::VectorXd(rm.col(i));
      std::vector<std::pair<double, std::size_t>> all;
      for (std::size_t j = 0; j < syn.size(); ++j) {
        const Eigen::VectorXd s = ws ? ws->apply(sm.col(j)) : Eigen::VectorXd(sm.col(j));
        double dist = 0.0;
        for (int c = 0; c < d; ++c) dist += (q[c] - s[c]) * (q[c] - s[c]);
        all.push_back({dist, j});
      }
      std::sort(all.begin(), all.end());
      for (std::size_t n = 0; n < k; ++n) {
        const auto& p = pairs[i * k + n];
        EXPECT_EQ(p.input, real.members[i].descriptor);
        EXPECT_EQ(p.target, syn.members[all[n].second].descriptor) << "trial " << trial << " member " << i;
        EXPECT_EQ(p.cluster_key, key);
      }
    }
  }
}

TEST(Correspondence, PairingRequiresMatchingKeys) {
  Rng rng(25);
  const auto real = random_cluster(rng, 4, 3, {0, 0, 0}, Origin::Real);
  const auto syn = random_cluster(rng, 4, 3, {1, 0, 0}, Origin::Synthetic);
  EXPECT_THROW(make_training_pairs(real, syn), ValidationError);
}

TEST(Correspondence, WhitenedPairingUndoesAffineGap) {
  // Real = A * synthetic + b for matched members: whitening recovers the
  // matching that raw nearest neighbour misses.
  Rng rng(26);
  const int d = 3;
  const auto syn = random_cluster(rng, 400, d, {0, 0, 0}, Origin::Synthetic);
  FeatureCluster real;
  real.origin = Origin::Real;
  for (const auto& m : syn.members) {
    FeatureRecord r = m;
    r.origin = Origin::Real;
    r.descriptor = (m.descriptor * 1.8f).array() + 4.0f;
    real.members.push_back(r);
  }
  PairingOptions w;
  w.augmentation.gamma = 0.01;
  w.whitening = WhiteningKind::ZCA;
  PairingOptions raw = w;
  raw.space = PairingSpace::Raw;
  const auto pw = make_training_pairs(real, syn, w);
  const auto pr = make_training_pairs(real, syn, raw);
  std::size_t right_w = 0, right_r = 0;
  for (std::size_t i = 0; i < syn.size(); ++i) {
    right_w += pw[i].target == syn.members[i].descriptor;
    right_r += pr[i].target == syn.members[i].descriptor;
  }
  EXPECT_GT(right_w, 390u);
  EXPECT_LT(right_r, 100u);
}
