#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "illumloc/common.hpp"
#include "illumloc/features.hpp"
#include "illumloc/geometry.hpp"

namespace illumloc {

class ClusterTooSmall : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// ---------------------------------------------------------------------------
// Scene point assignment
// ---------------------------------------------------------------------------

struct Assignment {
  std::size_t index = 0;  // into the candidate point list
  double error_px = 0.0;
};

// argmin over `points` of the reprojection error of u under P. Points on the
// principal plane are skipped; ties keep the lowest index. Rejected (nullopt)
// when the minimum exceeds max_px or the winning point is behind the camera.
inline std::optional<Assignment> assign_scene_point(const ImagePoint& u, const ProjectionMatrix& P,
                                                    std::span<const ScenePoint> points,
                                                    double max_px = 3.0) {
  std::optional<Assignment> best;
  double best_depth = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vec3 h = P.P * points[i].homogeneous();
    if (!(std::abs(h.z()) > kProjectionEps)) continue;
    const double err = (Vec2(h.x() / h.z(), h.y() / h.z()) - u).norm();
    if (!best || err < best->error_px) {
      best = Assignment{i, err};
      best_depth = h.z();
    }
  }
  if (!best || best->error_px > max_px || best_depth <= 0.0) return std::nullopt;
  return best;
}

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

// Partition by (lattice cell of scene_point, origin), ordered by key then
// origin. Features without a scene point are ignored.
inline std::vector<FeatureCluster> build_clusters(const std::vector<FeatureRecord>& features,
                                                  double lattice_pitch = 0.5) {
  std::map<std::pair<LatticeKey, Origin>, FeatureCluster> groups;
  for (const auto& f : features) {
    if (!f.scene_point) continue;
    const LatticeKey key = lattice_key(*f.scene_point, lattice_pitch);
    auto& c = groups[{key, f.origin}];
    c.key = key;
    c.origin = f.origin;
    c.members.push_back(f);
  }
  std::vector<FeatureCluster> out;
  out.reserve(groups.size());
  for (auto& [_, c] : groups) {
    ScenePoint sum = ScenePoint::Zero();
    for (const auto& m : c.members) sum += *m.scene_point;
    c.scene_point = sum / static_cast<double>(c.members.size());
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Whitening
// ---------------------------------------------------------------------------

enum class WhiteningKind { PCA, ZCA };

// y = W (x - mean). PCA: W = L^-1/2 E^T; ZCA: W = E L^-1/2 E^T, where
// cov + reg I = E L E^T.
struct WhiteningTransform {
  Eigen::VectorXd mean;
  Eigen::MatrixXd W;
  double epsilon = 0.0;  // absolute regularizer added to the covariance
  WhiteningKind kind = WhiteningKind::PCA;

  Eigen::VectorXd apply(const Eigen::VectorXd& x) const { return W * (x - mean); }
  Eigen::MatrixXd apply_columns(const Eigen::MatrixXd& X) const {
    return W * (X.colwise() - mean);
  }
};

// Columns of `samples` are observations. The regularizer is
// epsilon * trace(cov) / D, or epsilon itself when the covariance is zero.
// Covariance uses the unbiased (n - 1) normalisation.
inline WhiteningTransform fit_whitening(const Eigen::MatrixXd& samples, double epsilon = 1e-8,
                                        WhiteningKind kind = WhiteningKind::PCA) {
  const Eigen::Index n = samples.cols();
  const Eigen::Index d = samples.rows();
  if (n < 2) throw ClusterTooSmall("fit_whitening: need at least 2 samples, got " + std::to_string(n));
  WhiteningTransform w;
  w.kind = kind;
  w.mean = samples.rowwise().mean();
  const Eigen::MatrixXd centered = samples.colwise() - w.mean;
  const Eigen::MatrixXd cov = centered * centered.transpose() / static_cast<double>(n - 1);
  const double tr = cov.trace();
  w.epsilon = tr > 0.0 ? epsilon * tr / static_cast<double>(d) : epsilon;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov + w.epsilon * Eigen::MatrixXd::Identity(d, d));
  const Eigen::VectorXd inv_sqrt = eig.eigenvalues().cwiseMax(w.epsilon).cwiseSqrt().cwiseInverse();
  const Eigen::MatrixXd& E = eig.eigenvectors();
  const Eigen::MatrixXd pca = inv_sqrt.asDiagonal() * E.transpose();
  w.W = kind == WhiteningKind::PCA ? pca : Eigen::MatrixXd(E * pca);
  return w;
}

inline Eigen::MatrixXd descriptor_matrix(const std::vector<FeatureRecord>& members) {
  if (members.empty()) return {};
  Eigen::MatrixXd m(members.front().descriptor.size(), static_cast<Eigen::Index>(members.size()));
  for (std::size_t i = 0; i < members.size(); ++i) {
    if (members[i].descriptor.size() != m.rows()) throw DimensionMismatch("cluster: mixed descriptor dims");
    m.col(static_cast<Eigen::Index>(i)) = members[i].descriptor.cast<double>();
  }
  return m;
}

inline WhiteningTransform fit_whitening(const FeatureCluster& cluster, double epsilon = 1e-8,
                                        WhiteningKind kind = WhiteningKind::PCA) {
  return fit_whitening(descriptor_matrix(cluster.members), epsilon, kind);
}

// ---------------------------------------------------------------------------
// k-NN augmentation
// ---------------------------------------------------------------------------

struct AugmentationParams {
  double gamma = 0.2;
  std::size_t k_min = 1;

  void validate() const {
    if (!(gamma > 0.0)) throw ValidationError("augmentation: gamma must be positive");
    if (k_min < 1) throw ValidationError("augmentation: k_min must be >= 1");
  }
};

// max(k_min, floor(gamma * sqrt(n))), capped at n.
inline std::size_t compute_k(std::size_t cluster_size, const AugmentationParams& params = {}) {
  if (cluster_size < 1) throw ValidationError("compute_k: cluster_size must be >= 1");
  // The small offset keeps exact products such as 0.2 * 10 from flooring to 1.
  const double raw = std::floor(params.gamma * std::sqrt(static_cast<double>(cluster_size)) + 1e-9);
  const std::size_t k = std::max(params.k_min, static_cast<std::size_t>(std::max(0.0, raw)));
  return std::min(k, cluster_size);
}

struct TrainingPair {
  Descriptor input;   // raw real feature
  Descriptor target;  // raw synthetic feature
  LatticeKey cluster_key;
};

enum class PairingSpace { Whitened, Raw };

struct PairingOptions {
  AugmentationParams augmentation;
  PairingSpace space = PairingSpace::Whitened;
  WhiteningKind whitening = WhiteningKind::PCA;
  double epsilon = 1e-8;
};

// Indices of the k nearest columns of `candidates` to `query`, ordered by
// (distance, index).
inline std::vector<std::size_t> k_nearest(const Eigen::VectorXd& query, const Eigen::MatrixXd& candidates,
                                          std::size_t k) {
  const std::size_t n = static_cast<std::size_t>(candidates.cols());
  std::vector<std::pair<double, std::size_t>> d(n);
  for (std::size_t j = 0; j < n; ++j) {
    d[j] = {(candidates.col(static_cast<Eigen::Index>(j)) - query).squaredNorm(), j};
  }
  k = std::min(k, n);
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = d[i].second;
  return out;
}

// For every real member, pairs with its k = compute_k(|syn|) nearest synthetic
// members, searched in the whitened spaces (each cluster whitened by its own
// transform) or directly in descriptor space. Pairs carry raw descriptors and
// are emitted in real-member order, neighbours nearest first.
inline std::vector<TrainingPair> make_training_pairs(const FeatureCluster& real, const FeatureCluster& syn,
                                                     const PairingOptions& opt = {}) {
  if (real.key != syn.key) throw ValidationError("make_training_pairs: clusters have different keys");
  if (syn.size() < 1) throw ClusterTooSmall("make_training_pairs: empty synthetic cluster");
  opt.augmentation.validate();
  const std::size_t k = compute_k(syn.size(), opt.augmentation);
  std::vector<TrainingPair> pairs;
  pairs.reserve(real.size() * k);

  if (k == syn.size()) {
    // Every synthetic member is a neighbour; order by index.
    for (const auto& r : real.members)
      for (const auto& s : syn.members) pairs.push_back({r.descriptor, s.descriptor, real.key});
    return pairs;
  }
  Eigen::MatrixXd rm = descriptor_matrix(real.members);
  Eigen::MatrixXd sm = descriptor_matrix(syn.members);
  if (opt.space == PairingSpace::Whitened) {
    rm = fit_whitening(rm, opt.epsilon, opt.whitening).apply_columns(rm);
    sm = fit_whitening(sm, opt.epsilon, opt.whitening).apply_columns(sm);
  }
  for (std::size_t i = 0; i < real.size(); ++i) {
    for (std::size_t j : k_nearest(rm.col(static_cast<Eigen::Index>(i)), sm, k)) {
      pairs.push_back({real.members[i].descriptor, syn.members[j].descriptor, real.key});
    }
  }
  return pairs;
}

}  // namespace illumloc
