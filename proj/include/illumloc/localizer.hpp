#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "illumloc/common.hpp"
#include "illumloc/forest.hpp"
#include "illumloc/geometry.hpp"

namespace illumloc {

class DegenerateConfiguration : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};

struct Correspondence {
  ImagePoint u = ImagePoint::Zero();
  ScenePoint x = ScenePoint::Zero();
};

namespace detail {

// Similarity normalisation: centroid to origin, mean distance sqrt(dim).
template <int N>
Eigen::Matrix<double, N + 1, N + 1> normalizer(const std::vector<Eigen::Matrix<double, N, 1>>& pts) {
  Eigen::Matrix<double, N, 1> c = Eigen::Matrix<double, N, 1>::Zero();
  for (const auto& p : pts) c += p;
  c /= static_cast<double>(pts.size());
  double mean = 0.0;
  for (const auto& p : pts) mean += (p - c).norm();
  mean /= static_cast<double>(pts.size());
  const double s = mean > 0.0 ? std::sqrt(static_cast<double>(N)) / mean : 1.0;
  Eigen::Matrix<double, N + 1, N + 1> T = Eigen::Matrix<double, N + 1, N + 1>::Identity();
  T.template topLeftCorner<N, N>() *= s;
  T.template topRightCorner<N, 1>() = -s * c;
  return T;
}

inline Eigen::VectorXd null_vector(const Eigen::MatrixXd& A) {
  // Eigenvector of A^T A for the smallest eigenvalue; cheaper than a full SVD
  // of the tall system and exact for the noise-free case.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(A.transpose() * A);
  return eig.eigenvectors().col(0);
}

}  // namespace detail

// Camera pose from >= 6 correspondences with known intrinsics. General point
// sets use the normalized DLT for [R | t]; (near-)planar sets use the planar
// homography DLT, since the general system is rank deficient there.
inline Pose solve_pnp_dlt(std::span<const Correspondence> matches, const Intrinsics& K) {
  if (matches.size() < 6) throw DegenerateConfiguration("pnp: need at least 6 correspondences");
  const std::size_t n = matches.size();
  const Mat3 Kinv = K.K().inverse();

  std::vector<Vec2> img(n);
  std::vector<Vec3> obj(n);
  for (std::size_t i = 0; i < n; ++i) {
    img[i] = (Kinv * matches[i].u.homogeneous()).hnormalized();
    obj[i] = matches[i].x;
  }

  // Shape of the 3D point set.
  Vec3 centroid = Vec3::Zero();
  for (const auto& p : obj) centroid += p;
  centroid /= static_cast<double>(n);
  Eigen::MatrixXd centered(3, static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) centered.col(static_cast<Eigen::Index>(i)) = obj[i] - centroid;
  Eigen::JacobiSVD<Eigen::MatrixXd> shape(centered, Eigen::ComputeThinU);
  const Vec3 sv = shape.singularValues();
  if (!(sv[0] > 1e-12) || sv[1] < 1e-6 * sv[0]) {
    throw DegenerateConfiguration("pnp: scene points are collinear");
  }

  const Eigen::Matrix3d T2 = detail::normalizer<2>(img);
  Pose pose;
  if (sv[2] < 1e-4 * sv[0]) {
    // Planar: x = c + a e1 + b e2, and [u 1] ~ H [a b 1] with
    // H = lambda [R e1 | R e2 | R c + t].
    const Mat3 U = shape.matrixU();
    const Vec3 e1 = U.col(0), e2 = U.col(1), nrm = e1.cross(e2);
    std::vector<Vec2> plane(n);
    for (std::size_t i = 0; i < n; ++i) plane[i] = {e1.dot(obj[i] - centroid), e2.dot(obj[i] - centroid)};
    const Eigen::Matrix3d Tp = detail::normalizer<2>(plane);
    Eigen::MatrixXd A(2 * n, 9);
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 X = Tp * plane[i].homogeneous();
      const Vec3 x = T2 * img[i].homogeneous();
      const auto r = static_cast<Eigen::Index>(2 * i);
      A.row(r) << X.transpose(), Eigen::RowVector3d::Zero(), -x.x() * X.transpose();
      A.row(r + 1) << Eigen::RowVector3d::Zero(), X.transpose(), -x.y() * X.transpose();
    }
    const Eigen::VectorXd h = detail::null_vector(A);
    Mat3 Hn;
    Hn << h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8];
    Mat3 H = T2.inverse() * Hn * Tp;
    double lambda = 0.5 * (H.col(0).norm() + H.col(1).norm());
    if (!(lambda > 0.0)) throw DegenerateConfiguration("pnp: degenerate homography");
    if (H(2, 2) < 0.0) lambda = -lambda;  // plane origin in front of the camera
    H /= lambda;
    Mat3 Q;
    Q.col(0) = H.col(0);
    Q.col(1) = H.col(1);
    Q.col(2) = H.col(0).cross(H.col(1));
    const Mat3 Rq = nearest_rotation(Q);
    Mat3 frame;
    frame << e1, e2, nrm;
    pose.R = Rq * frame.transpose();
    pose.t = H.col(2) - pose.R * centroid;
  } else {
    const Eigen::Matrix4d T3 = detail::normalizer<3>(obj);
    Eigen::MatrixXd A(2 * n, 12);
    for (std::size_t i = 0; i < n; ++i) {
      const Vec4 X = T3 * obj[i].homogeneous();
      const Vec3 x = T2 * img[i].homogeneous();
      const auto r = static_cast<Eigen::Index>(2 * i);
      A.row(r) << X.transpose(), Eigen::RowVector4d::Zero(), -x.x() * X.transpose();
      A.row(r + 1) << Eigen::RowVector4d::Zero(), X.transpose(), -x.y() * X.transpose();
    }
    const Eigen::VectorXd p = detail::null_vector(A);
    Mat34 Pn;
    Pn << p.segment<4>(0).transpose(), p.segment<4>(4).transpose(), p.segment<4>(8).transpose();
    Mat34 M = T2.inverse() * Pn * T3;
    Mat3 left = M.leftCols<3>();
    if (left.determinant() < 0.0) {
      M = -M;
      left = -left;
    }
    Eigen::JacobiSVD<Mat3> svd(left, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const double scale = svd.singularValues().mean();
    if (!(scale > 0.0)) throw DegenerateConfiguration("pnp: degenerate projection");
    pose.R = svd.matrixU() * svd.matrixV().transpose();
    pose.t = M.col(3) / scale;
  }
  if (!pose.R.allFinite() || !pose.t.allFinite()) throw DegenerateConfiguration("pnp: non-finite solution");
  // Cheirality: with a proper rotation the only remaining ambiguity would be
  // a reflected solution, which the depth test rejects.
  int in_front = 0;
  for (const auto& p : obj) in_front += (pose.R * p + pose.t).z() > 0.0 ? 1 : 0;
  if (2 * in_front < static_cast<int>(n)) throw DegenerateConfiguration("pnp: points behind the camera");
  return pose;
}

inline std::optional<Vec2> project_with(const Pose& pose, const Intrinsics& K, const ScenePoint& x) {
  const Vec3 p = pose.R * x + pose.t;
  if (!(p.z() > kProjectionEps)) return std::nullopt;
  return Vec2(K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy);
}

// Sum of squared reprojection errors; points behind the camera are skipped.
inline double total_squared_error(const Pose& pose, std::span<const Correspondence> matches, const Intrinsics& K) {
  double e = 0.0;
  for (const auto& m : matches) {
    if (auto u = project_with(pose, K, m.x)) e += (*u - m.u).squaredNorm();
  }
  return e;
}

// Gauss-Newton over a left-multiplied rotation increment and a translation
// increment, with step halving so the error never increases.
inline Pose refine_pose(const Pose& init, std::span<const Correspondence> matches, const Intrinsics& K,
                        int iters = 20) {
  Pose pose = init;
  double err = total_squared_error(pose, matches, K);
  for (int it = 0; it < iters; ++it) {
    Eigen::Matrix<double, 6, 6> JtJ = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> Jtr = Eigen::Matrix<double, 6, 1>::Zero();
    for (const auto& m : matches) {
      const Vec3 rx = pose.R * m.x;
      const Vec3 p = rx + pose.t;
      if (!(p.z() > kProjectionEps)) continue;
      const double iz = 1.0 / p.z();
      const Vec2 r(K.fx * p.x() * iz + K.cx - m.u.x(), K.fy * p.y() * iz + K.cy - m.u.y());
      Eigen::Matrix<double, 2, 3> dudp;
      dudp << K.fx * iz, 0.0, -K.fx * p.x() * iz * iz, 0.0, K.fy * iz, -K.fy * p.y() * iz * iz;
      Eigen::Matrix<double, 2, 6> J;
      J.leftCols<3>() = -dudp * skew(rx);
      J.rightCols<3>() = dudp;
      JtJ += J.transpose() * J;
      Jtr += J.transpose() * r;
    }
    const Eigen::Matrix<double, 6, 1> delta = JtJ.ldlt().solve(-Jtr);
    if (!delta.allFinite() || delta.norm() < 1e-15) break;
    bool improved = false;
    for (double step = 1.0; step > 1e-4; step *= 0.5) {
      const Eigen::Matrix<double, 6, 1> d = step * delta;
      Pose cand;
      const Vec3 w = d.head<3>();
      cand.R = nearest_rotation((w.norm() > 0.0 ? rotation_about(w, w.norm()) : Mat3::Identity()) * pose.R);
      cand.t = pose.t + d.tail<3>();
      const double cand_err = total_squared_error(cand, matches, K);
      if (cand_err < err) {
        pose = cand;
        err = cand_err;
        improved = true;
        break;
      }
    }
    if (!improved) break;
  }
  return pose;
}

// ---------------------------------------------------------------------------
// RANSAC
// ---------------------------------------------------------------------------

struct RansacConfig {
  double inlier_px = 3.0;
  double confidence = 0.99;
  int max_iters = 2000;
  std::size_t min_inliers = 6;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(confidence > 0.0 && confidence < 1.0)) throw ValidationError("ransac: confidence must be in (0, 1)");
    if (!(inlier_px > 0.0)) throw ValidationError("ransac: inlier_px must be positive");
    if (max_iters < 1) throw ValidationError("ransac: max_iters must be >= 1");
    if (min_inliers < 6) throw ValidationError("ransac: min_inliers must be >= 6");
  }
};

struct LocalizationResult {
  std::optional<Pose> pose;  // nullopt = FAILED
  std::size_t inliers = 0;
  int iterations = 0;
  double time_ms = 0.0;

  bool failed() const { return !pose.has_value(); }
};

inline std::vector<std::size_t> inlier_set(const Pose& pose, std::span<const Correspondence> m,
                                           const Intrinsics& K, double px) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (auto u = project_with(pose, K, m[i].x); u && (*u - m[i].u).norm() < px) out.push_back(i);
  }
  return out;
}

inline LocalizationResult ransac_pnp(std::span<const Correspondence> matches, const Intrinsics& K,
                                     const RansacConfig& cfg = {}) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  LocalizationResult result;
  const std::size_t n = matches.size();
  auto finish = [&] {
    result.time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return result;
  };
  if (n < cfg.min_inliers || n < 6) return finish();

  Rng rng(cfg.seed);
  std::vector<std::size_t> best_inliers;
  std::optional<Pose> best_pose;
  double needed = cfg.max_iters;
  std::vector<Correspondence> sample(6);
  std::vector<std::size_t> pool(n);
  int it = 0;
  for (; it < cfg.max_iters && it < needed; ++it) {
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t k = 0; k < 6; ++k) {
      std::swap(pool[k], pool[k + rng.index(n - k)]);
      sample[k] = matches[pool[k]];
    }
    Pose hyp;
    try {
      hyp = solve_pnp_dlt(sample, K);
    } catch (const DegenerateConfiguration&) {
      continue;
    }
    auto inl = inlier_set(hyp, matches, K, cfg.inlier_px);
    if (inl.size() > best_inliers.size()) {
      best_inliers = std::move(inl);
      best_pose = hyp;
      const double w = static_cast<double>(best_inliers.size()) / static_cast<double>(n);
      const double miss = 1.0 - std::pow(w, 6.0);
      if (miss <= 0.0) {
        needed = 0.0;
      } else {
        needed = std::log(1.0 - cfg.confidence) / std::log(miss);
      }
    }
  }
  result.iterations = it;
  if (!best_pose || best_inliers.size() < cfg.min_inliers) return finish();

  std::vector<Correspondence> inliers;
  for (auto i : best_inliers) inliers.push_back(matches[i]);
  // Re-estimate on the full inlier set; keep whichever start is better.
  Pose init = *best_pose;
  try {
    const Pose all = solve_pnp_dlt(inliers, K);
    if (total_squared_error(all, inliers, K) < total_squared_error(init, inliers, K)) init = all;
  } catch (const DegenerateConfiguration&) {
  }
  const Pose refined = refine_pose(init, inliers, K);
  const auto final_inliers = inlier_set(refined, matches, K, cfg.inlier_px);
  if (final_inliers.size() >= cfg.min_inliers) {
    result.pose = refined;
    result.inliers = final_inliers.size();
  } else {
    result.pose = *best_pose;
    result.inliers = best_inliers.size();
  }
  return finish();
}

inline std::vector<Correspondence> to_correspondences(std::span<const MatchCandidate> matches) {
  std::vector<Correspondence> out;
  out.reserve(matches.size());
  for (const auto& m : matches) out.push_back({m.u, m.scene_point});
  return out;
}

inline LocalizationResult ransac_pnp(std::span<const MatchCandidate> candidates, const Intrinsics& K,
                                     const RansacConfig& cfg = {}) {
  const auto c = to_correspondences(candidates);
  return ransac_pnp(std::span<const Correspondence>(c), K, cfg);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MatchingAccuracy {
  double value = 0.0;
  bool empty = false;  // no matches; value reported as 0 with a warning
};

// Fraction of matches whose scene point projects, under the ground-truth
// pose, strictly closer than threshold_px to the query point.
inline MatchingAccuracy matching_accuracy(std::span<const MatchCandidate> matches, const Pose& gt,
                                          const Intrinsics& K, double threshold_px = 3.0) {
  if (matches.empty()) return {0.0, true};
  std::size_t good = 0;
  for (const auto& m : matches) {
    if (auto u = project_with(gt, K, m.scene_point); u && (*u - m.u).norm() < threshold_px) ++good;
  }
  return {static_cast<double>(good) / static_cast<double>(matches.size()), false};
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

class LengthMismatch : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

inline const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names{"naive", "rest_no_whitening", "rest_whitening"};
  return names;
}

// Per-image outcome of one method. Failed localizations carry PE = OE = inf.
struct ImageEvaluation {
  int image_id = 0;
  int fold = 0;
  double ma = 0.0;  // fraction
  bool ma_warning = false;
  double pe = 0.0;
  double oe = 0.0;
  double time_ms = 0.0;
  std::size_t matches = 0;
  std::size_t inliers = 0;
  bool failed = false;
};

struct SummaryRow {
  std::string method;
  std::string descriptor;
  std::string statistic;  // "mean" | "median"
  double ma_percent = 0.0;
  double pe_cm = 0.0;
  double oe_deg = 0.0;
  double time_ms = 0.0;
  std::size_t failures = 0;
  std::size_t images = 0;
};

struct FoldRow {
  std::string method;
  int fold = 0;
  std::size_t images = 0;
  double median_ma_percent = 0.0;
  double median_pe_cm = 0.0;
  double median_oe_deg = 0.0;
  std::size_t failures = 0;
};

struct Report {
  std::string config_hash;
  std::vector<SummaryRow> rows;  // methods x {mean, median}
  std::vector<FoldRow> folds;
  std::vector<std::pair<std::string, std::vector<ImageEvaluation>>> images;

  const SummaryRow& row(const std::string& method, const std::string& statistic) const {
    for (const auto& r : rows)
      if (r.method == method && r.statistic == statistic) return r;
    throw ValidationError("report: no row " + method + "/" + statistic);
  }
};

// Lower median: element (n - 1) / 2 of the sorted values; NaN when empty.
inline double lower_median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>((v.size() - 1) / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline ImageEvaluation evaluate_image(const LocalizationResult& result, const Pose& gt, const MatchingAccuracy& ma,
                                      std::size_t matches = 0) {
  ImageEvaluation e;
  e.ma = ma.value;
  e.ma_warning = ma.empty;
  e.time_ms = result.time_ms;
  e.matches = matches;
  e.inliers = result.inliers;
  e.failed = result.failed();
  const double inf = std::numeric_limits<double>::infinity();
  e.pe = e.failed ? inf : position_error(*result.pose, gt);
  e.oe = e.failed ? inf : orientation_error(*result.pose, gt);
  return e;
}

struct MethodRun {
  std::string method;
  std::vector<LocalizationResult> results;
  std::vector<MatchingAccuracy> accuracy;
  std::vector<std::size_t> matches;  // optional, per image
  std::vector<int> image_ids;        // optional, defaults to 0..n-1
  std::vector<int> folds;            // optional, defaults to 0
};

inline std::vector<SummaryRow> summarize(const std::string& method, const std::string& descriptor,
                                         const std::vector<ImageEvaluation>& images) {
  std::vector<double> ma, pe, oe, t;
  std::size_t failures = 0;
  for (const auto& e : images) {
    ma.push_back(100.0 * e.ma);
    pe.push_back(e.pe);
    oe.push_back(e.oe);
    t.push_back(e.time_ms);
    failures += e.failed ? 1 : 0;
  }
  SummaryRow mean{method, descriptor, "mean", mean_of(ma), mean_of(pe), mean_of(oe), mean_of(t), failures,
                  images.size()};
  SummaryRow median{method,         descriptor,       "median",        lower_median(ma), lower_median(pe),
                    lower_median(oe), lower_median(t), failures, images.size()};
  return {mean, median};
}

// Rows follow the order of `runs`; folds are listed in ascending order.
inline Report evaluate_run(const std::vector<MethodRun>& runs, const std::vector<Pose>& gt,
                           const std::string& descriptor = "grad-hist-128") {
  Report report;
  for (const auto& run : runs) {
    const std::size_t n = run.results.size();
    if (n != gt.size() || run.accuracy.size() != n || (!run.matches.empty() && run.matches.size() != n) ||
        (!run.image_ids.empty() && run.image_ids.size() != n) || (!run.folds.empty() && run.folds.size() != n)) {
      throw LengthMismatch("evaluate_run: method " + run.method + " has " + std::to_string(n) +
                           " results for " + std::to_string(gt.size()) + " ground-truth poses");
    }
    std::vector<ImageEvaluation> images;
    for (std::size_t i = 0; i < n; ++i) {
      auto e = evaluate_image(run.results[i], gt[i], run.accuracy[i], run.matches.empty() ? 0 : run.matches[i]);
      e.image_id = run.image_ids.empty() ? static_cast<int>(i) : run.image_ids[i];
      e.fold = run.folds.empty() ? 0 : run.folds[i];
      images.push_back(e);
    }
    for (auto& r : summarize(run.method, descriptor, images)) report.rows.push_back(std::move(r));

    std::vector<int> fold_ids;
    for (const auto& e : images) fold_ids.push_back(e.fold);
    std::sort(fold_ids.begin(), fold_ids.end());
    fold_ids.erase(std::unique(fold_ids.begin(), fold_ids.end()), fold_ids.end());
    for (int f : fold_ids) {
      std::vector<ImageEvaluation> sub;
      for (const auto& e : images)
        if (e.fold == f) sub.push_back(e);
      const auto stats = summarize(run.method, descriptor, sub);
      report.folds.push_back({run.method, f, sub.size(), stats[1].ma_percent, stats[1].pe_cm, stats[1].oe_deg,
                              stats[1].failures});
    }
    report.images.emplace_back(run.method, std::move(images));
  }
  return report;
}

namespace detail {

// JSON has no infinity; non-finite values are written as strings.
inline nlohmann::json number_or_string(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

inline nlohmann::json report_to_json(const Report& r) {
  using detail::number_or_string;
  nlohmann::json j;
  j["config_hash"] = r.config_hash;
  j["rows"] = nlohmann::json::array();
  for (const auto& row : r.rows) {
    j["rows"].push_back({{"method", row.method},
                         {"descriptor", row.descriptor},
                         {"statistic", row.statistic},
                         {"MA_percent", number_or_string(row.ma_percent)},
                         {"PE_cm", number_or_string(row.pe_cm)},
                         {"OE_deg", number_or_string(row.oe_deg)},
                         {"time_ms", number_or_string(row.time_ms)},
                         {"failures", row.failures},
                         {"images", row.images}});
  }
  j["folds"] = nlohmann::json::array();
  for (const auto& f : r.folds) {
    j["folds"].push_back({{"method", f.method},
                          {"fold", f.fold},
                          {"images", f.images},
                          {"median_MA_percent", number_or_string(f.median_ma_percent)},
                          {"median_PE_cm", number_or_string(f.median_pe_cm)},
                          {"median_OE_deg", number_or_string(f.median_oe_deg)},
                          {"failures", f.failures}});
  }
  j["images"] = nlohmann::json::object();
  for (const auto& [method, list] : r.images) {
    auto& arr = j["images"][method] = nlohmann::json::array();
    for (const auto& e : list) {
      arr.push_back({{"image", e.image_id},
                     {"fold", e.fold},
                     {"MA", number_or_string(e.ma)},
                     {"MA_warning", e.ma_warning},
                     {"PE_cm", number_or_string(e.pe)},
                     {"OE_deg", number_or_string(e.oe)},
                     {"time_ms", number_or_string(e.time_ms)},
                     {"matches", e.matches},
                     {"inliers", e.inliers},
                     {"failed", e.failed}});
    }
  }
  return j;
}

inline std::string report_to_csv(const Report& r) {
  using detail::csv_number;
  std::ostringstream os;
  os << "method,descriptor,statistic,MA_percent,PE_cm,OE_deg,time_ms,failures\n";
  for (const auto& row : r.rows) {
    os << row.method << ',' << row.descriptor << ',' << row.statistic << ',' << csv_number(row.ma_percent) << ','
       << csv_number(row.pe_cm) << ',' << csv_number(row.oe_deg) << ',' << csv_number(row.time_ms) << ','
       << row.failures << '\n';
  }
  return os.str();
}

}  // namespace illumloc
