#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "illumloc/common.hpp"
#include "illumloc/correspondence.hpp"
#include "illumloc/dataset.hpp"
#include "illumloc/feature_store.hpp"
#include "illumloc/features.hpp"
#include "illumloc/forest.hpp"
#include "illumloc/geometry.hpp"
#include "illumloc/image.hpp"
#include "illumloc/localizer.hpp"
#include "illumloc/restnet.hpp"
#include "illumloc/scene.hpp"

namespace illumloc {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class RealSource { PseudoReal, Manifest };
enum class RealLighting { Grid, Database };

struct RealImageConfig {
  RealSource source = RealSource::PseudoReal;
  fs::path manifest;
  std::size_t count = 60;
  RealLighting lighting = RealLighting::Grid;
  double yaw_min = 170.0;
  double yaw_max = 190.0;
  RenderProfile profile = [] {
    RenderProfile p = RenderProfile::pseudo_real();
    p.gamma = {3.5, 3.0, 2.5};
    return p;
  }();
};

struct PipelineConfig {
  fs::path source;  // config file, for messages and relative paths
  fs::path output_dir = "run";
  std::uint64_t root_seed = 1;
  bool full_grid = false;
  ProceduralSceneParams scene;
  Intrinsics intrinsics{650.0, 650.0, 319.5, 239.5, 640, 480};
  CameraGridExtents extents;
  double top_intensity = 0.6;
  double moving_intensity = 0.8;
  RealImageConfig real;
  DetectorParams detector;
  double lattice_pitch = 0.5;
  double assign_max_px = 3.0;
  AugmentationParams augmentation;
  WhiteningKind whitening = WhiteningKind::PCA;
  double whitening_epsilon = 1e-8;
  std::size_t min_real_cluster = 2;
  std::size_t min_syn_cluster = 2;
  std::size_t min_db_cluster = 5;
  std::size_t representative_budget = 24;
  std::vector<int> rest_hidden{512, 256, 128, 256, 512};
  TrainConfig rest = [] {
    TrainConfig t;
    t.batch_size = 64;
    t.epochs_pretrain = 10;
    t.epochs_main = 40;
    return t;
  }();
  std::size_t pretrain_per_cluster = 4;
  ForestConfig forest;
  RansacConfig ransac;
  std::size_t match_cap = 100;
  int cv_folds = 5;
  bool timing = true;
  std::string config_hash;

  void validate() const {
    if (cv_folds < 2) throw ValidationError(where() + "cv_folds must be >= 2");
    if (real.source == RealSource::PseudoReal && real.count < static_cast<std::size_t>(cv_folds)) {
      throw ValidationError(where() + "real.count must be >= cv_folds");
    }
    if (!(real.yaw_max >= real.yaw_min)) throw ValidationError(where() + "real.yaw_range is empty");
    if (real.source == RealSource::Manifest && !fs::exists(real.manifest)) {
      throw ValidationError(where() + "real.manifest: file not found: " + real.manifest.string());
    }
    if (scene.texture_path && !fs::exists(*scene.texture_path)) {
      throw ValidationError(where() + "scene.texture.path: file not found: " + scene.texture_path->string());
    }
    if (!(lattice_pitch > 0.0)) throw ValidationError(where() + "correspondence.lattice_pitch must be positive");
    if (!(assign_max_px > 0.0)) throw ValidationError(where() + "correspondence.assign_max_px must be positive");
    if (!(whitening_epsilon > 0.0)) throw ValidationError(where() + "correspondence.epsilon must be positive");
    if (min_real_cluster < 2 || min_syn_cluster < 2) {
      throw ValidationError(where() + "correspondence.min_real/min_synthetic must be >= 2");
    }
    if (min_db_cluster < 1) throw ValidationError(where() + "database.min_cluster_size must be >= 1");
    if (representative_budget < 1) throw ValidationError(where() + "database.representative_budget must be >= 1");
    if (match_cap < 1) throw ValidationError(where() + "match_cap must be >= 1");
    if (top_intensity < 0.0 || moving_intensity < 0.0) throw ValidationError(where() + "lights: negative intensity");
    intrinsics.validate();
    extents.validate();
    augmentation.validate();
    rest.validate();
    forest.validate();
    ransac.validate();
  }

  std::string where() const { return source.empty() ? "config: " : source.string() + ": "; }
};

namespace detail {

template <typename T>
void read_field(const nlohmann::json& obj, const std::string& section, const char* key, T& out,
                const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(where + "field '" + section + key + "' has the wrong type");
  }
}

inline const nlohmann::json& section(const nlohmann::json& j, const char* key, const std::string& where) {
  static const nlohmann::json empty = nlohmann::json::object();
  if (!j.contains(key)) return empty;
  if (!j[key].is_object()) throw ValidationError(where + "field '" + key + "' must be an object");
  return j[key];
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace detail

// Parses a config document. Relative paths resolve against `base_dir`.
inline PipelineConfig config_from_json(const nlohmann::json& j, const fs::path& base_dir = {},
                                       const fs::path& source = {}) {
  using detail::read_field;
  using detail::section;
  PipelineConfig c;
  c.source = source;
  const std::string w = c.where();
  if (!j.is_object()) throw ValidationError(w + "top level must be an object");

  std::string out = c.output_dir.string();
  read_field(j, "", "output_dir", out, w);
  c.output_dir = fs::path(out).is_absolute() ? fs::path(out) : base_dir / out;
  read_field(j, "", "root_seed", c.root_seed, w);
  std::string grid = "desk";
  read_field(j, "", "grid", grid, w);
  if (grid != "desk" && grid != "full") throw ValidationError(w + "field 'grid' must be \"desk\" or \"full\"");
  c.full_grid = grid == "full";

  if (j.contains("scene")) {
    if (j["scene"].is_string()) {
      const fs::path p = base_dir / j["scene"].get<std::string>();
      std::ifstream is(p);
      if (!is) throw ValidationError(w + "field 'scene': file not found: " + p.string());
      nlohmann::json sj;
      try {
        sj = nlohmann::json::parse(is);
      } catch (const nlohmann::json::exception& e) {
        throw ValidationError(p.string() + ": " + e.what());
      }
      c.scene = scene_params_from_json(sj, p.parent_path());
    } else {
      c.scene = scene_params_from_json(j["scene"], base_dir);
    }
  }

  const auto& in = section(j, "intrinsics", w);
  read_field(in, "intrinsics.", "fx", c.intrinsics.fx, w);
  read_field(in, "intrinsics.", "fy", c.intrinsics.fy, w);
  read_field(in, "intrinsics.", "cx", c.intrinsics.cx, w);
  read_field(in, "intrinsics.", "cy", c.intrinsics.cy, w);
  read_field(in, "intrinsics.", "width", c.intrinsics.width, w);
  read_field(in, "intrinsics.", "height", c.intrinsics.height, w);

  const auto& ex = section(j, "camera_extents", w);
  read_field(ex, "camera_extents.", "x_min", c.extents.x_min, w);
  read_field(ex, "camera_extents.", "x_max", c.extents.x_max, w);
  read_field(ex, "camera_extents.", "z_min", c.extents.z_min, w);
  read_field(ex, "camera_extents.", "z_max", c.extents.z_max, w);
  read_field(ex, "camera_extents.", "y", c.extents.y, w);
  if (ex.contains("target")) {
    std::vector<double> t;
    read_field(ex, "camera_extents.", "target", t, w);
    if (t.size() != 3) throw ValidationError(w + "field 'camera_extents.target' must have 3 numbers");
    c.extents.target = {t[0], t[1], t[2]};
  }

  const auto& li = section(j, "lights", w);
  read_field(li, "lights.", "top_intensity", c.top_intensity, w);
  read_field(li, "lights.", "moving_intensity", c.moving_intensity, w);

  const auto& re = section(j, "real", w);
  std::string src = "pseudo_real";
  read_field(re, "real.", "source", src, w);
  if (src == "manifest") {
    c.real.source = RealSource::Manifest;
    std::string m;
    read_field(re, "real.", "manifest", m, w);
    if (m.empty()) throw ValidationError(w + "field 'real.manifest' is required when real.source is \"manifest\"");
    c.real.manifest = fs::path(m).is_absolute() ? fs::path(m) : base_dir / m;
  } else if (src != "pseudo_real") {
    throw ValidationError(w + "field 'real.source' must be \"pseudo_real\" or \"manifest\"");
  }
  read_field(re, "real.", "count", c.real.count, w);
  std::string lighting = "grid";
  read_field(re, "real.", "lighting", lighting, w);
  if (lighting == "database") {
    c.real.lighting = RealLighting::Database;
  } else if (lighting != "grid") {
    throw ValidationError(w + "field 'real.lighting' must be \"grid\" or \"database\"");
  }
  if (re.contains("yaw_range")) {
    std::vector<double> y;
    read_field(re, "real.", "yaw_range", y, w);
    if (y.size() != 2) throw ValidationError(w + "field 'real.yaw_range' must have 2 numbers");
    c.real.yaw_min = y[0];
    c.real.yaw_max = y[1];
  }
  if (re.contains("profile")) {
    const auto& pr = re["profile"];
    auto& p = c.real.profile;
    read_field(pr, "real.profile.", "specular_strength", p.specular_strength, w);
    read_field(pr, "real.profile.", "specular_exponent", p.specular_exponent, w);
    read_field(pr, "real.profile.", "noise_sigma", p.noise_sigma, w);
    read_field(pr, "real.profile.", "vignette_strength", p.vignette_strength, w);
    if (pr.contains("gamma")) {
      std::vector<double> g;
      read_field(pr, "real.profile.", "gamma", g, w);
      if (g.size() != 3) throw ValidationError(w + "field 'real.profile.gamma' must have 3 numbers");
      p.gamma = {g[0], g[1], g[2]};
    }
  }

  const auto& fe = section(j, "features", w);
  read_field(fe, "features.", "harris_k", c.detector.harris_k, w);
  read_field(fe, "features.", "window_sigma", c.detector.window_sigma, w);
  read_field(fe, "features.", "threshold_ratio", c.detector.threshold_ratio, w);
  read_field(fe, "features.", "nms_radius", c.detector.nms_radius, w);
  read_field(fe, "features.", "max_features", c.detector.max_features, w);

  const auto& co = section(j, "correspondence", w);
  read_field(co, "correspondence.", "lattice_pitch", c.lattice_pitch, w);
  read_field(co, "correspondence.", "assign_max_px", c.assign_max_px, w);
  read_field(co, "correspondence.", "gamma", c.augmentation.gamma, w);
  read_field(co, "correspondence.", "k_min", c.augmentation.k_min, w);
  read_field(co, "correspondence.", "epsilon", c.whitening_epsilon, w);
  read_field(co, "correspondence.", "min_real", c.min_real_cluster, w);
  read_field(co, "correspondence.", "min_synthetic", c.min_syn_cluster, w);
  std::string wk = "pca";
  read_field(co, "correspondence.", "whitening", wk, w);
  if (wk == "zca") {
    c.whitening = WhiteningKind::ZCA;
  } else if (wk != "pca") {
    throw ValidationError(w + "field 'correspondence.whitening' must be \"pca\" or \"zca\"");
  }

  const auto& dbs = section(j, "database", w);
  read_field(dbs, "database.", "min_cluster_size", c.min_db_cluster, w);
  read_field(dbs, "database.", "representative_budget", c.representative_budget, w);

  const auto& rs = section(j, "rest", w);
  read_field(rs, "rest.", "hidden", c.rest_hidden, w);
  read_field(rs, "rest.", "learning_rate", c.rest.learning_rate, w);
  read_field(rs, "rest.", "batch_size", c.rest.batch_size, w);
  read_field(rs, "rest.", "epochs_pretrain", c.rest.epochs_pretrain, w);
  read_field(rs, "rest.", "epochs_main", c.rest.epochs_main, w);
  read_field(rs, "rest.", "patience", c.rest.patience, w);
  read_field(rs, "rest.", "pretrain_per_cluster", c.pretrain_per_cluster, w);
  std::string opt = "adam";
  read_field(rs, "rest.", "optimizer", opt, w);
  if (opt == "sgd") {
    c.rest.optimizer = Optimizer::SGD;
  } else if (opt != "adam") {
    throw ValidationError(w + "field 'rest.optimizer' must be \"adam\" or \"sgd\"");
  }
  for (int h : c.rest_hidden)
    if (h < 1) throw ValidationError(w + "field 'rest.hidden' must contain positive widths");

  const auto& fo = section(j, "forest", w);
  read_field(fo, "forest.", "trees", c.forest.trees, w);
  read_field(fo, "forest.", "max_depth", c.forest.max_depth, w);
  read_field(fo, "forest.", "min_leaf", c.forest.min_leaf, w);

  const auto& ra = section(j, "ransac", w);
  read_field(ra, "ransac.", "inlier_px", c.ransac.inlier_px, w);
  read_field(ra, "ransac.", "confidence", c.ransac.confidence, w);
  read_field(ra, "ransac.", "max_iters", c.ransac.max_iters, w);
  read_field(ra, "ransac.", "min_inliers", c.ransac.min_inliers, w);

  read_field(j, "", "match_cap", c.match_cap, w);
  read_field(j, "", "cv_folds", c.cv_folds, w);
  read_field(j, "", "timing", c.timing, w);

  // Hash of everything except where the artifacts go.
  nlohmann::json hashed = j;
  hashed.erase("output_dir");
  c.config_hash = detail::hex64(fnv1a(hashed.dump()));

  c.forest.seed = derive_seed(c.root_seed, "forest");
  c.rest.seed = derive_seed(c.root_seed, "rest");
  c.real.profile.seed = derive_seed(c.root_seed, "real-profile");
  c.validate();
  return c;
}

inline PipelineConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("config not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return config_from_json(j, path.parent_path(), path);
}

// ---------------------------------------------------------------------------
// Views and folds
// ---------------------------------------------------------------------------

struct ViewSet {
  std::vector<LightingCondition> lighting;  // database lighting conditions
  std::vector<CameraView> database;
  std::vector<CameraView> real;
  std::vector<fs::path> real_paths;  // external images only
};

inline std::vector<LightingCondition> lighting_grid(const PipelineConfig& cfg) {
  return generate_lighting_grid(cfg.top_intensity, cfg.moving_intensity);
}

// Database: every lighting condition x every camera of the selected grid,
// lighting-major. Real views: random poses inside the camera extents with
// random yaw and lighting drawn from the full grid (or the database subset).
inline ViewSet make_views(const PipelineConfig& cfg, bool include_real = true) {
  ViewSet vs;
  const auto grid = lighting_grid(cfg);
  const auto cameras_full = generate_camera_grid(cfg.intrinsics, cfg.extents);
  vs.lighting = cfg.full_grid ? grid : desk_lighting_subset(grid);
  const auto cameras = cfg.full_grid ? cameras_full : desk_camera_subset(cameras_full);
  vs.database.reserve(vs.lighting.size() * cameras.size());
  for (const auto& light : vs.lighting) {
    for (const auto& cam : cameras) {
      CameraView v = cam;
      v.id = static_cast<int>(vs.database.size());
      v.lighting = light;
      v.profile = RenderProfile::synthetic();
      vs.database.push_back(v);
    }
  }
  if (!include_real) return vs;

  if (cfg.real.source == RealSource::Manifest) {
    const auto ext = load_external_dataset(cfg.real.manifest, false);
    for (std::size_t i = 0; i < ext.size(); ++i) {
      const auto [K, pose] = decompose_projection(ext[i].P);
      Intrinsics intr{K(0, 0), K(1, 1), K(0, 2), K(1, 2), cfg.intrinsics.width, cfg.intrinsics.height};
      CameraView v = CameraView::make(static_cast<int>(i), intr, pose);
      v.P = ext[i].P;
      vs.real.push_back(v);
      vs.real_paths.push_back(ext[i].path);
    }
    return vs;
  }
  const auto& pool = cfg.real.lighting == RealLighting::Grid ? grid : vs.lighting;
  Rng rng(derive_seed(cfg.root_seed, "real-views"));
  const auto& e = cfg.extents;
  for (std::size_t i = 0; i < cfg.real.count; ++i) {
    const Vec3 center(rng.uniform(e.x_min, e.x_max), e.y, rng.uniform(e.z_min, e.z_max));
    const double yaw = rng.uniform(cfg.real.yaw_min, cfg.real.yaw_max);
    const auto& light = pool[rng.index(pool.size())];
    CameraView v = CameraView::make(static_cast<int>(i), cfg.intrinsics, yawed_look_pose(center, e.target, yaw),
                                    light, cfg.real.profile);
    v.yaw_deg = yaw;
    vs.real.push_back(v);
  }
  return vs;
}

struct FoldSplit {
  int fold = 0;
  std::vector<int> train;  // real image ids, ascending
  std::vector<int> test;
};

// Shuffled ids cut into `folds` contiguous chunks whose sizes differ by at
// most one.
inline std::vector<FoldSplit> make_folds(std::size_t n_images, int folds, std::uint64_t seed) {
  if (folds < 2) throw ValidationError("make_folds: need at least 2 folds");
  if (n_images < static_cast<std::size_t>(folds)) throw ValidationError("make_folds: fewer images than folds");
  std::vector<int> ids(n_images);
  for (std::size_t i = 0; i < n_images; ++i) ids[i] = static_cast<int>(i);
  Rng rng(derive_seed(seed, "folds"));
  rng.shuffle(ids);
  std::vector<FoldSplit> out(static_cast<std::size_t>(folds));
  const std::size_t base = n_images / folds, extra = n_images % folds;
  std::size_t pos = 0;
  for (int f = 0; f < folds; ++f) {
    const std::size_t len = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
    out[f].fold = f;
    out[f].test.assign(ids.begin() + static_cast<std::ptrdiff_t>(pos),
                       ids.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  for (auto& s : out) {
    std::sort(s.test.begin(), s.test.end());
    std::set<int> test(s.test.begin(), s.test.end());
    for (std::size_t i = 0; i < n_images; ++i)
      if (!test.count(static_cast<int>(i))) s.train.push_back(static_cast<int>(i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Artifact layout
// ---------------------------------------------------------------------------

struct RunPaths {
  fs::path root;

  fs::path views() const { return root / "views.json"; }
  fs::path db_image(int id) const { return root / "images" / "db" / numbered(id, ".ppm"); }
  fs::path real_image(int id) const { return root / "images" / "real" / numbered(id, ".ppm"); }
  fs::path synthetic_store() const { return root / "db" / "synthetic.fstr"; }
  fs::path database_store() const { return root / "db" / "database.fstr"; }
  fs::path cluster_index() const { return root / "db" / "clusters.json"; }
  fs::path real_store() const { return root / "real" / "features.fstr"; }
  fs::path folds() const { return root / "folds.json"; }
  fs::path forest() const { return root / "models" / "forest.frst"; }
  fs::path fold_dir(int fold) const { return root / "models" / ("fold" + std::to_string(fold)); }
  fs::path rest_model(int fold, const std::string& method) const { return fold_dir(fold) / (method + ".rest"); }
  fs::path pair_log(int fold) const { return fold_dir(fold) / "pairs.csv"; }
  fs::path train_log(int fold) const { return fold_dir(fold) / "train_log.json"; }
  fs::path results(int fold, const std::string& method) const {
    return root / "results" / ("fold" + std::to_string(fold) + "_" + method + ".json");
  }
  fs::path report_json() const { return root / "report.json"; }
  fs::path report_csv() const { return root / "report.csv"; }
  fs::path summary() const { return root / "summary.txt"; }

  static std::string numbered(int id, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%05d%s", id, ext);
    return buf;
  }
};

namespace detail {

inline void require(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw RuntimeFailure("missing " + what + ": " + p.string());
}

// Written to a sibling temp file and renamed, so readers never see a
// partial file.
inline void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  fs::path tmp = p;
  tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os || !(os << text)) throw RuntimeFailure("cannot write " + p.string());
  }
  fs::rename(tmp, p);
}

inline nlohmann::json read_json(const fs::path& p, const std::string& what) {
  require(p, what);
  std::ifstream is(p);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw RuntimeFailure(p.string() + ": " + e.what());
  }
}

inline nlohmann::json view_json(const CameraView& v, const std::string& image) {
  nlohmann::json P = nlohmann::json::array();
  for (int k = 0; k < 12; ++k) P.push_back(v.P.P(k / 4, k % 4));
  return {{"id", v.id},
          {"image", image},
          {"theta", v.lighting.theta},
          {"phi", v.lighting.phi},
          {"yaw", v.yaw_deg},
          {"position", v.position_index},
          {"P", P}};
}

}  // namespace detail

inline std::string method_file_tag(const std::string& method) {
  const auto& names = method_names();
  if (std::find(names.begin(), names.end(), method) == names.end()) {
    throw ValidationError("unknown method '" + method + "' (expected naive, rest_no_whitening or rest_whitening)");
  }
  return method;
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

struct RenderSummary {
  std::size_t lighting_conditions = 0;
  std::size_t database_views = 0;
  std::size_t real_views = 0;
  std::size_t images_written = 0;
};

inline Scene build_scene(const PipelineConfig& cfg) {
  Scene s = make_procedural_scene(cfg.scene);
  s.validate();
  return s;
}

// Writes views.json and, unless `dry_run`, every database and pseudo-real
// image.
inline RenderSummary cmd_render(const PipelineConfig& cfg, bool dry_run = false) {
  const RunPaths paths{cfg.output_dir};
  const ViewSet vs = make_views(cfg);
  RenderSummary s{vs.lighting.size(), vs.database.size(), vs.real.size(), 0};

  nlohmann::json j;
  j["grid"] = cfg.full_grid ? "full" : "desk";
  j["lighting_conditions"] = vs.lighting.size();
  j["database_views"] = vs.database.size();
  j["real_views"] = vs.real.size();
  j["database"] = nlohmann::json::array();
  for (const auto& v : vs.database) {
    j["database"].push_back(detail::view_json(v, fs::relative(paths.db_image(v.id), paths.root).generic_string()));
  }
  j["real"] = nlohmann::json::array();
  for (std::size_t i = 0; i < vs.real.size(); ++i) {
    const auto& v = vs.real[i];
    const std::string img = vs.real_paths.empty()
                                ? fs::relative(paths.real_image(v.id), paths.root).generic_string()
                                : vs.real_paths[i].string();
    j["real"].push_back(detail::view_json(v, img));
  }
  detail::write_text(paths.views(), j.dump(1) + "\n");
  if (dry_run) return s;

  const Scene scene = build_scene(cfg);
  fs::create_directories(paths.db_image(0).parent_path());
  parallel_for(vs.database.size(), [&](std::size_t i) {
    write_ppm(paths.db_image(vs.database[i].id), render(scene, vs.database[i]));
  });
  s.images_written += vs.database.size();
  if (vs.real_paths.empty()) {
    fs::create_directories(paths.real_image(0).parent_path());
    parallel_for(vs.real.size(), [&](std::size_t i) {
      write_ppm(paths.real_image(vs.real[i].id), render(scene, vs.real[i]));
    });
    s.images_written += vs.real.size();
  }
  return s;
}

// ---------------------------------------------------------------------------
// build-db
// ---------------------------------------------------------------------------

struct Database {
  std::vector<FeatureCluster> clusters;  // representative members, key order
  std::uint32_t dim = kDescriptorDim;

  std::vector<ScenePoint> points() const {
    std::vector<ScenePoint> p;
    p.reserve(clusters.size());
    for (const auto& c : clusters) p.push_back(c.scene_point);
    return p;
  }
};

struct BuildSummary {
  std::size_t synthetic_features = 0;
  std::size_t clusters = 0;
  std::size_t database_clusters = 0;
  std::size_t database_features = 0;
};

// Synthetic features whose keypoint ray hits the scene, in image order.
inline std::vector<FeatureRecord> extract_synthetic(const Scene& scene, const std::vector<CameraView>& views,
                                                    const RunPaths& paths, const DetectorParams& det) {
  std::vector<std::vector<FeatureRecord>> per_image(views.size());
  parallel_for(views.size(), [&](std::size_t i) {
    const auto& v = views[i];
    const fs::path img = paths.db_image(v.id);
    detail::require(img, "database image");
    for (auto& [u, d] : extract_features(to_gray(read_ppm(img)), det)) {
      auto x = raycast(scene, v, u);
      if (!x) continue;
      per_image[i].push_back({std::move(d), u, v.id, Origin::Synthetic, *x});
    }
  });
  std::vector<FeatureRecord> all;
  for (auto& list : per_image)
    for (auto& r : list) all.push_back(std::move(r));
  return all;
}

inline void save_database(const RunPaths& paths, const Database& db) {
  std::vector<FeatureRecord> members;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& c : db.clusters) {
    index.push_back({{"key", {c.key.x, c.key.y, c.key.z}},
                     {"point", {c.scene_point.x(), c.scene_point.y(), c.scene_point.z()}},
                     {"members", c.size()}});
    members.insert(members.end(), c.members.begin(), c.members.end());
  }
  save_feature_store(paths.database_store(), members, db.dim);
  detail::write_text(paths.cluster_index(), index.dump() + "\n");
}

inline Database load_database(const RunPaths& paths) {
  detail::require(paths.database_store(), "database store (run build-db)");
  const auto index = detail::read_json(paths.cluster_index(), "cluster index (run build-db)");
  const auto store = load_feature_store(paths.database_store());
  Database db;
  db.dim = store.dim;
  std::size_t pos = 0;
  for (const auto& e : index) {
    FeatureCluster c;
    c.key = {e["key"][0].get<std::int64_t>(), e["key"][1].get<std::int64_t>(), e["key"][2].get<std::int64_t>()};
    c.scene_point = {e["point"][0].get<double>(), e["point"][1].get<double>(), e["point"][2].get<double>()};
    c.origin = Origin::Synthetic;
    const auto n = e["members"].get<std::size_t>();
    if (pos + n > store.records.size()) throw RuntimeFailure("cluster index does not match database store");
    c.members.assign(store.records.begin() + static_cast<std::ptrdiff_t>(pos),
                     store.records.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    db.clusters.push_back(std::move(c));
  }
  if (pos != store.records.size()) throw RuntimeFailure("cluster index does not match database store");
  return db;
}

// Full synthetic clusters (no size filter), as read back from disk.
inline std::vector<FeatureCluster> load_synthetic_clusters(const PipelineConfig& cfg) {
  const RunPaths paths{cfg.output_dir};
  detail::require(paths.synthetic_store(), "synthetic feature store (run build-db)");
  return build_clusters(load_feature_store(paths.synthetic_store()).records, cfg.lattice_pitch);
}

inline BuildSummary cmd_build_db(const PipelineConfig& cfg) {
  const RunPaths paths{cfg.output_dir};
  detail::require(paths.views(), "view metadata (run render)");
  const ViewSet vs = make_views(cfg, false);
  const Scene scene = build_scene(cfg);
  BuildSummary s;

  fs::create_directories(paths.synthetic_store().parent_path());
  save_feature_store(paths.synthetic_store(), extract_synthetic(scene, vs.database, paths, cfg.detector),
                     kDescriptorDim);
  // Work from the stored (f32) values so every later stage sees the same data.
  const auto clusters = load_synthetic_clusters(cfg);
  for (const auto& c : clusters) s.synthetic_features += c.size();
  s.clusters = clusters.size();

  std::vector<FeatureCluster> kept;
  for (const auto& c : clusters)
    if (c.size() >= cfg.min_db_cluster) kept.push_back(c);
  Database db;
  db.clusters = select_representative(kept, cfg.representative_budget);
  s.database_clusters = db.clusters.size();
  for (const auto& c : db.clusters) s.database_features += c.size();
  if (db.clusters.size() < 2) throw RuntimeFailure("build-db: fewer than 2 database clusters survived");
  save_database(paths, db);
  return s;
}

// ---------------------------------------------------------------------------
// Real features (shared by train and localize)
// ---------------------------------------------------------------------------

// Per real image, its features in detection order. Extracted once and cached.
inline std::vector<std::vector<FeatureRecord>> real_features(const PipelineConfig& cfg, const ViewSet& vs) {
  const RunPaths paths{cfg.output_dir};
  std::vector<std::vector<FeatureRecord>> per_image(vs.real.size());
  if (!fs::exists(paths.real_store())) {
    parallel_for(vs.real.size(), [&](std::size_t i) {
      const fs::path img = vs.real_paths.empty() ? paths.real_image(vs.real[i].id) : vs.real_paths[i];
      detail::require(img, "real image (run render)");
      for (auto& [u, d] : extract_features(to_gray(read_ppm(img)), cfg.detector)) {
        per_image[i].push_back({std::move(d), u, vs.real[i].id, Origin::Real, std::nullopt});
      }
    });
    std::vector<FeatureRecord> all;
    for (const auto& list : per_image) all.insert(all.end(), list.begin(), list.end());
    fs::create_directories(paths.real_store().parent_path());
    save_feature_store(paths.real_store(), all, kDescriptorDim);
  }
  for (auto& list : per_image) list.clear();
  for (auto& r : load_feature_store(paths.real_store()).records) {
    if (r.image_id < 0 || static_cast<std::size_t>(r.image_id) >= per_image.size()) {
      throw RuntimeFailure("real feature store references unknown image " + std::to_string(r.image_id));
    }
    per_image[static_cast<std::size_t>(r.image_id)].push_back(std::move(r));
  }
  return per_image;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainSummary {
  int fold = 0;
  std::size_t real_features = 0;
  std::size_t assigned = 0;
  std::size_t clusters_used = 0;
  std::size_t pairs_whitening = 0;
  std::size_t pairs_no_whitening = 0;
};

inline RandomForestModel ensure_forest(const PipelineConfig& cfg, const Database& db) {
  const RunPaths paths{cfg.output_dir};
  if (fs::exists(paths.forest())) return load_forest(paths.forest());
  auto model = train_forest(db.clusters, cfg.forest);
  fs::create_directories(paths.forest().parent_path());
  save_forest(paths.forest(), model);
  return load_forest(paths.forest());
}

inline void write_folds(const PipelineConfig& cfg, const std::vector<FoldSplit>& folds) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& f : folds) j.push_back({{"fold", f.fold}, {"train", f.train}, {"test", f.test}});
  detail::write_text(RunPaths{cfg.output_dir}.folds(), j.dump() + "\n");
}

inline std::vector<FoldSplit> folds_for(const PipelineConfig& cfg, std::size_t n_real) {
  return make_folds(n_real, cfg.cv_folds, cfg.root_seed);
}

inline const FoldSplit& fold_at(const std::vector<FoldSplit>& folds, int fold) {
  if (fold < 0 || fold >= static_cast<int>(folds.size())) {
    throw ValidationError("fold " + std::to_string(fold) + " out of range [0, " + std::to_string(folds.size()) + ")");
  }
  return folds[static_cast<std::size_t>(fold)];
}

inline TrainSummary cmd_train(const PipelineConfig& cfg, int fold) {
  using Matrix = RestNetwork<float>::Matrix;
  const RunPaths paths{cfg.output_dir};
  const ViewSet vs = make_views(cfg);
  const Database db = load_database(paths);
  const auto folds = folds_for(cfg, vs.real.size());
  write_folds(cfg, folds);
  const FoldSplit& split = fold_at(folds, fold);
  ensure_forest(cfg, db);

  TrainSummary s;
  s.fold = fold;
  const auto reals = real_features(cfg, vs);
  const auto points = db.points();

  // Scene point of every real training feature, grouped by database cluster.
  std::vector<FeatureCluster> real_clusters(db.clusters.size());
  for (int id : split.train) {
    const auto& view = vs.real[static_cast<std::size_t>(id)];
    for (const auto& f : reals[static_cast<std::size_t>(id)]) {
      ++s.real_features;
      const auto a = assign_scene_point(f.u, view.P, points, cfg.assign_max_px);
      if (!a) continue;
      ++s.assigned;
      FeatureRecord r = f;
      r.scene_point = points[a->index];
      auto& c = real_clusters[a->index];
      c.key = db.clusters[a->index].key;
      c.scene_point = points[a->index];
      c.origin = Origin::Real;
      c.members.push_back(std::move(r));
    }
  }

  const auto synthetic = load_synthetic_clusters(cfg);
  std::map<LatticeKey, const FeatureCluster*> syn_by_key;
  for (const auto& c : synthetic) syn_by_key[c.key] = &c;

  PairingOptions whitened;
  whitened.augmentation = cfg.augmentation;
  whitened.space = PairingSpace::Whitened;
  whitened.whitening = cfg.whitening;
  whitened.epsilon = cfg.whitening_epsilon;
  PairingOptions raw = whitened;
  raw.space = PairingSpace::Raw;

  std::vector<TrainingPair> pairs_w, pairs_r;
  std::ostringstream log;
  log << "key_x,key_y,key_z,real_size,synthetic_size,k,pairs\n";
  for (std::size_t c = 0; c < real_clusters.size(); ++c) {
    const auto& rc = real_clusters[c];
    if (rc.size() < cfg.min_real_cluster) continue;
    const auto it = syn_by_key.find(rc.key);
    if (it == syn_by_key.end() || it->second->size() < cfg.min_syn_cluster) continue;
    const auto& sc = *it->second;
    auto pw = make_training_pairs(rc, sc, whitened);
    auto pr = make_training_pairs(rc, sc, raw);
    log << rc.key.x << ',' << rc.key.y << ',' << rc.key.z << ',' << rc.size() << ',' << sc.size() << ','
        << compute_k(sc.size(), cfg.augmentation) << ',' << pw.size() << '\n';
    ++s.clusters_used;
    pairs_w.insert(pairs_w.end(), std::make_move_iterator(pw.begin()), std::make_move_iterator(pw.end()));
    pairs_r.insert(pairs_r.end(), std::make_move_iterator(pr.begin()), std::make_move_iterator(pr.end()));
  }
  if (pairs_w.empty()) throw EmptyTrainingSet("train: no cluster passed the minimum-size filters");
  s.pairs_whitening = pairs_w.size();
  s.pairs_no_whitening = pairs_r.size();
  fs::create_directories(paths.fold_dir(fold));
  detail::write_text(paths.pair_log(fold), log.str());

  std::size_t n_pre = 0;
  for (const auto& c : db.clusters) n_pre += std::min(c.size(), cfg.pretrain_per_cluster);
  Matrix pretrain(static_cast<Eigen::Index>(db.dim), static_cast<Eigen::Index>(n_pre));
  Eigen::Index col = 0;
  for (const auto& c : db.clusters)
    for (std::size_t m = 0; m < std::min(c.size(), cfg.pretrain_per_cluster); ++m)
      pretrain.col(col++) = c.members[m].descriptor;

  struct Job {
    std::string method;
    const std::vector<TrainingPair>* pairs;
    RestNetwork<float> net;
    TrainHistory history;
  };
  std::vector<Job> jobs{{"rest_whitening", &pairs_w, {}, {}}, {"rest_no_whitening", &pairs_r, {}, {}}};
  parallel_for(jobs.size(), [&](std::size_t j) {
    auto& job = jobs[j];
    const auto& pairs = *job.pairs;
    Matrix X(static_cast<Eigen::Index>(db.dim), static_cast<Eigen::Index>(pairs.size()));
    Matrix Y(X.rows(), X.cols());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      X.col(static_cast<Eigen::Index>(i)) = pairs[i].input;
      Y.col(static_cast<Eigen::Index>(i)) = pairs[i].target;
    }
    TrainConfig tc = cfg.rest;
    tc.seed = derive_seed(cfg.rest.seed, job.method, static_cast<std::uint64_t>(fold));
    job.net = init_network<float>(static_cast<int>(db.dim), cfg.rest_hidden, tc.seed);
    job.history = train(job.net, pretrain, X, Y, tc);
  });

  nlohmann::json tl;
  tl["fold"] = fold;
  tl["train_images"] = split.train.size();
  tl["real_features"] = s.real_features;
  tl["assigned"] = s.assigned;
  tl["clusters_used"] = s.clusters_used;
  for (const auto& job : jobs) {
    save_rest_model(paths.rest_model(fold, job.method), job.net);
    tl[job.method] = {{"pairs", job.pairs->size()},
                      {"pretrain_loss", job.history.pretrain_loss},
                      {"main_loss", job.history.main_loss}};
  }
  detail::write_text(paths.train_log(fold), tl.dump(1) + "\n");
  return s;
}

// ---------------------------------------------------------------------------
// localize
// ---------------------------------------------------------------------------

struct ImageOutcome {
  int image_id = 0;
  LocalizationResult result;
  MatchingAccuracy accuracy;
  std::size_t matches = 0;
};

// extract -> (transform) -> classify -> top matches -> RANSAC-PnP, for one
// image's features. `rest` is null for the naive method.
inline ImageOutcome localize_image(const std::vector<FeatureRecord>& features, const CameraView& view,
                                   const RandomForestModel& forest, const RestNetwork<float>* rest,
                                   const PipelineConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  ImageOutcome out;
  out.image_id = view.id;
  std::vector<MatchCandidate> candidates;
  if (!features.empty()) {
    RestNetwork<float>::Matrix X(static_cast<Eigen::Index>(features.front().descriptor.size()),
                                 static_cast<Eigen::Index>(features.size()));
    for (std::size_t i = 0; i < features.size(); ++i) X.col(static_cast<Eigen::Index>(i)) = features[i].descriptor;
    if (rest) X = rest->forward_batch(X);
    for (std::size_t i = 0; i < features.size(); ++i) {
      const Descriptor d = X.col(static_cast<Eigen::Index>(i));
      const auto c = classify(forest, d);
      candidates.push_back({features[i].u, c.scene_point, c.confidence, i});
    }
  }
  const auto matches = filter_matches(std::move(candidates), cfg.match_cap);
  out.matches = matches.size();
  RansacConfig rc = cfg.ransac;
  rc.seed = derive_seed(cfg.root_seed, "ransac", static_cast<std::uint64_t>(view.id));
  out.result = ransac_pnp(std::span<const MatchCandidate>(matches), view.intrinsics, rc);
  out.accuracy = matching_accuracy(matches, view.pose, view.intrinsics, 3.0);
  out.result.time_ms =
      cfg.timing ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count() : 0.0;
  return out;
}

inline nlohmann::json outcome_json(const ImageOutcome& o) {
  nlohmann::json j{{"image", o.image_id},
                   {"MA", o.accuracy.value},
                   {"MA_warning", o.accuracy.empty},
                   {"matches", o.matches},
                   {"inliers", o.result.inliers},
                   {"iterations", o.result.iterations},
                   {"time_ms", o.result.time_ms},
                   {"failed", o.result.failed()}};
  if (o.result.pose) {
    const auto& p = *o.result.pose;
    j["R"] = {p.R(0, 0), p.R(0, 1), p.R(0, 2), p.R(1, 0), p.R(1, 1), p.R(1, 2), p.R(2, 0), p.R(2, 1), p.R(2, 2)};
    j["t"] = {p.t.x(), p.t.y(), p.t.z()};
  }
  return j;
}

inline ImageOutcome outcome_from_json(const nlohmann::json& j) {
  ImageOutcome o;
  o.image_id = j.at("image").get<int>();
  o.accuracy.value = j.at("MA").get<double>();
  o.accuracy.empty = j.at("MA_warning").get<bool>();
  o.matches = j.at("matches").get<std::size_t>();
  o.result.inliers = j.at("inliers").get<std::size_t>();
  o.result.iterations = j.at("iterations").get<int>();
  o.result.time_ms = j.at("time_ms").get<double>();
  if (!j.at("failed").get<bool>()) {
    Pose p;
    const auto& R = j.at("R");
    for (int k = 0; k < 9; ++k) p.R(k / 3, k % 3) = R[static_cast<std::size_t>(k)].get<double>();
    const auto& t = j.at("t");
    p.t = {t[0].get<double>(), t[1].get<double>(), t[2].get<double>()};
    o.result.pose = p;
  }
  return o;
}

inline std::vector<ImageOutcome> cmd_localize(const PipelineConfig& cfg, int fold, const std::string& method) {
  const RunPaths paths{cfg.output_dir};
  method_file_tag(method);
  const ViewSet vs = make_views(cfg);
  const auto folds = folds_for(cfg, vs.real.size());
  const FoldSplit& split = fold_at(folds, fold);
  detail::require(paths.forest(), "forest model (run train)");
  const auto forest = load_forest(paths.forest());
  std::optional<RestNetwork<float>> rest;
  if (method != "naive") {
    detail::require(paths.rest_model(fold, method), "REST model (run train --fold " + std::to_string(fold) + ")");
    rest = load_rest_model<float>(paths.rest_model(fold, method));
  }
  const auto reals = real_features(cfg, vs);

  std::vector<ImageOutcome> out(split.test.size());
  parallel_for(split.test.size(), [&](std::size_t i) {
    const auto id = static_cast<std::size_t>(split.test[i]);
    out[i] = localize_image(reals[id], vs.real[id], forest, rest ? &*rest : nullptr, cfg);
  });

  nlohmann::json j;
  j["fold"] = fold;
  j["method"] = method;
  j["images"] = nlohmann::json::array();
  for (const auto& o : out) j["images"].push_back(outcome_json(o));
  detail::write_text(paths.results(fold, method), j.dump(1) + "\n");
  return out;
}

// ---------------------------------------------------------------------------
// evaluate / report
// ---------------------------------------------------------------------------

inline const char* kDescriptorName = "grad-hist-128";

inline std::string format_summary(const Report& r, std::size_t n_images, int folds) {
  std::ostringstream os;
  os << "config " << r.config_hash << ", " << n_images << " test images, " << folds << " folds\n";
  os << std::left << std::setw(20) << "method" << std::setw(8) << "stat" << std::right << std::setw(9) << "MA %"
     << std::setw(10) << "PE cm" << std::setw(10) << "OE deg" << std::setw(11) << "time ms" << std::setw(10)
     << "failures" << "\n";
  for (const auto& row : r.rows) {
    os << std::left << std::setw(20) << row.method << std::setw(8) << row.statistic << std::right << std::fixed
       << std::setprecision(2) << std::setw(9) << row.ma_percent << std::setw(10) << row.pe_cm << std::setw(10)
       << row.oe_deg << std::setw(11) << row.time_ms << std::setw(10) << row.failures << "\n";
  }
  const double gain = r.row("rest_whitening", "median").ma_percent - r.row("naive", "median").ma_percent;
  os << "median MA improvement (rest_whitening - naive): " << std::showpos << std::fixed << std::setprecision(2)
     << gain << std::noshowpos << " percentage points\n";
  return os.str();
}

inline Report cmd_evaluate(const PipelineConfig& cfg) {
  const RunPaths paths{cfg.output_dir};
  const ViewSet vs = make_views(cfg);
  const auto folds = folds_for(cfg, vs.real.size());

  std::vector<std::string> missing;
  for (const auto& f : folds)
    for (const auto& m : method_names())
      if (!fs::exists(paths.results(f.fold, m))) missing.push_back("fold " + std::to_string(f.fold) + "/" + m);
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw RuntimeFailure("evaluate: incomplete folds: " + list);
  }

  // Pooled per-image rows in image-id order.
  std::vector<int> fold_of(vs.real.size(), -1);
  for (const auto& f : folds)
    for (int id : f.test) fold_of[static_cast<std::size_t>(id)] = f.fold;
  std::vector<Pose> gt;
  for (const auto& v : vs.real) gt.push_back(v.pose);

  std::vector<MethodRun> runs;
  for (const auto& m : method_names()) {
    std::vector<std::optional<ImageOutcome>> by_id(vs.real.size());
    for (const auto& f : folds) {
      const auto j = detail::read_json(paths.results(f.fold, m), "results");
      for (const auto& e : j.at("images")) {
        auto o = outcome_from_json(e);
        if (o.image_id < 0 || static_cast<std::size_t>(o.image_id) >= by_id.size()) {
          throw RuntimeFailure("results reference unknown image " + std::to_string(o.image_id));
        }
        by_id[static_cast<std::size_t>(o.image_id)] = o;
      }
    }
    MethodRun run;
    run.method = m;
    for (std::size_t i = 0; i < by_id.size(); ++i) {
      if (!by_id[i]) throw RuntimeFailure("evaluate: no " + m + " result for real image " + std::to_string(i));
      run.results.push_back(by_id[i]->result);
      run.accuracy.push_back(by_id[i]->accuracy);
      run.matches.push_back(by_id[i]->matches);
      run.image_ids.push_back(static_cast<int>(i));
      run.folds.push_back(fold_of[i]);
    }
    runs.push_back(std::move(run));
  }
  Report report = evaluate_run(runs, gt, kDescriptorName);
  report.config_hash = cfg.config_hash;
  detail::write_text(paths.report_json(), report_to_json(report).dump(1) + "\n");
  detail::write_text(paths.report_csv(), report_to_csv(report));
  detail::write_text(paths.summary(), format_summary(report, vs.real.size(), cfg.cv_folds));
  return report;
}

inline std::string cmd_report(const PipelineConfig& cfg) {
  const RunPaths paths{cfg.output_dir};
  detail::require(paths.summary(), "summary (run evaluate)");
  std::ifstream is(paths.summary());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// Every stage in order, all folds and methods.
inline Report run_all(const PipelineConfig& cfg) {
  cmd_render(cfg);
  cmd_build_db(cfg);
  const RunPaths paths{cfg.output_dir};
  ensure_forest(cfg, load_database(paths));
  real_features(cfg, make_views(cfg));
  parallel_for(static_cast<std::size_t>(cfg.cv_folds), [&](std::size_t f) { cmd_train(cfg, static_cast<int>(f)); });
  for (int f = 0; f < cfg.cv_folds; ++f)
    for (const auto& m : method_names()) cmd_localize(cfg, f, m);
  return cmd_evaluate(cfg);
}

}  // namespace illumloc
