#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "illumloc/pipeline.hpp"

using namespace illumloc;

namespace {

const fs::path kWork = fs::temp_directory_path() / "illumloc_pipeline_test";

nlohmann::json small_config(const std::string& out) {
  auto j = nlohmann::json::parse(R"({
    "root_seed": 3, "timing": false, "cv_folds": 2,
    "intrinsics": {"fx": 325, "fy": 325, "cx": 159.5, "cy": 119.5, "width": 320, "height": 240},
    "real": {"count": 8},
    "features": {"max_features": 300},
    "rest": {"hidden": [32], "epochs_pretrain": 1, "epochs_main": 2, "batch_size": 64},
    "forest": {"trees": 4, "max_depth": 12}
  })");
  j["output_dir"] = out;
  return j;
}

fs::path write_config(const std::string& name, const nlohmann::json& j) {
  fs::create_directories(kWork);
  const fs::path p = kWork / name;
  std::ofstream(p) << j.dump(1);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

int cli(const std::string& args) {
  const std::string cmd = std::string(ILLUMLOC_CLI) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

// One small run shared by the artifact tests.
class SmallRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kWork / "small");
    cfg_ = new PipelineConfig(load_config(write_config("small.json", small_config("small"))));
    cmd_render(*cfg_);
    cmd_build_db(*cfg_);
    for (int f = 0; f < cfg_->cv_folds; ++f) cmd_train(*cfg_, f);
    for (int f = 0; f < cfg_->cv_folds; ++f)
      for (const auto& m : method_names()) cmd_localize(*cfg_, f, m);
    report_ = new Report(cmd_evaluate(*cfg_));
  }
  static void TearDownTestSuite() {
    delete cfg_;
    delete report_;
  }
  static PipelineConfig* cfg_;
  static Report* report_;
  static RunPaths paths() { return {cfg_->output_dir}; }
};
PipelineConfig* SmallRun::cfg_ = nullptr;
Report* SmallRun::report_ = nullptr;

}  // namespace

TEST(Pipeline, FoldsPartitionImages) {
  for (std::size_t n : {5u, 12u, 60u, 61u, 64u}) {
    for (int k : {2, 5}) {
      const auto folds = make_folds(n, k, 9);
      ASSERT_EQ(folds.size(), static_cast<std::size_t>(k));
      std::multiset<int> all;
      std::size_t lo = n, hi = 0;
      for (const auto& f : folds) {
        all.insert(f.test.begin(), f.test.end());
        lo = std::min(lo, f.test.size());
        hi = std::max(hi, f.test.size());
        EXPECT_EQ(f.train.size() + f.test.size(), n);
        for (int id : f.test) EXPECT_FALSE(std::binary_search(f.train.begin(), f.train.end(), id));
      }
      EXPECT_EQ(all.size(), n);
      EXPECT_EQ(std::set<int>(all.begin(), all.end()).size(), n);
      EXPECT_LE(hi - lo, 1u);
    }
  }
  EXPECT_EQ(make_folds(60, 5, 1)[0].test, make_folds(60, 5, 1)[0].test);
  EXPECT_NE(make_folds(60, 5, 1)[0].test, make_folds(60, 5, 2)[0].test);
  EXPECT_THROW(make_folds(60, 1, 1), ValidationError);
  EXPECT_THROW(make_folds(3, 5, 1), ValidationError);
}

TEST(Pipeline, ConfigErrorsNameFileAndField) {
  const auto expect_error = [](const nlohmann::json& j, const std::string& needle) {
    const fs::path p = write_config("bad.json", j);
    try {
      load_config(p);
      ADD_FAILURE() << "no error for " << j.dump();
    } catch (const ValidationError& e) {
      const std::string msg = e.what();
      EXPECT_NE(msg.find("bad.json"), std::string::npos) << msg;
      EXPECT_NE(msg.find(needle), std::string::npos) << msg;
    }
  };
  expect_error({{"rest", {{"learning_rate", "fast"}}}}, "rest.learning_rate");
  expect_error({{"grid", "huge"}}, "grid");
  expect_error({{"cv_folds", 1}}, "cv_folds");
  expect_error({{"scene", "missing_scene.json"}}, "scene");
  expect_error({{"real", {{"source", "manifest"}, {"manifest", "nope.txt"}}}}, "real.manifest");
  expect_error({{"correspondence", {{"whitening", "none"}}}}, "correspondence.whitening");
  EXPECT_THROW(load_config(kWork / "does_not_exist.json"), ValidationError);
}

TEST(Pipeline, ConfigHashIgnoresOutputDir) {
  const auto a = config_from_json(small_config("a"), kWork);
  const auto b = config_from_json(small_config("b"), kWork);
  auto changed = small_config("a");
  changed["root_seed"] = 4;
  EXPECT_EQ(a.config_hash, b.config_hash);
  EXPECT_NE(a.config_hash, config_from_json(changed, kWork).config_hash);
  EXPECT_EQ(a.output_dir, kWork / "a");
}

TEST(Pipeline, ViewCounts) {
  auto cfg = config_from_json(small_config("views"), kWork);
  const auto desk = make_views(cfg);
  EXPECT_EQ(desk.lighting.size(), 8u);
  EXPECT_EQ(desk.database.size(), 128u);
  EXPECT_EQ(desk.real.size(), 8u);
  cfg.full_grid = true;
  const auto full = make_views(cfg, false);
  EXPECT_EQ(full.lighting.size(), 56u);
  EXPECT_EQ(full.database.size(), 4480u);
  std::set<int> ids;
  for (const auto& v : full.database) ids.insert(v.id);
  EXPECT_EQ(ids.size(), 4480u);
}

TEST(Pipeline, RealLightingFollowsConfig) {
  auto j = small_config("light");
  j["real"]["count"] = 200;
  const auto grid = make_views(config_from_json(j, kWork));
  j["real"]["lighting"] = "database";
  const auto db = make_views(config_from_json(j, kWork));
  std::set<std::pair<double, double>> g, d, desk;
  for (const auto& v : grid.real) g.insert({v.lighting.theta, v.lighting.phi});
  for (const auto& v : db.real) d.insert({v.lighting.theta, v.lighting.phi});
  for (const auto& l : db.lighting) desk.insert({l.theta, l.phi});
  EXPECT_GT(g.size(), 30u);
  EXPECT_EQ(d, desk);
  for (const auto& v : grid.real) EXPECT_EQ(v.profile.mode, RenderMode::PseudoReal);
}

TEST(Pipeline, CliExitCodes) {
  const auto cfg = write_config("cli.json", small_config("cli"));
  fs::remove_all(kWork / "cli");
  EXPECT_EQ(cli("render --config " + (kWork / "nope.json").string()), 1);
  EXPECT_EQ(cli("render --config " + write_config("cli_bad.json", {{"cv_folds", 0}}).string()), 1);
  EXPECT_EQ(cli("render"), 1);
  EXPECT_EQ(cli("build-db --config " + cfg.string()), 2);
  EXPECT_EQ(cli("localize --config " + cfg.string() + " --method magic"), 1);
  EXPECT_EQ(cli("render --dry-run --full-grid --config " + cfg.string()), 0);
  const auto views = nlohmann::json::parse(slurp(kWork / "cli" / "views.json"));
  EXPECT_EQ(views["lighting_conditions"], 56);
  EXPECT_EQ(views["database"].size(), 4480u);
  EXPECT_FALSE(fs::exists(kWork / "cli" / "images"));
  EXPECT_EQ(cli("evaluate --config " + cfg.string()), 2);
}

TEST_F(SmallRun, RenderWritesEveryImage) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(paths().root / "images" / "db")) n += e.path().extension() == ".ppm";
  EXPECT_EQ(n, 128u);
  EXPECT_TRUE(fs::exists(paths().real_image(7)));
}

TEST_F(SmallRun, RerenderIsByteIdentical) {
  const std::string before = slurp(paths().db_image(5)) + slurp(paths().real_image(3));
  cmd_render(*cfg_);
  EXPECT_EQ(before, slurp(paths().db_image(5)) + slurp(paths().real_image(3)));
}

TEST_F(SmallRun, DatabaseFeaturesHaveScenePoints) {
  const auto store = load_feature_store(paths().synthetic_store());
  EXPECT_GT(store.records.size(), 1000u);
  for (const auto& r : store.records) ASSERT_TRUE(r.scene_point.has_value());
  std::stringstream a, b;
  write_feature_store(a, store.records, store.dim);
  EXPECT_EQ(a.str(), slurp(paths().synthetic_store()));
  const auto db = load_database(paths());
  EXPECT_GT(db.clusters.size(), 100u);
  for (const auto& c : db.clusters) {
    EXPECT_LE(c.size(), cfg_->representative_budget);
    EXPECT_GE(c.size(), std::min(cfg_->min_db_cluster, cfg_->representative_budget));
  }
}

TEST_F(SmallRun, PairLogFollowsK) {
  for (int f = 0; f < cfg_->cv_folds; ++f) {
    std::istringstream log(slurp(paths().pair_log(f)));
    std::string line;
    std::getline(log, line);
    EXPECT_EQ(line, "key_x,key_y,key_z,real_size,synthetic_size,k,pairs");
    std::size_t rows = 0, pairs = 0;
    while (std::getline(log, line)) {
      std::istringstream row(line);
      std::vector<long> v;
      for (std::string cell; std::getline(row, cell, ',');) v.push_back(std::stol(cell));
      ASSERT_EQ(v.size(), 7u);
      EXPECT_EQ(static_cast<std::size_t>(v[5]), compute_k(static_cast<std::size_t>(v[4]), cfg_->augmentation));
      EXPECT_EQ(v[6], v[3] * v[5]);
      pairs += static_cast<std::size_t>(v[6]);
      ++rows;
    }
    EXPECT_GT(rows, 0u);
    const auto tl = nlohmann::json::parse(slurp(paths().train_log(f)));
    EXPECT_EQ(tl["rest_whitening"]["pairs"].get<std::size_t>(), pairs);
  }
}

TEST_F(SmallRun, DoubledGammaDoublesKInPairLog) {
  auto j = small_config("small_gamma");
  j["correspondence"] = {{"gamma", 0.4}};
  const auto cfg = config_from_json(j, kWork);
  fs::remove_all(cfg.output_dir);
  fs::create_directories(cfg.output_dir);
  fs::copy(paths().root, cfg.output_dir, fs::copy_options::recursive);
  fs::remove_all(RunPaths{cfg.output_dir}.root / "models");
  cmd_train(cfg, 0);
  std::istringstream log(slurp(RunPaths{cfg.output_dir}.pair_log(0)));
  std::string line;
  std::getline(log, line);
  std::size_t rows = 0;
  while (std::getline(log, line)) {
    std::istringstream row(line);
    std::vector<long> v;
    for (std::string cell; std::getline(row, cell, ',');) v.push_back(std::stol(cell));
    const double n = static_cast<double>(v[4]);
    EXPECT_EQ(v[5], std::min<long>(v[4], std::max<long>(1, static_cast<long>(std::floor(0.4 * std::sqrt(n) + 1e-9)))));
    ++rows;
  }
  EXPECT_GT(rows, 0u);
}

TEST_F(SmallRun, ModelsReloadIdentically) {
  const auto net = load_rest_model<float>(paths().rest_model(0, "rest_whitening"));
  std::stringstream ss;
  write_rest_model(ss, net);
  EXPECT_EQ(ss.str(), slurp(paths().rest_model(0, "rest_whitening")));
  EXPECT_FALSE(net == load_rest_model<float>(paths().rest_model(0, "rest_no_whitening")));
  std::stringstream fs_;
  write_forest(fs_, load_forest(paths().forest()));
  EXPECT_EQ(fs_.str(), slurp(paths().forest()));
}

TEST_F(SmallRun, NaiveSkipsRestAndRerunsAreIdentical) {
  const std::string first = slurp(paths().results(1, "naive"));
  const auto before = rest_forward_calls().load();
  cmd_localize(*cfg_, 1, "naive");
  EXPECT_EQ(rest_forward_calls().load(), before);
  EXPECT_EQ(slurp(paths().results(1, "naive")), first);
  const std::string rest = slurp(paths().results(1, "rest_whitening"));
  cmd_localize(*cfg_, 1, "rest_whitening");
  EXPECT_GT(rest_forward_calls().load(), before);
  EXPECT_EQ(slurp(paths().results(1, "rest_whitening")), rest);
}

TEST_F(SmallRun, MissingModelIsNamed) {
  auto cfg = *cfg_;
  cfg.output_dir = kWork / "no_models";
  try {
    cmd_localize(cfg, 0, "rest_whitening");
    FAIL();
  } catch (const RuntimeFailure& e) {
    EXPECT_NE(std::string(e.what()).find("forest"), std::string::npos);
  }
}

TEST_F(SmallRun, ReportShape) {
  ASSERT_EQ(report_->rows.size(), 6u);
  for (const auto& r : report_->rows) EXPECT_EQ(r.images, 8u);
  EXPECT_EQ(report_->config_hash, cfg_->config_hash);
  EXPECT_EQ(report_->folds.size(), 6u);
  const auto j = nlohmann::json::parse(slurp(paths().report_json()));
  EXPECT_EQ(j["config_hash"], cfg_->config_hash);
  const std::string summary = cmd_report(*cfg_);
  EXPECT_NE(summary.find("percentage points"), std::string::npos);
  EXPECT_NE(slurp(paths().report_csv()).find("rest_whitening"), std::string::npos);
  // Same inputs, same report.
  const std::string before = slurp(paths().report_json());
  cmd_evaluate(*cfg_);
  EXPECT_EQ(slurp(paths().report_json()), before);
}
