#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "illumloc/pipeline.hpp"

namespace {

using namespace illumloc;

struct Options {
  std::string config;
  std::optional<int> fold;
  std::optional<std::string> method;
  bool full_grid = false;
  bool dry_run = false;
};

PipelineConfig load(const Options& o) {
  PipelineConfig cfg = load_config(o.config);
  if (o.full_grid) cfg.full_grid = true;
  return cfg;
}

std::vector<int> folds_of(const PipelineConfig& cfg, const Options& o) {
  if (o.fold) return {*o.fold};
  std::vector<int> all;
  for (int f = 0; f < cfg.cv_folds; ++f) all.push_back(f);
  return all;
}

std::vector<std::string> methods_of(const Options& o) {
  if (o.method) return {method_file_tag(*o.method)};
  return method_names();
}

int run(const std::string& command, const Options& o) {
  const PipelineConfig cfg = load(o);
  if (command == "render") {
    const auto s = cmd_render(cfg, o.dry_run);
    std::cout << s.lighting_conditions << " lighting conditions, " << s.database_views << " database views, "
              << s.real_views << " real views, " << s.images_written << " images written\n";
  } else if (command == "build-db") {
    const auto s = cmd_build_db(cfg);
    std::cout << s.synthetic_features << " synthetic features in " << s.clusters << " clusters; database keeps "
              << s.database_features << " features in " << s.database_clusters << " clusters\n";
  } else if (command == "train") {
    for (int f : folds_of(cfg, o)) {
      const auto s = cmd_train(cfg, f);
      std::cout << "fold " << f << ": " << s.assigned << "/" << s.real_features << " real features assigned, "
                << s.clusters_used << " clusters, " << s.pairs_whitening << " pairs (whitened), "
                << s.pairs_no_whitening << " pairs (raw)\n";
    }
  } else if (command == "localize") {
    for (int f : folds_of(cfg, o)) {
      for (const auto& m : methods_of(o)) {
        const auto out = cmd_localize(cfg, f, m);
        std::size_t failed = 0;
        for (const auto& r : out) failed += r.result.failed() ? 1 : 0;
        std::cout << "fold " << f << " " << m << ": " << out.size() << " images, " << failed << " failures\n";
      }
    }
  } else if (command == "evaluate") {
    cmd_evaluate(cfg);
    std::cout << cmd_report(cfg);
  } else if (command == "report") {
    std::cout << cmd_report(cfg);
  } else if (command == "run") {
    run_all(cfg);
    std::cout << cmd_report(cfg);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Camera localization across the synthetic-to-real descriptor gap"};
  app.require_subcommand(1);
  Options o;

  const auto add = [&](const char* name, const char* help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "Pipeline config (JSON)")->required();
    sub->add_flag("--full-grid", o.full_grid, "Use the full 56 x 80 grid instead of the desk grid");
    return sub;
  };
  add("render", "Render database and real images")->add_flag("--dry-run", o.dry_run, "Write view metadata only");
  add("build-db", "Extract, cluster and prune the synthetic database");
  add("train", "Train REST models and the forest")->add_option("--fold", o.fold, "Fold index (default: all)");
  auto* loc = add("localize", "Localize the test images of a fold");
  loc->add_option("--fold", o.fold, "Fold index (default: all)");
  loc->add_option("--method", o.method, "naive | rest_no_whitening | rest_whitening (default: all)");
  add("evaluate", "Pool per-image results into the report");
  add("report", "Print the summary of an evaluated run");
  add("run", "Run every stage for all folds and methods");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  try {
    return run(app.get_subcommands().front()->get_name(), o);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
