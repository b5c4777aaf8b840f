#include <gtest/gtest.h>

#include <sstream>

#include "illumloc/forest.hpp"

using namespace illumloc;

namespace {

// Gaussian blobs in D dimensions, one cluster per blob.
std::vector<FeatureCluster> blobs(Rng& rng, int n_classes, int per_class, int dim, double spread) {
  std::vector<FeatureCluster> out(static_cast<std::size_t>(n_classes));
  for (int c = 0; c < n_classes; ++c) {
    out[c].key = {c, 0, 0};
    out[c].scene_point = ScenePoint(c, 2.0 * c, 0.5);
    Descriptor center(dim);
    for (int k = 0; k < dim; ++k) center[k] = static_cast<float>(rng.uniform(-1, 1));
    for (int i = 0; i < per_class; ++i) {
      FeatureRecord r;
      r.descriptor = center;
      for (int k = 0; k < dim; ++k) r.descriptor[k] += static_cast<float>(spread * rng.normal());
      r.origin = Origin::Synthetic;
      r.scene_point = out[c].scene_point;
      out[c].members.push_back(r);
    }
  }
  return out;
}

}  // namespace

TEST(Matcher, SeparatesGaussianBlobs) {
  Rng rng(41);
  const auto train = blobs(rng, 6, 40, 16, 0.1);
  ForestConfig cfg;
  cfg.trees = 20;
  cfg.seed = 1;
  OutOfBag oob;
  const auto model = train_forest(train, cfg, &oob);
  EXPECT_EQ(model.n_classes(), 6u);
  EXPECT_GT(oob.accuracy(), 0.95);
  int correct = 0, total = 0;
  for (std::size_t c = 0; c < train.size(); ++c) {
    for (int i = 0; i < 10; ++i) {
      Descriptor q = train[c].members[i].descriptor;
      for (int k = 0; k < q.size(); ++k) q[k] += static_cast<float>(0.05 * rng.normal());
      std::vector<double> prob;
      const auto r = classify(model, q, &prob);
      double sum = 0.0;
      for (double p : prob) sum += p;
      EXPECT_NEAR(sum, 1.0, 1e-9);
      EXPECT_EQ(r.confidence, prob[r.label]);
      correct += r.label == c;
      ++total;
      if (r.label == c) EXPECT_LT((r.scene_point - train[c].scene_point).norm(), 1e-5);
    }
  }
  EXPECT_GT(correct, 0.95 * total);
}

TEST(Matcher, TrainingIsDeterministicAndSeeded) {
  Rng rng(42);
  const auto train = blobs(rng, 4, 20, 8, 0.5);
  ForestConfig cfg;
  cfg.trees = 5;
  cfg.seed = 3;
  std::stringstream a, b, c;
  write_forest(a, train_forest(train, cfg));
  write_forest(b, train_forest(train, cfg));
  cfg.seed = 4;
  write_forest(c, train_forest(train, cfg));
  EXPECT_EQ(a.str(), b.str());
  EXPECT_NE(a.str(), c.str());
}

TEST(Matcher, ModelRoundTripKeepsPredictions) {
  Rng rng(43);
  const auto train = blobs(rng, 5, 15, 12, 0.3);
  ForestConfig cfg;
  cfg.trees = 8;
  const auto model = train_forest(train, cfg);
  std::stringstream ss;
  write_forest(ss, model);
  const auto back = read_forest(ss);
  for (const auto& c : train) {
    for (const auto& m : c.members) {
      EXPECT_EQ(class_probabilities(model, m.descriptor), class_probabilities(back, m.descriptor));
      EXPECT_EQ(classify(model, m.descriptor).scene_point, classify(back, m.descriptor).scene_point);
    }
  }
}

TEST(Matcher, Errors) {
  Rng rng(44);
  const auto one = blobs(rng, 1, 10, 4, 0.1);
  EXPECT_THROW(train_forest(one, ForestConfig{}), TooFewClasses);
  const auto two = blobs(rng, 2, 10, 4, 0.1);
  ForestConfig cfg;
  cfg.trees = 2;
  const auto model = train_forest(two, cfg);
  EXPECT_THROW(classify(model, Descriptor::Zero(5)), DimensionMismatch);
  cfg.trees = 0;
  EXPECT_THROW(train_forest(two, cfg), ValidationError);
}

TEST(Matcher, FilterKeepsMostConfident) {
  std::vector<MatchCandidate> c;
  for (std::size_t i = 0; i < 250; ++i) c.push_back({{0, 0}, ScenePoint::Zero(), (i * 37 % 101) / 100.0, i});
  const auto kept = filter_matches(c, 100);
  ASSERT_EQ(kept.size(), 100u);
  for (std::size_t i = 1; i < kept.size(); ++i) {
    EXPECT_TRUE(kept[i - 1].confidence > kept[i].confidence ||
                (kept[i - 1].confidence == kept[i].confidence && kept[i - 1].query_index < kept[i].query_index));
  }
  double min_kept = 1.0;
  for (const auto& k : kept) min_kept = std::min(min_kept, k.confidence);
  std::size_t above = 0;
  for (const auto& x : c) above += x.confidence > min_kept;
  EXPECT_LE(above, 100u);
  EXPECT_EQ(filter_matches({c.begin(), c.begin() + 10}, 100).size(), 10u);
}
