#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include "illumloc/common.hpp"
#include "illumloc/features.hpp"
#include "illumloc/geometry.hpp"

namespace illumloc {

class TooFewClasses : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

struct ForestConfig {
  int trees = 100;
  int max_depth = 20;
  int min_leaf = 2;
  std::uint64_t seed = 0;

  void validate() const {
    if (trees < 1 || max_depth < 0 || min_leaf < 1) throw ValidationError("forest config: invalid sizes");
  }
};

// Preorder node array. Internal nodes: x[dim] <= threshold goes left. Leaves
// reference a sparse class histogram [hist_begin, hist_begin + hist_len).
struct TreeNode {
  static constexpr std::uint32_t kLeaf = 0xFFFFFFFFu;
  std::uint32_t dim = kLeaf;
  float threshold = 0.0f;
  std::uint32_t left = 0;
  std::uint32_t right = 0;
  std::uint32_t hist_begin = 0;
  std::uint32_t hist_len = 0;

  bool is_leaf() const { return dim == kLeaf; }
};

struct DecisionTree {
  std::vector<TreeNode> nodes;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> histograms;  // (class, count)

  const TreeNode& leaf_for(const float* x) const {
    const TreeNode* n = &nodes[0];
    while (!n->is_leaf()) n = &nodes[x[n->dim] <= n->threshold ? n->left : n->right];
    return *n;
  }
};

struct ClassInfo {
  LatticeKey key;
  ScenePoint scene_point = ScenePoint::Zero();
};

struct RandomForestModel {
  std::uint32_t dim = 0;
  std::vector<ClassInfo> class_map;  // class index -> scene point
  std::vector<DecisionTree> trees;

  std::size_t n_classes() const { return class_map.size(); }
};

// Row-major float sample matrix for training.
struct LabelledSamples {
  std::uint32_t dim = 0;
  std::vector<float> values;  // n * dim
  std::vector<std::uint32_t> labels;

  std::size_t size() const { return labels.size(); }
  const float* row(std::size_t i) const { return &values[i * dim]; }
};

namespace detail {

class TreeBuilder {
 public:
  TreeBuilder(const LabelledSamples& data, std::size_t n_classes, const ForestConfig& cfg, Rng& rng)
      : data_(data), cfg_(cfg), rng_(rng), counts_l_(n_classes, 0), counts_r_(n_classes, 0) {
    features_per_node_ = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(std::sqrt(double(data.dim)))));
    dims_.resize(data.dim);
    std::iota(dims_.begin(), dims_.end(), 0u);
  }

  DecisionTree build(std::vector<std::uint32_t> sample_idx) {
    tree_ = {};
    idx_ = std::move(sample_idx);
    grow(0, idx_.size(), 0);
    return std::move(tree_);
  }

 private:
  std::uint32_t make_leaf(std::size_t begin, std::size_t end) {
    const auto id = static_cast<std::uint32_t>(tree_.nodes.size());
    tree_.nodes.emplace_back();
    auto& node = tree_.nodes.back();
    node.hist_begin = static_cast<std::uint32_t>(tree_.histograms.size());
    std::vector<std::uint32_t> labels;
    labels.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) labels.push_back(data_.labels[idx_[i]]);
    std::sort(labels.begin(), labels.end());
    for (std::size_t i = 0; i < labels.size();) {
      std::size_t j = i;
      while (j < labels.size() && labels[j] == labels[i]) ++j;
      tree_.histograms.emplace_back(labels[i], static_cast<std::uint32_t>(j - i));
      i = j;
    }
    tree_.nodes[id].hist_len = static_cast<std::uint32_t>(tree_.histograms.size()) - tree_.nodes[id].hist_begin;
    return id;
  }

  std::uint32_t grow(std::size_t begin, std::size_t end, int depth) {
    const std::size_t n = end - begin;
    bool pure = true;
    for (std::size_t i = begin + 1; i < end && pure; ++i) pure = data_.labels[idx_[i]] == data_.labels[idx_[begin]];
    if (pure || depth >= cfg_.max_depth || n < 2 * static_cast<std::size_t>(cfg_.min_leaf)) {
      return make_leaf(begin, end);
    }

    // Node impurity in "n - sum c^2 / n" form; lower is better.
    double best_score = std::numeric_limits<double>::infinity();
    std::uint32_t best_dim = TreeNode::kLeaf;
    float best_threshold = 0.0f;
    double parent_sumsq = 0.0;
    for (std::size_t i = begin; i < end; ++i) counts_r_[data_.labels[idx_[i]]] = 0;
    for (std::size_t i = begin; i < end; ++i) {
      auto& c = counts_r_[data_.labels[idx_[i]]];
      parent_sumsq += 2.0 * c + 1.0;
      ++c;
    }
    const double parent_score = static_cast<double>(n) - parent_sumsq / static_cast<double>(n);

    // Partial Fisher-Yates picks the candidate dimensions.
    for (std::size_t f = 0; f < features_per_node_; ++f) {
      std::swap(dims_[f], dims_[f + rng_.index(dims_.size() - f)]);
    }
    std::vector<std::pair<float, std::uint32_t>>& vals = scratch_;
    for (std::size_t f = 0; f < features_per_node_; ++f) {
      const std::uint32_t dim = dims_[f];
      vals.clear();
      for (std::size_t i = begin; i < end; ++i) vals.emplace_back(data_.row(idx_[i])[dim], data_.labels[idx_[i]]);
      std::sort(vals.begin(), vals.end());
      if (vals.front().first == vals.back().first) continue;
      for (const auto& v : vals) {
        counts_l_[v.second] = 0;
        counts_r_[v.second] = 0;
      }
      for (const auto& v : vals) ++counts_r_[v.second];
      double sumsq_l = 0.0, sumsq_r = parent_sumsq;
      const std::size_t min_leaf = static_cast<std::size_t>(cfg_.min_leaf);
      for (std::size_t i = 0; i + 1 < n; ++i) {
        const std::uint32_t c = vals[i].second;
        sumsq_l += 2.0 * counts_l_[c] + 1.0;
        ++counts_l_[c];
        sumsq_r -= 2.0 * counts_r_[c] - 1.0;
        --counts_r_[c];
        const std::size_t nl = i + 1, nr = n - nl;
        if (vals[i].first == vals[i + 1].first || nl < min_leaf || nr < min_leaf) continue;
        const double score = (static_cast<double>(nl) - sumsq_l / nl) + (static_cast<double>(nr) - sumsq_r / nr);
        if (score < best_score) {
          best_score = score;
          best_dim = dim;
          // Midpoint in double, rounded to float, must still separate.
          float thr = static_cast<float>(0.5 * (static_cast<double>(vals[i].first) + vals[i + 1].first));
          if (!(thr < vals[i + 1].first)) thr = vals[i].first;
          best_threshold = thr;
        }
      }
    }
    if (best_dim == TreeNode::kLeaf || !(best_score < parent_score - 1e-12)) return make_leaf(begin, end);

    const auto mid_it = std::stable_partition(idx_.begin() + static_cast<std::ptrdiff_t>(begin),
                                              idx_.begin() + static_cast<std::ptrdiff_t>(end),
                                              [&](std::uint32_t s) { return data_.row(s)[best_dim] <= best_threshold; });
    const std::size_t mid = static_cast<std::size_t>(mid_it - idx_.begin());
    const auto id = static_cast<std::uint32_t>(tree_.nodes.size());
    tree_.nodes.emplace_back();
    tree_.nodes[id].dim = best_dim;
    tree_.nodes[id].threshold = best_threshold;
    const std::uint32_t left = grow(begin, mid, depth + 1);
    const std::uint32_t right = grow(mid, end, depth + 1);
    tree_.nodes[id].left = left;
    tree_.nodes[id].right = right;
    return id;
  }

  const LabelledSamples& data_;
  const ForestConfig& cfg_;
  Rng& rng_;
  std::size_t features_per_node_ = 1;
  std::vector<std::uint32_t> dims_;
  std::vector<std::uint32_t> counts_l_, counts_r_;
  std::vector<std::uint32_t> idx_;
  std::vector<std::pair<float, std::uint32_t>> scratch_;
  DecisionTree tree_;
};

}  // namespace detail

struct OutOfBag {
  std::size_t evaluated = 0;  // samples left out by at least one tree
  std::size_t correct = 0;
  double accuracy() const { return evaluated ? static_cast<double>(correct) / evaluated : 0.0; }
};

// Bagged Gini trees; floor(sqrt(D)) candidate dimensions per node. Tree i
// draws from its own seed, so trees can be grown in any order.
inline RandomForestModel train_forest(const LabelledSamples& data, std::vector<ClassInfo> class_map,
                                      const ForestConfig& cfg, OutOfBag* oob = nullptr) {
  cfg.validate();
  if (class_map.size() < 2) throw TooFewClasses("train_forest: need at least 2 classes");
  if (data.size() == 0) throw TooFewClasses("train_forest: no samples");
  std::vector<std::size_t> per_class(class_map.size(), 0);
  for (auto l : data.labels) {
    if (l >= class_map.size()) throw ValidationError("train_forest: label outside class map");
    ++per_class[l];
  }
  if (std::any_of(per_class.begin(), per_class.end(), [](std::size_t c) { return c == 0; })) {
    throw ValidationError("train_forest: every class needs at least one sample");
  }
  RandomForestModel model;
  model.dim = data.dim;
  model.class_map = std::move(class_map);
  model.trees.resize(static_cast<std::size_t>(cfg.trees));
  const std::size_t n = data.size();
  std::vector<std::vector<char>> in_bag(oob ? model.trees.size() : 0);

  parallel_for(model.trees.size(), [&](std::size_t t) {
    Rng rng(derive_seed(cfg.seed, "forest-tree", t));
    std::vector<std::uint32_t> sample(n);
    for (auto& s : sample) s = static_cast<std::uint32_t>(rng.index(n));
    if (oob) {
      in_bag[t].assign(n, 0);
      for (auto s : sample) in_bag[t][s] = 1;
    }
    detail::TreeBuilder builder(data, model.class_map.size(), cfg, rng);
    model.trees[t] = builder.build(std::move(sample));
  });

  if (oob) {
    *oob = {};
    std::vector<double> prob(model.class_map.size());
    for (std::size_t i = 0; i < n; ++i) {
      std::fill(prob.begin(), prob.end(), 0.0);
      bool any = false;
      for (std::size_t t = 0; t < model.trees.size(); ++t) {
        if (in_bag[t][i]) continue;
        any = true;
        const auto& tree = model.trees[t];
        const auto& leaf = tree.leaf_for(data.row(i));
        double total = 0.0;
        for (std::uint32_t h = 0; h < leaf.hist_len; ++h) total += tree.histograms[leaf.hist_begin + h].second;
        for (std::uint32_t h = 0; h < leaf.hist_len; ++h) {
          const auto& [c, cnt] = tree.histograms[leaf.hist_begin + h];
          prob[c] += cnt / total;
        }
      }
      if (!any) continue;
      ++oob->evaluated;
      const auto best = std::max_element(prob.begin(), prob.end()) - prob.begin();
      if (static_cast<std::uint32_t>(best) == data.labels[i]) ++oob->correct;
    }
  }
  return model;
}

// Training samples from synthetic clusters: one class per cluster, in order.
inline std::pair<LabelledSamples, std::vector<ClassInfo>> samples_from_clusters(
    const std::vector<FeatureCluster>& clusters) {
  LabelledSamples data;
  std::vector<ClassInfo> classes;
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    const auto& cl = clusters[c];
    if (cl.members.empty()) throw ValidationError("train_forest: empty cluster");
    // Points are kept at f32 precision so a saved model reloads identically.
    classes.push_back({cl.key, cl.scene_point.cast<float>().cast<double>()});
    for (const auto& m : cl.members) {
      if (data.dim == 0) data.dim = static_cast<std::uint32_t>(m.descriptor.size());
      if (m.descriptor.size() != static_cast<Eigen::Index>(data.dim)) {
        throw DimensionMismatch("train_forest: mixed descriptor dims");
      }
      data.values.insert(data.values.end(), m.descriptor.data(), m.descriptor.data() + data.dim);
      data.labels.push_back(static_cast<std::uint32_t>(c));
    }
  }
  return {std::move(data), std::move(classes)};
}

inline RandomForestModel train_forest(const std::vector<FeatureCluster>& db, const ForestConfig& cfg,
                                      OutOfBag* oob = nullptr) {
  if (db.size() < 2) throw TooFewClasses("train_forest: need at least 2 clusters");
  auto [data, classes] = samples_from_clusters(db);
  return train_forest(data, std::move(classes), cfg, oob);
}

struct Classification {
  std::uint32_t label = 0;
  double confidence = 0.0;
  ScenePoint scene_point = ScenePoint::Zero();
};

// Mean of per-tree normalized leaf histograms. Trees are accumulated in index
// order; ties in the argmax go to the lower class index.
inline std::vector<double> class_probabilities(const RandomForestModel& model, const Descriptor& f) {
  if (f.size() != static_cast<Eigen::Index>(model.dim)) throw DimensionMismatch("classify: descriptor dim differs from model");
  std::vector<double> prob(model.n_classes(), 0.0);
  for (const auto& tree : model.trees) {
    const auto& leaf = tree.leaf_for(f.data());
    double total = 0.0;
    for (std::uint32_t h = 0; h < leaf.hist_len; ++h) total += tree.histograms[leaf.hist_begin + h].second;
    for (std::uint32_t h = 0; h < leaf.hist_len; ++h) {
      const auto& [c, cnt] = tree.histograms[leaf.hist_begin + h];
      prob[c] += cnt / total;
    }
  }
  const double inv = 1.0 / static_cast<double>(model.trees.size());
  for (double& p : prob) p *= inv;
  return prob;
}

inline Classification classify(const RandomForestModel& model, const Descriptor& f,
                               std::vector<double>* probabilities = nullptr) {
  auto prob = class_probabilities(model, f);
  const auto best = static_cast<std::uint32_t>(std::max_element(prob.begin(), prob.end()) - prob.begin());
  Classification out{best, prob[best], model.class_map[best].scene_point};
  if (probabilities) *probabilities = std::move(prob);
  return out;
}

// ---------------------------------------------------------------------------
// Match filtering
// ---------------------------------------------------------------------------

struct MatchCandidate {
  ImagePoint u = ImagePoint::Zero();
  ScenePoint scene_point = ScenePoint::Zero();
  double confidence = 0.0;
  std::size_t query_index = 0;
};

// Highest confidence first, ties by lower query index, at most `cap`.
inline std::vector<MatchCandidate> filter_matches(std::vector<MatchCandidate> candidates, std::size_t cap = 100) {
  std::stable_sort(candidates.begin(), candidates.end(), [](const MatchCandidate& a, const MatchCandidate& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    return a.query_index < b.query_index;
  });
  if (candidates.size() > cap) candidates.resize(cap);
  return candidates;
}

// ---------------------------------------------------------------------------
// Model file: "FRST" | u32 version | u32 dim | u32 n_classes
//   | per class: i32 x3 lattice key, f32 x3 scene point
//   | u32 n_trees | per tree: u32 node count, preorder nodes:
//       u32 split dim (0xFFFFFFFF = leaf)
//       internal: f32 threshold, u32 left index, u32 right index
//       leaf: u32 entries, then (u32 class, u32 count) per entry
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kForestVersion = 1;

inline void write_forest(std::ostream& os, const RandomForestModel& m) {
  io::write_magic(os, "FRST");
  io::write_le<std::uint32_t>(os, kForestVersion);
  io::write_le<std::uint32_t>(os, m.dim);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.class_map.size()));
  for (const auto& c : m.class_map) {
    io::write_le<std::int32_t>(os, static_cast<std::int32_t>(c.key.x));
    io::write_le<std::int32_t>(os, static_cast<std::int32_t>(c.key.y));
    io::write_le<std::int32_t>(os, static_cast<std::int32_t>(c.key.z));
    for (int k = 0; k < 3; ++k) io::write_le<float>(os, static_cast<float>(c.scene_point[k]));
  }
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.trees.size()));
  for (const auto& t : m.trees) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.nodes.size()));
    for (const auto& n : t.nodes) {
      io::write_le<std::uint32_t>(os, n.dim);
      if (n.is_leaf()) {
        io::write_le<std::uint32_t>(os, n.hist_len);
        for (std::uint32_t h = 0; h < n.hist_len; ++h) {
          io::write_le<std::uint32_t>(os, t.histograms[n.hist_begin + h].first);
          io::write_le<std::uint32_t>(os, t.histograms[n.hist_begin + h].second);
        }
      } else {
        io::write_le<float>(os, n.threshold);
        io::write_le<std::uint32_t>(os, n.left);
        io::write_le<std::uint32_t>(os, n.right);
      }
    }
  }
}

inline RandomForestModel read_forest(std::istream& is) {
  io::expect_magic(is, "FRST");
  if (io::read_le<std::uint32_t>(is, "version") != kForestVersion) throw ValidationError("forest: unsupported version");
  RandomForestModel m;
  m.dim = io::read_le<std::uint32_t>(is, "dim");
  const auto nc = io::read_le<std::uint32_t>(is, "n_classes");
  for (std::uint32_t c = 0; c < nc; ++c) {
    ClassInfo info;
    info.key.x = io::read_le<std::int32_t>(is, "class key");
    info.key.y = io::read_le<std::int32_t>(is, "class key");
    info.key.z = io::read_le<std::int32_t>(is, "class key");
    for (int k = 0; k < 3; ++k) info.scene_point[k] = io::read_le<float>(is, "class point");
    m.class_map.push_back(info);
  }
  const auto nt = io::read_le<std::uint32_t>(is, "tree count");
  m.trees.resize(nt);
  for (auto& t : m.trees) {
    const auto nn = io::read_le<std::uint32_t>(is, "node count");
    t.nodes.resize(nn);
    for (auto& n : t.nodes) {
      n.dim = io::read_le<std::uint32_t>(is, "split dim");
      if (n.is_leaf()) {
        n.hist_begin = static_cast<std::uint32_t>(t.histograms.size());
        n.hist_len = io::read_le<std::uint32_t>(is, "histogram length");
        for (std::uint32_t h = 0; h < n.hist_len; ++h) {
          const auto c = io::read_le<std::uint32_t>(is, "histogram class");
          const auto cnt = io::read_le<std::uint32_t>(is, "histogram count");
          if (c >= nc) throw ValidationError("forest: histogram class out of range");
          t.histograms.emplace_back(c, cnt);
        }
      } else {
        if (n.dim >= m.dim) throw ValidationError("forest: split dimension out of range");
        n.threshold = io::read_le<float>(is, "threshold");
        n.left = io::read_le<std::uint32_t>(is, "left");
        n.right = io::read_le<std::uint32_t>(is, "right");
        if (n.left >= nn || n.right >= nn) throw ValidationError("forest: child index out of range");
      }
    }
  }
  return m;
}

inline void save_forest(const std::filesystem::path& path, const RandomForestModel& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure("cannot write " + path.string());
  write_forest(os, m);
}

inline RandomForestModel load_forest(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeFailure("missing forest model " + path.string());
  return read_forest(is);
}

}  // namespace illumloc
