#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "illumloc/common.hpp"

namespace illumloc {

class EmptyTrainingSet : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};

// Number of forward() / forward_batch() evaluations since process start.
inline std::atomic<std::uint64_t>& rest_forward_calls() {
  static std::atomic<std::uint64_t> calls{0};
  return calls;
}

inline const std::vector<int> kDefaultRestHidden{512, 256, 128, 256, 512};

// Fully connected network D -> hidden... -> D with rectifier hidden layers and
// a linear output layer. weights[l] is (widths[l+1] x widths[l]).
template <typename Scalar>
struct RestNetwork {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  std::vector<int> widths;
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  int dim() const { return widths.empty() ? 0 : widths.front(); }
  std::size_t layer_count() const { return weights.size(); }

  void validate() const {
    if (widths.size() < 2 || widths.front() != widths.back()) {
      throw ValidationError("rest network: first and last widths must be equal");
    }
    if (weights.size() != widths.size() - 1 || biases.size() != weights.size()) {
      throw ValidationError("rest network: layer count does not match widths");
    }
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (weights[l].rows() != widths[l + 1] || weights[l].cols() != widths[l] ||
          biases[l].size() != widths[l + 1]) {
        throw ValidationError("rest network: layer " + std::to_string(l) + " has inconsistent shape");
      }
    }
  }

  // Columns of X are samples.
  Matrix forward_batch(const Matrix& X) const {
    if (X.rows() != dim()) throw DimensionMismatch("rest forward: input dim differs from network dim");
    rest_forward_calls().fetch_add(1, std::memory_order_relaxed);
    Matrix a = X;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      Matrix z = weights[l] * a;
      z.colwise() += biases[l];
      if (l + 1 < weights.size()) z = z.cwiseMax(Scalar(0));
      a = std::move(z);
    }
    return a;
  }

  Vector forward(const Vector& x) const { return forward_batch(x).col(0); }

  template <typename Other>
  RestNetwork<Other> cast() const {
    RestNetwork<Other> out;
    out.widths = widths;
    for (const auto& w : weights) out.weights.push_back(w.template cast<Other>());
    for (const auto& b : biases) out.biases.push_back(b.template cast<Other>());
    return out;
  }

  bool operator==(const RestNetwork& o) const {
    if (widths != o.widths || weights.size() != o.weights.size()) return false;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (weights[l] != o.weights[l] || biases[l] != o.biases[l]) return false;
    }
    return true;
  }
};

// Glorot-uniform weights, zero biases.
template <typename Scalar = float>
RestNetwork<Scalar> init_network(int dim, const std::vector<int>& hidden, std::uint64_t seed) {
  if (dim < 1) throw ValidationError("init_network: dimension must be >= 1");
  RestNetwork<Scalar> net;
  net.widths.push_back(dim);
  for (int h : hidden) {
    if (h < 1) throw ValidationError("init_network: hidden widths must be >= 1");
    net.widths.push_back(h);
  }
  net.widths.push_back(dim);
  Rng rng(derive_seed(seed, "rest-init"));
  for (std::size_t l = 0; l + 1 < net.widths.size(); ++l) {
    const int fan_in = net.widths[l], fan_out = net.widths[l + 1];
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    typename RestNetwork<Scalar>::Matrix w(fan_out, fan_in);
    for (Eigen::Index c = 0; c < w.cols(); ++c)
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = static_cast<Scalar>(rng.uniform(-limit, limit));
    net.weights.push_back(std::move(w));
    net.biases.push_back(RestNetwork<Scalar>::Vector::Zero(fan_out));
  }
  return net;
}

// Mean squared difference over components (and over columns for batches).
template <typename Derived1, typename Derived2>
double loss(const Eigen::MatrixBase<Derived1>& pred, const Eigen::MatrixBase<Derived2>& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw DimensionMismatch("loss: prediction and target shapes differ");
  }
  if (pred.size() == 0) return 0.0;
  return static_cast<double>((pred - target).template cast<double>().squaredNorm()) /
         static_cast<double>(pred.size());
}

template <typename Scalar>
struct RestGradients {
  std::vector<typename RestNetwork<Scalar>::Matrix> dW;
  std::vector<typename RestNetwork<Scalar>::Vector> db;
};

// Batch MSE and its gradient with respect to every parameter.
template <typename Scalar>
double loss_and_gradients(const RestNetwork<Scalar>& net, const typename RestNetwork<Scalar>::Matrix& X,
                          const typename RestNetwork<Scalar>::Matrix& Y, RestGradients<Scalar>& grads) {
  using Matrix = typename RestNetwork<Scalar>::Matrix;
  const std::size_t L = net.weights.size();
  std::vector<Matrix> acts(L + 1);
  acts[0] = X;
  for (std::size_t l = 0; l < L; ++l) {
    Matrix z = net.weights[l] * acts[l];
    z.colwise() += net.biases[l];
    if (l + 1 < L) z = z.cwiseMax(Scalar(0));
    acts[l + 1] = std::move(z);
  }
  const double value = loss(acts[L], Y);
  grads.dW.resize(L);
  grads.db.resize(L);
  Matrix delta = (acts[L] - Y) * static_cast<Scalar>(2.0 / static_cast<double>(Y.size()));
  for (std::size_t l = L; l-- > 0;) {
    grads.dW[l].noalias() = delta * acts[l].transpose();
    grads.db[l] = delta.rowwise().sum();
    if (l > 0) {
      Matrix back = net.weights[l].transpose() * delta;
      // Rectifier derivative; the post-activation is zero exactly where the
      // pre-activation was non-positive.
      delta = back.cwiseProduct((acts[l].array() > Scalar(0)).template cast<Scalar>().matrix());
    }
  }
  return value;
}

enum class Optimizer { SGD, Adam };

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 128;
  int epochs_pretrain = 50;
  int epochs_main = 200;
  std::uint64_t seed = 0;
  Optimizer optimizer = Optimizer::Adam;
  int patience = 20;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ValidationError("train config: learning_rate must be positive");
    if (batch_size < 1) throw ValidationError("train config: batch_size must be >= 1");
    if (epochs_pretrain < 0 || epochs_main < 0) throw ValidationError("train config: negative epochs");
    if (patience < 1) throw ValidationError("train config: patience must be >= 1");
  }
};

struct TrainHistory {
  std::vector<double> pretrain_loss;  // per epoch
  std::vector<double> main_loss;
};

namespace detail {

template <typename Scalar>
class OptimizerState {
 public:
  using Matrix = typename RestNetwork<Scalar>::Matrix;
  using Vector = typename RestNetwork<Scalar>::Vector;

  OptimizerState(const RestNetwork<Scalar>& net, const TrainConfig& cfg) : cfg_(cfg) {
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
      mW_.push_back(Matrix::Zero(net.weights[l].rows(), net.weights[l].cols()));
      vW_.push_back(mW_.back());
      mb_.push_back(Vector::Zero(net.biases[l].size()));
      vb_.push_back(mb_.back());
    }
  }

  void step(RestNetwork<Scalar>& net, const RestGradients<Scalar>& g) {
    const Scalar lr = static_cast<Scalar>(cfg_.learning_rate);
    if (cfg_.optimizer == Optimizer::SGD) {
      for (std::size_t l = 0; l < net.weights.size(); ++l) {
        net.weights[l] -= lr * g.dW[l];
        net.biases[l] -= lr * g.db[l];
      }
      return;
    }
    ++t_;
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const Scalar c1 = static_cast<Scalar>(1.0 / (1.0 - std::pow(b1, t_)));
    const Scalar c2 = static_cast<Scalar>(1.0 / (1.0 - std::pow(b2, t_)));
    auto update = [&](auto& param, auto& m, auto& v, const auto& grad) {
      m = Scalar(b1) * m + Scalar(1 - b1) * grad;
      v = Scalar(b2) * v + Scalar(1 - b2) * grad.cwiseAbs2();
      param.array() -= lr * (m.array() * c1) / ((v.array() * c2).sqrt() + Scalar(eps));
    };
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
      update(net.weights[l], mW_[l], vW_[l], g.dW[l]);
      update(net.biases[l], mb_[l], vb_[l], g.db[l]);
    }
  }

 private:
  TrainConfig cfg_;
  long t_ = 0;
  std::vector<Matrix> mW_, vW_;
  std::vector<Vector> mb_, vb_;
};

// Mini-batch training on (X, Y) column pairs. Keeps the parameters of the
// best epoch and stops after `patience` epochs without improvement.
template <typename Scalar>
std::vector<double> run_stage(RestNetwork<Scalar>& net, const typename RestNetwork<Scalar>::Matrix& X,
                              const typename RestNetwork<Scalar>::Matrix& Y, int epochs,
                              const TrainConfig& cfg, std::uint64_t seed) {
  using Matrix = typename RestNetwork<Scalar>::Matrix;
  std::vector<double> history;
  if (epochs == 0) return history;
  const std::size_t n = static_cast<std::size_t>(X.cols());
  OptimizerState<Scalar> opt(net, cfg);
  Rng rng(seed);
  std::vector<Eigen::Index> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<Eigen::Index>(i);
  RestGradients<Scalar> grads;
  RestNetwork<Scalar> best = net;
  double best_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;
  Matrix xb, yb;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, n - start);
      xb.resize(X.rows(), static_cast<Eigen::Index>(len));
      yb.resize(Y.rows(), static_cast<Eigen::Index>(len));
      for (std::size_t i = 0; i < len; ++i) {
        xb.col(static_cast<Eigen::Index>(i)) = X.col(order[start + i]);
        yb.col(static_cast<Eigen::Index>(i)) = Y.col(order[start + i]);
      }
      total += loss_and_gradients(net, xb, yb, grads) * static_cast<double>(len);
      opt.step(net, grads);
    }
    const double epoch_loss = total / static_cast<double>(n);
    history.push_back(epoch_loss);
    if (epoch_loss < best_loss) {
      best_loss = epoch_loss;
      best = net;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  net = std::move(best);
  return history;
}

}  // namespace detail

// Stage 1 fits synthetic -> itself (columns of `pretrain`), stage 2 continues
// from those weights on real -> synthetic pairs (columns of inputs/targets).
template <typename Scalar>
TrainHistory train(RestNetwork<Scalar>& net, const typename RestNetwork<Scalar>::Matrix& pretrain,
                   const typename RestNetwork<Scalar>::Matrix& inputs,
                   const typename RestNetwork<Scalar>::Matrix& targets, const TrainConfig& cfg) {
  cfg.validate();
  net.validate();
  if (inputs.cols() == 0) throw EmptyTrainingSet("rest training: no training pairs");
  if (inputs.cols() != targets.cols()) throw DimensionMismatch("rest training: input/target count differs");
  if (inputs.rows() != net.dim() || targets.rows() != net.dim() ||
      (pretrain.cols() > 0 && pretrain.rows() != net.dim())) {
    throw DimensionMismatch("rest training: descriptor dim differs from network dim");
  }
  TrainHistory h;
  if (pretrain.cols() > 0) {
    h.pretrain_loss = detail::run_stage(net, pretrain, pretrain, cfg.epochs_pretrain, cfg,
                                        derive_seed(cfg.seed, "rest-pretrain-shuffle"));
  }
  h.main_loss = detail::run_stage(net, inputs, targets, cfg.epochs_main, cfg,
                                  derive_seed(cfg.seed, "rest-main-shuffle"));
  return h;
}

// ---------------------------------------------------------------------------
// Model file: "REST" | u32 version | u32 layer count | per layer: u32 rows,
// u32 cols, f32 weights row-major, f32 biases. Little-endian.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kRestModelVersion = 1;

template <typename Scalar>
void write_rest_model(std::ostream& os, const RestNetwork<Scalar>& net) {
  net.validate();
  io::write_magic(os, "REST");
  io::write_le<std::uint32_t>(os, kRestModelVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(net.weights.size()));
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    const auto& w = net.weights[l];
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(w.rows()));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(w.cols()));
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) io::write_le<float>(os, static_cast<float>(w(r, c)));
    for (Eigen::Index r = 0; r < w.rows(); ++r) io::write_le<float>(os, static_cast<float>(net.biases[l][r]));
  }
}

template <typename Scalar = float>
RestNetwork<Scalar> read_rest_model(std::istream& is) {
  io::expect_magic(is, "REST");
  const auto version = io::read_le<std::uint32_t>(is, "version");
  if (version != kRestModelVersion) throw ValidationError("rest model: unsupported version");
  const auto layers = io::read_le<std::uint32_t>(is, "layer count");
  if (layers == 0) throw ValidationError("rest model: zero layers");
  RestNetwork<Scalar> net;
  for (std::uint32_t l = 0; l < layers; ++l) {
    const auto rows = io::read_le<std::uint32_t>(is, "rows");
    const auto cols = io::read_le<std::uint32_t>(is, "cols");
    if (l == 0) net.widths.push_back(static_cast<int>(cols));
    net.widths.push_back(static_cast<int>(rows));
    typename RestNetwork<Scalar>::Matrix w(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r)
      for (std::uint32_t c = 0; c < cols; ++c) w(r, c) = static_cast<Scalar>(io::read_le<float>(is, "weights"));
    typename RestNetwork<Scalar>::Vector b(rows);
    for (std::uint32_t r = 0; r < rows; ++r) b[r] = static_cast<Scalar>(io::read_le<float>(is, "biases"));
    net.weights.push_back(std::move(w));
    net.biases.push_back(std::move(b));
  }
  net.validate();
  return net;
}

template <typename Scalar>
void save_rest_model(const std::filesystem::path& path, const RestNetwork<Scalar>& net) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure("cannot write " + path.string());
  write_rest_model(os, net);
}

template <typename Scalar = float>
RestNetwork<Scalar> load_rest_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeFailure("missing REST model " + path.string());
  return read_rest_model<Scalar>(is);
}

}  // namespace illumloc
