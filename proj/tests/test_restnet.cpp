#include <gtest/gtest.h>

#include <sstream>

#include "illumloc/restnet.hpp"

using namespace illumloc;

namespace {

using Net = RestNetwork<double>;

Net::Matrix random_matrix(Rng& rng, int rows, int cols) {
  Net::Matrix m(rows, cols);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

}  // namespace

TEST(RestNet, InitShapes) {
  const auto net = init_network<float>(128, kDefaultRestHidden, 1);
  EXPECT_EQ(net.widths, (std::vector<int>{128, 512, 256, 128, 256, 512, 128}));
  EXPECT_EQ(net.layer_count(), 6u);
  EXPECT_NO_THROW(net.validate());
  EXPECT_EQ(net, init_network<float>(128, kDefaultRestHidden, 1));
  EXPECT_FALSE(net == init_network<float>(128, kDefaultRestHidden, 2));
}

TEST(RestNet, AnalyticGradientsMatchFiniteDifferences) {
  Rng rng(31);
  Net net = init_network<double>(6, {8, 5, 8}, 4);
  for (auto& b : net.biases)
    for (int i = 0; i < b.size(); ++i) b[i] = 0.1 * rng.normal();
  const Net::Matrix X = random_matrix(rng, 6, 7), Y = random_matrix(rng, 6, 7);
  RestGradients<double> g;
  loss_and_gradients(net, X, Y, g);

  const double h = 1e-6;
  int probes = 0;
  while (probes < 100) {
    const std::size_t l = rng.index(net.layer_count());
    const bool bias = rng.uniform() < 0.3;
    Net plus = net, minus = net;
    double analytic;
    if (bias) {
      const auto i = static_cast<Eigen::Index>(rng.index(net.biases[l].size()));
      plus.biases[l][i] += h;
      minus.biases[l][i] -= h;
      analytic = g.db[l][i];
    } else {
      const auto r = static_cast<Eigen::Index>(rng.index(net.weights[l].rows()));
      const auto c = static_cast<Eigen::Index>(rng.index(net.weights[l].cols()));
      plus.weights[l](r, c) += h;
      minus.weights[l](r, c) -= h;
      analytic = g.dW[l](r, c);
    }
    const double numeric = (loss(plus.forward_batch(X), Y) - loss(minus.forward_batch(X), Y)) / (2 * h);
    const double scale = std::max(std::abs(numeric) + std::abs(analytic), 1e-8);
    // Skip probes whose analytic value is exactly zero through a dead unit:
    // both sides agree there by construction.
    if (analytic == 0.0 && std::abs(numeric) < 1e-10) continue;
    EXPECT_LT(std::abs(numeric - analytic) / scale, 1e-4) << "probe " << probes;
    ++probes;
  }
}

TEST(RestNet, OverfitsOnePair) {
  Rng rng(32);
  Net net = init_network<double>(6, {16, 16}, 5);
  const Net::Matrix X = random_matrix(rng, 6, 1), Y = random_matrix(rng, 6, 1);
  TrainConfig cfg;
  cfg.epochs_pretrain = 0;
  cfg.epochs_main = 2000;
  cfg.batch_size = 1;
  cfg.patience = 2000;
  const auto h = train(net, Net::Matrix(6, 0), X, Y, cfg);
  EXPECT_LE(h.main_loss.size(), 2000u);
  EXPECT_LT(loss(net.forward_batch(X), Y), 1e-4);
}

TEST(RestNet, PretrainingLearnsIdentity) {
  Rng rng(33);
  RestNetwork<float> net = init_network<float>(8, {32}, 6);
  const RestNetwork<float>::Matrix S = random_matrix(rng, 8, 200).cast<float>();
  const double before = loss(net.forward_batch(S), S);
  TrainConfig cfg;
  cfg.epochs_pretrain = 100;
  cfg.epochs_main = 1;
  cfg.batch_size = 16;
  cfg.learning_rate = 3e-3;
  const auto h = train(net, S, S.leftCols(4), S.leftCols(4), cfg);
  EXPECT_FALSE(h.pretrain_loss.empty());
  EXPECT_LT(h.pretrain_loss.back(), 0.1 * h.pretrain_loss.front());
  EXPECT_LT(loss(net.forward_batch(S), S), 0.1 * before);
}

TEST(RestNet, TrainingIsDeterministic) {
  Rng rng(34);
  const RestNetwork<float>::Matrix X = random_matrix(rng, 6, 50).cast<float>();
  const RestNetwork<float>::Matrix Y = random_matrix(rng, 6, 50).cast<float>();
  TrainConfig cfg;
  cfg.epochs_pretrain = 3;
  cfg.epochs_main = 5;
  cfg.batch_size = 8;
  cfg.seed = 9;
  auto a = init_network<float>(6, {10}, 1), b = init_network<float>(6, {10}, 1);
  train(a, X, X, Y, cfg);
  train(b, X, X, Y, cfg);
  EXPECT_EQ(a, b);
}

TEST(RestNet, SgdAlsoDescends) {
  Rng rng(35);
  Net net = init_network<double>(4, {8}, 7);
  const Net::Matrix X = random_matrix(rng, 4, 64), Y = 0.5 * X;
  TrainConfig cfg;
  cfg.optimizer = Optimizer::SGD;
  cfg.learning_rate = 0.05;
  cfg.epochs_pretrain = 0;
  cfg.epochs_main = 50;
  cfg.batch_size = 8;
  const auto h = train(net, Net::Matrix(4, 0), X, Y, cfg);
  EXPECT_LT(h.main_loss.back(), 0.5 * h.main_loss.front());
}

TEST(RestNet, Errors) {
  auto net = init_network<float>(4, {8}, 1);
  TrainConfig cfg;
  EXPECT_THROW(train(net, RestNetwork<float>::Matrix(4, 0), RestNetwork<float>::Matrix(4, 0),
                     RestNetwork<float>::Matrix(4, 0), cfg),
               EmptyTrainingSet);
  EXPECT_THROW(net.forward_batch(RestNetwork<float>::Matrix::Zero(5, 2)), DimensionMismatch);
  EXPECT_THROW(init_network<float>(0, {}, 1), ValidationError);
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(RestNet, ForwardCallCounter) {
  const auto net = init_network<float>(4, {8}, 1);
  const auto before = rest_forward_calls().load();
  net.forward_batch(RestNetwork<float>::Matrix::Zero(4, 3));
  net.forward(RestNetwork<float>::Vector::Zero(4));
  EXPECT_EQ(rest_forward_calls().load(), before + 2);
}

TEST(RestNet, ModelRoundTripIsExact) {
  Rng rng(36);
  auto net = init_network<float>(16, {32, 8, 32}, 3);
  for (auto& b : net.biases)
    for (int i = 0; i < b.size(); ++i) b[i] = static_cast<float>(rng.normal());
  std::stringstream ss;
  write_rest_model(ss, net);
  const auto back = read_rest_model<float>(ss);
  EXPECT_EQ(back, net);
  std::stringstream bad("XXXX");
  EXPECT_THROW(read_rest_model<float>(bad), std::exception);
}
