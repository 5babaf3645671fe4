// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "actc/executor.hpp"
#include "test_util.hpp"

namespace actc {
namespace {

using testing::finite_difference;
using testing::MeanAccumulator;
using testing::random_tensor;

std::unique_ptr<GraphExecutor> scalar_net(float w) {
  std::vector<std::unique_ptr<Layer>> layers;
  auto l = std::make_unique<Linear>(1, 1, false);
  l->weight()[0] = w;
  layers.push_back(std::move(l));
  return std::make_unique<GraphExecutor>(std::move(layers));
}

std::unique_ptr<GraphExecutor> small_net(uint64_t seed) {
  std::vector<std::unique_ptr<Layer>> layers;
  auto a = std::make_unique<Linear>(6, 5);
  a->weight() = random_tensor({6, 5}, seed);
  a->params()[1] = random_tensor({5}, seed + 1);
  auto b = std::make_unique<Linear>(5, 3);
  b->weight() = random_tensor({5, 3}, seed + 2);
  layers.push_back(std::move(a));
  layers.push_back(std::make_unique<ReLU>());
  layers.push_back(std::move(b));
  return std::make_unique<GraphExecutor>(std::move(layers));
}

std::unique_ptr<GraphExecutor> conv_net(uint64_t seed) {
  std::vector<std::unique_ptr<Layer>> layers;
  auto c = std::make_unique<Conv2d>(Conv2dGeometry{2, 3, 3, 3, 1, 1, 1});
  c->weight() = random_tensor(c->weight().shape(), seed);
  layers.push_back(std::move(c));
  layers.push_back(std::make_unique<BatchNorm>(3));
  layers.push_back(std::make_unique<ReLU>());
  layers.push_back(std::make_unique<MaxPool2d>(PoolGeometry{2, 2, 2}));
  auto l = std::make_unique<Linear>(3 * 2 * 2, 2);
  l->weight() = random_tensor({12, 2}, seed + 1);
  layers.push_back(std::move(l));
  return std::make_unique<GraphExecutor>(std::move(layers));
}

TEST(Executor, ScalarForward) {
  auto net = scalar_net(3.0f);
  EXPECT_EQ(net->forward(Tensor::from({1, 1}, {2})), Tensor::from({1, 1}, {6}));
}

TEST(Executor, IdentityWeightsPassThrough) {
  std::vector<std::unique_ptr<Layer>> layers;
  auto l = std::make_unique<Linear>(3, 3, false);
  for (size_t i = 0; i < 3; ++i) l->weight()[i * 3 + i] = 1.0f;
  layers.push_back(std::move(l));
  GraphExecutor net(std::move(layers));
  const Tensor x = random_tensor({4, 3}, 1);
  EXPECT_EQ(net.forward(x), x);
}

TEST(Executor, ScalarBackward) {
  auto net = scalar_net(3.0f);
  net->forward(Tensor::from({1, 1}, {2}));
  const ParamGrads g = net->backward(Tensor::from({1, 1}, {1}));
  EXPECT_EQ(g[0][0], Tensor::from({1, 1}, {2}));
  EXPECT_EQ(net->input_grad(), Tensor::from({1, 1}, {3}));
}

TEST(Executor, CompressedScalarGradientIsUnbiased) {
  auto net = scalar_net(3.0f);
  net->set_mode(ContextMode::kCompressed);
  net->set_uniform_bits(2);
  MeanAccumulator acc(1);
  for (uint32_t s = 0; s < 100000; ++s) {
    net->set_step(s);
    net->forward(Tensor::from({1, 1}, {2}));
    acc.add(net->backward(Tensor::from({1, 1}, {1}))[0][0].data());
  }
  EXPECT_NEAR(acc.mean(0), 2.0, 3.0 * acc.std_error(0) + 1e-9);
}

TEST(Executor, ZeroOutputGradientGivesZeroGradients) {
  auto net = conv_net(3);
  net->set_mode(ContextMode::kCompressed);
  const Tensor x = random_tensor({2, 2, 4, 4}, 4);
  const Tensor y = net->forward(x);
  for (const auto& layer : net->backward(Tensor(y.shape()))) {
    for (const auto& g : layer) {
      for (float v : g.data()) EXPECT_EQ(v, 0.0f);
    }
  }
}

TEST(Executor, ForwardIsModeIndependent) {
  for (uint64_t seed : {5u, 6u, 7u}) {
    auto net = conv_net(seed);
    const Tensor x = random_tensor({3, 2, 4, 4}, seed + 10);
    const Tensor fp = net->forward(x);
    net->set_mode(ContextMode::kCompressed);
    net->set_uniform_bits(1);
    EXPECT_EQ(net->forward(x), fp);
  }
}

TEST(Executor, GradientShapesMatchParameters) {
  auto net = conv_net(8);
  net->set_mode(ContextMode::kCompressed);
  const Tensor y = net->forward(random_tensor({2, 2, 4, 4}, 9));
  for (size_t l = 0; l < net->size(); ++l) EXPECT_TRUE(net->layer(l).has_context());
  const ParamGrads g = net->backward(random_tensor(y.shape(), 10));
  ASSERT_EQ(g.size(), net->size());
  for (size_t l = 0; l < net->size(); ++l) {
    ASSERT_EQ(g[l].size(), net->layer(l).params().size());
    for (size_t p = 0; p < g[l].size(); ++p) {
      EXPECT_EQ(g[l][p].shape(), net->layer(l).params()[p].shape());
    }
  }
}

TEST(Executor, BackwardBeforeForwardThrows) {
  auto net = small_net(1);
  EXPECT_THROW(net->backward(Tensor({1, 3})), std::logic_error);
  const Tensor y = net->forward(random_tensor({2, 6}, 2));
  net->backward(Tensor(y.shape()));
  EXPECT_THROW(net->backward(Tensor(y.shape())), std::logic_error);
}

TEST(Executor, OutputGradientShapeChecked) {
  auto net = small_net(1);
  net->forward(random_tensor({2, 6}, 2));
  EXPECT_THROW(net->backward(Tensor({2, 4})), std::invalid_argument);
}

TEST(Executor, ShapeErrorNamesLayer) {
  std::vector<std::unique_ptr<Layer>> layers;
  layers.push_back(std::make_unique<Linear>(4, 3));
  layers.push_back(std::make_unique<Linear>(5, 2));
  GraphExecutor net(std::move(layers));
  try {
    net.forward(Tensor({2, 4}));
    FAIL() << "expected a shape error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos) << e.what();
  }
}

TEST(Executor, FiniteDifferences) {
  auto net = conv_net(11);
  Tensor x = random_tensor({3, 2, 4, 4}, 12);
  const Tensor y = net->forward(x);
  const Tensor c = random_tensor(y.shape(), 13);
  const ParamGrads g = net->backward(c);
  auto loss = [&] {
    const Tensor out = net->forward(x);
    net->release_contexts();
    double s = 0.0;
    for (size_t i = 0; i < out.numel(); ++i) s += double(out[i]) * c[i];
    return s;
  };
  auto check = [](const std::vector<double>& fd, std::span<const float> a) {
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < fd.size(); ++i) {
      num += (fd[i] - a[i]) * (fd[i] - a[i]);
      den += double(a[i]) * a[i];
    }
    EXPECT_LE(std::sqrt(num), 2e-3 * std::sqrt(den) + 1e-4);
  };
  const Tensor gx = net->input_grad();
  check(finite_difference(x, loss), gx.data());
  for (size_t l = 0; l < net->size(); ++l) {
    for (size_t p = 0; p < g[l].size(); ++p) {
      check(finite_difference(net->layer(l).params()[p], loss), g[l][p].data());
    }
  }
}

TEST(Executor, CompressMaskLimitsCompression) {
  auto net = small_net(14);
  net->set_mode(ContextMode::kCompressed);
  net->compress_only(2);
  net->forward(random_tensor({4, 6}, 15));
  const auto bits = net->context_bits();
  EXPECT_GT(bits[0].full_precision, 0u);
  EXPECT_EQ(bits[0].payload, 0u);
  EXPECT_TRUE(bits[1].aliases_output);
  EXPECT_GT(bits[2].payload, 0u);
  EXPECT_THROW(net->set_compress_mask({true}), std::invalid_argument);
}

TEST(Executor, ThreadCountDoesNotChangeGradients) {
  auto run = [](unsigned threads) {
    auto net = conv_net(16);
    net->set_mode(ContextMode::kCompressed);
    net->set_uniform_bits(2);
    net->set_group_size(8);
    net->set_threads(threads);
    net->set_seed(99);
    const Tensor y = net->forward(random_tensor({4, 2, 4, 4}, 17));
    return net->backward(random_tensor(y.shape(), 18));
  };
  const ParamGrads a = run(1), b = run(4);
  for (size_t l = 0; l < a.size(); ++l) {
    for (size_t p = 0; p < a[l].size(); ++p) EXPECT_EQ(a[l][p], b[l][p]);
  }
}

// A batch normalization context perturbs its own weight gradient and, through
// the input gradient, the convolution upstream. The recorded factors predict
// the total: sum_n (G/6) ||R_n||^2 k_n / B^2.
TEST(Executor, BatchNormFactorPredictsParameterGradientVariance) {
  std::vector<std::unique_ptr<Layer>> layers;
  auto c = std::make_unique<Conv2d>(Conv2dGeometry{2, 4, 3, 3, 1, 1, 1});
  c->weight() = random_tensor(c->weight().shape(), 211);
  layers.push_back(std::move(c));
  auto bn = std::make_unique<BatchNorm>(4);
  bn->params()[0] = random_tensor({4}, 212, 0.5, 1.5);
  layers.push_back(std::move(bn));
  GraphExecutor net(std::move(layers));
  net.set_mode(ContextMode::kCompressed);
  net.compress_only(1);
  net.set_bn_mode(BatchNormMode::kDualCopy);
  net.set_uniform_bits(3);
  const Tensor x = random_tensor({8, 2, 8, 8}, 213);
  const Tensor g = random_tensor({8, 4, 8, 8}, 214);

  std::vector<MeanAccumulator> acc;
  const int draws = 3000;
  for (int s = 0; s < draws; ++s) {
    net.set_step(uint32_t(s));
    net.forward(x);
    const ParamGrads grads = net.backward(g);
    if (acc.empty()) {
      for (const auto& lg : grads) {
        for (const auto& t : lg) acc.emplace_back(t.numel());
      }
    }
    size_t a = 0;
    for (const auto& lg : grads) {
      for (const auto& t : lg) acc[a++].add(t.data());
    }
  }
  double measured = 0.0;
  for (const auto& m : acc) {
    for (size_t i = 0; i < m.size(); ++i) measured += m.variance(i);
  }
  net.forward(x);
  net.backward(g);
  const Layer& b = net.layer(1);
  double predicted = 0.0;
  for (size_t n = 0; n < 8; ++n) {
    predicted += 256.0 / 6.0 * b.range_sq()[n] * b.observed_grad_sq()[n] / (7.0 * 7.0);
  }
  EXPECT_NEAR(measured / predicted, 1.0, 0.3);
}

TEST(Sgd, Examples) {
  auto net = scalar_net(1.0f);
  sgd_step(*net, {{Tensor::from({1, 1}, {0.5})}}, 0.1f);
  EXPECT_FLOAT_EQ(net->layer(0).params()[0][0], 0.95f);
  sgd_step(*net, {{Tensor::from({1, 1}, {0.0})}}, 0.1f);
  EXPECT_FLOAT_EQ(net->layer(0).params()[0][0], 0.95f);
  sgd_step(*net, {{Tensor::from({1, 1}, {3.0})}}, 0.0f);
  EXPECT_FLOAT_EQ(net->layer(0).params()[0][0], 0.95f);
}

TEST(Sgd, ShapeMismatchThrows) {
  auto net = scalar_net(1.0f);
  EXPECT_THROW(sgd_step(*net, {{Tensor({2, 1})}}, 0.1f), std::invalid_argument);
  EXPECT_THROW(sgd_step(*net, {}, 0.1f), std::invalid_argument);
}

}  // namespace
}  // namespace actc
