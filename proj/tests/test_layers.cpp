// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "actc/allocator.hpp"
#include "actc/layers.hpp"
#include "test_util.hpp"

namespace actc {
namespace {

using testing::finite_difference;
using testing::MeanAccumulator;
using testing::random_tensor;

BitChooser uniform_chooser(uint8_t bits) {
  return [bits](const CompressionRequest& r) { return std::vector<uint8_t>(r.range_sq.size(), bits); };
}

struct Options {
  BitChooser chooser = uniform_chooser(2);
  ForwardOptions opt;

  explicit Options(bool compress, uint32_t group = 256, uint32_t step = 0,
                   BatchNormMode mode = BatchNormMode::kSingleCopy) {
    opt.compress = compress;
    opt.group_size = group;
    opt.key = QuantKey{1234, step, 0, 0};
    opt.bn_mode = mode;
    opt.choose_bits = &chooser;
  }
  Options& bits(uint8_t b) {
    chooser = uniform_chooser(b);
    opt.choose_bits = &chooser;
    return *this;
  }
};

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) s += double(a[i]) * b[i];
  return s;
}

double rel_error(const std::vector<double>& fd, std::span<const float> g) {
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < fd.size(); ++i) {
    num += (fd[i] - g[i]) * (fd[i] - g[i]);
    den += double(g[i]) * g[i];
  }
  return std::sqrt(num / std::max(den, 1e-24));
}

// Compares analytic input and parameter gradients of L = <c, layer(x)> with
// central differences (perturbation 1e-3).
void check_gradients(Layer& layer, Tensor x, uint64_t seed) {
  Options fp(false);
  const Tensor y = layer.forward(x, fp.opt);
  const Tensor c = random_tensor(y.shape(), seed);
  const Tensor gx = layer.backward(c);
  const std::vector<Tensor> gp = layer.grads();
  auto loss = [&] {
    const double v = dot(layer.forward(x, fp.opt), c);
    layer.release_context();
    return v;
  };
  EXPECT_LT(rel_error(finite_difference(x, loss), gx.data()), 1e-3) << layer.describe() << " input";
  for (size_t p = 0; p < gp.size(); ++p) {
    EXPECT_LT(rel_error(finite_difference(layer.params()[p], loss), gp[p].data()), 1e-3)
        << layer.describe() << " parameter " << p;
  }
}

struct MonteCarlo {
  MeanAccumulator input;
  std::vector<MeanAccumulator> params;
};

MonteCarlo average_gradients(Layer& layer, const Tensor& x, const Tensor& g, Options o,
                             int draws) {
  MonteCarlo mc{MeanAccumulator(x.numel()), {}};
  for (const auto& p : layer.params()) mc.params.emplace_back(p.numel());
  for (int s = 0; s < draws; ++s) {
    o.opt.key.step = uint32_t(s);
    layer.forward(x, o.opt);
    const Tensor gx = layer.backward(g);
    mc.input.add(gx.data());
    for (size_t p = 0; p < mc.params.size(); ++p) mc.params[p].add(layer.grads()[p].data());
  }
  return mc;
}

void expect_within_4se(const MeanAccumulator& acc, std::span<const float> exact,
                       const std::string& what) {
  for (size_t i = 0; i < acc.size(); ++i) {
    EXPECT_NEAR(acc.mean(i), exact[i], 4.0 * acc.std_error(i) + 1e-5) << what << " element " << i;
  }
}

// Full-precision gradients for the same input and output gradient.
std::pair<Tensor, std::vector<Tensor>> exact_gradients(Layer& layer, const Tensor& x,
                                                       const Tensor& g) {
  Options fp(false);
  layer.forward(x, fp.opt);
  Tensor gx = layer.backward(g);
  return {gx, layer.grads()};
}

void expect_unbiased(Layer& layer, const Tensor& x, uint64_t seed, Options o, int draws) {
  Options fp(false);
  const Tensor g = random_tensor(layer.forward(x, fp.opt).shape(), seed);
  layer.release_context();
  const auto [gx, gp] = exact_gradients(layer, x, g);
  const MonteCarlo mc = average_gradients(layer, x, g, o, draws);
  expect_within_4se(mc.input, gx.data(), layer.describe() + " input");
  for (size_t p = 0; p < gp.size(); ++p) {
    expect_within_4se(mc.params[p], gp[p].data(), layer.describe() + " param");
  }
}

// --- Linear -----------------------------------------------------------------

TEST(Linear, ScalarExample) {
  Linear l(1, 1, false);
  l.weight()[0] = 3.0f;
  Options fp(false);
  EXPECT_EQ(l.forward(Tensor::from({1, 1}, {2}), fp.opt), Tensor::from({1, 1}, {6}));
  const Tensor gx = l.backward(Tensor::from({1, 1}, {1}));
  EXPECT_EQ(gx, Tensor::from({1, 1}, {3}));
  EXPECT_EQ(l.grads()[0], Tensor::from({1, 1}, {2}));
}

TEST(Linear, ScalarCompressedMeanIsExact) {
  Linear l(1, 1, false);
  l.weight()[0] = 3.0f;
  Options o(true);
  MeanAccumulator acc(1);
  for (uint32_t s = 0; s < 100000; ++s) {
    o.opt.key.step = s;
    l.forward(Tensor::from({1, 1}, {2}), o.opt);
    l.backward(Tensor::from({1, 1}, {1}));
    acc.add(l.grads()[0].data());
  }
  EXPECT_NEAR(acc.mean(0), 2.0, 3.0 * acc.std_error(0) + 1e-9);
}

TEST(Linear, FiniteDifferences) {
  Linear l(6, 4);
  l.weight() = random_tensor({6, 4}, 2);
  l.params()[1] = random_tensor({4}, 3);
  check_gradients(l, random_tensor({5, 6}, 4), 5);
}

TEST(Linear, CompressedIsUnbiased) {
  Linear l(12, 3);
  l.weight() = random_tensor({12, 3}, 6);
  expect_unbiased(l, random_tensor({4, 12}, 7, -2, 2), 8, Options(true, 5).bits(2), 3000);
}

TEST(Linear, ShapeMismatchThrows) {
  Linear l(3, 2);
  Options fp(false);
  EXPECT_THROW(l.forward(Tensor({2, 4}), fp.opt), std::invalid_argument);
  EXPECT_THROW(l.backward(Tensor({2, 2})), std::logic_error);
  l.forward(Tensor({2, 3}, 1.0f), fp.opt);
  EXPECT_THROW(l.backward(Tensor({2, 3})), std::invalid_argument);
}

// Empirical Var[grad W] against (G/6) sum_n ||g_n||^2 ||R_n||^2 / B_n^2 with
// the stored (bfloat16) ranges.
double closed_form_ratio(uint8_t bits, int draws) {
  const size_t n = 8, d = 256, out = 3;
  Linear l(d, out, false);
  l.weight() = random_tensor({d, out}, 10);
  const Tensor x = random_tensor({n, d}, 11, 0.0, 1.0);
  const Tensor g = random_tensor({n, out}, 12);
  Options o(true);
  o.bits(bits);
  MeanAccumulator acc(d * out);
  std::vector<std::vector<float>> samples;
  double predicted = 0.0;
  for (int s = 0; s < draws; ++s) {
    o.opt.key.step = uint32_t(s);
    l.forward(x, o.opt);
    if (s == 0) {
      const auto bits_vec = std::vector<uint8_t>(n, bits);
      const auto p = quantize_tensor(x, bits_vec, 256, o.opt.key);
      const auto gsq = per_sample_sq_norm(g);
      const double b = bins_for_bits(bits);
      for (size_t k = 0; k < n; ++k) {
        const double r = p.meta[k].range();
        predicted += 256.0 / 6.0 * gsq[k] * r * r / (b * b);
      }
    }
    l.backward(g);
    acc.add(l.grads()[0].data());
    samples.emplace_back(l.grads()[0].data().begin(), l.grads()[0].data().end());
  }
  double var = 0.0;
  for (const auto& smp : samples) {
    for (size_t i = 0; i < smp.size(); ++i) var += (smp[i] - acc.mean(i)) * (smp[i] - acc.mean(i));
  }
  var /= double(draws - 1);
  return var / predicted;
}

TEST(Linear, VarianceMatchesClosedForm) {
  for (uint8_t b : {1, 2, 4}) EXPECT_NEAR(closed_form_ratio(b, 3000), 1.0, 0.1) << int(b) << " bits";
}

TEST(Linear, ContextBits) {
  Linear l(300, 2);
  Options o(true, 256);
  o.bits(3);
  l.forward(random_tensor({4, 300}, 1), o.opt);
  const ContextBits b = l.context_bits();
  EXPECT_EQ(b.payload, 4u * 300 * 3);
  EXPECT_EQ(b.metadata, 4u * 2 * 32);
  EXPECT_EQ(b.full_precision, 0u);
  EXPECT_EQ(b.serialized_bytes, 17u + 4 + 4 * 2 * 4 + (3600 + 7) / 8);
}

TEST(Sensitivity, LinearFormula) {
  const std::vector<double> r = {9}, g = {1}, z = {0}, r2 = {18};
  EXPECT_DOUBLE_EQ(linear_sensitivity(2, r, g, 4).weight[0], 3.0);
  EXPECT_DOUBLE_EQ(linear_sensitivity(2, r, z, 4).weight[0], 0.0);
  EXPECT_DOUBLE_EQ(linear_sensitivity(2, r2, g, 4).weight[0], 6.0);
}

TEST(Sensitivity, ConvFormula) {
  const std::vector<double> r = {4}, g = {1};
  EXPECT_DOUBLE_EQ(conv2d_sensitivity(256, 9, 64, 1, r, g, 64).weight[0], 24.0);
  const std::vector<double> r3 = {9, 1, 4}, g3 = {1, 2, 3};
  EXPECT_EQ(conv2d_sensitivity(2, 1, 1, 1, r3, g3, 4).weight,
            linear_sensitivity(2, r3, g3, 4).weight);
  const std::vector<double> rp = {4, 9, 1}, gp = {3, 1, 2};
  const auto a = conv2d_sensitivity(256, 9, 64, 2, r3, g3, 64).weight;
  const auto b = conv2d_sensitivity(256, 9, 64, 2, rp, gp, 64).weight;
  EXPECT_DOUBLE_EQ(a[0], b[1]);
  EXPECT_DOUBLE_EQ(a[1], b[2]);
  EXPECT_DOUBLE_EQ(a[2], b[0]);
}

TEST(Sensitivity, BatchNormFormula) {
  const std::vector<double> zero = {0, 0}, r = {2, 5}, r2 = {4, 10}, unit = {1, 1};
  const std::vector<double> spread = {0.5, 1.5}, none;
  EXPECT_EQ(batchnorm_sensitivity(6, zero, unit, 3).weight, zero);
  EXPECT_EQ(batchnorm_sensitivity(6, r2, unit, 3).weight, r2);
  EXPECT_EQ(batchnorm_sensitivity(6, r2, spread, 3).weight, r2);
  EXPECT_EQ(batchnorm_sensitivity(6, r2, none, 3).weight, r2);
  EXPECT_DOUBLE_EQ(batchnorm_sensitivity(6, r2, unit, 3).weight[0],
                   2 * batchnorm_sensitivity(6, r, unit, 3).weight[0]);
  EXPECT_DOUBLE_EQ(batchnorm_sensitivity(256, r, unit, 3).weight[1], 256.0 / 6.0 * 5.0);
}

// The recorded per-sample factors predict Var[grad x] of a dual-copy layer:
// sum_n (G/6) ||R_n||^2 k_n / B_n^2.
TEST(Sensitivity, BatchNormFactorPredictsInputGradientVariance) {
  const size_t n = 8, c = 4;
  BatchNorm bn(c);
  bn.params()[0] = random_tensor({c}, 101, 0.5, 1.5);
  const Tensor x = random_tensor({n, c, 8, 8}, 102, -2, 2);
  const Tensor g = random_tensor({n, c, 8, 8}, 103);
  Options o(true, 256, 0, BatchNormMode::kDualCopy);
  o.bits(4);
  MeanAccumulator acc(x.numel());
  std::vector<std::vector<float>> samples;
  const int draws = 4000;
  for (int s = 0; s < draws; ++s) {
    o.opt.key.step = uint32_t(s);
    bn.forward(x, o.opt);
    const Tensor gx = bn.backward(g);
    acc.add(gx.data());
    samples.emplace_back(gx.data().begin(), gx.data().end());
  }
  double measured = 0.0;
  for (const auto& smp : samples) {
    for (size_t i = 0; i < smp.size(); ++i) measured += (smp[i] - acc.mean(i)) * (smp[i] - acc.mean(i));
  }
  measured /= double(draws - 1);
  bn.forward(x, o.opt);
  bn.backward(g);
  double predicted = 0.0;
  for (size_t k = 0; k < n; ++k) {
    predicted += 256.0 / 6.0 * bn.range_sq()[k] * bn.input_grad_factor()[k] / (15.0 * 15.0);
  }
  EXPECT_NEAR(measured / predicted, 1.0, 0.2);
}

// Scaling every weight of one layer-budget problem leaves the argmin alone;
// checked with the exact solver on a 2x2 instance.
TEST(Sensitivity, BatchNormScaleInvariance) {
  AllocProblem p;
  p.weights = {{3.0, 0.5}, {1.0, 7.0}};
  p.dims = {2, 1};
  p.budget = 2 * 2 * 3 + 1 * 2 * 3;
  const auto base = dp_allocate_exact(p).bits;
  for (double k : {1e-3, 0.5, 10.0, 1e4}) {
    AllocProblem q = p;
    for (auto& row : q.weights) {
      for (auto& w : row) w *= k;
    }
    EXPECT_EQ(dp_allocate_exact(q).bits, base) << k;
  }
}

// --- Conv2d -----------------------------------------------------------------

TEST(Conv2d, OneDimensionalExample) {
  Conv2d c({1, 1, 1, 2, 1, 0, 1}, false);
  c.weight() = Tensor::from({1, 1, 1, 2}, {1, 1});
  Options fp(false);
  EXPECT_EQ(c.forward(Tensor::from({1, 1, 1, 3}, {1, 2, 3}), fp.opt),
            Tensor::from({1, 1, 1, 2}, {3, 5}));
  const Tensor gx = c.backward(Tensor::from({1, 1, 1, 2}, {1, 1}));
  EXPECT_EQ(c.grads()[0], Tensor::from({1, 1, 1, 2}, {3, 5}));
  EXPECT_EQ(gx, Tensor::from({1, 1, 1, 3}, {1, 2, 1}));
}

TEST(Conv2d, FiniteDifferences) {
  for (const Conv2dGeometry& g : {Conv2dGeometry{2, 3, 3, 3, 1, 1, 1},
                                  Conv2dGeometry{2, 4, 3, 2, 2, 1, 2},
                                  Conv2dGeometry{2, 2, 1, 1, 1, 0, 1}}) {
    Conv2d c(g);
    c.weight() = random_tensor(c.weight().shape(), 21);
    c.params()[1] = random_tensor({g.out_channels}, 22);
    check_gradients(c, random_tensor({1, 2, 5, 5}, 23), 24);
  }
}

TEST(Conv2d, CompressedIsUnbiased) {
  Conv2d c({2, 2, 3, 3, 1, 1, 1});
  c.weight() = random_tensor(c.weight().shape(), 31);
  expect_unbiased(c, random_tensor({2, 2, 4, 4}, 32), 33, Options(true, 8).bits(2), 3000);
}

TEST(Conv2d, BadGeometryThrows) {
  EXPECT_THROW(Conv2d({3, 4, 3, 3, 1, 0, 2}), std::invalid_argument);
  Conv2d c({1, 1, 3, 3, 1, 0, 1});
  Options fp(false);
  EXPECT_THROW(c.forward(Tensor({1, 1, 2, 2}), fp.opt), std::invalid_argument);
  EXPECT_THROW(c.forward(Tensor({1, 2, 5, 5}), fp.opt), std::invalid_argument);
}

// --- ReLU -------------------------------------------------------------------

TEST(ReLU, Example) {
  ReLU r;
  Options o(true);
  EXPECT_EQ(r.forward(Tensor::from({1, 2}, {-1, 2}), o.opt), Tensor::from({1, 2}, {0, 2}));
  EXPECT_EQ(r.context_bits().lossless, 2u);
  EXPECT_EQ(r.backward(Tensor::from({1, 2}, {5, 7})), Tensor::from({1, 2}, {0, 7}));
}

TEST(ReLU, AllNegativeGivesZeroGradient) {
  ReLU r;
  Options fp(false);
  r.forward(Tensor({2, 3}, -1.0f), fp.opt);
  EXPECT_EQ(r.backward(Tensor({2, 3}, 4.0f)), Tensor({2, 3}, 0.0f));
}

TEST(ReLU, CompressedEqualsFullPrecision) {
  const Tensor x = random_tensor({4, 37}, 41);
  const Tensor g = random_tensor({4, 37}, 42);
  ReLU r;
  Options fp(false), ac(true);
  r.forward(x, fp.opt);
  const Tensor a = r.backward(g);
  r.forward(x, ac.opt);
  EXPECT_EQ(r.context_bits().lossless, x.numel());
  EXPECT_EQ(r.backward(g), a);
}

TEST(ReLU, FiniteDifferences) {
  ReLU r;
  check_gradients(r, random_tensor({3, 8}, 43), 44);
}

// --- BatchNorm --------------------------------------------------------------

TEST(BatchNorm, NormalizedBatchIsFixedPoint) {
  BatchNorm bn(1);
  Options fp(false);
  const Tensor y = bn.forward(Tensor::from({2, 1}, {-1, 1}), fp.opt);
  EXPECT_FLOAT_EQ(y[0], -1.0f);
  EXPECT_FLOAT_EQ(y[1], 1.0f);
}

TEST(BatchNorm, FiniteDifferences) {
  BatchNorm bn(4);
  bn.params()[0] = random_tensor({4}, 51, 0.5, 1.5);
  bn.params()[1] = random_tensor({4}, 52);
  check_gradients(bn, random_tensor({8, 4}, 53), 54);
  BatchNorm bn2(2);
  check_gradients(bn2, random_tensor({3, 2, 3, 3}, 55), 56);
}

TEST(BatchNorm, ConstantChannelThrows) {
  BatchNorm bn(2);
  Options fp(false);
  EXPECT_THROW(bn.forward(Tensor::from({2, 2}, {1, 3, 1, 4}), fp.opt), std::domain_error);
}

TEST(BatchNorm, DualCopyIsUnbiased) {
  BatchNorm bn(3);
  bn.params()[0] = random_tensor({3}, 61, 0.5, 1.5);
  expect_unbiased(bn, random_tensor({6, 3}, 62, -2, 2),
                  63, Options(true, 256, 0, BatchNormMode::kDualCopy).bits(2), 3000);
}

TEST(BatchNorm, DualCopyDoublesContext) {
  BatchNorm bn(3);
  Options single(true), dual(true, 256, 0, BatchNormMode::kDualCopy);
  const Tensor x = random_tensor({5, 3}, 64);
  bn.forward(x, single.opt);
  const ContextBits one = bn.context_bits();
  bn.forward(x, dual.opt);
  const ContextBits two = bn.context_bits();
  EXPECT_EQ(two.payload, 2 * one.payload);
  EXPECT_EQ(two.metadata, 2 * one.metadata);
}

// RMS bias of the single-copy input gradient, 1-bit contexts.
double single_copy_bias(size_t n) {
  const size_t c = 4;
  BatchNorm bn(c);
  const Tensor x = random_tensor({n, c}, 70 + n, -2, 2);
  const Tensor g = random_tensor({n, c}, 80 + n);
  const auto [gx, gp] = exact_gradients(bn, x, g);
  const MonteCarlo mc = average_gradients(bn, x, g, Options(true).bits(1), 20000);
  double s = 0.0;
  for (size_t i = 0; i < gx.numel(); ++i) s += (mc.input.mean(i) - gx[i]) * (mc.input.mean(i) - gx[i]);
  return std::sqrt(s / double(gx.numel()));
}

TEST(BatchNorm, SingleCopyBiasShrinksWithBatch) {
  const double b16 = single_copy_bias(16);
  const double b64 = single_copy_bias(64);
  EXPECT_GT(b16, 0.0);
  EXPECT_LE(b64, 0.5 * b16) << b16 << " vs " << b64;
}

// --- Pooling ----------------------------------------------------------------

TEST(MaxPool2d, Example) {
  MaxPool2d p({1, 2, 2});
  Options fp(false);
  EXPECT_EQ(p.forward(Tensor::from({1, 1, 1, 4}, {1, 3, 2, 0}), fp.opt),
            Tensor::from({1, 1, 1, 2}, {3, 2}));
  EXPECT_EQ(p.indices(), (std::vector<uint8_t>{1, 0}));
  EXPECT_EQ(p.context_bits().lossless, 16u);
  EXPECT_EQ(p.backward(Tensor::from({1, 1, 1, 2}, {10, 20})),
            Tensor::from({1, 1, 1, 4}, {0, 10, 20, 0}));
}

TEST(MaxPool2d, KernelTooLargeThrows) {
  EXPECT_THROW(MaxPool2d({16, 17, 1}), std::invalid_argument);
  EXPECT_NO_THROW(MaxPool2d({16, 16, 16}));
}

TEST(MaxPool2d, CompressedEqualsFullPrecisionAndDifferentiates) {
  MaxPool2d p({2, 2, 2});
  const Tensor x = random_tensor({2, 3, 4, 6}, 91);
  const Tensor g = random_tensor({2, 3, 2, 3}, 92);
  Options fp(false), ac(true);
  p.forward(x, fp.opt);
  const Tensor a = p.backward(g);
  p.forward(x, ac.opt);
  EXPECT_EQ(p.backward(g), a);
  check_gradients(p, x, 93);
}

TEST(AvgPool2d, Example) {
  AvgPool2d p({1, 2, 2});
  Options fp(false);
  EXPECT_EQ(p.forward(Tensor::from({1, 1, 1, 2}, {2, 4}), fp.opt), Tensor::from({1, 1, 1, 1}, {3}));
  EXPECT_EQ(p.context_bits().total(), 0u);
  EXPECT_EQ(p.backward(Tensor::from({1, 1, 1, 1}, {6})), Tensor::from({1, 1, 1, 2}, {3, 3}));
}

TEST(AvgPool2d, FiniteDifferences) {
  AvgPool2d p({2, 2, 2});
  check_gradients(p, random_tensor({2, 2, 4, 4}, 95), 96);
}

}  // namespace
}  // namespace actc
