#include <gtest/gtest.h>

#include <cmath>

#include "clipbench/gradcheck.hpp"
#include "clipbench/ops.hpp"
#include "clipbench/rng.hpp"

using namespace clipbench;

namespace {

Tensor rand_t(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(s), std::move(v), true);
}

// Weighted sum so every output element gets a distinct upstream gradient.
Tensor probe(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  std::vector<double> w(y.numel());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return sum(mul(y, Tensor(y.shape(), w)));
}

void expect_grads(const std::function<Tensor()>& f, std::vector<Tensor> in) {
  GradCheckOptions opt;
  opt.tolerance = 1e-6;
  const auto r = check_gradients(f, std::move(in), opt);
  EXPECT_EQ(r.passed, r.checked) << "worst " << r.worst << " rel " << r.max_rel_error;
  EXPECT_GT(r.checked, 0u);
}

}  // namespace

TEST(Tensor, MatmulValues) {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b({3, 2}, {7, 8, 9, 10, 11, 12});
  const auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_DOUBLE_EQ(c[0], 58);
  EXPECT_DOUBLE_EQ(c[1], 64);
  EXPECT_DOUBLE_EQ(c[2], 139);
  EXPECT_DOUBLE_EQ(c[3], 154);
}

TEST(Tensor, MatmulShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Tensor, GradientsMatmulBmmLinear) {
  Rng rng(1);
  auto a = rand_t(rng, {3, 4}), b = rand_t(rng, {4, 5});
  expect_grads([&] { return probe(matmul(a, b)); }, {a, b});
  auto x = rand_t(rng, {2, 3, 4}), y = rand_t(rng, {2, 4, 2});
  expect_grads([&] { return probe(bmm(x, y)); }, {x, y});
  auto in = rand_t(rng, {2, 3, 4}), w = rand_t(rng, {4, 3}), bias = rand_t(rng, {3});
  expect_grads([&] { return probe(linear(in, w, bias)); }, {in, w, bias});
}

TEST(Tensor, GradientsElementwise) {
  Rng rng(2);
  auto x = rand_t(rng, {3, 4}), y = rand_t(rng, {3, 4});
  auto pos = rand_t(rng, {3, 4}, 0.5, 2.0);
  expect_grads([&] { return probe(add(x, y)); }, {x, y});
  expect_grads([&] { return probe(sub(x, y)); }, {x, y});
  expect_grads([&] { return probe(mul(x, y)); }, {x, y});
  expect_grads([&] { return probe(neg(x)); }, {x});
  expect_grads([&] { return probe(scale(x, 2.5)); }, {x});
  expect_grads([&] { return probe(exp(x)); }, {x});
  expect_grads([&] { return probe(log(pos)); }, {pos});
  expect_grads([&] { return probe(gelu(x)); }, {x});
  auto s = rand_t(rng, {}, 0.5, 1.5);
  expect_grads([&] { return probe(mul_scalar(x, s)); }, {x, s});
  expect_grads([&] { return probe(div_scalar(x, s)); }, {x, s});
  auto b = rand_t(rng, {4});
  expect_grads([&] { return probe(add_broadcast(x, b)); }, {x, b});
}

TEST(Tensor, ReluGradientAwayFromKink) {
  Tensor x({4}, {-1.0, -0.3, 0.4, 2.0}, true);
  backward(sum(relu(x)));
  EXPECT_EQ(x.grad(), (std::vector<double>{0, 0, 1, 1}));
}

TEST(Tensor, GradientsReductionsAndNormalization) {
  Rng rng(3);
  auto x = rand_t(rng, {2, 3, 4});
  expect_grads([&] { return mean(mul(x, x)); }, {x});
  expect_grads([&] { return probe(mean_axis(x, 1)); }, {x});
  expect_grads([&] { return probe(softmax(x, -1)); }, {x});
  expect_grads([&] { return probe(log_softmax(x, 1)); }, {x});
  expect_grads([&] { return probe(l2_normalize(x, -1)); }, {x});
  auto g = rand_t(rng, {4}), b = rand_t(rng, {4});
  expect_grads([&] { return probe(layer_norm(x, g, b)); }, {x, g, b});
}

TEST(Tensor, GradientsShapeOps) {
  Rng rng(4);
  auto x = rand_t(rng, {2, 3, 4});
  expect_grads([&] { return probe(permute(x, {2, 0, 1})); }, {x});
  expect_grads([&] { return probe(transpose_last2(x)); }, {x});
  expect_grads([&] { return probe(reshape(x, {6, 4})); }, {x});
  auto m = rand_t(rng, {3, 5});
  expect_grads([&] { return probe(transpose(m)); }, {m});
  expect_grads([&] { return probe(gather_rows(m, {2, 0, 2})); }, {m});
  auto y = rand_t(rng, {2, 2, 4});
  expect_grads([&] { return probe(concat({x, y}, 1)); }, {x, y});
  std::vector<std::uint8_t> mask(m.numel(), 0);
  mask[3] = mask[7] = 1;
  expect_grads([&] { return probe(masked_fill(m, mask, -5.0)); }, {m});
}

TEST(Tensor, GradientsConvPoolEmbedding) {
  Rng rng(5);
  auto x = rand_t(rng, {2, 2, 4, 4}), w = rand_t(rng, {3, 2, 3, 3}), b = rand_t(rng, {3});
  expect_grads([&] { return probe(conv2d(x, w, b, 1)); }, {x, w, b});
  expect_grads([&] { return probe(avg_pool2d(x, 2)); }, {x});
  auto table = rand_t(rng, {5, 3});
  expect_grads([&] { return probe(embedding(table, {1, 4, 1, 0}, {2, 2})); }, {table});
}

TEST(Tensor, CrossEntropyMatchesHandComputed) {
  Tensor logits({2, 3}, {1.0, 2.0, 3.0, 0.5, 0.5, 0.5}, true);
  const double want = 0.5 * (-(1.0 - std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0))) + std::log(3.0));
  EXPECT_NEAR(cross_entropy(logits, {0, 2}).item(), want, 1e-14);
  expect_grads([&] { return cross_entropy(logits, {0, 2}); }, {logits});
}

TEST(Tensor, GradAccumulatesAcrossUses) {
  Tensor x({2}, {1.5, -2.0}, true);
  backward(sum(add(mul(x, x), x)));
  EXPECT_NEAR(x.grad()[0], 4.0, 1e-15);
  EXPECT_NEAR(x.grad()[1], -3.0, 1e-15);
}

TEST(Tensor, NoGradGuardSkipsGraph) {
  Tensor x({2}, {1.0, 2.0}, true);
  Tensor y;
  {
    NoGradGuard g;
    y = sum(mul(x, x));
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_enabled());
}

TEST(Tensor, L2NormalizeUnitNorm) {
  Rng rng(6);
  auto x = rand_t(rng, {5, 7});
  const auto y = l2_normalize(x);
  for (std::size_t i = 0; i < 5; ++i) {
    double n = 0;
    for (std::size_t k = 0; k < 7; ++k) n += y[i * 7 + k] * y[i * 7 + k];
    EXPECT_NEAR(n, 1.0, 1e-14);
  }
}

TEST(Tensor, SoftmaxRowsSumToOneProperty) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t r = 1 + rng.index(4), c = 1 + rng.index(6);
    auto x = rand_t(rng, {r, c}, -50.0, 50.0);
    const auto y = softmax(x);
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < c; ++j) {
        EXPECT_GE(y[i * c + j], 0.0);
        s += y[i * c + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}
