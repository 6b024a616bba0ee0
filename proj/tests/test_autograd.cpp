#include "mmv/conv.hpp"
#include "mmv/nn.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace mmv;
using namespace mmv::testing;
using ag::Tensor;

namespace {

constexpr double kTol = 1e-6;

// Weighted sum with fixed random weights so every output element matters.
Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 99) {
  auto w = Tensor<double>::constant(y.shape(), random_values(y.size(), seed));
  return ag::sum(ag::mul(y, w));
}

}  // namespace

TEST(Autograd, ElementwiseOps) {
  auto a = random_param({3, 4}, 1), b = random_param({3, 4}, 2), v = random_param({4}, 3), c = random_param({3}, 4);
  EXPECT_LT(max_gradient_error({a, b}, [&] { return probe(ag::add(a, b)); }), kTol);
  EXPECT_LT(max_gradient_error({a, b}, [&] { return probe(ag::sub(a, b)); }), kTol);
  EXPECT_LT(max_gradient_error({a, b}, [&] { return probe(ag::mul(a, b)); }), kTol);
  EXPECT_LT(max_gradient_error({a}, [&] { return probe(ag::scale(a, 0.37)); }), kTol);
  EXPECT_LT(max_gradient_error({a, v}, [&] { return probe(ag::add_rowvec(a, v)); }), kTol);
  EXPECT_LT(max_gradient_error({a, c}, [&] { return probe(ag::add_colvec(a, c)); }), kTol);
  EXPECT_LT(max_gradient_error({a}, [&] { return probe(ag::gelu(a)); }), kTol);
  EXPECT_LT(max_gradient_error({a}, [&] { return probe(ag::mean_rows(a)); }), kTol);
  EXPECT_LT(max_gradient_error({a}, [&] { return ag::mean(ag::mul(a, a)); }), kTol);
}

TEST(Autograd, SameTensorUsedTwiceAccumulates) {
  auto a = random_param({5}, 7);
  EXPECT_LT(max_gradient_error({a}, [&] { return ag::sum(ag::mul(a, a)); }), kTol);
  EXPECT_LT(max_gradient_error({a}, [&] { return probe(ag::add(a, a)); }), kTol);
}

TEST(Autograd, LeakyReluAwayFromKink) {
  auto a = Tensor<double>::parameter({4}, {-0.8, -0.3, 0.4, 1.1});
  EXPECT_LT(max_gradient_error({a}, [&] { return probe(ag::leaky_relu(a)); }), kTol);
}

TEST(Autograd, MatmulLinearTranspose) {
  auto x = random_param({5, 3}, 11), w = random_param({4, 3}, 12), b = random_param({4}, 13), m = random_param({3, 6}, 14);
  EXPECT_LT(max_gradient_error({x, m}, [&] { return probe(ag::matmul(x, m)); }), kTol);
  EXPECT_LT(max_gradient_error({x, w, b}, [&] { return probe(ag::linear(x, w, b)); }), kTol);
  EXPECT_LT(max_gradient_error({x, w}, [&] { return probe(ag::linear(x, w)); }), kTol);
  EXPECT_LT(max_gradient_error({x}, [&] { return probe(ag::transpose(x)); }), kTol);
  EXPECT_LT(max_gradient_error({x}, [&] { return probe(ag::reshape(x, {15})); }), kTol);
}

TEST(Autograd, RowBookkeeping) {
  auto a = random_param({3, 4}, 21), b = random_param({2, 4}, 22);
  EXPECT_LT(max_gradient_error({a, b}, [&] { return probe(ag::concat_rows<double>({a, b, a})); }), kTol);
  EXPECT_LT(max_gradient_error({a}, [&] { return probe(ag::gather_rows(a, {2, 0, 2, 1})); }), kTol);
  EXPECT_LT(max_gradient_error({a}, [&] { return probe(ag::segment_mean(a, {1, 0, 1}, 2)); }), kTol);
  EXPECT_THROW(ag::segment_mean(a, {0, 0, 0}, 2), ag::ShapeError);
}

TEST(Autograd, LayerNormAndAttention) {
  auto x = random_param({5, 6}, 31), g = random_param({6}, 32, 0.5, 1.5), be = random_param({6}, 33);
  EXPECT_LT(max_gradient_error({x, g, be}, [&] { return probe(ag::layer_norm(x, g, be)); }), kTol);
  auto q = random_param({4, 6}, 34), k = random_param({7, 6}, 35), v = random_param({7, 6}, 36);
  EXPECT_LT(max_gradient_error({q, k, v}, [&] { return probe(ag::multi_head_attention(q, k, v, 3)); }), kTol);
}

TEST(Autograd, AttentionMatchesDirectFormula) {
  auto q = random_param({3, 4}, 41), k = random_param({5, 4}, 42), v = random_param({5, 4}, 43);
  auto out = ag::multi_head_attention(q, k, v, 2);
  for (int h = 0; h < 2; ++h)
    for (int i = 0; i < 3; ++i) {
      std::vector<double> s(5);
      double mx = -1e300, den = 0;
      for (int j = 0; j < 5; ++j) {
        s[j] = 0;
        for (int c = 0; c < 2; ++c) s[j] += q.at(i * 4 + h * 2 + c) * k.at(j * 4 + h * 2 + c);
        s[j] /= std::sqrt(2.0);
        mx = std::max(mx, s[j]);
      }
      for (auto& e : s) den += (e = std::exp(e - mx));
      for (int c = 0; c < 2; ++c) {
        double o = 0;
        for (int j = 0; j < 5; ++j) o += s[j] / den * v.at(j * 4 + h * 2 + c);
        EXPECT_NEAR(out.at(i * 4 + h * 2 + c), o, 1e-12);
      }
    }
}

TEST(Autograd, Losses) {
  auto p = random_param({2, 3}, 51);
  const std::vector<double> tgt = random_values(6, 52);
  EXPECT_LT(max_gradient_error({p}, [&] { return ag::sum_squared_error(p, std::span<const double>(tgt)); }), kTol);
  EXPECT_LT(max_gradient_error({p}, [&] { return ag::cross_entropy(p, {2, 0}); }), kTol);
  auto logits = random_param({4, 2, 2, 3}, 53);
  std::vector<int> labels{0, 1, 2, 3, 3, 2, 1, 0, 0, 0, 1, 3};
  EXPECT_LT(max_gradient_error({logits}, [&] { return ag::soft_dice_loss(logits, labels); }), kTol);
}

TEST(Autograd, NoGradGuardSkipsGraph) {
  auto a = random_param({3}, 61);
  ag::NoGradGuard guard;
  auto y = ag::scale(a, 2.0);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Conv, Conv3dMatchesDirectLoops) {
  auto x = random_param({2, 3, 4, 5}, 71), w = random_param({3, 2, 3, 3, 3}, 72), b = random_param({3}, 73);
  auto y = ag::conv3d(x, w, b);
  ASSERT_EQ(y.shape(), (ag::Shape{3, 3, 4, 5}));
  for (int co = 0; co < 3; ++co)
    for (int z = 0; z < 3; ++z)
      for (int yy = 0; yy < 4; ++yy)
        for (int xx = 0; xx < 5; ++xx) {
          double acc = b.at(co);
          for (int ci = 0; ci < 2; ++ci)
            for (int kz = 0; kz < 3; ++kz)
              for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                  const int sz = z + kz - 1, sy = yy + ky - 1, sx = xx + kx - 1;
                  if (sz < 0 || sy < 0 || sx < 0 || sz >= 3 || sy >= 4 || sx >= 5) continue;
                  acc += w.at((((co * 2 + ci) * 3 + kz) * 3 + ky) * 3 + kx) * x.at(((ci * 3 + sz) * 4 + sy) * 5 + sx);
                }
          EXPECT_NEAR(y.at(((co * 3 + z) * 4 + yy) * 5 + xx), acc, 1e-12);
        }
}

TEST(Conv, TransposedConvMatchesDirectLoops) {
  auto x = random_param({2, 2, 3, 2}, 81), w = random_param({2, 3, 2, 2, 2}, 82), b = random_param({3}, 83);
  auto y = ag::conv_transpose3d_k2s2(x, w, b);
  ASSERT_EQ(y.shape(), (ag::Shape{3, 4, 6, 4}));
  for (int co = 0; co < 3; ++co)
    for (int z = 0; z < 4; ++z)
      for (int yy = 0; yy < 6; ++yy)
        for (int xx = 0; xx < 4; ++xx) {
          double acc = b.at(co);
          for (int ci = 0; ci < 2; ++ci)
            acc += x.at(((ci * 2 + z / 2) * 3 + yy / 2) * 2 + xx / 2) *
                   w.at((((ci * 3 + co) * 2 + z % 2) * 2 + yy % 2) * 2 + xx % 2);
          EXPECT_NEAR(y.at(((co * 4 + z) * 6 + yy) * 4 + xx), acc, 1e-12);
        }
}

TEST(Conv, Gradients) {
  auto x = random_param({2, 3, 4, 3}, 91), w = random_param({3, 2, 3, 3, 3}, 92), b = random_param({3}, 93);
  EXPECT_LT(max_gradient_error({x, w, b}, [&] { return probe(ag::conv3d(x, w, b)); }), kTol);
  auto w1 = random_param({3, 2, 1, 1, 1}, 94);
  EXPECT_LT(max_gradient_error({x, w1, b}, [&] { return probe(ag::conv3d(x, w1, b)); }), kTol);
  auto wt = random_param({2, 3, 2, 2, 2}, 95);
  EXPECT_LT(max_gradient_error({x, wt, b}, [&] { return probe(ag::conv_transpose3d_k2s2(x, wt, b)); }), kTol);
  auto g = random_param({2}, 96, 0.5, 1.5), be = random_param({2}, 97);
  EXPECT_LT(max_gradient_error({x, g, be}, [&] { return probe(ag::instance_norm(x, g, be)); }), kTol);
  EXPECT_LT(max_gradient_error({x}, [&] { return probe(ag::concat_channels<double>({x, x})); }), kTol);
}

TEST(Nn, BlocksAreDifferentiable) {
  nn::ParamStore<double> ps;
  nn::Rng rng(5);
  nn::TransformerBlock<double> block(ps, "b", 6, 2, 2.0, rng);
  nn::CrossAttentionBlock<double> cross(ps, "c", 6, 3, 2.0, rng);
  auto x = random_param({4, 6}, 101), ctx = random_param({3, 6}, 102);
  std::vector<Tensor<double>> leaves{x, ctx};
  for (auto& [_, p] : ps.entries()) leaves.push_back(p);
  EXPECT_LT(max_gradient_error(leaves, [&] { return probe(cross(block(x), ctx)); }), 1e-5);
}
