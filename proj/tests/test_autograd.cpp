#include <gtest/gtest.h>

#include "cvt/autograd.hpp"
#include "cvt/nn.hpp"
#include "gradcheck.hpp"

using namespace cvt;
using cvt::testing::Md;
using cvt::testing::max_relative_error;
using cvt::testing::project;
using cvt::testing::random_matrix;
using Vars = std::vector<ag::Var<double>>;
using TapeD = ag::Tape<double>;

namespace {

// central differences at h = 1e-6 carry round-off near 1e-6 for the normalizations
constexpr double kTol = 1e-5;

std::mt19937_64& rng() {
  static std::mt19937_64 r(7);
  return r;
}

}  // namespace

TEST(Autograd, AddScaleMatmul) {
  auto a = random_matrix(3, 4, rng()), b = random_matrix(3, 4, rng()), c = random_matrix(4, 2, rng());
  EXPECT_LT(max_relative_error({a, b, c},
                               [](TapeD& t, Vars& v) {
                                 return project(t, ag::matmul(ag::scale(ag::add(v[0], v[1]), 0.7), v[2]));
                               }),
            kTol);
}

TEST(Autograd, Affine) {
  auto x = random_matrix(5, 3, rng()), w = random_matrix(3, 4, rng()), b = random_matrix(1, 4, rng());
  EXPECT_LT(max_relative_error({x, w, b}, [](TapeD& t, Vars& v) { return project(t, ag::affine(v[0], v[1], v[2])); }),
            kTol);
}

TEST(Autograd, GeluMatchesErfForm) {
  TapeD t;
  Md x(1, 3);
  x << -1.0, 0.0, 2.0;
  auto y = ag::gelu(t.constant(x));
  EXPECT_NEAR(y.value()(0, 0), -0.15865525393145707, 1e-12);
  EXPECT_NEAR(y.value()(0, 1), 0.0, 1e-15);
  EXPECT_NEAR(y.value()(0, 2), 1.9544997361036416, 1e-12);
  auto z = random_matrix(4, 5, rng(), 2.0);
  EXPECT_LT(max_relative_error({z}, [](TapeD& t2, Vars& v) { return project(t2, ag::gelu(v[0])); }), kTol);
}

TEST(Autograd, DropoutUsesOneMaskForwardAndBackward) {
  auto x = random_matrix(6, 5, rng());
  EXPECT_LT(max_relative_error({x},
                               [](TapeD& t, Vars& v) {
                                 std::mt19937_64 r(3);
                                 return project(t, ag::dropout(v[0], 0.4, true, &r));
                               }),
            kTol);
  TapeD t;
  auto in = t.constant(x);
  auto out = ag::dropout(in, 0.4, false, nullptr);
  EXPECT_EQ(out.node(), in.node());
}

TEST(Autograd, LayerNorm) {
  auto x = random_matrix(4, 6, rng()), g = random_matrix(1, 6, rng()), b = random_matrix(1, 6, rng());
  EXPECT_LT(max_relative_error({x, g, b},
                               [](TapeD& t, Vars& v) { return project(t, ag::layer_norm(v[0], v[1], v[2])); }),
            kTol);
}

TEST(Autograd, BatchNormTrainAndEval) {
  auto x = random_matrix(7, 3, rng()), g = random_matrix(1, 3, rng()), b = random_matrix(1, 3, rng());
  EXPECT_LT(max_relative_error({x, g, b},
                               [](TapeD& t, Vars& v) {
                                 Md mean, var;
                                 return project(t, ag::batch_norm_train(v[0], v[1], v[2], 1e-5, &mean, &var));
                               }),
            kTol);
  const Md mean = random_matrix(1, 3, rng());
  const Md var = random_matrix(1, 3, rng()).cwiseAbs().array() + 0.5;
  EXPECT_LT(max_relative_error({x, g, b},
                               [&](TapeD& t, Vars& v) {
                                 return project(t, ag::batch_norm_eval(v[0], v[1], v[2], mean, var, 1e-5));
                               }),
            kTol);
}

TEST(Autograd, BatchNormTrainNormalizesColumns) {
  TapeD t;
  auto x = random_matrix(50, 4, rng(), 3.0);
  Md mean, var;
  auto y = ag::batch_norm_train(t.constant(x), t.constant(Md::Ones(1, 4)), t.constant(Md::Zero(1, 4)), 0.0, &mean,
                                &var);
  for (int c = 0; c < 4; ++c) {
    EXPECT_NEAR(y.value().col(c).mean(), 0.0, 1e-12);
    EXPECT_NEAR((y.value().col(c).array().square()).mean(), 1.0, 1e-12);
  }
}

TEST(Autograd, BlockSoftmax) {
  auto x = random_matrix(3, 6, rng(), 3.0);
  EXPECT_LT(max_relative_error({x}, [](TapeD& t, Vars& v) { return project(t, ag::block_softmax(v[0], 3)); }), kTol);
  TapeD t;
  auto y = ag::block_softmax(t.constant(x), 3);
  for (int r = 0; r < 3; ++r) {
    EXPECT_NEAR(y.value().row(r).segment(0, 3).sum(), 1.0, 1e-12);
    EXPECT_NEAR(y.value().row(r).segment(3, 3).sum(), 1.0, 1e-12);
  }
}

TEST(Autograd, TileAdd) {
  auto x = random_matrix(6, 4, rng()), table = random_matrix(3, 4, rng());
  EXPECT_LT(max_relative_error({x, table}, [](TapeD& t, Vars& v) { return project(t, ag::tile_add(v[0], v[1])); }),
            kTol);
}

TEST(Autograd, HeadScoresAndMix) {
  auto q = random_matrix(6, 4, rng()), key = random_matrix(3, 4, rng());
  EXPECT_LT(max_relative_error({q, key},
                               [](TapeD& t, Vars& v) { return project(t, ag::head_scores(v[0], v[1], 2)); }),
            kTol);
  // two samples of three tokens, two heads
  auto attn = random_matrix(6, 6, rng()), value = random_matrix(6, 4, rng());
  EXPECT_LT(max_relative_error({attn, value},
                               [](TapeD& t, Vars& v) { return project(t, ag::head_mix(v[0], v[1], 2)); }),
            kTol);
}

TEST(Autograd, HeadMixMatchesPerSampleProducts) {
  TapeD t;
  auto attn = random_matrix(4, 4, rng()), value = random_matrix(4, 6, rng());
  auto out = ag::head_mix(t.constant(attn), t.constant(value), 2).value();
  for (int s = 0; s < 2; ++s) {
    for (int h = 0; h < 2; ++h) {
      const Md expect = attn.block(2 * s, 2 * h, 2, 2) * value.block(2 * s, 3 * h, 2, 3);
      EXPECT_LT((out.block(2 * s, 3 * h, 2, 3) - expect).norm(), 1e-12);
    }
  }
}

TEST(Autograd, Im2colConvolutionMatchesDirectLoop) {
  const ag::Grid grid{2, 5, 4, 3};
  const int k = 3, stride = 2, pad = 1, out_c = 2;
  auto x = random_matrix(grid.rows(), grid.channels, rng());
  auto w = random_matrix(k * k * grid.channels, out_c, rng());
  TapeD t;
  auto y = ag::matmul(ag::im2col(t.constant(x), grid, k, stride, pad), t.constant(w)).value();
  const int oh = ag::conv_out_size(grid.height, k, stride, pad), ow = ag::conv_out_size(grid.width, k, stride, pad);
  ASSERT_EQ(y.rows(), grid.batch * oh * ow);
  for (int b = 0; b < grid.batch; ++b) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        for (int o = 0; o < out_c; ++o) {
          double acc = 0.0;
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
              if (iy < 0 || ix < 0 || iy >= grid.height || ix >= grid.width) continue;
              for (int c = 0; c < grid.channels; ++c) {
                acc += x((b * grid.height + iy) * grid.width + ix, c) * w((ky * k + kx) * grid.channels + c, o);
              }
            }
          }
          EXPECT_NEAR(y((b * oh + oy) * ow + ox, o), acc, 1e-12);
        }
      }
    }
  }
  EXPECT_LT(max_relative_error({x}, [&](TapeD& t2, Vars& v) { return project(t2, ag::im2col(v[0], grid, k, stride, pad)); }),
            kTol);
}

TEST(Autograd, PoolingNormalizeGather) {
  auto x = random_matrix(6, 3, rng());
  EXPECT_LT(max_relative_error({x}, [](TapeD& t, Vars& v) { return project(t, ag::mean_groups(v[0], 3)); }), kTol);
  EXPECT_LT(max_relative_error({x}, [](TapeD& t, Vars& v) { return project(t, ag::l2_normalize_rows(v[0])); }),
            kTol);
  EXPECT_LT(max_relative_error({x},
                               [](TapeD& t, Vars& v) { return project(t, ag::gather_rows(v[0], {4, 1, 4})); }),
            kTol);
  TapeD t;
  auto z = ag::l2_normalize_rows(t.constant(x)).value();
  for (int r = 0; r < z.rows(); ++r) EXPECT_NEAR(z.row(r).norm(), 1.0, 1e-12);
}

TEST(Autograd, ParameterGradientsAccumulateAcrossUses) {
  Parameter<double> p{"p", Md::Constant(1, 1, 3.0)};
  TapeD t;
  auto a = t.parameter(p);
  auto b = t.parameter(p);
  t.backward(ag::sum(ag::add(ag::scale(a, 2.0), ag::matmul(b, b))));
  // d/dp (2p + p^2) = 2 + 2p = 8
  EXPECT_DOUBLE_EQ(p.grad(0, 0), 8.0);
}

TEST(Autograd, FrozenParameterIsConstant) {
  Parameter<double> p{"p", Md::Ones(2, 2)};
  p.trainable = false;
  TapeD t;
  auto v = t.parameter(p);
  EXPECT_FALSE(v.requires_grad());
}

TEST(Autograd, BackwardNeedsScalarRoot) {
  TapeD t;
  auto v = t.variable(Md::Ones(2, 2));
  EXPECT_THROW(t.backward(v), StructuralError);
}

TEST(Autograd, ShapeErrors) {
  TapeD t;
  auto a = t.constant(Md::Ones(2, 3));
  auto b = t.constant(Md::Ones(2, 2));
  EXPECT_THROW(ag::add(a, b), StructuralError);
  EXPECT_THROW(ag::matmul(a, a), StructuralError);
  EXPECT_THROW(ag::block_softmax(a, 2), StructuralError);
  EXPECT_THROW(ag::mean_groups(a, 4), StructuralError);
}

TEST(Autograd, ModulesHaveExpectedParameterCounts) {
  std::mt19937_64 r(1);
  nn::Linear<double> lin("l", 5, 3, r);
  EXPECT_EQ(count_parameters(lin), 5u * 3 + 3);
  nn::Conv2d<double> conv("c", 3, 8, 3, 2, 1, r);
  EXPECT_EQ(count_parameters(conv), 3u * 3 * 3 * 8 + 8);
  nn::BatchNorm<double> bn("b", 4);
  EXPECT_EQ(count_parameters(bn), 8u);  // running statistics are not trainable
}
