// SPDX-License-Identifier: Apache-2.0
#include "dispro/autodiff.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

namespace dispro {
namespace {

using testing::check_gradients;
using testing::random_matrix;
using V = ad::Var<double>;

class AutodiffOps : public ::testing::Test {
 protected:
  std::mt19937_64 rng{7};
  V param(Eigen::Index r, Eigen::Index c, double s = 1.0) {
    return ad::parameter<double>(random_matrix(rng, r, c, s));
  }
  // random linear functional keeps every output entry in the loss
  V probe(const V& out) {
    return ad::sum(ad::row_scale(out, ad::constant<double>(random_probe(out.rows()))));
  }
  Mat<double> random_probe(Eigen::Index rows) {
    if (probe_.rows() != rows) probe_ = random_matrix(rng, rows, 1);
    return probe_;
  }
  Mat<double> probe_;
};

TEST_F(AutodiffOps, MatmulFamily) {
  V a = param(3, 4), b = param(4, 2), c = param(5, 4);
  auto r1 = check_gradients({{"a", a}, {"b", b}}, [&] { return probe(ad::matmul(a, b)); });
  EXPECT_LT(r1.max_rel, 1e-4) << r1.worst;
  probe_.resize(0, 0);
  auto r2 = check_gradients({{"a", a}, {"c", c}}, [&] { return probe(ad::matmul_nt(a, c)); });
  EXPECT_LT(r2.max_rel, 1e-4) << r2.worst;
}

TEST_F(AutodiffOps, BroadcastAndScale) {
  V a = param(3, 4), row = param(1, 4), s = param(3, 1);
  auto r = check_gradients({{"a", a}, {"row", row}, {"s", s}}, [&] {
    return probe(ad::scale(ad::row_scale(ad::add_row(a, row), s), 0.7));
  });
  EXPECT_LT(r.max_rel, 1e-4) << r.worst;
}

TEST_F(AutodiffOps, Nonlinearities) {
  V a = param(4, 3);
  for (auto f : std::vector<std::function<V(const V&)>>{
           [](const V& x) { return ad::tanh(x); }, [](const V& x) { return ad::sigmoid(x); },
           [](const V& x) { return ad::selu(x); }, [](const V& x) { return ad::gelu(x); },
           [](const V& x) { return ad::relu(x); }}) {
    auto r = check_gradients({{"a", a}}, [&] { return probe(f(a)); });
    EXPECT_LT(r.max_rel, 1e-4) << r.worst;
  }
}

TEST_F(AutodiffOps, LayerNorm) {
  V x = param(3, 6), g = param(1, 6), b = param(1, 6);
  auto r = check_gradients({{"x", x}, {"g", g}, {"b", b}},
                           [&] { return probe(ad::layernorm(x, g, b, 1e-5)); });
  EXPECT_LT(r.max_rel, 1e-4) << r.worst;
}

TEST_F(AutodiffOps, MaskedSoftmaxRowsSumToOne) {
  V x = param(4, 5);
  const std::vector<std::uint8_t> mask{1, 0, 1, 1, 0};
  V y = ad::softmax_rows(x, mask);
  for (Eigen::Index r = 0; r < 4; ++r) {
    EXPECT_NEAR(y.value().row(r).sum(), 1.0, 1e-12);
    EXPECT_EQ(y.value()(r, 1), 0.0);
    EXPECT_EQ(y.value()(r, 4), 0.0);
  }
  auto res = check_gradients({{"x", x}}, [&] { return probe(ad::softmax_rows(x, mask)); });
  EXPECT_LT(res.max_rel, 1e-4) << res.worst;
}

TEST_F(AutodiffOps, SlicingConcatGather) {
  V a = param(4, 3), b = param(2, 3), c = param(4, 2);
  auto r = check_gradients({{"a", a}, {"b", b}, {"c", c}}, [&] {
    V rows = ad::concat_rows<double>({ad::slice_rows(a, 1, 2), b, ad::gather_rows(a, {3, 0, 3})});
    V cols = ad::concat_cols<double>({ad::slice_cols(a, 0, 2), c});
    return ad::add(ad::sum(ad::tanh(rows)), ad::sum(ad::sigmoid(cols)));
  });
  EXPECT_LT(r.max_rel, 1e-4) << r.worst;
}

TEST_F(AutodiffOps, SharedSubexpressionAccumulates) {
  V a = ad::parameter<double>(Mat<double>::Constant(1, 1, 3.0));
  V b = ad::matmul(a, a);  // a^2
  V c = ad::add(b, a);     // a^2 + a
  ad::backward(c);
  EXPECT_DOUBLE_EQ(a.grad()(0, 0), 7.0);
}

TEST_F(AutodiffOps, ConstantsCarryNoGraph) {
  V a = ad::constant<double>(random_matrix(rng, 2, 2));
  V b = ad::tanh(ad::matmul(a, a));
  EXPECT_FALSE(b.requires_grad());
  EXPECT_TRUE(b.node()->parents.empty());
}

TEST_F(AutodiffOps, WeightedSum) {
  V a = param(1, 1), b = param(1, 1);
  auto r = check_gradients({{"a", a}, {"b", b}}, [&] {
    return ad::weighted_sum<double>({ad::tanh(a), ad::sigmoid(b)}, {2.0, -0.5});
  });
  EXPECT_LT(r.max_rel, 1e-4) << r.worst;
}

TEST_F(AutodiffOps, ShapeErrors) {
  V a = param(2, 3), b = param(2, 3);
  EXPECT_THROW(ad::matmul(a, b), Error);
  EXPECT_THROW(ad::add(a, param(3, 2)), Error);
  EXPECT_THROW(ad::backward(a), Error);
}

}  // namespace
}  // namespace dispro
