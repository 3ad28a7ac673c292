// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dispro/autodiff.hpp"

#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace dispro {

/// A named leaf tensor. rank is the on-disk rank (1 for row vectors).
template <class T>
struct NamedParam {
  std::string name;
  ad::Var<T> var;
  int rank = 2;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

template <class T>
Mat<T> gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  std::normal_distribution<double> n01;
  Mat<T> m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = static_cast<T>(stddev * n01(rng));
  return m;
}

/// Adam with L2 weight decay folded into the gradient (g += wd * theta).
template <class T>
class Adam {
 public:
  struct Options {
    double lr = 2e-4;
    double weight_decay = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(std::vector<ad::Var<T>> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) {
      m_.push_back(Mat<T>::Zero(p.rows(), p.cols()));
      v_.push_back(Mat<T>::Zero(p.rows(), p.cols()));
    }
  }

  void step() {
    ++t_;
    const T b1 = T(opt_.beta1), b2 = T(opt_.beta2);
    const T c1 = T(1) - std::pow(b1, T(t_));
    const T c2 = T(1) - std::pow(b2, T(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      Mat<T> g = p.grad();
      if (opt_.weight_decay != 0.0) g += T(opt_.weight_decay) * p.value();
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseProduct(g);
      const Mat<T> mhat = m_[i] / c1;
      const Mat<T> vhat = v_[i] / c2;
      p.mutable_value().array() -=
          T(opt_.lr) * mhat.array() / (vhat.array().sqrt() + T(opt_.eps));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<ad::Var<T>> params_;
  Options opt_;
  std::vector<Mat<T>> m_, v_;
  long t_ = 0;
};

template <class T>
std::vector<ad::Var<T>> trainable(const ParamList<T>& params) {
  std::vector<ad::Var<T>> out;
  for (const auto& p : params)
    if (p.var.requires_grad()) out.push_back(p.var);
  return out;
}

}  // namespace dispro
