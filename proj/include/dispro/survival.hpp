// SPDX-License-Identifier: Apache-2.0
//
// Discrete-time survival math: cumulative survival from per-interval hazards,
// the censored negative log-likelihood, a scalar risk functional and Harrell's
// concordance index.
#pragma once

#include "dispro/autodiff.hpp"
#include "dispro/core.hpp"
#include "dispro/label.hpp"

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dispro::survival {

inline constexpr double kLogFloor = 1e-12;

template <class T>
struct SurvivalCurve {
  std::vector<T> survival;  // S^(1..I_t)

  // S^(j) with S^(0) = 1
  T at(int j) const { return j == 0 ? T(1) : survival[static_cast<std::size_t>(j - 1)]; }
};

template <class T>
SurvivalCurve<T> cumulative_survival(std::span<const T> hazards) {
  SurvivalCurve<T> curve;
  curve.survival.reserve(hazards.size());
  T s = T(1);
  for (T h : hazards) {
    s *= T(1) - h;
    curve.survival.push_back(s);
  }
  return curve;
}

namespace detail {

template <class T>
T clamped_log(T x) {
  return std::log(std::max(x, T(kLogFloor)));
}

inline void check_interval(std::size_t n, const SurvivalLabel& y) {
  require(y.interval >= 1 && static_cast<std::size_t>(y.interval) <= n,
          ErrorCode::InvalidArgument,
          "nll: interval " + std::to_string(y.interval) + " outside [1, " +
              std::to_string(n) + "]");
}

}  // namespace detail

/// Per-patient term
///   -[c log S^(tau) + (1-c) log S^(tau-1) + (1-c) log h^(tau)]
/// with every log clamped at kLogFloor.
template <class T>
T nll_loss(std::span<const T> hazards, const SurvivalLabel& y) {
  detail::check_interval(hazards.size(), y);
  const auto curve = cumulative_survival(hazards);
  const T c = T(y.censorship);
  const int tau = y.interval;
  return -(c * detail::clamped_log(curve.at(tau)) +
           (T(1) - c) * detail::clamped_log(curve.at(tau - 1)) +
           (T(1) - c) * detail::clamped_log(hazards[static_cast<std::size_t>(tau - 1)]));
}

/// Analytic d(nll_loss)/d(hazards). Terms sitting on the log floor contribute 0.
template <class T>
std::vector<T> nll_gradient(std::span<const T> hazards, const SurvivalLabel& y) {
  detail::check_interval(hazards.size(), y);
  const auto curve = cumulative_survival(hazards);
  const T c = T(y.censorship);
  const int tau = y.interval;
  std::vector<T> g(hazards.size(), T(0));
  auto log_s_term = [&](int upto, T weight) {
    if (weight == T(0) || curve.at(upto) <= T(kLogFloor)) return;
    for (int z = 1; z <= upto; ++z)
      g[static_cast<std::size_t>(z - 1)] += weight / (T(1) - hazards[static_cast<std::size_t>(z - 1)]);
  };
  log_s_term(tau, c);
  log_s_term(tau - 1, T(1) - c);
  const T h_tau = hazards[static_cast<std::size_t>(tau - 1)];
  if (c != T(1) && h_tau > T(kLogFloor)) g[static_cast<std::size_t>(tau - 1)] -= (T(1) - c) / h_tau;
  return g;
}

/// Sum of per-patient terms, matching the batch loss.
template <class T>
T nll_loss_batch(const std::vector<std::vector<T>>& hazards,
                 const std::vector<SurvivalLabel>& labels) {
  require(hazards.size() == labels.size(), ErrorCode::ShapeMismatch,
          "nll_loss_batch: hazard/label count");
  T total = T(0);
  for (std::size_t i = 0; i < labels.size(); ++i)
    total += nll_loss<T>(std::span<const T>(hazards[i]), labels[i]);
  return total;
}

/// Risk = -sum_j S^(j); larger means earlier expected event.
template <class T>
T risk_score(std::span<const T> hazards) {
  const auto curve = cumulative_survival(hazards);
  T acc = T(0);
  for (T s : curve.survival) acc += s;
  return -acc;
}

/// Harrell's C. A pair (i, j) is comparable when t_i < t_j and patient i had
/// the event; it is concordant when risk_i > risk_j, half-concordant on ties.
/// Returns nullopt when no pair is comparable.
inline std::optional<double> concordance_index(std::span<const double> risks,
                                               std::span<const SurvivalLabel> labels) {
  require(risks.size() == labels.size(), ErrorCode::ShapeMismatch,
          "concordance_index: risk/label count");
  double concordant = 0.0;
  std::size_t comparable = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].censorship != 0) continue;
    for (std::size_t j = 0; j < labels.size(); ++j) {
      if (!(labels[i].time_months < labels[j].time_months)) continue;
      ++comparable;
      if (risks[i] > risks[j]) {
        concordant += 1.0;
      } else if (risks[i] == risks[j]) {
        concordant += 0.5;
      }
    }
  }
  if (comparable == 0) return std::nullopt;
  return concordant / static_cast<double>(comparable);
}

/// Like concordance_index but raises ErrorCode::NoComparablePairs.
inline double concordance_index_or_throw(std::span<const double> risks,
                                         std::span<const SurvivalLabel> labels) {
  auto c = concordance_index(risks, labels);
  if (!c) throw Error(ErrorCode::NoComparablePairs, "concordance_index: no comparable pairs");
  return *c;
}

/// Graph node computing nll_loss of a 1 x I_t hazard row.
template <class T>
ad::Var<T> nll(const ad::Var<T>& hazards, const SurvivalLabel& y) {
  require(hazards.rows() == 1, ErrorCode::ShapeMismatch, "nll: hazards must be a row");
  std::span<const T> h(hazards.value().data(), static_cast<std::size_t>(hazards.cols()));
  Mat<T> out(1, 1);
  out(0, 0) = nll_loss<T>(h, y);
  return ad::detail::make<T>(std::move(out), {hazards}, [y](ad::Node<T>& self) {
    auto& H = *self.parents[0];
    std::span<const T> hv(H.value.data(), static_cast<std::size_t>(H.value.cols()));
    const auto g = nll_gradient<T>(hv, y);
    Mat<T> dh(1, H.value.cols());
    for (std::size_t z = 0; z < g.size(); ++z)
      dh(0, static_cast<Eigen::Index>(z)) = g[z] * self.grad(0, 0);
    H.accumulate(dh);
  });
}

}  // namespace dispro::survival
