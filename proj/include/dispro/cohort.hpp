// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dispro/core.hpp"
#include "dispro/label.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace dispro {

/// One patient's instance features for one modality, one instance per row.
struct Bag {
  std::string patient_id;
  Modality modality = Modality::Pathology;
  MatD instances;

  Eigen::Index size() const { return instances.rows(); }
  Eigen::Index width() const { return instances.cols(); }
};

inline void validate_bag(const Bag& bag) {
  require(bag.instances.rows() >= 1, ErrorCode::InvalidArgument,
          "empty bag for patient " + bag.patient_id);
  require(bag.instances.allFinite(), ErrorCode::InvalidArgument,
          "non-finite feature value in " + std::string(name(bag.modality)) +
              " bag of patient " + bag.patient_id);
}

struct Patient {
  std::string id;
  std::optional<Bag> pathology;
  std::optional<Bag> genomics;
  SurvivalLabel label;

  const std::optional<Bag>& bag(Modality m) const {
    return m == Modality::Pathology ? pathology : genomics;
  }
  std::optional<Bag>& bag(Modality m) { return m == Modality::Pathology ? pathology : genomics; }
  bool has(Modality m) const { return bag(m).has_value(); }
};

struct Cohort {
  std::vector<Patient> patients;
  std::vector<double> bin_edges;  // I_t - 1 ascending edges
  int n_intervals = 0;
  Eigen::Index d_pathology = 0;
  Eigen::Index d_genomics = 0;

  std::size_t size() const { return patients.size(); }
  Eigen::Index width(Modality m) const {
    return m == Modality::Pathology ? d_pathology : d_genomics;
  }
  int n_classes() const { return 2 * n_intervals; }
};

inline void validate_cohort(const Cohort& c) {
  for (const auto& p : c.patients) {
    require(p.pathology || p.genomics, ErrorCode::InvalidArgument,
            "patient " + p.id + " has no modality");
    for (Modality m : {Modality::Pathology, Modality::Genomics}) {
      if (!p.has(m)) continue;
      validate_bag(*p.bag(m));
      require(p.bag(m)->width() == c.width(m), ErrorCode::ShapeMismatch,
              "patient " + p.id + ": " + std::string(name(m)) + " width " +
                  std::to_string(p.bag(m)->width()) + " != " + std::to_string(c.width(m)));
    }
  }
  for (std::size_t i = 1; i < c.bin_edges.size(); ++i)
    require(c.bin_edges[i - 1] < c.bin_edges[i], ErrorCode::InvalidArgument,
            "bin edges must be strictly ascending");
}

// ---------------------------------------------------------------------------
// Label discretization

struct Discretization {
  std::vector<double> edges;
  std::vector<int> intervals;  // 1-based, one per input time
};

/// 1 + number of edges strictly below t
inline int assign_interval(std::span<const double> edges, double t) {
  return 1 + static_cast<int>(std::count_if(edges.begin(), edges.end(),
                                            [t](double e) { return e < t; }));
}

/// Linear-interpolation quantile of an ascending sample.
inline double quantile_sorted(std::span<const double> sorted, double p) {
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// Edges are the j/I_t quantiles (j = 1..I_t-1) of the uncensored times;
/// every patient, censored or not, is then binned against them.
inline Discretization discretize_times(std::span<const double> times,
                                       std::span<const int> censorship, int n_intervals) {
  require(times.size() == censorship.size(), ErrorCode::ShapeMismatch,
          "discretize_times: time/censorship count");
  require(n_intervals >= 2, ErrorCode::InvalidArgument, "discretize_times: I_t must be >= 2");
  std::vector<double> events;
  for (std::size_t i = 0; i < times.size(); ++i) {
    require(times[i] > 0.0 && std::isfinite(times[i]), ErrorCode::InvalidArgument,
            "discretize_times: nonpositive or non-finite time at index " + std::to_string(i));
    if (censorship[i] == 0) events.push_back(times[i]);
  }
  require(events.size() >= static_cast<std::size_t>(n_intervals), ErrorCode::InvalidArgument,
          "discretize_times: " + std::to_string(events.size()) +
              " uncensored patients, need at least I_t = " + std::to_string(n_intervals));
  std::sort(events.begin(), events.end());

  Discretization d;
  for (int j = 1; j < n_intervals; ++j)
    d.edges.push_back(quantile_sorted(events, static_cast<double>(j) / n_intervals));
  // Ties among event times can produce repeated quantiles.
  for (std::size_t j = 1; j < d.edges.size(); ++j)
    require(d.edges[j - 1] < d.edges[j], ErrorCode::InvalidArgument,
            "discretize_times: degenerate bin edges (too many tied event times)");
  d.intervals.reserve(times.size());
  for (double t : times) d.intervals.push_back(assign_interval(d.edges, t));
  return d;
}

/// Recomputes bin edges and every patient's interval and class id.
inline void discretize_times(Cohort& cohort, int n_intervals) {
  std::vector<double> times;
  std::vector<int> cens;
  for (const auto& p : cohort.patients) {
    times.push_back(p.label.time_months);
    cens.push_back(p.label.censorship);
  }
  const auto d = discretize_times(times, cens, n_intervals);
  cohort.bin_edges = d.edges;
  cohort.n_intervals = n_intervals;
  for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
    auto& y = cohort.patients[i].label;
    y.interval = d.intervals[i];
    y.class_id = class_id_for(y.interval, y.censorship, n_intervals);
  }
}

// ---------------------------------------------------------------------------
// Missing-modality masks

struct MissingCombo {
  double pathology_rate = 0.0;  // percent
  double genomics_rate = 0.0;

  std::string label() const {
    auto fmt = [](double r) {
      return r == std::floor(r) ? std::to_string(static_cast<long long>(r)) : std::to_string(r);
    };
    return fmt(pathology_rate) + "-" + fmt(genomics_rate);
  }
  friend bool operator==(const MissingCombo&, const MissingCombo&) = default;
};

/// The five training-time missing-rate combinations (60% total).
inline constexpr std::array<MissingCombo, 5> kGridCombos{{
    {0, 60}, {20, 40}, {30, 30}, {40, 20}, {60, 0}}};

struct MissingMask {
  std::set<std::string> drop_pathology;
  std::set<std::string> drop_genomics;
  MissingCombo combo;

  bool drops(const std::string& id, Modality m) const {
    const auto& s = m == Modality::Pathology ? drop_pathology : drop_genomics;
    return s.count(id) != 0;
  }
};

// round half away from zero
inline std::size_t mask_count(double rate, std::size_t n) {
  return static_cast<std::size_t>(std::llround(rate * static_cast<double>(n) / 100.0));
}

inline MissingMask build_missing_mask(std::span<const std::string> ids, MissingCombo combo,
                                      std::uint64_t seed) {
  require(combo.pathology_rate >= 0 && combo.genomics_rate >= 0, ErrorCode::InvalidArgument,
          "missing rates must be nonnegative");
  require(combo.pathology_rate + combo.genomics_rate <= 100.0, ErrorCode::InvalidArgument,
          "missing rates sum to more than 100%: " + combo.label());
  const auto n = ids.size();
  const auto np = mask_count(combo.pathology_rate, n);
  const auto ng = mask_count(combo.genomics_rate, n);
  // Rounding both counts up can overshoot by one when the rates sum to 100.
  require(np + ng <= n, ErrorCode::InvalidArgument,
          "missing counts exceed population for combo " + combo.label());

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  MissingMask mask;
  mask.combo = combo;
  for (std::size_t i = 0; i < np; ++i) mask.drop_pathology.insert(ids[order[i]]);
  for (std::size_t i = np; i < np + ng; ++i) mask.drop_genomics.insert(ids[order[i]]);
  return mask;
}

/// Population given by size only; ids are "0".."n-1".
inline MissingMask build_missing_mask(std::size_t n, MissingCombo combo, std::uint64_t seed) {
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = std::to_string(i);
  return build_missing_mask(ids, combo, seed);
}

/// Copy of the selected patients with masked modalities removed.
inline Cohort apply_mask(const Cohort& cohort, std::span<const std::size_t> indices,
                         const MissingMask& mask) {
  Cohort out;
  out.bin_edges = cohort.bin_edges;
  out.n_intervals = cohort.n_intervals;
  out.d_pathology = cohort.d_pathology;
  out.d_genomics = cohort.d_genomics;
  for (auto i : indices) {
    Patient p = cohort.patients[i];
    if (mask.drops(p.id, Modality::Pathology)) p.pathology.reset();
    if (mask.drops(p.id, Modality::Genomics)) p.genomics.reset();
    out.patients.push_back(std::move(p));
  }
  return out;
}

inline Cohort subset(const Cohort& cohort, std::span<const std::size_t> indices) {
  return apply_mask(cohort, indices, MissingMask{});
}

// ---------------------------------------------------------------------------
// Synthetic cohorts

struct SynthConfig {
  int n_patients = 200;
  int bag_size_pathology = 64;
  int bag_size_genomics = 32;
  int d_pathology = 16;
  int d_genomics = 16;
  double informative_fraction = 0.25;
  double signal_strength = 2.0;
  double censor_rate = 0.3;
  std::uint64_t seed = 0;
  int n_intervals = 4;
};

inline void validate(const SynthConfig& c) {
  require(c.n_patients > 0 && c.bag_size_pathology > 0 && c.bag_size_genomics > 0 &&
              c.d_pathology > 0 && c.d_genomics > 0,
          ErrorCode::InvalidArgument, "synth: sizes must be positive");
  require(c.informative_fraction > 0.0 && c.informative_fraction <= 1.0,
          ErrorCode::InvalidArgument, "synth: informative_fraction must lie in (0, 1]");
  require(c.signal_strength >= 0.0 && std::isfinite(c.signal_strength),
          ErrorCode::InvalidArgument, "synth: signal_strength must be >= 0");
  require(c.censor_rate >= 0.0 && c.censor_rate < 1.0, ErrorCode::InvalidArgument,
          "synth: censor_rate must lie in [0, 1)");
  require(c.n_intervals >= 2, ErrorCode::InvalidArgument, "synth: n_intervals must be >= 2");
}

namespace synth_detail {

inline constexpr double kBaseRatePerMonth = 1.0 / 24.0;
inline constexpr double kRiskAmplitude = 1.5;   // informative mean along the risk direction
inline constexpr double kPrivateOffset = 1.0;   // modality-specific mean shift
inline constexpr double kMinTime = 1e-3;

inline Eigen::VectorXd unit_gaussian(std::mt19937_64& rng, Eigen::Index d) {
  std::normal_distribution<double> n01;
  Eigen::VectorXd v(d);
  for (Eigen::Index i = 0; i < d; ++i) v(i) = n01(rng);
  return v / v.norm();
}

struct ModalityGeometry {
  Eigen::VectorXd risk_direction;
  Eigen::VectorXd private_offset;
};

inline ModalityGeometry geometry(std::mt19937_64& rng, Eigen::Index d) {
  ModalityGeometry g;
  g.risk_direction = unit_gaussian(rng, d);
  Eigen::VectorXd o = unit_gaussian(rng, d);
  if (d > 1) {
    o -= o.dot(g.risk_direction) * g.risk_direction;
    o /= o.norm();
  }
  g.private_offset = kPrivateOffset * o;
  return g;
}

inline MatD draw_bag(std::mt19937_64& rng, const ModalityGeometry& geo, int m, double rho,
                     double latent) {
  const auto d = geo.risk_direction.size();
  std::normal_distribution<double> n01;
  MatD x(m, d);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = n01(rng);
  const auto n_inf = static_cast<int>(std::llround(rho * m));
  std::vector<int> rows(static_cast<std::size_t>(m));
  std::iota(rows.begin(), rows.end(), 0);
  std::shuffle(rows.begin(), rows.end(), rng);
  const Eigen::VectorXd mean =
      kRiskAmplitude * (2.0 * latent - 1.0) * geo.risk_direction + geo.private_offset;
  for (int k = 0; k < n_inf; ++k) x.row(rows[static_cast<std::size_t>(k)]) += mean.transpose();
  return x;
}

}  // namespace synth_detail

struct SyntheticCohort {
  Cohort cohort;
  std::vector<double> latent_risk;  // r per patient, for oracle probes
};

/// Latent risk r ~ U(0,1) per patient. Event times are exponential with a
/// log-rate of signal_strength * z, z = sqrt(12) (r - 1/2) the unit-variance
/// standardization of r. Both modalities see r through their informative
/// instances; each also carries a fixed private mean offset.
inline SyntheticCohort generate_synthetic_with_latent(const SynthConfig& cfg) {
  validate(cfg);
  using namespace synth_detail;
  std::mt19937_64 rng(cfg.seed);
  const auto geo_p = geometry(rng, cfg.d_pathology);
  const auto geo_g = geometry(rng, cfg.d_genomics);

  SyntheticCohort out;
  Cohort& c = out.cohort;
  c.d_pathology = cfg.d_pathology;
  c.d_genomics = cfg.d_genomics;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int n = 0; n < cfg.n_patients; ++n) {
    Patient p;
    char id[32];
    std::snprintf(id, sizeof id, "SYN-%04d", n);
    p.id = id;
    const double r = u01(rng);
    const double z = std::sqrt(12.0) * (r - 0.5);
    const double rate = kBaseRatePerMonth * std::exp(cfg.signal_strength * z);
    double t = std::exponential_distribution<double>(rate)(rng);
    int cens = 0;
    if (u01(rng) < cfg.censor_rate) {
      cens = 1;
      t *= u01(rng);
    }
    p.label.time_months = std::max(t, kMinTime);
    p.label.censorship = cens;
    p.pathology = Bag{p.id, Modality::Pathology,
                      draw_bag(rng, geo_p, cfg.bag_size_pathology, cfg.informative_fraction, r)};
    p.genomics = Bag{p.id, Modality::Genomics,
                     draw_bag(rng, geo_g, cfg.bag_size_genomics, cfg.informative_fraction, r)};
    c.patients.push_back(std::move(p));
    out.latent_risk.push_back(r);
  }
  discretize_times(c, cfg.n_intervals);
  return out;
}

inline Cohort generate_synthetic_cohort(const SynthConfig& cfg) {
  return generate_synthetic_with_latent(cfg).cohort;
}

// ---------------------------------------------------------------------------
// Cross-validation folds

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// k disjoint test folds covering every index, sizes within one of each other.
/// Stratified by class id when every class has at least k members.
inline std::vector<Fold> kfold_split(const Cohort& cohort, int k, std::uint64_t seed) {
  require(k >= 2, ErrorCode::InvalidArgument, "kfold_split: k must be >= 2");
  const auto n = cohort.size();
  require(n >= static_cast<std::size_t>(k), ErrorCode::InvalidArgument,
          "kfold_split: " + std::to_string(n) + " patients < k = " + std::to_string(k));

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n; ++i) by_class[cohort.patients[i].label.class_id].push_back(i);
  const bool stratify = std::all_of(by_class.begin(), by_class.end(), [k](const auto& kv) {
    return kv.second.size() >= static_cast<std::size_t>(k);
  });

  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> groups;
  if (stratify) {
    for (auto& [cls, members] : by_class) groups.push_back(members);
  } else {
    spdlog::warn("kfold_split: some class has fewer than {} members; folds are unstratified", k);
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    groups.push_back(std::move(all));
  }

  std::vector<std::vector<std::size_t>> test(static_cast<std::size_t>(k));
  std::size_t dealt = 0;
  for (auto& g : groups) {
    std::shuffle(g.begin(), g.end(), rng);
    for (auto i : g) test[dealt++ % static_cast<std::size_t>(k)].push_back(i);
  }

  std::vector<Fold> folds(static_cast<std::size_t>(k));
  for (std::size_t f = 0; f < folds.size(); ++f) {
    std::sort(test[f].begin(), test[f].end());
    std::vector<char> in_test(n, 0);
    for (auto i : test[f]) in_test[i] = 1;
    for (std::size_t i = 0; i < n; ++i)
      if (!in_test[i]) folds[f].train.push_back(i);
    folds[f].test = std::move(test[f]);
  }
  return folds;
}

}  // namespace dispro
