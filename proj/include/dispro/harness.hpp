// SPDX-License-Identifier: Apache-2.0
// Fold pipeline, evaluation scenarios, the combo x scenario x fold grid,
// metric reports and attention dumps.
#pragma once

#include "dispro/cohort_io.hpp"
#include "dispro/config.hpp"
#include "dispro/state.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dispro {

/// Keeps freed autodiff buffers in the heap instead of returning them to the
/// OS after every step. Training spends a large share of its time in page
/// faults otherwise. No-op outside glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

// ---------------------------------------------------------------------------
// Test scenarios

enum class Scenario : std::uint8_t { PathologyOnly = 0, GenomicsOnly = 1, Complete = 2 };

inline constexpr std::array<Scenario, 3> kScenarios{Scenario::PathologyOnly,
                                                    Scenario::GenomicsOnly, Scenario::Complete};

inline constexpr std::string_view label(Scenario s) {
  switch (s) {
    case Scenario::PathologyOnly: return "pathology-only";
    case Scenario::GenomicsOnly: return "genomics-only";
    case Scenario::Complete: return "complete";
  }
  return "unknown";
}

inline Scenario parse_scenario(std::string_view s) {
  if (s == "p-only" || s == "pathology-only") return Scenario::PathologyOnly;
  if (s == "g-only" || s == "genomics-only") return Scenario::GenomicsOnly;
  if (s == "complete") return Scenario::Complete;
  throw Error(ErrorCode::InvalidArgument,
              "unknown scenario '" + std::string(s) + "' (p-only, g-only, complete)");
}

/// The patient as seen under a scenario, or nullopt when it lacks a modality
/// the scenario needs.
inline std::optional<Patient> restrict_to(const Patient& p, Scenario s) {
  const bool need_p = s != Scenario::GenomicsOnly;
  const bool need_g = s != Scenario::PathologyOnly;
  if ((need_p && !p.pathology) || (need_g && !p.genomics)) return std::nullopt;
  Patient out = p;
  if (!need_p) out.pathology.reset();
  if (!need_g) out.genomics.reset();
  return out;
}

// ---------------------------------------------------------------------------
// Data and fold pipeline

inline Cohort load_cohort(const RunConfig& cfg) {
  if (!cfg.manifest.empty()) return load_manifest(cfg.manifest, cfg.n_intervals);
  SynthConfig s = cfg.synth;
  s.n_intervals = cfg.n_intervals;
  return generate_synthetic_cohort(s);
}

inline std::vector<std::string> patient_ids(const Cohort& c) {
  std::vector<std::string> ids;
  ids.reserve(c.size());
  for (const auto& p : c.patients) ids.push_back(p.id);
  return ids;
}

struct FoldData {
  Cohort train;         // complete training patients
  Cohort masked_train;  // training patients with the mask applied
  Cohort test;
  MissingMask mask;
};

inline FoldData fold_data(const Cohort& cohort, const Fold& fold, MissingCombo combo,
                          std::uint64_t seed) {
  FoldData d;
  d.train = subset(cohort, fold.train);
  d.test = subset(cohort, fold.test);
  d.mask = build_missing_mask(patient_ids(d.train), combo, seed);
  std::vector<std::size_t> all(d.train.size());
  std::iota(all.begin(), all.end(), 0);
  d.masked_train = apply_mask(d.train, all, d.mask);
  return d;
}

inline Stage1Config stage1_config(const RunConfig& cfg, std::uint64_t seed) {
  Stage1Config c = cfg.stage1;
  c.seed = seed;
  return c;
}

inline Stage2Config stage2_config(const RunConfig& cfg, std::uint64_t seed) {
  Stage2Config c = cfg.stage2;
  c.seed = seed;
  return c;
}

/// The run's language-model stand-in; identical for every command given the seed.
inline TransformerEncoder<float> make_encoder(const RunConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0xe2c0de5ull);
  return TransformerEncoder<float>(cfg.encoder, rng);
}

/// Untrained stage-1 result with the right shapes, to be filled from a checkpoint.
inline Stage1Result<float> stage1_skeleton(const RunConfig& cfg, const Cohort& cohort, Modality m,
                                           std::uint64_t seed) {
  Stage1Result<float> r;
  r.model = init_unipro<float>(m, cohort, make_encoder(cfg, seed), stage1_config(cfg, seed));
  r.reps = {Mat<float>::Zero(2 * cohort.n_intervals, cfg.encoder.model_dim), false};
  return r;
}

struct TrainedFold {
  Stage1Result<float> s1_p, s1_g;
  Stage2Result<float> s2;
};

inline TrainedFold train_fold(const RunConfig& cfg, const FoldData& d, std::uint64_t seed) {
  const auto enc = make_encoder(cfg, seed);
  const auto c1 = stage1_config(cfg, seed);
  TrainedFold t;
  t.s1_p = train_stage1(d.masked_train, Modality::Pathology, enc, c1);
  t.s1_g = train_stage1(d.masked_train, Modality::Genomics, enc, c1);
  t.s2 = train_stage2(d.train, d.mask, t.s1_p, t.s1_g, stage2_config(cfg, seed));
  return t;
}

struct Evaluation {
  std::optional<double> cindex;  // nullopt: no comparable pair
  std::size_t n_test = 0;
};

inline Evaluation evaluate(const MultiPro<float>& model, const Cohort& test, Scenario s) {
  std::vector<double> risk;
  std::vector<SurvivalLabel> labels;
  for (const auto& p : test.patients) {
    const auto view = restrict_to(p, s);
    if (!view) continue;
    risk.push_back(infer(model, *view).risk);
    labels.push_back(p.label);
  }
  return {survival::concordance_index(risk, labels), risk.size()};
}

// ---------------------------------------------------------------------------
// Metric reports

struct MetricRecord {
  std::string scenario;
  int fold = 0;
  std::optional<double> cindex;
  std::size_t n_test = 0;
  std::uint64_t seed = 0;
  std::string combo;
};

struct StageLosses {
  std::string combo;
  std::uint64_t seed = 0;
  int fold = 0;
  double stage1_pathology = 0.0;
  double stage1_genomics = 0.0;
  double stage2_total = 0.0;
};

inline nlohmann::ordered_json to_json(const MetricRecord& r) {
  nlohmann::ordered_json j;
  j["scenario"] = r.scenario;
  j["fold"] = r.fold;
  j["cindex"] = r.cindex ? nlohmann::ordered_json(*r.cindex) : nlohmann::ordered_json(nullptr);
  j["n_test"] = r.n_test;
  j["seed"] = r.seed;
  j["combo"] = r.combo;
  return j;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population std over the fold values
  std::size_t n = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  m.n = v.size();
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  for (double x : v) m.std += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(m.std / static_cast<double>(v.size()));
  return m;
}

inline double final_loss(const std::vector<double>& epochs, double initial) {
  return epochs.empty() ? initial : epochs.back();
}

struct MetricsReport {
  std::vector<MetricRecord> records;
  std::vector<StageLosses> losses;
  double wall_clock_seconds = 0.0;

  /// One JSON object per scenario-fold. Holds no timing, so repeated runs
  /// produce identical bytes.
  std::string jsonl() const {
    std::string out;
    for (const auto& r : records) out += to_json(r).dump() + "\n";
    return out;
  }

  /// Mean +- std of the C-index over folds for each combo and scenario.
  std::map<std::pair<std::string, std::string>, MeanStd> summary() const {
    std::map<std::pair<std::string, std::string>, std::vector<double>> by;
    for (const auto& r : records)
      if (r.cindex) by[{r.combo, r.scenario}].push_back(*r.cindex);
    std::map<std::pair<std::string, std::string>, MeanStd> out;
    for (const auto& [k, v] : by) out[k] = mean_std(v);
    return out;
  }

  std::string table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "missing(P-G)  " << std::setw(16) << std::left << "scenario" << std::right
       << "  c-index mean +- std  (folds)\n";
    std::vector<std::string> combo_order;
    for (const auto& r : records)
      if (std::find(combo_order.begin(), combo_order.end(), r.combo) == combo_order.end())
        combo_order.push_back(r.combo);
    const auto s = summary();
    for (const auto& combo : combo_order)
      for (Scenario sc : kScenarios) {
        const auto it = s.find({combo, std::string(label(sc))});
        if (it == s.end()) continue;
        os << std::setw(12) << std::left << combo << "  " << std::setw(16) << label(sc)
           << std::right << "  " << it->second.mean << " +- " << it->second.std << "  ("
           << it->second.n << ")\n";
      }
    if (!losses.empty()) {
      os << "\nfinal losses: combo seed fold | stage1 P NLL, stage1 G NLL, stage2 total\n";
      for (const auto& l : losses)
        os << l.combo << " " << l.seed << " " << l.fold << " | " << l.stage1_pathology << ", "
           << l.stage1_genomics << ", " << l.stage2_total << "\n";
    }
    os << "\nwall clock: " << std::setprecision(1) << wall_clock_seconds << " s\n";
    return os.str();
  }
};

/// Every combo x fold x scenario for every seed. Records come out in seed,
/// combo, fold, scenario order.
inline MetricsReport run_grid(const RunConfig& cfg, const Cohort& cohort,
                              const std::function<void(const MetricRecord&)>& on_record = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  MetricsReport rep;
  for (const auto seed : cfg.seeds) {
    const auto folds = kfold_split(cohort, cfg.folds, seed);
    for (const auto& combo : cfg.combos)
      for (int f = 0; f < cfg.folds; ++f) {
        spdlog::info("grid: seed {} combo {} fold {}/{}", seed, combo.label(), f + 1, cfg.folds);
        const auto d = fold_data(cohort, folds[static_cast<std::size_t>(f)], combo, seed);
        const auto t = train_fold(cfg, d, seed);
        rep.losses.push_back({combo.label(), seed, f,
                              final_loss(t.s1_p.epoch_losses, t.s1_p.initial_loss),
                              final_loss(t.s1_g.epoch_losses, t.s1_g.initial_loss),
                              t.s2.epochs.empty() ? t.s2.initial.total : t.s2.epochs.back().total});
        for (Scenario sc : kScenarios) {
          const auto e = evaluate(t.s2.model, d.test, sc);
          rep.records.push_back({std::string(label(sc)), f, e.cindex, e.n_test, seed, combo.label()});
          if (on_record) on_record(rep.records.back());
        }
      }
  }
  rep.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// ---------------------------------------------------------------------------
// Attention dump

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size() && !a.empty(), ErrorCode::ShapeMismatch,
          "cosine: vectors differ in length");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  require(aa > 0 && bb > 0, ErrorCode::InvalidArgument, "cosine: zero vector");
  return ab / std::sqrt(aa * bb);
}

struct AttentionDump {
  std::string patient;
  std::array<std::vector<double>, 3> mass;  // indexed by Scenario; 1 + K_p + K_g values each
  std::array<double, 3> cosine_to_complete{};
};

/// Attention received per fusion position for the same patient under each
/// availability scenario, averaged over heads and layers.
inline AttentionDump dump_attention(const MultiPro<float>& model, const Patient& patient) {
  require(patient.pathology && patient.genomics, ErrorCode::InvalidArgument,
          "dump-attention: patient " + patient.id + " must have both modalities");
  AttentionDump d;
  d.patient = patient.id;
  for (Scenario s : kScenarios) {
    const auto inf = infer(model, *restrict_to(patient, s), true);
    d.mass[static_cast<std::size_t>(s)] = inf.attention.received_mass();
  }
  const auto& full = d.mass[static_cast<std::size_t>(Scenario::Complete)];
  for (Scenario s : kScenarios)
    d.cosine_to_complete[static_cast<std::size_t>(s)] = cosine(d.mass[static_cast<std::size_t>(s)], full);
  return d;
}

inline nlohmann::ordered_json to_json(const AttentionDump& d) {
  nlohmann::ordered_json j;
  j["patient"] = d.patient;
  for (Scenario s : kScenarios) {
    nlohmann::ordered_json e;
    e["mass"] = d.mass[static_cast<std::size_t>(s)];
    e["cosine_to_complete"] = d.cosine_to_complete[static_cast<std::size_t>(s)];
    j["scenarios"][std::string(label(s))] = e;
  }
  return j;
}

}  // namespace dispro
