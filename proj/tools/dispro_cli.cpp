// SPDX-License-Identifier: Apache-2.0
//
// dispro: command-line harness.
//
//   dispro [--config FILE] [--seed N] [--out DIR] [--manifest PATH] <command> ...
//
//   gen-synth                          write a synthetic manifest and feature files to OUT/data
//   train-stage1 --modality p|g        train one unimodal prompt model -> OUT/stage1_<m>.ckpt
//   train-stage2                       train the fusion stage            -> OUT/stage2.ckpt
//   eval --scenario p-only|g-only|complete
//   dump-attention --patient ID        attention mass per scenario       -> OUT/attention_<ID>.json
//   grid                               combos x scenarios x folds        -> OUT/metrics.jsonl, metrics.txt
//
// Any failure prints one JSON error record on stderr and exits nonzero.
#include "dispro/dispro.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace dispro;

namespace {

struct Options {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string manifest;
  std::string log_level = "info";
  std::string modality;
  std::string scenario;
  std::string patient;
};

int fail(std::string_view command, std::string_view code, const std::string& message, int status) {
  nlohmann::ordered_json j;
  j["error"] = code;
  j["command"] = command;
  j["message"] = message;
  std::cerr << j.dump() << std::endl;
  return status;
}

RunConfig resolve(const Options& o, bool seed_sets_cohort) {
  RunConfig cfg;
  if (!o.config_file.empty()) load_config_file(cfg, o.config_file);
  apply_env_overrides(cfg);
  if (!o.out.empty()) cfg.out = o.out;
  if (!o.manifest.empty()) cfg.manifest = o.manifest;
  if (o.seed) {
    cfg.seeds = {*o.seed};
    if (seed_sets_cohort) cfg.synth.seed = *o.seed;
  }
  validate(cfg);
  return cfg;
}

Modality parse_modality(const std::string& s) {
  if (s == "p" || s == "pathology") return Modality::Pathology;
  if (s == "g" || s == "genomics") return Modality::Genomics;
  throw Error(ErrorCode::InvalidArgument, "unknown modality '" + s + "' (p or g)");
}

fs::path stage1_path(const RunConfig& cfg, Modality m) {
  return fs::path(cfg.out) / ("stage1_" + std::string(tag(m)) + ".ckpt");
}

fs::path stage2_path(const RunConfig& cfg) { return fs::path(cfg.out) / "stage2.ckpt"; }

void require_file(const fs::path& p, const std::string& hint) {
  require(fs::exists(p), ErrorCode::State, "missing " + p.string() + " (" + hint + ")");
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + p.string());
  os << text;
  require(static_cast<bool>(os), ErrorCode::Io, "write failed: " + p.string());
}

void emit(const nlohmann::ordered_json& j) { std::cout << j.dump() << std::endl; }

FoldData single_fold(const RunConfig& cfg, const Cohort& cohort) {
  const auto seed = cfg.seeds.front();
  const auto folds = kfold_split(cohort, cfg.folds, seed);
  return fold_data(cohort, folds[static_cast<std::size_t>(cfg.fold)], cfg.train_combo, seed);
}

MultiPro<float> load_trained(const RunConfig& cfg, const Cohort& cohort) {
  const auto path = stage2_path(cfg);
  require_file(path, "no trained stage-2 state; run train-stage2 first");
  const auto seed = cfg.seeds.front();
  auto s1_p = stage1_skeleton(cfg, cohort, Modality::Pathology, seed);
  auto s1_g = stage1_skeleton(cfg, cohort, Modality::Genomics, seed);
  s1_p.reps.frozen_after_stage1 = s1_g.reps.frozen_after_stage1 = true;
  auto model = init_multipro(s1_p, s1_g, stage2_config(cfg, seed));
  load_stage2(model, path);
  return model;
}

// --- commands -------------------------------------------------------------

int gen_synth(const RunConfig& cfg) {
  require(cfg.manifest.empty(), ErrorCode::InvalidArgument,
          "gen-synth writes a synthetic cohort; do not pass a manifest");
  const auto cohort = load_cohort(cfg);
  fs::create_directories(cfg.out);
  const auto manifest = save_manifest(cohort, fs::path(cfg.out) / "data");
  nlohmann::ordered_json j;
  j["command"] = "gen-synth";
  j["manifest"] = manifest.string();
  j["n_patients"] = cohort.size();
  j["bin_edges"] = cohort.bin_edges;
  emit(j);
  return 0;
}

int train_stage1_cmd(const RunConfig& cfg, Modality m) {
  const auto cohort = load_cohort(cfg);
  const auto d = single_fold(cfg, cohort);
  const auto seed = cfg.seeds.front();
  const auto r = train_stage1(d.masked_train, m, make_encoder(cfg, seed), stage1_config(cfg, seed));
  fs::create_directories(cfg.out);
  save_stage1(r, stage1_path(cfg, m));
  nlohmann::ordered_json j;
  j["command"] = "train-stage1";
  j["modality"] = name(m);
  j["seed"] = seed;
  j["fold"] = cfg.fold;
  j["combo"] = cfg.train_combo.label();
  j["initial_nll"] = r.initial_loss;
  j["epoch_nll"] = r.epoch_losses;
  j["checkpoint"] = stage1_path(cfg, m).string();
  emit(j);
  return 0;
}

int train_stage2_cmd(const RunConfig& cfg) {
  for (Modality m : {Modality::Pathology, Modality::Genomics})
    require_file(stage1_path(cfg, m), "run train-stage1 --modality " + std::string(tag(m)));
  const auto cohort = load_cohort(cfg);
  const auto d = single_fold(cfg, cohort);
  const auto seed = cfg.seeds.front();
  auto s1_p = stage1_skeleton(cfg, cohort, Modality::Pathology, seed);
  auto s1_g = stage1_skeleton(cfg, cohort, Modality::Genomics, seed);
  load_stage1(s1_p, stage1_path(cfg, Modality::Pathology));
  load_stage1(s1_g, stage1_path(cfg, Modality::Genomics));
  const auto r = train_stage2(d.train, d.mask, s1_p, s1_g, stage2_config(cfg, seed));
  save_stage2(r.model, stage2_path(cfg));
  auto report = [](const LossReport& l) {
    nlohmann::ordered_json j;
    j["total"] = l.total;
    j["surv_cls"] = l.surv_cls;
    j["ud_p"] = l.ud_p;
    j["ud_g"] = l.ud_g;
    return j;
  };
  nlohmann::ordered_json j;
  j["command"] = "train-stage2";
  j["seed"] = seed;
  j["fold"] = cfg.fold;
  j["combo"] = cfg.train_combo.label();
  j["initial"] = report(r.initial);
  j["final"] = report(r.epochs.empty() ? r.initial : r.epochs.back());
  j["epoch_total"] = nlohmann::ordered_json::array();
  for (const auto& e : r.epochs) j["epoch_total"].push_back(e.total);
  j["checkpoint"] = stage2_path(cfg).string();
  emit(j);
  return 0;
}

int eval_cmd(const RunConfig& cfg, Scenario s) {
  const auto cohort = load_cohort(cfg);
  const auto model = load_trained(cfg, cohort);
  const auto d = single_fold(cfg, cohort);
  const auto e = evaluate(model, d.test, s);
  const MetricRecord rec{std::string(label(s)), cfg.fold, e.cindex, e.n_test, cfg.seeds.front(),
                         cfg.train_combo.label()};
  const auto line = to_json(rec).dump() + "\n";
  write_text(fs::path(cfg.out) / ("eval_" + std::string(label(s)) + ".jsonl"), line);
  std::cout << line << std::flush;
  return 0;
}

int dump_attention_cmd(const RunConfig& cfg, const std::string& id) {
  const auto cohort = load_cohort(cfg);
  const auto it = std::find_if(cohort.patients.begin(), cohort.patients.end(),
                               [&](const Patient& p) { return p.id == id; });
  require(it != cohort.patients.end(), ErrorCode::InvalidArgument, "no patient with id " + id);
  const auto model = load_trained(cfg, cohort);
  const auto j = to_json(dump_attention(model, *it));
  write_text(fs::path(cfg.out) / ("attention_" + id + ".json"), j.dump(2) + "\n");
  emit(j);
  return 0;
}

int grid_cmd(const RunConfig& cfg) {
  const auto cohort = load_cohort(cfg);
  fs::create_directories(cfg.out);
  const auto rep = run_grid(cfg, cohort);
  write_text(fs::path(cfg.out) / "metrics.jsonl", rep.jsonl());
  write_text(fs::path(cfg.out) / "metrics.txt", rep.table());
  std::cout << rep.table() << std::flush;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  spdlog::set_default_logger(spdlog::stderr_color_st("dispro"));

  CLI::App app{"DisPro survival prediction under missing modalities"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config_file, "key = value configuration file");
  app.add_option("--seed", o.seed, "run seed (gen-synth: cohort seed)");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--manifest", o.manifest, "cohort manifest (default: synthetic cohort)");
  app.add_option("--log-level", o.log_level, "trace, debug, info, warn, error, off");

  auto* gen = app.add_subcommand("gen-synth", "write a synthetic cohort");
  auto* s1 = app.add_subcommand("train-stage1", "train one unimodal prompt model");
  s1->add_option("--modality", o.modality, "p or g")->required();
  auto* s2 = app.add_subcommand("train-stage2", "train the fusion stage");
  auto* ev = app.add_subcommand("eval", "C-index on the held-out fold");
  ev->add_option("--scenario", o.scenario, "p-only, g-only or complete")->required();
  auto* dump = app.add_subcommand("dump-attention", "attention mass per availability scenario");
  dump->add_option("--patient", o.patient, "patient id")->required();
  auto* grid = app.add_subcommand("grid", "all combos x scenarios x folds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("", "usage", e.what(), 2);
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    spdlog::set_level(spdlog::level::from_str(o.log_level));
    const RunConfig cfg = resolve(o, gen->parsed());
    if (gen->parsed()) return gen_synth(cfg);
    if (s1->parsed()) return train_stage1_cmd(cfg, parse_modality(o.modality));
    if (s2->parsed()) return train_stage2_cmd(cfg);
    if (ev->parsed()) return eval_cmd(cfg, parse_scenario(o.scenario));
    if (dump->parsed()) return dump_attention_cmd(cfg, o.patient);
    if (grid->parsed()) return grid_cmd(cfg);
  } catch (const Error& e) {
    return fail(command, to_string(e.code()), e.what(), 1);
  } catch (const std::exception& e) {
    return fail(command, "internal", e.what(), 1);
  }
  return 0;
}
