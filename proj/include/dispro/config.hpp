// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a flat `key = value` text file with `#` comments.
// Every key can be overridden from the environment as DISPRO_<KEY>, upper
// case with dots replaced by underscores (stage1.epochs -> DISPRO_STAGE1_EPOCHS).
#pragma once

#include "dispro/cohort.hpp"
#include "dispro/encoders.hpp"
#include "dispro/multipro.hpp"
#include "dispro/unipro.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace dispro {

struct RunConfig {
  std::string manifest;          // empty: synthetic cohort from `synth`
  std::string out = "dispro_out";
  SynthConfig synth;
  EncoderConfig encoder;
  int n_intervals = FullScale::kIntervals;
  Stage1Config stage1;
  Stage2Config stage2;
  int folds = FullScale::kFolds;
  int fold = 0;                  // fold used by the single-step commands
  MissingCombo train_combo{30, 30};
  std::vector<MissingCombo> combos{kGridCombos.begin(), kGridCombos.end()};
  std::vector<std::uint64_t> seeds{0};
};

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class I>
I parse_int(const std::string& key, const std::string& v) {
  I out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  require(ec == std::errc{} && ptr == v.data() + v.size(), ErrorCode::InvalidArgument,
          "config: " + key + " expects an integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == v.size() && !v.empty(), ErrorCode::InvalidArgument,
          "config: " + key + " expects a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw Error(ErrorCode::InvalidArgument, "config: " + key + " expects a boolean, got '" + v + "'");
}

// "30-30" or "30:30"
inline MissingCombo parse_combo(const std::string& key, const std::string& v) {
  const auto dash = v.find_first_of("-:");
  require(dash != std::string::npos, ErrorCode::InvalidArgument,
          "config: " + key + " expects P-G missing rates, got '" + v + "'");
  return {parse_double(key, trim(v.substr(0, dash))), parse_double(key, trim(v.substr(dash + 1)))};
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

template <class I, class F>
Setter int_field(F field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) {
    field(c) = parse_int<I>(k, v);
  };
}

template <class F>
Setter double_field(F field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) {
    field(c) = parse_double(k, v);
  };
}

template <class F>
Setter bool_field(F field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) {
    field(c) = parse_bool(k, v);
  };
}

// clang-format off
inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
    {"manifest", [](RunConfig& c, const std::string&, const std::string& v) { c.manifest = v; }},
    {"out", [](RunConfig& c, const std::string&, const std::string& v) { c.out = v; }},
    {"synth.n_patients", int_field<int>([](RunConfig& c) -> int& { return c.synth.n_patients; })},
    {"synth.bag_size_pathology", int_field<int>([](RunConfig& c) -> int& { return c.synth.bag_size_pathology; })},
    {"synth.bag_size_genomics", int_field<int>([](RunConfig& c) -> int& { return c.synth.bag_size_genomics; })},
    {"synth.d_pathology", int_field<int>([](RunConfig& c) -> int& { return c.synth.d_pathology; })},
    {"synth.d_genomics", int_field<int>([](RunConfig& c) -> int& { return c.synth.d_genomics; })},
    {"synth.informative_fraction", double_field([](RunConfig& c) -> double& { return c.synth.informative_fraction; })},
    {"synth.signal_strength", double_field([](RunConfig& c) -> double& { return c.synth.signal_strength; })},
    {"synth.censor_rate", double_field([](RunConfig& c) -> double& { return c.synth.censor_rate; })},
    {"synth.seed", int_field<std::uint64_t>([](RunConfig& c) -> std::uint64_t& { return c.synth.seed; })},
    {"n_intervals", int_field<int>([](RunConfig& c) -> int& { return c.n_intervals; })},
    {"encoder.model_dim", int_field<int>([](RunConfig& c) -> int& { return c.encoder.model_dim; })},
    {"encoder.n_layers", int_field<int>([](RunConfig& c) -> int& { return c.encoder.n_layers; })},
    {"encoder.n_heads", int_field<int>([](RunConfig& c) -> int& { return c.encoder.n_heads; })},
    {"encoder.mlp_ratio", int_field<int>([](RunConfig& c) -> int& { return c.encoder.mlp_ratio; })},
    {"encoder.max_seq_len", int_field<int>([](RunConfig& c) -> int& { return c.encoder.max_seq_len; })},
    {"encoder.vocab_size", int_field<int>([](RunConfig& c) -> int& { return c.encoder.vocab_size; })},
    {"encoder.trainable", bool_field([](RunConfig& c) -> bool& { return c.encoder.trainable_encoder; })},
    {"context_length", int_field<int>([](RunConfig& c) -> int& { return c.stage1.context_length; })},
    {"pool_k", [](RunConfig& c, const std::string& k, const std::string& v) {
       c.stage1.pool_k = c.stage2.pool_k = parse_int<int>(k, v); }},
    {"slots_pathology", int_field<int>([](RunConfig& c) -> int& { return c.stage2.slots_pathology; })},
    {"slots_genomics", int_field<int>([](RunConfig& c) -> int& { return c.stage2.slots_genomics; })},
    {"alpha1", double_field([](RunConfig& c) -> double& { return c.stage2.alpha1; })},
    {"alpha2", double_field([](RunConfig& c) -> double& { return c.stage2.alpha2; })},
    {"use_scoring", bool_field([](RunConfig& c) -> bool& { return c.stage2.use_scoring; })},
    {"lr", [](RunConfig& c, const std::string& k, const std::string& v) {
       c.stage1.lr = c.stage2.lr = parse_double(k, v); }},
    {"weight_decay", [](RunConfig& c, const std::string& k, const std::string& v) {
       c.stage1.weight_decay = c.stage2.weight_decay = parse_double(k, v); }},
    {"stage1.lr", double_field([](RunConfig& c) -> double& { return c.stage1.lr; })},
    {"stage2.lr", double_field([](RunConfig& c) -> double& { return c.stage2.lr; })},
    {"stage1.epochs", int_field<int>([](RunConfig& c) -> int& { return c.stage1.epochs; })},
    {"stage2.epochs", int_field<int>([](RunConfig& c) -> int& { return c.stage2.epochs; })},
    {"folds", int_field<int>([](RunConfig& c) -> int& { return c.folds; })},
    {"fold", int_field<int>([](RunConfig& c) -> int& { return c.fold; })},
    {"train_combo", [](RunConfig& c, const std::string& k, const std::string& v) {
       c.train_combo = parse_combo(k, v); }},
    {"combos", [](RunConfig& c, const std::string& k, const std::string& v) {
       c.combos.clear();
       for (const auto& item : split(v, ',')) c.combos.push_back(parse_combo(k, item)); }},
    {"seeds", [](RunConfig& c, const std::string& k, const std::string& v) {
       c.seeds.clear();
       for (const auto& item : split(v, ',')) c.seeds.push_back(parse_int<std::uint64_t>(k, item)); }},
  };
  return table;
}
// clang-format on

}  // namespace config_detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, s] : config_detail::setters()) out.push_back(k);
  return out;
}

inline std::string env_name(const std::string& key) {
  std::string out = "DISPRO_";
  for (char ch : key) out += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return out;
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = config_detail::setters();
  const auto it = table.find(key);
  require(it != table.end(), ErrorCode::InvalidArgument, "config: unknown key '" + key + "'");
  it->second(cfg, key, value);
}

/// Applies `key = value` lines in order onto cfg. `source` names the text in errors.
inline void parse_config_text(RunConfig& cfg, const std::string& text,
                              const std::string& source = "config") {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = config_detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(lineno);
    require(eq != std::string::npos, ErrorCode::InvalidArgument,
            where + ": expected key = value");
    try {
      set_config_value(cfg, config_detail::trim(body.substr(0, eq)),
                       config_detail::trim(body.substr(eq + 1)));
    } catch (const Error& e) {
      throw Error(e.code(), where + ": " + e.what());
    }
  }
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorCode::Io, "cannot open config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  parse_config_text(cfg, ss.str(), path);
}

/// Environment overrides. `getenv_fn` is injectable for tests.
inline void apply_env_overrides(RunConfig& cfg,
                                const std::function<const char*(const char*)>& getenv_fn =
                                    [](const char* n) { return std::getenv(n); }) {
  for (const auto& key : config_keys()) {
    const std::string var = env_name(key);
    if (const char* v = getenv_fn(var.c_str())) {
      try {
        set_config_value(cfg, key, config_detail::trim(v));
      } catch (const Error& e) {
        throw Error(e.code(), var + ": " + e.what());
      }
    }
  }
}

/// Checks every constraint the pipeline would otherwise hit later, so
/// commands can refuse before writing anything.
inline void validate(const RunConfig& c) {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidArgument, "config: " + m); };
  validate(c.encoder);
  if (c.manifest.empty()) {
    SynthConfig s = c.synth;
    s.n_intervals = c.n_intervals;
    validate(s);
  }
  if (c.out.empty()) fail("out must not be empty");
  if (c.n_intervals < 2) fail("n_intervals must be >= 2");
  if (c.stage1.context_length < 0) fail("context_length must be >= 0");
  if (c.stage1.pool_k < 1 || c.stage2.pool_k < 1) fail("pool_k must be >= 1");
  if (c.stage2.slots_pathology < 1 || c.stage2.slots_genomics < 1)
    fail("slots_pathology and slots_genomics must be >= 1");
  if (1 + c.stage2.slots_pathology + c.stage2.slots_genomics > c.encoder.max_seq_len)
    fail("1 + slots_pathology + slots_genomics exceeds encoder.max_seq_len");
  std::size_t longest = 0;
  for (const auto& n : class_names(c.n_intervals))
    longest = std::max(longest, tokenize_text(n, c.encoder.vocab_size).size());
  for (Modality m : {Modality::Pathology, Modality::Genomics}) {
    const auto len = 1 + static_cast<std::size_t>(c.stage1.context_length) +
                     tokenize_text(default_prefix(m), c.encoder.vocab_size).size() + longest;
    if (len > static_cast<std::size_t>(c.encoder.max_seq_len))
      fail("prompt length " + std::to_string(len) + " exceeds encoder.max_seq_len");
  }
  if (c.stage2.alpha1 < 0 || c.stage2.alpha2 < 0) fail("alpha1 and alpha2 must be >= 0");
  if (!(c.stage1.lr > 0) || !(c.stage2.lr > 0)) fail("learning rates must be > 0");
  if (c.stage1.weight_decay < 0 || c.stage2.weight_decay < 0) fail("weight_decay must be >= 0");
  if (c.stage1.epochs < 0 || c.stage2.epochs < 0) fail("epochs must be >= 0");
  if (c.folds < 2) fail("folds must be >= 2");
  if (c.fold < 0 || c.fold >= c.folds) fail("fold must lie in [0, folds)");
  if (c.combos.empty()) fail("combos must not be empty");
  if (c.seeds.empty()) fail("seeds must not be empty");
  for (const auto& combo : c.combos) {
    if (combo.pathology_rate < 0 || combo.genomics_rate < 0 ||
        combo.pathology_rate + combo.genomics_rate > 100)
      fail("combo " + combo.label() + " is not a valid pair of missing rates");
  }
  const auto& t = c.train_combo;
  if (t.pathology_rate < 0 || t.genomics_rate < 0 || t.pathology_rate + t.genomics_rate > 100)
    fail("train_combo " + t.label() + " is not a valid pair of missing rates");
}

}  // namespace dispro
