// SPDX-License-Identifier: Apache-2.0
// Full stage-1 / stage-2 state as named tensors, and their checkpoint files.
#pragma once

#include "dispro/checkpoint.hpp"
#include "dispro/multipro.hpp"
#include "dispro/unipro.hpp"

#include <filesystem>
#include <string>

namespace dispro {

inline std::string classreps_name(Modality m) {
  return "unipro." + std::string(tag(m)) + ".classreps";
}

/// Encoder (frozen or not), prompt context, adapter and class representations.
/// The class representations are a detached copy: assigning into the list
/// does not touch the result they came from.
template <class T>
ParamList<T> stage1_state(const Stage1Result<T>& r) {
  const Modality m = r.model.modality();
  ParamList<T> out = r.model.encoder.parameters();
  for (auto& p : r.model.prompt.parameters()) out.push_back(p);
  for (auto& p : r.model.adapter.parameters()) out.push_back(p);
  out.push_back({classreps_name(m), ad::constant<T>(r.reps.reps), 2});
  return out;
}

template <class T>
ParamList<T> stage2_state(const MultiPro<T>& m) {
  ParamList<T> out = m.parameters();
  if (!m.encoder.config().trainable_encoder)
    for (auto& p : m.encoder.parameters()) out.push_back(p);
  out.push_back({"indicator.p", ad::constant<T>(m.bank.indicator_p), 1});
  out.push_back({"indicator.g", ad::constant<T>(m.bank.indicator_g), 1});
  for (auto& p : m.prompt_p.parameters()) out.push_back(p);
  for (auto& p : m.prompt_g.parameters()) out.push_back(p);
  out.push_back({classreps_name(Modality::Pathology), ad::constant<T>(m.reps_p.reps), 2});
  out.push_back({classreps_name(Modality::Genomics), ad::constant<T>(m.reps_g.reps), 2});
  return out;
}

namespace state_detail {

template <class T>
Mat<T> take(const ParamList<T>& params, const std::string& name) {
  for (const auto& p : params)
    if (p.name == name) return p.var.value();
  throw Error(ErrorCode::State, "state: no tensor named " + name);
}

}  // namespace state_detail

template <class T>
void save_stage1(const Stage1Result<T>& r, const std::filesystem::path& path) {
  save_checkpoint(to_checkpoint(stage1_state(r)), path);
}

/// Fills a skeleton (built with the same configuration) from a file.
template <class T>
void load_stage1(Stage1Result<T>& skeleton, const std::filesystem::path& path) {
  const auto params = stage1_state(skeleton);
  assign(params, load_checkpoint(path));
  skeleton.reps = {state_detail::take(params, classreps_name(skeleton.model.modality())), true};
}

template <class T>
void save_stage2(const MultiPro<T>& m, const std::filesystem::path& path) {
  save_checkpoint(to_checkpoint(stage2_state(m)), path);
}

template <class T>
void load_stage2(MultiPro<T>& skeleton, const std::filesystem::path& path) {
  const auto params = stage2_state(skeleton);
  assign(params, load_checkpoint(path));
  skeleton.bank.indicator_p = state_detail::take(params, "indicator.p");
  skeleton.bank.indicator_g = state_detail::take(params, "indicator.g");
  skeleton.reps_p = {state_detail::take(params, classreps_name(Modality::Pathology)), true};
  skeleton.reps_g = {state_detail::take(params, classreps_name(Modality::Genomics)), true};
}

}  // namespace dispro
