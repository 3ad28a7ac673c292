// SPDX-License-Identifier: Apache-2.0
//
// Stage 1, unimodal prompting. Each of the 2*I_t survival classes owns a set
// of learnable context tokens; together with a shared modality prefix and the
// class name they form a prompt whose encoder [CLS] output is that class's
// representation. Instances of a bag are scored against every class by inner
// product, pooled over the top-K instances per class and turned into
// per-interval hazards.
#pragma once

#include "dispro/autodiff.hpp"
#include "dispro/cohort.hpp"
#include "dispro/encoders.hpp"
#include "dispro/optim.hpp"
#include "dispro/survival.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dispro {

/// Reference settings of the original large-scale configuration. Desk-scale
/// defaults elsewhere are smaller; these are kept for configs that want them.
struct FullScale {
  static constexpr int kModelDim = 768;
  static constexpr int kMaxSeqLen = 512;
  static constexpr int kIntervals = 4;
  static constexpr int kClasses = 8;
  static constexpr int kContextPathology = 255;
  static constexpr int kContextGenomics = 256;
  static constexpr int kPoolK = 256;
  static constexpr int kPlaceholdersPathology = 255;
  static constexpr int kPlaceholdersGenomics = 256;
  static constexpr int kPathwayCount = 330;
  static constexpr int kFolds = 5;
  static constexpr int kBatchSize = 1;
  static constexpr int kEpochs = 30;
  static constexpr double kLearningRate = 2e-4;
  static constexpr double kWeightDecay = 1e-5;
  static constexpr double kAlpha1 = 1.0;
  static constexpr double kAlpha2 = 1.0;
};

inline constexpr std::string_view kPathologyPrefix =
    "This is a pathology slide image from the patient with overall survival of";
inline constexpr std::string_view kGenomicsPrefix =
    "These are gene expression profiles from the patient with overall survival of";

inline constexpr std::array<std::string_view, 8> kFourIntervalClassNames{
    "high risk, dead",          "mid-high risk, dead",          "mid-low risk, dead",
    "low risk, dead",           "short observation, alive",     "mid-short observation, alive",
    "mid-long observation, alive", "long observation, alive"};

inline std::string_view default_prefix(Modality m) {
  return m == Modality::Pathology ? kPathologyPrefix : kGenomicsPrefix;
}

/// Class names in class-id order: dead classes by interval, then alive ones.
inline std::vector<std::string> class_names(int n_intervals) {
  if (n_intervals == 4) return {kFourIntervalClassNames.begin(), kFourIntervalClassNames.end()};
  std::vector<std::string> out;
  for (int c = 0; c < 2; ++c)
    for (int j = 1; j <= n_intervals; ++j)
      out.push_back((c == 0 ? "risk band " : "observation band ") + std::to_string(j) + " of " +
                    std::to_string(n_intervals) + (c == 0 ? ", dead" : ", alive"));
  return out;
}

// ---------------------------------------------------------------------------
// Prompts and class representations

template <class T>
struct PromptTemplate {
  Modality modality = Modality::Pathology;
  std::vector<ad::Var<T>> context;  // one k x D block per class
  std::vector<int> prefix_ids;
  std::vector<std::vector<int>> classname_ids;

  int n_classes() const { return static_cast<int>(context.size()); }
  Eigen::Index context_length() const { return context.empty() ? 0 : context.front().rows(); }

  /// 1 + k + m + s for the given class
  Eigen::Index assembled_length(int class_id) const {
    return 1 + context_length() + static_cast<Eigen::Index>(prefix_ids.size()) +
           static_cast<Eigen::Index>(classname_ids[static_cast<std::size_t>(class_id - 1)].size());
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    for (std::size_t j = 0; j < context.size(); ++j)
      out.push_back({"unipro." + std::string(tag(modality)) + ".context." + std::to_string(j + 1),
                     context[j], 2});
    return out;
  }

  PromptTemplate clone() const {
    PromptTemplate p = *this;
    for (auto& c : p.context) c = ad::clone(c);
    return p;
  }
};

inline constexpr double kContextInitStd = 0.02;

template <class T>
PromptTemplate<T> make_prompt_template(Modality m, int n_intervals, int context_length,
                                       const TransformerEncoder<T>& encoder, std::mt19937_64& rng,
                                       std::string_view prefix = {}) {
  require(context_length >= 0, ErrorCode::InvalidArgument, "context_length must be >= 0");
  const int vocab = encoder.config().vocab_size;
  PromptTemplate<T> p;
  p.modality = m;
  p.prefix_ids = tokenize_text(prefix.empty() ? default_prefix(m) : prefix, vocab);
  for (const auto& n : class_names(n_intervals)) p.classname_ids.push_back(tokenize_text(n, vocab));
  for (int j = 0; j < 2 * n_intervals; ++j)
    p.context.push_back(
        ad::parameter<T>(gaussian<T>(rng, context_length, encoder.dim(), kContextInitStd)));
  for (int j = 1; j <= 2 * n_intervals; ++j)
    require(p.assembled_length(j) <= encoder.config().max_seq_len, ErrorCode::InvalidArgument,
            "prompt for class " + std::to_string(j) + " has length " +
                std::to_string(p.assembled_length(j)) + " > max_seq_len");
  return p;
}

/// [CLS] | context(j) | prefix | classname(j)
template <class T>
TokenSequence<T> assemble_prompt(const PromptTemplate<T>& tpl, int class_id,
                                 const TransformerEncoder<T>& encoder) {
  require(class_id >= 1 && class_id <= tpl.n_classes(), ErrorCode::InvalidArgument,
          "assemble_prompt: class id " + std::to_string(class_id) + " outside [1, " +
              std::to_string(tpl.n_classes()) + "]");
  require(tpl.assembled_length(class_id) <= encoder.config().max_seq_len,
          ErrorCode::InvalidArgument, "assemble_prompt: sequence exceeds max_seq_len");
  const auto j = static_cast<std::size_t>(class_id - 1);
  std::vector<ad::Var<T>> parts{encoder.cls_embedding()};
  if (tpl.context[j].rows() > 0) parts.push_back(tpl.context[j]);
  if (!tpl.prefix_ids.empty()) parts.push_back(encoder.embed_ids(tpl.prefix_ids));
  if (!tpl.classname_ids[j].empty()) parts.push_back(encoder.embed_ids(tpl.classname_ids[j]));
  return {ad::concat_rows(parts), {}};
}

/// 2*I_t x D graph node, row j-1 = [CLS] output of class j's prompt.
template <class T>
ad::Var<T> class_representations(const PromptTemplate<T>& tpl,
                                 const TransformerEncoder<T>& encoder) {
  std::vector<ad::Var<T>> rows;
  for (int j = 1; j <= tpl.n_classes(); ++j)
    rows.push_back(encoder.encode(assemble_prompt(tpl, j, encoder)).cls);
  return ad::concat_rows(rows);
}

/// Frozen snapshot of class representations handed from stage 1 to stage 2.
template <class T>
struct ClassRepresentationSet {
  Mat<T> reps;  // 2*I_t x D
  bool frozen_after_stage1 = false;

  int n_classes() const { return static_cast<int>(reps.rows()); }
};

// ---------------------------------------------------------------------------
// Similarity and pooling

/// scores(i, j) = <token_i, rep_j>
template <class T>
ad::Var<T> similarity_matrix(const ad::Var<T>& tokens, const ad::Var<T>& reps) {
  require(tokens.cols() == reps.cols(), ErrorCode::ShapeMismatch,
          "similarity_matrix: token width " + std::to_string(tokens.cols()) + " != rep width " +
              std::to_string(reps.cols()));
  return ad::matmul_nt(tokens, reps);
}

/// Indices of the min(K, n) largest values; ties go to the lower index.
template <class T>
std::vector<Eigen::Index> topk_indices(std::span<const T> values, int k) {
  require(k >= 1, ErrorCode::InvalidArgument, "top-k: K must be >= 1");
  std::vector<Eigen::Index> idx(values.size());
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  const auto keep = std::min<std::size_t>(static_cast<std::size_t>(k), values.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(),
                    [&](Eigen::Index a, Eigen::Index b) {
                      const T va = values[static_cast<std::size_t>(a)];
                      const T vb = values[static_cast<std::size_t>(b)];
                      return va > vb || (va == vb && a < b);
                    });
  idx.resize(keep);
  return idx;
}

/// Per column, the mean of the top min(K, M) entries; result is 1 x C.
template <class T>
ad::Var<T> topk_pool(const ad::Var<T>& scores, int k) {
  require(scores.rows() >= 1 && scores.cols() >= 1, ErrorCode::InvalidArgument,
          "topk_pool: empty similarity matrix");
  require(k >= 1, ErrorCode::InvalidArgument, "topk_pool: K must be >= 1");
  const Eigen::Index M = scores.rows(), C = scores.cols();
  std::vector<std::vector<Eigen::Index>> chosen(static_cast<std::size_t>(C));
  Mat<T> pooled(1, C);
  std::vector<T> col(static_cast<std::size_t>(M));
  for (Eigen::Index j = 0; j < C; ++j) {
    for (Eigen::Index i = 0; i < M; ++i) col[static_cast<std::size_t>(i)] = scores.value()(i, j);
    auto& sel = chosen[static_cast<std::size_t>(j)];
    sel = topk_indices<T>(col, k);
    T acc = T(0);
    for (auto i : sel) acc += col[static_cast<std::size_t>(i)];
    pooled(0, j) = acc / T(sel.size());
  }
  return ad::detail::make<T>(std::move(pooled), {scores}, [chosen](ad::Node<T>& self) {
    auto& S = *self.parents[0];
    Mat<T> g = Mat<T>::Zero(S.value.rows(), S.value.cols());
    for (std::size_t j = 0; j < chosen.size(); ++j) {
      const T share = self.grad(0, static_cast<Eigen::Index>(j)) / T(chosen[j].size());
      for (auto i : chosen[j]) g(i, static_cast<Eigen::Index>(j)) += share;
    }
    S.accumulate(g);
  });
}

/// Value-only pooling of a plain matrix.
template <class T>
std::vector<T> topk_pool_values(const Mat<T>& scores, int k) {
  const auto v = topk_pool(ad::constant<T>(scores), k).value();
  return {v.data(), v.data() + v.size()};
}

/// Hazard of interval j = sigmoid(pooled score of class (j, dead)); the dead
/// classes occupy the first I_t columns.
template <class T>
ad::Var<T> unipro_hazards(const ad::Var<T>& pooled, int n_intervals) {
  require(pooled.rows() == 1 && pooled.cols() == 2 * n_intervals, ErrorCode::ShapeMismatch,
          "unipro_hazards: pooled must be 1 x 2*I_t");
  return ad::sigmoid(ad::slice_cols(pooled, 0, n_intervals));
}

// ---------------------------------------------------------------------------
// Stage-1 model and training

template <class T>
struct UniPro {
  PromptTemplate<T> prompt;
  FeatureAdapter<T> adapter;
  TransformerEncoder<T> encoder;
  int n_intervals = 4;
  int pool_k = 8;

  Modality modality() const { return prompt.modality; }

  ad::Var<T> representations() const { return class_representations(prompt, encoder); }

  /// Hazards for one bag given (possibly graph-attached) class representations.
  ad::Var<T> hazards(const MatD& bag, const ad::Var<T>& reps) const {
    ad::Var<T> tokens = adapter(Mat<T>(bag.template cast<T>()));
    return unipro_hazards(topk_pool(similarity_matrix(tokens, reps), pool_k), n_intervals);
  }

  ParamList<T> parameters() const {
    ParamList<T> out = prompt.parameters();
    for (auto& p : adapter.parameters()) out.push_back(p);
    if (encoder.config().trainable_encoder)
      for (auto& p : encoder.parameters()) out.push_back(p);
    return out;
  }
};

struct Stage1Config {
  int context_length = 8;
  int pool_k = 8;
  int epochs = FullScale::kEpochs;
  double lr = FullScale::kLearningRate;
  double weight_decay = FullScale::kWeightDecay;
  std::uint64_t seed = 0;
};

template <class T>
struct Stage1Result {
  UniPro<T> model;
  ClassRepresentationSet<T> reps;
  double initial_loss = 0.0;          // mean NLL before the first step
  std::vector<double> epoch_losses;   // mean NLL seen during each epoch
};

template <class T>
UniPro<T> init_unipro(Modality m, const Cohort& cohort, const TransformerEncoder<T>& encoder,
                      const Stage1Config& cfg) {
  std::mt19937_64 rng(cfg.seed ^ (m == Modality::Pathology ? 0x5031ull : 0x4731ull));
  UniPro<T> u;
  u.n_intervals = cohort.n_intervals;
  u.pool_k = cfg.pool_k;
  u.encoder = encoder.config().trainable_encoder ? encoder.clone() : encoder;
  u.prompt = make_prompt_template<T>(m, cohort.n_intervals, cfg.context_length, encoder, rng);
  u.adapter = FeatureAdapter<T>::for_modality(m, rng, cohort.width(m), encoder.dim());
  return u;
}

template <class T>
double unipro_mean_loss(const UniPro<T>& model, const Cohort& cohort) {
  const ad::Var<T> reps = ad::constant<T>(model.representations().value());
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& p : cohort.patients) {
    if (!p.has(model.modality())) continue;
    total += static_cast<double>(
        survival::nll(model.hazards(p.bag(model.modality())->instances, reps), p.label).scalar());
    ++n;
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

/// Minimizes the survival NLL over every patient that has the modality, one
/// patient per step. A trainable encoder is copied first, so the caller's
/// encoder is never modified.
template <class T>
Stage1Result<T> train_stage1(const Cohort& cohort, Modality m, const TransformerEncoder<T>& encoder,
                             const Stage1Config& cfg) {
  std::vector<std::size_t> avail;
  for (std::size_t i = 0; i < cohort.size(); ++i)
    if (cohort.patients[i].has(m)) avail.push_back(i);
  require(!avail.empty(), ErrorCode::InvalidArgument,
          "train_stage1: no patient has " + std::string(name(m)) + " data");

  Stage1Result<T> res;
  res.model = init_unipro<T>(m, cohort, encoder, cfg);
  res.initial_loss = unipro_mean_loss(res.model, cohort);

  Adam<T> opt(trainable(res.model.parameters()), {cfg.lr, cfg.weight_decay});
  std::mt19937_64 rng(cfg.seed ^ 0x51a9e1ull);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(avail.begin(), avail.end(), rng);
    double acc = 0.0;
    for (auto i : avail) {
      const auto& p = cohort.patients[i];
      ad::Var<T> loss =
          survival::nll(res.model.hazards(p.bag(m)->instances, res.model.representations()), p.label);
      acc += static_cast<double>(loss.scalar());
      ad::backward(loss);
      opt.step();
      opt.zero_grad();
    }
    res.epoch_losses.push_back(acc / static_cast<double>(avail.size()));
    spdlog::debug("stage1[{}] epoch {} nll {:.5f}", tag(m), epoch + 1, res.epoch_losses.back());
  }
  res.reps = {res.model.representations().value(), true};
  return res;
}

}  // namespace dispro
