// SPDX-License-Identifier: Apache-2.0
//
// Stage 2, multimodal prompting.
//
// Each available modality's tokens are graded by the frozen stage-1 class
// representations of both modalities plus a learned self-score; the best
// tokens are added onto that modality's placeholder slots. A missing modality
// contributes bare placeholders. The fused sequence [CLS | P slots | G slots]
// goes through the shared encoder: [CLS] feeds the survival head, and the
// output slots of a missing modality are scored against that modality's
// frozen class representations to distill its stage-1 knowledge.
#pragma once

#include "dispro/autodiff.hpp"
#include "dispro/cohort.hpp"
#include "dispro/encoders.hpp"
#include "dispro/optim.hpp"
#include "dispro/survival.hpp"
#include "dispro/unipro.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace dispro {

// ---------------------------------------------------------------------------
// Token scoring

/// a_i = sigmoid(w . tanh(W token_i)), W: D' x D with D' = ceil(D / 2).
template <class T>
struct SelfScorer {
  ad::Var<T> W;
  ad::Var<T> w;  // 1 x D'

  static SelfScorer init(std::mt19937_64& rng, Eigen::Index D) {
    const Eigen::Index hidden = (D + 1) / 2;
    return {ad::parameter<T>(gaussian<T>(rng, hidden, D, 1.0 / std::sqrt(double(D)))),
            ad::parameter<T>(gaussian<T>(rng, 1, hidden, 1.0 / std::sqrt(double(hidden))))};
  }

  /// M x 1 scores in (0, 1)
  ad::Var<T> operator()(const ad::Var<T>& tokens) const {
    require(tokens.cols() == W.cols(), ErrorCode::ShapeMismatch, "self_scores: token width");
    return ad::sigmoid(ad::matmul_nt(ad::tanh(ad::matmul_nt(tokens, W)), w));
  }

  SelfScorer clone() const { return {ad::clone(W), ad::clone(w)}; }
};

template <class T>
struct ScoreBreakdown {
  std::vector<T> uni;
  std::vector<T> cross;
  std::vector<T> self_;
  std::vector<T> total;  // uni + cross + self_
};

/// Per-token sigmoid(<token, rep(class_id)>) against the token's own modality
/// and against the other modality.
template <class T>
std::pair<std::vector<T>, std::vector<T>> unipro_scores(const Mat<T>& tokens, const Mat<T>& reps_own,
                                                        const Mat<T>& reps_other, int class_id) {
  require(tokens.cols() == reps_own.cols() && tokens.cols() == reps_other.cols(),
          ErrorCode::ShapeMismatch, "unipro_scores: width mismatch");
  require(class_id >= 1 && class_id <= reps_own.rows() && class_id <= reps_other.rows(),
          ErrorCode::InvalidArgument, "unipro_scores: class id out of range");
  std::vector<T> uni(static_cast<std::size_t>(tokens.rows()));
  std::vector<T> cross(uni.size());
  for (Eigen::Index i = 0; i < tokens.rows(); ++i) {
    uni[static_cast<std::size_t>(i)] =
        ad::sigmoid_scalar<T>(tokens.row(i).dot(reps_own.row(class_id - 1)));
    cross[static_cast<std::size_t>(i)] =
        ad::sigmoid_scalar<T>(tokens.row(i).dot(reps_other.row(class_id - 1)));
  }
  return {std::move(uni), std::move(cross)};
}

template <class T>
ScoreBreakdown<T> score_tokens(const Mat<T>& tokens, const Mat<T>& self_scores,
                               const Mat<T>& reps_own, const Mat<T>& reps_other, int class_id) {
  ScoreBreakdown<T> b;
  std::tie(b.uni, b.cross) = unipro_scores(tokens, reps_own, reps_other, class_id);
  for (Eigen::Index i = 0; i < tokens.rows(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    b.self_.push_back(self_scores(i, 0));
    b.total.push_back(b.uni[k] + b.cross[k] + b.self_[k]);
  }
  return b;
}

/// Class estimate when the label is unknown: for each available token set,
/// TopK-pool (X reps_p^T + X reps_g^T); pooled vectors of both sets are summed;
/// the lowest class id wins ties.
template <class T>
int predict_tau(const std::vector<Mat<T>>& token_sets, const Mat<T>& reps_p, const Mat<T>& reps_g,
                int k) {
  require(!token_sets.empty(), ErrorCode::InvalidArgument, "predict_tau: no tokens");
  require(reps_p.rows() == reps_g.rows(), ErrorCode::ShapeMismatch,
          "predict_tau: class count mismatch");
  std::vector<T> acc(static_cast<std::size_t>(reps_p.rows()), T(0));
  for (const auto& x : token_sets) {
    require(x.rows() >= 1, ErrorCode::InvalidArgument, "predict_tau: empty token set");
    const Mat<T> s = x * reps_p.transpose() + x * reps_g.transpose();
    const auto pooled = topk_pool_values<T>(s, k);
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += pooled[j];
  }
  return static_cast<int>(std::max_element(acc.begin(), acc.end()) - acc.begin()) + 1;
}

/// Top min(K_m, M) tokens by total score, highest first; ties to lower index.
template <class T>
std::vector<Eigen::Index> select_tokens(const ScoreBreakdown<T>& b, int k_m) {
  require(!b.total.empty(), ErrorCode::InvalidArgument, "select_tokens: empty bag");
  return topk_indices<T>(b.total, k_m);
}

/// Uniformly random subset of min(K_m, M) token indices.
inline std::vector<Eigen::Index> random_tokens(Eigen::Index m, int k_m, std::mt19937_64& rng) {
  require(m >= 1, ErrorCode::InvalidArgument, "random_tokens: empty bag");
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(m));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(k_m)));
  return idx;
}

// ---------------------------------------------------------------------------
// Fusion input

inline constexpr double kPlaceholderNoiseStd = 0.02;

template <class T>
struct PlaceholderBank {
  ad::Var<T> pathology;  // K_p x D
  ad::Var<T> genomics;   // K_g x D
  Mat<T> indicator_p;    // 1 x D
  Mat<T> indicator_g;

  /// Rows start at a seeded unit modality indicator plus small noise.
  static PlaceholderBank init(std::mt19937_64& rng, int k_p, int k_g, Eigen::Index D) {
    PlaceholderBank b;
    auto unit = [&] {
      Mat<T> v = gaussian<T>(rng, 1, D, 1.0);
      return Mat<T>(v / v.norm());
    };
    b.indicator_p = unit();
    b.indicator_g = unit();
    Mat<T> p = gaussian<T>(rng, k_p, D, kPlaceholderNoiseStd);
    p.rowwise() += b.indicator_p.row(0);
    Mat<T> g = gaussian<T>(rng, k_g, D, kPlaceholderNoiseStd);
    g.rowwise() += b.indicator_g.row(0);
    b.pathology = ad::parameter<T>(std::move(p));
    b.genomics = ad::parameter<T>(std::move(g));
    return b;
  }

  const ad::Var<T>& slots(Modality m) const { return m == Modality::Pathology ? pathology : genomics; }
  Eigen::Index size(Modality m) const { return slots(m).rows(); }
};

/// Slot i holds placeholder_i + selected_i for i < #selected and the bare
/// placeholder beyond that.
template <class T>
ad::Var<T> fill_slots(const ad::Var<T>& placeholders, const std::optional<ad::Var<T>>& selected) {
  if (!selected) return placeholders;
  const Eigen::Index n = selected->rows(), K = placeholders.rows();
  require(n <= K, ErrorCode::ShapeMismatch, "fill_slots: more tokens than placeholders");
  require(selected->cols() == placeholders.cols(), ErrorCode::ShapeMismatch,
          "fill_slots: width mismatch");
  if (n == 0) return placeholders;
  ad::Var<T> filled = ad::add(ad::slice_rows(placeholders, 0, n), *selected);
  if (n == K) return filled;
  return ad::concat_rows<T>({filled, ad::slice_rows(placeholders, n, K - n)});
}

/// [CLS] | pathology slots (K_p) | genomics slots (K_g); every position attends.
template <class T>
TokenSequence<T> build_fusion_input(const std::optional<ad::Var<T>>& selected_p,
                                    const std::optional<ad::Var<T>>& selected_g,
                                    const PlaceholderBank<T>& bank, const ad::Var<T>& cls) {
  require(selected_p || selected_g, ErrorCode::InvalidArgument,
          "build_fusion_input: both modalities absent");
  // named first: g++ 11 leaks initializer_list elements when a later one throws
  auto block_p = fill_slots(bank.pathology, selected_p);
  auto block_g = fill_slots(bank.genomics, selected_g);
  return {ad::concat_rows<T>({cls, block_p, block_g}), {}};
}

// ---------------------------------------------------------------------------
// Heads and losses

/// Linear D -> I_t followed by a sigmoid per interval.
template <class T>
ad::Var<T> cls_hazards(const ad::Var<T>& cls, const Dense<T>& head) {
  return ad::sigmoid(head(cls));
}

/// Survival NLL of hazards read off the encoder outputs at a missing
/// modality's slots, scored against that modality's frozen class
/// representations.
template <class T>
ad::Var<T> distillation_loss(const ad::Var<T>& missing_block, const Mat<T>& reps,
                             const SurvivalLabel& label, int k) {
  require(reps.rows() % 2 == 0, ErrorCode::ShapeMismatch, "distillation_loss: odd class count");
  const int n_intervals = static_cast<int>(reps.rows() / 2);
  ad::Var<T> s = similarity_matrix(missing_block, ad::constant<T>(reps));
  return survival::nll(unipro_hazards(topk_pool(s, k), n_intervals), label);
}

struct LossReport {
  double surv_cls = 0.0;
  double ud_p = 0.0;
  double ud_g = 0.0;
  double total = 0.0;
  double alpha1 = FullScale::kAlpha1;
  double alpha2 = FullScale::kAlpha2;

  LossReport& operator+=(const LossReport& o) {
    surv_cls += o.surv_cls;
    ud_p += o.ud_p;
    ud_g += o.ud_g;
    total += o.total;
    return *this;
  }
};

inline LossReport total_loss(double surv_cls, double ud_p, double ud_g,
                             double alpha1 = FullScale::kAlpha1,
                             double alpha2 = FullScale::kAlpha2) {
  require(surv_cls >= 0 && ud_p >= 0 && ud_g >= 0, ErrorCode::InvalidArgument,
          "total_loss: components must be nonnegative");
  return {surv_cls, ud_p, ud_g, surv_cls + alpha1 * ud_p + alpha2 * ud_g, alpha1, alpha2};
}

// ---------------------------------------------------------------------------
// Stage-2 model

struct Stage2Config {
  int slots_pathology = 16;  // K_p
  int slots_genomics = 16;   // K_g
  int pool_k = 8;            // K for class estimation and distillation
  double alpha1 = FullScale::kAlpha1;
  double alpha2 = FullScale::kAlpha2;
  bool use_scoring = true;   // false: random token selection
  int epochs = FullScale::kEpochs;
  double lr = FullScale::kLearningRate;
  double weight_decay = FullScale::kWeightDecay;
  std::uint64_t seed = 0;
};

template <class T>
struct FusionForward {
  ad::Var<T> hazards;  // 1 x I_t
  ad::Var<T> cls;
  ad::Var<T> block_p;  // K_p x D encoder outputs
  ad::Var<T> block_g;
  int tau = 0;         // class id used for scoring (0 when selection is random)
  std::optional<ScoreBreakdown<T>> scores_p, scores_g;
  std::vector<Eigen::Index> selected_p, selected_g;
};

template <class T>
struct MultiPro {
  FeatureAdapter<T> adapter_p;
  FeatureAdapter<T> adapter_g;
  PlaceholderBank<T> bank;
  SelfScorer<T> self_p;
  SelfScorer<T> self_g;
  Dense<T> head;
  TransformerEncoder<T> encoder;
  ClassRepresentationSet<T> reps_p;
  ClassRepresentationSet<T> reps_g;
  // stage-1 prompts, carried along frozen
  PromptTemplate<T> prompt_p;
  PromptTemplate<T> prompt_g;
  int n_intervals = 4;
  Stage2Config cfg;

  const FeatureAdapter<T>& adapter(Modality m) const {
    return m == Modality::Pathology ? adapter_p : adapter_g;
  }
  const SelfScorer<T>& scorer(Modality m) const { return m == Modality::Pathology ? self_p : self_g; }
  const Mat<T>& reps(Modality m) const {
    return m == Modality::Pathology ? reps_p.reps : reps_g.reps;
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    for (auto& p : adapter_p.parameters()) out.push_back(p);
    for (auto& p : adapter_g.parameters()) out.push_back(p);
    out.push_back({"placeholder.p", bank.pathology, 2});
    out.push_back({"placeholder.g", bank.genomics, 2});
    out.push_back({"selfscore.p.W", self_p.W, 2});
    out.push_back({"selfscore.p.w", self_p.w, 1});
    out.push_back({"selfscore.g.W", self_g.W, 2});
    out.push_back({"selfscore.g.w", self_g.w, 1});
    out.push_back({"clshead.weight", head.weight, 2});
    out.push_back({"clshead.bias", head.bias, 1});
    if (encoder.config().trainable_encoder)
      for (auto& p : encoder.parameters()) out.push_back(p);
    return out;
  }

  /// One patient through the fused encoder. `class_id` is the ground-truth
  /// class during training; without it the class is estimated from the
  /// available tokens. `rng` drives random selection when scoring is off.
  FusionForward<T> forward(const Patient& patient, std::optional<int> class_id,
                           std::mt19937_64& rng, AttentionRecord* record = nullptr) const {
    require(patient.pathology || patient.genomics, ErrorCode::InvalidArgument,
            "stage2: patient " + patient.id + " has no modality");
    FusionForward<T> f;
    std::optional<ad::Var<T>> tokens[2];
    for (Modality m : {Modality::Pathology, Modality::Genomics})
      if (patient.has(m))
        tokens[int(m)] = adapter(m)(Mat<T>(patient.bag(m)->instances.template cast<T>()));

    if (cfg.use_scoring) {
      if (class_id) {
        f.tau = *class_id;
      } else {
        std::vector<Mat<T>> sets;
        for (const auto& t : tokens)
          if (t) sets.push_back(t->value());
        f.tau = predict_tau<T>(sets, reps_p.reps, reps_g.reps, cfg.pool_k);
      }
    }

    std::optional<ad::Var<T>> selected[2];
    for (Modality m : {Modality::Pathology, Modality::Genomics}) {
      const auto& t = tokens[int(m)];
      if (!t) continue;
      const int k_m = static_cast<int>(bank.size(m));
      std::vector<Eigen::Index> idx;
      if (cfg.use_scoring) {
        ad::Var<T> a = scorer(m)(*t);
        auto b = score_tokens<T>(t->value(), a.value(), reps(m), reps(other(m)), f.tau);
        idx = select_tokens(b, k_m);
        // the self-score gates the tokens it selects so that it receives gradient
        selected[int(m)] = ad::row_scale(ad::gather_rows(*t, idx), ad::gather_rows(a, idx));
        (m == Modality::Pathology ? f.scores_p : f.scores_g) = std::move(b);
      } else {
        idx = random_tokens(t->rows(), k_m, rng);
        selected[int(m)] = ad::gather_rows(*t, idx);
      }
      (m == Modality::Pathology ? f.selected_p : f.selected_g) = std::move(idx);
    }

    auto seq = build_fusion_input<T>(selected[0], selected[1], bank, encoder.cls_embedding());
    auto out = encoder.encode(seq, record);
    const auto kp = bank.size(Modality::Pathology), kg = bank.size(Modality::Genomics);
    f.cls = out.cls;
    f.block_p = ad::slice_rows(out.hidden, 1, kp);
    f.block_g = ad::slice_rows(out.hidden, 1 + kp, kg);
    f.hazards = cls_hazards(out.cls, head);
    return f;
  }

  /// Training objective for one patient: L_cls plus, for a missing modality,
  /// its weighted distillation term.
  std::pair<ad::Var<T>, LossReport> loss(const Patient& patient, std::mt19937_64& rng) const {
    auto f = forward(patient, patient.label.class_id, rng);
    ad::Var<T> l_cls = survival::nll(f.hazards, patient.label);
    std::vector<ad::Var<T>> terms{l_cls};
    std::vector<T> weights{T(1)};
    LossReport r;
    r.alpha1 = cfg.alpha1;
    r.alpha2 = cfg.alpha2;
    r.surv_cls = static_cast<double>(l_cls.scalar());
    if (!patient.pathology && cfg.alpha1 != 0.0) {
      ad::Var<T> ud = distillation_loss<T>(f.block_p, reps_p.reps, patient.label, cfg.pool_k);
      r.ud_p = static_cast<double>(ud.scalar());
      terms.push_back(ud);
      weights.push_back(T(cfg.alpha1));
    }
    if (!patient.genomics && cfg.alpha2 != 0.0) {
      ad::Var<T> ud = distillation_loss<T>(f.block_g, reps_g.reps, patient.label, cfg.pool_k);
      r.ud_g = static_cast<double>(ud.scalar());
      terms.push_back(ud);
      weights.push_back(T(cfg.alpha2));
    }
    r = total_loss(r.surv_cls, r.ud_p, r.ud_g, cfg.alpha1, cfg.alpha2);
    return {ad::weighted_sum(terms, weights), r};
  }
};

/// Initial stage-2 state: adapters copied from stage 1 (then finetuned),
/// class representations and prompts frozen, fresh placeholders, self-scorers
/// and survival head. The encoder starts from the pathology stage-1 copy.
template <class T>
MultiPro<T> init_multipro(const Stage1Result<T>& s1_p, const Stage1Result<T>& s1_g,
                          const Stage2Config& cfg) {
  require(s1_p.reps.frozen_after_stage1 && s1_g.reps.frozen_after_stage1, ErrorCode::State,
          "stage2: stage-1 artifacts for both modalities are required");
  require(s1_p.model.modality() == Modality::Pathology &&
              s1_g.model.modality() == Modality::Genomics,
          ErrorCode::State, "stage2: stage-1 modalities mismatched");
  require(s1_p.reps.reps.rows() == s1_g.reps.reps.rows(), ErrorCode::State,
          "stage2: stage-1 class counts differ");
  require(cfg.slots_pathology >= 1 && cfg.slots_genomics >= 1 && cfg.pool_k >= 1,
          ErrorCode::InvalidArgument, "stage2: K_p, K_g and K must be >= 1");
  const auto& enc = s1_p.model.encoder;
  require(1 + cfg.slots_pathology + cfg.slots_genomics <= enc.config().max_seq_len,
          ErrorCode::InvalidArgument, "stage2: 1 + K_p + K_g exceeds max_seq_len");

  std::mt19937_64 rng(cfg.seed ^ 0x57a6e2ull);
  MultiPro<T> m;
  m.cfg = cfg;
  m.n_intervals = s1_p.model.n_intervals;
  m.encoder = enc.clone();
  m.adapter_p = s1_p.model.adapter.clone();
  m.adapter_g = s1_g.model.adapter.clone();
  m.reps_p = s1_p.reps;
  m.reps_g = s1_g.reps;
  m.prompt_p = s1_p.model.prompt;
  m.prompt_g = s1_g.model.prompt;
  const auto D = enc.dim();
  m.bank = PlaceholderBank<T>::init(rng, cfg.slots_pathology, cfg.slots_genomics, D);
  m.self_p = SelfScorer<T>::init(rng, D);
  m.self_g = SelfScorer<T>::init(rng, D);
  m.head = Dense<T>::init(rng, D, m.n_intervals, 1.0 / std::sqrt(static_cast<double>(D)) * 0.1);
  return m;
}

template <class T>
struct Stage2Result {
  MultiPro<T> model;
  LossReport initial;              // mean per-patient report before training
  std::vector<LossReport> epochs;  // mean per-patient report seen in each epoch
};

/// Mean per-patient losses of a model over a (masked) cohort without updates.
template <class T>
LossReport stage2_mean_loss(const MultiPro<T>& model, const Cohort& cohort, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  LossReport acc;
  for (const auto& p : cohort.patients) acc += model.loss(p, rng).second;
  const double n = static_cast<double>(std::max<std::size_t>(cohort.size(), 1));
  acc.surv_cls /= n;
  acc.ud_p /= n;
  acc.ud_g /= n;
  acc.total /= n;
  acc.alpha1 = model.cfg.alpha1;
  acc.alpha2 = model.cfg.alpha2;
  return acc;
}

/// Optimizes the combined loss over the training cohort with `mask` applied.
/// Stage-1 prompts and class representations never change.
template <class T>
Stage2Result<T> train_stage2(const Cohort& train, const MissingMask& mask,
                             const Stage1Result<T>& s1_p, const Stage1Result<T>& s1_g,
                             const Stage2Config& cfg) {
  std::vector<std::size_t> all(train.size());
  std::iota(all.begin(), all.end(), 0);
  const Cohort masked = apply_mask(train, all, mask);
  require(!masked.patients.empty(), ErrorCode::InvalidArgument, "train_stage2: empty cohort");

  Stage2Result<T> res;
  res.model = init_multipro<T>(s1_p, s1_g, cfg);
  res.initial = stage2_mean_loss(res.model, masked, cfg.seed ^ 0x1417ull);

  Adam<T> opt(trainable(res.model.parameters()), {cfg.lr, cfg.weight_decay});
  std::mt19937_64 rng(cfg.seed ^ 0x2b5eedull);
  std::vector<std::size_t> order = all;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    LossReport acc;
    for (auto i : order) {
      auto [loss, report] = res.model.loss(masked.patients[i], rng);
      acc += report;
      ad::backward(loss);
      opt.step();
      opt.zero_grad();
    }
    const double n = static_cast<double>(order.size());
    acc.surv_cls /= n;
    acc.ud_p /= n;
    acc.ud_g /= n;
    acc.total /= n;
    acc.alpha1 = cfg.alpha1;
    acc.alpha2 = cfg.alpha2;
    res.epochs.push_back(acc);
    spdlog::debug("stage2 epoch {} total {:.5f} cls {:.5f} ud_p {:.5f} ud_g {:.5f}", epoch + 1,
                  acc.total, acc.surv_cls, acc.ud_p, acc.ud_g);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Inference

struct Inference {
  std::vector<double> hazards;
  double risk = 0.0;
  int tau = 0;
  AttentionRecord attention;
};

/// Read-only prediction for a patient with at least one modality. Random
/// selection (scoring disabled) is seeded from the patient id so repeated
/// calls agree.
template <class T>
Inference infer(const MultiPro<T>& model, const Patient& patient, bool record_attention = false) {
  std::mt19937_64 rng(model.cfg.seed ^ fnv1a64(patient.id));
  Inference out;
  auto f = model.forward(patient, std::nullopt, rng, record_attention ? &out.attention : nullptr);
  const auto& h = f.hazards.value();
  out.hazards.assign(h.data(), h.data() + h.size());
  for (auto& v : out.hazards) v = static_cast<double>(v);
  out.risk = survival::risk_score<double>(out.hazards);
  out.tau = f.tau;
  return out;
}

}  // namespace dispro
