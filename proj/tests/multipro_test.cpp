// SPDX-License-Identifier: Apache-2.0
#include "dispro/multipro.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <set>

namespace dispro {
namespace {

using testing::check_gradients;
using testing::random_matrix;
using testing::sigmoid_ref;
using V = ad::Var<double>;

// --- self scores ----------------------------------------------------------

TEST(SelfScore, ZeroOutputWeightGivesHalf) {
  std::mt19937_64 rng(0);
  auto s = SelfScorer<double>::init(rng, 8);
  EXPECT_EQ(s.W.rows(), 4);
  s.w.mutable_value().setZero();
  const auto a = s(ad::constant<double>(random_matrix(rng, 5, 8))).value();
  for (Eigen::Index i = 0; i < 5; ++i) EXPECT_EQ(a(i, 0), 0.5);
  EXPECT_EQ(SelfScorer<double>::init(rng, 7).W.rows(), 4);  // ceil(7 / 2)
}

TEST(SelfScore, PermutesWithInputAndMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  auto s = SelfScorer<double>::init(rng, 6);
  const Mat<double> x = random_matrix(rng, 4, 6);
  Mat<double> xp = x;
  xp.row(0).swap(xp.row(3));
  const auto a = s(ad::constant<double>(x)).value();
  const auto b = s(ad::constant<double>(xp)).value();
  EXPECT_EQ(a(0, 0), b(3, 0));
  EXPECT_EQ(a(3, 0), b(0, 0));
  EXPECT_EQ(a(1, 0), b(1, 0));

  V t = ad::parameter<double>(x);
  const V probe = ad::constant<double>(random_matrix(rng, 1, 4));
  auto r = check_gradients({{"W", s.W}, {"w", s.w}, {"tokens", t}},
                           [&] { return ad::sum(ad::matmul(probe, s(t))); });
  EXPECT_LT(r.max_rel, 1e-4) << r.worst;
}

// --- uni / cross scores ---------------------------------------------------

TEST(UniproScores, OrthogonalTokenIsHalf) {
  const Mat<double> reps_p{{1, 0, 0}, {0, 1, 0}};
  const Mat<double> reps_g{{0, 2, 0}, {3, 0, 0}};
  const auto [uni, cross] = unipro_scores<double>(Mat<double>{{0, 0, 5}}, reps_p, reps_g, 1);
  EXPECT_EQ(uni[0], 0.5);
  EXPECT_EQ(cross[0], 0.5);
}

TEST(UniproScores, ThreeTokenHandCase) {
  const Mat<double> tokens{{0.5, -1.0}, {2.0, 0.25}, {-0.3, 0.7}};
  const Mat<double> own{{9, 9}, {1.0, 2.0}};
  const Mat<double> other{{9, 9}, {-0.5, 0.5}};
  const auto [uni, cross] = unipro_scores<double>(tokens, own, other, 2);
  const double u[3] = {0.5 - 2.0, 2.0 + 0.5, -0.3 + 1.4};
  const double c[3] = {-0.25 - 0.5, -1.0 + 0.125, 0.15 + 0.35};
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(uni[static_cast<std::size_t>(i)], sigmoid_ref(u[i]), 1e-10);
    EXPECT_NEAR(cross[static_cast<std::size_t>(i)], sigmoid_ref(c[i]), 1e-10);
  }
}

TEST(UniproScores, PositiveScalingKeepsOrdering) {
  std::mt19937_64 rng(2);
  const Mat<double> tokens = random_matrix(rng, 10, 4);
  const Mat<double> reps = random_matrix(rng, 4, 4);
  auto order = [&](const Mat<double>& r) {
    const auto uni = unipro_scores<double>(tokens, r, r, 3).first;
    std::vector<int> idx(uni.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
      return uni[static_cast<std::size_t>(a)] < uni[static_cast<std::size_t>(b)];
    });
    return idx;
  };
  EXPECT_EQ(order(reps), order(Mat<double>(reps * 3.7)));
  EXPECT_THROW(unipro_scores<double>(tokens, reps, reps, 5), Error);
  EXPECT_THROW(unipro_scores<double>(tokens, Mat<double>::Zero(4, 3), reps, 1), Error);
}

TEST(ScoreBreakdown, TotalIsExactSum) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    const Mat<double> tokens = random_matrix(rng, 9, 6);
    const Mat<double> self = random_matrix(rng, 9, 1).array().abs().min(1.0);
    const auto b = score_tokens<double>(tokens, self, random_matrix(rng, 4, 6),
                                        random_matrix(rng, 4, 6), 1 + rep % 4);
    for (std::size_t i = 0; i < b.total.size(); ++i) {
      EXPECT_EQ(b.total[i], b.uni[i] + b.cross[i] + b.self_[i]);
      EXPECT_GT(b.total[i], 0.0);
      EXPECT_LT(b.total[i], 3.0);
    }
  }
}

// --- class estimation -----------------------------------------------------

TEST(PredictTau, ConstructedSeparation) {
  Mat<double> reps = Mat<double>::Identity(6, 6);
  Mat<double> tokens = Mat<double>::Zero(4, 6);
  tokens(2, 4) = 1.0;  // equal to rep row 5 (class 5)
  EXPECT_EQ(predict_tau<double>({tokens}, reps, reps, 1), 5);
  EXPECT_THROW(predict_tau<double>({}, reps, reps, 1), Error);
}

TEST(PredictTau, TiesGoToLowestClass) {
  const Mat<double> reps = Mat<double>::Zero(4, 3);
  EXPECT_EQ(predict_tau<double>({Mat<double>::Ones(2, 3)}, reps, reps, 2), 1);
}

int brute_force_tau(const std::vector<Mat<double>>& sets, const Mat<double>& rp,
                    const Mat<double>& rg, int k) {
  int best = 0;
  double best_v = -1e300;
  for (int j = 0; j < rp.rows(); ++j) {
    double v = 0;
    for (const auto& x : sets) {
      std::vector<double> col;
      for (Eigen::Index i = 0; i < x.rows(); ++i)
        col.push_back(x.row(i).dot(rp.row(j)) + x.row(i).dot(rg.row(j)));
      std::sort(col.rbegin(), col.rend());
      const auto n = std::min<std::size_t>(col.size(), static_cast<std::size_t>(k));
      v += std::accumulate(col.begin(), col.begin() + static_cast<std::ptrdiff_t>(n), 0.0) /
           static_cast<double>(n);
    }
    if (v > best_v) {
      best_v = v;
      best = j + 1;
    }
  }
  return best;
}

TEST(PredictTau, MatchesBruteForceAndScaleInvariant) {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 200; ++rep) {
    const Mat<double> rp = random_matrix(rng, 6, 5), rg = random_matrix(rng, 6, 5);
    std::vector<Mat<double>> sets{random_matrix(rng, 1 + rep % 7, 5)};
    if (rep % 2) sets.push_back(random_matrix(rng, 1 + rep % 5, 5));
    const int k = 1 + rep % 4;
    const int tau = predict_tau<double>(sets, rp, rg, k);
    EXPECT_EQ(tau, brute_force_tau(sets, rp, rg, k)) << "rep " << rep;
    EXPECT_EQ(predict_tau<double>(sets, Mat<double>(rp * 0.25), Mat<double>(rg * 0.25), k), tau);
    EXPECT_EQ(predict_tau<double>(sets, Mat<double>(rp * 8.0), Mat<double>(rg * 8.0), k), tau);
  }
}

// --- selection ------------------------------------------------------------

ScoreBreakdown<double> totals(const std::vector<double>& t) {
  ScoreBreakdown<double> b;
  b.total = t;
  return b;
}

TEST(Select, HandCases) {
  auto idx = select_tokens(totals({0.9, 0.1, 0.5}), 2);
  EXPECT_EQ(std::set<Eigen::Index>(idx.begin(), idx.end()), (std::set<Eigen::Index>{0, 2}));
  idx = select_tokens(totals({0.9, 0.1, 0.5}), 7);
  EXPECT_EQ(idx.size(), 3u);
  EXPECT_THROW(select_tokens(totals({}), 2), Error);
}

TEST(Select, MatchesSortOracle) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> coarse(0, 6);
  for (int rep = 0; rep < 500; ++rep) {
    std::vector<double> t(static_cast<std::size_t>(1 + rep % 30));
    for (auto& v : t) v = coarse(rng) * 0.5;  // many ties
    const int k = 1 + static_cast<int>(rng() % 12);
    EXPECT_EQ(select_tokens(totals(t), k), testing::topk_select_oracle(t, k));
  }
}

TEST(Select, SelectedSetInvariantUnderBagPermutation) {
  std::mt19937_64 rng(6);
  auto scorer = SelfScorer<double>::init(rng, 6);
  const Mat<double> rp = random_matrix(rng, 4, 6), rg = random_matrix(rng, 4, 6);
  for (int rep = 0; rep < 50; ++rep) {
    const Mat<double> x = random_matrix(rng, 12, 6);
    std::vector<Eigen::Index> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Mat<double> xp(12, 6);
    for (int i = 0; i < 12; ++i) xp.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
    auto pick = [&](const Mat<double>& m) {
      const auto a = scorer(ad::constant<double>(m)).value();
      return select_tokens(score_tokens<double>(m, a, rp, rg, 2), 5);
    };
    std::set<Eigen::Index> orig, permuted;
    for (auto i : pick(x)) orig.insert(i);
    for (auto i : pick(xp)) permuted.insert(perm[static_cast<std::size_t>(i)]);
    EXPECT_EQ(orig, permuted);
  }
}

// --- fusion input ---------------------------------------------------------

TEST(Fusion, LayoutAndErrors) {
  std::mt19937_64 rng(7);
  const auto bank = PlaceholderBank<double>::init(rng, 3, 4, 5);
  const V cls = ad::constant<double>(random_matrix(rng, 1, 5));
  EXPECT_NEAR(bank.indicator_p.norm(), 1.0, 1e-12);
  EXPECT_LT((bank.pathology.value().rowwise() - bank.indicator_p.row(0)).cwiseAbs().maxCoeff(),
            0.2);
  EXPECT_THROW(build_fusion_input<double>(std::nullopt, std::nullopt, bank, cls), Error);

  const Mat<double> sp = random_matrix(rng, 3, 5);  // fills every pathology slot
  const Mat<double> sg = random_matrix(rng, 2, 5);  // two of four genomics slots
  auto seq = build_fusion_input<double>(ad::constant<double>(sp), ad::constant<double>(sg), bank, cls);
  const auto& v = seq.tokens.value();
  ASSERT_EQ(v.rows(), 1 + 3 + 4);
  EXPECT_TRUE(seq.attention_mask.empty());
  EXPECT_TRUE(v.row(0) == cls.value());
  EXPECT_TRUE(v.middleRows(1, 3) == Mat<double>(bank.pathology.value() + sp));
  EXPECT_TRUE(v.middleRows(4, 2) == Mat<double>(bank.genomics.value().topRows(2) + sg));
  EXPECT_TRUE(v.middleRows(6, 2) == bank.genomics.value().bottomRows(2));

  auto only_g = build_fusion_input<double>(std::nullopt, ad::constant<double>(sg), bank, cls);
  EXPECT_TRUE(only_g.tokens.value().middleRows(1, 3) == bank.pathology.value());

  EXPECT_THROW(build_fusion_input<double>(ad::constant<double>(random_matrix(rng, 4, 5)),
                                          std::nullopt, bank, cls),
               Error);
  EXPECT_EQ(1 + FullScale::kPlaceholdersPathology + FullScale::kPlaceholdersGenomics,
            FullScale::kMaxSeqLen);
}

// --- heads and losses -----------------------------------------------------

TEST(ClsHead, ZeroWeightsAndGradients) {
  std::mt19937_64 rng(8);
  auto head = Dense<double>::init(rng, 6, 3, 0.0);
  const auto h = cls_hazards(ad::constant<double>(random_matrix(rng, 1, 6)), head).value();
  ASSERT_EQ(h.cols(), 3);
  for (int j = 0; j < 3; ++j) EXPECT_EQ(h(0, j), 0.5);

  head = Dense<double>::init(rng, 6, 3, 0.5);
  head.bias.mutable_value() = random_matrix(rng, 1, 3);
  V cls = ad::parameter<double>(random_matrix(rng, 1, 6));
  const SurvivalLabel y{0, 2.0, 2, 2};
  auto r = check_gradients({{"weight", head.weight}, {"bias", head.bias}, {"cls", cls}},
                           [&] { return survival::nll(cls_hazards(cls, head), y); });
  EXPECT_LT(r.max_rel, 1e-4) << r.worst;
}

TEST(Distillation, CompositionIdentity) {
  std::mt19937_64 rng(9);
  for (int rep = 0; rep < 100; ++rep) {
    const Mat<double> block = random_matrix(rng, 5, 6, 0.5);
    const Mat<double> reps = random_matrix(rng, 8, 6, 0.5);
    const int k = 1 + rep % 7;
    const int tau = 1 + rep % 4, c = rep % 2;
    const SurvivalLabel y{c, 1.0, tau, class_id_for(tau, c, 4)};
    const double got = distillation_loss<double>(ad::constant<double>(block), reps, y, k).scalar();
    const auto pooled = testing::topk_sort_oracle(Mat<double>(block * reps.transpose()), k);
    std::vector<double> h;
    for (int j = 0; j < 4; ++j) h.push_back(sigmoid_ref(pooled[static_cast<std::size_t>(j)]));
    EXPECT_NEAR(got, testing::nll_reference(h, y), 1e-10);
  }
}

TEST(Distillation, ZeroSimilarityClosedForm) {
  const Mat<double> reps = Mat<double>::Ones(8, 4);
  for (int tau = 1; tau <= 4; ++tau)
    for (int c : {0, 1}) {
      const SurvivalLabel y{c, 1.0, tau, class_id_for(tau, c, 4)};
      const double l =
          distillation_loss<double>(ad::constant<double>(Mat<double>::Zero(3, 4)), reps, y, 2)
              .scalar();
      // every hazard is 1/2, so both branches reduce to tau * log 2
      EXPECT_NEAR(l, tau * std::log(2.0), 1e-12);
    }
}

TEST(TotalLoss, Arithmetic) {
  const auto r = total_loss(1.0, 2.0, 3.0);
  EXPECT_DOUBLE_EQ(r.total, 6.0);
  EXPECT_DOUBLE_EQ(r.alpha1, 1.0);
  EXPECT_DOUBLE_EQ(r.alpha2, 1.0);
  EXPECT_DOUBLE_EQ(total_loss(0.7, 0.0, 0.0, 5.0, 9.0).total, 0.7);
  EXPECT_DOUBLE_EQ(total_loss(1.0, 2.0, 3.0, 0.5, 2.0).total, 1.0 + 1.0 + 6.0);
  EXPECT_THROW(total_loss(-1.0, 0.0, 0.0), Error);
  Stage2Config cfg;
  EXPECT_DOUBLE_EQ(cfg.alpha1, 1.0);
  EXPECT_DOUBLE_EQ(cfg.alpha2, 1.0);
}

// --- stage 2 end to end ---------------------------------------------------

struct Micro {
  Cohort cohort;
  Stage1Result<double> s1_p, s1_g;
};

Micro micro_setup(bool trainable_encoder, int stage1_epochs = 0) {
  SynthConfig sc;
  sc.n_patients = 12;
  sc.bag_size_pathology = 6;
  sc.bag_size_genomics = 5;
  sc.d_pathology = 5;
  sc.d_genomics = 4;
  sc.n_intervals = 2;
  sc.informative_fraction = 0.5;
  sc.seed = 3;
  Micro m;
  m.cohort = generate_synthetic_cohort(sc);
  EncoderConfig ec;
  ec.model_dim = 8;
  ec.n_layers = 1;
  ec.n_heads = 2;
  ec.mlp_ratio = 2;
  ec.max_seq_len = 64;
  ec.trainable_encoder = trainable_encoder;
  std::mt19937_64 rng(11);
  TransformerEncoder<double> enc(ec, rng);
  Stage1Config c1;
  c1.context_length = 3;
  c1.pool_k = 3;
  c1.epochs = stage1_epochs;
  c1.lr = 1e-2;
  m.s1_p = train_stage1(m.cohort, Modality::Pathology, enc, c1);
  m.s1_g = train_stage1(m.cohort, Modality::Genomics, enc, c1);
  return m;
}

Stage2Config micro_stage2() {
  Stage2Config c;
  c.slots_pathology = 3;
  c.slots_genomics = 3;
  c.pool_k = 2;
  return c;
}

TEST(Stage2, GradientsMatchFiniteDifferences) {
  for (bool trainable : {false, true}) {
    auto m = micro_setup(trainable);
    auto model = init_multipro(m.s1_p, m.s1_g, micro_stage2());
    model.head = Dense<double>::init(*std::make_unique<std::mt19937_64>(5), 8, 2, 0.5);
    // three patients: complete, pathology missing, genomics missing
    std::vector<Patient> ps(m.cohort.patients.begin(), m.cohort.patients.begin() + 3);
    ps[1].pathology.reset();
    ps[2].genomics.reset();
    ParamList<double> params;
    for (auto& p : model.parameters())
      if (p.var.requires_grad()) params.push_back(p);
    auto r = check_gradients(params, [&] {
      std::mt19937_64 rng(0);
      std::vector<V> terms;
      for (const auto& p : ps) terms.push_back(model.loss(p, rng).first);
      return ad::weighted_sum(terms, {1.0, 1.0, 1.0});
    }, 1e-5);
    EXPECT_LT(r.max_rel, 1e-4) << "trainable=" << trainable << ": " << r.worst;
    // every trainable tensor gets some gradient
    for (auto p : params) p.var.zero_grad();
    std::mt19937_64 rng(0);
    std::vector<V> terms;
    for (const auto& p : ps) terms.push_back(model.loss(p, rng).first);
    ad::backward(ad::weighted_sum(terms, {1.0, 1.0, 1.0}));
    for (const auto& p : params) {
      Mat<double> g = p.var.grad();
      if (p.name == "encoder.position_embedding") g = g.topRows(7).eval();
      EXPECT_GT(g.cwiseAbs().maxCoeff(), 0.0) << p.name;
    }
    for (auto p : params) p.var.zero_grad();
  }
}

TEST(Stage2, LossOnlyDistillsMissingModality) {
  auto m = micro_setup(false);
  auto model = init_multipro(m.s1_p, m.s1_g, micro_stage2());
  std::mt19937_64 rng(0);
  Patient p = m.cohort.patients[0];
  auto complete = model.loss(p, rng).second;
  EXPECT_EQ(complete.ud_p, 0.0);
  EXPECT_EQ(complete.ud_g, 0.0);
  EXPECT_DOUBLE_EQ(complete.total, complete.surv_cls);
  p.genomics.reset();
  auto no_g = model.loss(p, rng).second;
  EXPECT_EQ(no_g.ud_p, 0.0);
  EXPECT_GT(no_g.ud_g, 0.0);
  EXPECT_NEAR(no_g.total, no_g.surv_cls + no_g.ud_g, 1e-12);
}

TEST(Stage2, Stage1StateStaysFrozen) {
  auto m = micro_setup(true, 2);
  const auto reps_p = m.s1_p.reps.reps, reps_g = m.s1_g.reps.reps;
  std::vector<Mat<double>> ctx;
  for (const auto& p : m.s1_p.model.prompt.parameters()) ctx.push_back(p.var.value());
  for (const auto& p : m.s1_g.model.prompt.parameters()) ctx.push_back(p.var.value());

  auto cfg = micro_stage2();
  cfg.epochs = 3;
  cfg.lr = 1e-2;
  const auto res = train_stage2(m.cohort, build_missing_mask(std::vector<std::string>{}, {}, 0),
                                m.s1_p, m.s1_g, cfg);
  EXPECT_EQ(std::memcmp(res.model.reps_p.reps.data(), reps_p.data(), sizeof(double) * reps_p.size()), 0);
  EXPECT_EQ(std::memcmp(res.model.reps_g.reps.data(), reps_g.data(), sizeof(double) * reps_g.size()), 0);
  EXPECT_TRUE(m.s1_p.reps.reps == reps_p);
  std::size_t i = 0;
  for (const auto& p : res.model.prompt_p.parameters()) EXPECT_TRUE(p.var.value() == ctx[i++]);
  for (const auto& p : res.model.prompt_g.parameters()) EXPECT_TRUE(p.var.value() == ctx[i++]);
  // the finetuned adapters are copies; stage-1 adapters are untouched
  EXPECT_FALSE(res.model.adapter_p.layers()[0].weight.value() ==
               m.s1_p.model.adapter.layers()[0].weight.value());
}

TEST(Stage2, RequiresStage1Artifacts) {
  auto m = micro_setup(false);
  auto unfinished = m.s1_g;
  unfinished.reps.frozen_after_stage1 = false;
  EXPECT_THROW(init_multipro(m.s1_p, unfinished, micro_stage2()), Error);
  EXPECT_THROW(init_multipro(m.s1_g, m.s1_p, micro_stage2()), Error);
}

TEST(Stage2, PlainFusedTrainingLowersLoss) {
  auto m = micro_setup(false, 3);
  auto cfg = micro_stage2();
  cfg.alpha1 = cfg.alpha2 = 0.0;
  cfg.epochs = 30;
  const auto res = train_stage2(m.cohort, build_missing_mask(m.cohort.size(), {0, 0}, 0), m.s1_p,
                                m.s1_g, cfg);
  ASSERT_EQ(res.epochs.size(), 30u);
  EXPECT_LT(res.epochs.back().total, res.epochs.front().total);
  EXPECT_LT(res.epochs.back().total, res.initial.total);
}

TEST(Stage2, InferenceIsDeterministicAndHandlesMissing) {
  auto m = micro_setup(false, 1);
  auto model = init_multipro(m.s1_p, m.s1_g, micro_stage2());
  const auto& p = m.cohort.patients[4];
  const auto a = infer(model, p, true);
  const auto b = infer(model, p, true);
  EXPECT_EQ(a.hazards, b.hazards);
  EXPECT_EQ(a.risk, b.risk);
  EXPECT_GE(a.tau, 1);
  EXPECT_LE(a.tau, 4);
  ASSERT_EQ(a.attention.received_mass().size(), 7u);

  Patient only_p = p;
  only_p.genomics.reset();
  const auto c = infer(model, only_p);
  ASSERT_EQ(c.hazards.size(), 2u);
  for (double h : c.hazards) {
    EXPECT_GT(h, 0.0);
    EXPECT_LT(h, 1.0);
  }
  Patient none = p;
  none.genomics.reset();
  none.pathology.reset();
  EXPECT_THROW(infer(model, none), Error);

  auto cfg = micro_stage2();
  cfg.use_scoring = false;
  auto random_model = init_multipro(m.s1_p, m.s1_g, cfg);
  EXPECT_EQ(infer(random_model, p).hazards, infer(random_model, p).hazards);
}

}  // namespace
}  // namespace dispro
