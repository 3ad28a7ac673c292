// SPDX-License-Identifier: Apache-2.0
#include "dispro/harness.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <map>

namespace dispro {
namespace {

// --- configuration --------------------------------------------------------

TEST(Config, DefaultsValidate) {
  RunConfig c;
  EXPECT_NO_THROW(validate(c));
  EXPECT_EQ(c.combos.size(), 5u);
  EXPECT_EQ(c.folds, 5);
  EXPECT_DOUBLE_EQ(c.stage1.lr, 2e-4);
  EXPECT_DOUBLE_EQ(c.stage2.weight_decay, 1e-5);
}

TEST(Config, ParsesKeysCommentsAndLists) {
  RunConfig c;
  parse_config_text(c, R"(
# desk run
synth.n_patients = 60   # small
encoder.model_dim=16
encoder.trainable = true
pool_k = 4
lr = 1e-3
stage2.lr = 5e-4
combos = 0-60, 30:30
seeds = 3,4
train_combo = 20-40

alpha2 = 0.5
)");
  EXPECT_EQ(c.synth.n_patients, 60);
  EXPECT_EQ(c.encoder.model_dim, 16);
  EXPECT_TRUE(c.encoder.trainable_encoder);
  EXPECT_EQ(c.stage1.pool_k, 4);
  EXPECT_EQ(c.stage2.pool_k, 4);
  EXPECT_DOUBLE_EQ(c.stage1.lr, 1e-3);
  EXPECT_DOUBLE_EQ(c.stage2.lr, 5e-4);
  ASSERT_EQ(c.combos.size(), 2u);
  EXPECT_EQ(c.combos[1], (MissingCombo{30, 30}));
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{3, 4}));
  EXPECT_EQ(c.train_combo, (MissingCombo{20, 40}));
  EXPECT_DOUBLE_EQ(c.stage2.alpha2, 0.5);
}

TEST(Config, ErrorsNameTheLine) {
  RunConfig c;
  try {
    parse_config_text(c, "folds = 5\nbogus = 1\n", "run.cfg");
    FAIL() << "expected throw";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg:2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos);
  }
  EXPECT_THROW(parse_config_text(c, "folds = five"), Error);
  EXPECT_THROW(parse_config_text(c, "folds 5"), Error);
  EXPECT_THROW(parse_config_text(c, "encoder.trainable = maybe"), Error);
  EXPECT_THROW(parse_config_text(c, "combos = 30"), Error);
}

TEST(Config, EnvironmentOverridesFile) {
  RunConfig c;
  parse_config_text(c, "stage1.epochs = 7\nfolds = 4\n");
  const std::map<std::string, std::string> env{{"DISPRO_STAGE1_EPOCHS", "3"},
                                               {"DISPRO_SEEDS", "9"},
                                               {"DISPRO_ENCODER_N_HEADS", "4"}};
  apply_env_overrides(c, [&](const char* n) -> const char* {
    const auto it = env.find(n);
    return it == env.end() ? nullptr : it->second.c_str();
  });
  EXPECT_EQ(c.stage1.epochs, 3);
  EXPECT_EQ(c.folds, 4);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{9}));
  EXPECT_EQ(c.encoder.n_heads, 4);
  EXPECT_EQ(env_name("synth.n_patients"), "DISPRO_SYNTH_N_PATIENTS");
}

TEST(Config, ValidationRejectsInconsistentSettings) {
  auto bad = [](auto mutate) {
    RunConfig c;
    mutate(c);
    EXPECT_THROW(validate(c), Error);
  };
  bad([](RunConfig& c) { c.encoder.n_heads = 3; });
  bad([](RunConfig& c) { c.folds = 1; });
  bad([](RunConfig& c) { c.fold = 5; });
  bad([](RunConfig& c) { c.stage2.slots_pathology = 500; });
  bad([](RunConfig& c) { c.stage1.context_length = 600; });
  bad([](RunConfig& c) { c.stage2.alpha1 = -1; });
  bad([](RunConfig& c) { c.stage1.lr = 0; });
  bad([](RunConfig& c) { c.combos = {{70, 40}}; });
  bad([](RunConfig& c) { c.seeds.clear(); });
  bad([](RunConfig& c) { c.synth.censor_rate = 1.0; });
  bad([](RunConfig& c) { c.out.clear(); });
}

// --- scenarios and folds --------------------------------------------------

TEST(Scenario, LabelsAndRestriction) {
  EXPECT_EQ(parse_scenario("p-only"), Scenario::PathologyOnly);
  EXPECT_EQ(parse_scenario("g-only"), Scenario::GenomicsOnly);
  EXPECT_EQ(parse_scenario("complete"), Scenario::Complete);
  EXPECT_THROW(parse_scenario("both"), Error);
  EXPECT_EQ(label(Scenario::GenomicsOnly), "genomics-only");

  SynthConfig sc;
  sc.n_patients = 10;
  const auto c = generate_synthetic_cohort(sc);
  const auto p = *restrict_to(c.patients[0], Scenario::PathologyOnly);
  EXPECT_TRUE(p.pathology && !p.genomics);
  Patient only_g = c.patients[1];
  only_g.pathology.reset();
  EXPECT_FALSE(restrict_to(only_g, Scenario::Complete).has_value());
  EXPECT_TRUE(restrict_to(only_g, Scenario::GenomicsOnly).has_value());
}

TEST(FoldData, MaskOnlyTouchesTraining) {
  SynthConfig sc;
  sc.n_patients = 50;
  const auto c = generate_synthetic_cohort(sc);
  const auto folds = kfold_split(c, 5, 1);
  const auto d = fold_data(c, folds[2], {20, 40}, 1);
  EXPECT_EQ(d.train.size(), 40u);
  EXPECT_EQ(d.test.size(), 10u);
  EXPECT_EQ(d.mask.drop_pathology.size(), 8u);
  EXPECT_EQ(d.mask.drop_genomics.size(), 16u);
  for (const auto& p : d.test.patients) EXPECT_TRUE(p.pathology && p.genomics);
  std::size_t no_p = 0, no_g = 0;
  for (const auto& p : d.masked_train.patients) {
    no_p += !p.pathology;
    no_g += !p.genomics;
    EXPECT_TRUE(p.pathology || p.genomics);
  }
  EXPECT_EQ(no_p, 8u);
  EXPECT_EQ(no_g, 16u);
}

// --- reports --------------------------------------------------------------

TEST(Metrics, JsonlFieldsAndSummary) {
  MetricsReport r;
  r.records = {{"complete", 0, 0.5, 10, 7, "30-30"},
               {"complete", 1, 0.7, 10, 7, "30-30"},
               {"pathology-only", 0, std::nullopt, 10, 7, "30-30"}};
  r.wall_clock_seconds = 12.5;
  const auto text = r.jsonl();
  EXPECT_EQ(text.substr(0, text.find('\n')),
            R"({"scenario":"complete","fold":0,"cindex":0.5,"n_test":10,"seed":7,"combo":"30-30"})");
  EXPECT_NE(text.find(R"("cindex":null)"), std::string::npos);
  EXPECT_EQ(text.find("12.5"), std::string::npos);  // timing stays out of the records
  const auto s = r.summary().at({"30-30", "complete"});
  EXPECT_NEAR(s.mean, 0.6, 1e-12);
  EXPECT_NEAR(s.std, 0.1, 1e-12);
  EXPECT_EQ(s.n, 2u);
  EXPECT_NE(r.table().find("0.6000 +- 0.1000"), std::string::npos) << r.table();
}

TEST(Metrics, CosineProperties) {
  const std::vector<double> a{1, 2, 3}, b{2, 4, 6}, c{-1, -2, -3};
  EXPECT_NEAR(cosine(a, a), 1.0, 1e-15);
  EXPECT_NEAR(cosine(a, b), 1.0, 1e-15);
  EXPECT_NEAR(cosine(a, c), -1.0, 1e-15);
  EXPECT_THROW(cosine(a, std::vector<double>{1, 2}), Error);
  EXPECT_THROW(cosine(a, std::vector<double>{0, 0, 0}), Error);
}

// --- end to end on a tiny configuration -----------------------------------

RunConfig tiny_config() {
  RunConfig c;
  c.synth.n_patients = 40;
  c.synth.bag_size_pathology = 12;
  c.synth.bag_size_genomics = 8;
  c.synth.d_pathology = 6;
  c.synth.d_genomics = 5;
  c.encoder.model_dim = 8;
  c.encoder.n_layers = 1;
  c.encoder.n_heads = 2;
  c.encoder.mlp_ratio = 2;
  c.encoder.max_seq_len = 64;
  c.stage1.context_length = 2;
  c.stage1.pool_k = c.stage2.pool_k = 3;
  c.stage2.slots_pathology = 4;
  c.stage2.slots_genomics = 3;
  c.stage1.epochs = 1;
  c.stage2.epochs = 1;
  c.folds = 2;
  c.combos = {{0, 60}, {30, 30}};
  c.seeds = {5};
  return c;
}

TEST(Grid, RecordCountOrderAndDeterminism) {
  const auto cfg = tiny_config();
  const auto cohort = load_cohort(cfg);
  std::size_t streamed = 0;
  const auto a = run_grid(cfg, cohort, [&](const MetricRecord&) { ++streamed; });
  ASSERT_EQ(a.records.size(), 2u * 3u * 2u);
  EXPECT_EQ(streamed, a.records.size());
  EXPECT_EQ(a.losses.size(), 4u);
  EXPECT_EQ(a.records[0].combo, "0-60");
  EXPECT_EQ(a.records[0].scenario, "pathology-only");
  EXPECT_EQ(a.records[2].scenario, "complete");
  EXPECT_EQ(a.records[3].fold, 1);
  for (const auto& r : a.records) {
    EXPECT_EQ(r.n_test, 20u);
    ASSERT_TRUE(r.cindex.has_value());
    EXPECT_GE(*r.cindex, 0.0);
    EXPECT_LE(*r.cindex, 1.0);
  }
  const auto b = run_grid(cfg, cohort);
  EXPECT_EQ(a.jsonl(), b.jsonl());
}

TEST(Attention, DumpShapesAndSelfSimilarity) {
  const auto cfg = tiny_config();
  const auto cohort = load_cohort(cfg);
  const auto d = fold_data(cohort, kfold_split(cohort, 2, 5)[0], {30, 30}, 5);
  const auto t = train_fold(cfg, d, 5);
  const auto dump = dump_attention(t.s2.model, cohort.patients[0]);
  for (const auto& m : dump.mass) {
    ASSERT_EQ(m.size(), 1u + 4u + 3u);
    double total = 0;
    for (double v : m) total += v;
    EXPECT_NEAR(total, 1.0, 1e-6);  // float attention
  }
  EXPECT_NEAR(dump.cosine_to_complete[static_cast<std::size_t>(Scenario::Complete)], 1.0, 1e-12);
  const auto j = to_json(dump);
  EXPECT_EQ(j["scenarios"]["complete"]["mass"].size(), 8u);

  Patient half = cohort.patients[0];
  half.genomics.reset();
  EXPECT_THROW(dump_attention(t.s2.model, half), Error);
}

TEST(Skeleton, LoadsWhatTrainFoldSaved) {
  const auto cfg = tiny_config();
  const auto cohort = load_cohort(cfg);
  const auto d = fold_data(cohort, kfold_split(cohort, 2, 5)[1], {20, 40}, 5);
  const auto t = train_fold(cfg, d, 5);
  const auto path = std::filesystem::temp_directory_path() / "dispro_harness_stage2.ckpt";
  save_stage2(t.s2.model, path);
  auto s1_p = stage1_skeleton(cfg, cohort, Modality::Pathology, 5);
  auto s1_g = stage1_skeleton(cfg, cohort, Modality::Genomics, 5);
  s1_p.reps.frozen_after_stage1 = s1_g.reps.frozen_after_stage1 = true;
  auto model = init_multipro(s1_p, s1_g, stage2_config(cfg, 5));
  load_stage2(model, path);
  for (Scenario s : kScenarios) {
    const auto a = evaluate(t.s2.model, d.test, s);
    const auto b = evaluate(model, d.test, s);
    EXPECT_EQ(a.cindex, b.cindex);
    EXPECT_EQ(a.n_test, b.n_test);
  }
}

}  // namespace
}  // namespace dispro
