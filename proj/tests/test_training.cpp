#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "mdust/checkpoint.hpp"
#include "mdust/phantom.hpp"
#include "mdust/training.hpp"

using namespace mdust;

namespace {

const PreprocessOptions kTiny{0.75, {32, 32, 8}, true};

std::vector<PreparedSample> volumes(std::size_t n, std::uint64_t base) {
  std::vector<PreparedSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto v = gen_phantom(PhantomSpec::random(base + i));
    v.id = "v" + std::to_string(i);
    out.push_back(prepare(v, kTiny));
  }
  return out;
}

std::vector<PreparedSample> slices(std::size_t n, std::uint64_t base) {
  std::vector<PreparedSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto s = extract_recist_slice(gen_phantom(PhantomSpec::random(base + i))).image;
    s.id = "s" + std::to_string(i);
    out.push_back(prepare(s, kTiny));
  }
  return out;
}

StageConfig tiny(int stage, std::size_t steps) {
  StageConfig c = StageConfig::defaults(stage);
  c.model = ModelConfig::miniature();
  c.steps = steps;
  c.seed = 11;
  c.lr = 1e-3;
  if (stage == 1) c.batch = 2;
  return c;
}

// Evaluation sample whose prediction will be compared against `label`.
PreparedSample with_label(const PreparedSample& s, BinaryMask label) {
  PreparedSample r = s;
  r.full_label = std::move(label);
  return r;
}

}  // namespace

TEST(Stage1, LossStaysFiniteAndCheckpointIsEncoderOnly) {
  const auto corpus = volumes(6, 1000);
  const auto r = run_stage1<float>(tiny(1, 100), corpus);
  ASSERT_EQ(r.report.losses.size(), 100u);
  for (double l : r.report.losses) ASSERT_TRUE(std::isfinite(l));
  EXPECT_TRUE(r.report.warnings.empty());
  EXPECT_EQ(r.checkpoint.stage, "stage1");
  ASSERT_FALSE(r.checkpoint.tensors.empty());
  std::size_t n = 0;
  for (const auto& [name, t] : r.checkpoint.tensors) {
    EXPECT_TRUE(is_encoder_parameter(name)) << name;
    n += t.size();
  }
  EXPECT_EQ(n, r.model.encoder_parameter_count());
  EXPECT_LT(n, r.model.parameter_count());
}

TEST(Stage1, ZeroLearningRateLeavesParametersUnchanged) {
  const auto corpus = volumes(4, 1100);
  auto cfg = tiny(1, 5);
  cfg.lr = 0.0;
  const auto r = run_stage1<float>(cfg, corpus);
  const Model<float> fresh(cfg.model, Assembly::Pretrain, cfg.seed);
  const auto a = fresh.named_parameters(), b = r.model.named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].first, b[i].first);
    ASSERT_EQ(a[i].second.value().storage(), b[i].second.value().storage()) << a[i].first;
  }
}

TEST(Stage1, BatchOneWarnsAboutContrastiveLoss) {
  auto cfg = tiny(1, 2);
  cfg.batch = 1;
  const auto r = run_stage1<float>(cfg, volumes(2, 1200));
  ASSERT_EQ(r.report.warnings.size(), 1u);
  EXPECT_NE(r.report.warnings[0].find("NT-Xent"), std::string::npos);
  EXPECT_NE(report_summary(r.report).find("warning:"), std::string::npos);
}

TEST(Stage1, RejectsBadInputs) {
  EXPECT_THROW(run_stage1<float>(tiny(1, 1), {}), std::invalid_argument);
  auto cfg = tiny(1, 1);
  cfg.lr = -1.0;
  EXPECT_THROW(run_stage1<float>(cfg, volumes(2, 1300)), std::invalid_argument);
  // Desk-sized samples do not fit the miniature grid.
  const auto desk = prepare(gen_phantom(PhantomSpec::random(3)), PreprocessOptions::desk());
  EXPECT_THROW(run_stage1<float>(tiny(1, 1), {desk, desk}), std::invalid_argument);
}

TEST(Stage2, LoadsPretrainedEncoderExactly) {
  const auto s1 = run_stage1<float>(tiny(1, 10), volumes(4, 1400));
  auto cfg = tiny(2, 0);
  const auto s2 = run_stage2<float>(cfg, slices(3, 1500), &s1.checkpoint);
  // With zero steps the encoder is the stage-1 encoder.
  for (const auto& [name, var] : s2.model.named_parameters()) {
    if (!is_encoder_parameter(name)) continue;
    const auto* t = s1.checkpoint.find(name);
    ASSERT_NE(t, nullptr) << name;
    ASSERT_EQ(t->storage(), var.value().storage()) << name;
  }
  // An independently seeded model that loads the same encoder computes the
  // same features.
  Model<float> other(cfg.model, Assembly::Segment2D, 999);
  load_encoder(s1.checkpoint, other);
  const auto x = constant(slices(1, 1600)[0].input);
  NoGradGuard ng;
  const auto f1 = other.encode(x), f2 = s2.model.encode(x);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(f1.levels[k].value().storage(), f2.levels[k].value().storage());
  EXPECT_EQ(s2.checkpoint.stage, "stage2");
  EXPECT_EQ(s2.checkpoint.tensors.size(), s2.model.named_parameters().size());
}

TEST(Stage3, ValidationSelectsArgmaxStep) {
  const auto train = volumes(3, 1700), val = volumes(2, 1800);
  auto cfg = tiny(3, 40);
  cfg.validate_every = 10;
  const auto r = run_stage3<float>(cfg, train, val);
  const auto& v = r.report.validation;
  ASSERT_EQ(v.size(), 4u);
  EXPECT_EQ(v.back().first, 40u);
  std::size_t want = 0;
  double best = -1.0;
  for (const auto& [step, dsc] : v)
    if (dsc > best) best = dsc, want = step;
  EXPECT_EQ(r.report.selected_step, want);
  // The returned weights are the selected ones.
  EXPECT_EQ(summarize(evaluate(r.model, val).dscs()).mean, best);
}

TEST(Stage3, DeterministicModeIsReproducible) {
  const auto train = volumes(3, 1900), val = volumes(1, 2000);
  auto cfg = tiny(3, 8);
  cfg.deterministic = true;
  cfg.validate_every = 4;
  const auto a = run_stage3<float>(cfg, train, val), b = run_stage3<float>(cfg, train, val);
  EXPECT_EQ(a.report.losses, b.report.losses);
  EXPECT_EQ(report_summary(a.report), report_summary(b.report));
  EXPECT_EQ(encode_checkpoint(a.checkpoint), encode_checkpoint(b.checkpoint));
  cfg.seed += 1;
  EXPECT_NE(run_stage3<float>(cfg, train, val).report.losses, a.report.losses);
}

TEST(Stage3, RejectsUnlabeledOrMismatchedSamples) {
  auto train = volumes(2, 2100);
  train[1].target.reset();
  EXPECT_THROW(run_stage3<float>(tiny(3, 1), train, {}), std::invalid_argument);
  EXPECT_THROW(run_stage3<float>(tiny(3, 1), slices(2, 2200), {}), std::invalid_argument);
  EXPECT_THROW(run_stage2<float>(tiny(2, 1), volumes(2, 2300)), std::invalid_argument);
}

TEST(Evaluate, GroundTruthAndEmptyPredictionConventions) {
  const Model<float> model(ModelConfig::miniature(), Assembly::Segment3D, 3);
  const auto base = volumes(2, 2400);
  // Whatever the untrained network predicts becomes the reference label.
  std::vector<PreparedSample> self;
  for (const auto& s : base) {
    NoGradGuard ng;
    const auto logits = model.segment(constant(s.input));
    self.push_back(with_label(s, postprocess(logits.value(), s.full_dims, s.full_spacing)));
  }
  const auto r = evaluate(model, self);
  for (const auto& l : r.lesions) {
    EXPECT_EQ(l.dsc, 1.0);
    if (l.voxels_pred > 0) EXPECT_EQ(l.hd_mm, 0.0);
  }

  // Make the network predict background everywhere through the head bias.
  Model<float> empty(ModelConfig::miniature(), Assembly::Segment3D, 3);
  for (auto& [name, p] : empty.named_parameters()) {
    if (name.find("head") == std::string::npos) continue;
    auto& t = p.mutable_value();
    if (t.rank() == 1 && t.size() == 2) {
      t[0] = 1e4f;
      t[1] = -1e4f;
    }
  }
  const auto e = evaluate(empty, base);
  for (const auto& l : e.lesions) {
    EXPECT_EQ(l.voxels_pred, 0u);
    EXPECT_EQ(l.dsc, 0.0);
    EXPECT_FALSE(l.hd_mm.has_value());
  }
  EXPECT_NE(report_csv(e).find(",undefined,"), std::string::npos);
  EXPECT_THROW(evaluate(model, {}), std::invalid_argument);
}

TEST(Evaluate, SelfComparisonHasNoTStatistic) {
  RunReport r;
  r.lesions = {{"a", 0.5, 1.0, 10, 12}, {"b", 0.7, 2.0, 10, 9}, {"c", 0.9, std::nullopt, 5, 0}};
  EXPECT_THROW(compare_reports(r, r), std::domain_error);
  RunReport other = r;
  other.lesions[0].dsc = 0.6;
  other.lesions[1].dsc = 0.9;
  const auto t = compare_reports(other, r);
  EXPECT_GT(t.t, 0.0);
  EXPECT_EQ(t.df, 2.0);
}

TEST(Report, CsvRoundTripAndSummary) {
  RunReport r;
  r.stage = 3;
  r.lesions = {{"l1", 0.8125, 3.25, 100, 90}, {"l2", 1.0 / 3.0, std::nullopt, 7, 0}};
  const auto back = parse_report_csv(report_csv(r));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].id, "l1");
  EXPECT_EQ(back[0].dsc, 0.8125);
  EXPECT_EQ(back[0].hd_mm, 3.25);
  EXPECT_EQ(back[1].dsc, 1.0 / 3.0);
  EXPECT_FALSE(back[1].hd_mm.has_value());
  EXPECT_EQ(back[1].voxels_true, 7u);
  EXPECT_THROW(parse_report_csv("wrong header\n"), FormatError);
  const auto text = report_summary(r);
  EXPECT_NE(text.find("stage: 3"), std::string::npos);
  EXPECT_NE(text.find("DSC"), std::string::npos);
  r.wall_seconds = 123.0;
  EXPECT_EQ(report_summary(r), text);
}
