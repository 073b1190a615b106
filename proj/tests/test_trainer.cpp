#include <gtest/gtest.h>

#include <numeric>
#include <sstream>

#include "test_support.hpp"

using namespace specpl;
using namespace specpl::testing;

namespace {

struct Fixture {
  RunConfig cfg;
  PreparedSplit split;
};

Fixture small_run(std::size_t epochs, Band identity = Band::low) {
  Fixture f;
  f.cfg.data.identity_band = identity;
  f.cfg.train.epochs = epochs;
  f.split = prepare_split(generate_dataset(f.cfg.data, f.cfg.samples_per_class()), f.cfg);
  return f;
}

TrainState fresh_state(const Fixture& f) {
  const auto& tc = f.cfg.train;
  auto st = init_state(f.split.base_train, f.split.num_base, f.split.grid, tc, make_encoder(f.split.grid, tc));
  fill_bank(st, f.split.base_train, tc);
  return st;
}

std::vector<SampleFeatures> first_batch(const Fixture& f) {
  return {f.split.base_train.begin(), f.split.base_train.begin() + std::ptrdiff_t(f.cfg.train.batch_size)};
}

double mean_total(std::span<const LossBreakdown> h) {
  double acc = 0.0;
  for (const auto& b : h) acc += b.total;
  return acc / double(h.size());
}

}  // namespace

TEST(ToyVisualEncoder, UnitNormDeterministicAndScaleInvariant) {
  std::mt19937_64 rng(81);
  const Grid g{4, 8, 8};
  const auto enc = ToyVisualEncoder::make(g, 16, 3);
  EXPECT_EQ(enc, ToyVisualEncoder::make(g, 16, 3));
  for (int t = 0; t < 20; ++t) {
    const auto z = random_latent(g, rng);
    const Vec v = encode_visual(enc, z);
    EXPECT_NEAR(v.norm(), 1.0, 1e-6);
    EXPECT_EQ(v, encode_visual(enc, z));
    EXPECT_EQ(v, encode_visual(enc, 2.f * z));
  }
  EXPECT_THROW(encode_visual(enc, LatentTensor(Grid{4, 8, 9})), ParameterError);
}

TEST(Adam, FirstStepIsTheLearningRateTimesTheGradientSign) {
  std::mt19937_64 rng(82);
  const auto f = small_run(1);
  auto st = fresh_state(f);
  const ModelParams before = st.params;
  ModelParams grad = ModelParams::zeros_like(st.params);
  grad.text = random_mat(std::size_t(grad.text.rows()), std::size_t(grad.text.cols()), rng);
  st.adam.apply(st.params, grad, 0.01);
  const Mat step = before.text - st.params.text;
  for (Eigen::Index n = 0; n < step.size(); ++n) {
    const double g = grad.text.data()[n];
    EXPECT_NEAR(step.data()[n], 0.01 * g / (std::abs(g) + 1e-8), 1e-15);
  }
  EXPECT_EQ(before.film.mlp.w1, st.params.film.mlp.w1);
}

TEST(TrainStep, ZeroLearningRateLeavesParametersUnchanged) {
  auto f = small_run(1);
  f.cfg.train.learning_rate = 0.0;
  auto st = fresh_state(f);
  const ModelParams before = st.params;
  const auto batch = first_batch(f);
  train_step(st, std::span<const SampleFeatures>(batch), f.cfg.train);
  EXPECT_TRUE(st.params == before);
  EXPECT_EQ(st.step, 1u);
  EXPECT_EQ(st.history.size(), 1u);
}

TEST(TrainStep, BankOnlyBreakdown) {
  auto f = small_run(1);
  auto& tc = f.cfg.train;
  tc.use_sem = tc.use_gf = tc.use_gcf = false;
  auto st = fresh_state(f);
  const auto batch = first_batch(f);
  const auto parts = train_step(st, std::span<const SampleFeatures>(batch), tc);
  EXPECT_FALSE(parts.sem.has_value());
  EXPECT_FALSE(parts.granule_f.has_value());
  EXPECT_FALSE(parts.granule_cf.has_value());
  EXPECT_EQ(parts.total, parts.cls);
}

TEST(TrainStep, RequiresFullBank) {
  const auto f = small_run(1);
  const auto& tc = f.cfg.train;
  auto st = init_state(f.split.base_train, f.split.num_base, f.split.grid, tc, make_encoder(f.split.grid, tc));
  const auto batch = first_batch(f);
  EXPECT_THROW(train_step(st, std::span<const SampleFeatures>(batch), tc), StateError);
}

TEST(TrainStep, FrozenSetIsUntouchedByOptimizerSteps) {
  const auto f = small_run(1);
  auto st = fresh_state(f);
  std::ostringstream bank_before, bank_after;
  st.bank.dump(bank_before);
  const auto encoder = st.encoder;
  const auto batch = first_batch(f);
  for (int s = 0; s < 5; ++s) train_step(st, std::span<const SampleFeatures>(batch), f.cfg.train);
  st.bank.dump(bank_after);
  EXPECT_EQ(bank_before.str(), bank_after.str());
  EXPECT_EQ(encoder, st.encoder);
}

TEST(TrainStep, NonFiniteLossNamesTheTerm) {
  auto f = small_run(1);
  f.cfg.train.use_bank = false;
  auto st = fresh_state(f);
  st.params.text.row(0).setConstant(1e308);
  const auto batch = first_batch(f);
  try {
    train_step(st, std::span<const SampleFeatures>(batch), f.cfg.train);
    FAIL() << "expected a divergence error";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.term(), "cls");
  }
}

TEST(Fit, TwoHundredStepsReduceTheLoss) {
  auto f = small_run(0);
  const std::size_t per_epoch = (f.split.base_train.size() + f.cfg.train.batch_size - 1) / f.cfg.train.batch_size;
  f.cfg.train.epochs = (200 + per_epoch - 1) / per_epoch;
  const auto st = train_base(f.split, f.cfg);
  ASSERT_GE(st.history.size(), 200u);
  const std::span<const LossBreakdown> h(st.history);
  EXPECT_LT(mean_total(h.last(20)), mean_total(h.first(20)));
  EXPECT_EQ(st.epoch_history.size(), f.cfg.train.epochs);
}

TEST(Fit, ZeroEpochsReturnsTheInitializedState) {
  const auto f = small_run(0);
  const auto st = train_base(f.split, f.cfg);
  EXPECT_TRUE(st.history.empty());
  EXPECT_TRUE(st.epoch_history.empty());
  EXPECT_EQ(st.step, 0u);
  EXPECT_TRUE(st.params == fresh_state(f).params);
  EXPECT_TRUE(st.bank.full());
}

TEST(Fit, SeededRunsAreBitwiseReproducible) {
  const auto f = small_run(3);
  const auto a = train_base(f.split, f.cfg), b = train_base(f.split, f.cfg);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i], b.history[i]);
  EXPECT_TRUE(a.params == b.params);
  EXPECT_EQ(a.bank, b.bank);
}

TEST(Fit, CounterfactualTermChangesTheFiLMParameters) {
  auto f = small_run(3, Band::high);
  const auto with = train_base(f.split, f.cfg);
  f.cfg.train.use_gcf = false;
  const auto without = train_base(f.split, f.cfg);
  EXPECT_GT((with.params.film.mlp.w2 - without.params.film.mlp.w2).norm(), 1e-6);
}

TEST(Fit, RejectsEmptyInputs) {
  TrainConfig cfg;
  EXPECT_THROW(fit(std::span<const SampleFeatures>(), 2, Grid{1, 4, 4}, cfg), ParameterError);
  EXPECT_THROW(fit(LatentCache{}, cfg), ParameterError);
}

TEST(Ablation, DisabledTermsContributeNothing) {
  TrainConfig cfg;
  cfg.embed_dim = 8;
  cfg.bank_size = 6;
  const auto gp = make_gradient_problem(cfg, 4, 6, 83);
  const auto features = prepare_samples(gp.state.encoder, gp.batch, cfg.kernel);
  std::mt19937_64 rng(84);
  const auto perm = random_permutation(features.size(), rng);

  struct Case {
    bool TrainConfig::*flag;
    double LossWeights::*weight;
  };
  for (const Case c : {Case{&TrainConfig::use_sem, &LossWeights::sem},
                       Case{&TrainConfig::use_gf, &LossWeights::granule_f},
                       Case{&TrainConfig::use_gcf, &LossWeights::granule_cf}}) {
    TrainConfig off = cfg, zero = cfg;
    off.*c.flag = false;
    zero.weights.*c.weight = 0.0;
    auto g_off = ModelParams::zeros_like(gp.state.params), g_zero = g_off;
    const auto r_off = evaluate_objective(gp.state.params, gp.state.bank, features, perm, off, &g_off);
    const auto r_zero = evaluate_objective(gp.state.params, gp.state.bank, features, perm, zero, &g_zero);
    EXPECT_EQ(r_off.parts.total, r_zero.parts.total);
    EXPECT_LT((flatten_params(g_off.film) - flatten_params(g_zero.film)).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((g_off.text - g_zero.text).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((flatten(g_off.proj_low.mlp) - flatten(g_zero.proj_low.mlp)).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((flatten(g_off.proj_high.mlp) - flatten(g_zero.proj_high.mlp)).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(GradientCheck, EveryTrainableScalarMatches) {
  TrainConfig cfg;
  cfg.embed_dim = 8;
  cfg.bank_size = 6;
  const auto gp = make_gradient_problem(cfg, 4, 5, 85);
  const auto report = gradient_check(gp.state, gp.batch, gp.config);
  EXPECT_LT(report.max_relative_error(), 1e-4) << report.worst.name;
  EXPECT_EQ(report.scalars_checked, gp.state.params.scalar_count());
  ASSERT_EQ(report.excluded.size(), 2u);
  for (const auto& e : report.excluded) {
    EXPECT_EQ(e.analytic_max_abs, 0.0) << e.name;
    EXPECT_GT(e.numeric_max_abs, 0.0) << e.name;
  }
  EXPECT_EQ(report.excluded[0].name, "bank.entries");
  EXPECT_EQ(report.excluded[1].name, "teacher.latents");
  for (const auto& p : report.parameters) {
    EXPECT_EQ(p.name.rfind("bank", 0), std::string::npos);
  }
}

TEST(GradientCheck, HoldsAcrossAnchorPoliciesAndAblations) {
  for (auto anchor : {SharedAnchorPolicy::refined_text_by_label, SharedAnchorPolicy::image_embedding}) {
    TrainConfig cfg;
    cfg.embed_dim = 6;
    cfg.bank_size = 4;
    cfg.anchor = anchor;
    const auto gp = make_gradient_problem(cfg, 3, 4, 86);
    EXPECT_LT(gradient_check(gp.state, gp.batch, gp.config).max_relative_error(), 1e-4) << to_string(anchor);
  }
  TrainConfig raw;
  raw.embed_dim = 6;
  raw.bank_size = 4;
  raw.use_bank = false;
  const auto gp = make_gradient_problem(raw, 3, 4, 87);
  const auto report = gradient_check(gp.state, gp.batch, gp.config);
  EXPECT_LT(report.max_relative_error(), 1e-4);
  EXPECT_EQ(report.excluded.size(), 1u);
}
