#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace specpl;
using namespace specpl::testing;

namespace {

Mat rows_of(std::initializer_list<std::initializer_list<double>> rows) {
  Mat m(Eigen::Index(rows.size()), Eigen::Index(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

Vec vec_of(std::initializer_list<double> v) {
  Vec out(Eigen::Index(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

}  // namespace

TEST(LossCls, IdenticalRowsGiveLogTwo) {
  const Vec v = vec_of({0.6, 0.8});
  const Mat t = rows_of({{0.3, -0.1}, {0.3, -0.1}});
  EXPECT_NEAR(loss_cls(v, t, 1, 100.0).loss, std::log(2.0), 1e-12);
}

TEST(LossCls, SaturatedSoftmax) {
  const Vec v = vec_of({1, 0, 0});
  const Mat t = rows_of({{0, 1, 0}, {1, 0, 0}, {0, 0, 1}});
  EXPECT_LT(loss_cls(v, t, 1, 100.0).loss, 1e-6);
}

TEST(LossCls, AppendingAnOpposedClassBarelyMatters) {
  std::mt19937_64 rng(61);
  for (int t = 0; t < 20; ++t) {
    const Vec v = random_unit(4, rng);
    const Mat rows = random_mat(3, 4, rng, 0.1);
    Mat extended(4, 4);
    extended << rows, -v.transpose();
    EXPECT_NEAR(loss_cls(v, rows, 0, 100.0).loss, loss_cls(v, extended, 0, 100.0).loss, 1e-6);
  }
}

TEST(LossCls, InvalidArguments) {
  const Vec v = vec_of({1, 0});
  const Mat t = rows_of({{1, 0}, {0, 1}});
  EXPECT_THROW(loss_cls(v, t, 2, 100.0), ParameterError);
  EXPECT_THROW(loss_cls(v, t, 0, 0.0), ParameterError);
  EXPECT_THROW(loss_cls(vec_of({1, 0, 0}), t, 0, 1.0), ParameterError);
}

TEST(LossCls, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(62);
  const Vec v = random_unit(5, rng);
  const Mat t = random_mat(4, 5, rng, 0.2);
  const auto ce = loss_cls(v, t, 2, 10.0);
  const Vec x0 = Vec::Map(t.data(), t.size());
  const Vec numeric = numeric_gradient(
      [&](const Vec& x) { return loss_cls(v, Mat::Map(x.data(), 4, 5), 2, 10.0).loss; }, x0);
  EXPECT_LT(max_relative_error(Vec::Map(ce.grad_rows.data(), ce.grad_rows.size()), numeric), 1e-6);
  const Vec num_v = numeric_gradient([&](const Vec& x) { return loss_cls(x, t, 2, 10.0).loss; }, v);
  EXPECT_LT(max_relative_error(ce.grad_query, num_v), 1e-6);
}

TEST(LossCls, LogitScaleMonotonicity) {
  std::mt19937_64 rng(63);
  for (int t = 0; t < 30; ++t) {
    const Vec v = random_unit(4, rng);
    Mat rows = random_mat(3, 4, rng, 0.01);
    const std::size_t y = rng() % 3;
    // Make the true class strictly the most similar.
    rows.row(Eigen::Index(y)) = ((rows * v).cwiseAbs().maxCoeff() + 0.005) * v.transpose();
    double prev = std::numeric_limits<double>::infinity();
    for (double s : {1.0, 2.0, 5.0, 10.0, 50.0, 100.0}) {
      const double loss = loss_cls(v, rows, y, s).loss;
      EXPECT_LT(loss, prev);
      prev = loss;
    }
  }
}

TEST(PseudoLabels, Examples) {
  const Mat same = rows_of({{0.2, 0.4}, {0.2, 0.4}, {0.2, 0.4}});
  const Vec p = pseudo_labels(vec_of({0.6, 0.8}), same, 100.0);
  for (Eigen::Index c = 0; c < 3; ++c) EXPECT_NEAR(p(c), 1.0 / 3.0, 1e-15);
  const Vec q = pseudo_labels(vec_of({1}), rows_of({{1}, {0}}), 1.0);
  EXPECT_NEAR(q(0), 0.7311, 5e-5);
  EXPECT_NEAR(q(1), 0.2689, 5e-5);
  EXPECT_NEAR(q.sum(), 1.0, 1e-15);
}

TEST(LossSem, AlignedAndOrthogonal) {
  const Vec p1 = vec_of({1});
  EXPECT_NEAR(loss_sem(p1, rows_of({{3, 4}}), vec_of({0.6, 0.8})).loss, 0.0, 1e-15);
  EXPECT_NEAR(loss_sem(p1, rows_of({{0, 2}}), vec_of({1, 0})).loss, 1.0, 1e-15);
  EXPECT_NEAR(loss_sem(p1, rows_of({{-1, 0}}), vec_of({1, 0})).loss, 2.0, 1e-15);
}

TEST(LossSem, DegenerateExpectedDirection) {
  EXPECT_THROW(loss_sem(vec_of({0.5, 0.5}), rows_of({{1, 0}, {-1, 0}}), vec_of({1, 0})), NumericalError);
  EXPECT_THROW(loss_sem(vec_of({1}), rows_of({{1, 0}}), vec_of({1, 0, 0})), ParameterError);
}

TEST(LossSem, RangeAndGradientProperty) {
  std::mt19937_64 rng(64);
  for (int t = 0; t < 20; ++t) {
    const std::size_t c = 1 + rng() % 5, d = 2 + rng() % 5;
    const Vec p = softmax(random_vec(c, rng, 3.0));
    const Mat raw = random_mat(c, d, rng, 2.0);
    const Vec low = random_unit(d, rng);
    const auto sa = loss_sem(p, raw, low);
    ASSERT_GE(sa.loss, 0.0);
    ASSERT_LE(sa.loss, 2.0);
    const Vec x0 = Vec::Map(raw.data(), raw.size());
    const Vec num_raw = numeric_gradient(
        [&](const Vec& x) { return loss_sem(p, Mat::Map(x.data(), raw.rows(), raw.cols()), low).loss; }, x0);
    EXPECT_LT(max_relative_error(Vec::Map(sa.grad_raw.data(), sa.grad_raw.size()), num_raw), 1e-4);
    const Vec num_low = numeric_gradient([&](const Vec& x) { return loss_sem(p, raw, x).loss; }, low);
    EXPECT_LT(max_relative_error(sa.grad_low, num_low), 1e-4);
  }
}

TEST(LossSem, AggregatorReceivesNoGradient) {
  TrainConfig cfg;
  cfg.embed_dim = 8;
  cfg.bank_size = 6;
  cfg.use_gf = cfg.use_gcf = false;
  auto gp = make_gradient_problem(cfg, 4, 5, 65);
  const auto features = prepare_samples(gp.state.encoder, gp.batch, cfg.kernel);
  const std::span<const SampleFeatures> fs(features);
  const std::vector<std::size_t> perm{0, 1, 2, 3, 4};

  auto with = ModelParams::zeros_like(gp.state.params);
  const auto res = evaluate_objective(gp.state.params, gp.state.bank, fs, perm, cfg, &with);
  TrainConfig off = cfg;
  off.use_sem = false;
  auto without = ModelParams::zeros_like(gp.state.params);
  evaluate_objective(gp.state.params, gp.state.bank, fs, perm, off, &without);
  EXPECT_TRUE(flatten_params(with.aggregator) == flatten_params(without.aggregator));
  EXPECT_FALSE(flatten(with.proj_low.mlp) == flatten(without.proj_low.mlp));

  // The semantic term alone, with pseudo-labels held fixed, does not move
  // under aggregator perturbations.
  const Vec a0 = flatten_params(gp.state.params.aggregator);
  const Vec numeric = numeric_gradient(
      [&](const Vec& x) {
        ModelParams p = gp.state.params;
        p.aggregator = unflatten_params(p.aggregator, x);
        return *evaluate_objective(p, gp.state.bank, fs, perm, cfg, nullptr, &res.pseudo_labels).parts.sem;
      },
      a0);
  EXPECT_LT(numeric.cwiseAbs().maxCoeff(), 1e-8);
}

TEST(LossGranule, CollapsedBranchEqualsClassification) {
  std::mt19937_64 rng(66);
  const auto film = FiLMNet::init(4, rng);
  const auto fusion = FusionNet::init(4, rng);
  const Mat text = random_mat(3, 4, rng);
  for (int t = 0; t < 10; ++t) {
    const Vec v = random_unit(4, rng);
    const Vec c = fuse(text.row(1).transpose(), random_unit(4, rng), fusion);
    const Vec vg = film_modulate(c, v, film);
    EXPECT_NEAR(loss_granule_factual(vg, text, 1, 100.0).loss, loss_cls(v, text, 1, 100.0).loss, 1e-12);
  }
}

TEST(LossGranule, UniformLogitsGiveLogClassCount) {
  const Mat same = rows_of({{0.1, 0.2}, {0.1, 0.2}, {0.1, 0.2}, {0.1, 0.2}});
  EXPECT_NEAR(loss_granule_factual(vec_of({1, 0}), same, 0, 100.0).loss, std::log(4.0), 1e-12);
  for (std::size_t y = 0; y < 4; ++y) {
    EXPECT_NEAR(loss_granule_counterfactual(vec_of({0.6, 0.8}), same, y, 100.0).loss, std::log(4.0), 1e-12);
  }
}

TEST(LossGranule, IdentityPermutationMakesCounterfactualEqualFactual) {
  TrainConfig cfg;
  cfg.embed_dim = 8;
  cfg.bank_size = 6;
  auto gp = make_gradient_problem(cfg, 4, 6, 67);
  const auto features = prepare_samples(gp.state.encoder, gp.batch, cfg.kernel);
  const std::vector<std::size_t> perm{0, 1, 2, 3, 4, 5};
  const auto res = evaluate_objective(gp.state.params, gp.state.bank, features, perm, cfg);
  EXPECT_EQ(*res.parts.granule_cf, *res.parts.granule_f);
}

TEST(LossGranule, SwappedBatchSymmetry) {
  TrainConfig cfg;
  cfg.embed_dim = 8;
  cfg.bank_size = 6;
  cfg.anchor = SharedAnchorPolicy::image_embedding;
  auto gp = make_gradient_problem(cfg, 2, 2, 68);
  auto features = prepare_samples(gp.state.encoder, gp.batch, cfg.kernel);
  features[1].image = features[0].image;
  ASSERT_NE(features[0].label, features[1].label);
  const std::vector<std::size_t> swap{1, 0};
  const auto cf = evaluate_objective(gp.state.params, gp.state.bank, features, swap, cfg);
  const std::vector<SampleFeatures> swapped{features[1], features[0]};
  const auto f = evaluate_objective(gp.state.params, gp.state.bank, swapped, swap, cfg);
  EXPECT_NEAR(*cf.parts.granule_cf, *f.parts.granule_f, 1e-12);
}

TEST(TotalLoss, Examples) {
  LossBreakdown parts;
  parts.cls = 1.0;
  parts.sem = 2.0;
  parts.granule_f = 3.0;
  parts.granule_cf = 4.0;
  EXPECT_NEAR(total_loss(parts), 1.9, 1e-12);
  EXPECT_EQ(total_loss(parts), total_loss(parts));
  parts.weights = LossWeights{0.0, 0.0, 0.0};
  EXPECT_EQ(total_loss(parts), 1.0);
  parts.weights.sem = -0.1;
  EXPECT_THROW(total_loss(parts), ParameterError);
}

TEST(TotalLoss, BreakdownInvariantsProperty) {
  std::mt19937_64 rng(69);
  for (int t = 0; t < 10; ++t) {
    TrainConfig cfg;
    cfg.embed_dim = 6;
    cfg.bank_size = 5;
    cfg.weights = LossWeights{double(rng() % 10) / 10.0, double(rng() % 10) / 10.0, double(rng() % 10) / 10.0};
    auto gp = make_gradient_problem(cfg, 3, 6, 70 + t);
    const auto features = prepare_samples(gp.state.encoder, gp.batch, cfg.kernel);
    const auto perm = random_permutation(features.size(), rng);
    const auto r = evaluate_objective(gp.state.params, gp.state.bank, features, perm, cfg).parts;
    EXPECT_GE(r.cls, 0.0);
    EXPECT_GE(*r.sem, 0.0);
    EXPECT_LE(*r.sem, 2.0);
    EXPECT_GE(*r.granule_f, 0.0);
    EXPECT_GE(*r.granule_cf, 0.0);
    EXPECT_NEAR(r.total,
                r.cls + cfg.weights.sem * *r.sem + cfg.weights.granule_f * *r.granule_f +
                    cfg.weights.granule_cf * *r.granule_cf,
                1e-9);
  }
}
