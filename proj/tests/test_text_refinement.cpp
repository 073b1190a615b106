#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace specpl;
using namespace specpl::testing;

namespace {

Vec standardize(const Vec& x, double eps = 1e-5) {
  const double mean = x.mean();
  const Vec c = (x.array() - mean).matrix();
  return c / std::sqrt(c.squaredNorm() / double(x.size()) + eps);
}

Aggregator random_aggregator(std::size_t d, std::mt19937_64& rng) {
  auto agg = Aggregator::init(d, rng);
  agg.mlp.w2 = random_mat(d, d, rng, 0.5);
  agg.mlp.b1 = random_vec(d, rng, 0.2);
  agg.mlp.b2 = random_vec(d, rng, 0.2);
  agg.ln.gain = (Vec::Ones(Eigen::Index(d)) + random_vec(d, rng, 0.2));
  agg.ln.bias = random_vec(d, rng, 0.2);
  return agg;
}

}  // namespace

TEST(Refine, ZeroAggregatorStandardizes) {
  std::mt19937_64 rng(41);
  const auto agg = Aggregator::zero(6);
  for (int t = 0; t < 20; ++t) {
    const Vec x = random_vec(6, rng, 3.0);
    EXPECT_LT((refine(x, random_vec(6, rng), agg) - standardize(x)).norm(), 1e-12);
  }
}

TEST(Refine, ConstantVectorMapsToZero) {
  Vec t(2), r(2);
  t << 1, 1;
  r << 0.3, -0.2;
  const Vec out = refine(t, r, Aggregator::zero(2));
  EXPECT_EQ(out(0), 0.0);
  EXPECT_EQ(out(1), 0.0);
}

TEST(Refine, WidthAndFinitenessChecks) {
  const auto agg = Aggregator::zero(3);
  EXPECT_THROW(refine(Vec::Ones(3), Vec::Ones(2), agg), ParameterError);
  EXPECT_THROW(refine(Vec::Ones(4), Vec::Ones(4), agg), ParameterError);
  Vec bad = Vec::Ones(3);
  bad(1) = std::nan("");
  EXPECT_THROW(refine(bad, Vec::Ones(3), agg), NumericalError);
}

TEST(Refine, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t d = 3 + rng() % 5;
    const auto agg = random_aggregator(d, rng);
    const Vec t = random_vec(d, rng), r = random_vec(d, rng), probe = random_vec(d, rng);
    RefineTrace tr;
    refine(t, r, agg, &tr);
    auto grad = Aggregator::zeros_like(agg);
    const auto g = refine_backward(agg, tr, probe, grad);

    const Vec params = flatten_params(agg);
    const Vec num_params = numeric_gradient(
        [&](const Vec& x) { return probe.dot(refine(t, r, unflatten_params(agg, x))); }, params);
    EXPECT_LT(max_relative_error(flatten_params(grad), num_params), 1e-4);
    const Vec num_t = numeric_gradient([&](const Vec& x) { return probe.dot(refine(x, r, agg)); }, t);
    EXPECT_LT(max_relative_error(g.text, num_t), 1e-4);
    const Vec num_r = numeric_gradient([&](const Vec& x) { return probe.dot(refine(t, x, agg)); }, r);
    EXPECT_LT(max_relative_error(g.context, num_r), 1e-4);
  }
}

TEST(RefineAll, SingleClassMatchesRefine) {
  std::mt19937_64 rng(43);
  const auto bank = SemanticBank::from_entries(random_mat(4, 5, rng));
  const auto agg = random_aggregator(5, rng);
  TextFeatureSet fs;
  fs.raw = random_mat(1, 5, rng);
  const auto out = refine_all(fs, bank, agg);
  const Vec t = fs.raw.row(0).transpose();
  EXPECT_EQ(Vec(out.refined.row(0).transpose()), refine(t, soft_retrieve(bank, t).context, agg));
}

TEST(RefineAll, RowPermutationEquivarianceProperty) {
  std::mt19937_64 rng(44);
  for (int t = 0; t < 20; ++t) {
    const std::size_t c = 2 + rng() % 6, d = 3 + rng() % 5;
    const auto bank = SemanticBank::from_entries(random_mat(3, d, rng));
    const auto agg = random_aggregator(d, rng);
    TextFeatureSet fs, ps;
    fs.raw = random_mat(c, d, rng);
    const auto perm = random_permutation(c, rng);
    ps.raw.resize(fs.raw.rows(), fs.raw.cols());
    for (std::size_t i = 0; i < c; ++i) ps.raw.row(Eigen::Index(i)) = fs.raw.row(Eigen::Index(perm[i]));
    const auto a = refine_all(fs, bank, agg), b = refine_all(ps, bank, agg);
    for (std::size_t i = 0; i < c; ++i) {
      ASSERT_EQ(b.refined.row(Eigen::Index(i)), a.refined.row(Eigen::Index(perm[i])));
    }
  }
}

TEST(RefineAll, RecomputationIsBitwiseIdentical) {
  std::mt19937_64 rng(45);
  const auto bank = SemanticBank::from_entries(random_mat(6, 4, rng));
  const auto agg = random_aggregator(4, rng);
  TextFeatureSet fs;
  fs.raw = random_mat(5, 4, rng);
  EXPECT_EQ(refine_all(fs, bank, agg).refined, refine_all(fs, bank, agg).refined);
}

TEST(RefineAll, RequiresFullBank) {
  SemanticBank bank(2, 3);
  TextFeatureSet fs;
  fs.raw = Mat::Ones(1, 3);
  EXPECT_THROW(refine_all(fs, bank, Aggregator::zero(3)), StateError);
}

TEST(RefineAll, RawGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(46);
  const auto bank = SemanticBank::from_entries(random_mat(4, 4, rng), 0.1, 0.5);
  const auto agg = random_aggregator(4, rng);
  TextFeatureSet fs;
  fs.raw = random_mat(3, 4, rng);
  const Mat probe = random_mat(3, 4, rng);
  RefineAllTrace tr;
  refine_all(fs, bank, agg, &tr);
  auto grad = Aggregator::zeros_like(agg);
  const Mat g_raw = refine_all_backward(bank, agg, tr, probe, grad);
  const Vec x0 = Vec::Map(fs.raw.data(), fs.raw.size());
  const Vec numeric = numeric_gradient(
      [&](const Vec& x) {
        TextFeatureSet f;
        f.raw = Mat::Map(x.data(), 3, 4);
        return (refine_all(f, bank, agg).refined.array() * probe.array()).sum();
      },
      x0);
  EXPECT_LT(max_relative_error(Vec::Map(g_raw.data(), g_raw.size()), numeric), 1e-4);
}

TEST(Mix, EndpointsAndMidpoint) {
  TextFeatureSet fs;
  fs.raw = Mat(1, 2);
  fs.raw << 2, 0;
  fs.refined = Mat(1, 2);
  fs.refined << 0, 2;
  fs.eta = 1.0;
  EXPECT_EQ(mix(fs), fs.refined);
  fs.eta = 0.0;
  EXPECT_EQ(mix(fs), fs.raw);
  fs.eta = 0.5;
  EXPECT_DOUBLE_EQ(mix(fs)(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(mix(fs)(0, 1), 1.0);
}

TEST(Mix, EtaOutOfRange) {
  TextFeatureSet fs;
  fs.raw = fs.refined = Mat::Ones(1, 2);
  for (double eta : {-0.01, 1.01, std::nan("")}) {
    fs.eta = eta;
    EXPECT_THROW(mix(fs), ParameterError);
  }
}

TEST(Mix, AffineInEtaProperty) {
  std::mt19937_64 rng(47);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 100; ++t) {
    TextFeatureSet fs;
    fs.raw = random_mat(3, 4, rng, 5.0);
    fs.refined = random_mat(3, 4, rng, 5.0);
    fs.eta = u(rng);
    const Mat lhs = mix(fs) - fs.raw;
    const Mat rhs = fs.eta * (fs.refined - fs.raw);
    ASSERT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-9);
  }
}
