#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "dmoco/eval.hpp"

using namespace dmoco;

namespace {

// Brute-force ranked sweep: each sample's rank is the number of samples
// ahead of it (higher score, or equal score and lower index); precision is
// accumulated at every positive in rank order.
double ap_oracle(const std::vector<double>& scores, const std::vector<int>& labels) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> at_rank(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < n; ++j) ahead += scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    at_rank[ahead] = i;
  }
  double sum = 0;
  std::size_t hits = 0, positives = 0;
  for (int l : labels) positives += l != 0;
  for (std::size_t r = 0; r < n; ++r)
    if (labels[at_rank[r]]) sum += static_cast<double>(++hits) / static_cast<double>(r + 1);
  return sum / static_cast<double>(positives);
}

Eigen::MatrixXd to_eigen(const linalg::Matrix& m, std::size_t d) {
  Eigen::MatrixXd out(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m[i * d + j];
  return out;
}

Eigen::MatrixXd eigen_sqrt(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

double frechet_oracle(const FeatureGaussian& a, const FeatureGaussian& b) {
  const std::size_t d = a.dim();
  const auto s1 = to_eigen(a.sigma, d), s2 = to_eigen(b.sigma, d);
  const Eigen::MatrixXd h = eigen_sqrt(s1);
  Eigen::MatrixXd inner = h * s2 * h;
  inner = 0.5 * (inner + inner.transpose());
  double mean = 0;
  for (std::size_t i = 0; i < d; ++i) mean += (a.mu[i] - b.mu[i]) * (a.mu[i] - b.mu[i]);
  return mean + s1.trace() + s2.trace() - 2.0 * eigen_sqrt(inner).trace();
}

FeatureGaussian random_gaussian(Rng& rng, std::size_t d, std::size_t m) {
  auto f = rng.normal_tensor<double>({m, d});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 1; c < d; ++c) f[r * d + c] += 0.5 * f[r * d + c - 1];
  return fit_gaussian(f);
}

FeatureGaussian one_d(double mu, double var) { return FeatureGaussian{{mu}, {var}}; }

}  // namespace

TEST(PrecisionRecall, Examples) {
  const std::vector<int> preds{0, 0, 1, 1}, labels{0, 1, 1, 1};
  const auto [p, r] = precision_recall(preds, labels, 1);
  EXPECT_EQ(p, 1.0);
  EXPECT_NEAR(r, 2.0 / 3.0, 1e-15);
  for (int k = 0; k < 2; ++k) EXPECT_EQ(precision_recall(labels, labels, k), std::make_pair(1.0, 1.0));
  const std::vector<int> none{0, 0, 0, 0};
  EXPECT_EQ(precision_recall(none, labels, 1), std::make_pair(0.0, 0.0));
  EXPECT_THROW(precision_recall(preds, std::vector<int>{1}, 0), ContractError);
}

TEST(AveragePrecision, Examples) {
  EXPECT_NEAR(average_precision(std::vector<double>{0.9, 0.8, 0.7}, std::vector<int>{1, 0, 1}), (1 + 2.0 / 3) / 2,
              1e-15);
  EXPECT_EQ(average_precision(std::vector<double>{0.9, 0.8, 0.1, 0.0}, std::vector<int>{1, 1, 0, 0}), 1.0);
  EXPECT_EQ(average_precision(std::vector<double>{0.1, 0.5, 0.3}, std::vector<int>{1, 1, 1}), 1.0);
  EXPECT_THROW(average_precision(std::vector<double>{0.1, 0.2}, std::vector<int>{0, 0}), UndefinedError);
}

TEST(AveragePrecision, TiesBrokenByIndex) {
  // Equal scores: the earlier index ranks first.
  EXPECT_EQ(average_precision(std::vector<double>{0.5, 0.5}, std::vector<int>{1, 0}), 1.0);
  EXPECT_EQ(average_precision(std::vector<double>{0.5, 0.5}, std::vector<int>{0, 1}), 0.5);
}

TEST(AveragePrecision, MatchesRankOracleAndIsRankOnly) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = static_cast<std::size_t>(rng.integer(1, 40));
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = std::round(rng.uniform() * 10) / 10;  // frequent ties
      y[i] = rng.bernoulli(0.4);
    }
    y[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(n) - 1))] = 1;
    const double ap = average_precision(s, y);
    ASSERT_EQ(ap, ap_oracle(s, y));
    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = std::exp(3 * s[i]) - 7;
    ASSERT_EQ(average_precision(t, y), ap);
  }
}

TEST(PrCurve, RecallMonotoneAndBounded) {
  Rng rng(2);
  std::vector<double> s(50);
  std::vector<int> y(50);
  for (std::size_t i = 0; i < 50; ++i) {
    s[i] = rng.uniform();
    y[i] = rng.bernoulli(0.3) || i == 0;
  }
  const auto c = pr_curve(s, y);
  for (std::size_t i = 0; i < c.recall.size(); ++i) {
    EXPECT_TRUE(c.precision[i] >= 0 && c.precision[i] <= 1);
    if (i) {
      EXPECT_GE(c.recall[i], c.recall[i - 1]);
      EXPECT_LE(c.thresholds[i], c.thresholds[i - 1]);
    }
  }
  EXPECT_EQ(c.recall.back(), 1.0);
}

TEST(MeanAp, PerfectAndMissingClass) {
  Tensor<double> scores(Shape{4, 4});
  const std::vector<int> labels{0, 1, 2, 3};
  for (int i = 0; i < 4; ++i) scores[static_cast<std::size_t>(i * 4 + i)] = 1.0;
  EXPECT_EQ(mean_ap(scores, labels).map, 1.0);
  EXPECT_THROW(mean_ap(scores, std::vector<int>{0, 1, 2, 2}), UndefinedError);
}

TEST(MeanAp, RandomScorerNearPrevalence) {
  Rng rng(3);
  const std::size_t n = 1000;
  for (int trial = 0; trial < 5; ++trial) {
    Tensor<double> scores(Shape{n, 4});
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 4);
    for (auto& v : scores.data()) v = rng.uniform();
    const auto m = mean_ap(scores, labels);
    for (double ap : m.per_class) EXPECT_NEAR(ap, 0.25, 0.05);
  }
}

TEST(Frechet, OneDimensionalClosedForm) {
  EXPECT_NEAR(frechet_distance(one_d(0, 1), one_d(3, 1)), 9.0, 1e-12);
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const double m1 = rng.uniform(-5, 5), m2 = rng.uniform(-5, 5), s1 = rng.uniform(0.01, 4), s2 = rng.uniform(0.01, 4);
    EXPECT_NEAR(frechet_distance(one_d(m1, s1 * s1), one_d(m2, s2 * s2)), (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2),
                1e-8);
  }
}

TEST(Frechet, IdentitySymmetryAndEigenOracle) {
  Rng rng(5);
  for (std::size_t d : {2u, 5u, 16u, 64u}) {
    const auto a = random_gaussian(rng, d, 3 * d), b = random_gaussian(rng, d, 3 * d);
    EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-8);
    const double ab = frechet_distance(a, b);
    EXPECT_GE(ab, 0.0);
    EXPECT_NEAR(ab, frechet_distance(b, a), 1e-9 * std::max(1.0, ab));
    EXPECT_NEAR(ab, frechet_oracle(a, b), 1e-8 * std::max(1.0, ab));
  }
}

TEST(Frechet, RankDeficientCovariance) {
  Rng rng(6);
  const auto a = random_gaussian(rng, 8, 4), b = random_gaussian(rng, 8, 5);
  EXPECT_NEAR(frechet_distance(a, b), frechet_oracle(a, b), 1e-6);
}

TEST(Frechet, Errors) {
  EXPECT_THROW(frechet_distance(one_d(0, 1), FeatureGaussian{{0, 0}, {1, 0, 0, 1}}), ContractError);
  EXPECT_THROW(frechet_distance(one_d(0, -1), one_d(0, 1)), NumericError);
  EXPECT_NO_THROW(frechet_distance(one_d(0, -1e-7), one_d(0, 1)));
}

TEST(FitGaussian, UnbiasedAndSymmetric) {
  const Tensor<double> f(Shape{3, 2}, std::vector<double>{1, 2, 3, 4, 5, 9});
  const auto g = fit_gaussian(f);
  EXPECT_NEAR(g.mu[0], 3.0, 1e-15);
  EXPECT_NEAR(g.sigma[0], 4.0, 1e-15);
  EXPECT_NEAR(g.sigma[1], g.sigma[2], 1e-15);
  EXPECT_NEAR(g.sigma[1], (-2 * -3.0 + 0 + 2 * 4.0) / 2, 1e-15);
  EXPECT_THROW(fit_gaussian(Tensor<double>(Shape{1, 2})), ParameterError);
}

TEST(InceptionScore, Boundaries) {
  const Tensor<double> same(Shape{3, 4}, std::vector<double>{0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4});
  EXPECT_NEAR(inception_style_score(same), 1.0, 1e-15);
  Tensor<double> onehot(Shape{8, 4});
  for (std::size_t i = 0; i < 8; ++i) onehot[i * 4 + i % 4] = 1.0;
  EXPECT_NEAR(inception_style_score(onehot), 4.0, 1e-12);
  EXPECT_THROW(inception_style_score(Tensor<double>(Shape{1, 4}, 0.3)), ContractError);
}

TEST(InceptionScore, BoundedByClassCount) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = static_cast<std::size_t>(rng.integer(1, 30));
    Tensor<double> p(Shape{m, 4});
    for (std::size_t r = 0; r < m; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 4; ++c) s += p[r * 4 + c] = std::pow(rng.uniform(), 4);
      for (std::size_t c = 0; c < 4; ++c) p[r * 4 + c] /= s;
    }
    const double is = inception_style_score(p);
    EXPECT_GE(is, 1.0 - 1e-12);
    EXPECT_LE(is, 4.0 + 1e-12);
  }
}

TEST(Probe, SeparableFeatures) {
  Rng rng(8);
  const std::size_t n = 200, C = 6;
  Tensor<double> f(Shape{n, C});
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<int>(i % 4);
    for (std::size_t c = 0; c < C; ++c) f[i * C + c] = 0.3 * rng.normal();
    f[i * C + static_cast<std::size_t>(y[i])] += 3.0;
  }
  ProbeConfig cfg;
  cfg.epochs = 20;
  const auto probe = train_probe_on_features(f, y, cfg, rng);
  EXPECT_GE(accuracy(probe.predict(f), y), 0.99);
  const auto probs = probe.probabilities(f);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 4; ++c) s += probs[r * 4 + c];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Probe, ZeroEpochsKeepsInitialisation) {
  Rng r1(9), r2(9);
  Tensor<double> f = r1.normal_tensor<double>({8, 3});
  r2.normal_tensor<double>({8, 3});
  const std::vector<int> y{0, 1, 2, 3, 0, 1, 2, 3};
  ProbeConfig cfg;
  cfg.epochs = 0;
  const auto p = train_probe_on_features(f, y, cfg, r1);
  const auto init = init_probe(f, r2);
  EXPECT_EQ(p.w, init.w);
  EXPECT_EQ(p.b, init.b);
  EXPECT_THROW(train_probe_on_features(Tensor<double>(Shape{1, 3}), std::vector<int>{}, cfg, r1), ParameterError);
}

TEST(Probe, EncoderStaysFrozen) {
  const EncoderConfig enc{4, 8};
  const auto params = init_encoder<double>(10, enc);
  const auto before = params;
  Rng rng(11);
  const auto images = rng.normal_tensor<double>({8, 1, 8, 8}, 0.3);
  const auto f0 = extract_features(params, images);
  const std::vector<int> y{0, 1, 2, 3, 0, 1, 2, 3};
  ProbeConfig cfg;
  cfg.epochs = 3;
  const auto probe = train_probe(params, images, y, cfg, rng);
  EXPECT_EQ(params, before);
  EXPECT_EQ(extract_features(params, images), f0);
  EXPECT_EQ(probe.feature_dim(), enc.feature_dim());
}
