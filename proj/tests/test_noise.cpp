#include "esd/noise.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace esd;
using esd::testing::random_spd;
using esd::testing::uniform;

TEST(GenGaussParams, RejectsInvalidInputs) {
  EXPECT_THROW(GenGaussParams(0.0, 1.0, Mat::Identity(2, 2)), std::invalid_argument);
  EXPECT_THROW(GenGaussParams(1.0, -1.0, Mat::Identity(2, 2)), std::invalid_argument);
  Mat asym(2, 2);
  asym << 1, 0.5, 0, 1;
  EXPECT_THROW(GenGaussParams(1.0, 1.0, asym), std::invalid_argument);
  Mat indefinite(2, 2);
  indefinite << 1, 2, 2, 1;
  EXPECT_THROW(GenGaussParams(1.0, 1.0, indefinite), std::invalid_argument);
}

TEST(GenGaussParams, CachedFactorReproducesInverse) {
  Rng rng(3);
  for (int n = 1; n <= 5; ++n) {
    const GenGaussParams p(1.3, 0.7, random_spd(n, rng));
    const Mat l = p.whitening();
    EXPECT_LT(((l.transpose() * l) * p.sigma() - Mat::Identity(n, n)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(GenGaussParams, JsonRoundTrip) {
  Mat s(2, 2);
  s << 2.0, 0.3, 0.3, 0.5;
  const GenGaussParams p(1.4, 1.8, s);
  const auto q = GenGaussParams::from_json(p.to_json());
  EXPECT_EQ(q.beta(), 1.4);
  EXPECT_EQ(q.lambda(), 1.8);
  EXPECT_EQ(q.sigma(), s);
}

TEST(MahalanobisNorm, Examples) {
  EXPECT_EQ(mahalanobis_norm(Vec::Zero(2), GenGaussParams(2, 1, Mat::Identity(2, 2))), 0.0);
  EXPECT_DOUBLE_EQ(mahalanobis_norm(Eigen::Vector2d(3, 4), GenGaussParams(2, 1, Mat::Identity(2, 2))), 5.0);
  EXPECT_DOUBLE_EQ(mahalanobis_norm(Eigen::Vector2d(2, 0), GenGaussParams(2, 1, Eigen::Vector2d(4, 1).asDiagonal())), 1.0);
  EXPECT_THROW(mahalanobis_norm(Vec::Zero(3), GenGaussParams(2, 1, Mat::Identity(2, 2))), DimensionError);
}

TEST(MahalanobisNorm, MatchesQuadraticForm) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + trial % 4;
    const GenGaussParams p(2, 1, random_spd(n, rng));
    const Vec u = standard_normal(n, rng);
    const double direct = std::sqrt(u.dot(p.sigma().ldlt().solve(u)));
    EXPECT_NEAR(mahalanobis_norm(u, p), direct, 1e-12 * direct);
  }
}

TEST(LogDensity, Examples) {
  const GenGaussParams g(2, 1, Mat::Identity(2, 2));
  EXPECT_EQ(gg_log_density_unnorm(g, Vec::Zero(2)), 0.0);
  EXPECT_DOUBLE_EQ(gg_log_density_unnorm(g, Eigen::Vector2d(1, 1)), -1.0);
  const GenGaussParams gg(1.4, 1.8, Mat::Identity(2, 2));
  EXPECT_NEAR(gg_log_density_unnorm(gg, Eigen::Vector2d(1, 0)), -1.8 / 1.4, 1e-15);
}

TEST(Potential, DerivativeMatchesFiniteDifference) {
  const std::vector<Potential> pots{Potential::power_law(1.4, 1.8), Potential::power_law(0.5, 2.0),
                                    Potential::power_law(3.0, 0.3), Potential::student_t(3.0, 2.0)};
  for (const auto& pot : pots) {
    for (double r = 0.01; r <= 100.0; r *= 1.37) {
      const double h = 1e-5 * r;
      const double fd = (pot.v(r + h) - pot.v(r - h)) / (2 * h);
      EXPECT_NEAR(pot.v_prime(r), fd, 1e-6 * std::abs(fd)) << "r=" << r;
    }
  }
}

TEST(KernelScore, Examples) {
  const GenGaussParams id(2, 1, Mat::Identity(2, 2));
  const Vec u = Eigen::Vector2d(0.3, -1.2);
  EXPECT_LT((elliptic_kernel_score(Potential::power_law(2, 1), u, id) + u).norm(), 1e-15);
  const double lambda = 1.7;
  EXPECT_LT((elliptic_kernel_score(Potential::power_law(1, lambda), u, id) + lambda * u / u.norm()).norm(), 1e-14);
  const Vec st = elliptic_kernel_score(Potential::student_t(3, 2), Eigen::Vector2d(1, 0), id);
  EXPECT_NEAR(st(0), -1.25, 1e-14);
  EXPECT_NEAR(st(1), 0.0, 1e-15);
}

TEST(KernelScore, ZeroArgument) {
  const GenGaussParams id(2, 1, Mat::Identity(2, 2));
  EXPECT_THROW(elliptic_kernel_score(Potential::power_law(1.4, 1.0), Vec::Zero(2), id), SingularityError);
  EXPECT_EQ(elliptic_kernel_score(Potential::power_law(2.0, 1.0), Vec::Zero(2), id), Vec::Zero(2));
  EXPECT_EQ(elliptic_kernel_score(Potential::power_law(3.0, 1.0), Vec::Zero(2), id), Vec::Zero(2));
}

TEST(KernelScore, MatchesFiniteDifferenceOfLogDensity) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + trial % 4;
    const GenGaussParams p(uniform(rng, 0.5, 3.0), uniform(rng, 0.2, 3.0), random_spd(n, rng));
    const Potential pot = trial % 5 == 0 ? Potential::student_t(uniform(rng, 1.0, 10.0), n) : Potential::of(p);
    Vec u = standard_normal(n, rng);
    u *= uniform(rng, 0.1, 10.0) / u.norm();
    const Vec s = elliptic_kernel_score(pot, u, p);
    Vec fd(n);
    for (int k = 0; k < n; ++k) {
      const double h = 1e-6 * std::max(1.0, std::abs(u(k)));
      Vec a = u, b = u;
      a(k) += h;
      b(k) -= h;
      fd(k) = (log_density_unnorm(pot, a, p) - log_density_unnorm(pot, b, p)) / (2 * h);
    }
    EXPECT_LT(esd::testing::rel_err(s, fd), 1e-5) << "trial " << trial;
    if (std::holds_alternative<PowerLaw>(pot.kind())) {
      const Vec dir = p.sigma_inv() * u;
      EXPECT_NEAR(s.dot(dir) / (s.norm() * dir.norm()), -1.0, 1e-12);
    }
  }
}

TEST(Sampler, GaussianSpecialCaseCovariance) {
  Rng rng(17);
  const double s2 = 0.49;
  const GenGaussParams p(2, 1, Mat::Identity(2, 2) * s2);
  const Eigen::Index count = 100000;
  const Batch x = gg_sample(p, count, rng);
  const Vec mean = x.colwise().mean().transpose();
  const Mat centered = x.rowwise() - mean.transpose();
  const Mat cov = centered.transpose() * centered / static_cast<double>(count - 1);
  // Var of a sample variance of N(0, s2): 2 s2^2 / N; of a covariance: s2^2 / N.
  const double se_diag = std::sqrt(2.0 / count) * s2;
  const double se_off = std::sqrt(1.0 / count) * s2;
  EXPECT_NEAR(cov(0, 0), s2, 3 * se_diag);
  EXPECT_NEAR(cov(1, 1), s2, 3 * se_diag);
  EXPECT_NEAR(cov(0, 1), 0.0, 3 * se_off);
}

// Radial density r^{n-1} exp(-lambda r^beta / beta) integrated by Simpson's rule.
static double radial_moment(double beta, double lambda, int n, double power) {
  const double upper = std::pow(60.0 * beta / lambda, 1.0 / beta);
  const int steps = 200000;
  const double h = upper / steps;
  double num = 0.0, den = 0.0;
  for (int i = 0; i <= steps; ++i) {
    const double r = i * h;
    const double w = (i == 0 || i == steps) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    const double dens = std::pow(r, n - 1) * std::exp(-lambda * std::pow(r, beta) / beta);
    num += w * dens * std::pow(r, power);
    den += w * dens;
  }
  return num / den;
}

TEST(Sampler, RadialOracleAgreesWithClosedForm) {
  for (const auto& [beta, lambda, n] : std::vector<std::tuple<double, double, int>>{{1.4, 1.8, 2}, {1.0, 1.0, 3}, {0.7, 2.5, 1}, {2.0, 0.5, 4}}) {
    EXPECT_NEAR(radial_moment(beta, lambda, n, beta), n / lambda, 1e-6 * n / lambda);
  }
}

TEST(Sampler, PowerMomentWithinFourStandardErrors) {
  Rng rng(23);
  struct Case {
    double beta, lambda;
    int n;
  };
  for (const Case c : {Case{1.4, 1.8, 2}, Case{1.0, 0.5, 3}, Case{0.6, 2.0, 2}, Case{2.5, 1.2, 1}, Case{2.0, 1.0, 5}}) {
    const GenGaussParams p(c.beta, c.lambda, random_spd(c.n, rng));
    const Eigen::Index count = 100000;
    const Batch x = gg_sample(p, count, rng);
    Vec m(count);
    for (Eigen::Index i = 0; i < count; ++i) m(i) = std::pow(mahalanobis_norm(x.row(i).transpose(), p), c.beta);
    const double mean = m.mean();
    const double se = std::sqrt((m.array() - mean).square().sum() / (count - 1) / count);
    const double oracle = radial_moment(c.beta, c.lambda, c.n, c.beta);
    EXPECT_NEAR(mean, oracle, 4 * se) << "beta=" << c.beta << " lambda=" << c.lambda << " n=" << c.n;
  }
}

TEST(Sampler, RadialDistributionMatchesNumericCdf) {
  // Kolmogorov-Smirnov style check of the radius against the integrated radial density.
  Rng rng(29);
  const double beta = 1.4, lambda = 1.8;
  const int n = 2;
  const GenGaussParams p(beta, lambda, Mat::Identity(n, n));
  const Eigen::Index count = 20000;
  const Batch x = gg_sample(p, count, rng);
  std::vector<double> r(count);
  for (Eigen::Index i = 0; i < count; ++i) r[i] = x.row(i).norm();
  std::sort(r.begin(), r.end());
  const double upper = 12.0;
  const int steps = 120000;
  const double h = upper / steps;
  std::vector<double> cdf(steps + 1, 0.0);
  for (int i = 1; i <= steps; ++i) {
    auto f = [&](double t) { return std::pow(t, n - 1) * std::exp(-lambda * std::pow(t, beta) / beta); };
    cdf[i] = cdf[i - 1] + 0.5 * h * (f((i - 1) * h) + f(i * h));
  }
  for (auto& c : cdf) c /= cdf.back();
  double ks = 0.0;
  for (Eigen::Index i = 0; i < count; ++i) {
    const int k = std::min(steps, static_cast<int>(r[i] / h));
    ks = std::max(ks, std::abs(cdf[k] - (i + 0.5) / count));
  }
  EXPECT_LT(ks, 1.63 / std::sqrt(static_cast<double>(count)));  // 1% level
}

TEST(Sampler, ReproducibleForFixedSeed) {
  const GenGaussParams p(1.4, 1.8, Mat::Identity(2, 2));
  Rng a(7), b(7);
  EXPECT_EQ(gg_sample(p, 100, a), gg_sample(p, 100, b));
}
