#include "fairalign/stats.hpp"

#include <cmath>
#include <random>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <gtest/gtest.h>

#include "test_util.hpp"

namespace fairalign::stats {
namespace {

// Reference values computed with scipy.stats / scipy.special.
TEST(Special, FrozenReferenceValues) {
  EXPECT_NEAR(chi_squared_survival(3.841, 1), 0.050013683763956804, 1e-12);
  EXPECT_NEAR(chi_squared_survival(20.0 / 3.0, 1), 0.009823274507519235, 1e-12);
  EXPECT_NEAR(f_survival(1.5, 1, 4), 0.2878641347266907, 1e-12);
  EXPECT_NEAR(regularized_incomplete_beta(2, 3, 0.5), 0.6875, 1e-14);
  EXPECT_NEAR(regularized_upper_incomplete_gamma(1, std::log(2.0)), 0.5, 1e-14);
}

TEST(Special, Boundaries) {
  EXPECT_EQ(regularized_incomplete_beta(2, 3, 0.0), 0.0);
  EXPECT_EQ(regularized_incomplete_beta(2, 3, 1.0), 1.0);
  EXPECT_EQ(f_survival(0.0, 3, 7), 1.0);
  EXPECT_EQ(chi_squared_survival(0.0, 4), 1.0);
  EXPECT_ERRC(regularized_incomplete_beta(-1, 3, 0.5), Errc::kDomainError);
  EXPECT_ERRC(regularized_incomplete_beta(1, 3, 1.5), Errc::kDomainError);
  EXPECT_ERRC(f_survival(1.0, 0, 3), Errc::kDomainError);
}

TEST(Special, ChiSquaredTwoDofClosedForm) {
  for (double x : {0.1, 1.0, 2.5, 7.0, 30.0}) {
    EXPECT_NEAR(chi_squared_survival(x, 2), std::exp(-x / 2), 1e-13);
  }
}

TEST(Special, BetaSymmetry) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ab(0.2, 40.0), ux(0.001, 0.999);
  for (int i = 0; i < 300; ++i) {
    const double a = ab(rng), b = ab(rng), x = ux(rng);
    EXPECT_NEAR(regularized_incomplete_beta(a, b, x) + regularized_incomplete_beta(b, a, 1 - x), 1.0, 1e-10);
  }
}

TEST(Special, AgreesWithBoostMath) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> ab(0.3, 80.0), ux(0.0005, 0.9995), uf(0.01, 12.0);
  for (int i = 0; i < 500; ++i) {
    const double a = ab(rng), b = ab(rng), x = ux(rng);
    EXPECT_NEAR(regularized_incomplete_beta(a, b, x), boost::math::ibeta(a, b, x), 1e-10) << a << " " << b << " " << x;
    const double s = ab(rng), y = uf(rng) * s / 4.0;
    EXPECT_NEAR(regularized_upper_incomplete_gamma(s, y), boost::math::gamma_q(s, y), 1e-10) << s << " " << y;
    const double d1 = std::ceil(ab(rng) / 4), d2 = ab(rng), f = uf(rng);
    EXPECT_NEAR(f_survival(f, d1, d2), boost::math::cdf(boost::math::complement(boost::math::fisher_f(d1, d2), f)),
                1e-10);
    EXPECT_NEAR(chi_squared_survival(f * 3, d1),
                boost::math::cdf(boost::math::complement(boost::math::chi_squared(d1), f * 3)), 1e-10);
  }
}

double welch_t_squared(const std::vector<double>& a, const std::vector<double>& b) {
  auto moments = [](const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, s / static_cast<double>(v.size() - 1)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double se2 = va / static_cast<double>(a.size()) + vb / static_cast<double>(b.size());
  return (ma - mb) * (ma - mb) / se2;
}

TEST(Welch, TwoGroupsEqualsSquaredWelchT) {
  EXPECT_NEAR(welch_anova({{"a", {1, 2, 3}}, {"b", {2, 3, 4}}}).test.statistic, 1.5, 1e-12);
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> z;
  std::uniform_int_distribution<int> n(2, 30);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> a(n(rng)), b(n(rng));
    for (auto& x : a) x = z(rng) * 2.0;
    for (auto& x : b) x = 0.5 + z(rng);
    const auto r = welch_anova({{"a", a}, {"b", b}});
    const double t2 = welch_t_squared(a, b);
    EXPECT_NEAR(r.test.statistic, t2, 1e-8 * std::max(1.0, t2));
    EXPECT_EQ(r.test.df1, 1.0);
  }
}

TEST(Welch, ThreeGroupReference) {
  const auto r = welch_anova({{"a", {1, 2, 4, 7}}, {"b", {3, 5, 6}}, {"c", {2, 2, 3, 9, 10}}});
  EXPECT_NEAR(r.test.statistic, 0.3395125531964418, 1e-12);
  EXPECT_EQ(r.test.df1, 2.0);
  EXPECT_NEAR(*r.test.df2, 5.9650605115201945, 1e-10);
  EXPECT_NEAR(r.test.p_value, 0.7250314406424034, 1e-10);
  EXPECT_FALSE(r.test.significant);
}

TEST(Welch, EqualMeansGiveUnitPValue) {
  const auto r = welch_anova({{"a", {1, 2, 3}}, {"b", {3, 2, 1}}, {"c", {2, 1, 3}}});
  EXPECT_EQ(r.test.statistic, 0.0);
  EXPECT_EQ(r.test.p_value, 1.0);
}

TEST(Welch, ZeroVarianceUsesEpsilon) {
  const auto r = welch_anova({{"a", {1, 1, 1}}, {"b", {2, 3, 4}}});
  EXPECT_EQ(r.epsilon_groups, std::vector<std::string>{"a"});
  EXPECT_TRUE(std::isfinite(r.test.statistic));
}

TEST(Welch, Errors) {
  EXPECT_ERRC(welch_anova({{"a", {1, 2}}}), Errc::kTooFewGroups);
  EXPECT_ERRC(welch_anova({{"a", {1, 2}}, {"b", {1}}}), Errc::kTooFewSamples);
  EXPECT_ERRC(welch_anova({{"a", {1, NAN}}, {"b", {1, 2}}}), Errc::kDomainError);
}

TEST(ChiSquared, TwoByTwoReference) {
  // [[10, 20], [20, 10]]: statistic 20/3 with one degree of freedom.
  const auto r = pearson_chi_squared({{10, 20}, {20, 10}});
  EXPECT_NEAR(r.statistic, 20.0 / 3.0, 1e-12);
  EXPECT_EQ(r.df1, 1.0);
  EXPECT_NEAR(r.p_value, 0.009823274507519235, 1e-12);
  EXPECT_TRUE(r.significant);
}

TEST(ChiSquared, ZeroColumnsDropped) {
  const auto a = pearson_chi_squared({{10, 0, 20}, {20, 0, 10}});
  EXPECT_EQ(a.df1, 1.0);
  EXPECT_NEAR(a.statistic, 20.0 / 3.0, 1e-12);
}

TEST(ChiSquared, IdenticalRowsGiveUnitPValue) {
  const auto r = pearson_chi_squared({{3, 5, 2, 7, 1}, {3, 5, 2, 7, 1}, {3, 5, 2, 7, 1}});
  EXPECT_EQ(r.statistic, 0.0);
  EXPECT_EQ(r.p_value, 1.0);
}

TEST(ChiSquared, Degenerate) {
  EXPECT_ERRC(pearson_chi_squared({{1, 2}}), Errc::kDegenerateTable);
  EXPECT_ERRC(pearson_chi_squared({{1, 0}, {3, 0}}), Errc::kDegenerateTable);
  EXPECT_ERRC(pearson_chi_squared({{0, 0}, {3, 4}}), Errc::kDegenerateTable);
  EXPECT_ERRC(pearson_chi_squared({{1, 2}, {3}}), Errc::kDegenerateTable);
  EXPECT_ERRC(pearson_chi_squared({{1, -2}, {3, 4}}), Errc::kDomainError);
}

TEST(ChiSquared, PermutationInvariant) {
  const auto a = pearson_chi_squared({{4, 9, 1}, {7, 2, 5}, {3, 3, 8}});
  const auto b = pearson_chi_squared({{5, 7, 2}, {8, 3, 3}, {1, 4, 9}});
  EXPECT_NEAR(a.statistic, b.statistic, 1e-12);
  EXPECT_EQ(a.df1, 4.0);
}

}  // namespace
}  // namespace fairalign::stats
