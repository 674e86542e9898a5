#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fairalign::stats {

inline constexpr double kDefaultAlpha = 0.05;
/// Variance substituted for zero-variance groups in Welch's ANOVA.
inline constexpr double kZeroVarianceEpsilon = 1e-9;

/// I_x(a, b). Lentz continued fraction, with a hypergeometric power series
/// as fallback when the fraction fails to converge.
double regularized_incomplete_beta(double a, double b, double x);

/// Q(s, x) = Gamma(s, x) / Gamma(s).
double regularized_upper_incomplete_gamma(double s, double x);

/// P(F > f) for the F(df1, df2) distribution.
double f_survival(double f, double df1, double df2);

/// P(X > x) for the chi-squared(df) distribution.
double chi_squared_survival(double x, double df);

struct TestResult {
  double statistic = 0.0;
  double df1 = 0.0;
  std::optional<double> df2;
  double p_value = 1.0;
  bool significant = false;
};

struct WelchResult {
  TestResult test;
  // Groups whose sample variance was zero and got kZeroVarianceEpsilon.
  std::vector<std::string> epsilon_groups;
};

WelchResult welch_anova(const std::map<std::string, std::vector<double>>& groups,
                        double alpha = kDefaultAlpha);

using CountTable = std::vector<std::vector<std::int64_t>>;

/// Rows are groups, columns are categories. All-zero columns are dropped
/// before the test.
TestResult pearson_chi_squared(const CountTable& table, double alpha = kDefaultAlpha);

}  // namespace fairalign::stats
