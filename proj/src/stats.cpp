#include "fairalign/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "fairalign/error.hpp"

namespace fairalign::stats {
namespace {

constexpr double kTiny = 1e-300;
constexpr double kTolerance = 1e-15;
constexpr int kMaxIterations = 10000;

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw Error(Errc::kDomainError, std::string(what) + " must be finite");
}

// log(x^a (1-x)^b / B(a, b))
double beta_prefactor_log(double a, double b, double x) {
  return std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
}

// Continued fraction for I_x(a,b) (modified Lentz). Returns nullopt when it
// does not converge.
std::optional<double> beta_continued_fraction(double a, double b, double x) {
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIterations; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1.0) < kTolerance) return h;
  }
  return std::nullopt;
}

// I_x(a,b) = x^a (1-x)^b / (a B(a,b)) * 2F1(a+b, 1; a+1; x)
double beta_series(double a, double b, double x) {
  double term = 1.0;
  double sum = 1.0;
  for (int n = 0; n < 10 * kMaxIterations; ++n) {
    term *= (a + b + n) / (a + 1.0 + n) * x;
    sum += term;
    if (std::fabs(term) < kTolerance * std::fabs(sum)) break;
  }
  return std::exp(beta_prefactor_log(a, b, x)) * sum / a;
}

double lower_gamma_series(double s, double x) {
  double ap = s;
  double sum = 1.0 / s;
  double del = sum;
  for (int n = 0; n < kMaxIterations; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::fabs(del) < std::fabs(sum) * kTolerance) break;
  }
  return sum * std::exp(-x + s * std::log(x) - std::lgamma(s));
}

double upper_gamma_continued_fraction(double s, double x) {
  double b = x + 1.0 - s;
  double c = 1.0 / kTiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= kMaxIterations; ++i) {
    const double an = -i * (i - s);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1.0) < kTolerance) break;
  }
  return std::exp(-x + s * std::log(x) - std::lgamma(s)) * h;
}

double sample_variance(const std::vector<double>& xs, double mean) {
  double ss = 0.0;
  for (double v : xs) ss += (v - mean) * (v - mean);
  return ss / static_cast<double>(xs.size() - 1);
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0) || !std::isfinite(a) || !std::isfinite(b)) {
    throw Error(Errc::kDomainError, "incomplete beta needs a > 0 and b > 0");
  }
  if (!(x >= 0.0 && x <= 1.0)) throw Error(Errc::kDomainError, "incomplete beta needs x in [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;

  // Use the side of the symmetry I_x(a,b) = 1 - I_{1-x}(b,a) where the
  // continued fraction converges quickly.
  const bool flip = x > (a + 1.0) / (a + b + 2.0);
  const double aa = flip ? b : a;
  const double bb = flip ? a : b;
  const double xx = flip ? 1.0 - x : x;

  double value;
  if (auto cf = beta_continued_fraction(aa, bb, xx)) {
    value = std::exp(beta_prefactor_log(aa, bb, xx)) * *cf / aa;
  } else {
    value = beta_series(aa, bb, xx);
  }
  value = flip ? 1.0 - value : value;
  return std::clamp(value, 0.0, 1.0);
}

double regularized_upper_incomplete_gamma(double s, double x) {
  if (!(s > 0.0) || !std::isfinite(s)) throw Error(Errc::kDomainError, "incomplete gamma needs s > 0");
  if (!(x >= 0.0)) throw Error(Errc::kDomainError, "incomplete gamma needs x >= 0");
  if (x == 0.0) return 1.0;
  if (std::isinf(x)) return 0.0;
  double q;
  if (x < s + 1.0) {
    q = 1.0 - lower_gamma_series(s, x);
  } else {
    q = upper_gamma_continued_fraction(s, x);
  }
  return std::clamp(q, 0.0, 1.0);
}

double f_survival(double f, double df1, double df2) {
  if (!(df1 > 0.0) || !(df2 > 0.0)) throw Error(Errc::kDomainError, "F distribution needs positive df");
  if (std::isnan(f)) throw Error(Errc::kDomainError, "F statistic is NaN");
  if (f <= 0.0) return 1.0;
  if (std::isinf(f)) return 0.0;
  return regularized_incomplete_beta(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f));
}

double chi_squared_survival(double x, double df) {
  if (!(df > 0.0)) throw Error(Errc::kDomainError, "chi-squared needs positive df");
  if (std::isnan(x)) throw Error(Errc::kDomainError, "chi-squared statistic is NaN");
  if (x <= 0.0) return 1.0;
  return regularized_upper_incomplete_gamma(df / 2.0, x / 2.0);
}

WelchResult welch_anova(const std::map<std::string, std::vector<double>>& groups, double alpha) {
  const std::size_t k = groups.size();
  if (k < 2) throw Error(Errc::kTooFewGroups, "Welch's ANOVA needs at least two groups");

  WelchResult out;
  std::vector<double> n, mean, weight;
  n.reserve(k);
  mean.reserve(k);
  weight.reserve(k);
  for (const auto& [name, xs] : groups) {
    if (xs.size() < 2) {
      throw Error(Errc::kTooFewSamples, "group '" + name + "' has fewer than two samples");
    }
    for (double v : xs) require_finite(v, "sample");
    const double nj = static_cast<double>(xs.size());
    const double mj = std::accumulate(xs.begin(), xs.end(), 0.0) / nj;
    double var = sample_variance(xs, mj);
    if (var == 0.0) {
      var = kZeroVarianceEpsilon;
      out.epsilon_groups.push_back(name);
    }
    n.push_back(nj);
    mean.push_back(mj);
    weight.push_back(nj / var);
  }

  const double kd = static_cast<double>(k);
  const double total_weight = std::accumulate(weight.begin(), weight.end(), 0.0);
  double weighted_mean = 0.0;
  for (std::size_t j = 0; j < k; ++j) weighted_mean += weight[j] * mean[j];
  weighted_mean /= total_weight;

  const bool equal_means =
      std::all_of(mean.begin(), mean.end(), [&](double m) { return m == mean.front(); });

  double between = 0.0;
  double lambda = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    if (!equal_means) between += weight[j] * (mean[j] - weighted_mean) * (mean[j] - weighted_mean);
    const double h = 1.0 - weight[j] / total_weight;
    lambda += h * h / (n[j] - 1.0);
  }
  const double numerator = between / (kd - 1.0);
  const double denominator = 1.0 + (2.0 * (kd - 2.0) / (kd * kd - 1.0)) * lambda;

  out.test.statistic = numerator / denominator;
  out.test.df1 = kd - 1.0;
  out.test.df2 = (kd * kd - 1.0) / (3.0 * lambda);
  out.test.p_value = f_survival(out.test.statistic, out.test.df1, *out.test.df2);
  out.test.significant = out.test.p_value <= alpha;
  return out;
}

TestResult pearson_chi_squared(const CountTable& table, double alpha) {
  if (table.size() < 2) throw Error(Errc::kDegenerateTable, "chi-squared needs at least two rows");
  const std::size_t cols = table.front().size();
  for (const auto& row : table) {
    if (row.size() != cols) throw Error(Errc::kDegenerateTable, "ragged count table");
    for (auto v : row) {
      if (v < 0) throw Error(Errc::kDomainError, "negative count");
    }
  }

  std::vector<std::size_t> kept;
  for (std::size_t c = 0; c < cols; ++c) {
    const bool nonzero = std::any_of(table.begin(), table.end(), [c](const auto& row) { return row[c] != 0; });
    if (nonzero) kept.push_back(c);
  }
  if (kept.size() < 2) {
    throw Error(Errc::kDegenerateTable, "fewer than two non-empty columns");
  }

  std::vector<double> row_total(table.size(), 0.0);
  std::vector<double> col_total(kept.size(), 0.0);
  double grand = 0.0;
  for (std::size_t r = 0; r < table.size(); ++r) {
    for (std::size_t j = 0; j < kept.size(); ++j) {
      const double v = static_cast<double>(table[r][kept[j]]);
      row_total[r] += v;
      col_total[j] += v;
      grand += v;
    }
  }
  for (std::size_t r = 0; r < table.size(); ++r) {
    if (row_total[r] == 0.0) {
      throw Error(Errc::kDegenerateTable, "row " + std::to_string(r) + " has a zero marginal");
    }
  }

  double chi2 = 0.0;
  for (std::size_t r = 0; r < table.size(); ++r) {
    for (std::size_t j = 0; j < kept.size(); ++j) {
      const double expected = row_total[r] * col_total[j] / grand;
      const double diff = static_cast<double>(table[r][kept[j]]) - expected;
      chi2 += diff * diff / expected;
    }
  }

  TestResult out;
  out.statistic = chi2;
  out.df1 = static_cast<double>((table.size() - 1) * (kept.size() - 1));
  out.p_value = chi_squared_survival(chi2, out.df1);
  out.significant = out.p_value <= alpha;
  return out;
}

}  // namespace fairalign::stats
