#pragma once

#include <span>
#include <vector>

namespace hte::stats {

double sum(std::span<const double> x);
double mean(std::span<const double> x);

// Sample variance (divisor n - 1); 0 for fewer than two values.
double sample_variance(std::span<const double> x);
double sample_sd(std::span<const double> x);

// Population standard deviation (divisor n).
double population_sd(std::span<const double> x);

// Linear-interpolation quantile (Hyndman-Fan type 7, the R/NumPy default).
// `pct` is in [0, 100]. `sorted` must be ascending and non-empty.
double percentile_sorted(std::span<const double> sorted, double pct);
double percentile(std::span<const double> x, double pct);
double median(std::span<const double> x);

double pearson_correlation(std::span<const double> x, std::span<const double> y);

double normal_cdf(double z);
double normal_quantile(double prob);

// Two-sided p-value of z against a standard normal.
double normal_two_sided_p(double z);

// Two-sided p-value of t against Student's t with `df` degrees of freedom.
double student_t_two_sided_p(double t, double df);

// Upper tail P(F > f) of the F(df1, df2) distribution.
double f_upper_tail(double f, double df1, double df2);

}  // namespace hte::stats
