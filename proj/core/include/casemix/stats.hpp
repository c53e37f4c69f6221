#pragma once

#include <Eigen/Dense>

#include <span>

namespace casemix::stats {

/// Upper tail P(X >= x) of a chi-square with `df` degrees of freedom.
double chi2_upper(double x, double df);
double normal_cdf(double z);
double normal_quantile(double p);

double mean(std::span<const double> v);
/// Unbiased (n-1) sample variance; NaN for fewer than two values.
double variance(std::span<const double> v);

/// Linear-interpolation percentile (q in [0,100]) of unsorted data.
double percentile(std::span<const double> v, double q);

/// Kolmogorov-Smirnov statistic of data against Uniform(0,1) and its
/// asymptotic p-value.
struct KsResult {
    double statistic = 0.0;
    double p_value = 1.0;
};
KsResult ks_uniform(std::span<const double> v);

/// Smallest over largest absolute eigenvalue of a symmetric matrix, reported as
/// the condition number largest/smallest (inf when singular).
double condition_number(const Eigen::MatrixXd& symmetric);

}  // namespace casemix::stats
