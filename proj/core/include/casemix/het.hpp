#pragma once

#include "casemix/transport.hpp"

#include <Eigen/Dense>

#include <string>

namespace casemix {

/// TRANSFORMED tests log RR / log OR (RD as is) with the covariance of the
/// transformed effects. RAW tests RR / OR themselves, with the covariance
/// carried over by the delta method.
enum class WaldScale { Transformed, Raw };
std::string to_string(WaldScale s);
WaldScale parse_wald_scale(std::string_view s);

inline constexpr double kMaxContrastCondition = 1e12;

struct WaldTestResult {
    std::string hypothesis;
    std::string contrast;
    double statistic = 0.0;
    int df = 0;
    double p_value = 1.0;
    WaldScale scale = WaldScale::Transformed;
    bool feasible = true;
    /// Condition number of M Sigma M'.
    double condition = 1.0;
    std::string note;
};

/// T = (M est)' (M Sigma M')^-1 (M est) against chi-square(rank M).
/// Throws SingularContrastCovariance when M Sigma M' is ill-conditioned and
/// DimensionMismatch on inconsistent shapes.
WaldTestResult wald_test(const Eigen::VectorXd& estimates, const Eigen::MatrixXd& sigma, const Eigen::MatrixXd& M,
                         WaldScale scale = WaldScale::Transformed);

/// Adjacent differences over `cells`, as rows of a contrast on `size` entries.
Eigen::MatrixXd adjacent_contrast(const std::vector<std::size_t>& cells, std::size_t size);

/// H0: all sources agree once standardized to population j (row j).
WaldTestResult beyond_casemix_test(const EffectMatrix& m, StudyIndex j, WaldScale scale = WaldScale::Transformed);
/// H0: trial k's regime gives the same effect in every population (column k).
WaldTestResult casemix_test(const EffectMatrix& m, StudyIndex k, WaldScale scale = WaldScale::Transformed);
/// H0: the trial-specific marginal effects (the diagonal) agree.
WaldTestResult conventional_test(const EffectMatrix& m, WaldScale scale = WaldScale::Transformed);

/// Every row, column and the diagonal test, in that order.
std::vector<WaldTestResult> all_tests(const EffectMatrix& m, WaldScale scale = WaldScale::Transformed);

}  // namespace casemix
