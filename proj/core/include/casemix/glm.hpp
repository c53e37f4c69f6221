#pragma once

#include "casemix/formula.hpp"
#include "casemix/ipd.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace casemix {

struct FitOptions {
    double tol = 1e-8;
    int max_iter = 100;
    /// Throw RankDeficient instead of dropping aliased columns.
    bool strict_rank = false;
    /// Throw NoConvergence instead of returning a flagged fit.
    bool require_convergence = false;
};

inline double expit(double a) {
    if (a >= 0) return 1.0 / (1.0 + std::exp(-a));
    const double e = std::exp(a);
    return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

struct FittedLogistic {
    std::vector<std::string> column_names;
    /// Full-length coefficient vector; aliased columns hold 0.
    Eigen::VectorXd coef;
    /// Inverse observed information, zero rows/cols for aliased columns.
    Eigen::MatrixXd fisher_cov;
    bool converged = false;
    int iterations = 0;
    double deviance = 0.0;
    bool separation_flag = false;
    std::vector<std::size_t> dropped_columns;

    [[nodiscard]] std::vector<std::size_t> active_columns() const;
    [[nodiscard]] double linear_predictor(const Eigen::Ref<const Eigen::RowVectorXd>& row) const;
};

/// Weighted Bernoulli maximum likelihood by Newton/IRLS with step halving.
/// Throws AllSameResponse, RankDeficient (strict or nothing left), DimensionMismatch.
FittedLogistic fit_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                            const std::optional<Eigen::VectorXd>& weights = std::nullopt,
                            const FitOptions& options = {}, std::vector<std::string> column_names = {});

/// Score vector X'(w(y - mu)) at `coef`.
Eigen::VectorXd logistic_score(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                               const std::optional<Eigen::VectorXd>& weights, const Eigen::VectorXd& coef);
/// Observed information X'WX at `coef`.
Eigen::MatrixXd logistic_information(const Eigen::MatrixXd& X, const std::optional<Eigen::VectorXd>& weights,
                                     const Eigen::VectorXd& coef);

struct FittedMultinomial {
    std::vector<std::string> column_names;
    /// Category labels 0..C-1 as passed in; `reference` is one of them.
    std::size_t num_categories = 0;
    std::size_t reference = 0;
    /// (C-1) x p, rows follow category order with the reference skipped.
    Eigen::MatrixXd coef;
    /// Covariance of the row-stacked coefficient vector ((C-1)p square).
    Eigen::MatrixXd fisher_cov;
    bool converged = false;
    int iterations = 0;
    double deviance = 0.0;
    bool separation_flag = false;
    std::vector<std::size_t> dropped_columns;

    /// Row of `coef` for category c, or nullopt for the reference.
    [[nodiscard]] std::optional<Eigen::Index> coef_row(std::size_t c) const;
    [[nodiscard]] std::vector<std::size_t> active_columns() const;
    /// Linear predictor of category c (0 for the reference).
    [[nodiscard]] double linear_predictor(std::size_t c, const Eigen::Ref<const Eigen::RowVectorXd>& row) const;
};

/// Multinomial logit by Newton iterations on the stacked score.
/// `category[i]` in 0..C-1; every category must be observed.
FittedMultinomial fit_multinomial(const Eigen::MatrixXd& X, const std::vector<std::size_t>& category,
                                  std::size_t num_categories, std::size_t reference,
                                  const FitOptions& options = {}, std::vector<std::string> column_names = {});

double predict_prob(const FittedLogistic& fit, const Eigen::Ref<const Eigen::RowVectorXd>& row);
Eigen::VectorXd predict_prob(const FittedMultinomial& fit, const Eigen::Ref<const Eigen::RowVectorXd>& row);

enum class EliminationTarget { OutcomeModel, MembershipModel };

struct EliminationStep {
    std::string dropped_term;
    double p_value = 1.0;
};

struct EliminationResult {
    ModelFormula formula;
    std::vector<EliminationStep> steps;
};

/// Backward elimination over candidate interactions by per-term Wald tests.
/// The outcome target fits outcome ~ formula on all rows; the membership
/// target fits a multinomial study model (reference = first study). Base
/// terms are never dropped.
EliminationResult backward_eliminate(const IpdDataset& ds, const ModelFormula& base,
                                     const std::vector<Term>& candidates, double alpha, EliminationTarget target,
                                     const FitOptions& options = {});

}  // namespace casemix
