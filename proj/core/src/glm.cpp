#include "casemix/glm.hpp"

#include "casemix/error.hpp"
#include "casemix/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace casemix {

namespace {

constexpr double kSeparationEta = 30.0;
constexpr int kMaxHalvings = 40;

/// log(1 + exp(a)) without overflow.
double softplus(double a) { return a > 0 ? a + std::log1p(std::exp(-a)) : std::log1p(std::exp(a)); }

/// Columns kept in order; a column is aliased when it is (numerically) a linear
/// combination of the columns kept before it.
std::vector<std::size_t> independent_columns(const Eigen::MatrixXd& X) {
    std::vector<std::size_t> keep;
    Eigen::MatrixXd basis(X.rows(), 0);
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
        Eigen::VectorXd v = X.col(j);
        const double norm0 = v.norm();
        if (norm0 == 0.0) continue;
        for (int pass = 0; pass < 2; ++pass)
            if (basis.cols() > 0) v -= basis * (basis.transpose() * v);
        const double norm = v.norm();
        if (norm <= 1e-9 * norm0) continue;
        basis.conservativeResize(Eigen::NoChange, basis.cols() + 1);
        basis.col(basis.cols() - 1) = v / norm;
        keep.push_back(static_cast<std::size_t>(j));
    }
    return keep;
}

std::vector<std::size_t> complement(const std::vector<std::size_t>& keep, std::size_t p) {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < p; ++j)
        if (std::find(keep.begin(), keep.end(), j) == keep.end()) out.push_back(j);
    return out;
}

Eigen::MatrixXd select_columns(const Eigen::MatrixXd& X, const std::vector<std::size_t>& cols) {
    Eigen::MatrixXd out(X.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = X.col(static_cast<Eigen::Index>(cols[j]));
    return out;
}

std::vector<std::size_t> resolve_active(const Eigen::MatrixXd& X, const std::optional<Eigen::VectorXd>& w,
                                        const FitOptions& options, std::vector<std::size_t>& dropped) {
    Eigen::MatrixXd Xw = X;
    if (w) Xw = w->cwiseSqrt().asDiagonal() * X;
    auto keep = independent_columns(Xw);
    dropped = complement(keep, static_cast<std::size_t>(X.cols()));
    if (keep.empty()) throw Error(ErrorCode::RankDeficient, "design has no estimable columns");
    if (options.strict_rank && !dropped.empty()) {
        std::string msg = "aliased columns:";
        for (auto j : dropped) msg += " " + std::to_string(j);
        throw Error(ErrorCode::RankDeficient, msg);
    }
    return keep;
}

double bernoulli_deviance(const Eigen::VectorXd& eta, const Eigen::VectorXd& y, const std::optional<Eigen::VectorXd>& w) {
    double dev = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
        const double wi = w ? (*w)(i) : 1.0;
        if (wi == 0.0) continue;
        // -log-likelihood: y*softplus(-eta) + (1-y)*softplus(eta)
        dev += wi * (y(i) * softplus(-eta(i)) + (1.0 - y(i)) * softplus(eta(i)));
    }
    return 2.0 * dev;
}

}  // namespace

std::vector<std::size_t> FittedLogistic::active_columns() const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < static_cast<std::size_t>(coef.size()); ++j)
        if (std::find(dropped_columns.begin(), dropped_columns.end(), j) == dropped_columns.end()) out.push_back(j);
    return out;
}

double FittedLogistic::linear_predictor(const Eigen::Ref<const Eigen::RowVectorXd>& row) const {
    if (row.size() != coef.size())
        throw Error(ErrorCode::DimensionMismatch, "row has " + std::to_string(row.size()) + " entries, model has " +
                                                      std::to_string(coef.size()));
    return row.dot(coef);
}

Eigen::VectorXd logistic_score(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                               const std::optional<Eigen::VectorXd>& weights, const Eigen::VectorXd& coef) {
    const Eigen::VectorXd eta = X * coef;
    Eigen::VectorXd r(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) r(i) = (weights ? (*weights)(i) : 1.0) * (y(i) - expit(eta(i)));
    return X.transpose() * r;
}

Eigen::MatrixXd logistic_information(const Eigen::MatrixXd& X, const std::optional<Eigen::VectorXd>& weights,
                                     const Eigen::VectorXd& coef) {
    const Eigen::VectorXd eta = X * coef;
    Eigen::VectorXd W(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
        const double mu = expit(eta(i));
        W(i) = (weights ? (*weights)(i) : 1.0) * mu * (1.0 - mu);
    }
    return X.transpose() * W.asDiagonal() * X;
}

FittedLogistic fit_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                            const std::optional<Eigen::VectorXd>& weights, const FitOptions& options,
                            std::vector<std::string> column_names) {
    const auto n = X.rows();
    if (n == 0) throw Error(ErrorCode::EmptyDataset, "no rows to fit");
    if (y.size() != n || (weights && weights->size() != n))
        throw Error(ErrorCode::DimensionMismatch, "response/weights length differs from design rows");
    if (!column_names.empty() && column_names.size() != static_cast<std::size_t>(X.cols()))
        throw Error(ErrorCode::DimensionMismatch, "column name count differs from design columns");

    bool any0 = false, any1 = false;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double wi = weights ? (*weights)(i) : 1.0;
        if (!(wi >= 0.0) || !std::isfinite(wi)) throw Error(ErrorCode::Precondition, "weights must be finite and >= 0");
        if (y(i) != 0.0 && y(i) != 1.0) throw Error(ErrorCode::NonBinaryValue, "response must be 0/1");
        if (wi == 0.0) continue;
        (y(i) == 1.0 ? any1 : any0) = true;
    }
    if (!(any0 && any1)) throw Error(ErrorCode::AllSameResponse, "all responses are identical");

    FittedLogistic fit;
    fit.column_names = std::move(column_names);
    const auto active = resolve_active(X, weights, options, fit.dropped_columns);
    const Eigen::MatrixXd Xa = fit.dropped_columns.empty() ? X : select_columns(X, active);
    const auto p = Xa.cols();

    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
    Eigen::VectorXd eta = Eigen::VectorXd::Zero(n);
    double dev = bernoulli_deviance(eta, y, weights);
    Eigen::VectorXd W(n), r(n);
    for (int it = 1; it <= options.max_iter; ++it) {
        fit.iterations = it;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double wi = weights ? (*weights)(i) : 1.0;
            const double mu = expit(eta(i));
            W(i) = wi * mu * (1.0 - mu);
            r(i) = wi * (y(i) - mu);
        }
        const Eigen::VectorXd score = Xa.transpose() * r;
        const Eigen::MatrixXd H = Xa.transpose() * W.asDiagonal() * Xa;
        Eigen::VectorXd delta = H.ldlt().solve(score);
        if (!delta.allFinite()) delta = H.completeOrthogonalDecomposition().solve(score);

        double step = 1.0;
        Eigen::VectorXd cand_beta, cand_eta;
        double cand_dev = dev;
        int halvings = 0;
        for (; halvings <= kMaxHalvings; ++halvings) {
            cand_beta = beta + step * delta;
            cand_eta = Xa * cand_beta;
            cand_dev = bernoulli_deviance(cand_eta, y, weights);
            if (std::isfinite(cand_dev) && cand_dev <= dev + 1e-10 * (1.0 + std::abs(dev))) break;
            step *= 0.5;
        }
        if (halvings > kMaxHalvings) break;  // no descent direction left
        const double change = (step * delta).cwiseAbs().maxCoeff();
        beta = std::move(cand_beta);
        eta = std::move(cand_eta);
        dev = cand_dev;
        if (change < options.tol) {
            fit.converged = true;
            break;
        }
    }

    fit.deviance = dev;
    fit.separation_flag = (eta.cwiseAbs().maxCoeff() > kSeparationEta) || dev < 1e-6;
    const Eigen::MatrixXd info = logistic_information(Xa, weights, beta);
    Eigen::MatrixXd cov_a = info.ldlt().solve(Eigen::MatrixXd::Identity(p, p));
    if (!cov_a.allFinite()) cov_a = info.completeOrthogonalDecomposition().pseudoInverse();

    const auto full = X.cols();
    fit.coef = Eigen::VectorXd::Zero(full);
    fit.fisher_cov = Eigen::MatrixXd::Zero(full, full);
    for (std::size_t a = 0; a < active.size(); ++a) {
        fit.coef(static_cast<Eigen::Index>(active[a])) = beta(static_cast<Eigen::Index>(a));
        for (std::size_t b = 0; b < active.size(); ++b)
            fit.fisher_cov(static_cast<Eigen::Index>(active[a]), static_cast<Eigen::Index>(active[b])) =
                cov_a(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
    }
    if (options.require_convergence && !fit.converged)
        throw Error(ErrorCode::NoConvergence, "logistic fit did not converge in " + std::to_string(fit.iterations) +
                                                  " iterations (deviance " + std::to_string(dev) + ")");
    return fit;
}

double predict_prob(const FittedLogistic& fit, const Eigen::Ref<const Eigen::RowVectorXd>& row) {
    return expit(fit.linear_predictor(row));
}

// ---------------------------------------------------------------------------
// multinomial

std::optional<Eigen::Index> FittedMultinomial::coef_row(std::size_t c) const {
    if (c == reference) return std::nullopt;
    return static_cast<Eigen::Index>(c < reference ? c : c - 1);
}

std::vector<std::size_t> FittedMultinomial::active_columns() const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < static_cast<std::size_t>(coef.cols()); ++j)
        if (std::find(dropped_columns.begin(), dropped_columns.end(), j) == dropped_columns.end()) out.push_back(j);
    return out;
}

double FittedMultinomial::linear_predictor(std::size_t c, const Eigen::Ref<const Eigen::RowVectorXd>& row) const {
    if (row.size() != coef.cols()) throw Error(ErrorCode::DimensionMismatch, "row length differs from model");
    if (c >= num_categories) throw Error(ErrorCode::Precondition, "category out of range");
    const auto r = coef_row(c);
    return r ? row.dot(coef.row(*r)) : 0.0;
}

namespace {

/// Softmax with the reference logit fixed at 0; eta has C-1 entries.
void softmax_ref(const Eigen::Ref<const Eigen::VectorXd>& eta, Eigen::Ref<Eigen::VectorXd> probs, double& log_denom) {
    double m = std::max(0.0, eta.size() ? eta.maxCoeff() : 0.0);
    double s = std::exp(-m);
    for (Eigen::Index c = 0; c < eta.size(); ++c) s += std::exp(eta(c) - m);
    log_denom = m + std::log(s);
    for (Eigen::Index c = 0; c < eta.size(); ++c) probs(c) = std::exp(eta(c) - log_denom);
}

double multinomial_deviance(const Eigen::MatrixXd& eta, const std::vector<Eigen::Index>& yrow) {
    double dev = 0.0;
    Eigen::VectorXd probs(eta.cols());
    for (Eigen::Index i = 0; i < eta.rows(); ++i) {
        double log_denom = 0.0;
        softmax_ref(eta.row(i).transpose(), probs, log_denom);
        const double lp = yrow[static_cast<std::size_t>(i)] >= 0 ? eta(i, yrow[static_cast<std::size_t>(i)]) : 0.0;
        dev += log_denom - lp;
    }
    return 2.0 * dev;
}

}  // namespace

FittedMultinomial fit_multinomial(const Eigen::MatrixXd& X, const std::vector<std::size_t>& category,
                                  std::size_t num_categories, std::size_t reference, const FitOptions& options,
                                  std::vector<std::string> column_names) {
    const auto n = X.rows();
    if (n == 0) throw Error(ErrorCode::EmptyDataset, "no rows to fit");
    if (category.size() != static_cast<std::size_t>(n))
        throw Error(ErrorCode::DimensionMismatch, "category vector length differs from design rows");
    if (num_categories < 2) throw Error(ErrorCode::Precondition, "multinomial fit needs at least two categories");
    if (reference >= num_categories) throw Error(ErrorCode::UnknownReference, "reference category out of range");
    std::vector<std::size_t> counts(num_categories, 0);
    for (auto c : category) {
        if (c >= num_categories) throw Error(ErrorCode::Precondition, "category label out of range");
        ++counts[c];
    }
    for (std::size_t c = 0; c < num_categories; ++c)
        if (counts[c] == 0)
            throw Error(c == reference ? ErrorCode::UnknownReference : ErrorCode::Precondition,
                        "category " + std::to_string(c) + " has no rows");

    FittedMultinomial fit;
    fit.column_names = std::move(column_names);
    fit.num_categories = num_categories;
    fit.reference = reference;
    const auto active = resolve_active(X, std::nullopt, options, fit.dropped_columns);
    const Eigen::MatrixXd Xa = fit.dropped_columns.empty() ? X : select_columns(X, active);
    const auto p = Xa.cols();
    const auto C1 = static_cast<Eigen::Index>(num_categories - 1);

    std::vector<Eigen::Index> yrow(category.size());
    for (std::size_t i = 0; i < category.size(); ++i)
        yrow[i] = category[i] == reference ? -1
                                           : static_cast<Eigen::Index>(category[i] < reference ? category[i]
                                                                                                : category[i] - 1);

    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(C1, p);  // rows: categories
    Eigen::MatrixXd eta = Eigen::MatrixXd::Zero(n, C1);
    double dev = multinomial_deviance(eta, yrow);
    Eigen::VectorXd probs(C1);
    const auto P = C1 * p;
    auto information = [&](const Eigen::MatrixXd& eta_now, Eigen::VectorXd* score) {
        Eigen::MatrixXd H = Eigen::MatrixXd::Zero(P, P);
        if (score) score->setZero(P);
        for (Eigen::Index i = 0; i < n; ++i) {
            double log_denom = 0.0;
            softmax_ref(eta_now.row(i).transpose(), probs, log_denom);
            const auto x = Xa.row(i);
            const Eigen::MatrixXd xx = x.transpose() * x;
            for (Eigen::Index c = 0; c < C1; ++c) {
                if (score) {
                    const double resid = (yrow[static_cast<std::size_t>(i)] == c ? 1.0 : 0.0) - probs(c);
                    score->segment(c * p, p) += resid * x.transpose();
                }
                for (Eigen::Index d = 0; d < C1; ++d) {
                    const double wcd = probs(c) * ((c == d ? 1.0 : 0.0) - probs(d));
                    H.block(c * p, d * p, p, p) += wcd * xx;
                }
            }
        }
        return H;
    };

    Eigen::VectorXd score(P);
    for (int it = 1; it <= options.max_iter; ++it) {
        fit.iterations = it;
        const Eigen::MatrixXd H = information(eta, &score);
        Eigen::VectorXd delta = H.ldlt().solve(score);
        if (!delta.allFinite()) delta = H.completeOrthogonalDecomposition().solve(score);
        double step = 1.0;
        Eigen::MatrixXd cand_B, cand_eta;
        double cand_dev = dev;
        int halvings = 0;
        for (; halvings <= kMaxHalvings; ++halvings) {
            cand_B = B;
            for (Eigen::Index c = 0; c < C1; ++c) cand_B.row(c) += step * delta.segment(c * p, p).transpose();
            cand_eta = Xa * cand_B.transpose();
            cand_dev = multinomial_deviance(cand_eta, yrow);
            if (std::isfinite(cand_dev) && cand_dev <= dev + 1e-10 * (1.0 + std::abs(dev))) break;
            step *= 0.5;
        }
        if (halvings > kMaxHalvings) break;
        const double change = (step * delta).cwiseAbs().maxCoeff();
        B = std::move(cand_B);
        eta = std::move(cand_eta);
        dev = cand_dev;
        if (change < options.tol) {
            fit.converged = true;
            break;
        }
    }
    fit.deviance = dev;
    fit.separation_flag = (eta.size() > 0 && eta.cwiseAbs().maxCoeff() > kSeparationEta) || dev < 1e-6;

    const Eigen::MatrixXd H = information(eta, nullptr);
    Eigen::MatrixXd cov_a = H.ldlt().solve(Eigen::MatrixXd::Identity(P, P));
    if (!cov_a.allFinite()) cov_a = H.completeOrthogonalDecomposition().pseudoInverse();

    const auto full = X.cols();
    fit.coef = Eigen::MatrixXd::Zero(C1, full);
    fit.fisher_cov = Eigen::MatrixXd::Zero(C1 * full, C1 * full);
    for (Eigen::Index c = 0; c < C1; ++c)
        for (std::size_t a = 0; a < active.size(); ++a) {
            fit.coef(c, static_cast<Eigen::Index>(active[a])) = B(c, static_cast<Eigen::Index>(a));
            for (Eigen::Index d = 0; d < C1; ++d)
                for (std::size_t b = 0; b < active.size(); ++b)
                    fit.fisher_cov(c * full + static_cast<Eigen::Index>(active[a]),
                                   d * full + static_cast<Eigen::Index>(active[b])) =
                        cov_a(c * p + static_cast<Eigen::Index>(a), d * p + static_cast<Eigen::Index>(b));
        }
    if (options.require_convergence && !fit.converged)
        throw Error(ErrorCode::NoConvergence, "multinomial fit did not converge");
    return fit;
}

Eigen::VectorXd predict_prob(const FittedMultinomial& fit, const Eigen::Ref<const Eigen::RowVectorXd>& row) {
    if (row.size() != fit.coef.cols()) throw Error(ErrorCode::DimensionMismatch, "row length differs from model");
    const Eigen::VectorXd eta = fit.coef * row.transpose();
    Eigen::VectorXd sub(eta.size());
    double log_denom = 0.0;
    softmax_ref(eta, sub, log_denom);
    Eigen::VectorXd out(static_cast<Eigen::Index>(fit.num_categories));
    for (std::size_t c = 0; c < fit.num_categories; ++c) {
        const auto r = fit.coef_row(c);
        out(static_cast<Eigen::Index>(c)) = r ? sub(*r) : std::exp(-log_denom);
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward elimination

namespace {

/// Wald p-value for the columns of `term_col` (all categories jointly for the
/// multinomial target). Aliased columns are reported with p = 1.
double term_p_value(const Eigen::VectorXd& coef, const Eigen::MatrixXd& cov, const std::vector<Eigen::Index>& idx) {
    const auto r = static_cast<Eigen::Index>(idx.size());
    Eigen::VectorXd b(r);
    Eigen::MatrixXd V(r, r);
    for (Eigen::Index a = 0; a < r; ++a) {
        b(a) = coef(idx[static_cast<std::size_t>(a)]);
        for (Eigen::Index c = 0; c < r; ++c) V(a, c) = cov(idx[static_cast<std::size_t>(a)], idx[static_cast<std::size_t>(c)]);
    }
    if (V.diagonal().minCoeff() <= 0.0) return 1.0;
    const double T = b.dot(V.ldlt().solve(b));
    return stats::chi2_upper(T, static_cast<double>(r));
}

}  // namespace

EliminationResult backward_eliminate(const IpdDataset& ds, const ModelFormula& base, const std::vector<Term>& candidates,
                                     double alpha, EliminationTarget target, const FitOptions& options) {
    EliminationResult result{base, {}};
    std::vector<Term> remaining;
    for (const auto& c : candidates) {
        if (c.kind() != Term::Kind::Interaction)
            throw Error(ErrorCode::InvalidFormula, "candidate " + c.to_string() + " is not an interaction");
        if (base.find(c)) continue;
        remaining.push_back(c);
        result.formula = result.formula.with_term(c);
    }
    if (target == EliminationTarget::MembershipModel) {
        if (result.formula.involves_treat())
            throw Error(ErrorCode::InvalidFormula, "membership model cannot include treat");
        ds.require_multi_study("membership-model elimination");
    }

    std::vector<std::size_t> all_rows(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) all_rows[i] = i;

    while (!remaining.empty()) {
        const CompiledFormula compiled(result.formula, ds.schema());
        const Eigen::MatrixXd X = compiled.design(ds, all_rows);
        std::vector<double> pvals(remaining.size(), 1.0);
        if (target == EliminationTarget::OutcomeModel) {
            Eigen::VectorXd y(static_cast<Eigen::Index>(ds.size()));
            for (std::size_t i = 0; i < ds.size(); ++i) y(static_cast<Eigen::Index>(i)) = ds.outcome(i);
            const auto fit = fit_logistic(X, y, std::nullopt, options);
            for (std::size_t t = 0; t < remaining.size(); ++t) {
                const auto col = static_cast<Eigen::Index>(*result.formula.find(remaining[t]));
                pvals[t] = term_p_value(fit.coef, fit.fisher_cov, {col});
            }
        } else {
            std::vector<std::size_t> cat(ds.size());
            for (std::size_t i = 0; i < ds.size(); ++i) cat[i] = ds.study(i);
            const auto fit = fit_multinomial(X, cat, ds.num_studies(), 0, options);
            const auto p = fit.coef.cols();
            Eigen::VectorXd stacked(fit.coef.size());
            for (Eigen::Index c = 0; c < fit.coef.rows(); ++c) stacked.segment(c * p, p) = fit.coef.row(c).transpose();
            for (std::size_t t = 0; t < remaining.size(); ++t) {
                const auto col = static_cast<Eigen::Index>(*result.formula.find(remaining[t]));
                std::vector<Eigen::Index> idx;
                for (Eigen::Index c = 0; c < fit.coef.rows(); ++c) idx.push_back(c * p + col);
                pvals[t] = term_p_value(stacked, fit.fisher_cov, idx);
            }
        }
        // Largest p-value; ties go to the candidate latest in the ordering.
        std::size_t worst = 0;
        for (std::size_t t = 1; t < remaining.size(); ++t)
            if (pvals[t] >= pvals[worst]) worst = t;
        if (!(pvals[worst] > alpha)) break;
        result.steps.push_back({remaining[worst].to_string(), pvals[worst]});
        result.formula = result.formula.without_term(remaining[worst]);
        remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(worst));
    }
    return result;
}

}  // namespace casemix
