#pragma once

#include "casemix/ipd.hpp"

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace casemix {

/// One multiplicative factor of a model term: the treatment indicator or a
/// covariate raised to a positive integer power.
struct Factor {
    bool is_treat = false;
    std::string covariate;  // empty when is_treat
    int power = 1;

    friend bool operator==(const Factor&, const Factor&) = default;
};

struct Term {
    enum class Kind { Intercept, Main, Power, Interaction };

    std::vector<Factor> factors;  // empty for the intercept, size 2 for interactions

    static Term intercept() { return {}; }
    static Term treat() { return Term{{Factor{true, {}, 1}}}; }
    static Term main(std::string cov) { return Term{{Factor{false, std::move(cov), 1}}}; }
    static Term power(std::string cov, int degree) { return Term{{Factor{false, std::move(cov), degree}}}; }
    static Term interaction(Factor a, Factor b) { return Term{{std::move(a), std::move(b)}}; }

    [[nodiscard]] Kind kind() const;
    [[nodiscard]] bool involves_treat() const;
    [[nodiscard]] std::string to_string() const;
    /// Interactions compare equal regardless of factor order.
    [[nodiscard]] bool same_as(const Term& other) const;

    friend bool operator==(const Term&, const Term&) = default;
};

/// Ordered term list shared by outcome and membership models. Canonical text
/// form: `y ~ 1 + treat + L1 + L1^2 + treat:L1`; `0 +` (or `-1`) drops the
/// intercept, which is otherwise present.
class ModelFormula {
public:
    ModelFormula() : terms_{Term::intercept()} {}
    explicit ModelFormula(std::vector<Term> terms);

    /// Throws InvalidFormula.
    static ModelFormula parse(std::string_view text);

    [[nodiscard]] const std::vector<Term>& terms() const noexcept { return terms_; }
    [[nodiscard]] std::size_t size() const noexcept { return terms_.size(); }
    [[nodiscard]] bool has_intercept() const;
    [[nodiscard]] bool involves_treat() const;
    [[nodiscard]] std::string to_string() const;

    [[nodiscard]] ModelFormula with_term(Term t) const;
    [[nodiscard]] ModelFormula without_term(const Term& t) const;
    [[nodiscard]] std::optional<std::size_t> find(const Term& t) const;

    friend bool operator==(const ModelFormula&, const ModelFormula&) = default;

private:
    std::vector<Term> terms_;
};

/// A formula resolved against a covariate schema: evaluates design rows.
class CompiledFormula {
public:
    CompiledFormula(const ModelFormula& formula, const CovariateSchema& schema);

    [[nodiscard]] std::size_t columns() const noexcept { return columns_.size(); }
    [[nodiscard]] const ModelFormula& formula() const noexcept { return formula_; }
    [[nodiscard]] std::vector<std::string> column_names() const;

    /// Design row of subject i. `treat` overrides the observed arm when set.
    void row(const IpdDataset& ds, std::size_t i, std::optional<int> treat, std::span<double> out) const;
    [[nodiscard]] Eigen::RowVectorXd row(const IpdDataset& ds, std::size_t i, std::optional<int> treat = {}) const;
    /// Row from a raw covariate vector.
    [[nodiscard]] Eigen::RowVectorXd row(std::span<const double> covariates, int treat) const;

    [[nodiscard]] Eigen::MatrixXd design(const IpdDataset& ds, std::span<const std::size_t> rows,
                                         std::optional<int> treat = {}) const;

private:
    struct Column {
        bool treat = false;
        std::vector<std::pair<std::size_t, int>> powers;  // (covariate index, exponent)
    };
    [[nodiscard]] double eval(const Column& col, int treat, auto&& cov) const;

    ModelFormula formula_;
    std::vector<Column> columns_;
};

}  // namespace casemix
