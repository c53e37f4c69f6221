#include "doctest.h"
#include "fixtures.hpp"

#include "casemix/error.hpp"
#include "casemix/formula.hpp"
#include "casemix/glm.hpp"
#include "casemix/simlab.hpp"

#include <random>

using namespace casemix;

namespace {

Eigen::MatrixXd with_intercept(const Eigen::VectorXd& x) {
    Eigen::MatrixXd X(x.size(), 2);
    X.col(0).setOnes();
    X.col(1) = x;
    return X;
}

/// Fixed 50-row design with two covariates and a mildly informative response.
void fixture50(Eigen::MatrixXd& X, Eigen::VectorXd& y) {
    std::mt19937_64 rng(20240601);
    std::normal_distribution<double> z;
    std::uniform_real_distribution<double> u;
    X.resize(50, 3);
    y.resize(50);
    for (int i = 0; i < 50; ++i) {
        X(i, 0) = 1.0;
        X(i, 1) = z(rng);
        X(i, 2) = z(rng);
        y(i) = u(rng) < expit(0.3 + 0.8 * X(i, 1) - 0.5 * X(i, 2)) ? 1.0 : 0.0;
    }
}

}  // namespace

TEST_CASE("formula text round trip") {
    const auto f = ModelFormula::parse("y ~ 1 + treat + L1 + L1^2 + treat:L1");
    CHECK(f.size() == 5);
    CHECK(f.has_intercept());
    CHECK(f.involves_treat());
    CHECK(ModelFormula::parse(f.to_string()) == f);
    CHECK_FALSE(ModelFormula::parse("~ 0 + L").has_intercept());
    CHECK_FALSE(ModelFormula::parse("y ~ L - 1").has_intercept());
    CHECK(ModelFormula::parse("~ L").has_intercept());
    CHECK(ModelFormula::parse("~ L:treat").terms().back().same_as(ModelFormula::parse("~ treat:L").terms().back()));
}

TEST_CASE("malformed formulas") {
    CHECK_THROWS_AS(ModelFormula::parse("y ~ 1 + + L"), Error);
    CHECK_THROWS_AS(ModelFormula::parse("y ~ 1 - L"), Error);
    CHECK_THROWS_AS(ModelFormula::parse("y ~ L + L"), Error);
    const CovariateSchema schema(std::vector<std::string>{"L"});
    CHECK_THROWS_AS(CompiledFormula(ModelFormula::parse("~ 1 + Z"), schema), Error);
}

TEST_CASE("compiled design rows") {
    const CovariateSchema schema(std::vector<std::string>{"A", "B"});
    const CompiledFormula c(ModelFormula::parse("y ~ 1 + treat + A^2 + treat:B + A:B"), schema);
    const std::vector<double> l{2.0, -3.0};
    const auto row = c.row(l, 1);
    REQUIRE(row.size() == 5);
    CHECK(row(0) == 1.0);
    CHECK(row(1) == 1.0);
    CHECK(row(2) == 4.0);
    CHECK(row(3) == -3.0);
    CHECK(row(4) == -6.0);
    CHECK(c.row(l, 0)(3) == 0.0);
}

TEST_CASE("intercept-only fit of a balanced response") {
    Eigen::VectorXd y(10);
    y << 1, 0, 1, 0, 1, 0, 1, 0, 1, 0;
    const auto fit = fit_logistic(Eigen::MatrixXd::Ones(10, 1), y);
    CHECK(fit.converged);
    CHECK(fit.coef(0) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("saturated two-by-two fit matches closed form") {
    Eigen::VectorXd x(200), y(200);
    for (int i = 0; i < 200; ++i) {
        x(i) = i < 100 ? 0.0 : 1.0;
        y(i) = i < 100 ? (i < 20 ? 1.0 : 0.0) : (i < 160 ? 1.0 : 0.0);
    }
    const auto fit = fit_logistic(with_intercept(x), y);
    CHECK(fit.coef(0) == doctest::Approx(-1.38629436).epsilon(1e-8));
    CHECK(fit.coef(1) == doctest::Approx(1.79175947).epsilon(1e-8));
    CHECK(fit.fisher_cov(0, 0) == doctest::Approx(1.0 / (100 * 0.2 * 0.8)).epsilon(1e-8));
}

TEST_CASE("degenerate responses") {
    CHECK_THROWS_AS(fit_logistic(Eigen::MatrixXd::Ones(5, 1), Eigen::VectorXd::Ones(5)), Error);
    Eigen::MatrixXd X(4, 2);
    X << 1, 2, 1, 2, 1, 2, 1, 2;
    Eigen::VectorXd y(4);
    y << 1, 0, 1, 0;
    const auto fit = fit_logistic(X, y);
    CHECK(fit.dropped_columns.size() == 1);
    FitOptions strict;
    strict.strict_rank = true;
    CHECK_THROWS_AS(fit_logistic(X, y, std::nullopt, strict), Error);
}

TEST_CASE("score vanishes at the estimate and information matches finite differences") {
    Eigen::MatrixXd X;
    Eigen::VectorXd y;
    fixture50(X, y);
    const auto fit = fit_logistic(X, y);
    REQUIRE(fit.converged);
    const auto score = logistic_score(X, y, std::nullopt, fit.coef);
    CHECK(score.cwiseAbs().maxCoeff() < 1e-6 * 50);

    const auto info = logistic_information(X, std::nullopt, fit.coef);
    Eigen::MatrixXd fd(3, 3);
    for (int c = 0; c < 3; ++c) {
        const double h = 1e-6 * (1.0 + std::abs(fit.coef(c)));
        Eigen::VectorXd up = fit.coef, down = fit.coef;
        up(c) += h;
        down(c) -= h;
        fd.col(c) = -(logistic_score(X, y, std::nullopt, up) - logistic_score(X, y, std::nullopt, down)) / (2 * h);
    }
    CHECK((fd - info).norm() / info.norm() < 1e-4);
}

TEST_CASE("fit is invariant to row order") {
    Eigen::MatrixXd X;
    Eigen::VectorXd y;
    fixture50(X, y);
    const auto a = fit_logistic(X, y);
    const auto b = fit_logistic(X.colwise().reverse(), y.reverse());
    CHECK((a.coef - b.coef).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("weighted fit equals the fit on replicated rows") {
    Eigen::MatrixXd X;
    Eigen::VectorXd y;
    fixture50(X, y);
    Eigen::VectorXd w = Eigen::VectorXd::Ones(50);
    w(0) = 2.0;
    Eigen::MatrixXd X2(51, 3);
    X2 << X, X.row(0);
    Eigen::VectorXd y2(51);
    y2 << y, y(0);
    const auto a = fit_logistic(X, y, w);
    const auto b = fit_logistic(X2, y2);
    CHECK((a.coef - b.coef).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("predictions") {
    FittedLogistic f;
    f.coef = Eigen::Vector2d(1.0, 2.0);
    CHECK(predict_prob(f, Eigen::RowVector2d(1.0, -0.5)) == doctest::Approx(0.5));
    f.coef.setZero();
    CHECK(predict_prob(f, Eigen::RowVector2d(3.0, 7.0)) == doctest::Approx(0.5));
    CHECK_THROWS_AS(predict_prob(f, Eigen::RowVector3d(1.0, 1.0, 1.0)), Error);

    FittedMultinomial m;
    m.num_categories = 3;
    m.reference = 0;
    m.coef = Eigen::MatrixXd::Zero(2, 2);
    const auto p = predict_prob(m, Eigen::RowVector2d(1.0, 4.0));
    CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p(0) == doctest::Approx(1.0 / 3.0));
    CHECK(p(2) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("multinomial intercept-only fit matches log ratios") {
    std::vector<std::size_t> cat;
    for (int i = 0; i < 20; ++i) cat.push_back(0);
    for (int i = 0; i < 30; ++i) cat.push_back(1);
    for (int i = 0; i < 50; ++i) cat.push_back(2);
    const auto fit = fit_multinomial(Eigen::MatrixXd::Ones(100, 1), cat, 3, 2);
    REQUIRE(fit.coef_row(0));
    CHECK(fit.coef(*fit.coef_row(0), 0) == doctest::Approx(-0.91629073).epsilon(1e-8));
    CHECK(fit.coef(*fit.coef_row(1), 0) == doctest::Approx(-0.51082562).epsilon(1e-8));
    CHECK_FALSE(fit.coef_row(2));
}

TEST_CASE("two-category multinomial reduces to logistic") {
    Eigen::MatrixXd X;
    Eigen::VectorXd y;
    fixture50(X, y);
    std::vector<std::size_t> cat(50);
    for (int i = 0; i < 50; ++i) cat[i] = static_cast<std::size_t>(y(i));
    const auto m = fit_multinomial(X, cat, 2, 0);
    const auto l = fit_logistic(X, y);
    CHECK((m.coef.row(0).transpose() - l.coef).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("multinomial rejects an unobserved category") {
    std::vector<std::size_t> cat{0, 0, 1, 1};
    CHECK_THROWS_AS(fit_multinomial(Eigen::MatrixXd::Ones(4, 1), cat, 3, 0), Error);
    CHECK_THROWS_AS(fit_multinomial(Eigen::MatrixXd::Ones(4, 1), cat, 2, 5), Error);
}

TEST_CASE("backward elimination") {
    const auto ds = generate_setting(preset_setting("1"), 5);
    const auto base = ModelFormula::parse("y ~ 1 + treat + L");
    const auto unchanged = backward_eliminate(ds, base, {}, 0.05, EliminationTarget::OutcomeModel);
    CHECK(unchanged.formula == base);
    CHECK(unchanged.steps.empty());

    const auto tl = ModelFormula::parse("~ treat:L").terms().back();
    const auto kept = backward_eliminate(ds, base, {tl}, 0.05, EliminationTarget::OutcomeModel);
    CHECK(kept.formula.find(tl).has_value());

    // L^2 interactions carry no signal in this generator and should go.
    const auto tl2 = ModelFormula::parse("~ treat:L^2").terms().back();
    const auto dropped = backward_eliminate(ds, base.with_term(tl), {tl2}, 1e-6, EliminationTarget::OutcomeModel);
    CHECK_FALSE(dropped.formula.find(tl2).has_value());
    CHECK(dropped.steps.size() == 1);

    CHECK_THROWS_AS(backward_eliminate(ds, ModelFormula::parse("~ 1 + L"), {tl}, 0.05, EliminationTarget::MembershipModel),
                    Error);
}
