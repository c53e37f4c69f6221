#include "doctest.h"

#include "casemix/error.hpp"
#include "casemix/simlab.hpp"

#include <cmath>

using namespace casemix;

namespace {

LpTerm term(double coef, Term t, std::optional<StudyIndex> study = std::nullopt) { return {coef, std::move(t), study}; }

/// Two trials, binary covariate with P(L=1) = 0.4, logit P(S=2|L) = 0.3 + L.
SettingConfig discrete_config() {
    SettingConfig cfg;
    cfg.name = "discrete";
    cfg.n_total = 1500;
    cfg.pool_laws = {CovariateLaw::bernoulli(0.4)};
    cfg.membership_lp = {LinearPredictor{{term(0.3, Term::intercept()), term(1.0, Term::main("L"))}}};
    cfg.outcome.terms = {term(-0.5, Term::intercept()), term(0.8, Term::treat()), term(1.2, Term::main("L")),
                         term(-0.6, Term::interaction({true, {}, 1}, {false, "L", 1})),
                         term(0.4, Term::treat(), StudyIndex{1})};
    return cfg;
}

}  // namespace

TEST_CASE("preset catalogue") {
    CHECK(preset_names().size() == 6);
    for (const auto& n : preset_names()) CHECK_NOTHROW(preset_setting(n).validate());
    CHECK_THROWS_AS(preset_setting("7"), Error);
    CHECK(preset_setting("3").pool_laws[0].sd == 3.5);
    CHECK(preset_setting("5").membership == MembershipKind::PerTrial);
    CHECK(preset_setting("1").labels() == std::vector<std::string>{"1", "2"});
}

TEST_CASE("config validation") {
    auto cfg = discrete_config();
    CHECK_NOTHROW(cfg.validate());
    auto bad = cfg;
    bad.K = 1;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = cfg;
    bad.membership_lp.clear();
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = cfg;
    bad.outcome.terms.push_back(term(1.0, Term::main("Z")));
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = cfg;
    bad.allocation = {0.5};
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = cfg;
    bad.pool_laws = {CovariateLaw::normal(0.0, -1.0)};
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("generation is deterministic") {
    const auto cfg = preset_setting("4");
    const auto a = generate_setting(cfg, 42, 3);
    const auto b = generate_setting(cfg, 42, 3);
    const auto c = generate_setting(cfg, 42, 4);
    CHECK(a.records() == b.records());
    CHECK(a.records() != c.records());
    CHECK(a.size() == 1500);
    CHECK(a.rows_of(0).size() == 750);
}

TEST_CASE("zero outcome coefficients give fair coins") {
    auto cfg = preset_setting("1");
    cfg.n_total = 40000;
    cfg.outcome.terms = {term(0.0, Term::intercept())};
    const auto ds = generate_setting(cfg, 1);
    for (StudyIndex k = 0; k < 2; ++k)
        for (int x : {0, 1}) {
            double events = 0, n = 0;
            for (const auto i : ds.rows_of(k))
                if (ds.treat(i) == x) {
                    events += ds.outcome(i);
                    n += 1;
                }
            CHECK(std::abs(events / n - 0.5) < 4.0 * std::sqrt(0.25 / n));
        }
    const auto truth = true_values_oracle(cfg, 50, 1);
    CHECK(truth.effect(Measure::RR, 0, 1) == doctest::Approx(1.0));
}

TEST_CASE("true marginal effects of the first preset") {
    const auto t = true_values_oracle(preset_setting("1"), 1000, 1);
    CHECK(std::abs(t.effect(Measure::RR, 0, 0) - 1.31) < 0.02);
    CHECK(std::abs(t.effect(Measure::RR, 1, 1) - 0.94) < 0.02);
    CHECK(std::abs(t.effect(Measure::OR, 0, 0) - 1.64) < 0.04);
    CHECK(std::abs(t.effect(Measure::OR, 1, 1) - 0.89) < 0.04);
    CHECK(t.effect(Measure::RD, 0, 0) == doctest::Approx(t.p(0, 0, 1) - t.p(0, 0, 0)).epsilon(1e-12));
}

TEST_CASE("oracle agrees with enumeration over a binary covariate") {
    const auto cfg = discrete_config();
    const auto t = true_values_oracle(cfg, 2000, 3);
    const double pl = 0.4;
    const double s2[2] = {expit(0.3), expit(1.3)};  // P(S=2 | L=0), P(S=2 | L=1)
    for (StudyIndex j = 0; j < 2; ++j) {
        const double m0 = (1 - pl) * (j == 1 ? s2[0] : 1 - s2[0]);
        const double m1 = pl * (j == 1 ? s2[1] : 1 - s2[1]);
        const double p_l1 = m1 / (m0 + m1);
        for (StudyIndex k = 0; k < 2; ++k)
            for (int x : {0, 1}) {
                const auto eta = [&](double l) { return -0.5 + 0.8 * x + 1.2 * l - 0.6 * x * l + (k == 1 ? 0.4 * x : 0.0); };
                const double expected = (1 - p_l1) * expit(eta(0)) + p_l1 * expit(eta(1));
                const auto idx = (j * 2 + k) * 2 + static_cast<std::size_t>(x);
                CAPTURE(idx);
                CHECK(std::abs(t.prob[idx] - expected) < 2.0 * t.prob_se[idx] + 1e-12);
            }
    }
}

TEST_CASE("analysis catalogue") {
    const auto s1 = preset_setting("1");
    CHECK(correct_outcome_formula(s1).find(ModelFormula::parse("~ treat:L").terms().back()).has_value());
    CHECK(correct_membership_formula(s1) == ModelFormula::parse("~ 1 + L + L^2"));
    CHECK(correct_membership_formula(preset_setting("4")) == ModelFormula::parse("~ 1 + L"));
    CHECK(correct_membership_formula(preset_setting("5")) == ModelFormula::parse("~ 1 + L + L^2"));

    CHECK(make_analysis(s1, "IPW2").spec.ps_formula == ModelFormula::parse("~ 1 + L"));
    CHECK(make_analysis(s1, "IPW3").spec.ps_formula == ModelFormula::parse("~ 0 + L"));
    CHECK(make_analysis(s1, "SIPW1").spec.method == Method::IPW_STABILIZED);
    const auto ocr2 = make_analysis(s1, "OCR2").spec.outcome_formula;
    CHECK_FALSE(ocr2.find(ModelFormula::parse("~ treat:L").terms().back()).has_value());
    CHECK(ocr2.find(Term::treat()).has_value());
    CHECK_THROWS_AS(make_analysis(s1, "OCR3"), Error);
    CHECK_THROWS_AS(make_analysis(s1, "XYZ"), Error);

    const auto ocr3 = make_analysis(preset_setting("5"), "OCR3").spec;
    REQUIRE(ocr3.outcome_overrides.size() == 1);
    const auto& f = ocr3.outcome_formula_for(1, 0);
    CHECK_FALSE(f.find(Term::power("L", 3)).has_value());
    CHECK(f.find(Term::power("L", 2)).has_value());
    CHECK(ocr3.outcome_formula_for(0, 1).find(Term::power("L", 3)).has_value());

    CHECK(default_analyses(s1) == std::vector<std::string>{"OCR1", "IPW1", "IPW2", "IPW3"});
    CHECK(default_analyses(preset_setting("5")) == std::vector<std::string>{"OCR3"});
}

TEST_CASE("small study runs and is reproducible across worker counts") {
    const auto cfg = preset_setting("1");
    StudyOptions opts;
    opts.reps = 6;
    opts.seed = 8;
    opts.bootstrap_b = 3;
    opts.oracle_runs = 20;
    const auto truth = true_values_oracle(cfg, opts.oracle_runs, opts.seed);
    const auto a = run_study(cfg, {"OCR1", "SIPW1"}, opts, truth);
    opts.workers = 3;
    const auto b = run_study(cfg, {"OCR1", "SIPW1"}, opts, truth);
    CHECK(probability_table_csv(a) == probability_table_csv(b));
    CHECK(effect_table_csv(a) == effect_table_csv(b));
    CHECK(variance_table_csv(a) == variance_table_csv(b));
    CHECK(rejection_table_csv(a) == rejection_table_csv(b));

    CHECK(a.failure_rate() == 0.0);
    const auto* p = a.probability("OCR1", 0, 1, 1);
    REQUIRE(p);
    CHECK(p->n == 6);
    CHECK(p->bias == doctest::Approx(p->mean - p->truth));
    const auto* e = a.effect("SIPW1", Measure::OR, 1, 0);
    REQUIRE(e);
    CHECK(e->n_mev == 6);
    CHECK(e->n_btv == 6);
    CHECK(e->mcv > 0.0);
    const auto* r = a.rejection("OCR1", "conventional", Measure::RR, "sandwich");
    REQUIRE(r);
    CHECK(r->rejection_rate >= 0.0);
    CHECK(r->rejection_rate <= 1.0);
    CHECK(r->n_feasible + r->n_infeasible == 6);
    CHECK(probability_table_csv(a).rfind("setting,analysis,j,k,x,truth,mean,bias,relative_bias_percent,n,out_of_bounds\n", 0) == 0);
}
