#include "doctest.h"
#include "fixtures.hpp"

#include "casemix/error.hpp"
#include "casemix/simlab.hpp"
#include "casemix/variance.hpp"

#include <cmath>

using namespace casemix;

namespace {

IpdDataset small_setting1(std::size_t n, std::uint64_t seed) {
    auto cfg = preset_setting("1");
    cfg.n_total = n;
    return generate_setting(cfg, seed);
}

}  // namespace

TEST_CASE("crude proportions get the binomial sandwich variance") {
    const auto ds = generate_setting(preset_setting("1"), 31);
    EstimatorSpec spec;
    spec.method = Method::OCR;
    spec.outcome_formula = ModelFormula::parse("y ~ 1 + treat");
    TransportModel model(ds, spec);
    const auto grid = standardize_all(model);
    const auto s = sandwich(model, grid, {});
    const auto K = ds.num_studies();
    for (StudyIndex j = 0; j < K; ++j)
        for (StudyIndex k = 0; k < K; ++k)
            for (const auto x : {Arm::Treated, Arm::Control}) {
                double events = 0, n = 0;
                for (const auto i : ds.rows_of(k))
                    if (ds.treat(i) == arm_value(x)) {
                        events += ds.outcome(i);
                        n += 1;
                    }
                const double p = events / n;
                const auto idx = static_cast<Eigen::Index>(ProbabilityGrid::index(K, j, k, x));
                CHECK(grid.cells[idx]->prob == doctest::Approx(p).epsilon(1e-10));
                CHECK(s.prob_cov(idx, idx) == doctest::Approx(p * (1 - p) / n).epsilon(1e-8));
            }
}

TEST_CASE("stacked system is solved and its bread matches finite differences") {
    const auto cfg = preset_setting("1");
    const auto ds = generate_setting(cfg, 17);
    for (const char* name : {"OCR1", "IPW1", "SIPW1", "IPW3"}) {
        CAPTURE(name);
        auto spec = make_analysis(cfg, name).spec;
        TransportModel model(ds, spec);
        const auto grid = standardize_all(model);
        const EstimatingSystem sys(model, grid, {Measure::RR, Measure::OR});
        CHECK(sys.n() == ds.size());
        CHECK(sys.mean_psi().cwiseAbs().maxCoeff() < 1e-6);
        const auto a = sys.bread();
        const auto fd = sys.bread_numeric();
        CHECK((a - fd).norm() / a.norm() < 1e-4);
        const auto v = sys.covariance();
        CHECK((v - v.transpose()).cwiseAbs().maxCoeff() == 0.0);
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(v);
        CHECK(es.eigenvalues().minCoeff() > -1e-10 * v.trace());
        CHECK((v.diagonal().array() > 0).all());
    }
}

TEST_CASE("multinomial membership for three trials") {
    SettingConfig cfg;
    cfg.K = 3;
    cfg.n_total = 1200;
    cfg.pool_laws = {CovariateLaw::normal(0.0, 1.0)};
    cfg.membership_lp = {LinearPredictor{{{0.2, Term::intercept(), {}}, {0.5, Term::main("L"), {}}}},
                         LinearPredictor{{{-0.1, Term::intercept(), {}}, {-0.4, Term::main("L"), {}}}}};
    cfg.outcome.terms = {{-0.3, Term::intercept(), {}}, {0.4, Term::treat(), {}}, {0.8, Term::main("L"), {}}};
    const auto ds = generate_setting(cfg, 1);
    auto spec = make_analysis(cfg, "IPW1").spec;
    REQUIRE(spec.resolved_ps_mode(3) == PsMode::Multinomial);
    TransportModel model(ds, spec);
    const auto grid = standardize_all(model);
    const EstimatingSystem sys(model, grid, {Measure::OR});
    CHECK(sys.mean_psi().cwiseAbs().maxCoeff() < 1e-6);
    const auto a = sys.bread();
    CHECK((a - sys.bread_numeric()).norm() / a.norm() < 1e-4);
    const auto block = sys.effect_block(sys.covariance(), Measure::OR);
    CHECK(block.rows() == 9);
    CHECK(block.allFinite());
}

TEST_CASE("sandwich and bootstrap agree on a small dataset") {
    const auto ds = small_setting1(200, 77);
    const auto spec = make_analysis(preset_setting("1"), "OCR1").spec;
    const auto sw = sandwich_cov(ds, spec, Measure::RR);
    BootstrapOptions bo;
    bo.replicates = 2000;
    bo.seed = 5;
    const auto bt = bootstrap_cov(ds, spec, Measure::RR, bo);
    for (Eigen::Index c = 0; c < 4; ++c) {
        CAPTURE(c);
        const double ratio = std::sqrt(bt(c, c) / sw(c, c));
        CHECK(ratio > 0.85);
        CHECK(ratio < 1.15);
    }
}

TEST_CASE("identical bootstrap replicates give zero covariance") {
    const auto ds = small_setting1(300, 2);
    const auto spec = make_analysis(preset_setting("1"), "IPW1").spec;
    BootstrapOptions bo;
    bo.replicates = 2;
    bo.sampler = [](const IpdDataset& d, std::size_t) {
        std::vector<std::size_t> rows(d.size());
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
        return rows;
    };
    const auto cov = bootstrap_cov(ds, spec, Measure::OR, bo);
    CHECK(cov.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("bootstrap is reproducible across worker counts") {
    const auto ds = small_setting1(400, 6);
    const auto spec = make_analysis(preset_setting("1"), "IPW1").spec;
    BootstrapOptions bo;
    bo.replicates = 40;
    bo.seed = 99;
    const auto one = bootstrap_cov(ds, spec, Measure::OR, bo);
    bo.workers = 3;
    const auto three = bootstrap_cov(ds, spec, Measure::OR, bo);
    CHECK((one.array() == three.array()).all());
    CHECK((one - one.transpose()).cwiseAbs().maxCoeff() == 0.0);
    bo.seed = 100;
    CHECK_FALSE((bootstrap_cov(ds, spec, Measure::OR, bo).array() == one.array()).all());
}

TEST_CASE("stratified resampling keeps trial sizes") {
    const auto ds = generate_setting(preset_setting("1"), 3);
    const auto rows = stratified_resample(ds, 1, 0);
    REQUIRE(rows.size() == ds.size());
    const auto sub = ds.subset(rows);
    for (StudyIndex k = 0; k < ds.num_studies(); ++k) CHECK(sub.rows_of(k).size() == ds.rows_of(k).size());
    CHECK(stratified_resample(ds, 1, 0) == rows);
    CHECK(stratified_resample(ds, 1, 1) != rows);
}

TEST_CASE("undefined bootstrap cells are excluded and counted") {
    // Control events are rare in trial "b": some resamples have none, making its risk ratio undefined.
    const auto ds = fixtures::from_blocks({"L"}, {{"a", 1, {0.0}, 40, 12},
                                                  {"a", 0, {0.0}, 40, 10},
                                                  {"b", 1, {0.0}, 40, 12},
                                                  {"b", 0, {0.0}, 40, 1}});
    EstimatorSpec spec;
    spec.method = Method::IPW;
    spec.ps_formula = ModelFormula::parse("~ 1");
    spec.allow_partial = true;
    BootstrapOptions bo;
    bo.replicates = 200;
    bo.seed = 4;
    bo.throw_on_failure = false;
    const Measure ms[] = {Measure::RR};
    const auto r = bootstrap(ds, spec, ms, bo);
    const auto cell = EffectMatrix::cell_index(2, 1, 1);
    CHECK(r.excluded[0][cell] > 0);
    CHECK(r.excluded[0][EffectMatrix::cell_index(2, 0, 0)] == 0);
    CHECK(r.excluded_share(0, cell) < 0.5);
    CHECK_FALSE(r.too_many_failed);
    CHECK(std::isfinite(r.sigma[0](static_cast<Eigen::Index>(cell), static_cast<Eigen::Index>(cell))));

    bo.max_excluded_share = 0.01;
    bo.throw_on_failure = true;
    CHECK_THROWS_AS(bootstrap(ds, spec, ms, bo), Error);
}

TEST_CASE("singular bread is reported") {
    const auto ds = generate_setting(preset_setting("1"), 3);
    const auto spec = make_analysis(preset_setting("1"), "OCR1").spec;
    SandwichOptions so;
    so.max_condition = 1.0;
    try {
        (void)sandwich_cov(ds, spec, Measure::RR, so);
        FAIL("expected a singular bread");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::SingularBread);
    }
}
