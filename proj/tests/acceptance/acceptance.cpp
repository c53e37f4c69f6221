// Acceptance run: reproduces the simulation targets and the property suite,
// printing one PASS/FAIL line per criterion. Exit status is nonzero when any
// criterion fails.

#include "fixtures.hpp"

#include "casemix/error.hpp"
#include "casemix/glm.hpp"
#include "casemix/het.hpp"
#include "casemix/meta.hpp"
#include "casemix/simlab.hpp"
#include "casemix/transport.hpp"
#include "casemix/variance.hpp"

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <thread>
#include <vector>

using namespace casemix;

namespace {

constexpr std::size_t kReps = 1000;
constexpr std::size_t kOracleRuns = 5000;
constexpr std::uint64_t kSeed = 20240611;

std::size_t workers() { return std::max(1u, std::thread::hardware_concurrency()); }

/// Collects the individual checks of one criterion.
class Criterion {
public:
    explicit Criterion(int number) : number_(number) {}

    void check(bool ok, const std::string& what) {
        all_ &= ok;
        std::printf("  [%s] %s\n", ok ? "ok" : "FAIL", what.c_str());
    }
    static void info(const std::string& what) { std::printf("  [info] %s\n", what.c_str()); }

    bool finish() const {
        std::printf("criterion %d: %s\n", number_, all_ ? "PASS" : "FAIL");
        std::fflush(stdout);
        return all_;
    }

private:
    int number_;
    bool all_ = true;
};

std::string fmt(const char* pattern, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, pattern, args...);
    return buf;
}

std::string cell(StudyIndex j, StudyIndex k) { return fmt("(%zu,%zu)", j + 1, k + 1); }

SimulationReport study(const char* preset, const std::vector<std::string>& analyses, std::size_t bootstrap_b,
                       const OracleTruth* truth = nullptr) {
    const auto cfg = preset_setting(preset);
    StudyOptions opt;
    opt.reps = kReps;
    opt.seed = kSeed;
    opt.bootstrap_b = bootstrap_b;
    opt.workers = workers();
    opt.oracle_runs = kOracleRuns;
    const auto start = std::chrono::steady_clock::now();
    auto r = truth ? run_study(cfg, analyses, opt, *truth) : run_study(cfg, analyses, opt);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("  [info] setting %s: %zu reps, B=%zu, failure rate %.4f, %.0f s\n", preset, kReps, bootstrap_b,
                r.failure_rate(), secs);
    return r;
}

bool within(double v, double lo, double hi) { return std::isfinite(v) && v >= lo && v <= hi; }

// ---------------------------------------------------------------------------

bool criterion1() {
    Criterion c(1);
    const auto truth = true_values_oracle(preset_setting("1"), kOracleRuns, kSeed, workers());
    const struct {
        Measure m;
        StudyIndex s;
        double target, tol;
    } expected[] = {{Measure::RR, 0, 1.31, 0.02}, {Measure::RR, 1, 0.94, 0.02},
                    {Measure::OR, 0, 1.64, 0.04}, {Measure::OR, 1, 0.89, 0.04}};
    for (const auto& e : expected) {
        const double v = truth.effect(e.m, e.s, e.s);
        c.check(std::abs(v - e.target) <= e.tol,
                fmt("setting 1 %s%s = %.4f, target %.2f +- %.2f", to_string(e.m).c_str(), cell(e.s, e.s).c_str(), v,
                    e.target, e.tol));
    }
    for (const char* p : {"2", "3", "4", "5"}) {
        const auto t = true_values_oracle(preset_setting(p), kOracleRuns, kSeed, workers());
        Criterion::info(fmt("setting %s marginals: RR %.3f / %.3f, OR %.3f / %.3f", p, t.effect(Measure::RR, 0, 0),
                            t.effect(Measure::RR, 1, 1), t.effect(Measure::OR, 0, 0), t.effect(Measure::OR, 1, 1)));
    }
    return c.finish();
}

bool criterion2(const SimulationReport& s1) {
    Criterion c(2);
    for (const char* a : {"OCR1", "IPW1"}) {
        for (const auto& [j, k] : {std::pair<StudyIndex, StudyIndex>{0, 1}, {1, 0}})
            for (int x : {1, 0}) {
                const auto* p = s1.probability(a, j, k, x);
                c.check(p && std::abs(p->bias) <= 0.005,
                        fmt("%s P(x=%d) %s bias %.5f (|bias| <= 0.005)", a, x, cell(j, k).c_str(), p ? p->bias : NAN));
            }
        for (const auto m : {Measure::RR, Measure::OR})
            for (const auto& [j, k] : {std::pair<StudyIndex, StudyIndex>{0, 1}, {1, 0}}) {
                const auto* e = s1.effect(a, m, j, k);
                c.check(e && std::abs(e->relative_bias) <= 0.03,
                        fmt("%s %s%s relative bias %.2f%% (|rb| <= 3%%)", a, to_string(m).c_str(), cell(j, k).c_str(),
                            e ? 100 * e->relative_bias : NAN));
            }
    }
    return c.finish();
}

bool criterion3(const SimulationReport& s1, const SimulationReport& s2) {
    Criterion c(3);
    const auto* p = s1.probability("IPW3", 0, 1, 1);
    c.check(p && within(p->relative_bias, 0.50, 0.90),
            fmt("setting 1 IPW3 P(x=1) (1,2) relative bias %.1f%% in [50, 90]", p ? 100 * p->relative_bias : NAN));
    const auto* a = s2.effect("OCR2", Measure::RR, 0, 1);
    c.check(a && std::abs(a->bias + 0.66) <= 0.10,
            fmt("setting 2 OCR2 RR(1,2) bias %.4f, target -0.66 +- 0.10", a ? a->bias : NAN));
    const auto* b = s2.effect("OCR2", Measure::RR, 1, 0);
    c.check(b && std::abs(b->bias - 0.49) <= 0.10,
            fmt("setting 2 OCR2 RR(2,1) bias %.4f, target 0.49 +- 0.10", b ? b->bias : NAN));
    return c.finish();
}

bool criterion4(const SimulationReport& s1) {
    Criterion c(4);
    std::size_t or_cells = 0, or_btv_larger = 0;
    for (const auto& a : s1.analyses)
        for (const auto m : {Measure::RR, Measure::OR})
            for (StudyIndex j = 0; j < 2; ++j)
                for (StudyIndex k = 0; k < 2; ++k) {
                    const auto* e = s1.effect(a, m, j, k);
                    const std::string name = a + " log " + to_string(m) + cell(j, k);
                    if (!e) {
                        c.check(false, name + ": no estimates");
                        continue;
                    }
                    const double mev = e->mev / e->mcv, btv = e->btv / e->mcv;
                    c.check(within(mev, 0.85, 1.15) && within(btv, 0.85, 1.15),
                            fmt("%s MCV %.4g MEV/MCV %.3f BTV/MCV %.3f (n %zu, n_mev %zu, n_btv %zu)", name.c_str(),
                                e->mcv, mev, btv, e->n, e->n_mev, e->n_btv));
                    if (m == Measure::OR && std::isfinite(e->btv) && std::isfinite(e->mev)) {
                        ++or_cells;
                        or_btv_larger += e->btv >= e->mev;
                    }
                }
    c.check(2 * or_btv_larger > or_cells, fmt("BTV >= MEV in %zu of %zu OR cells", or_btv_larger, or_cells));
    return c.finish();
}

void rejection_check(Criterion& c, const SimulationReport& r, const char* setting, const std::string& analysis,
                     const std::string& contrast, double lo, double hi) {
    for (const auto m : {Measure::RR, Measure::OR}) {
        const auto* t = r.rejection(analysis, contrast, m, "sandwich");
        c.check(t && within(t->rejection_rate, lo, hi),
                fmt("setting %s %s %s %s: %.1f%% in [%.0f, %.0f] (%zu infeasible)", setting, analysis.c_str(),
                    contrast.c_str(), to_string(m).c_str(), t ? 100 * t->rejection_rate : NAN, 100 * lo, 100 * hi,
                    t ? t->n_infeasible : 0));
        if (const auto* b = r.rejection(analysis, contrast, m, "bootstrap"))
            Criterion::info(fmt("  bootstrap variance: %.1f%%", 100 * b->rejection_rate));
    }
}

bool criterion5(const SimulationReport& s1, const SimulationReport& s2) {
    Criterion c(5);
    for (const char* a : {"OCR1", "IPW1", "IPW2"}) {
        for (const char* row : {"beyond_casemix[1]", "beyond_casemix[2]"}) rejection_check(c, s1, "1", a, row, 0.03, 0.07);
        for (const char* col : {"casemix[1]", "casemix[2]"}) rejection_check(c, s1, "1", a, col, 0.95, 1.0);
    }
    for (const char* a : {"OCR1", "OCR2", "IPW1"}) rejection_check(c, s2, "2", a, "conventional", 0.03, 0.07);
    for (const char* row : {"beyond_casemix[1]", "beyond_casemix[2]"}) rejection_check(c, s2, "2", "OCR1", row, 0.65, 1.0);
    for (const char* a : {"OCR1", "IPW1"})
        for (const char* col : {"casemix[1]", "casemix[2]"}) rejection_check(c, s2, "2", a, col, 0.95, 1.0);

    // Outside the checked set, printed for the record.
    for (const char* col : {"beyond_casemix[1]", "beyond_casemix[2]", "casemix[1]", "casemix[2]"})
        for (const auto m : {Measure::RR, Measure::OR})
            if (const auto* t = s1.rejection("IPW3", col, m, "sandwich"))
                Criterion::info(fmt("setting 1 IPW3 %s %s: %.1f%%", col, to_string(m).c_str(), 100 * t->rejection_rate));
    for (const char* col : {"casemix[1]", "casemix[2]"})
        for (const auto m : {Measure::RR, Measure::OR})
            if (const auto* t = s2.rejection("OCR2", col, m, "sandwich"))
                Criterion::info(fmt("setting 2 OCR2 %s %s: %.1f%%", col, to_string(m).c_str(), 100 * t->rejection_rate));
    return c.finish();
}

bool criterion6() {
    Criterion c(6);
    const auto r = study("3", {"IPW1", "SIPW1"}, 0);
    std::size_t oob = 0;
    for (int x : {1, 0})
        if (const auto* p = r.probability("IPW1", 1, 0, x)) oob += p->out_of_bounds;
    c.check(oob >= 1, fmt("IPW1 (2,1): %zu out-of-bounds probabilities", oob));

    std::size_t infeasible = 0;
    for (const auto& t : r.rejections)
        if (t.analysis == "IPW1" && t.measure == Measure::OR) infeasible += t.n_infeasible;
    c.check(infeasible >= 1, fmt("IPW1: %zu infeasible OR-based tests", infeasible));

    std::size_t sipw_oob = 0;
    for (const auto& p : r.probabilities)
        if (p.analysis == "SIPW1") sipw_oob += p.out_of_bounds;
    c.check(sipw_oob == 0, fmt("SIPW1: %zu out-of-bounds probabilities", sipw_oob));
    for (int x : {1, 0}) {
        const auto* p = r.probability("SIPW1", 1, 0, x);
        c.check(p && std::abs(p->bias) > 0.03, fmt("SIPW1 P(x=%d) (2,1) bias %.4f (|bias| > 0.03)", x, p ? p->bias : NAN));
    }
    return c.finish();
}

bool criterion7() {
    Criterion c(7);
    const auto r = study("5", {"OCR3"}, 0);
    const auto* a = r.effect("OCR3", Measure::RR, 1, 0);
    c.check(a && within(a->relative_bias, 0.10, 0.25),
            fmt("OCR3 RR(2,1) relative bias %.2f%% in [10, 25] (truth %.4f, mean %.4f)", a ? 100 * a->relative_bias : NAN,
                a ? a->truth : NAN, a ? a->mean : NAN));
    const auto* b = r.effect("OCR3", Measure::RR, 0, 1);
    c.check(b && std::abs(b->relative_bias) <= 0.03,
            fmt("OCR3 RR(1,2) relative bias %.2f%% (|rb| <= 3%%)", b ? 100 * b->relative_bias : NAN));
    return c.finish();
}

// ---------------------------------------------------------------------------

bool glm_properties(Criterion& c) {
    std::mt19937_64 rng(20240601);
    std::normal_distribution<double> z;
    std::uniform_real_distribution<double> u;
    Eigen::MatrixXd X(200, 3);
    Eigen::VectorXd y(200);
    for (int i = 0; i < 200; ++i) {
        X(i, 0) = 1.0;
        X(i, 1) = z(rng);
        X(i, 2) = z(rng);
        y(i) = u(rng) < expit(0.3 + 0.8 * X(i, 1) - 0.5 * X(i, 2)) ? 1.0 : 0.0;
    }
    const auto fit = fit_logistic(X, y);
    const double score = logistic_score(X, y, std::nullopt, fit.coef).cwiseAbs().maxCoeff();
    c.check(fit.converged && score < 1e-6, fmt("logistic score at the estimate %.2e", score));

    const auto info = logistic_information(X, std::nullopt, fit.coef);
    Eigen::MatrixXd fd(3, 3);
    for (int k = 0; k < 3; ++k) {
        const double h = 1e-6 * (1.0 + std::abs(fit.coef(k)));
        Eigen::VectorXd up = fit.coef, down = fit.coef;
        up(k) += h;
        down(k) -= h;
        fd.col(k) = -(logistic_score(X, y, std::nullopt, up) - logistic_score(X, y, std::nullopt, down)) / (2 * h);
    }
    const double rel = (fd - info).norm() / info.norm();
    c.check(rel < 1e-4, fmt("information vs finite differences, relative error %.2e", rel));
    return true;
}

void bread_properties(Criterion& c) {
    const auto cfg = preset_setting("1");
    const auto ds = generate_setting(cfg, 17);
    for (const char* name : {"OCR1", "IPW1", "SIPW1"}) {
        TransportModel model(ds, make_analysis(cfg, name).spec);
        const auto grid = standardize_all(model);
        const EstimatingSystem sys(model, grid, {Measure::RR, Measure::OR});
        const auto a = sys.bread();
        const double rel = (a - sys.bread_numeric()).norm() / a.norm();
        const double psi = sys.mean_psi().cwiseAbs().maxCoeff();
        c.check(rel < 1e-4 && psi < 1e-6,
                fmt("%s stacked bread vs finite differences %.2e, mean estimating function %.2e", name, rel, psi));
    }
}

void enumeration_properties(Criterion& c) {
    // Both arms of trial "k" standardize to exactly 0.4 in trial "j".
    const auto ds = fixtures::discrete_pair();
    const auto outcome = ModelFormula::parse("y ~ 1 + treat + L + treat:L");
    const auto membership = ModelFormula::parse("~ 1 + L");
    double worst = 0.0;
    for (const auto x : {Arm::Treated, Arm::Control}) {
        worst = std::max(worst, std::abs(ocr_standardized_prob(ds, 0, 1, x, outcome).prob - 0.4));
        for (const bool stabilized : {false, true})
            worst = std::max(worst, std::abs(ipw_standardized_prob(ds, 0, 1, x, membership, stabilized).prob - 0.4));
    }
    c.check(worst < 1e-10, fmt("OCR/IPW/SIPW vs enumeration on the discrete fixture, max error %.2e", worst));
}

void stabilized_bounds(Criterion& c) {
    std::size_t cells = 0, outside = 0;
    for (const char* preset : {"1", "3", "5"}) {
        const auto cfg = preset_setting(preset);
        const auto spec = make_analysis(cfg, "SIPW1").spec;
        for (std::uint64_t seed = 1; seed <= 20; ++seed)
            for (const auto& p : standardize_all(generate_setting(cfg, seed), spec).cells) {
                ++cells;
                outside += !p || p->prob < 0.0 || p->prob > 1.0 || p->out_of_bounds;
            }
    }
    c.check(outside == 0, fmt("stabilized probabilities outside [0, 1]: %zu of %zu", outside, cells));
}

void wald_invariance(Criterion& c) {
    Eigen::VectorXd est(4);
    est << 0.1, -0.3, 0.5, 0.2;
    Eigen::MatrixXd A(4, 4);
    A << 1.0, 0.2, -0.3, 0.1, 0.4, 0.9, 0.0, -0.2, 0.3, -0.1, 1.2, 0.5, -0.2, 0.3, 0.1, 0.8;
    const Eigen::MatrixXd sigma = A * A.transpose() + 0.1 * Eigen::MatrixXd::Identity(4, 4);
    const auto M = adjacent_contrast({0, 1, 2, 3}, 4);
    Eigen::Matrix3d R;
    R << 2, 1, 0, 0, -1, 3, 1, 1, 1;
    const auto a = wald_test(est, sigma, M);
    const auto b = wald_test(est, sigma, R * M);
    const double rel = std::abs(a.statistic - b.statistic) / a.statistic;
    c.check(rel < 1e-8 && a.df == b.df, fmt("Wald statistic under an invertible re-expression, relative change %.2e", rel));
}

void dl_example(Criterion& c) {
    const double se = std::sqrt(0.1);
    const auto s = pool_row({{"a", 0.0, se}, {"b", 1.0, se}});
    c.check(std::abs(s.tau2 - 0.4) < 1e-12, fmt("moment estimate of tau2 on (0, 1) with variances 0.1: %.12f", s.tau2));
}

void worker_determinism(Criterion& c) {
    const auto cfg = preset_setting("1");
    StudyOptions opt;
    opt.reps = 8;
    opt.seed = 5;
    opt.bootstrap_b = 4;
    opt.oracle_runs = 50;
    const auto truth = true_values_oracle(cfg, opt.oracle_runs, opt.seed);
    const auto one = run_study(cfg, {"OCR1", "IPW1"}, opt, truth);
    opt.workers = 3;
    const auto three = run_study(cfg, {"OCR1", "IPW1"}, opt, truth);
    c.check(effect_table_csv(one) == effect_table_csv(three) && variance_table_csv(one) == variance_table_csv(three) &&
                rejection_table_csv(one) == rejection_table_csv(three) &&
                probability_table_csv(one) == probability_table_csv(three),
            "simulation tables identical with 1 and 3 workers");

    const auto ds = generate_setting(cfg, 3);
    const auto spec = make_analysis(cfg, "IPW1").spec;
    BootstrapOptions bo;
    bo.replicates = 30;
    bo.seed = 11;
    const auto b1 = bootstrap_cov(ds, spec, Measure::OR, bo);
    bo.workers = 3;
    const auto b3 = bootstrap_cov(ds, spec, Measure::OR, bo);
    c.check((b1.array() == b3.array()).all(), "bootstrap covariance identical with 1 and 3 workers");
}

bool criterion8() {
    Criterion c(8);
    glm_properties(c);
    bread_properties(c);
    enumeration_properties(c);
    stabilized_bounds(c);
    wald_invariance(c);
    dl_example(c);
    worker_determinism(c);
    return c.finish();
}

}  // namespace

int main() {
    std::vector<bool> results;
    auto guarded = [&](int number, const std::function<bool()>& fn) {
        try {
            results.push_back(fn());
        } catch (const std::exception& e) {
            std::printf("  [FAIL] %s\ncriterion %d: FAIL\n", e.what(), number);
            results.push_back(false);
        }
        std::fflush(stdout);
    };

    guarded(1, criterion1);
    std::printf("  [info] running setting 1 and setting 2 studies\n");
    std::fflush(stdout);
    const auto s1 = study("1", default_analyses(preset_setting("1")), 50);
    const auto s2 = study("2", default_analyses(preset_setting("2")), 50);
    guarded(2, [&] { return criterion2(s1); });
    guarded(3, [&] { return criterion3(s1, s2); });
    guarded(4, [&] { return criterion4(s1); });
    guarded(5, [&] { return criterion5(s1, s2); });
    guarded(6, criterion6);
    guarded(7, criterion7);
    guarded(8, criterion8);

    std::size_t passed = 0;
    for (bool r : results) passed += r;
    std::printf("%zu of %zu criteria passed\n", passed, results.size());
    return passed == results.size() ? 0 : 1;
}
