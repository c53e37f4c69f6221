#include "casemix/simlab.hpp"

#include "casemix/error.hpp"
#include "casemix/parallel.hpp"
#include "casemix/rng.hpp"
#include "casemix/stats.hpp"
#include "casemix/textio.hpp"
#include "casemix/variance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace casemix {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double eval_term(const CovariateSchema& schema, const Term& t, std::span<const double> l, int x) {
    double v = 1.0;
    for (const auto& f : t.factors) {
        if (f.is_treat) {
            v *= x;
            continue;
        }
        const auto c = schema.find(f.covariate);
        if (!c) throw Error(ErrorCode::MissingColumn, "predictor uses unknown covariate '" + f.covariate + "'");
        v *= std::pow(l[*c], f.power);
    }
    return v;
}

double draw(const CovariateLaw& law, std::mt19937_64& rng) {
    if (law.kind == CovariateLaw::Kind::Bernoulli) return std::bernoulli_distribution(law.p)(rng) ? 1.0 : 0.0;
    return std::normal_distribution<double>(law.mean, law.sd)(rng);
}

LpTerm lp(double coef, Term t, std::optional<StudyIndex> study = std::nullopt) { return {coef, std::move(t), study}; }

Term treat_by(const std::string& cov) { return Term::interaction(Factor{true, {}, 1}, Factor{false, cov, 1}); }

/// Covariates and trial labels of one sample, without treatment or outcome.
struct Population {
    Eigen::MatrixXd L;
    std::vector<StudyIndex> study;
};

Population draw_population(const SettingConfig& cfg, std::mt19937_64& rng) {
    Population pop;
    const auto p = cfg.schema.size();
    const auto n = cfg.n_total;
    pop.L.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
    pop.study.resize(n);
    std::vector<double> row(p);
    if (cfg.membership == MembershipKind::Pool) {
        std::vector<double> eta(cfg.K);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < p; ++c) row[c] = draw(cfg.pool_laws[c], rng);
            eta[0] = 0.0;
            for (std::size_t c = 1; c < cfg.K; ++c) eta[c] = cfg.membership_lp[c - 1].eval(cfg.schema, row, 0, 0);
            const double mx = *std::max_element(eta.begin(), eta.end());
            double denom = 0.0;
            for (auto& e : eta) denom += (e = std::exp(e - mx));
            const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * denom;
            double acc = 0.0;
            StudyIndex s = cfg.K - 1;
            for (std::size_t c = 0; c < cfg.K; ++c) {
                acc += eta[c];
                if (u < acc) {
                    s = c;
                    break;
                }
            }
            pop.study[i] = s;
            for (std::size_t c = 0; c < p; ++c) pop.L(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = row[c];
        }
    } else {
        std::size_t i = 0;
        for (StudyIndex s = 0; s < cfg.K; ++s) {
            const std::size_t size = n / cfg.K + (s < n % cfg.K ? 1 : 0);
            for (std::size_t r = 0; r < size; ++r, ++i) {
                pop.study[i] = s;
                for (std::size_t c = 0; c < p; ++c)
                    pop.L(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = draw(cfg.trial_laws[s][c], rng);
            }
        }
    }
    return pop;
}

std::span<const double> row_span(const Eigen::MatrixXd& L, std::size_t i, std::vector<double>& buf) {
    buf.resize(static_cast<std::size_t>(L.cols()));
    for (Eigen::Index c = 0; c < L.cols(); ++c) buf[static_cast<std::size_t>(c)] = L(static_cast<Eigen::Index>(i), c);
    return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// settings

double LinearPredictor::eval(const CovariateSchema& schema, std::span<const double> l, int x, StudyIndex s) const {
    double v = 0.0;
    for (const auto& t : terms) {
        if (t.study && *t.study != s) continue;
        v += t.coef * eval_term(schema, t.term, l, x);
    }
    return v;
}

std::string LinearPredictor::to_string(const std::vector<std::string>& labels) const {
    std::string out;
    for (const auto& t : terms) {
        if (!out.empty()) out += " + ";
        out += textio::format_double(t.coef);
        if (!t.term.factors.empty()) out += "*" + t.term.to_string();
        if (t.study) out += "*I(S=" + (*t.study < labels.size() ? labels[*t.study] : std::to_string(*t.study)) + ")";
    }
    return out.empty() ? "0" : out;
}

std::vector<std::string> SettingConfig::labels() const {
    std::vector<std::string> out;
    for (std::size_t k = 0; k < K; ++k) out.push_back(std::to_string(k + 1));
    return out;
}

void SettingConfig::validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); };
    if (K < 2) fail("a setting needs at least two trials");
    if (n_total < 4 * K) fail("n_total is too small for the number of trials");
    if (schema.size() == 0) fail("a setting needs at least one covariate");
    if (!allocation.empty()) {
        if (allocation.size() != K) fail("allocation needs one probability per trial");
        for (double a : allocation)
            if (!(a > 0.0 && a < 1.0)) fail("allocation probabilities must lie in (0, 1)");
    }
    auto check_laws = [&](const std::vector<CovariateLaw>& laws) {
        if (laws.size() != schema.size()) fail("covariate laws must match the covariate list");
        for (const auto& law : laws) {
            if (law.kind == CovariateLaw::Kind::Normal && !(law.sd > 0.0 && std::isfinite(law.mean)))
                fail("normal laws need a finite mean and a positive standard deviation");
            if (law.kind == CovariateLaw::Kind::Bernoulli && !(law.p > 0.0 && law.p < 1.0))
                fail("Bernoulli laws need p in (0, 1)");
        }
    };
    if (membership == MembershipKind::Pool) {
        check_laws(pool_laws);
        if (membership_lp.size() != K - 1) fail("pool membership needs K - 1 linear predictors");
        for (const auto& m : membership_lp)
            for (const auto& t : m.terms)
                if (t.term.involves_treat() || t.study) fail("membership predictors may only use covariates");
    } else {
        if (trial_laws.size() != K) fail("per-trial membership needs laws for every trial");
        for (const auto& laws : trial_laws) check_laws(laws);
    }
    std::vector<double> zero(schema.size(), 0.0);
    auto check_lp = [&](const LinearPredictor& lp) {
        for (const auto& t : lp.terms) {
            if (!std::isfinite(t.coef)) fail("coefficients must be finite");
            if (t.study && *t.study >= K) fail("a trial-specific term names an unknown trial");
            (void)eval_term(schema, t.term, zero, 0);
        }
    };
    check_lp(outcome);
    for (const auto& m : membership_lp) check_lp(m);
}

SettingConfig preset_setting(std::string_view name) {
    SettingConfig cfg;
    cfg.name = std::string(name);
    cfg.K = 2;
    cfg.n_total = 1500;
    cfg.schema = CovariateSchema(std::vector<std::string>{"L"});
    const Term L = Term::main("L");
    const Term L2 = Term::power("L", 2);
    const Term L3 = Term::power("L", 3);
    const Term one = Term::intercept();
    const Term X = Term::treat();
    const Term XL = treat_by("L");

    if (name == "1") {
        cfg.preset = 1;
        cfg.pool_laws = {CovariateLaw::normal(0.0, 1.0)};
        cfg.membership_lp = {LinearPredictor{{lp(0.5, one), lp(0.5, L), lp(0.05, L2)}}};
        cfg.outcome.terms = {lp(-0.25, one), lp(-1.5, XL), lp(1.0, L), lp(0.15, X)};
    } else if (name == "2" || name == "2-intercept") {
        cfg.preset = 2;
        cfg.pool_laws = {CovariateLaw::normal(0.0, 1.0)};
        cfg.membership_lp = {LinearPredictor{{lp(0.5, one), lp(0.5, L)}}};
        cfg.outcome.terms = {lp(-1.0, one), lp(-1.55, XL), lp(1.0, L), lp(0.1, X)};
        if (name == "2")
            cfg.outcome.terms.push_back(lp(0.75, X, 1));
        else
            cfg.outcome.terms.push_back(lp(0.75, one, 1));
    } else if (name == "3") {
        cfg.preset = 3;
        cfg.pool_laws = {CovariateLaw::normal(-0.125, 3.5)};
        cfg.membership_lp = {LinearPredictor{{lp(0.5, one), lp(0.5, L), lp(0.3, L2)}}};
        cfg.outcome.terms = {lp(0.15, one), lp(0.5, X), lp(-0.5, XL), lp(-0.15, L)};
    } else if (name == "4") {
        cfg.preset = 4;
        cfg.membership = MembershipKind::PerTrial;
        cfg.trial_laws = {{CovariateLaw::normal(0.0, 0.35)}, {CovariateLaw::normal(0.0, 0.35)}};
        cfg.outcome.terms = {lp(-0.5, one), lp(1.0, XL), lp(1.0, L), lp(-0.3, X), lp(0.75, X, 1)};
    } else if (name == "5") {
        cfg.preset = 5;
        cfg.membership = MembershipKind::PerTrial;
        cfg.trial_laws = {{CovariateLaw::normal(0.0, 0.5)}, {CovariateLaw::normal(-1.5, 0.2)}};
        cfg.outcome.terms = {lp(1.0, one), lp(-0.75, X), lp(1.0, L), lp(2.0, L2), lp(2.0, L3)};
    } else {
        throw Error(ErrorCode::InvalidConfig, "unknown preset '" + std::string(name) + "' (1, 2, 2-intercept, 3, 4, 5)");
    }
    cfg.validate();
    return cfg;
}

std::vector<std::string> preset_names() { return {"1", "2", "2-intercept", "3", "4", "5"}; }

IpdDataset generate_setting(const SettingConfig& cfg, std::uint64_t seed, std::size_t replicate) {
    cfg.validate();
    auto rng = stream_rng(seed, replicate, 0xda7a5e7ULL);
    const auto pop = draw_population(cfg, rng);
    const auto n = cfg.n_total;
    std::vector<std::uint8_t> treat(n), outcome(n);
    std::vector<double> buf;
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = pop.study[i];
        const int x = unif(rng) < cfg.allocation_of(s) ? 1 : 0;
        const double pr = expit(cfg.outcome.eval(cfg.schema, row_span(pop.L, i, buf), x, s));
        treat[i] = static_cast<std::uint8_t>(x);
        outcome[i] = unif(rng) < pr ? 1 : 0;
    }
    return IpdDataset(cfg.schema, cfg.labels(), pop.study, std::move(treat), std::move(outcome), pop.L);
}

double OracleTruth::effect(Measure m, StudyIndex j, StudyIndex k) const {
    const double p1 = p(j, k, 1), p0 = p(j, k, 0);
    switch (m) {
        case Measure::RR: return p1 / p0;
        case Measure::OR: return (p1 / (1.0 - p1)) / (p0 / (1.0 - p0));
        case Measure::RD: return p1 - p0;
    }
    return kNaN;
}

OracleTruth true_values_oracle(const SettingConfig& cfg, std::size_t runs, std::uint64_t seed, std::size_t workers) {
    cfg.validate();
    if (runs == 0) throw Error(ErrorCode::Precondition, "oracle needs at least one run");
    const auto K = cfg.K;
    const auto cells = 2 * K * K;
    std::vector<std::vector<double>> per_run(runs, std::vector<double>(cells, kNaN));
    parallel_for(runs, workers, [&](std::size_t r) {
        auto rng = stream_rng(seed, r, 0x0fac1eULL);
        const auto pop = draw_population(cfg, rng);
        std::vector<double> sum(cells, 0.0);
        std::vector<std::size_t> count(K, 0);
        std::vector<double> buf;
        for (std::size_t i = 0; i < cfg.n_total; ++i) {
            const auto j = pop.study[i];
            ++count[j];
            const auto l = row_span(pop.L, i, buf);
            for (StudyIndex k = 0; k < K; ++k)
                for (int x : {0, 1}) sum[(j * K + k) * 2 + static_cast<std::size_t>(x)] += expit(cfg.outcome.eval(cfg.schema, l, x, k));
        }
        for (StudyIndex j = 0; j < K; ++j)
            if (count[j] > 0)
                for (std::size_t c = j * K * 2; c < (j + 1) * K * 2; ++c) per_run[r][c] = sum[c] / static_cast<double>(count[j]);
    });
    OracleTruth t;
    t.K = K;
    t.runs = runs;
    t.labels = cfg.labels();
    t.prob.assign(cells, 0.0);
    t.prob_se.assign(cells, 0.0);
    for (std::size_t c = 0; c < cells; ++c) {
        std::vector<double> v;
        v.reserve(runs);
        for (std::size_t r = 0; r < runs; ++r)
            if (std::isfinite(per_run[r][c])) v.push_back(per_run[r][c]);
        t.prob[c] = stats::mean(v);
        t.prob_se[c] = v.size() > 1 ? std::sqrt(stats::variance(v) / static_cast<double>(v.size())) : 0.0;
    }
    return t;
}

// ---------------------------------------------------------------------------
// analyses

ModelFormula correct_outcome_formula(const SettingConfig& cfg) {
    ModelFormula f(std::vector<Term>{Term::intercept(), Term::treat()});
    for (const auto& t : cfg.outcome.terms)
        if (!f.find(t.term)) f = f.with_term(t.term);
    return f;
}

ModelFormula correct_membership_formula(const SettingConfig& cfg) {
    ModelFormula f(std::vector<Term>{Term::intercept()});
    if (cfg.membership == MembershipKind::Pool) {
        for (const auto& m : cfg.membership_lp)
            for (const auto& t : m.terms)
                if (!f.find(t.term)) f = f.with_term(t.term);
        return f;
    }
    // The log density ratio of two normal laws is quadratic in the covariate,
    // and linear when the standard deviations agree.
    for (std::size_t c = 0; c < cfg.schema.size(); ++c) {
        const auto& name = cfg.schema.names()[c];
        f = f.with_term(Term::main(name));
        bool sd_differs = false;
        for (const auto& laws : cfg.trial_laws)
            if (laws[c].kind == CovariateLaw::Kind::Normal && laws[c].sd != cfg.trial_laws[0][c].sd) sd_differs = true;
        if (sd_differs) f = f.with_term(Term::power(name, 2));
    }
    return f;
}

Analysis make_analysis(const SettingConfig& cfg, std::string_view name) {
    Analysis a;
    a.name = std::string(name);
    auto& spec = a.spec;
    spec.allow_partial = true;
    std::string_view base = name;
    bool stabilized = false;
    if (base.size() > 1 && base[0] == 'S' && base.substr(1, 3) == "IPW") {
        stabilized = true;
        base.remove_prefix(1);
    }
    if (base == "OCR1" || base == "OCR2" || base == "OCR3") {
        spec.method = Method::OCR;
        spec.outcome_formula = correct_outcome_formula(cfg);
        if (base == "OCR2") {
            std::vector<Term> keep;
            for (const auto& t : spec.outcome_formula.terms())
                if (!(t.kind() == Term::Kind::Interaction && t.involves_treat())) keep.push_back(t);
            spec.outcome_formula = ModelFormula(std::move(keep));
        } else if (base == "OCR3") {
            std::vector<Term> keep;
            bool dropped = false;
            for (const auto& t : spec.outcome_formula.terms()) {
                if (t.kind() == Term::Kind::Power && t.factors[0].power == 3) {
                    dropped = true;
                    continue;
                }
                keep.push_back(t);
            }
            if (!dropped) throw Error(ErrorCode::InvalidConfig, "OCR3 needs a cubic term in the outcome model");
            spec.outcome_overrides[{1, 0}] = ModelFormula(std::move(keep));
        }
        return a;
    }
    if (base == "IPW1" || base == "IPW2" || base == "IPW3") {
        spec.method = stabilized ? Method::IPW_STABILIZED : Method::IPW;
        spec.ps_formula = correct_membership_formula(cfg);
        spec.ps_mode = PsMode::Auto;
        if (base != "IPW1") {
            std::vector<Term> keep;
            for (const auto& t : spec.ps_formula.terms()) {
                if (t.kind() == Term::Kind::Power && t.factors[0].power == 2) continue;
                if (base == "IPW3" && t.kind() == Term::Kind::Intercept) continue;
                keep.push_back(t);
            }
            spec.ps_formula = ModelFormula(std::move(keep));
        }
        return a;
    }
    throw Error(ErrorCode::InvalidConfig,
                "unknown analysis '" + std::string(name) + "' (OCR1, OCR2, OCR3, IPW1, IPW2, IPW3, SIPW1, SIPW2, SIPW3)");
}

std::vector<std::string> default_analyses(const SettingConfig& cfg) {
    switch (cfg.preset) {
        case 1: return {"OCR1", "IPW1", "IPW2", "IPW3"};
        case 2: return {"OCR1", "OCR2", "IPW1"};
        case 3: return {"OCR1", "IPW1", "SIPW1"};
        case 4: return {"OCR1", "IPW1"};
        case 5: return {"OCR3"};
        default: return {"OCR1", "IPW1"};
    }
}

// ---------------------------------------------------------------------------
// study

namespace {

constexpr Measure kStudyMeasures[] = {Measure::RR, Measure::OR};

struct TestKey {
    std::string family;
    std::string contrast;
    Measure measure;
    std::string variance;
};

/// Results of one analysis on one replicate dataset.
struct RepRecord {
    bool failed = false;
    bool sandwich_failed = false;
    std::vector<double> prob;
    std::vector<char> out_of_bounds;
    // [measure][cell]
    std::vector<std::vector<double>> point, transformed, mev, btv;
    // per test key: -1 infeasible, 0 not rejected, 1 rejected
    std::vector<signed char> tests;
};

std::string family_of(const std::string& hypothesis) {
    if (hypothesis.rfind("beyond", 0) == 0) return "beyond_casemix";
    if (hypothesis.rfind("casemix", 0) == 0) return "casemix";
    return "conventional";
}

std::vector<TestKey> test_keys(std::size_t K, bool bootstrap) {
    EffectMatrix dummy;
    dummy.K = K;
    for (std::size_t k = 0; k < K; ++k) dummy.labels.push_back(std::to_string(k + 1));
    std::vector<std::string> names;
    for (std::size_t j = 0; j < K; ++j) names.push_back("beyond_casemix[" + dummy.labels[j] + "]");
    for (std::size_t k = 0; k < K; ++k) names.push_back("casemix[" + dummy.labels[k] + "]");
    names.push_back("conventional");
    std::vector<TestKey> keys;
    for (auto m : kStudyMeasures)
        for (const char* v : {"sandwich", "bootstrap"}) {
            if (!bootstrap && std::string(v) == "bootstrap") continue;
            for (const auto& n : names) keys.push_back({family_of(n), n, m, v});
        }
    return keys;
}

RepRecord run_one(const IpdDataset& ds, const Analysis& a, const StudyOptions& opt, std::uint64_t boot_seed,
                  const std::vector<TestKey>& keys) {
    const auto K = ds.num_studies();
    const auto cells = K * K;
    RepRecord rec;
    rec.prob.assign(2 * cells, kNaN);
    rec.out_of_bounds.assign(2 * cells, 0);
    for (auto* v : {&rec.point, &rec.transformed, &rec.mev, &rec.btv}) v->assign(2, std::vector<double>(cells, kNaN));
    rec.tests.assign(keys.size(), -1);

    TransportModel model(ds, a.spec);
    const auto grid = standardize_all(model);
    for (std::size_t c = 0; c < grid.cells.size(); ++c) {
        if (grid.cells[c]) {
            rec.prob[c] = grid.cells[c]->prob;
            rec.out_of_bounds[c] = grid.cells[c]->out_of_bounds ? 1 : 0;
        } else {
            rec.failed = true;
        }
    }
    std::vector<EffectMatrix> em;
    for (std::size_t m = 0; m < 2; ++m) {
        em.push_back(make_effect_matrix(grid, kStudyMeasures[m], true));
        for (std::size_t c = 0; c < cells; ++c)
            if (em[m].cells[c].defined) {
                rec.point[m][c] = em[m].cells[c].point;
                rec.transformed[m][c] = em[m].cells[c].transformed_point;
            }
    }

    std::optional<SandwichResult> sw;
    try {
        sw = sandwich(model, grid, kStudyMeasures);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::SingularBread && e.code() != ErrorCode::RankDeficient) throw;
        rec.sandwich_failed = true;
    }
    std::optional<BootstrapResult> bt;
    if (opt.bootstrap_b > 0) {
        BootstrapOptions bo;
        bo.replicates = opt.bootstrap_b;
        bo.seed = boot_seed;
        bo.workers = 1;
        bo.throw_on_failure = false;
        bt = bootstrap(ds, a.spec, kStudyMeasures, bo);
    }

    auto record_tests = [&](std::size_t m, const char* variance, const Eigen::MatrixXd& sigma, CovarianceMethod how) {
        EffectMatrix with = em[m];
        with.attach_sigma(sigma, how);
        const auto results = all_tests(with, opt.scale);
        for (const auto& r : results)
            for (std::size_t t = 0; t < keys.size(); ++t)
                if (keys[t].measure == kStudyMeasures[m] && keys[t].variance == variance && keys[t].contrast == r.hypothesis)
                    rec.tests[t] = r.feasible ? (r.p_value < opt.alpha ? 1 : 0) : -1;
    };
    for (std::size_t m = 0; m < 2; ++m) {
        if (sw) {
            for (std::size_t c = 0; c < cells; ++c) {
                const double v = sw->sigma[m](static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c));
                if (std::isfinite(v)) rec.mev[m][c] = v;
            }
            record_tests(m, "sandwich", sw->sigma[m], CovarianceMethod::Sandwich);
        }
        if (bt) {
            Eigen::MatrixXd S = bt->sigma[m];
            for (std::size_t c = 0; c < cells; ++c) {
                if (bt->excluded_share(m, c) > 0.5) {
                    S.row(static_cast<Eigen::Index>(c)).setConstant(kNaN);
                    S.col(static_cast<Eigen::Index>(c)).setConstant(kNaN);
                }
                const double v = S(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c));
                if (std::isfinite(v)) rec.btv[m][c] = v;
            }
            record_tests(m, "bootstrap", S, CovarianceMethod::Bootstrap);
        }
    }
    return rec;
}

double finite_mean(const std::vector<double>& v, std::size_t& n) {
    double s = 0.0;
    n = 0;
    for (double x : v)
        if (std::isfinite(x)) {
            s += x;
            ++n;
        }
    return n ? s / static_cast<double>(n) : kNaN;
}

}  // namespace

double SimulationReport::failure_rate() const {
    return options.reps ? static_cast<double>(failed_replications) / static_cast<double>(options.reps) : 0.0;
}

const ProbabilityRow* SimulationReport::probability(std::string_view analysis, StudyIndex j, StudyIndex k, int x) const {
    for (const auto& r : probabilities)
        if (r.analysis == analysis && r.j == j && r.k == k && r.x == x) return &r;
    return nullptr;
}

const EffectRow* SimulationReport::effect(std::string_view analysis, Measure m, StudyIndex j, StudyIndex k) const {
    for (const auto& r : effects)
        if (r.analysis == analysis && r.measure == m && r.j == j && r.k == k) return &r;
    return nullptr;
}

const RejectionRow* SimulationReport::rejection(std::string_view analysis, std::string_view contrast, Measure m,
                                                std::string_view variance) const {
    for (const auto& r : rejections)
        if (r.analysis == analysis && r.contrast == contrast && r.measure == m && r.variance == variance) return &r;
    return nullptr;
}

SimulationReport run_study(const SettingConfig& cfg, const std::vector<std::string>& analyses, const StudyOptions& options) {
    return run_study(cfg, analyses, options, true_values_oracle(cfg, options.oracle_runs, options.seed, options.workers));
}

SimulationReport run_study(const SettingConfig& cfg, const std::vector<std::string>& analyses, const StudyOptions& options,
                           const OracleTruth& truth) {
    cfg.validate();
    if (options.reps == 0) throw Error(ErrorCode::InvalidConfig, "reps must be positive");
    if (analyses.empty()) throw Error(ErrorCode::InvalidConfig, "no analyses requested");
    if (truth.K != cfg.K) throw Error(ErrorCode::DimensionMismatch, "truth and setting disagree on K");
    std::vector<Analysis> specs;
    for (const auto& name : analyses) specs.push_back(make_analysis(cfg, name));
    const auto K = cfg.K;
    const auto cells = K * K;
    const auto A = specs.size();
    const auto keys = test_keys(K, options.bootstrap_b > 0);

    std::vector<std::vector<RepRecord>> recs(options.reps, std::vector<RepRecord>(A));
    parallel_for(options.reps, options.workers, [&](std::size_t rep) {
        const auto ds = generate_setting(cfg, options.seed, rep);
        for (std::size_t a = 0; a < A; ++a) {
            const std::uint64_t boot_seed = splitmix64(splitmix64(options.seed ^ 0xb00757a9ULL) + rep * 64 + a);
            try {
                recs[rep][a] = run_one(ds, specs[a], options, boot_seed, keys);
            } catch (const Error&) {
                RepRecord r;
                r.failed = true;
                r.prob.assign(2 * cells, kNaN);
                r.out_of_bounds.assign(2 * cells, 0);
                for (auto* v : {&r.point, &r.transformed, &r.mev, &r.btv}) v->assign(2, std::vector<double>(cells, kNaN));
                r.tests.assign(keys.size(), -1);
                recs[rep][a] = std::move(r);
            }
        }
    });

    SimulationReport rep;
    rep.setting = cfg;
    rep.analyses = analyses;
    rep.options = options;
    rep.truth = truth;
    rep.failures.assign(A, 0);
    rep.sandwich_failures.assign(A, 0);
    for (std::size_t r = 0; r < options.reps; ++r) {
        bool any = false;
        for (std::size_t a = 0; a < A; ++a) {
            if (recs[r][a].failed) ++rep.failures[a];
            if (recs[r][a].sandwich_failed) ++rep.sandwich_failures[a];
            any = any || recs[r][a].failed || recs[r][a].sandwich_failed;
        }
        if (any) ++rep.failed_replications;
    }

    std::vector<double> col(options.reps);
    for (std::size_t a = 0; a < A; ++a) {
        for (StudyIndex j = 0; j < K; ++j)
            for (StudyIndex k = 0; k < K; ++k)
                for (int x : {1, 0}) {
                    const auto g = ProbabilityGrid::index(K, j, k, x ? Arm::Treated : Arm::Control);
                    ProbabilityRow row;
                    row.analysis = analyses[a];
                    row.j = j;
                    row.k = k;
                    row.x = x;
                    row.truth = truth.prob[g];
                    for (std::size_t r = 0; r < options.reps; ++r) {
                        col[r] = recs[r][a].prob[g];
                        row.out_of_bounds += static_cast<std::size_t>(recs[r][a].out_of_bounds[g]);
                    }
                    row.mean = finite_mean(col, row.n);
                    row.bias = row.mean - row.truth;
                    row.relative_bias = row.bias / row.truth;
                    rep.probabilities.push_back(row);
                }
        for (std::size_t m = 0; m < 2; ++m)
            for (StudyIndex j = 0; j < K; ++j)
                for (StudyIndex k = 0; k < K; ++k) {
                    const auto c = j * K + k;
                    EffectRow row;
                    row.analysis = analyses[a];
                    row.measure = kStudyMeasures[m];
                    row.j = j;
                    row.k = k;
                    row.truth = truth.effect(row.measure, j, k);
                    for (std::size_t r = 0; r < options.reps; ++r) col[r] = recs[r][a].point[m][c];
                    row.mean = finite_mean(col, row.n);
                    row.bias = row.mean - row.truth;
                    row.relative_bias = row.bias / row.truth;
                    std::vector<double> t;
                    for (std::size_t r = 0; r < options.reps; ++r)
                        if (std::isfinite(recs[r][a].transformed[m][c])) t.push_back(recs[r][a].transformed[m][c]);
                    row.mcv = stats::variance(t);
                    for (std::size_t r = 0; r < options.reps; ++r) col[r] = recs[r][a].mev[m][c];
                    row.mev = finite_mean(col, row.n_mev);
                    for (std::size_t r = 0; r < options.reps; ++r) col[r] = recs[r][a].btv[m][c];
                    row.btv = finite_mean(col, row.n_btv);
                    rep.effects.push_back(row);
                }
        for (std::size_t t = 0; t < keys.size(); ++t) {
            RejectionRow row;
            row.analysis = analyses[a];
            row.family = keys[t].family;
            row.contrast = keys[t].contrast;
            row.measure = keys[t].measure;
            row.variance = keys[t].variance;
            std::size_t rejected = 0;
            for (std::size_t r = 0; r < options.reps; ++r) {
                const auto v = recs[r][a].tests[t];
                if (v < 0) {
                    ++row.n_infeasible;
                } else {
                    ++row.n_feasible;
                    rejected += static_cast<std::size_t>(v);
                }
            }
            row.rejection_rate = row.n_feasible ? static_cast<double>(rejected) / static_cast<double>(row.n_feasible) : kNaN;
            rep.rejections.push_back(row);
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// tables

namespace {
std::string num(double v) { return std::isfinite(v) ? textio::format_double(v) : "NA"; }
}  // namespace

std::string probability_table_csv(const SimulationReport& r) {
    std::ostringstream out;
    const auto& lab = r.truth.labels;
    out << "setting,analysis,j,k,x,truth,mean,bias,relative_bias_percent,n,out_of_bounds\n";
    for (const auto& p : r.probabilities)
        out << textio::csv_field(r.setting.name) << ',' << p.analysis << ',' << lab[p.j] << ',' << lab[p.k] << ',' << p.x << ','
            << num(p.truth) << ',' << num(p.mean) << ',' << num(p.bias) << ',' << num(100.0 * p.relative_bias) << ',' << p.n
            << ',' << p.out_of_bounds << '\n';
    return out.str();
}

std::string effect_table_csv(const SimulationReport& r) {
    std::ostringstream out;
    const auto& lab = r.truth.labels;
    out << "setting,analysis,measure,j,k,truth,mean,bias,relative_bias_percent,n\n";
    for (const auto& e : r.effects)
        out << textio::csv_field(r.setting.name) << ',' << e.analysis << ',' << to_string(e.measure) << ',' << lab[e.j] << ','
            << lab[e.k] << ',' << num(e.truth) << ',' << num(e.mean) << ',' << num(e.bias) << ','
            << num(100.0 * e.relative_bias) << ',' << e.n << '\n';
    return out.str();
}

std::string variance_table_csv(const SimulationReport& r) {
    std::ostringstream out;
    const auto& lab = r.truth.labels;
    out << "setting,analysis,measure,j,k,mcv,mev,btv,n_mcv,n_mev,n_btv\n";
    for (const auto& e : r.effects)
        out << textio::csv_field(r.setting.name) << ',' << e.analysis << ",log_" << to_string(e.measure) << ',' << lab[e.j]
            << ',' << lab[e.k] << ',' << num(e.mcv) << ',' << num(e.mev) << ',' << num(e.btv) << ',' << e.n << ',' << e.n_mev
            << ',' << e.n_btv << '\n';
    return out.str();
}

std::string rejection_table_csv(const SimulationReport& r) {
    std::ostringstream out;
    out << "setting,analysis,family,contrast,measure,variance,rejection_percent,n_feasible,n_infeasible\n";
    for (const auto& t : r.rejections)
        out << textio::csv_field(r.setting.name) << ',' << t.analysis << ',' << t.family << ',' << textio::csv_field(t.contrast)
            << ',' << to_string(t.measure) << ',' << t.variance << ',' << num(100.0 * t.rejection_rate) << ',' << t.n_feasible
            << ',' << t.n_infeasible << '\n';
    return out.str();
}

}  // namespace casemix
