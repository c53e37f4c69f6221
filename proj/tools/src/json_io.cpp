#include "casemix/cli/json_io.hpp"

#include "casemix/error.hpp"

#include <cmath>
#include <set>

namespace casemix::cli {

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, std::string_view where) {
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key))
            throw Error(ErrorCode::InvalidConfig, "unknown key '" + key + "' in " + std::string(where));
}

CovariateLaw law_from_json(const json& j) {
    if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, "a covariate law must be an object");
    reject_unknown(j, {"normal", "bernoulli"}, "covariate law");
    if (j.contains("normal")) {
        const auto& v = j.at("normal");
        if (!v.is_array() || v.size() != 2) throw Error(ErrorCode::InvalidConfig, "normal law takes [mean, sd]");
        return CovariateLaw::normal(v[0].get<double>(), v[1].get<double>());
    }
    if (j.contains("bernoulli")) return CovariateLaw::bernoulli(j.at("bernoulli").get<double>());
    throw Error(ErrorCode::InvalidConfig, "a covariate law needs 'normal' or 'bernoulli'");
}

json law_to_json(const CovariateLaw& law) {
    if (law.kind == CovariateLaw::Kind::Bernoulli) return {{"bernoulli", law.p}};
    return {{"normal", {law.mean, law.sd}}};
}

LinearPredictor lp_from_json(const json& j, const std::vector<std::string>& labels) {
    if (!j.is_array()) throw Error(ErrorCode::InvalidConfig, "a linear predictor is a list of terms");
    LinearPredictor lp;
    for (const auto& t : j) {
        reject_unknown(t, {"coef", "term", "study"}, "linear predictor term");
        LpTerm term;
        term.coef = t.at("coef").get<double>();
        term.term = parse_term(t.value("term", std::string("1")));
        if (t.contains("study")) {
            const auto label = t.at("study").is_string() ? t.at("study").get<std::string>() : t.at("study").dump();
            const auto it = std::find(labels.begin(), labels.end(), label);
            if (it == labels.end()) throw Error(ErrorCode::InvalidConfig, "unknown trial '" + label + "' in a term");
            term.study = static_cast<StudyIndex>(it - labels.begin());
        }
        lp.terms.push_back(std::move(term));
    }
    return lp;
}

json lp_to_json(const LinearPredictor& lp, const std::vector<std::string>& labels) {
    json out = json::array();
    for (const auto& t : lp.terms) {
        json e{{"coef", t.coef}, {"term", t.term.factors.empty() ? std::string("1") : t.term.to_string()}};
        if (t.study) e["study"] = labels[*t.study];
        out.push_back(e);
    }
    return out;
}

}  // namespace

json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

Term parse_term(std::string_view text) {
    std::string s(text);
    if (s == "1") return Term::intercept();
    const auto f = ModelFormula::parse("~ 0 + " + s);
    if (f.size() != 1) throw Error(ErrorCode::InvalidFormula, "expected a single term, got '" + s + "'");
    return f.terms().front();
}

SettingConfig setting_from_json(const json& j) {
    if (j.is_string()) return preset_setting(j.get<std::string>());
    if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, "setting must be a preset name or an object");
    reject_unknown(j, {"name", "K", "n_total", "covariates", "membership", "pool_laws", "membership_lp", "trial_laws",
                       "outcome", "allocation", "preset", "normal_parameters"},
                   "setting");
    SettingConfig cfg;
    cfg.name = j.value("name", std::string("generic"));
    cfg.preset = 0;
    cfg.K = j.value("K", std::size_t{2});
    cfg.n_total = j.value("n_total", std::size_t{3000});
    cfg.schema = CovariateSchema(j.value("covariates", std::vector<std::string>{"L"}));
    const auto labels = cfg.labels();
    const auto membership = j.value("membership", std::string("pool"));
    if (membership == "pool") {
        cfg.membership = MembershipKind::Pool;
        for (const auto& l : j.at("pool_laws")) cfg.pool_laws.push_back(law_from_json(l));
        for (const auto& m : j.at("membership_lp")) cfg.membership_lp.push_back(lp_from_json(m, labels));
    } else if (membership == "per_trial") {
        cfg.membership = MembershipKind::PerTrial;
        for (const auto& trial : j.at("trial_laws")) {
            std::vector<CovariateLaw> laws;
            for (const auto& l : trial) laws.push_back(law_from_json(l));
            cfg.trial_laws.push_back(std::move(laws));
        }
    } else {
        throw Error(ErrorCode::InvalidConfig, "membership must be 'pool' or 'per_trial'");
    }
    cfg.outcome = lp_from_json(j.at("outcome"), labels);
    if (j.contains("allocation")) cfg.allocation = j.at("allocation").get<std::vector<double>>();
    cfg.validate();
    return cfg;
}

json setting_to_json(const SettingConfig& cfg) {
    const auto labels = cfg.labels();
    json j{{"name", cfg.name},
           {"preset", cfg.preset},
           {"K", cfg.K},
           {"n_total", cfg.n_total},
           {"covariates", cfg.schema.names()},
           {"membership", cfg.membership == MembershipKind::Pool ? "pool" : "per_trial"},
           {"outcome", lp_to_json(cfg.outcome, labels)},
           {"normal_parameters", "mean, sd"}};
    if (cfg.membership == MembershipKind::Pool) {
        j["pool_laws"] = json::array();
        for (const auto& l : cfg.pool_laws) j["pool_laws"].push_back(law_to_json(l));
        j["membership_lp"] = json::array();
        for (const auto& m : cfg.membership_lp) j["membership_lp"].push_back(lp_to_json(m, labels));
    } else {
        j["trial_laws"] = json::array();
        for (const auto& laws : cfg.trial_laws) {
            json t = json::array();
            for (const auto& l : laws) t.push_back(law_to_json(l));
            j["trial_laws"].push_back(t);
        }
    }
    std::vector<double> alloc;
    for (std::size_t k = 0; k < cfg.K; ++k) alloc.push_back(cfg.allocation_of(k));
    j["allocation"] = alloc;
    return j;
}

json to_json(const OracleTruth& t) {
    json cells = json::array();
    for (StudyIndex j = 0; j < t.K; ++j)
        for (StudyIndex k = 0; k < t.K; ++k)
            cells.push_back({{"j", t.labels[j]},
                             {"k", t.labels[k]},
                             {"p1", t.p(j, k, 1)},
                             {"p0", t.p(j, k, 0)},
                             {"rr", number(t.effect(Measure::RR, j, k))},
                             {"or", number(t.effect(Measure::OR, j, k))},
                             {"rd", number(t.effect(Measure::RD, j, k))}});
    return {{"runs", t.runs}, {"cells", cells}};
}

json to_json(const SimulationReport& r) {
    const auto& lab = r.truth.labels;
    json probs = json::array();
    for (const auto& p : r.probabilities)
        probs.push_back({{"analysis", p.analysis},
                         {"j", lab[p.j]},
                         {"k", lab[p.k]},
                         {"x", p.x},
                         {"truth", number(p.truth)},
                         {"mean", number(p.mean)},
                         {"bias", number(p.bias)},
                         {"relative_bias", number(p.relative_bias)},
                         {"n", p.n},
                         {"out_of_bounds", p.out_of_bounds}});
    json effects = json::array();
    for (const auto& e : r.effects)
        effects.push_back({{"analysis", e.analysis},
                           {"measure", to_string(e.measure)},
                           {"j", lab[e.j]},
                           {"k", lab[e.k]},
                           {"truth", number(e.truth)},
                           {"mean", number(e.mean)},
                           {"bias", number(e.bias)},
                           {"relative_bias", number(e.relative_bias)},
                           {"n", e.n},
                           {"mcv", number(e.mcv)},
                           {"mev", number(e.mev)},
                           {"btv", number(e.btv)},
                           {"n_mev", e.n_mev},
                           {"n_btv", e.n_btv}});
    json tests = json::array();
    for (const auto& t : r.rejections)
        tests.push_back({{"analysis", t.analysis},
                         {"family", t.family},
                         {"contrast", t.contrast},
                         {"measure", to_string(t.measure)},
                         {"variance", t.variance},
                         {"rejection_rate", number(t.rejection_rate)},
                         {"n_feasible", t.n_feasible},
                         {"n_infeasible", t.n_infeasible}});
    json failures = json::object();
    for (std::size_t a = 0; a < r.analyses.size(); ++a)
        failures[r.analyses[a]] = {{"estimation", r.failures[a]}, {"sandwich", r.sandwich_failures[a]}};
    return {{"setting", setting_to_json(r.setting)},
            {"analyses", r.analyses},
            {"reps", r.options.reps},
            {"seed", r.options.seed},
            {"bootstrap_b", r.options.bootstrap_b},
            {"oracle_runs", r.options.oracle_runs},
            {"alpha", r.options.alpha},
            {"scale", to_string(r.options.scale)},
            {"truth", to_json(r.truth)},
            {"probabilities", probs},
            {"effects", effects},
            {"rejections", tests},
            {"failures", failures},
            {"failed_replications", r.failed_replications},
            {"failure_rate", r.failure_rate()}};
}

json to_json(const WeightsSummary& w) {
    return {{"max", number(w.max)},
            {"p95", number(w.p95)},
            {"ess", number(w.ess)},
            {"n_over_threshold", w.n_over_threshold},
            {"positivity_warning", w.positivity_warning}};
}

json to_json(const EffectMatrix& m) {
    json cells = json::array();
    for (const auto& c : m.cells) {
        json e{{"j", m.labels[c.j]},
               {"k", m.labels[c.k]},
               {"point", number(c.point)},
               {"transformed", number(c.transformed_point)},
               {"se_transformed", number(c.se_transformed)},
               {"defined", c.defined}};
        if (!c.note.empty()) e["note"] = c.note;
        cells.push_back(e);
    }
    return {{"measure", to_string(m.measure)},
            {"method", to_string(m.method)},
            {"covariance", to_string(m.covariance_method)},
            {"cells", cells}};
}

json to_json(const MetaSummary& s, const std::vector<std::string>& labels, StudyIndex j, Measure measure) {
    json per = json::array();
    for (const auto& c : s.per_source)
        per.push_back({{"k", c.label}, {"estimate", number(c.estimate)}, {"se", number(c.se)}, {"weight", number(c.weight)}});
    json rows = json::array();
    for (const auto& r : forest_rows(s, measure))
        rows.push_back({{"label", r.label},
                        {"point", number(r.point)},
                        {"lo", number(r.lo)},
                        {"hi", number(r.hi)},
                        {"weight_percent", number(r.weight_percent)},
                        {"pooled", r.pooled}});
    return {{"target", labels[j]},
            {"measure", to_string(measure)},
            {"pooled", number(s.pooled)},
            {"se_pooled", number(s.se_pooled)},
            {"ci95", {number(s.ci_lo), number(s.ci_hi)}},
            {"tau2", number(s.tau2)},
            {"tau2_method", to_string(s.tau2_method)},
            {"q", number(s.q)},
            {"i2", number(s.i2)},
            {"per_source", per},
            {"skipped", s.skipped},
            {"forest", rows}};
}

json to_json(const WaldTestResult& t) {
    json j{{"hypothesis", t.hypothesis},
           {"contrast", t.contrast},
           {"scale", to_string(t.scale)},
           {"statistic", number(t.statistic)},
           {"df", t.df},
           {"p_value", number(t.p_value)},
           {"feasible", t.feasible},
           {"condition", number(t.condition)}};
    if (!t.note.empty()) j["note"] = t.note;
    return j;
}

json to_json(const CommonControlReport& c) {
    return {{"statistic", number(c.statistic)},
            {"df", c.df},
            {"p_value", number(c.p_value)},
            {"reject", c.reject},
            {"alpha", c.alpha},
            {"deviance_null", number(c.deviance_null)},
            {"deviance_alt", number(c.deviance_alt)}};
}

json matrix_to_json(const Eigen::MatrixXd& m, const std::vector<std::string>& labels) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(number(m(r, c)));
        rows.push_back(row);
    }
    return {{"labels", labels}, {"values", rows}};
}

}  // namespace casemix::cli
