#include "casemix/cli/cli.hpp"

#include "casemix/cli/json_io.hpp"
#include "casemix/error.hpp"
#include "casemix/glm.hpp"
#include "casemix/het.hpp"
#include "casemix/meta.hpp"
#include "casemix/simlab.hpp"
#include "casemix/textio.hpp"
#include "casemix/transport.hpp"
#include "casemix/variance.hpp"

#include "CLI11.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

namespace casemix::cli {

namespace {

namespace fs = std::filesystem;

/// Raised for problems the user can fix (bad flags, bad config). Maps to exit 1.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json read_config_file(const std::string& path, const std::set<std::string>& allowed) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw UsageError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw UsageError("config file '" + path + "' must hold a JSON object");
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key)) throw UsageError("unknown key '" + key + "' in config file '" + path + "'");
    return j;
}

/// Defaults, then the config file, then every flag given on the command line.
class Resolver {
public:
    explicit Resolver(json defaults) : cfg_(std::move(defaults)) {}

    void merge(const json& file) {
        for (const auto& [key, value] : file.items()) cfg_[key] = value;
    }

    template <class T>
    void flag(const std::string& key, const CLI::Option* opt, const T& value) {
        if (opt->count() > 0) cfg_[key] = value;
    }

    json& cfg() { return cfg_; }

private:
    json cfg_;
};

template <class T>
T get(const json& cfg, const std::string& key) {
    try {
        return cfg.at(key).get<T>();
    } catch (const json::exception& e) {
        throw UsageError("config value '" + key + "' is missing or has the wrong type: " + e.what());
    }
}

std::vector<std::string> split_list(const json& v) {
    std::vector<std::string> out;
    if (v.is_array()) {
        for (const auto& e : v) out.push_back(e.get<std::string>());
        return out;
    }
    std::stringstream ss(v.get<std::string>());
    std::string item;
    while (std::getline(ss, item, ','))
        if (const auto t = textio::trim(item); !t.empty()) out.emplace_back(t);
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot write '" + path.string() + "'");
    out << text;
}

/// CSV with the resolved configuration as a leading comment line.
void write_csv(const fs::path& path, const json& cfg, const std::string& body) {
    write_text(path, "# config: " + cfg.dump() + "\n" + body);
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

fs::path prepare_out_dir(const json& cfg) {
    const auto dir = get<std::string>(cfg, "out");
    if (dir.empty()) throw UsageError("an output directory (--out) is required");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw UsageError("cannot create output directory '" + dir + "': " + ec.message());
    return dir;
}

// ---------------------------------------------------------------- simulate

struct SimulateFlags {
    std::string config, preset, analyses, variant, scale, out;
    std::size_t reps = 0, bootstrap_b = 0, workers = 0, oracle_runs = 0;
    std::uint64_t seed = 0;
    double alpha = 0.0;
    CLI::Option *o_preset, *o_analyses, *o_reps, *o_seed, *o_b, *o_workers, *o_oracle, *o_variant, *o_scale, *o_alpha,
        *o_out;
};

void add_simulate(CLI::App& app, SimulateFlags& f) {
    auto* sub = app.add_subcommand("simulate", "Run a simulation study for a preset or a user-defined setting");
    sub->add_option("--config", f.config, "JSON config file; flags override its values");
    f.o_preset = sub->add_option("--preset", f.preset, "Preset setting: 1, 2, 3, 4 or 5");
    f.o_analyses = sub->add_option("--analyses", f.analyses, "Comma-separated analyses, e.g. OCR1,IPW1,SIPW1");
    f.o_reps = sub->add_option("--reps", f.reps, "Monte-Carlo replications (default 1000)");
    f.o_seed = sub->add_option("--seed", f.seed, "Master seed (required)");
    f.o_b = sub->add_option("--bootstrap-b", f.bootstrap_b, "Bootstrap replicates per dataset, 0 to skip (default 50)");
    f.o_workers = sub->add_option("--workers", f.workers, "Worker threads (default 1)");
    f.o_oracle = sub->add_option("--oracle-runs", f.oracle_runs, "Runs behind the true values (default 5000)");
    f.o_variant = sub->add_option("--setting2-variant", f.variant,
                                  "Setting 2 trial-2 shift: treatment (0.75 X I(S=2), default) or intercept");
    f.o_scale = sub->add_option("--scale", f.scale, "Wald test scale: transformed (default) or raw");
    f.o_alpha = sub->add_option("--alpha", f.alpha, "Test level (default 0.05)");
    f.o_out = sub->add_option("--out", f.out, "Output directory");
}

int cmd_simulate(const SimulateFlags& f, std::ostream& out) {
    static const std::set<std::string> keys{"preset",     "setting",     "analyses",         "reps",  "seed",
                                            "bootstrap_b", "workers",    "oracle_runs",      "scale", "alpha",
                                            "out",         "setting2_variant"};
    Resolver r(json{{"reps", 1000},
                    {"bootstrap_b", 50},
                    {"workers", 1},
                    {"oracle_runs", 5000},
                    {"setting2_variant", "treatment"},
                    {"scale", "transformed"},
                    {"alpha", 0.05},
                    {"out", ""}});
    if (!f.config.empty()) r.merge(read_config_file(f.config, keys));
    if (f.o_preset->count() > 0) {
        r.cfg().erase("setting");
        r.cfg()["preset"] = f.preset;
    }
    r.flag("analyses", f.o_analyses, f.analyses);
    r.flag("reps", f.o_reps, f.reps);
    r.flag("seed", f.o_seed, f.seed);
    r.flag("bootstrap_b", f.o_b, f.bootstrap_b);
    r.flag("workers", f.o_workers, f.workers);
    r.flag("oracle_runs", f.o_oracle, f.oracle_runs);
    r.flag("setting2_variant", f.o_variant, f.variant);
    r.flag("scale", f.o_scale, f.scale);
    r.flag("alpha", f.o_alpha, f.alpha);
    r.flag("out", f.o_out, f.out);
    auto& cfg = r.cfg();

    if (!cfg.contains("seed")) throw UsageError("simulate needs an explicit --seed (or \"seed\" in the config)");
    if (cfg.contains("preset") && cfg.contains("setting"))
        throw UsageError("give either a preset or a setting object, not both");
    if (!cfg.contains("preset") && !cfg.contains("setting")) throw UsageError("simulate needs --preset or a setting");

    SettingConfig setting;
    if (cfg.contains("preset")) {
        auto name = cfg.at("preset").is_string() ? cfg.at("preset").get<std::string>() : cfg.at("preset").dump();
        const auto variant = get<std::string>(cfg, "setting2_variant");
        if (variant != "treatment" && variant != "intercept")
            throw UsageError("--setting2-variant must be 'treatment' or 'intercept'");
        if (name == "2" && variant == "intercept") name = "2-intercept";
        setting = preset_setting(name);
    } else {
        setting = setting_from_json(cfg.at("setting"));
    }

    StudyOptions opts;
    opts.reps = get<std::size_t>(cfg, "reps");
    opts.seed = get<std::uint64_t>(cfg, "seed");
    opts.bootstrap_b = get<std::size_t>(cfg, "bootstrap_b");
    opts.workers = std::max<std::size_t>(1, get<std::size_t>(cfg, "workers"));
    opts.oracle_runs = get<std::size_t>(cfg, "oracle_runs");
    opts.alpha = get<double>(cfg, "alpha");
    opts.scale = parse_wald_scale(get<std::string>(cfg, "scale"));
    if (opts.reps == 0) throw UsageError("--reps must be positive");
    if (opts.oracle_runs == 0) throw UsageError("--oracle-runs must be positive");
    if (!(opts.alpha > 0.0 && opts.alpha < 1.0)) throw UsageError("--alpha must lie in (0, 1)");

    const auto analyses = cfg.contains("analyses") ? split_list(cfg.at("analyses")) : default_analyses(setting);
    if (analyses.empty()) throw UsageError("no analyses requested");
    for (const auto& a : analyses) (void)make_analysis(setting, a);
    cfg["analyses"] = analyses;
    cfg["resolved_setting"] = setting_to_json(setting);

    const auto dir = prepare_out_dir(cfg);
    const auto report = run_study(setting, analyses, opts);

    write_csv(dir / "tables2.csv", cfg, probability_table_csv(report));
    write_csv(dir / "tables3.csv", cfg, effect_table_csv(report));
    write_csv(dir / "table4.csv", cfg, variance_table_csv(report));
    write_csv(dir / "table5.csv", cfg, rejection_table_csv(report));
    auto j = to_json(report);
    j["config"] = cfg;
    const bool breached = report.failure_rate() > 0.10;
    j["failure_threshold_breached"] = breached;
    write_json(dir / "report.json", j);

    out << "setting " << setting.name << ": " << report.options.reps << " replications, "
        << report.failed_replications << " with failures; outputs in " << dir.string() << "\n";
    if (breached) {
        out << "failure rate " << report.failure_rate() << " exceeds 0.10\n";
        return kExitStatisticalFailure;
    }
    return kExitOk;
}

// ------------------------------------------------------------ shared model flags

struct ModelFlags {
    std::string input, method, outcome_formula, ps_formula, ps_mode;
    bool expit_weight = false;
    bool no_truncation = false;
    double truncate_percentile = 0.0, positivity_threshold = 0.0;
    CLI::Option *o_input, *o_method, *o_outcome, *o_ps, *o_ps_mode, *o_expit, *o_trunc, *o_no_trunc, *o_pos;
};

void add_model_flags(CLI::App* sub, ModelFlags& f, const std::string& method_default) {
    f.o_input = sub->add_option("--input", f.input, "IPD CSV with columns study,treat,outcome,<covariates>");
    f.o_method = sub->add_option("--method", f.method, "ocr, ipw or ipw-stabilized (default " + method_default + ")");
    f.o_outcome = sub->add_option("--outcome-formula", f.outcome_formula,
                                  "Outcome model, e.g. 'y ~ 1 + treat + L + treat:L' (default: all covariates and "
                                  "their treatment interactions)");
    f.o_ps = sub->add_option("--ps-formula", f.ps_formula, "Membership model, e.g. '~ 1 + L' (default: all covariates)");
    f.o_ps_mode = sub->add_option("--ps-mode", f.ps_mode, "auto, pairwise or multinomial (default auto)");
    f.o_expit = sub->add_flag("--expit-weight", f.expit_weight, "Use expit(eta) weights instead of density ratios");
    f.o_trunc = sub->add_option("--truncate-percentile", f.truncate_percentile, "Cap weights at this percentile");
    f.o_no_trunc = sub->add_flag("--no-truncation", f.no_truncation, "Do not cap weights");
    f.o_pos = sub->add_option("--positivity-threshold", f.positivity_threshold, "Flag weights above this (default 200)");
}

void resolve_model_flags(Resolver& r, const ModelFlags& f) {
    r.flag("input", f.o_input, f.input);
    r.flag("method", f.o_method, f.method);
    r.flag("outcome_formula", f.o_outcome, f.outcome_formula);
    r.flag("ps_formula", f.o_ps, f.ps_formula);
    r.flag("ps_mode", f.o_ps_mode, f.ps_mode);
    r.flag("expit_weight", f.o_expit, f.expit_weight);
    r.flag("truncate_percentile", f.o_trunc, f.truncate_percentile);
    if (f.o_no_trunc->count() > 0 && f.no_truncation) r.cfg()["truncate_percentile"] = nullptr;
    r.flag("positivity_threshold", f.o_pos, f.positivity_threshold);
}

const std::set<std::string> kModelKeys{"input",   "method",      "outcome_formula",     "ps_formula",
                                       "ps_mode", "expit_weight", "truncate_percentile", "positivity_threshold"};

std::string default_outcome_formula(const CovariateSchema& schema) {
    std::string f = "y ~ 1 + treat";
    for (const auto& c : schema.names()) f += " + " + c;
    for (const auto& c : schema.names()) f += " + treat:" + c;
    return f;
}

std::string default_ps_formula(const CovariateSchema& schema) {
    std::string f = "~ 1";
    for (const auto& c : schema.names()) f += " + " + c;
    return f;
}

/// Loads the dataset and turns the resolved config into an estimator spec.
/// Missing formulas are filled in and written back into `cfg`.
EstimatorSpec build_spec(json& cfg, const IpdDataset& ds) {
    if (!cfg.contains("outcome_formula")) cfg["outcome_formula"] = default_outcome_formula(ds.schema());
    if (!cfg.contains("ps_formula")) cfg["ps_formula"] = default_ps_formula(ds.schema());
    EstimatorSpec spec;
    spec.method = parse_method(get<std::string>(cfg, "method"));
    spec.outcome_formula = ModelFormula::parse(get<std::string>(cfg, "outcome_formula"));
    spec.ps_formula = ModelFormula::parse(get<std::string>(cfg, "ps_formula"));
    spec.ps_mode = parse_ps_mode(get<std::string>(cfg, "ps_mode"));
    spec.weights.link = get<bool>(cfg, "expit_weight") ? WeightLink::Expit : WeightLink::DensityRatio;
    if (!cfg.at("truncate_percentile").is_null()) spec.weights.truncation_percentile = get<double>(cfg, "truncate_percentile");
    spec.weights.positivity_threshold = get<double>(cfg, "positivity_threshold");
    spec.allow_partial = true;
    return spec;
}

std::string load_input_path(const json& cfg) {
    if (!cfg.contains("input") || get<std::string>(cfg, "input").empty())
        throw UsageError("an input file (--input) is required");
    return get<std::string>(cfg, "input");
}

bool uses_weights(Method m) { return m != Method::OCR; }

json weight_report(TransportModel& model) {
    const auto K = model.data().num_studies();
    json rows = json::array();
    for (StudyIndex j = 0; j < K; ++j)
        for (StudyIndex k = 0; k < K; ++k) {
            if (j == k) continue;
            const auto w = model.weights(j, k);
            auto e = to_json(w.diagnostics);
            e["j"] = model.data().study_label(j);
            e["k"] = model.data().study_label(k);
            e["raw_max"] = number(w.raw_weights.size() ? w.raw_weights.maxCoeff() : 0.0);
            e["truncation_cap"] = w.truncation_cap ? number(*w.truncation_cap) : json(nullptr);
            rows.push_back(e);
        }
    return rows;
}

// ----------------------------------------------------------------- analyze

struct AnalyzeFlags {
    std::string config, measure, covariance, tau2, scale, out;
    std::size_t bootstrap_b = 0, workers = 0;
    std::uint64_t seed = 0;
    bool eliminate = false;
    double elimination_alpha = 0.0;
    ModelFlags model;
    CLI::Option *o_measure, *o_cov, *o_b, *o_seed, *o_tau2, *o_elim, *o_elim_alpha, *o_workers, *o_scale, *o_out;
};

void add_analyze(CLI::App& app, AnalyzeFlags& f) {
    auto* sub = app.add_subcommand("analyze", "Standardize, pool and test an individual participant dataset");
    sub->add_option("--config", f.config, "JSON config file; flags override its values");
    add_model_flags(sub, f.model, "ipw");
    f.o_measure = sub->add_option("--measure", f.measure, "rr, or or rd (default or)");
    f.o_cov = sub->add_option("--covariance", f.covariance, "sandwich (default) or bootstrap");
    f.o_b = sub->add_option("--bootstrap-b", f.bootstrap_b, "Bootstrap replicates (default 200)");
    f.o_seed = sub->add_option("--seed", f.seed, "Bootstrap seed (default 1)");
    f.o_tau2 = sub->add_option("--tau2", f.tau2, "Between-source variance estimator: dl (default) or reml");
    f.o_elim = sub->add_flag("--eliminate", f.eliminate, "Backward elimination of interaction terms in both models");
    f.o_elim_alpha = sub->add_option("--elimination-alpha", f.elimination_alpha, "Level for elimination (default 0.05)");
    f.o_workers = sub->add_option("--workers", f.workers, "Worker threads for the bootstrap (default 1)");
    f.o_scale = sub->add_option("--scale", f.scale, "Wald test scale: transformed (default) or raw");
    f.o_out = sub->add_option("--out", f.out, "Output directory");
}

std::vector<Term> interaction_terms(const ModelFormula& f) {
    std::vector<Term> out;
    for (const auto& t : f.terms())
        if (t.kind() == Term::Kind::Interaction) out.push_back(t);
    return out;
}

ModelFormula without_terms(const ModelFormula& f, const std::vector<Term>& drop) {
    auto out = f;
    for (const auto& t : drop) out = out.without_term(t);
    return out;
}

json elimination_json(const EliminationResult& r) {
    json steps = json::array();
    for (const auto& s : r.steps) steps.push_back({{"dropped", s.dropped_term}, {"p_value", number(s.p_value)}});
    return {{"formula", r.formula.to_string()}, {"steps", steps}};
}

std::string effects_csv(const EffectMatrix& m) {
    std::ostringstream out;
    out << "measure,method,covariance,j,k,point,transformed,se_transformed,ci_lo,ci_hi,defined,note\n";
    const bool log_scale = m.measure != Measure::RD;
    for (const auto& c : m.cells) {
        const double lo = c.transformed_point - 1.959963984540054 * c.se_transformed;
        const double hi = c.transformed_point + 1.959963984540054 * c.se_transformed;
        out << to_string(m.measure) << ',' << to_string(m.method) << ',' << to_string(m.covariance_method) << ','
            << textio::csv_field(m.labels[c.j]) << ',' << textio::csv_field(m.labels[c.k]) << ','
            << textio::format_double(c.point) << ',' << textio::format_double(c.transformed_point) << ','
            << textio::format_double(c.se_transformed) << ',' << textio::format_double(log_scale ? std::exp(lo) : lo)
            << ',' << textio::format_double(log_scale ? std::exp(hi) : hi) << ',' << (c.defined ? "true" : "false")
            << ',' << textio::csv_field(c.note) << '\n';
    }
    return out.str();
}

std::string het_csv(const std::vector<WaldTestResult>& tests) {
    std::ostringstream out;
    out << "hypothesis,contrast,scale,statistic,df,p_value,feasible,condition,note\n";
    for (const auto& t : tests)
        out << textio::csv_field(t.hypothesis) << ',' << textio::csv_field(t.contrast) << ',' << to_string(t.scale) << ','
            << textio::format_double(t.statistic) << ',' << t.df << ',' << textio::format_double(t.p_value) << ','
            << (t.feasible ? "true" : "false") << ',' << textio::format_double(t.condition) << ','
            << textio::csv_field(t.note) << '\n';
    return out.str();
}

/// File-name-safe version of a study label.
std::string file_label(const std::string& label) {
    std::string out;
    for (char c : label) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
    return out.empty() ? "_" : out;
}

int cmd_analyze(const AnalyzeFlags& f, std::ostream& out) {
    auto keys = kModelKeys;
    keys.insert({"measure", "covariance", "bootstrap_b", "seed", "tau2", "eliminate", "elimination_alpha", "workers",
                 "scale", "out", "common_control_alpha"});
    Resolver r(json{{"method", "ipw"},
                    {"ps_mode", "auto"},
                    {"expit_weight", false},
                    {"truncate_percentile", 95.0},
                    {"positivity_threshold", kDefaultPositivityThreshold},
                    {"measure", "or"},
                    {"covariance", "sandwich"},
                    {"bootstrap_b", 200},
                    {"seed", 1},
                    {"tau2", "dl"},
                    {"eliminate", false},
                    {"elimination_alpha", 0.05},
                    {"common_control_alpha", 0.05},
                    {"workers", 1},
                    {"scale", "transformed"},
                    {"out", ""}});
    if (!f.config.empty()) r.merge(read_config_file(f.config, keys));
    resolve_model_flags(r, f.model);
    r.flag("measure", f.o_measure, f.measure);
    r.flag("covariance", f.o_cov, f.covariance);
    r.flag("bootstrap_b", f.o_b, f.bootstrap_b);
    r.flag("seed", f.o_seed, f.seed);
    r.flag("tau2", f.o_tau2, f.tau2);
    r.flag("eliminate", f.o_elim, f.eliminate);
    r.flag("elimination_alpha", f.o_elim_alpha, f.elimination_alpha);
    r.flag("workers", f.o_workers, f.workers);
    r.flag("scale", f.o_scale, f.scale);
    r.flag("out", f.o_out, f.out);
    auto& cfg = r.cfg();

    const auto ds = load_ipd_file(load_input_path(cfg));
    ds.require_multi_study("analyze");
    auto spec = build_spec(cfg, ds);
    const auto measure = parse_measure(get<std::string>(cfg, "measure"));
    const auto covariance = get<std::string>(cfg, "covariance");
    if (covariance != "sandwich" && covariance != "bootstrap")
        throw UsageError("--covariance must be 'sandwich' or 'bootstrap'");
    const auto tau2 = parse_tau2_method(get<std::string>(cfg, "tau2"));
    const auto scale = parse_wald_scale(get<std::string>(cfg, "scale"));
    const auto dir = prepare_out_dir(cfg);

    json diag{{"positivity_warning", false}};
    {
        json studies = json::array();
        for (StudyIndex k = 0; k < ds.num_studies(); ++k) {
            const auto c = arm_counts(ds, k);
            studies.push_back({{"label", ds.study_label(k)}, {"n_treated", c.n_treated}, {"n_control", c.n_control}});
        }
        diag["dataset"] = {{"n", ds.size()}, {"covariates", ds.schema().names()}, {"studies", studies}};
    }

    if (get<bool>(cfg, "eliminate")) {
        const double alpha = get<double>(cfg, "elimination_alpha");
        auto outcome_candidates = interaction_terms(spec.outcome_formula);
        auto outcome_base = without_terms(spec.outcome_formula, outcome_candidates);
        if (outcome_candidates.empty())
            for (const auto& c : ds.schema().names())
                outcome_candidates.push_back(Term::interaction(Factor{true, {}, 1}, Factor{false, c, 1}));
        const auto oe =
            backward_eliminate(ds, outcome_base, outcome_candidates, alpha, EliminationTarget::OutcomeModel, spec.fit);
        auto ps_candidates = interaction_terms(spec.ps_formula);
        const auto ps_base = without_terms(spec.ps_formula, ps_candidates);
        if (ps_candidates.empty()) {
            const auto& names = ds.schema().names();
            for (std::size_t a = 0; a < names.size(); ++a)
                for (std::size_t b = a + 1; b < names.size(); ++b)
                    ps_candidates.push_back(Term::interaction(Factor{false, names[a], 1}, Factor{false, names[b], 1}));
        }
        const auto pe =
            backward_eliminate(ds, ps_base, ps_candidates, alpha, EliminationTarget::MembershipModel, spec.fit);
        spec.outcome_formula = oe.formula;
        spec.ps_formula = pe.formula;
        diag["elimination"] = {{"outcome", elimination_json(oe)}, {"membership", elimination_json(pe)}};
        cfg["selected_outcome_formula"] = oe.formula.to_string();
        cfg["selected_ps_formula"] = pe.formula.to_string();
    }

    {
        std::vector<Term> control_terms;
        for (const auto& t : spec.outcome_formula.terms())
            if (!t.involves_treat()) control_terms.push_back(t);
        try {
            diag["common_control"] =
                to_json(common_control_check(ds, ModelFormula(control_terms), get<double>(cfg, "common_control_alpha"), spec.fit));
        } catch (const Error& e) {
            diag["common_control"] = {{"error", e.what()}};
        }
    }

    TransportModel model(ds, spec);
    const auto grid = standardize_all(model);
    auto em = make_effect_matrix(grid, measure, true);
    diag["out_of_bounds_probabilities"] = grid.out_of_bounds_count();
    {
        json errors = json::array();
        for (std::size_t c = 0; c < grid.errors.size(); ++c)
            if (!grid.errors[c].empty()) errors.push_back(grid.errors[c]);
        diag["cell_errors"] = errors;
    }
    if (uses_weights(spec.method)) {
        diag["weights"] = weight_report(model);
        for (const auto& w : diag["weights"])
            if (w.at("positivity_warning").get<bool>()) diag["positivity_warning"] = true;
    }

    int exit_code = kExitOk;
    if (covariance == "sandwich") {
        try {
            const Measure ms[] = {measure};
            const auto s = sandwich(model, grid, ms);
            em.attach_sigma(s.sigma.front(), CovarianceMethod::Sandwich);
            diag["covariance"] = {{"method", "sandwich"}, {"bread_condition", number(s.bread_condition)}};
        } catch (const Error& e) {
            diag["covariance"] = {{"method", "sandwich"}, {"error", e.what()}};
            exit_code = kExitStatisticalFailure;
        }
    } else {
        BootstrapOptions bo;
        bo.replicates = get<std::size_t>(cfg, "bootstrap_b");
        bo.seed = get<std::uint64_t>(cfg, "seed");
        bo.workers = std::max<std::size_t>(1, get<std::size_t>(cfg, "workers"));
        bo.throw_on_failure = false;
        if (bo.replicates < 2) throw UsageError("--bootstrap-b must be at least 2");
        const Measure ms[] = {measure};
        const auto b = bootstrap(ds, spec, ms, bo);
        em.attach_sigma(b.sigma.front(), CovarianceMethod::Bootstrap);
        json excluded = json::array();
        for (std::size_t c = 0; c < em.cells.size(); ++c)
            excluded.push_back({{"j", em.labels[em.cells[c].j]},
                                {"k", em.labels[em.cells[c].k]},
                                {"excluded", b.excluded.front()[c]},
                                {"share", b.excluded_share(0, c)}});
        diag["covariance"] = {{"method", "bootstrap"},
                              {"replicates", b.replicates},
                              {"failed_replicates", b.failed_replicates},
                              {"excluded_replicates", excluded},
                              {"too_many_failed", b.too_many_failed}};
        if (b.too_many_failed) exit_code = kExitStatisticalFailure;
    }
    {
        std::vector<std::string> cell_labels;
        for (const auto& c : em.cells) cell_labels.push_back(em.labels[c.j] + "," + em.labels[c.k]);
        diag["covariance"]["sigma"] = matrix_to_json(em.sigma, cell_labels);
    }

    write_csv(dir / "effects.csv", cfg, effects_csv(em));

    json meta = json::array();
    for (StudyIndex j = 0; j < em.K; ++j) {
        const auto path = dir / ("forest_" + file_label(em.labels[j]) + ".csv");
        try {
            const auto s = pool_target(em, j, tau2);
            meta.push_back(to_json(s, em.labels, j, measure));
            write_csv(path, cfg, forest_csv(forest_rows(s, measure)));
        } catch (const Error& e) {
            meta.push_back({{"target", em.labels[j]}, {"error", e.what()}});
            write_csv(path, cfg, forest_csv({}));
        }
    }
    diag["meta"] = meta;

    const auto tests = all_tests(em, scale);
    write_csv(dir / "het_tests.csv", cfg, het_csv(tests));
    json tj = json::array();
    for (const auto& t : tests) tj.push_back(to_json(t));
    diag["tests"] = tj;
    diag["effects"] = to_json(em);
    diag["config"] = cfg;
    diag["exit_code"] = exit_code;
    write_json(dir / "diagnostics.json", diag);

    out << "analyzed " << ds.size() << " subjects in " << ds.num_studies() << " trials; outputs in " << dir.string()
        << "\n";
    if (diag["positivity_warning"].get<bool>())
        out << "WARNING: weights above the positivity threshold, see diagnostics.json\n";
    if (exit_code != kExitOk) out << "covariance estimation failed, see diagnostics.json\n";
    return exit_code;
}

// --------------------------------------------------------------- transport

struct TransportFlags {
    std::string config, target, source;
    int arm = 1;
    ModelFlags model;
    CLI::Option *o_target, *o_source, *o_arm;
};

void add_transport(CLI::App& app, TransportFlags& f) {
    auto* sub = app.add_subcommand("transport", "Standardize one trial's arm to one population and print the result");
    sub->add_option("--config", f.config, "JSON config file; flags override its values");
    add_model_flags(sub, f.model, "ipw");
    f.o_target = sub->add_option("--target", f.target, "Target population label (j)");
    f.o_source = sub->add_option("--source", f.source, "Source trial label (k)");
    f.o_arm = sub->add_option("--arm", f.arm, "Arm x, 0 or 1 (default 1)");
}

int cmd_transport(const TransportFlags& f, std::ostream& out) {
    auto keys = kModelKeys;
    keys.insert({"target", "source", "arm"});
    Resolver r(json{{"method", "ipw"},
                    {"ps_mode", "auto"},
                    {"expit_weight", false},
                    {"truncate_percentile", nullptr},
                    {"positivity_threshold", kDefaultPositivityThreshold},
                    {"arm", 1}});
    if (!f.config.empty()) r.merge(read_config_file(f.config, keys));
    resolve_model_flags(r, f.model);
    r.flag("target", f.o_target, f.target);
    r.flag("source", f.o_source, f.source);
    r.flag("arm", f.o_arm, f.arm);
    auto& cfg = r.cfg();
    if (!cfg.contains("target") || !cfg.contains("source")) throw UsageError("transport needs --target and --source");
    const int arm = get<int>(cfg, "arm");
    if (arm != 0 && arm != 1) throw UsageError("--arm must be 0 or 1");

    const auto ds = load_ipd_file(load_input_path(cfg));
    const auto j = ds.study_index(get<std::string>(cfg, "target"));
    const auto k = ds.study_index(get<std::string>(cfg, "source"));
    const auto spec = build_spec(cfg, ds);

    TransportModel model(ds, spec);
    const auto x = arm == 1 ? Arm::Treated : Arm::Control;
    const auto est = model.standardize(k, j, x);
    const auto other = model.standardize(k, j, arm == 1 ? Arm::Control : Arm::Treated);
    const auto& p1 = arm == 1 ? est : other;
    const auto& p0 = arm == 1 ? other : est;

    json report{{"config", cfg},
                {"target", ds.study_label(j)},
                {"source", ds.study_label(k)},
                {"arm", arm},
                {"method", to_string(spec.method)},
                {"estimate", number(est.prob)},
                {"out_of_bounds", est.out_of_bounds}};
    if (est.weights_summary) report["weights"] = to_json(*est.weights_summary);

    // Standard errors come from the stacked system over every cell.
    std::optional<EstimatingSystem> system;
    Eigen::MatrixXd cov;
    try {
        const auto grid = standardize_all(model);
        system.emplace(model, grid, std::vector<Measure>{Measure::RR, Measure::OR, Measure::RD});
        cov = system->covariance();
        const auto pos = system->prob_position(ProbabilityGrid::index(ds.num_studies(), j, k, x));
        report["se"] = pos ? number(std::sqrt(cov(static_cast<Eigen::Index>(*pos), static_cast<Eigen::Index>(*pos))))
                           : json(nullptr);
    } catch (const Error& e) {
        system.reset();
        report["se"] = nullptr;
        report["se_error"] = e.what();
    }
    json effects = json::object();
    for (const auto m : {Measure::RR, Measure::OR, Measure::RD}) {
        const auto e = effect_from_probs(p1.prob, p0.prob, m, j, k);
        json ej{{"point", number(e.point)}, {"transformed", number(e.transformed_point)}, {"defined", e.defined}};
        if (!e.note.empty()) ej["note"] = e.note;
        ej["se_transformed"] = nullptr;
        if (system)
            if (const auto pos = system->effect_position(m, j, k))
                ej["se_transformed"] = number(std::sqrt(cov(static_cast<Eigen::Index>(*pos), static_cast<Eigen::Index>(*pos))));
        effects[to_string(m)] = ej;
    }
    report["effects"] = effects;
    out << report.dump(2) << "\n";
    return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Standardize, pool and test treatment effects across trial populations", "casemix"};
    app.require_subcommand(1);
    SimulateFlags sim;
    AnalyzeFlags ana;
    TransportFlags tra;
    add_simulate(app, sim);
    add_analyze(app, ana);
    add_transport(app, tra);
    app.footer(
        "Covariates must be numeric; encode categorical covariates as 0/1 columns before loading.\n"
        "Exit codes: 0 success, 1 usage, config or data error, 2 statistical failure threshold breached.");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUserError;
    }

    try {
        if (app.got_subcommand("simulate")) return cmd_simulate(sim, out);
        if (app.got_subcommand("analyze")) return cmd_analyze(ana, out);
        return cmd_transport(tra, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
    } catch (const json::exception& e) {
        err << "error: malformed configuration: " << e.what() << "\n";
    }
    return kExitUserError;
}

}  // namespace casemix::cli
