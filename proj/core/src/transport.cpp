#include "casemix/transport.hpp"

#include "casemix/error.hpp"
#include "casemix/stats.hpp"

#include <algorithm>
#include <cmath>

namespace casemix {

std::string to_string(Method m) {
    switch (m) {
        case Method::OCR: return "ocr";
        case Method::IPW: return "ipw";
        case Method::IPW_STABILIZED: return "ipw-stabilized";
    }
    return "?";
}

std::string to_string(Measure m) {
    switch (m) {
        case Measure::RR: return "rr";
        case Measure::OR: return "or";
        case Measure::RD: return "rd";
    }
    return "?";
}

std::string to_string(PsMode m) {
    switch (m) {
        case PsMode::Auto: return "auto";
        case PsMode::Pairwise: return "pairwise";
        case PsMode::Multinomial: return "multinomial";
    }
    return "?";
}

std::string to_string(CovarianceMethod m) {
    switch (m) {
        case CovarianceMethod::None: return "none";
        case CovarianceMethod::Sandwich: return "sandwich";
        case CovarianceMethod::Bootstrap: return "bootstrap";
    }
    return "?";
}

namespace {
std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    std::replace(out.begin(), out.end(), '_', '-');
    return out;
}
}  // namespace

Method parse_method(std::string_view s) {
    const auto v = lower(s);
    if (v == "ocr") return Method::OCR;
    if (v == "ipw") return Method::IPW;
    if (v == "ipw-stabilized" || v == "sipw") return Method::IPW_STABILIZED;
    throw Error(ErrorCode::InvalidConfig, "unknown method '" + std::string(s) + "' (ocr|ipw|ipw-stabilized)");
}

Measure parse_measure(std::string_view s) {
    const auto v = lower(s);
    if (v == "rr") return Measure::RR;
    if (v == "or") return Measure::OR;
    if (v == "rd") return Measure::RD;
    throw Error(ErrorCode::InvalidConfig, "unknown measure '" + std::string(s) + "' (rr|or|rd)");
}

PsMode parse_ps_mode(std::string_view s) {
    const auto v = lower(s);
    if (v == "auto") return PsMode::Auto;
    if (v == "pairwise") return PsMode::Pairwise;
    if (v == "multinomial") return PsMode::Multinomial;
    throw Error(ErrorCode::InvalidConfig, "unknown ps mode '" + std::string(s) + "' (pairwise|multinomial|auto)");
}

// ---------------------------------------------------------------------------

Eigen::VectorXd EffectMatrix::transformed() const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(cells.size()));
    for (std::size_t c = 0; c < cells.size(); ++c)
        v(static_cast<Eigen::Index>(c)) =
            cells[c].defined ? cells[c].transformed_point : std::numeric_limits<double>::quiet_NaN();
    return v;
}

Eigen::VectorXd EffectMatrix::points() const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(cells.size()));
    for (std::size_t c = 0; c < cells.size(); ++c) v(static_cast<Eigen::Index>(c)) = cells[c].point;
    return v;
}

bool EffectMatrix::all_defined() const {
    return std::all_of(cells.begin(), cells.end(), [](const EffectEstimate& e) { return e.defined; });
}

void EffectMatrix::attach_sigma(Eigen::MatrixXd s, CovarianceMethod how) {
    sigma = std::move(s);
    covariance_method = how;
    for (std::size_t c = 0; c < cells.size(); ++c) {
        const double v = sigma(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c));
        cells[c].se_transformed = (cells[c].defined && v >= 0.0) ? std::sqrt(v) : std::numeric_limits<double>::quiet_NaN();
    }
}

const ModelFormula& EstimatorSpec::outcome_formula_for(StudyIndex j, StudyIndex k) const {
    if (auto it = outcome_overrides.find({j, k}); it != outcome_overrides.end()) return it->second;
    return outcome_formula;
}

PsMode EstimatorSpec::resolved_ps_mode(std::size_t K) const {
    if (ps_mode != PsMode::Auto) return ps_mode;
    return K == 2 ? PsMode::Pairwise : PsMode::Multinomial;
}

WeightsSummary summarize_weights(const Eigen::VectorXd& w, double positivity_threshold) {
    WeightsSummary s;
    if (w.size() == 0) return s;
    s.max = w.maxCoeff();
    s.p95 = stats::percentile(std::span<const double>(w.data(), static_cast<std::size_t>(w.size())), 95.0);
    const double sum = w.sum();
    const double sq = w.squaredNorm();
    s.ess = sq > 0.0 ? sum * sum / sq : 0.0;
    s.n_over_threshold = static_cast<std::size_t>((w.array() > positivity_threshold).count());
    s.positivity_warning = s.n_over_threshold > 0;
    return s;
}

// ---------------------------------------------------------------------------
// TransportModel

TransportModel::TransportModel(const IpdDataset& ds, EstimatorSpec spec)
    : ds_(&ds), spec_(std::move(spec)), ps_mode_(spec_.resolved_ps_mode(ds.num_studies())) {
    const auto K = ds.num_studies();
    cell_outcome_.assign(K * K, std::nullopt);
    if (spec_.method != Method::OCR) {
        if (spec_.ps_formula.involves_treat())
            throw Error(ErrorCode::InvalidFormula, "membership model cannot include treat");
        ps_compiled_.emplace(spec_.ps_formula, ds.schema());
    }
    if (spec_.weights.truncation_percentile) {
        const double q = *spec_.weights.truncation_percentile;
        if (!(q > 0.0 && q <= 100.0)) throw Error(ErrorCode::InvalidConfig, "truncation percentile must be in (0, 100]");
    }
}

std::size_t TransportModel::outcome_fit_index(StudyIndex j, StudyIndex k) {
    const auto K = ds_->num_studies();
    if (j >= K || k >= K) throw Error(ErrorCode::UnknownStudy, "study index out of range");
    auto& slot = cell_outcome_[j * K + k];
    if (slot) return *slot;
    const auto& formula = spec_.outcome_formula_for(j, k);
    for (std::size_t m = 0; m < outcome_.size(); ++m) {
        if (outcome_[m].k == k && outcome_[m].compiled.formula() == formula) {
            slot = m;
            return m;
        }
    }
    CompiledFormula compiled(formula, ds_->schema());
    const auto rows = ds_->rows_of(k);
    const Eigen::MatrixXd X = compiled.design(*ds_, rows);
    Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) y(static_cast<Eigen::Index>(r)) = ds_->outcome(rows[r]);
    auto fit = fit_logistic(X, y, std::nullopt, spec_.fit, compiled.column_names());
    outcome_.push_back(OutcomeFit{k, std::move(compiled), std::move(fit)});
    slot = outcome_.size() - 1;
    return *slot;
}

const TransportModel::OutcomeFit& TransportModel::outcome_fit(StudyIndex j, StudyIndex k) {
    return outcome_[outcome_fit_index(j, k)];
}

const CompiledFormula& TransportModel::ps_compiled() const {
    if (!ps_compiled_) throw Error(ErrorCode::Precondition, "estimator has no membership model");
    return *ps_compiled_;
}

const TransportModel::PairwiseFit& TransportModel::pairwise_fit(StudyIndex a, StudyIndex b) {
    if (a > b) std::swap(a, b);
    if (a == b) throw Error(ErrorCode::Precondition, "pairwise membership model needs two distinct studies");
    for (const auto& pf : pairwise_)
        if (pf.a == a && pf.b == b) return pf;
    const auto& compiled = ps_compiled();
    std::vector<std::size_t> rows;
    const auto ra = ds_->rows_of(a);
    const auto rb = ds_->rows_of(b);
    rows.reserve(ra.size() + rb.size());
    std::merge(ra.begin(), ra.end(), rb.begin(), rb.end(), std::back_inserter(rows));
    const Eigen::MatrixXd X = compiled.design(*ds_, rows);
    Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) y(static_cast<Eigen::Index>(r)) = ds_->study(rows[r]) == b ? 1.0 : 0.0;
    auto fit = fit_logistic(X, y, std::nullopt, spec_.fit, compiled.column_names());
    pairwise_.push_back(PairwiseFit{a, b, std::move(rows), std::move(fit)});
    return pairwise_.back();
}

const FittedMultinomial& TransportModel::multinomial_fit() {
    if (multinomial_) return *multinomial_;
    const auto& compiled = ps_compiled();
    std::vector<std::size_t> rows(ds_->size());
    std::vector<std::size_t> cat(ds_->size());
    for (std::size_t i = 0; i < ds_->size(); ++i) {
        rows[i] = i;
        cat[i] = ds_->study(i);
    }
    const Eigen::MatrixXd X = compiled.design(*ds_, rows);
    multinomial_ = fit_multinomial(X, cat, ds_->num_studies(), 0, spec_.fit, compiled.column_names());
    return *multinomial_;
}

double TransportModel::membership_eta(std::size_t i, StudyIndex j, StudyIndex k) {
    if (j == k) return 0.0;
    const Eigen::RowVectorXd v = ps_compiled().row(*ds_, i);
    if (ps_mode_ == PsMode::Multinomial) {
        const auto& fit = multinomial_fit();
        return fit.linear_predictor(j, v) - fit.linear_predictor(k, v);
    }
    const auto& pf = pairwise_fit(j, k);
    const double lp = pf.fit.linear_predictor(v);
    return j == pf.b ? lp : -lp;
}

DensityRatioWeights TransportModel::weights(StudyIndex j, StudyIndex k) {
    if (auto it = weight_cache_.find({j, k}); it != weight_cache_.end()) return it->second;
    const auto K = ds_->num_studies();
    if (j >= K || k >= K) throw Error(ErrorCode::UnknownStudy, "study index out of range");
    DensityRatioWeights out;
    out.target_j = j;
    out.source_k = k;
    const auto rows = ds_->rows_of(k);
    out.rows.assign(rows.begin(), rows.end());
    const auto n = static_cast<Eigen::Index>(rows.size());
    out.raw_weights = Eigen::VectorXd::Ones(n);
    if (j != k) {
        const Eigen::MatrixXd V = ps_compiled().design(*ds_, rows);
        Eigen::VectorXd eta;
        if (ps_mode_ == PsMode::Multinomial) {
            const auto& fit = multinomial_fit();
            eta = Eigen::VectorXd::Zero(n);
            if (auto r = fit.coef_row(j)) eta += V * fit.coef.row(*r).transpose();
            if (auto r = fit.coef_row(k)) eta -= V * fit.coef.row(*r).transpose();
        } else {
            const auto& pf = pairwise_fit(j, k);
            eta = V * pf.fit.coef;
            if (j != pf.b) eta = -eta;
        }
        for (Eigen::Index r = 0; r < n; ++r)
            out.raw_weights(r) = spec_.weights.link == WeightLink::DensityRatio ? std::exp(eta(r)) : expit(eta(r));
    }
    out.weights = out.raw_weights;
    if (spec_.weights.truncation_percentile && j != k) {
        const double cap = stats::percentile(
            std::span<const double>(out.raw_weights.data(), static_cast<std::size_t>(n)), *spec_.weights.truncation_percentile);
        out.truncation_cap = cap;
        out.weights = out.raw_weights.cwiseMin(cap);
    }
    out.diagnostics = summarize_weights(out.weights, spec_.weights.positivity_threshold);
    weight_cache_.emplace(std::make_pair(j, k), out);
    return out;
}

StandardizedEstimate TransportModel::ocr(StudyIndex k, StudyIndex j, Arm x) {
    const auto& of = outcome_fit(j, k);
    const auto target = ds_->rows_of(j);
    if (target.empty()) throw Error(ErrorCode::EmptyTarget, "target study has no subjects");
    const Eigen::MatrixXd Z = of.compiled.design(*ds_, target, arm_value(x));
    const Eigen::VectorXd eta = Z * of.fit.coef;
    Eigen::VectorXd p(eta.size());
    for (Eigen::Index r = 0; r < eta.size(); ++r) p(r) = expit(eta(r));

    StandardizedEstimate est;
    est.source_k = k;
    est.target_j = j;
    est.arm = x;
    est.method = Method::OCR;
    est.prob = p.mean();
    est.influence = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ds_->size()));
    for (std::size_t r = 0; r < target.size(); ++r)
        est.influence(static_cast<Eigen::Index>(target[r])) = p(static_cast<Eigen::Index>(r)) - est.prob;
    return est;
}

StandardizedEstimate TransportModel::ipw(StudyIndex k, StudyIndex j, Arm x, bool stabilized) {
    const auto dw = weights(j, k);
    const int xv = arm_value(x);
    const auto n_j = ds_->rows_of(j).size();
    if (n_j == 0) throw Error(ErrorCode::EmptyTarget, "target study has no subjects");
    std::size_t n_kx = 0;
    double num = 0.0, den = 0.0;
    for (std::size_t r = 0; r < dw.rows.size(); ++r) {
        const auto i = dw.rows[r];
        if (ds_->treat(i) != xv) continue;
        ++n_kx;
        const double w = dw.weights(static_cast<Eigen::Index>(r));
        num += w * ds_->outcome(i);
        den += w;
    }
    if (n_kx == 0) throw Error(ErrorCode::EmptyArm, "source trial has no subjects in the requested arm");

    StandardizedEstimate est;
    est.source_k = k;
    est.target_j = j;
    est.arm = x;
    est.method = stabilized ? Method::IPW_STABILIZED : Method::IPW;
    est.weights_summary = dw.diagnostics;
    est.influence = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ds_->size()));
    if (stabilized) {
        if (!(den > 0.0)) throw Error(ErrorCode::DivisionByZero, "no weight mass in the requested arm");
        est.prob = num / den;
        for (std::size_t r = 0; r < dw.rows.size(); ++r) {
            const auto i = dw.rows[r];
            if (ds_->treat(i) != xv) continue;
            est.influence(static_cast<Eigen::Index>(i)) = dw.weights(static_cast<Eigen::Index>(r)) * (ds_->outcome(i) - est.prob);
        }
    } else {
        const double arm_share = static_cast<double>(n_kx) / static_cast<double>(dw.rows.size());
        est.prob = num / (arm_share * static_cast<double>(n_j));
        est.out_of_bounds = est.prob > 1.0 || est.prob < 0.0;
        for (auto i : ds_->rows_of(j)) est.influence(static_cast<Eigen::Index>(i)) -= est.prob;
        for (std::size_t r = 0; r < dw.rows.size(); ++r) {
            const auto i = dw.rows[r];
            if (ds_->treat(i) != xv) continue;
            est.influence(static_cast<Eigen::Index>(i)) +=
                dw.weights(static_cast<Eigen::Index>(r)) * ds_->outcome(i) / arm_share;
        }
    }
    return est;
}

StandardizedEstimate TransportModel::standardize(StudyIndex k, StudyIndex j, Arm x) {
    switch (spec_.method) {
        case Method::OCR: return ocr(k, j, x);
        case Method::IPW: return ipw(k, j, x, false);
        case Method::IPW_STABILIZED: return ipw(k, j, x, true);
    }
    throw Error(ErrorCode::InvalidConfig, "unknown method");
}

std::size_t ProbabilityGrid::out_of_bounds_count() const {
    return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](const auto& c) { return c && c->out_of_bounds; }));
}

// ---------------------------------------------------------------------------
// free functions

StandardizedEstimate ocr_standardized_prob(const IpdDataset& ds, StudyIndex k, StudyIndex j, Arm x,
                                           const ModelFormula& outcome_formula, const FitOptions& fit) {
    EstimatorSpec spec;
    spec.method = Method::OCR;
    spec.outcome_formula = outcome_formula;
    spec.fit = fit;
    TransportModel model(ds, std::move(spec));
    return model.ocr(k, j, x);
}

DensityRatioWeights density_ratio_weights(const IpdDataset& ds, StudyIndex j, StudyIndex k,
                                          const ModelFormula& ps_formula, PsMode mode, const WeightOptions& options,
                                          const FitOptions& fit) {
    EstimatorSpec spec;
    spec.method = Method::IPW;
    spec.ps_formula = ps_formula;
    spec.ps_mode = mode;
    spec.weights = options;
    spec.fit = fit;
    TransportModel model(ds, std::move(spec));
    return model.weights(j, k);
}

StandardizedEstimate ipw_standardized_prob(const IpdDataset& ds, StudyIndex k, StudyIndex j, Arm x,
                                           const ModelFormula& ps_formula, bool stabilized,
                                           const WeightOptions& options, PsMode mode, const FitOptions& fit) {
    EstimatorSpec spec;
    spec.method = stabilized ? Method::IPW_STABILIZED : Method::IPW;
    spec.ps_formula = ps_formula;
    spec.ps_mode = mode;
    spec.weights = options;
    spec.fit = fit;
    TransportModel model(ds, std::move(spec));
    return model.ipw(k, j, x, stabilized);
}

EffectEstimate effect_from_probs(double p1, double p0, Measure measure, StudyIndex j, StudyIndex k) {
    EffectEstimate e;
    e.measure = measure;
    e.j = j;
    e.k = k;
    switch (measure) {
        case Measure::RR:
            if (!(p0 > 0.0)) {
                e.defined = false;
                e.note = "control risk is not positive";
                e.point = std::numeric_limits<double>::quiet_NaN();
            } else {
                e.point = p1 / p0;
                e.transformed_point = std::log(e.point);
                if (!std::isfinite(e.transformed_point)) {
                    e.defined = false;
                    e.note = "relative risk is not positive";
                }
            }
            break;
        case Measure::OR:
            if (!(p1 > 0.0 && p1 < 1.0 && p0 > 0.0 && p0 < 1.0)) {
                e.defined = false;
                e.note = "arm probability outside (0, 1)";
                e.point = (p1 / (1.0 - p1)) / (p0 / (1.0 - p0));
                e.transformed_point = std::numeric_limits<double>::quiet_NaN();
            } else {
                e.point = (p1 / (1.0 - p1)) / (p0 / (1.0 - p0));
                e.transformed_point = std::log(e.point);
            }
            break;
        case Measure::RD:
            e.point = p1 - p0;
            e.transformed_point = e.point;
            break;
    }
    return e;
}

EffectEstimate effect(const StandardizedEstimate& p1, const StandardizedEstimate& p0, Measure measure) {
    if (p1.arm != Arm::Treated || p0.arm != Arm::Control)
        throw Error(ErrorCode::Precondition, "effect expects the treated estimate first, control second");
    if (p1.source_k != p0.source_k || p1.target_j != p0.target_j || p1.method != p0.method)
        throw Error(ErrorCode::Precondition, "estimates differ in (j, k, method)");
    auto e = effect_from_probs(p1.prob, p0.prob, measure, p1.target_j, p1.source_k);
    if (!e.defined) throw Error(ErrorCode::UndefinedMeasure, to_string(measure) + ": " + e.note);
    return e;
}

ProbabilityGrid standardize_all(TransportModel& model) {
    const auto& ds = model.data();
    ds.require_multi_study("standardization across trials");
    ProbabilityGrid grid;
    grid.K = ds.num_studies();
    grid.method = model.spec().method;
    grid.labels = ds.study_labels();
    grid.cells.assign(2 * grid.K * grid.K, std::nullopt);
    grid.errors.assign(grid.cells.size(), {});
    for (StudyIndex j = 0; j < grid.K; ++j)
        for (StudyIndex k = 0; k < grid.K; ++k)
            for (Arm x : {Arm::Control, Arm::Treated}) {
                const auto idx = ProbabilityGrid::index(grid.K, j, k, x);
                try {
                    grid.cells[idx] = model.standardize(k, j, x);
                } catch (const Error& e) {
                    if (!model.spec().allow_partial) throw;
                    grid.errors[idx] = e.what();
                }
            }
    return grid;
}

ProbabilityGrid standardize_all(const IpdDataset& ds, const EstimatorSpec& spec) {
    TransportModel model(ds, spec);
    return standardize_all(model);
}

EffectMatrix make_effect_matrix(const ProbabilityGrid& grid, Measure measure, bool allow_partial) {
    EffectMatrix m;
    m.measure = measure;
    m.method = grid.method;
    m.K = grid.K;
    m.labels = grid.labels;
    m.cells.reserve(grid.K * grid.K);
    for (StudyIndex j = 0; j < grid.K; ++j)
        for (StudyIndex k = 0; k < grid.K; ++k) {
            const auto& p1 = grid.at(j, k, Arm::Treated);
            const auto& p0 = grid.at(j, k, Arm::Control);
            EffectEstimate e;
            if (!p1 || !p0) {
                e.measure = measure;
                e.j = j;
                e.k = k;
                e.defined = false;
                e.point = e.transformed_point = std::numeric_limits<double>::quiet_NaN();
                const auto& err1 = grid.errors[ProbabilityGrid::index(grid.K, j, k, Arm::Treated)];
                e.note = err1.empty() ? grid.errors[ProbabilityGrid::index(grid.K, j, k, Arm::Control)] : err1;
            } else {
                e = effect_from_probs(p1->prob, p0->prob, measure, j, k);
            }
            if (!e.defined && !allow_partial)
                throw Error(ErrorCode::UndefinedMeasure, to_string(measure) + "(" + grid.labels[j] + "," +
                                                             grid.labels[k] + "): " + e.note);
            m.cells.push_back(std::move(e));
        }
    m.sigma = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(m.cells.size()), static_cast<Eigen::Index>(m.cells.size()),
                                        std::numeric_limits<double>::quiet_NaN());
    return m;
}

EffectMatrix effect_matrix(const IpdDataset& ds, const EstimatorSpec& spec, Measure measure) {
    return make_effect_matrix(standardize_all(ds, spec), measure, spec.allow_partial);
}

CommonControlReport common_control_check(const IpdDataset& ds, const ModelFormula& control_formula, double alpha,
                                         const FitOptions& fit) {
    ds.require_multi_study("common-control check");
    if (control_formula.involves_treat())
        throw Error(ErrorCode::InvalidFormula, "control-arm model cannot include treat");
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (ds.treat(i) == 0) rows.push_back(i);
    const CompiledFormula compiled(control_formula, ds.schema());
    const Eigen::MatrixXd X0 = compiled.design(ds, rows);
    const auto K = ds.num_studies();
    const auto p = X0.cols();
    const bool intercept = control_formula.has_intercept();
    const auto extra = static_cast<Eigen::Index>(K - 1) * (p + (intercept ? 0 : 1));
    Eigen::MatrixXd X1(X0.rows(), p + extra);
    X1.leftCols(p) = X0;
    Eigen::Index col = p;
    for (StudyIndex s = 1; s < K; ++s) {
        Eigen::VectorXd d(X0.rows());
        for (std::size_t r = 0; r < rows.size(); ++r) d(static_cast<Eigen::Index>(r)) = ds.study(rows[r]) == s ? 1.0 : 0.0;
        if (!intercept) X1.col(col++) = d;
        for (Eigen::Index c = 0; c < p; ++c) X1.col(col++) = d.cwiseProduct(X0.col(c));
    }
    Eigen::VectorXd y(X0.rows());
    for (std::size_t r = 0; r < rows.size(); ++r) y(static_cast<Eigen::Index>(r)) = ds.outcome(rows[r]);

    const auto f0 = fit_logistic(X0, y, std::nullopt, fit);
    const auto f1 = fit_logistic(X1, y, std::nullopt, fit);
    CommonControlReport rep;
    rep.alpha = alpha;
    rep.deviance_null = f0.deviance;
    rep.deviance_alt = f1.deviance;
    rep.statistic = std::max(0.0, f0.deviance - f1.deviance);
    rep.df = static_cast<int>(f1.active_columns().size()) - static_cast<int>(f0.active_columns().size());
    rep.p_value = rep.df > 0 ? stats::chi2_upper(rep.statistic, rep.df) : 1.0;
    rep.reject = rep.p_value < alpha;
    return rep;
}

}  // namespace casemix
