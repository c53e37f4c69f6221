#pragma once

#include "casemix/formula.hpp"
#include "casemix/glm.hpp"
#include "casemix/ipd.hpp"

#include <Eigen/Dense>

#include <deque>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace casemix {

enum class Method { OCR, IPW, IPW_STABILIZED };
enum class Measure { RR, OR, RD };
/// AUTO: pairwise for K = 2, multinomial otherwise.
enum class PsMode { Auto, Pairwise, Multinomial };
/// DensityRatio: w = P(S=j|L)/P(S=k|L) (odds of the membership model).
/// Expit: the literal expit(linear predictor), kept for comparison runs.
enum class WeightLink { DensityRatio, Expit };

std::string to_string(Method m);
std::string to_string(Measure m);
std::string to_string(PsMode m);
Method parse_method(std::string_view s);
Measure parse_measure(std::string_view s);
PsMode parse_ps_mode(std::string_view s);

inline constexpr double kDefaultPositivityThreshold = 200.0;

struct WeightOptions {
    /// Weights above this percentile of the trial-k weights are reset to it.
    std::optional<double> truncation_percentile;
    WeightLink link = WeightLink::DensityRatio;
    double positivity_threshold = kDefaultPositivityThreshold;
};

struct WeightsSummary {
    double max = 0.0;
    double p95 = 0.0;
    double ess = 0.0;
    std::size_t n_over_threshold = 0;
    /// Set when any post-truncation weight exceeds the positivity threshold.
    bool positivity_warning = false;
};

struct DensityRatioWeights {
    StudyIndex target_j = 0;
    StudyIndex source_k = 0;
    /// Trial-k row indices, aligned with `weights`.
    std::vector<std::size_t> rows;
    Eigen::VectorXd weights;
    /// Untruncated weights.
    Eigen::VectorXd raw_weights;
    std::optional<double> truncation_cap;
    WeightsSummary diagnostics;
};

struct StandardizedEstimate {
    StudyIndex source_k = 0;
    StudyIndex target_j = 0;
    Arm arm = Arm::Control;
    double prob = 0.0;
    Method method = Method::OCR;
    std::optional<WeightsSummary> weights_summary;
    /// Unstabilized IPW only: prob outside [0, 1]. Never clamped.
    bool out_of_bounds = false;
    /// Per-subject contribution to the probability's moment equation, at the
    /// estimate (sums to zero).
    Eigen::VectorXd influence;
};

struct EffectEstimate {
    Measure measure = Measure::RR;
    StudyIndex j = 0;
    StudyIndex k = 0;
    double point = 0.0;
    /// log(point) for RR/OR, point for RD.
    double transformed_point = 0.0;
    double se_transformed = std::numeric_limits<double>::quiet_NaN();
    bool defined = true;
    std::string note;
};

enum class CovarianceMethod { None, Sandwich, Bootstrap };
std::string to_string(CovarianceMethod m);

/// Row j = target population, column k = source trial.
struct EffectMatrix {
    Measure measure = Measure::RR;
    Method method = Method::OCR;
    std::size_t K = 0;
    std::vector<std::string> labels;
    std::vector<EffectEstimate> cells;  // row-major
    /// K^2 x K^2 covariance of transformed points, cell order row-major.
    Eigen::MatrixXd sigma;
    CovarianceMethod covariance_method = CovarianceMethod::None;

    [[nodiscard]] const EffectEstimate& at(StudyIndex j, StudyIndex k) const { return cells[j * K + k]; }
    [[nodiscard]] EffectEstimate& at(StudyIndex j, StudyIndex k) { return cells[j * K + k]; }
    [[nodiscard]] static std::size_t cell_index(std::size_t K, StudyIndex j, StudyIndex k) { return j * K + k; }
    [[nodiscard]] Eigen::VectorXd transformed() const;
    [[nodiscard]] Eigen::VectorXd points() const;
    [[nodiscard]] bool all_defined() const;
    /// Fills se_transformed from sigma's diagonal.
    void attach_sigma(Eigen::MatrixXd s, CovarianceMethod how);
};

/// Everything needed to standardize all K^2 cells.
struct EstimatorSpec {
    Method method = Method::OCR;
    ModelFormula outcome_formula = ModelFormula::parse("y ~ 1 + treat");
    /// Per-cell outcome formulas, keyed by (target j, source k).
    std::map<std::pair<StudyIndex, StudyIndex>, ModelFormula> outcome_overrides;
    ModelFormula ps_formula = ModelFormula::parse("~ 1");
    PsMode ps_mode = PsMode::Auto;
    WeightOptions weights;
    FitOptions fit;
    /// Record failing cells as undefined instead of throwing.
    bool allow_partial = false;

    [[nodiscard]] const ModelFormula& outcome_formula_for(StudyIndex j, StudyIndex k) const;
    [[nodiscard]] PsMode resolved_ps_mode(std::size_t K) const;
};

/// Fitted nuisance models for one dataset and estimator. Holds a reference to
/// the dataset, which must outlive it.
class TransportModel {
public:
    struct OutcomeFit {
        StudyIndex k = 0;
        CompiledFormula compiled;
        FittedLogistic fit;
    };
    struct PairwiseFit {
        StudyIndex a = 0;  // response is I(S = b) on rows of a and b
        StudyIndex b = 0;
        std::vector<std::size_t> rows;
        FittedLogistic fit;
    };

    TransportModel(const IpdDataset& ds, EstimatorSpec spec);

    [[nodiscard]] const IpdDataset& data() const noexcept { return *ds_; }
    [[nodiscard]] const EstimatorSpec& spec() const noexcept { return spec_; }
    [[nodiscard]] PsMode ps_mode() const noexcept { return ps_mode_; }

    [[nodiscard]] const OutcomeFit& outcome_fit(StudyIndex j, StudyIndex k);
    [[nodiscard]] const std::deque<OutcomeFit>& outcome_fits() const noexcept { return outcome_; }
    /// Index into outcome_fits() for cell (j, k); fits lazily.
    std::size_t outcome_fit_index(StudyIndex j, StudyIndex k);

    [[nodiscard]] const CompiledFormula& ps_compiled() const;
    const PairwiseFit& pairwise_fit(StudyIndex a, StudyIndex b);
    [[nodiscard]] const std::deque<PairwiseFit>& pairwise_fits() const noexcept { return pairwise_; }
    const FittedMultinomial& multinomial_fit();
    [[nodiscard]] bool has_multinomial() const noexcept { return multinomial_.has_value(); }

    /// Linear predictor of log{P(S=j|L_i)/P(S=k|L_i)} for subject i, j != k.
    double membership_eta(std::size_t i, StudyIndex j, StudyIndex k);

    DensityRatioWeights weights(StudyIndex j, StudyIndex k);
    StandardizedEstimate ocr(StudyIndex k, StudyIndex j, Arm x);
    StandardizedEstimate ipw(StudyIndex k, StudyIndex j, Arm x, bool stabilized);
    StandardizedEstimate standardize(StudyIndex k, StudyIndex j, Arm x);

private:
    const IpdDataset* ds_;
    EstimatorSpec spec_;
    PsMode ps_mode_;
    std::deque<OutcomeFit> outcome_;
    std::optional<CompiledFormula> ps_compiled_;
    std::deque<PairwiseFit> pairwise_;
    std::optional<FittedMultinomial> multinomial_;
    std::vector<std::optional<std::size_t>> cell_outcome_;  // (j,k) -> outcome_ index
    std::map<std::pair<StudyIndex, StudyIndex>, DensityRatioWeights> weight_cache_;
};

/// All 2K^2 standardized probabilities; index ((j*K)+k)*2 + x.
struct ProbabilityGrid {
    std::size_t K = 0;
    Method method = Method::OCR;
    std::vector<std::string> labels;
    std::vector<std::optional<StandardizedEstimate>> cells;
    std::vector<std::string> errors;  // per cell, empty when fine

    [[nodiscard]] static std::size_t index(std::size_t K, StudyIndex j, StudyIndex k, Arm x) {
        return (j * K + k) * 2 + static_cast<std::size_t>(arm_value(x));
    }
    [[nodiscard]] const std::optional<StandardizedEstimate>& at(StudyIndex j, StudyIndex k, Arm x) const {
        return cells[index(K, j, k, x)];
    }
    [[nodiscard]] std::size_t out_of_bounds_count() const;
};

StandardizedEstimate ocr_standardized_prob(const IpdDataset& ds, StudyIndex k, StudyIndex j, Arm x,
                                           const ModelFormula& outcome_formula, const FitOptions& fit = {});

DensityRatioWeights density_ratio_weights(const IpdDataset& ds, StudyIndex j, StudyIndex k,
                                          const ModelFormula& ps_formula, PsMode mode,
                                          const WeightOptions& options = {}, const FitOptions& fit = {});

StandardizedEstimate ipw_standardized_prob(const IpdDataset& ds, StudyIndex k, StudyIndex j, Arm x,
                                           const ModelFormula& ps_formula, bool stabilized,
                                           const WeightOptions& options = {}, PsMode mode = PsMode::Auto,
                                           const FitOptions& fit = {});

/// Effect of arm 1 vs arm 0. Throws UndefinedMeasure when the measure's
/// preconditions fail.
EffectEstimate effect(const StandardizedEstimate& p1, const StandardizedEstimate& p0, Measure measure);
/// Same, from bare probabilities; undefined results are flagged instead of thrown.
EffectEstimate effect_from_probs(double p1, double p0, Measure measure, StudyIndex j, StudyIndex k);

ProbabilityGrid standardize_all(const IpdDataset& ds, const EstimatorSpec& spec);
ProbabilityGrid standardize_all(TransportModel& model);
/// Throws UndefinedMeasure on an undefined cell unless `allow_partial`.
EffectMatrix make_effect_matrix(const ProbabilityGrid& grid, Measure measure, bool allow_partial);
EffectMatrix effect_matrix(const IpdDataset& ds, const EstimatorSpec& spec, Measure measure);

/// Summary statistics of a weight vector.
WeightsSummary summarize_weights(const Eigen::VectorXd& w, double positivity_threshold);

struct CommonControlReport {
    double statistic = 0.0;
    int df = 0;
    double p_value = 1.0;
    bool reject = false;
    double alpha = 0.05;
    double deviance_null = 0.0;
    double deviance_alt = 0.0;
};

/// Likelihood-ratio test on control rows: control_formula vs the same formula
/// with study indicators and study-by-term interactions.
CommonControlReport common_control_check(const IpdDataset& ds, const ModelFormula& control_formula, double alpha = 0.05,
                                         const FitOptions& fit = {});

}  // namespace casemix
