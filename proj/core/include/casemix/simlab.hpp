#pragma once

#include "casemix/het.hpp"
#include "casemix/ipd.hpp"
#include "casemix/transport.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace casemix {

/// Distribution of one covariate. Normal laws are parameterized by mean and
/// standard deviation.
struct CovariateLaw {
    enum class Kind { Normal, Bernoulli };
    Kind kind = Kind::Normal;
    double mean = 0.0;
    double sd = 1.0;
    double p = 0.5;  // Bernoulli only

    static CovariateLaw normal(double mean, double sd) { return {Kind::Normal, mean, sd, 0.5}; }
    static CovariateLaw bernoulli(double p) { return {Kind::Bernoulli, 0.0, 1.0, p}; }
};

/// coef * term, optionally switched on only inside one trial (I(S = study)).
struct LpTerm {
    double coef = 0.0;
    Term term;
    std::optional<StudyIndex> study;
};

struct LinearPredictor {
    std::vector<LpTerm> terms;

    /// Value for covariates `l` (schema order), treatment x, trial s.
    [[nodiscard]] double eval(const CovariateSchema& schema, std::span<const double> l, int x, StudyIndex s) const;
    [[nodiscard]] std::string to_string(const std::vector<std::string>& labels) const;
};

/// How trial membership arises.
/// Pool: one covariate pool of n_total subjects, S drawn from a multinomial
/// logit (category 0 is the reference, one predictor per other trial).
/// PerTrial: n_total split evenly, covariates drawn from each trial's laws.
enum class MembershipKind { Pool, PerTrial };

struct SettingConfig {
    std::string name = "generic";
    /// 1..5 for the built-in presets, 0 for a user-supplied setting.
    int preset = 0;
    std::size_t K = 2;
    std::size_t n_total = 1500;
    CovariateSchema schema{std::vector<std::string>{"L"}};
    MembershipKind membership = MembershipKind::Pool;
    std::vector<CovariateLaw> pool_laws;
    std::vector<LinearPredictor> membership_lp;     // K - 1 entries
    std::vector<std::vector<CovariateLaw>> trial_laws;  // K x covariates
    LinearPredictor outcome;
    std::vector<double> allocation;  // per trial P(X = 1); empty means 0.5

    /// Throws InvalidConfig.
    void validate() const;
    [[nodiscard]] double allocation_of(StudyIndex k) const { return allocation.empty() ? 0.5 : allocation[k]; }
    [[nodiscard]] std::vector<std::string> labels() const;
};

/// Built-in settings: "1".."5", plus "2-intercept" for the reading of
/// setting 2 with a trial-2 intercept shift instead of a treatment shift.
SettingConfig preset_setting(std::string_view name);
std::vector<std::string> preset_names();

/// One simulated dataset. Deterministic in (cfg, seed, replicate).
IpdDataset generate_setting(const SettingConfig& cfg, std::uint64_t seed, std::size_t replicate = 0);

struct OracleTruth {
    std::size_t K = 0;
    std::size_t runs = 0;
    std::vector<std::string> labels;
    /// Index ((j*K)+k)*2 + x, as in ProbabilityGrid.
    std::vector<double> prob;
    /// Monte-Carlo standard error of each averaged probability.
    std::vector<double> prob_se;

    [[nodiscard]] double p(StudyIndex j, StudyIndex k, int x) const { return prob[(j * K + k) * 2 + static_cast<std::size_t>(x)]; }
    [[nodiscard]] double effect(Measure m, StudyIndex j, StudyIndex k) const;
};

/// Averages the standardization formula with the true coefficients over
/// `runs` freshly drawn covariate samples of size n_total.
OracleTruth true_values_oracle(const SettingConfig& cfg, std::size_t runs = 5000, std::uint64_t seed = 1,
                               std::size_t workers = 1);

/// A named estimator configuration for one setting.
struct Analysis {
    std::string name;
    EstimatorSpec spec;
};

/// Correct outcome formula implied by the setting's outcome predictor, with
/// trial-specific terms absorbed into the per-trial fits.
ModelFormula correct_outcome_formula(const SettingConfig& cfg);
/// Correct membership formula implied by the setting's membership mechanism.
ModelFormula correct_membership_formula(const SettingConfig& cfg);

/// OCR1 correct outcome model; OCR2 drops treatment-by-covariate terms;
/// OCR3 drops the cubic term only for trial 1 transported to population 2;
/// IPW1 correct membership model; IPW2 drops squared terms; IPW3 also drops
/// the intercept. An `S` prefix (SIPW1..3) selects stabilized weights.
Analysis make_analysis(const SettingConfig& cfg, std::string_view name);
/// The analyses listed for each built-in setting.
std::vector<std::string> default_analyses(const SettingConfig& cfg);

struct StudyOptions {
    std::size_t reps = 1000;
    std::uint64_t seed = 1;
    /// Bootstrap replicates per dataset; 0 skips the bootstrap.
    std::size_t bootstrap_b = 50;
    std::size_t workers = 1;
    std::size_t oracle_runs = 5000;
    double alpha = 0.05;
    WaldScale scale = WaldScale::Transformed;
};

struct ProbabilityRow {
    std::string analysis;
    StudyIndex j = 0, k = 0;
    int x = 0;
    double truth = 0.0;
    double mean = 0.0;
    double bias = 0.0;
    double relative_bias = 0.0;
    std::size_t n = 0;
    std::size_t out_of_bounds = 0;
};

struct EffectRow {
    std::string analysis;
    Measure measure = Measure::RR;
    StudyIndex j = 0, k = 0;
    double truth = 0.0;
    /// Mean of the point estimates on the natural scale.
    double mean = 0.0;
    double bias = 0.0;
    double relative_bias = 0.0;
    std::size_t n = 0;
    /// Variance of the transformed point estimates across replications.
    double mcv = 0.0;
    /// Mean sandwich variance and mean bootstrap variance.
    double mev = 0.0;
    double btv = 0.0;
    std::size_t n_mev = 0;
    std::size_t n_btv = 0;
};

struct RejectionRow {
    std::string analysis;
    std::string family;  // beyond_casemix | casemix | conventional
    std::string contrast;
    Measure measure = Measure::RR;
    std::string variance;  // sandwich | bootstrap
    double rejection_rate = 0.0;
    std::size_t n_feasible = 0;
    std::size_t n_infeasible = 0;
};

struct SimulationReport {
    SettingConfig setting;
    std::vector<std::string> analyses;
    StudyOptions options;
    OracleTruth truth;
    std::vector<ProbabilityRow> probabilities;
    std::vector<EffectRow> effects;
    std::vector<RejectionRow> rejections;
    /// Per analysis: replications whose estimation failed in any cell, and
    /// those where the sandwich could not be formed.
    std::vector<std::size_t> failures;
    std::vector<std::size_t> sandwich_failures;
    /// Replications where any analysis failed in either way.
    std::size_t failed_replications = 0;

    /// failed_replications / reps.
    [[nodiscard]] double failure_rate() const;
    [[nodiscard]] const ProbabilityRow* probability(std::string_view analysis, StudyIndex j, StudyIndex k, int x) const;
    [[nodiscard]] const EffectRow* effect(std::string_view analysis, Measure m, StudyIndex j, StudyIndex k) const;
    [[nodiscard]] const RejectionRow* rejection(std::string_view analysis, std::string_view contrast, Measure m,
                                                std::string_view variance) const;
};

SimulationReport run_study(const SettingConfig& cfg, const std::vector<std::string>& analyses, const StudyOptions& options);

/// Same, reusing an already computed truth.
SimulationReport run_study(const SettingConfig& cfg, const std::vector<std::string>& analyses, const StudyOptions& options,
                           const OracleTruth& truth);

/// CSV renderings mirroring the probability-bias, effect-bias, variance and
/// rejection-rate tables.
std::string probability_table_csv(const SimulationReport& r);
std::string effect_table_csv(const SimulationReport& r);
std::string variance_table_csv(const SimulationReport& r);
std::string rejection_table_csv(const SimulationReport& r);

}  // namespace casemix
