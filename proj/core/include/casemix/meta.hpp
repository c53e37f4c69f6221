#pragma once

#include "casemix/transport.hpp"

#include <string>
#include <vector>

namespace casemix {

enum class Tau2Method { DerSimonianLaird, REML };
std::string to_string(Tau2Method m);
Tau2Method parse_tau2_method(std::string_view s);

struct MetaInput {
    std::string label;
    double estimate = 0.0;
    double se = 0.0;
};

struct MetaContribution {
    std::string label;
    double estimate = 0.0;
    double se = 0.0;
    /// Random-effects weight 1/(se^2 + tau2).
    double weight = 0.0;
};

/// Random-effects pooled summary on the transformed scale.
struct MetaSummary {
    double pooled = 0.0;
    double se_pooled = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    double tau2 = 0.0;
    double q = 0.0;
    double i2 = 0.0;
    Tau2Method tau2_method = Tau2Method::DerSimonianLaird;
    std::vector<MetaContribution> per_source;
    /// Inputs without a finite positive standard error.
    std::vector<std::string> skipped;
};

/// Pools the usable inputs. Throws NoEstimableInputs when none has a finite
/// estimate and a finite positive standard error. `fixed_tau2` bypasses the
/// between-source variance estimate.
MetaSummary pool_row(const std::vector<MetaInput>& inputs, Tau2Method method = Tau2Method::DerSimonianLaird,
                     std::optional<double> fixed_tau2 = std::nullopt);

/// Pools row j of an effect matrix that carries standard errors.
MetaSummary pool_target(const EffectMatrix& m, StudyIndex j, Tau2Method method = Tau2Method::DerSimonianLaird);

struct ForestRow {
    std::string label;
    /// Back-transformed scale (exp for RR/OR).
    double point = 0.0;
    double lo = 0.0;
    double hi = 0.0;
    double weight_percent = 0.0;
    bool pooled = false;
};

/// One row per source plus the pooled diamond as the last row.
std::vector<ForestRow> forest_rows(const MetaSummary& s, Measure measure);
std::string forest_csv(const std::vector<ForestRow>& rows);

}  // namespace casemix
