#pragma once

#include "casemix/het.hpp"
#include "casemix/meta.hpp"
#include "casemix/simlab.hpp"
#include "casemix/transport.hpp"
#include "casemix/variance.hpp"

#include "json.hpp"

namespace casemix::cli {

using nlohmann::json;

/// Single model term from text such as `1`, `treat`, `L^2` or `treat:L`.
Term parse_term(std::string_view text);

/// Setting description, see the README for the schema. Unknown keys are
/// rejected so that typos do not silently fall back to defaults.
SettingConfig setting_from_json(const json& j);
json setting_to_json(const SettingConfig& cfg);

json to_json(const OracleTruth& t);
json to_json(const SimulationReport& r);
json to_json(const WeightsSummary& w);
json to_json(const EffectMatrix& m);
json to_json(const MetaSummary& s, const std::vector<std::string>& labels, StudyIndex j, Measure measure);
json to_json(const WaldTestResult& t);
json to_json(const CommonControlReport& c);
json matrix_to_json(const Eigen::MatrixXd& m, const std::vector<std::string>& labels);

/// NaN and infinities become null.
json number(double v);

}  // namespace casemix::cli
