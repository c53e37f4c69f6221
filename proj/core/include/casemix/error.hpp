#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace casemix {

enum class ErrorCode {
    // ingestion
    MissingColumn,
    NonBinaryValue,
    NonNumericCovariate,
    EmptyDataset,
    SingleArmStudy,
    UnknownStudy,
    InvalidSchema,
    // model fitting
    NoConvergence,
    RankDeficient,
    AllSameResponse,
    UnknownReference,
    DimensionMismatch,
    InvalidFormula,
    // transport / effects
    EmptyTarget,
    EmptyArm,
    DivisionByZero,
    UndefinedMeasure,
    Precondition,
    // variance
    SingularBread,
    TooManyFailedReplicates,
    // meta / het
    NoEstimableInputs,
    SingularContrastCovariance,
    // config
    InvalidConfig,
};

std::string_view to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace casemix
