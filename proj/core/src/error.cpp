#include "casemix/error.hpp"

namespace casemix {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::MissingColumn: return "MissingColumn";
        case ErrorCode::NonBinaryValue: return "NonBinaryValue";
        case ErrorCode::NonNumericCovariate: return "NonNumericCovariate";
        case ErrorCode::EmptyDataset: return "EmptyDataset";
        case ErrorCode::SingleArmStudy: return "SingleArmStudy";
        case ErrorCode::UnknownStudy: return "UnknownStudy";
        case ErrorCode::InvalidSchema: return "InvalidSchema";
        case ErrorCode::NoConvergence: return "NoConvergence";
        case ErrorCode::RankDeficient: return "RankDeficient";
        case ErrorCode::AllSameResponse: return "AllSameResponse";
        case ErrorCode::UnknownReference: return "UnknownReference";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::InvalidFormula: return "InvalidFormula";
        case ErrorCode::EmptyTarget: return "EmptyTarget";
        case ErrorCode::EmptyArm: return "EmptyArm";
        case ErrorCode::DivisionByZero: return "DivisionByZero";
        case ErrorCode::UndefinedMeasure: return "UndefinedMeasure";
        case ErrorCode::Precondition: return "Precondition";
        case ErrorCode::SingularBread: return "SingularBread";
        case ErrorCode::TooManyFailedReplicates: return "TooManyFailedReplicates";
        case ErrorCode::NoEstimableInputs: return "NoEstimableInputs";
        case ErrorCode::SingularContrastCovariance: return "SingularContrastCovariance";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
    }
    return "Unknown";
}

}  // namespace casemix
