#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace casemix {

/// Dense study index in first-appearance order (0..K-1). Reports map it back
/// to the original label through IpdDataset::study_label.
using StudyIndex = std::size_t;

enum class Arm : std::uint8_t { Control = 0, Treated = 1 };

inline int arm_value(Arm x) { return x == Arm::Treated ? 1 : 0; }

enum class CovariateKind { Continuous, Binary };

class CovariateSchema {
public:
    CovariateSchema() = default;
    CovariateSchema(std::vector<std::string> names, std::vector<CovariateKind> kinds);
    /// All covariates continuous.
    explicit CovariateSchema(std::vector<std::string> names);

    [[nodiscard]] std::size_t size() const noexcept { return names_.size(); }
    [[nodiscard]] const std::vector<std::string>& names() const noexcept { return names_; }
    [[nodiscard]] const std::vector<CovariateKind>& kinds() const noexcept { return kinds_; }
    [[nodiscard]] std::optional<std::size_t> find(std::string_view name) const;

    friend bool operator==(const CovariateSchema&, const CovariateSchema&) = default;

private:
    std::vector<std::string> names_;
    std::vector<CovariateKind> kinds_;
};

struct IpdRecord {
    std::string study;
    int treat = 0;
    int outcome = 0;
    std::vector<double> covariates;

    friend bool operator==(const IpdRecord&, const IpdRecord&) = default;
};

/// Immutable individual-patient data for K two-arm trials, stored by column.
class IpdDataset {
public:
    /// Validates every record; throws casemix::Error on the first violation.
    IpdDataset(CovariateSchema schema, const std::vector<IpdRecord>& records);

    /// Column-wise construction used by generators and resampling. `study`
    /// holds dense indices into `labels`.
    IpdDataset(CovariateSchema schema, std::vector<std::string> labels,
               std::vector<StudyIndex> study, std::vector<std::uint8_t> treat,
               std::vector<std::uint8_t> outcome, Eigen::MatrixXd covariates);

    [[nodiscard]] const CovariateSchema& schema() const noexcept { return schema_; }
    [[nodiscard]] std::size_t size() const noexcept { return study_.size(); }
    [[nodiscard]] std::size_t num_studies() const noexcept { return labels_.size(); }
    [[nodiscard]] const std::vector<std::string>& study_labels() const noexcept { return labels_; }
    [[nodiscard]] const std::string& study_label(StudyIndex k) const;
    /// Throws UnknownStudy.
    [[nodiscard]] StudyIndex study_index(std::string_view label) const;

    [[nodiscard]] StudyIndex study(std::size_t i) const noexcept { return study_[i]; }
    [[nodiscard]] int treat(std::size_t i) const noexcept { return treat_[i]; }
    [[nodiscard]] int outcome(std::size_t i) const noexcept { return outcome_[i]; }
    [[nodiscard]] double covariate(std::size_t i, std::size_t c) const noexcept {
        return covariates_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
    }
    [[nodiscard]] const Eigen::MatrixXd& covariates() const noexcept { return covariates_; }

    /// Row indices belonging to study k, ascending.
    [[nodiscard]] std::span<const std::size_t> rows_of(StudyIndex k) const;

    [[nodiscard]] IpdRecord record(std::size_t i) const;
    [[nodiscard]] std::vector<IpdRecord> records() const;

    /// New dataset from the given rows (repeats allowed); keeps the study label
    /// table so indices stay comparable with the parent.
    [[nodiscard]] IpdDataset subset(std::span<const std::size_t> rows) const;

    /// Throws Precondition when K < 2.
    void require_multi_study(std::string_view context) const;

private:
    void validate_and_index();

    CovariateSchema schema_;
    std::vector<std::string> labels_;
    std::vector<StudyIndex> study_;
    std::vector<std::uint8_t> treat_;
    std::vector<std::uint8_t> outcome_;
    Eigen::MatrixXd covariates_;
    std::vector<std::vector<std::size_t>> rows_by_study_;
};

struct ArmCounts {
    std::size_t n_treated = 0;
    std::size_t n_control = 0;
    /// R_k: treated-to-control ratio.
    [[nodiscard]] double ratio() const { return static_cast<double>(n_treated) / static_cast<double>(n_control); }
    [[nodiscard]] std::size_t total() const { return n_treated + n_control; }
};

ArmCounts arm_counts(const IpdDataset& ds, StudyIndex k);
ArmCounts arm_counts(const IpdDataset& ds, std::string_view label);

/// CSV with header `study,treat,outcome,<covariates...>`. Without a schema the
/// covariate kinds are inferred (binary when every value is 0 or 1).
IpdDataset load_ipd(std::istream& in, const std::optional<CovariateSchema>& schema = std::nullopt);
IpdDataset load_ipd_file(const std::string& path, const std::optional<CovariateSchema>& schema = std::nullopt);

/// Writes shortest round-trip decimal representations, so load_ipd(save_ipd(ds))
/// reproduces every double bit for bit.
void save_ipd(const IpdDataset& ds, std::ostream& out);
void save_ipd_file(const IpdDataset& ds, const std::string& path);

}  // namespace casemix
