#pragma once

#include "casemix/transport.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace casemix {

/// Stacked M-estimation system behind the sandwich covariance. The parameter
/// vector holds, in order: outcome-model coefficients, membership-model
/// coefficients, arm proportions (unstabilized IPW), standardized
/// probabilities, and one transformed effect per requested measure and cell.
/// Aliased model columns are left out, since they are fixed at zero.
class EstimatingSystem {
public:
    /// `model` must be the one that produced `grid`; missing grid cells are
    /// left out of the system.
    EstimatingSystem(TransportModel& model, const ProbabilityGrid& grid, std::vector<Measure> measures = {});
    ~EstimatingSystem();
    EstimatingSystem(EstimatingSystem&&) noexcept;
    EstimatingSystem& operator=(EstimatingSystem&&) noexcept;

    [[nodiscard]] std::size_t dim() const;
    [[nodiscard]] std::size_t n() const;
    [[nodiscard]] const Eigen::VectorXd& theta() const;
    [[nodiscard]] const std::vector<std::string>& labels() const;

    /// Per-subject estimating functions at `theta` (n x dim).
    [[nodiscard]] Eigen::MatrixXd psi(const Eigen::VectorXd& theta) const;
    /// Column means of psi at the estimate.
    [[nodiscard]] Eigen::VectorXd mean_psi() const;
    /// A = -(1/n) sum d psi_i / d theta, closed form.
    [[nodiscard]] Eigen::MatrixXd bread() const;
    /// Same by central differences with step rel_step * (1 + |theta|).
    [[nodiscard]] Eigen::MatrixXd bread_numeric(double rel_step = 1e-6) const;
    /// B = (1/n) sum psi_i psi_i'.
    [[nodiscard]] Eigen::MatrixXd meat() const;
    /// A^-1 B A^-T / n, symmetrized. Throws SingularBread when the bread's
    /// condition number exceeds `max_condition`.
    [[nodiscard]] Eigen::MatrixXd covariance(bool numeric_bread = false, double max_condition = 1e12) const;
    /// Ratio of largest to smallest singular value of the bread.
    [[nodiscard]] double bread_condition(bool numeric_bread = false) const;

    [[nodiscard]] std::optional<std::size_t> prob_position(std::size_t grid_index) const;
    [[nodiscard]] std::optional<std::size_t> effect_position(Measure m, StudyIndex j, StudyIndex k) const;

    /// K^2 x K^2 block of `cov` for the transformed effects of measure m;
    /// rows of cells missing from the system are NaN.
    [[nodiscard]] Eigen::MatrixXd effect_block(const Eigen::MatrixXd& cov, Measure m) const;
    /// 2K^2 square block for the probabilities, grid order.
    [[nodiscard]] Eigen::MatrixXd prob_block(const Eigen::MatrixXd& cov) const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

struct SandwichOptions {
    bool numeric_bread = false;
    double rel_step = 1e-6;
    double max_condition = 1e12;
};

struct SandwichResult {
    std::vector<Measure> measures;
    /// One K^2 x K^2 matrix per measure.
    std::vector<Eigen::MatrixXd> sigma;
    Eigen::MatrixXd prob_cov;
    double bread_condition = 1.0;
};

SandwichResult sandwich(TransportModel& model, const ProbabilityGrid& grid, std::span<const Measure> measures,
                        const SandwichOptions& options = {});

/// Sandwich covariance of all K^2 transformed effects for one measure.
Eigen::MatrixXd sandwich_cov(const IpdDataset& ds, const EstimatorSpec& spec, Measure measure,
                             const SandwichOptions& options = {});

struct BootstrapOptions {
    std::size_t replicates = 200;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    /// A cell with more than this share of undefined replicates fails.
    double max_excluded_share = 0.5;
    /// Throw TooManyFailedReplicates instead of reporting the failure.
    bool throw_on_failure = true;
    /// Replaces the stratified resampler, mainly for tests. Receives the
    /// dataset and replicate index and returns the row indices to keep.
    std::function<std::vector<std::size_t>(const IpdDataset&, std::size_t)> sampler;
};

struct BootstrapResult {
    std::vector<Measure> measures;
    /// One K^2 x K^2 matrix per measure, pairwise-complete over replicates.
    std::vector<Eigen::MatrixXd> sigma;
    /// Replicates excluded per cell, per measure.
    std::vector<std::vector<std::size_t>> excluded;
    std::size_t replicates = 0;
    /// Replicates where the whole estimation failed.
    std::size_t failed_replicates = 0;
    bool too_many_failed = false;

    [[nodiscard]] double excluded_share(std::size_t measure_index, std::size_t cell) const {
        return replicates ? static_cast<double>(excluded[measure_index][cell]) / static_cast<double>(replicates) : 0.0;
    }
};

/// Row indices of one trial-stratified resample: each trial is drawn with
/// replacement to its own size.
std::vector<std::size_t> stratified_resample(const IpdDataset& ds, std::uint64_t seed, std::size_t replicate);

BootstrapResult bootstrap(const IpdDataset& ds, const EstimatorSpec& spec, std::span<const Measure> measures,
                          const BootstrapOptions& options);

/// Bootstrap covariance of the K^2 transformed effects for one measure.
Eigen::MatrixXd bootstrap_cov(const IpdDataset& ds, const EstimatorSpec& spec, Measure measure,
                              const BootstrapOptions& options);

}  // namespace casemix
