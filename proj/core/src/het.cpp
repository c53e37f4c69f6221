#include "casemix/het.hpp"

#include "casemix/error.hpp"
#include "casemix/stats.hpp"
#include "casemix/textio.hpp"

#include <cmath>

namespace casemix {

std::string to_string(WaldScale s) { return s == WaldScale::Raw ? "raw" : "transformed"; }

WaldScale parse_wald_scale(std::string_view s) {
    if (s == "transformed" || s == "log") return WaldScale::Transformed;
    if (s == "raw") return WaldScale::Raw;
    throw Error(ErrorCode::InvalidConfig, "unknown scale '" + std::string(s) + "' (transformed|raw)");
}

WaldTestResult wald_test(const Eigen::VectorXd& estimates, const Eigen::MatrixXd& sigma, const Eigen::MatrixXd& M,
                         WaldScale scale) {
    if (sigma.rows() != estimates.size() || sigma.cols() != estimates.size() || M.cols() != estimates.size())
        throw Error(ErrorCode::DimensionMismatch, "estimates, covariance and contrast disagree in size");
    if (M.rows() == 0) throw Error(ErrorCode::Precondition, "contrast has no rows");
    WaldTestResult r;
    r.scale = scale;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(M);
    r.df = static_cast<int>(lu.rank());
    if (r.df < M.rows()) throw Error(ErrorCode::Precondition, "contrast matrix is not of full row rank");
    const Eigen::VectorXd d = M * estimates;
    const Eigen::MatrixXd C = M * sigma * M.transpose();
    r.condition = stats::condition_number((C + C.transpose()) / 2.0);
    if (!(r.condition < kMaxContrastCondition))
        throw Error(ErrorCode::SingularContrastCovariance,
                    "contrast covariance is near singular (condition number " + textio::format_double(r.condition) + ")");
    r.statistic = std::max(0.0, d.dot(C.ldlt().solve(d)));
    r.p_value = stats::chi2_upper(r.statistic, r.df);
    return r;
}

Eigen::MatrixXd adjacent_contrast(const std::vector<std::size_t>& cells, std::size_t size) {
    if (cells.size() < 2) throw Error(ErrorCode::Precondition, "a contrast needs at least two entries");
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cells.size() - 1), static_cast<Eigen::Index>(size));
    for (std::size_t r = 0; r + 1 < cells.size(); ++r) {
        M(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(cells[r])) = 1.0;
        M(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(cells[r + 1])) = -1.0;
    }
    return M;
}

namespace {

WaldTestResult cell_test(const EffectMatrix& m, const std::vector<std::size_t>& cells, std::string hypothesis,
                         std::string contrast, WaldScale scale) {
    WaldTestResult r;
    r.hypothesis = std::move(hypothesis);
    r.contrast = std::move(contrast);
    r.scale = scale;
    r.df = static_cast<int>(cells.size()) - 1;
    auto infeasible = [&](std::string why) {
        r.feasible = false;
        r.statistic = std::nan("");
        r.p_value = std::nan("");
        r.note = std::move(why);
        return r;
    };
    for (auto c : cells) {
        const auto& e = m.cells[c];
        if (!e.defined || !std::isfinite(e.transformed_point)) return infeasible("undefined effect " + m.labels[e.j] + "," + m.labels[e.k]);
        for (auto c2 : cells)
            if (!std::isfinite(m.sigma(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c2))))
                return infeasible("covariance unavailable");
    }
    const auto n = static_cast<Eigen::Index>(cells.size());
    Eigen::VectorXd est(n);
    Eigen::MatrixXd S(n, n);
    for (Eigen::Index a = 0; a < n; ++a) {
        const auto& e = m.cells[cells[static_cast<std::size_t>(a)]];
        est(a) = e.transformed_point;
        for (Eigen::Index b = 0; b < n; ++b)
            S(a, b) = m.sigma(static_cast<Eigen::Index>(cells[static_cast<std::size_t>(a)]),
                              static_cast<Eigen::Index>(cells[static_cast<std::size_t>(b)]));
    }
    if (scale == WaldScale::Raw && m.measure != Measure::RD) {
        // d exp(t) / dt = exp(t)
        const Eigen::VectorXd g = est.array().exp();
        S = g.asDiagonal() * S * g.asDiagonal();
        est = g;
    }
    std::vector<std::size_t> idx(cells.size());
    for (std::size_t a = 0; a < idx.size(); ++a) idx[a] = a;
    try {
        auto res = wald_test(est, S, adjacent_contrast(idx, cells.size()), scale);
        res.hypothesis = r.hypothesis;
        res.contrast = r.contrast;
        return res;
    } catch (const Error& e) {
        if (e.code() != ErrorCode::SingularContrastCovariance) throw;
        return infeasible(e.what());
    }
}

}  // namespace

WaldTestResult beyond_casemix_test(const EffectMatrix& m, StudyIndex j, WaldScale scale) {
    if (m.K < 2) throw Error(ErrorCode::Precondition, "beyond case-mix test needs at least two sources");
    if (j >= m.K) throw Error(ErrorCode::UnknownStudy, "population index out of range");
    std::vector<std::size_t> cells;
    for (StudyIndex k = 0; k < m.K; ++k) cells.push_back(EffectMatrix::cell_index(m.K, j, k));
    return cell_test(m, cells, "beyond_casemix[" + m.labels[j] + "]", "row " + m.labels[j] + " adjacent differences", scale);
}

WaldTestResult casemix_test(const EffectMatrix& m, StudyIndex k, WaldScale scale) {
    if (m.K < 2) throw Error(ErrorCode::Precondition, "case-mix test needs at least two populations");
    if (k >= m.K) throw Error(ErrorCode::UnknownStudy, "source index out of range");
    std::vector<std::size_t> cells;
    for (StudyIndex j = 0; j < m.K; ++j) cells.push_back(EffectMatrix::cell_index(m.K, j, k));
    return cell_test(m, cells, "casemix[" + m.labels[k] + "]", "column " + m.labels[k] + " adjacent differences", scale);
}

WaldTestResult conventional_test(const EffectMatrix& m, WaldScale scale) {
    if (m.K < 2) throw Error(ErrorCode::Precondition, "conventional test needs at least two trials");
    std::vector<std::size_t> cells;
    for (StudyIndex j = 0; j < m.K; ++j) cells.push_back(EffectMatrix::cell_index(m.K, j, j));
    return cell_test(m, cells, "conventional", "diagonal adjacent differences", scale);
}

std::vector<WaldTestResult> all_tests(const EffectMatrix& m, WaldScale scale) {
    std::vector<WaldTestResult> out;
    for (StudyIndex j = 0; j < m.K; ++j) out.push_back(beyond_casemix_test(m, j, scale));
    for (StudyIndex k = 0; k < m.K; ++k) out.push_back(casemix_test(m, k, scale));
    out.push_back(conventional_test(m, scale));
    return out;
}

}  // namespace casemix
