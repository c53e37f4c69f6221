#include "casemix/variance.hpp"

#include "casemix/error.hpp"
#include "casemix/parallel.hpp"
#include "casemix/rng.hpp"
#include "casemix/textio.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <utility>

namespace casemix {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Eigen::MatrixXd take_columns(const Eigen::MatrixXd& X, const std::vector<std::size_t>& cols) {
    Eigen::MatrixXd out(X.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) out.col(static_cast<Eigen::Index>(c)) = X.col(static_cast<Eigen::Index>(cols[c]));
    return out;
}

Eigen::VectorXd make_y(const std::vector<std::size_t>& rows, auto&& f) {
    Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) y(static_cast<Eigen::Index>(r)) = f(rows[r]);
    return y;
}

using Index = Eigen::Index;

}  // namespace

// ---------------------------------------------------------------------------

struct EstimatingSystem::Impl {
    struct LogisticBlock {
        std::vector<std::size_t> rows;  // subjects contributing
        Eigen::MatrixXd X;              // rows x active columns
        Eigen::VectorXd y;
        std::size_t off = 0;
    };
    struct PairBlock {
        StudyIndex a = 0, b = 0;
        LogisticBlock fit;
    };
    struct MultiBlock {
        std::size_t C = 0;  // reference is category 0
        Eigen::MatrixXd V;  // all subjects x active columns
        std::vector<std::size_t> category;
        std::size_t off = 0;
        std::size_t width = 0;
    };
    struct ArmBlock {
        StudyIndex k = 0;
        int x = 0;
        std::size_t off = 0;
    };
    struct ProbCell {
        StudyIndex j = 0, k = 0;
        int x = 0;
        std::size_t grid_index = 0;
        std::size_t off = 0;
        // outcome regression
        std::size_t outcome_block = 0;
        Eigen::MatrixXd Zx;  // target rows x active columns, treat set to x
        // weighting
        std::vector<std::size_t> src_rows;  // trial-k rows in arm x
        Eigen::MatrixXd Vsrc;               // membership design on src_rows, full width
        std::optional<double> cap;
        std::size_t arm_block = 0;
    };
    struct EffectRow {
        Measure m = Measure::RR;
        StudyIndex j = 0, k = 0;
        std::size_t p1 = 0, p0 = 0;  // theta positions
        std::size_t off = 0;
    };

    const IpdDataset* ds = nullptr;
    Method method = Method::OCR;
    WeightLink link = WeightLink::DensityRatio;
    std::size_t K = 0;
    std::vector<LogisticBlock> outcome;
    std::map<std::size_t, std::size_t> outcome_of_fit;  // model outcome index -> block
    std::vector<std::vector<std::size_t>> outcome_active;
    std::vector<PairBlock> pairs;
    std::vector<std::size_t> ps_active;
    std::optional<MultiBlock> multi;
    std::vector<ArmBlock> arms;
    std::vector<ProbCell> probs;
    std::vector<EffectRow> effects;
    std::vector<Measure> measures;
    std::vector<std::optional<std::size_t>> prob_pos;  // by grid index
    Eigen::VectorXd theta;
    std::vector<std::string> labels;

    std::size_t find_pair(StudyIndex a, StudyIndex b) const {
        if (a > b) std::swap(a, b);
        for (std::size_t p = 0; p < pairs.size(); ++p)
            if (pairs[p].a == a && pairs[p].b == b) return p;
        throw Error(ErrorCode::Precondition, "membership pair missing from system");
    }

    /// Linear predictor of log{P(S=j|L)/P(S=k|L)} for full-width design row v,
    /// plus its gradient as (theta position, value) pairs.
    double membership_eta(const Eigen::VectorXd& th, const Eigen::Ref<const Eigen::RowVectorXd>& v, StudyIndex j,
                          StudyIndex k, std::vector<std::pair<std::size_t, double>>* grad) const {
        if (grad) grad->clear();
        double eta = 0.0;
        if (multi) {
            const std::size_t w = multi->width;
            for (StudyIndex c : {j, k}) {
                if (c == 0) continue;
                const double sign = c == j ? 1.0 : -1.0;
                const std::size_t base = multi->off + (c - 1) * w;
                for (std::size_t a = 0; a < w; ++a) {
                    const double vc = v(static_cast<Index>(ps_active[a]));
                    eta += sign * vc * th(static_cast<Index>(base + a));
                    if (grad) grad->emplace_back(base + a, sign * vc);
                }
            }
            return eta;
        }
        const auto& pb = pairs[find_pair(j, k)];
        const double sign = j == pb.b ? 1.0 : -1.0;
        for (std::size_t a = 0; a < ps_active.size(); ++a) {
            const double vc = v(static_cast<Index>(ps_active[a]));
            eta += sign * vc * th(static_cast<Index>(pb.fit.off + a));
            if (grad) grad->emplace_back(pb.fit.off + a, sign * vc);
        }
        return eta;
    }

    /// Weight and its derivative with respect to eta. A weight at the cap
    /// stays there under small perturbations, so its derivative is zero.
    std::pair<double, double> weight(double eta, const std::optional<double>& cap) const {
        double w, dw;
        if (link == WeightLink::DensityRatio) {
            w = std::exp(eta);
            dw = w;
        } else {
            w = expit(eta);
            dw = w * (1.0 - w);
        }
        if (cap && w > *cap) return {*cap, 0.0};
        return {w, dw};
    }

    void eval(const Eigen::VectorXd& th, Eigen::MatrixXd* psi, Eigen::MatrixXd* jac) const;
};

void EstimatingSystem::Impl::eval(const Eigen::VectorXd& th, Eigen::MatrixXd* psi, Eigen::MatrixXd* jac) const {
    const auto n = static_cast<Index>(ds->size());
    const auto p = static_cast<Index>(theta.size());
    if (psi) psi->setZero(n, p);
    if (jac) jac->setZero(p, p);

    auto logistic = [&](const LogisticBlock& b) {
        const auto w = b.X.cols();
        const Eigen::VectorXd beta = th.segment(static_cast<Index>(b.off), w);
        const Eigen::VectorXd eta = b.X * beta;
        Eigen::VectorXd mu(eta.size()), v(eta.size());
        for (Index r = 0; r < eta.size(); ++r) {
            mu(r) = expit(eta(r));
            v(r) = mu(r) * (1.0 - mu(r));
        }
        if (psi)
            for (std::size_t r = 0; r < b.rows.size(); ++r)
                psi->row(static_cast<Index>(b.rows[r])).segment(static_cast<Index>(b.off), w) =
                    b.X.row(static_cast<Index>(r)) * (b.y(static_cast<Index>(r)) - mu(static_cast<Index>(r)));
        if (jac)
            jac->block(static_cast<Index>(b.off), static_cast<Index>(b.off), w, w) -= b.X.transpose() * v.asDiagonal() * b.X;
    };

    for (const auto& b : outcome) logistic(b);
    for (const auto& pb : pairs) logistic(pb.fit);

    if (multi) {
        const auto& m = *multi;
        const auto w = static_cast<Index>(m.width);
        const auto cats = static_cast<Index>(m.C - 1);
        Eigen::MatrixXd G(cats, w);
        for (Index c = 0; c < cats; ++c) G.row(c) = th.segment(static_cast<Index>(m.off) + c * w, w).transpose();
        Eigen::VectorXd eta(cats), pr(cats);
        for (Index i = 0; i < n; ++i) {
            const auto v = m.V.row(i);
            eta = G * v.transpose();
            const double mx = std::max(0.0, eta.maxCoeff());
            double denom = std::exp(-mx);
            for (Index c = 0; c < cats; ++c) denom += std::exp(eta(c) - mx);
            for (Index c = 0; c < cats; ++c) pr(c) = std::exp(eta(c) - mx) / denom;
            if (psi)
                for (Index c = 0; c < cats; ++c) {
                    const double ind = m.category[static_cast<std::size_t>(i)] == static_cast<std::size_t>(c + 1) ? 1.0 : 0.0;
                    psi->row(i).segment(static_cast<Index>(m.off) + c * w, w) = v * (ind - pr(c));
                }
            if (jac) {
                const Eigen::MatrixXd vv = v.transpose() * v;
                for (Index r = 0; r < cats; ++r)
                    for (Index s = 0; s < cats; ++s) {
                        const double f = pr(r) * ((r == s ? 1.0 : 0.0) - pr(s));
                        jac->block(static_cast<Index>(m.off) + r * w, static_cast<Index>(m.off) + s * w, w, w) -= f * vv;
                    }
            }
        }
    }

    for (const auto& a : arms) {
        const double pi = th(static_cast<Index>(a.off));
        const auto rows = ds->rows_of(a.k);
        if (psi)
            for (auto i : rows) (*psi)(static_cast<Index>(i), static_cast<Index>(a.off)) = (ds->treat(i) == a.x ? 1.0 : 0.0) - pi;
        if (jac) (*jac)(static_cast<Index>(a.off), static_cast<Index>(a.off)) -= static_cast<double>(rows.size());
    }

    std::vector<std::pair<std::size_t, double>> grad;
    for (const auto& c : probs) {
        const auto off = static_cast<Index>(c.off);
        const double t = th(off);
        if (method == Method::OCR) {
            const auto& b = outcome[c.outcome_block];
            const auto w = b.X.cols();
            const Eigen::VectorXd eta = c.Zx * th.segment(static_cast<Index>(b.off), w);
            const auto target = ds->rows_of(c.j);
            for (std::size_t r = 0; r < target.size(); ++r) {
                const double mu = expit(eta(static_cast<Index>(r)));
                if (psi) (*psi)(static_cast<Index>(target[r]), off) = mu - t;
                if (jac) jac->row(off).segment(static_cast<Index>(b.off), w) += mu * (1.0 - mu) * c.Zx.row(static_cast<Index>(r));
            }
            if (jac) (*jac)(off, off) -= static_cast<double>(target.size());
            continue;
        }

        const bool same = c.j == c.k;
        const bool stabilized = method == Method::IPW_STABILIZED;
        const double pi = stabilized ? 1.0 : th(static_cast<Index>(arms[c.arm_block].off));
        if (!stabilized) {
            const auto target = ds->rows_of(c.j);
            if (psi)
                for (auto i : target) (*psi)(static_cast<Index>(i), off) -= t;
            if (jac) (*jac)(off, off) -= static_cast<double>(target.size());
        }
        for (std::size_t r = 0; r < c.src_rows.size(); ++r) {
            const auto i = static_cast<Index>(c.src_rows[r]);
            const double y = ds->outcome(c.src_rows[r]);
            double w = 1.0, dw = 0.0;
            if (!same) {
                const double eta = membership_eta(th, c.Vsrc.row(static_cast<Index>(r)), c.j, c.k, jac ? &grad : nullptr);
                std::tie(w, dw) = weight(eta, c.cap);
            }
            if (stabilized) {
                if (psi) (*psi)(i, off) += w * (y - t);
                if (jac) {
                    (*jac)(off, off) -= w;
                    if (dw != 0.0)
                        for (const auto& [pos, g] : grad) (*jac)(off, static_cast<Index>(pos)) += (y - t) * dw * g;
                }
            } else {
                if (psi) (*psi)(i, off) += y * w / pi;
                if (jac) {
                    (*jac)(off, static_cast<Index>(arms[c.arm_block].off)) -= y * w / (pi * pi);
                    if (dw != 0.0)
                        for (const auto& [pos, g] : grad) (*jac)(off, static_cast<Index>(pos)) += y / pi * dw * g;
                }
            }
        }
    }

    for (const auto& e : effects) {
        const auto off = static_cast<Index>(e.off);
        const double t1 = th(static_cast<Index>(e.p1));
        const double t0 = th(static_cast<Index>(e.p0));
        double g = 0.0, d1 = 0.0, d0 = 0.0;
        switch (e.m) {
            case Measure::RR:
                g = std::log(t1) - std::log(t0);
                d1 = 1.0 / t1;
                d0 = -1.0 / t0;
                break;
            case Measure::OR:
                g = std::log(t1 / (1.0 - t1)) - std::log(t0 / (1.0 - t0));
                d1 = 1.0 / (t1 * (1.0 - t1));
                d0 = -1.0 / (t0 * (1.0 - t0));
                break;
            case Measure::RD:
                g = t1 - t0;
                d1 = 1.0;
                d0 = -1.0;
                break;
        }
        if (psi) psi->col(off).setConstant(g - th(off));
        if (jac) {
            const auto nn = static_cast<double>(n);
            (*jac)(off, static_cast<Index>(e.p1)) += nn * d1;
            (*jac)(off, static_cast<Index>(e.p0)) += nn * d0;
            (*jac)(off, off) -= nn;
        }
    }
}

EstimatingSystem::EstimatingSystem(TransportModel& model, const ProbabilityGrid& grid, std::vector<Measure> measures)
    : impl_(std::make_unique<Impl>()) {
    auto& s = *impl_;
    const auto& ds = model.data();
    const auto& spec = model.spec();
    s.ds = &ds;
    s.method = spec.method;
    s.link = spec.weights.link;
    s.K = grid.K;
    s.measures = std::move(measures);
    if (grid.K != ds.num_studies()) throw Error(ErrorCode::DimensionMismatch, "grid and dataset disagree on K");

    std::vector<double> theta;
    auto push = [&](double v, std::string label) {
        theta.push_back(v);
        s.labels.push_back(std::move(label));
        return theta.size() - 1;
    };
    const auto& lab = grid.labels;

    // Nuisance models referenced by present cells.
    if (s.method == Method::OCR) {
        for (StudyIndex j = 0; j < s.K; ++j)
            for (StudyIndex k = 0; k < s.K; ++k) {
                if (!grid.at(j, k, Arm::Control) && !grid.at(j, k, Arm::Treated)) continue;
                const auto m = model.outcome_fit_index(j, k);
                if (s.outcome_of_fit.count(m)) continue;
                const auto& of = model.outcome_fits()[m];
                Impl::LogisticBlock b;
                const auto rows = ds.rows_of(of.k);
                b.rows.assign(rows.begin(), rows.end());
                const auto active = of.fit.active_columns();
                b.X = take_columns(of.compiled.design(ds, rows), active);
                b.y = make_y(b.rows, [&](std::size_t i) { return static_cast<double>(ds.outcome(i)); });
                b.off = theta.size();
                for (std::size_t a = 0; a < active.size(); ++a)
                    push(of.fit.coef(static_cast<Index>(active[a])), "outcome[" + lab[of.k] + "]:" + of.fit.column_names[active[a]]);
                s.outcome_of_fit[m] = s.outcome.size();
                s.outcome_active.push_back(active);
                s.outcome.push_back(std::move(b));
            }
    } else {
        bool need_ps = false;
        for (StudyIndex j = 0; j < s.K; ++j)
            for (StudyIndex k = 0; k < s.K; ++k)
                if (j != k && (grid.at(j, k, Arm::Control) || grid.at(j, k, Arm::Treated))) need_ps = true;
        if (need_ps) {
            const auto& compiled = model.ps_compiled();
            if (model.ps_mode() == PsMode::Multinomial) {
                const auto& fit = model.multinomial_fit();
                s.ps_active = fit.active_columns();
                Impl::MultiBlock mb;
                mb.C = fit.num_categories;
                std::vector<std::size_t> all(ds.size());
                for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
                mb.V = take_columns(compiled.design(ds, all), s.ps_active);
                mb.category.resize(ds.size());
                for (std::size_t i = 0; i < ds.size(); ++i) mb.category[i] = ds.study(i);
                mb.width = s.ps_active.size();
                mb.off = theta.size();
                for (std::size_t c = 1; c < mb.C; ++c)
                    for (auto col : s.ps_active)
                        push(fit.coef(static_cast<Index>(c - 1), static_cast<Index>(col)),
                             "membership[" + lab[c] + "]:" + fit.column_names[col]);
                s.multi = std::move(mb);
            } else {
                bool first = true;
                for (StudyIndex a = 0; a < s.K; ++a)
                    for (StudyIndex b = a + 1; b < s.K; ++b) {
                        bool used = false;
                        for (auto [j, k] : {std::pair{a, b}, std::pair{b, a}})
                            if (grid.at(j, k, Arm::Control) || grid.at(j, k, Arm::Treated)) used = true;
                        if (!used) continue;
                        const auto& pf = model.pairwise_fit(a, b);
                        const auto active = pf.fit.active_columns();
                        if (first) {
                            s.ps_active = active;
                            first = false;
                        } else if (active != s.ps_active) {
                            throw Error(ErrorCode::RankDeficient,
                                        "pairwise membership fits dropped different columns; sandwich needs a common design");
                        }
                        Impl::PairBlock pb;
                        pb.a = a;
                        pb.b = b;
                        pb.fit.rows = pf.rows;
                        pb.fit.X = take_columns(compiled.design(ds, pf.rows), active);
                        pb.fit.y = make_y(pf.rows, [&](std::size_t i) { return ds.study(i) == b ? 1.0 : 0.0; });
                        pb.fit.off = theta.size();
                        for (auto col : active)
                            push(pf.fit.coef(static_cast<Index>(col)),
                                 "membership[" + lab[a] + "|" + lab[b] + "]:" + pf.fit.column_names[col]);
                        s.pairs.push_back(std::move(pb));
                    }
            }
        }
    }

    // Arm proportions for the unstabilized weighting estimator.
    if (s.method == Method::IPW) {
        for (StudyIndex k = 0; k < s.K; ++k)
            for (int x : {0, 1}) {
                bool used = false;
                for (StudyIndex j = 0; j < s.K; ++j)
                    if (grid.at(j, k, x ? Arm::Treated : Arm::Control)) used = true;
                if (!used) continue;
                const auto rows = ds.rows_of(k);
                const auto nx = std::count_if(rows.begin(), rows.end(), [&](std::size_t i) { return ds.treat(i) == x; });
                Impl::ArmBlock ab;
                ab.k = k;
                ab.x = x;
                ab.off = push(static_cast<double>(nx) / static_cast<double>(rows.size()),
                              "arm_share[" + lab[k] + "," + std::to_string(x) + "]");
                s.arms.push_back(ab);
            }
    }

    // Standardized probabilities.
    s.prob_pos.assign(grid.cells.size(), std::nullopt);
    std::optional<CompiledFormula> ps_compiled;
    if (s.method != Method::OCR) ps_compiled.emplace(model.ps_compiled());
    for (StudyIndex j = 0; j < s.K; ++j)
        for (StudyIndex k = 0; k < s.K; ++k)
            for (Arm arm : {Arm::Control, Arm::Treated}) {
                const auto gi = ProbabilityGrid::index(s.K, j, k, arm);
                const auto& est = grid.cells[gi];
                if (!est) continue;
                Impl::ProbCell c;
                c.j = j;
                c.k = k;
                c.x = arm_value(arm);
                c.grid_index = gi;
                if (s.method == Method::OCR) {
                    const auto m = model.outcome_fit_index(j, k);
                    c.outcome_block = s.outcome_of_fit.at(m);
                    const auto& of = model.outcome_fits()[m];
                    c.Zx = take_columns(of.compiled.design(ds, ds.rows_of(j), c.x), s.outcome_active[c.outcome_block]);
                } else {
                    for (auto i : ds.rows_of(k))
                        if (ds.treat(i) == c.x) c.src_rows.push_back(i);
                    if (j != k) {
                        c.Vsrc = ps_compiled->design(ds, c.src_rows);
                        c.cap = model.weights(j, k).truncation_cap;
                    }
                    if (s.method == Method::IPW) {
                        for (std::size_t a = 0; a < s.arms.size(); ++a)
                            if (s.arms[a].k == k && s.arms[a].x == c.x) c.arm_block = a;
                    }
                }
                c.off = push(est->prob, "prob[" + lab[j] + "," + lab[k] + "," + std::to_string(c.x) + "]");
                s.prob_pos[gi] = c.off;
                s.probs.push_back(std::move(c));
            }

    // Transformed effects.
    for (auto m : s.measures)
        for (StudyIndex j = 0; j < s.K; ++j)
            for (StudyIndex k = 0; k < s.K; ++k) {
                const auto p1 = s.prob_pos[ProbabilityGrid::index(s.K, j, k, Arm::Treated)];
                const auto p0 = s.prob_pos[ProbabilityGrid::index(s.K, j, k, Arm::Control)];
                if (!p1 || !p0) continue;
                const auto e = effect_from_probs(theta[*p1], theta[*p0], m, j, k);
                if (!e.defined) continue;
                Impl::EffectRow row;
                row.m = m;
                row.j = j;
                row.k = k;
                row.p1 = *p1;
                row.p0 = *p0;
                row.off = push(e.transformed_point, to_string(m) + "[" + lab[j] + "," + lab[k] + "]");
                s.effects.push_back(row);
            }

    s.theta = Eigen::Map<Eigen::VectorXd>(theta.data(), static_cast<Index>(theta.size()));
}

EstimatingSystem::~EstimatingSystem() = default;
EstimatingSystem::EstimatingSystem(EstimatingSystem&&) noexcept = default;
EstimatingSystem& EstimatingSystem::operator=(EstimatingSystem&&) noexcept = default;

std::size_t EstimatingSystem::dim() const { return static_cast<std::size_t>(impl_->theta.size()); }
std::size_t EstimatingSystem::n() const { return impl_->ds->size(); }
const Eigen::VectorXd& EstimatingSystem::theta() const { return impl_->theta; }
const std::vector<std::string>& EstimatingSystem::labels() const { return impl_->labels; }

Eigen::MatrixXd EstimatingSystem::psi(const Eigen::VectorXd& theta) const {
    if (theta.size() != impl_->theta.size()) throw Error(ErrorCode::DimensionMismatch, "theta has the wrong length");
    Eigen::MatrixXd out;
    impl_->eval(theta, &out, nullptr);
    return out;
}

Eigen::VectorXd EstimatingSystem::mean_psi() const { return psi(impl_->theta).colwise().mean().transpose(); }

Eigen::MatrixXd EstimatingSystem::bread() const {
    Eigen::MatrixXd jac;
    impl_->eval(impl_->theta, nullptr, &jac);
    return -jac / static_cast<double>(n());
}

Eigen::MatrixXd EstimatingSystem::bread_numeric(double rel_step) const {
    const auto p = impl_->theta.size();
    Eigen::MatrixXd A(p, p);
    for (Index c = 0; c < p; ++c) {
        const double h = rel_step * (1.0 + std::abs(impl_->theta(c)));
        Eigen::VectorXd up = impl_->theta, dn = impl_->theta;
        up(c) += h;
        dn(c) -= h;
        const Eigen::VectorXd fu = psi(up).colwise().sum().transpose();
        const Eigen::VectorXd fd = psi(dn).colwise().sum().transpose();
        A.col(c) = -(fu - fd) / (2.0 * h * static_cast<double>(n()));
    }
    return A;
}

Eigen::MatrixXd EstimatingSystem::meat() const {
    const Eigen::MatrixXd P = psi(impl_->theta);
    return P.transpose() * P / static_cast<double>(n());
}

double EstimatingSystem::bread_condition(bool numeric_bread) const {
    const Eigen::MatrixXd A = numeric_bread ? bread_numeric() : bread();
    if (A.size() == 0) return 1.0;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
    const auto& sv = svd.singularValues();
    const double lo = sv(sv.size() - 1);
    return lo > 0.0 ? sv(0) / lo : std::numeric_limits<double>::infinity();
}

Eigen::MatrixXd EstimatingSystem::covariance(bool numeric_bread, double max_condition) const {
    const Eigen::MatrixXd A = numeric_bread ? bread_numeric() : bread();
    if (A.size() == 0) return A;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
    const auto& sv = svd.singularValues();
    const double cond = sv(sv.size() - 1) > 0.0 ? sv(0) / sv(sv.size() - 1) : std::numeric_limits<double>::infinity();
    if (!(cond <= max_condition))
        throw Error(ErrorCode::SingularBread, "bread matrix is near singular (condition number " + textio::format_double(cond) + ")");
    const Eigen::MatrixXd Ainv = A.partialPivLu().inverse();
    Eigen::MatrixXd V = Ainv * meat() * Ainv.transpose() / static_cast<double>(n());
    return (V + V.transpose()) / 2.0;
}

std::optional<std::size_t> EstimatingSystem::prob_position(std::size_t grid_index) const {
    return grid_index < impl_->prob_pos.size() ? impl_->prob_pos[grid_index] : std::nullopt;
}

std::optional<std::size_t> EstimatingSystem::effect_position(Measure m, StudyIndex j, StudyIndex k) const {
    for (const auto& e : impl_->effects)
        if (e.m == m && e.j == j && e.k == k) return e.off;
    return std::nullopt;
}

Eigen::MatrixXd EstimatingSystem::effect_block(const Eigen::MatrixXd& cov, Measure m) const {
    const auto K = impl_->K;
    const auto cells = static_cast<Index>(K * K);
    Eigen::MatrixXd out = Eigen::MatrixXd::Constant(cells, cells, kNaN);
    std::vector<std::optional<std::size_t>> pos(K * K);
    for (StudyIndex j = 0; j < K; ++j)
        for (StudyIndex k = 0; k < K; ++k) pos[j * K + k] = effect_position(m, j, k);
    for (std::size_t a = 0; a < pos.size(); ++a)
        for (std::size_t b = 0; b < pos.size(); ++b)
            if (pos[a] && pos[b])
                out(static_cast<Index>(a), static_cast<Index>(b)) = cov(static_cast<Index>(*pos[a]), static_cast<Index>(*pos[b]));
    return out;
}

Eigen::MatrixXd EstimatingSystem::prob_block(const Eigen::MatrixXd& cov) const {
    const auto& pos = impl_->prob_pos;
    const auto m = static_cast<Index>(pos.size());
    Eigen::MatrixXd out = Eigen::MatrixXd::Constant(m, m, kNaN);
    for (std::size_t a = 0; a < pos.size(); ++a)
        for (std::size_t b = 0; b < pos.size(); ++b)
            if (pos[a] && pos[b])
                out(static_cast<Index>(a), static_cast<Index>(b)) = cov(static_cast<Index>(*pos[a]), static_cast<Index>(*pos[b]));
    return out;
}

SandwichResult sandwich(TransportModel& model, const ProbabilityGrid& grid, std::span<const Measure> measures,
                        const SandwichOptions& options) {
    EstimatingSystem sys(model, grid, std::vector<Measure>(measures.begin(), measures.end()));
    SandwichResult r;
    r.measures.assign(measures.begin(), measures.end());
    r.bread_condition = sys.bread_condition(options.numeric_bread);
    const Eigen::MatrixXd V = sys.covariance(options.numeric_bread, options.max_condition);
    for (auto m : measures) r.sigma.push_back(sys.effect_block(V, m));
    r.prob_cov = sys.prob_block(V);
    return r;
}

Eigen::MatrixXd sandwich_cov(const IpdDataset& ds, const EstimatorSpec& spec, Measure measure,
                             const SandwichOptions& options) {
    TransportModel model(ds, spec);
    const auto grid = standardize_all(model);
    // Surfaces UndefinedMeasure before any covariance work.
    (void)make_effect_matrix(grid, measure, spec.allow_partial);
    const Measure ms[] = {measure};
    return sandwich(model, grid, ms, options).sigma.front();
}

// ---------------------------------------------------------------------------
// bootstrap

std::vector<std::size_t> stratified_resample(const IpdDataset& ds, std::uint64_t seed, std::size_t replicate) {
    auto rng = stream_rng(seed, replicate, 0xb0075742ULL);
    std::vector<std::size_t> out;
    out.reserve(ds.size());
    for (StudyIndex k = 0; k < ds.num_studies(); ++k) {
        const auto rows = ds.rows_of(k);
        std::uniform_int_distribution<std::size_t> pick(0, rows.size() - 1);
        for (std::size_t r = 0; r < rows.size(); ++r) out.push_back(rows[pick(rng)]);
    }
    return out;
}

BootstrapResult bootstrap(const IpdDataset& ds, const EstimatorSpec& spec, std::span<const Measure> measures,
                          const BootstrapOptions& options) {
    if (options.replicates < 2) throw Error(ErrorCode::Precondition, "bootstrap needs at least two replicates");
    ds.require_multi_study("bootstrap");
    const auto K = ds.num_studies();
    const auto cells = K * K;
    const auto M = measures.size();
    const auto B = options.replicates;

    EstimatorSpec rep_spec = spec;
    rep_spec.allow_partial = true;

    // values[b][m * cells + c]; NaN marks an undefined cell.
    std::vector<std::vector<double>> values(B, std::vector<double>(M * cells, kNaN));
    std::vector<char> failed(B, 0);
    parallel_for(B, options.workers, [&](std::size_t b) {
        try {
            const auto rows = options.sampler ? options.sampler(ds, b) : stratified_resample(ds, options.seed, b);
            const auto sample = ds.subset(rows);
            const auto grid = standardize_all(sample, rep_spec);
            for (std::size_t m = 0; m < M; ++m) {
                const auto em = make_effect_matrix(grid, measures[m], true);
                for (std::size_t c = 0; c < cells; ++c)
                    if (em.cells[c].defined && std::isfinite(em.cells[c].transformed_point))
                        values[b][m * cells + c] = em.cells[c].transformed_point;
            }
        } catch (const Error&) {
            failed[b] = 1;
        }
    });

    BootstrapResult r;
    r.measures.assign(measures.begin(), measures.end());
    r.replicates = B;
    r.failed_replicates = static_cast<std::size_t>(std::count(failed.begin(), failed.end(), 1));
    for (std::size_t m = 0; m < M; ++m) {
        Eigen::MatrixXd S = Eigen::MatrixXd::Constant(static_cast<Index>(cells), static_cast<Index>(cells), kNaN);
        std::vector<std::size_t> excl(cells, 0);
        for (std::size_t c = 0; c < cells; ++c)
            for (std::size_t b = 0; b < B; ++b)
                if (std::isnan(values[b][m * cells + c])) ++excl[c];
        for (std::size_t c1 = 0; c1 < cells; ++c1)
            for (std::size_t c2 = c1; c2 < cells; ++c2) {
                double n = 0.0, m1 = 0.0, m2 = 0.0;
                for (std::size_t b = 0; b < B; ++b) {
                    const double v1 = values[b][m * cells + c1], v2 = values[b][m * cells + c2];
                    if (std::isnan(v1) || std::isnan(v2)) continue;
                    n += 1.0;
                    m1 += v1;
                    m2 += v2;
                }
                if (n < 2.0) continue;
                m1 /= n;
                m2 /= n;
                double s = 0.0;
                for (std::size_t b = 0; b < B; ++b) {
                    const double v1 = values[b][m * cells + c1], v2 = values[b][m * cells + c2];
                    if (std::isnan(v1) || std::isnan(v2)) continue;
                    s += (v1 - m1) * (v2 - m2);
                }
                S(static_cast<Index>(c1), static_cast<Index>(c2)) = S(static_cast<Index>(c2), static_cast<Index>(c1)) = s / (n - 1.0);
            }
        for (std::size_t c = 0; c < cells; ++c)
            if (static_cast<double>(excl[c]) > options.max_excluded_share * static_cast<double>(B)) r.too_many_failed = true;
        r.sigma.push_back(std::move(S));
        r.excluded.push_back(std::move(excl));
    }
    if (r.too_many_failed && options.throw_on_failure)
        throw Error(ErrorCode::TooManyFailedReplicates, "more than " + textio::format_double(options.max_excluded_share * 100.0) +
                                                            "% of bootstrap replicates were undefined for some cell");
    return r;
}

Eigen::MatrixXd bootstrap_cov(const IpdDataset& ds, const EstimatorSpec& spec, Measure measure,
                              const BootstrapOptions& options) {
    const Measure ms[] = {measure};
    return bootstrap(ds, spec, ms, options).sigma.front();
}

}  // namespace casemix
