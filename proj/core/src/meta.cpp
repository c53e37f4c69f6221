#include "casemix/meta.hpp"

#include "casemix/error.hpp"
#include "casemix/stats.hpp"
#include "casemix/textio.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace casemix {

std::string to_string(Tau2Method m) { return m == Tau2Method::REML ? "reml" : "dl"; }

Tau2Method parse_tau2_method(std::string_view s) {
    if (s == "dl" || s == "DL") return Tau2Method::DerSimonianLaird;
    if (s == "reml" || s == "REML") return Tau2Method::REML;
    throw Error(ErrorCode::InvalidConfig, "unknown tau2 method '" + std::string(s) + "' (dl|reml)");
}

namespace {

double dl_tau2(const std::vector<double>& y, const std::vector<double>& v, double& q) {
    double sw = 0.0, sw2 = 0.0, swy = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double w = 1.0 / v[i];
        sw += w;
        sw2 += w * w;
        swy += w * y[i];
    }
    const double fe = swy / sw;
    q = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) q += (y[i] - fe) * (y[i] - fe) / v[i];
    const double df = static_cast<double>(y.size()) - 1.0;
    const double c = sw - sw2 / sw;
    if (!(c > 0.0)) return 0.0;
    return std::max(0.0, (q - df) / c);
}

/// Fisher scoring on the restricted likelihood, started from the DL value.
double reml_tau2(const std::vector<double>& y, const std::vector<double>& v, double start) {
    if (y.size() < 2) return 0.0;
    double t = start;
    for (int it = 0; it < 200; ++it) {
        double sw = 0.0, swy = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double w = 1.0 / (v[i] + t);
            sw += w;
            swy += w * y[i];
        }
        const double mu = swy / sw;
        double num = 0.0, den = 0.0, sw2 = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double w = 1.0 / (v[i] + t);
            num += w * w * ((y[i] - mu) * (y[i] - mu) - v[i]);
            den += w * w;
            sw2 += w * w;
        }
        num += sw2 / sw;
        const double next = std::max(0.0, num / den);
        if (std::abs(next - t) < 1e-12 * (1.0 + t)) return next;
        t = next;
    }
    return t;
}

}  // namespace

MetaSummary pool_row(const std::vector<MetaInput>& inputs, Tau2Method method, std::optional<double> fixed_tau2) {
    MetaSummary s;
    s.tau2_method = method;
    std::vector<double> y, v;
    std::vector<const MetaInput*> used;
    for (const auto& in : inputs) {
        if (std::isfinite(in.estimate) && std::isfinite(in.se) && in.se > 0.0) {
            y.push_back(in.estimate);
            v.push_back(in.se * in.se);
            used.push_back(&in);
        } else {
            s.skipped.push_back(in.label);
        }
    }
    if (y.empty()) throw Error(ErrorCode::NoEstimableInputs, "no input has a finite estimate and positive standard error");

    const double tau_dl = dl_tau2(y, v, s.q);
    if (fixed_tau2) {
        if (!(*fixed_tau2 >= 0.0)) throw Error(ErrorCode::Precondition, "tau2 must be non-negative");
        s.tau2 = *fixed_tau2;
    } else {
        s.tau2 = method == Tau2Method::REML ? reml_tau2(y, v, tau_dl) : tau_dl;
    }
    const double df = static_cast<double>(y.size()) - 1.0;
    s.i2 = s.q > 0.0 ? std::max(0.0, (s.q - df) / s.q) : 0.0;

    double sw = 0.0, swy = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double w = 1.0 / (v[i] + s.tau2);
        sw += w;
        swy += w * y[i];
        s.per_source.push_back({used[i]->label, y[i], used[i]->se, w});
    }
    s.pooled = swy / sw;
    s.se_pooled = std::sqrt(1.0 / sw);
    const double z = stats::normal_quantile(0.975);
    s.ci_lo = s.pooled - z * s.se_pooled;
    s.ci_hi = s.pooled + z * s.se_pooled;
    return s;
}

MetaSummary pool_target(const EffectMatrix& m, StudyIndex j, Tau2Method method) {
    if (j >= m.K) throw Error(ErrorCode::UnknownStudy, "target index out of range");
    std::vector<MetaInput> in;
    for (StudyIndex k = 0; k < m.K; ++k) {
        const auto& c = m.at(j, k);
        in.push_back({m.labels[k], c.defined ? c.transformed_point : std::nan(""), c.se_transformed});
    }
    return pool_row(in, method);
}

std::vector<ForestRow> forest_rows(const MetaSummary& s, Measure measure) {
    const bool log_scale = measure != Measure::RD;
    auto back = [&](double t) { return log_scale ? std::exp(t) : t; };
    const double z = stats::normal_quantile(0.975);
    double total = 0.0;
    for (const auto& c : s.per_source) total += c.weight;
    std::vector<ForestRow> rows;
    for (const auto& c : s.per_source)
        rows.push_back({c.label, back(c.estimate), back(c.estimate - z * c.se), back(c.estimate + z * c.se),
                        100.0 * c.weight / total, false});
    rows.push_back({"pooled", back(s.pooled), back(s.ci_lo), back(s.ci_hi), 100.0, true});
    return rows;
}

std::string forest_csv(const std::vector<ForestRow>& rows) {
    std::ostringstream out;
    out << "label,point,lo,hi,weight_percent,pooled\n";
    for (const auto& r : rows)
        out << textio::csv_field(r.label) << ',' << textio::format_double(r.point) << ',' << textio::format_double(r.lo) << ','
            << textio::format_double(r.hi) << ',' << textio::format_double(r.weight_percent) << ',' << (r.pooled ? 1 : 0)
            << '\n';
    return out.str();
}

}  // namespace casemix
