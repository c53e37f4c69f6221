#include "casemix/formula.hpp"

#include "casemix/error.hpp"
#include "casemix/textio.hpp"

#include <algorithm>
#include <regex>

namespace casemix {

namespace {

std::string factor_string(const Factor& f) {
    if (f.is_treat) return "treat";
    if (f.power == 1) return f.covariate;
    return f.covariate + "^" + std::to_string(f.power);
}

void validate_factor(const Factor& f) {
    if (f.is_treat) {
        if (f.power != 1) throw Error(ErrorCode::InvalidFormula, "treat cannot be raised to a power");
        return;
    }
    if (f.covariate.empty()) throw Error(ErrorCode::InvalidFormula, "empty covariate name in term");
    if (f.power < 1) throw Error(ErrorCode::InvalidFormula, "power must be a positive integer");
}

Factor parse_factor(std::string_view text) {
    text = textio::trim(text);
    if (text.empty()) throw Error(ErrorCode::InvalidFormula, "empty factor");
    Factor f;
    const auto caret = text.find('^');
    std::string_view name = textio::trim(text.substr(0, caret));
    if (caret != std::string_view::npos) {
        const auto deg = textio::trim(text.substr(caret + 1));
        int d = 0;
        for (char c : deg) {
            if (c < '0' || c > '9') throw Error(ErrorCode::InvalidFormula, "bad power in '" + std::string(text) + "'");
            d = d * 10 + (c - '0');
        }
        if (deg.empty() || d < 1) throw Error(ErrorCode::InvalidFormula, "bad power in '" + std::string(text) + "'");
        f.power = d;
    }
    if (name.empty() || name.find_first_of(" \t()*") != std::string_view::npos)
        throw Error(ErrorCode::InvalidFormula, "bad factor '" + std::string(text) + "'");
    if (name == "treat") {
        f.is_treat = true;
    } else {
        f.covariate = std::string(name);
    }
    validate_factor(f);
    return f;
}

}  // namespace

Term::Kind Term::kind() const {
    if (factors.empty()) return Kind::Intercept;
    if (factors.size() == 2) return Kind::Interaction;
    return factors.front().power == 1 ? Kind::Main : Kind::Power;
}

bool Term::involves_treat() const {
    return std::any_of(factors.begin(), factors.end(), [](const Factor& f) { return f.is_treat; });
}

std::string Term::to_string() const {
    if (factors.empty()) return "1";
    std::string out = factor_string(factors.front());
    for (std::size_t i = 1; i < factors.size(); ++i) out += ":" + factor_string(factors[i]);
    return out;
}

bool Term::same_as(const Term& other) const {
    if (factors.size() != other.factors.size()) return false;
    if (factors == other.factors) return true;
    return factors.size() == 2 && factors[0] == other.factors[1] && factors[1] == other.factors[0];
}

ModelFormula::ModelFormula(std::vector<Term> terms) : terms_(std::move(terms)) {
    if (terms_.empty()) throw Error(ErrorCode::InvalidFormula, "formula has no terms");
    for (std::size_t i = 0; i < terms_.size(); ++i) {
        const auto& t = terms_[i];
        if (t.factors.size() > 2) throw Error(ErrorCode::InvalidFormula, "only two-way interactions are supported");
        for (const auto& f : t.factors) validate_factor(f);
        if (t.factors.size() == 2) {
            const auto& a = t.factors[0];
            const auto& b = t.factors[1];
            if (a.is_treat && b.is_treat) throw Error(ErrorCode::InvalidFormula, "treat:treat is not a term");
            if (!a.is_treat && !b.is_treat && a.covariate == b.covariate)
                throw Error(ErrorCode::InvalidFormula,
                            "interaction of " + a.covariate + " with itself; use a power term");
        }
        for (std::size_t j = 0; j < i; ++j)
            if (terms_[j].same_as(t)) throw Error(ErrorCode::InvalidFormula, "duplicate term " + t.to_string());
    }
}

ModelFormula ModelFormula::parse(std::string_view text) {
    std::string rhs(text);
    if (const auto tilde = rhs.find('~'); tilde != std::string::npos) rhs = rhs.substr(tilde + 1);
    static const std::regex minus_one(R"(-\s*1(?![0-9.]))");
    rhs = std::regex_replace(rhs, minus_one, "+0");
    if (rhs.find('-') != std::string::npos)
        throw Error(ErrorCode::InvalidFormula, "only '-1' may be subtracted: " + std::string(text));

    bool intercept = true;
    bool explicit_one = false;
    std::vector<Term> terms;
    std::size_t start = 0;
    while (start <= rhs.size()) {
        auto end = rhs.find('+', start);
        if (end == std::string::npos) end = rhs.size();
        const auto tok = textio::trim(std::string_view(rhs).substr(start, end - start));
        start = end + 1;
        if (tok.empty()) {
            if (end == rhs.size() && !terms.empty()) break;
            throw Error(ErrorCode::InvalidFormula, "empty term in '" + std::string(text) + "'");
        }
        if (tok == "1") {
            explicit_one = true;
            continue;
        }
        if (tok == "0") {
            intercept = false;
            continue;
        }
        Term t;
        std::size_t fstart = 0;
        while (true) {
            const auto colon = tok.find(':', fstart);
            t.factors.push_back(parse_factor(tok.substr(fstart, colon - fstart)));
            if (colon == std::string_view::npos) break;
            fstart = colon + 1;
        }
        terms.push_back(std::move(t));
    }
    if (explicit_one && !intercept)
        throw Error(ErrorCode::InvalidFormula, "formula both adds and removes the intercept");
    if (intercept) terms.insert(terms.begin(), Term::intercept());
    return ModelFormula(std::move(terms));
}

bool ModelFormula::has_intercept() const {
    return std::any_of(terms_.begin(), terms_.end(), [](const Term& t) { return t.factors.empty(); });
}

bool ModelFormula::involves_treat() const {
    return std::any_of(terms_.begin(), terms_.end(), [](const Term& t) { return t.involves_treat(); });
}

std::string ModelFormula::to_string() const {
    std::string out = "y ~ ";
    bool first = true;
    if (!has_intercept()) {
        out += "0";
        first = false;
    }
    for (const auto& t : terms_) {
        if (!first) out += " + ";
        out += t.to_string();
        first = false;
    }
    return out;
}

ModelFormula ModelFormula::with_term(Term t) const {
    auto terms = terms_;
    terms.push_back(std::move(t));
    return ModelFormula(std::move(terms));
}

ModelFormula ModelFormula::without_term(const Term& t) const {
    auto terms = terms_;
    std::erase_if(terms, [&](const Term& x) { return x.same_as(t); });
    return ModelFormula(std::move(terms));
}

std::optional<std::size_t> ModelFormula::find(const Term& t) const {
    for (std::size_t i = 0; i < terms_.size(); ++i)
        if (terms_[i].same_as(t)) return i;
    return std::nullopt;
}

CompiledFormula::CompiledFormula(const ModelFormula& formula, const CovariateSchema& schema) : formula_(formula) {
    for (const auto& t : formula.terms()) {
        Column col;
        for (const auto& f : t.factors) {
            if (f.is_treat) {
                col.treat = true;
                continue;
            }
            const auto idx = schema.find(f.covariate);
            if (!idx) throw Error(ErrorCode::InvalidFormula, "unknown covariate '" + f.covariate + "'");
            col.powers.emplace_back(*idx, f.power);
        }
        columns_.push_back(std::move(col));
    }
}

std::vector<std::string> CompiledFormula::column_names() const {
    std::vector<std::string> out;
    for (const auto& t : formula_.terms()) out.push_back(t.to_string());
    return out;
}

double CompiledFormula::eval(const Column& col, int treat, auto&& cov) const {
    double v = col.treat ? static_cast<double>(treat) : 1.0;
    for (const auto& [c, p] : col.powers) {
        const double x = cov(c);
        for (int e = 0; e < p; ++e) v *= x;
    }
    return v;
}

void CompiledFormula::row(const IpdDataset& ds, std::size_t i, std::optional<int> treat, std::span<double> out) const {
    if (out.size() != columns_.size()) throw Error(ErrorCode::DimensionMismatch, "design row buffer size");
    const int t = treat.value_or(ds.treat(i));
    auto cov = [&](std::size_t c) { return ds.covariate(i, c); };
    for (std::size_t j = 0; j < columns_.size(); ++j) out[j] = eval(columns_[j], t, cov);
}

Eigen::RowVectorXd CompiledFormula::row(const IpdDataset& ds, std::size_t i, std::optional<int> treat) const {
    Eigen::RowVectorXd r(static_cast<Eigen::Index>(columns_.size()));
    row(ds, i, treat, std::span<double>(r.data(), columns_.size()));
    return r;
}

Eigen::RowVectorXd CompiledFormula::row(std::span<const double> covariates, int treat) const {
    Eigen::RowVectorXd r(static_cast<Eigen::Index>(columns_.size()));
    auto cov = [&](std::size_t c) {
        if (c >= covariates.size()) throw Error(ErrorCode::DimensionMismatch, "covariate vector too short");
        return covariates[c];
    };
    for (std::size_t j = 0; j < columns_.size(); ++j) r(static_cast<Eigen::Index>(j)) = eval(columns_[j], treat, cov);
    return r;
}

Eigen::MatrixXd CompiledFormula::design(const IpdDataset& ds, std::span<const std::size_t> rows,
                                        std::optional<int> treat) const {
    const auto p = static_cast<Eigen::Index>(columns_.size());
    Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), p);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto i = rows[r];
        const int t = treat.value_or(ds.treat(i));
        auto cov = [&](std::size_t c) { return ds.covariate(i, c); };
        for (Eigen::Index j = 0; j < p; ++j)
            X(static_cast<Eigen::Index>(r), j) = eval(columns_[static_cast<std::size_t>(j)], t, cov);
    }
    return X;
}

}  // namespace casemix
