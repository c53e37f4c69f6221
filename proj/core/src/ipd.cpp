#include "casemix/ipd.hpp"

#include "casemix/error.hpp"
#include "casemix/textio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <unordered_map>

namespace casemix {

CovariateSchema::CovariateSchema(std::vector<std::string> names, std::vector<CovariateKind> kinds)
    : names_(std::move(names)), kinds_(std::move(kinds)) {
    if (names_.empty()) throw Error(ErrorCode::InvalidSchema, "schema needs at least one covariate");
    if (names_.size() != kinds_.size())
        throw Error(ErrorCode::InvalidSchema, "names and kinds differ in length");
    std::set<std::string> seen;
    for (const auto& n : names_) {
        if (n.empty()) throw Error(ErrorCode::InvalidSchema, "empty covariate name");
        if (n == "study" || n == "treat" || n == "outcome")
            throw Error(ErrorCode::InvalidSchema, "reserved column name used as covariate: " + n);
        if (!seen.insert(n).second) throw Error(ErrorCode::InvalidSchema, "duplicate covariate name: " + n);
    }
}

CovariateSchema::CovariateSchema(std::vector<std::string> names)
    : CovariateSchema(names, std::vector<CovariateKind>(names.size(), CovariateKind::Continuous)) {}

std::optional<std::size_t> CovariateSchema::find(std::string_view name) const {
    for (std::size_t c = 0; c < names_.size(); ++c)
        if (names_[c] == name) return c;
    return std::nullopt;
}

IpdDataset::IpdDataset(CovariateSchema schema, const std::vector<IpdRecord>& records)
    : schema_(std::move(schema)) {
    if (schema_.size() == 0) throw Error(ErrorCode::InvalidSchema, "schema needs at least one covariate");
    if (records.empty()) throw Error(ErrorCode::EmptyDataset, "no records");
    const auto p = static_cast<Eigen::Index>(schema_.size());
    covariates_.resize(static_cast<Eigen::Index>(records.size()), p);
    std::unordered_map<std::string, StudyIndex> index;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (r.treat != 0 && r.treat != 1)
            throw Error(ErrorCode::NonBinaryValue, "treat must be 0 or 1 (row " + std::to_string(i + 1) + ")");
        if (r.outcome != 0 && r.outcome != 1)
            throw Error(ErrorCode::NonBinaryValue, "outcome must be 0 or 1 (row " + std::to_string(i + 1) + ")");
        if (r.covariates.size() != schema_.size())
            throw Error(ErrorCode::DimensionMismatch,
                        "row " + std::to_string(i + 1) + " has " + std::to_string(r.covariates.size()) +
                            " covariates, schema has " + std::to_string(schema_.size()));
        auto [it, inserted] = index.try_emplace(r.study, labels_.size());
        if (inserted) labels_.push_back(r.study);
        study_.push_back(it->second);
        treat_.push_back(static_cast<std::uint8_t>(r.treat));
        outcome_.push_back(static_cast<std::uint8_t>(r.outcome));
        for (Eigen::Index c = 0; c < p; ++c)
            covariates_(static_cast<Eigen::Index>(i), c) = r.covariates[static_cast<std::size_t>(c)];
    }
    validate_and_index();
}

IpdDataset::IpdDataset(CovariateSchema schema, std::vector<std::string> labels,
                       std::vector<StudyIndex> study, std::vector<std::uint8_t> treat,
                       std::vector<std::uint8_t> outcome, Eigen::MatrixXd covariates)
    : schema_(std::move(schema)),
      labels_(std::move(labels)),
      study_(std::move(study)),
      treat_(std::move(treat)),
      outcome_(std::move(outcome)),
      covariates_(std::move(covariates)) {
    if (schema_.size() == 0) throw Error(ErrorCode::InvalidSchema, "schema needs at least one covariate");
    if (study_.empty()) throw Error(ErrorCode::EmptyDataset, "no records");
    const auto n = study_.size();
    if (treat_.size() != n || outcome_.size() != n || static_cast<std::size_t>(covariates_.rows()) != n ||
        static_cast<std::size_t>(covariates_.cols()) != schema_.size())
        throw Error(ErrorCode::DimensionMismatch, "column lengths disagree");
    for (std::size_t i = 0; i < n; ++i) {
        if (study_[i] >= labels_.size()) throw Error(ErrorCode::UnknownStudy, "study index out of range");
        if (treat_[i] > 1 || outcome_[i] > 1) throw Error(ErrorCode::NonBinaryValue, "treat/outcome must be 0 or 1");
    }
    validate_and_index();
}

void IpdDataset::validate_and_index() {
    for (Eigen::Index i = 0; i < covariates_.rows(); ++i) {
        for (Eigen::Index c = 0; c < covariates_.cols(); ++c) {
            const double v = covariates_(i, c);
            if (!std::isfinite(v))
                throw Error(ErrorCode::NonNumericCovariate,
                            "missing or non-finite value for " + schema_.names()[static_cast<std::size_t>(c)]);
            if (schema_.kinds()[static_cast<std::size_t>(c)] == CovariateKind::Binary && v != 0.0 && v != 1.0)
                throw Error(ErrorCode::NonBinaryValue,
                            "binary covariate " + schema_.names()[static_cast<std::size_t>(c)] + " holds " +
                                textio::format_double(v));
        }
    }
    rows_by_study_.assign(labels_.size(), {});
    for (std::size_t i = 0; i < study_.size(); ++i) rows_by_study_[study_[i]].push_back(i);
    for (StudyIndex k = 0; k < labels_.size(); ++k) {
        std::size_t treated = 0;
        for (auto i : rows_by_study_[k]) treated += treat_[i];
        const auto total = rows_by_study_[k].size();
        if (total == 0) throw Error(ErrorCode::EmptyDataset, "study " + labels_[k] + " has no records");
        if (treated == 0 || treated == total)
            throw Error(ErrorCode::SingleArmStudy, "study " + labels_[k] + " lacks a " +
                                                       (treated == 0 ? "treated" : "control") + " arm");
    }
}

const std::string& IpdDataset::study_label(StudyIndex k) const {
    if (k >= labels_.size()) throw Error(ErrorCode::UnknownStudy, "study index " + std::to_string(k));
    return labels_[k];
}

StudyIndex IpdDataset::study_index(std::string_view label) const {
    for (StudyIndex k = 0; k < labels_.size(); ++k)
        if (labels_[k] == label) return k;
    throw Error(ErrorCode::UnknownStudy, "no study labelled '" + std::string(label) + "'");
}

std::span<const std::size_t> IpdDataset::rows_of(StudyIndex k) const {
    if (k >= rows_by_study_.size()) throw Error(ErrorCode::UnknownStudy, "study index " + std::to_string(k));
    return rows_by_study_[k];
}

IpdRecord IpdDataset::record(std::size_t i) const {
    IpdRecord r;
    r.study = labels_[study_[i]];
    r.treat = treat_[i];
    r.outcome = outcome_[i];
    r.covariates.resize(schema_.size());
    for (std::size_t c = 0; c < schema_.size(); ++c) r.covariates[c] = covariate(i, c);
    return r;
}

std::vector<IpdRecord> IpdDataset::records() const {
    std::vector<IpdRecord> out;
    out.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) out.push_back(record(i));
    return out;
}

IpdDataset IpdDataset::subset(std::span<const std::size_t> rows) const {
    std::vector<StudyIndex> study;
    std::vector<std::uint8_t> treat, outcome;
    study.reserve(rows.size());
    treat.reserve(rows.size());
    outcome.reserve(rows.size());
    Eigen::MatrixXd cov(static_cast<Eigen::Index>(rows.size()), covariates_.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto i = rows[r];
        study.push_back(study_[i]);
        treat.push_back(treat_[i]);
        outcome.push_back(outcome_[i]);
        cov.row(static_cast<Eigen::Index>(r)) = covariates_.row(static_cast<Eigen::Index>(i));
    }
    return IpdDataset(schema_, labels_, std::move(study), std::move(treat), std::move(outcome), std::move(cov));
}

void IpdDataset::require_multi_study(std::string_view context) const {
    if (num_studies() < 2)
        throw Error(ErrorCode::Precondition, std::string(context) + " needs at least two studies");
}

ArmCounts arm_counts(const IpdDataset& ds, StudyIndex k) {
    ArmCounts c;
    for (auto i : ds.rows_of(k)) {
        if (ds.treat(i) == 1)
            ++c.n_treated;
        else
            ++c.n_control;
    }
    return c;
}

ArmCounts arm_counts(const IpdDataset& ds, std::string_view label) { return arm_counts(ds, ds.study_index(label)); }

namespace {

bool all_binary(const std::vector<std::vector<double>>& columns, std::size_t c) {
    return std::all_of(columns[c].begin(), columns[c].end(), [](double v) { return v == 0.0 || v == 1.0; });
}

int parse_binary(const std::string& field, std::string_view column, std::size_t line) {
    const auto t = textio::trim(field);
    if (t == "0") return 0;
    if (t == "1") return 1;
    const auto v = textio::parse_double(t);
    if (v && (*v == 0.0 || *v == 1.0)) return static_cast<int>(*v);
    throw Error(ErrorCode::NonBinaryValue,
                std::string(column) + " = '" + field + "' on line " + std::to_string(line) + " is not 0/1");
}

}  // namespace

IpdDataset load_ipd(std::istream& in, const std::optional<CovariateSchema>& schema) {
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::EmptyDataset, "empty input, no header row");
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF &&
        static_cast<unsigned char>(line[1]) == 0xBB && static_cast<unsigned char>(line[2]) == 0xBF)
        line.erase(0, 3);
    auto header = textio::split_csv_line(line);
    for (auto& h : header) h = std::string(textio::trim(h));

    auto column = [&](std::string_view name) -> std::size_t {
        for (std::size_t c = 0; c < header.size(); ++c)
            if (header[c] == name) return c;
        throw Error(ErrorCode::MissingColumn, "required column '" + std::string(name) + "' not in header");
    };
    const auto study_col = column("study");
    const auto treat_col = column("treat");
    const auto outcome_col = column("outcome");

    std::vector<std::size_t> cov_cols;
    std::vector<std::string> cov_names;
    for (std::size_t c = 0; c < header.size(); ++c) {
        if (c == study_col || c == treat_col || c == outcome_col) continue;
        cov_cols.push_back(c);
        cov_names.push_back(header[c]);
    }
    if (schema) {
        for (const auto& name : schema->names())
            if (std::find(cov_names.begin(), cov_names.end(), name) == cov_names.end())
                throw Error(ErrorCode::MissingColumn, "schema covariate '" + name + "' not in header");
        if (cov_names != schema->names())
            throw Error(ErrorCode::InvalidSchema, "header covariates do not match the schema order");
    }
    if (cov_names.empty()) throw Error(ErrorCode::InvalidSchema, "no covariate columns");

    std::vector<IpdRecord> records;
    std::vector<std::vector<double>> columns(cov_cols.size());
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (textio::trim(line).empty()) continue;
        const auto fields = textio::split_csv_line(line);
        if (fields.size() != header.size())
            throw Error(ErrorCode::MissingColumn, "line " + std::to_string(line_no) + " has " +
                                                      std::to_string(fields.size()) + " fields, header has " +
                                                      std::to_string(header.size()));
        IpdRecord r;
        r.study = std::string(textio::trim(fields[study_col]));
        if (r.study.empty()) throw Error(ErrorCode::MissingColumn, "empty study on line " + std::to_string(line_no));
        r.treat = parse_binary(fields[treat_col], "treat", line_no);
        r.outcome = parse_binary(fields[outcome_col], "outcome", line_no);
        r.covariates.reserve(cov_cols.size());
        for (std::size_t c = 0; c < cov_cols.size(); ++c) {
            const auto v = textio::parse_double(fields[cov_cols[c]]);
            if (!v)
                throw Error(ErrorCode::NonNumericCovariate, cov_names[c] + " = '" + fields[cov_cols[c]] +
                                                                "' on line " + std::to_string(line_no));
            r.covariates.push_back(*v);
            columns[c].push_back(*v);
        }
        records.push_back(std::move(r));
    }
    if (records.empty()) throw Error(ErrorCode::EmptyDataset, "header only, no records");

    if (schema) return IpdDataset(*schema, records);
    std::vector<CovariateKind> kinds;
    for (std::size_t c = 0; c < cov_cols.size(); ++c)
        kinds.push_back(all_binary(columns, c) ? CovariateKind::Binary : CovariateKind::Continuous);
    return IpdDataset(CovariateSchema(cov_names, kinds), records);
}

IpdDataset load_ipd_file(const std::string& path, const std::optional<CovariateSchema>& schema) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::EmptyDataset, "cannot open " + path);
    return load_ipd(in, schema);
}

void save_ipd(const IpdDataset& ds, std::ostream& out) {
    out << "study,treat,outcome";
    for (const auto& n : ds.schema().names()) out << ',' << textio::csv_field(n);
    out << '\n';
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out << textio::csv_field(ds.study_label(ds.study(i))) << ',' << ds.treat(i) << ',' << ds.outcome(i);
        for (std::size_t c = 0; c < ds.schema().size(); ++c) out << ',' << textio::format_double(ds.covariate(i, c));
        out << '\n';
    }
}

void save_ipd_file(const IpdDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::InvalidConfig, "cannot write " + path);
    save_ipd(ds, out);
}

}  // namespace casemix
