#pragma once

// Clustered (optionally survey-weighted) samples: typed storage, validation,
// and CSV ingestion/serialization.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <regex>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clustercal/error.hpp"

namespace clustercal {

using Index = Eigen::Index;

/// One observed unit as supplied by the caller.
struct Unit {
    std::string cluster_key;
    std::vector<double> covariates;
    int treatment = 0;
    double outcome = 0.0;
    double design_weight = 1.0;
    std::optional<double> second_stage_prob;
    /// Per-row copy of the cluster's first-stage probability (CSV column pi_i).
    std::optional<double> first_stage_prob;
};

/// Cluster-level design information that does not fit in a row.
struct ClusterMeta {
    std::optional<double> first_stage_prob;
    std::optional<double> population_size;
    /// Joint second-stage inclusion probabilities, in the cluster's row order.
    std::optional<Eigen::MatrixXd> joint_second_stage_probs;
};

struct SampleDesign {
    std::map<std::string, ClusterMeta> clusters;
    std::optional<double> total_population;
    /// Joint first-stage probabilities; rows/columns labelled by joint_cluster_keys.
    std::vector<std::string> joint_cluster_keys;
    std::optional<Eigen::MatrixXd> joint_cluster_probs;
};

struct ClusterInfo {
    std::string key;
    Index offset = 0;
    Index size = 0; // n_i
    std::optional<double> first_stage_prob;
    std::optional<double> population_size;
    std::optional<Eigen::MatrixXd> joint_second_stage_probs;
};

enum class WeightKind { initial, calibrated };

/// Per-unit positive weights (d_ij or alpha_ij).
class WeightSet {
public:
    WeightSet() = default;
    WeightSet(Eigen::VectorXd values, WeightKind kind) : values_(std::move(values)), kind_(kind) {
        for (Index k = 0; k < values_.size(); ++k) {
            if (!(values_[k] > 0.0) || !std::isfinite(values_[k]))
                fail(ErrorCategory::data, errc::non_positive_weight,
                     "weight at unit " + std::to_string(k) + " is not strictly positive");
        }
    }

    const Eigen::VectorXd& values() const noexcept { return values_; }
    WeightKind kind() const noexcept { return kind_; }
    Index size() const noexcept { return values_.size(); }
    double operator[](Index k) const { return values_[k]; }

private:
    Eigen::VectorXd values_;
    WeightKind kind_ = WeightKind::initial;
};

class ClusteredSample;
ClusteredSample validate_sample(std::span<const Unit> rows, const SampleDesign* design,
                                std::vector<std::string> covariate_names);

/// Validated clustered sample. Units are stored contiguously per cluster,
/// clusters ordered by key. Immutable once built.
class ClusteredSample {
public:
    Index n() const noexcept { return y_.size(); }
    Index m() const noexcept { return static_cast<Index>(clusters_.size()); }
    Index p() const noexcept { return X_.cols(); }

    const Eigen::MatrixXd& X() const noexcept { return X_; }
    const Eigen::VectorXd& treatment() const noexcept { return a_; }
    const Eigen::VectorXd& outcome() const noexcept { return y_; }
    const Eigen::VectorXd& design_weight() const noexcept { return w_; }
    const std::optional<Eigen::VectorXd>& second_stage_prob() const noexcept { return pi_ji_; }
    const std::vector<ClusterInfo>& clusters() const noexcept { return clusters_; }
    const ClusterInfo& cluster(Index i) const { return clusters_.at(static_cast<std::size_t>(i)); }
    const std::vector<Index>& cluster_of_unit() const noexcept { return cluster_of_; }
    const std::vector<std::string>& covariate_names() const noexcept { return names_; }
    const std::optional<double>& total_population() const noexcept { return total_population_; }
    const std::optional<Eigen::MatrixXd>& joint_cluster_probs() const noexcept { return joint_cluster_; }

    bool treated(Index k) const { return a_[k] > 0.5; }

    /// True when any design information (weights or probabilities) was supplied.
    bool has_design_info() const noexcept { return has_design_info_; }

    /// True when every quantity the survey plug-in variance needs is present.
    bool supports_survey_variance() const noexcept { return survey_variance_ready_; }

    Unit unit(Index k) const {
        Unit u;
        const auto& c = clusters_[static_cast<std::size_t>(cluster_of_[static_cast<std::size_t>(k)])];
        u.cluster_key = c.key;
        u.covariates.resize(static_cast<std::size_t>(p()));
        for (Index j = 0; j < p(); ++j) u.covariates[static_cast<std::size_t>(j)] = X_(k, j);
        u.treatment = treated(k) ? 1 : 0;
        u.outcome = y_[k];
        u.design_weight = w_[k];
        if (pi_ji_) u.second_stage_prob = (*pi_ji_)[k];
        u.first_stage_prob = c.first_stage_prob;
        return u;
    }

    /// Build a sample from whole clusters drawn (possibly repeatedly) from this one.
    /// Cluster keys become zero-padded draw positions so the draw order is kept.
    /// Joint first-stage probabilities are not carried over.
    ClusteredSample resample_clusters(std::span<const Index> picks) const {
        ClusteredSample out;
        Index total = 0;
        for (Index c : picks) total += cluster(c).size;
        out.X_.resize(total, p());
        out.a_.resize(total);
        out.y_.resize(total);
        out.w_.resize(total);
        if (pi_ji_) out.pi_ji_ = Eigen::VectorXd(total);
        out.names_ = names_;
        out.total_population_ = total_population_;
        out.has_design_info_ = has_design_info_;
        const int width = std::max<int>(6, static_cast<int>(std::to_string(picks.size()).size()));
        Index offset = 0;
        for (std::size_t r = 0; r < picks.size(); ++r) {
            const ClusterInfo& src = cluster(picks[r]);
            ClusterInfo ci = src;
            std::ostringstream key;
            key << 'b' << std::setw(width) << std::setfill('0') << r;
            ci.key = key.str();
            ci.offset = offset;
            out.X_.middleRows(offset, src.size) = X_.middleRows(src.offset, src.size);
            out.a_.segment(offset, src.size) = a_.segment(src.offset, src.size);
            out.y_.segment(offset, src.size) = y_.segment(src.offset, src.size);
            out.w_.segment(offset, src.size) = w_.segment(src.offset, src.size);
            if (pi_ji_) out.pi_ji_->segment(offset, src.size) = pi_ji_->segment(src.offset, src.size);
            for (Index k = 0; k < src.size; ++k) out.cluster_of_.push_back(static_cast<Index>(r));
            out.clusters_.push_back(std::move(ci));
            offset += src.size;
        }
        out.survey_variance_ready_ = false;
        return out;
    }

private:
    friend ClusteredSample validate_sample(std::span<const Unit>, const SampleDesign*,
                                           std::vector<std::string>);

    Eigen::MatrixXd X_;
    Eigen::VectorXd a_;
    Eigen::VectorXd y_;
    Eigen::VectorXd w_;
    std::optional<Eigen::VectorXd> pi_ji_;
    std::vector<ClusterInfo> clusters_;
    std::vector<Index> cluster_of_;
    std::vector<std::string> names_;
    std::optional<double> total_population_;
    std::optional<Eigen::MatrixXd> joint_cluster_;
    bool has_design_info_ = false;
    bool survey_variance_ready_ = false;
};

namespace detail {

inline bool is_probability(double v) { return std::isfinite(v) && v > 0.0 && v <= 1.0; }

inline void check_probability(double v, const std::string& what) {
    if (!is_probability(v))
        fail(ErrorCategory::data, errc::invalid_probability, what + " must lie in (0, 1]");
}

inline std::vector<std::string> default_covariate_names(std::size_t p) {
    std::vector<std::string> out;
    for (std::size_t j = 0; j < p; ++j) out.push_back("x" + std::to_string(j + 1));
    return out;
}

} // namespace detail

/// Validate raw unit records and assemble a ClusteredSample.
inline ClusteredSample validate_sample(std::span<const Unit> rows, const SampleDesign* design = nullptr,
                                       std::vector<std::string> covariate_names = {}) {
    if (rows.empty()) fail(ErrorCategory::data, errc::empty_input, "no unit records supplied");

    const std::size_t p = rows.front().covariates.size();
    if (covariate_names.empty()) covariate_names = detail::default_covariate_names(p);
    if (covariate_names.size() != p)
        fail(ErrorCategory::data, errc::dimension_mismatch, "covariate name count does not match p");

    bool any_pi_ji = false;
    bool all_pi_ji = true;
    bool any_design = false;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const Unit& u = rows[r];
        const std::string where = "row " + std::to_string(r + 1);
        if (u.covariates.size() != p)
            fail(ErrorCategory::data, errc::dimension_mismatch,
                 where + ": expected " + std::to_string(p) + " covariates, got " +
                     std::to_string(u.covariates.size()));
        if (u.treatment != 0 && u.treatment != 1)
            fail(ErrorCategory::data, errc::invalid_treatment, where + ": treatment must be 0 or 1");
        for (double x : u.covariates)
            if (!std::isfinite(x)) fail(ErrorCategory::data, errc::non_finite, where + ": non-finite covariate");
        if (!std::isfinite(u.outcome)) fail(ErrorCategory::data, errc::non_finite, where + ": non-finite outcome");
        if (!(u.design_weight > 0.0) || !std::isfinite(u.design_weight))
            fail(ErrorCategory::data, errc::non_positive_weight, where + ": design weight must be positive");
        if (u.second_stage_prob) detail::check_probability(*u.second_stage_prob, where + ": pi_ji");
        if (u.first_stage_prob) detail::check_probability(*u.first_stage_prob, where + ": pi_i");
        any_pi_ji = any_pi_ji || u.second_stage_prob.has_value();
        all_pi_ji = all_pi_ji && u.second_stage_prob.has_value();
        any_design = any_design || u.design_weight != 1.0 || u.second_stage_prob || u.first_stage_prob;
    }
    if (any_pi_ji && !all_pi_ji)
        fail(ErrorCategory::data, errc::invalid_probability, "pi_ji must be given for every unit or none");

    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t r = 0; r < rows.size(); ++r) groups[rows[r].cluster_key].push_back(r);

    ClusteredSample s;
    const auto n = static_cast<Index>(rows.size());
    s.X_.resize(n, static_cast<Index>(p));
    s.a_.resize(n);
    s.y_.resize(n);
    s.w_.resize(n);
    if (all_pi_ji) s.pi_ji_ = Eigen::VectorXd(n);
    s.names_ = std::move(covariate_names);

    Index offset = 0;
    for (const auto& [key, members] : groups) {
        ClusterInfo ci;
        ci.key = key;
        ci.offset = offset;
        ci.size = static_cast<Index>(members.size());
        int n_treated = 0;
        for (std::size_t r : members) {
            const Unit& u = rows[r];
            for (std::size_t j = 0; j < p; ++j) s.X_(offset, static_cast<Index>(j)) = u.covariates[j];
            s.a_[offset] = u.treatment;
            s.y_[offset] = u.outcome;
            s.w_[offset] = u.design_weight;
            if (all_pi_ji) (*s.pi_ji_)[offset] = *u.second_stage_prob;
            if (u.first_stage_prob) {
                if (ci.first_stage_prob && *ci.first_stage_prob != *u.first_stage_prob)
                    fail(ErrorCategory::data, errc::inconsistent_cluster,
                         "cluster " + key + ": pi_i differs between rows");
                ci.first_stage_prob = u.first_stage_prob;
            }
            n_treated += u.treatment;
            s.cluster_of_.push_back(static_cast<Index>(s.clusters_.size()));
            ++offset;
        }
        if (n_treated == 0 || n_treated == ci.size)
            fail(ErrorCategory::data, errc::one_arm_cluster,
                 "cluster " + key + " has no " + (n_treated == 0 ? "treated" : "control") + " unit");

        if (design) {
            auto it = design->clusters.find(key);
            if (it != design->clusters.end()) {
                const ClusterMeta& meta = it->second;
                if (meta.first_stage_prob) {
                    detail::check_probability(*meta.first_stage_prob, "cluster " + key + ": pi_i");
                    if (ci.first_stage_prob && *ci.first_stage_prob != *meta.first_stage_prob)
                        fail(ErrorCategory::data, errc::inconsistent_cluster,
                             "cluster " + key + ": pi_i disagrees with design metadata");
                    ci.first_stage_prob = meta.first_stage_prob;
                }
                if (meta.population_size) {
                    if (!(*meta.population_size >= static_cast<double>(ci.size)))
                        fail(ErrorCategory::data, errc::inconsistent_cluster,
                             "cluster " + key + ": population size smaller than sample size");
                    ci.population_size = meta.population_size;
                }
                if (meta.joint_second_stage_probs) {
                    const Eigen::MatrixXd& J = *meta.joint_second_stage_probs;
                    if (J.rows() != ci.size || J.cols() != ci.size)
                        fail(ErrorCategory::data, errc::dimension_mismatch,
                             "cluster " + key + ": joint second-stage matrix has wrong size");
                    if (!all_pi_ji)
                        fail(ErrorCategory::data, errc::invalid_probability,
                             "cluster " + key + ": joint second-stage probabilities need pi_ji");
                    for (Index k = 0; k < ci.size; ++k) {
                        if (std::abs(J(k, k) - (*s.pi_ji_)[ci.offset + k]) > 1e-12)
                            fail(ErrorCategory::data, errc::invalid_probability,
                                 "cluster " + key + ": joint matrix diagonal differs from pi_ji");
                        for (Index l = 0; l < ci.size; ++l) {
                            if (!(J(k, l) > 0.0 && J(k, l) <= 1.0) || std::abs(J(k, l) - J(l, k)) > 1e-12)
                                fail(ErrorCategory::data, errc::invalid_probability,
                                     "cluster " + key + ": joint matrix must be symmetric with entries in (0,1]");
                        }
                    }
                    ci.joint_second_stage_probs = J;
                }
            }
        }
        s.clusters_.push_back(std::move(ci));
    }

    if (design) {
        if (design->total_population) {
            if (!(*design->total_population > 0.0))
                fail(ErrorCategory::data, errc::inconsistent_cluster, "total population must be positive");
            s.total_population_ = design->total_population;
        }
        if (design->joint_cluster_probs) {
            const Eigen::MatrixXd& J = *design->joint_cluster_probs;
            const auto& keys = design->joint_cluster_keys;
            if (J.rows() != static_cast<Index>(keys.size()) || J.cols() != J.rows())
                fail(ErrorCategory::data, errc::dimension_mismatch, "joint cluster matrix does not match its keys");
            std::map<std::string, Index> pos;
            for (std::size_t k = 0; k < keys.size(); ++k) pos[keys[k]] = static_cast<Index>(k);
            const Index m = s.m();
            Eigen::MatrixXd out(m, m);
            for (Index i = 0; i < m; ++i) {
                auto pi = pos.find(s.clusters_[static_cast<std::size_t>(i)].key);
                if (pi == pos.end())
                    fail(ErrorCategory::data, errc::missing_column,
                         "joint cluster matrix lacks cluster " + s.clusters_[static_cast<std::size_t>(i)].key);
                for (Index j = 0; j < m; ++j) {
                    auto pj = pos.find(s.clusters_[static_cast<std::size_t>(j)].key);
                    if (pj == pos.end())
                        fail(ErrorCategory::data, errc::missing_column, "joint cluster matrix incomplete");
                    out(i, j) = J(pi->second, pj->second);
                    if (!(out(i, j) > 0.0 && out(i, j) <= 1.0))
                        fail(ErrorCategory::data, errc::invalid_probability,
                             "joint cluster probabilities must lie in (0, 1]");
                }
            }
            for (Index i = 0; i < m; ++i) {
                const auto& fp = s.clusters_[static_cast<std::size_t>(i)].first_stage_prob;
                if (fp && std::abs(out(i, i) - *fp) > 1e-12)
                    fail(ErrorCategory::data, errc::invalid_probability,
                         "joint cluster matrix diagonal differs from pi_i");
            }
            s.joint_cluster_ = std::move(out);
        }
        any_design = any_design || design->total_population.has_value() || !design->clusters.empty();
    }

    s.has_design_info_ = any_design;
    bool ready = all_pi_ji && s.joint_cluster_.has_value();
    for (const auto& c : s.clusters_)
        ready = ready && c.first_stage_prob.has_value() && c.joint_second_stage_probs.has_value();
    s.survey_variance_ready_ = ready;
    return s;
}

/// Column names used to read a CSV file. Empty covariate list means
/// "every column named x<digits>, in header order".
struct CsvSchema {
    std::string cluster = "cluster";
    std::string treatment = "a";
    std::string outcome = "y";
    std::vector<std::string> covariates;
    std::string weight = "w";
    std::string first_stage_prob = "pi_i";
    std::string second_stage_prob = "pi_ji";
};

namespace detail {

// RFC 4180 style split; quotes may wrap fields and "" escapes a quote.
inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t row) {
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char ch = line[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(ch);
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            out.push_back(std::move(field));
            field.clear();
        } else {
            field.push_back(ch);
        }
    }
    if (quoted) fail(ErrorCategory::data, errc::parse_error, "row " + std::to_string(row) + ": unterminated quote");
    out.push_back(std::move(field));
    return out;
}

inline double parse_double(const std::string& text, std::size_t row, const std::string& column) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(text, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    while (used < text.size() && std::isspace(static_cast<unsigned char>(text[used]))) ++used;
    if (text.empty() || used != text.size() || !std::isfinite(v))
        fail(ErrorCategory::data, errc::parse_error,
             "row " + std::to_string(row) + ": column '" + column + "' is not a number: '" + text + "'");
    return v;
}

inline std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"') out.push_back('"');
        out.push_back(ch);
    }
    out.push_back('"');
    return out;
}

} // namespace detail

/// Parse CSV text into unit records. Row numbers in errors count data rows from 1.
inline std::vector<Unit> read_csv_rows(std::istream& in, const CsvSchema& schema,
                                       std::vector<std::string>* covariate_names = nullptr) {
    std::string line;
    if (!std::getline(in, line)) fail(ErrorCategory::data, errc::empty_input, "missing header row");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    const std::vector<std::string> header = detail::split_csv_line(line, 0);

    auto find = [&](const std::string& name) -> std::optional<std::size_t> {
        for (std::size_t k = 0; k < header.size(); ++k)
            if (header[k] == name) return k;
        return std::nullopt;
    };
    auto require = [&](const std::string& name) {
        auto pos = find(name);
        if (!pos) fail(ErrorCategory::data, errc::missing_column, "missing column '" + name + "'");
        return *pos;
    };

    const std::size_t c_cluster = require(schema.cluster);
    const std::size_t c_treat = require(schema.treatment);
    const std::size_t c_outcome = require(schema.outcome);
    std::vector<std::size_t> c_cov;
    std::vector<std::string> names;
    if (schema.covariates.empty()) {
        static const std::regex xcol("x[0-9]+");
        for (std::size_t k = 0; k < header.size(); ++k)
            if (std::regex_match(header[k], xcol)) {
                c_cov.push_back(k);
                names.push_back(header[k]);
            }
    } else {
        for (const auto& name : schema.covariates) {
            c_cov.push_back(require(name));
            names.push_back(name);
        }
    }
    const auto c_w = find(schema.weight);
    const auto c_pi = find(schema.first_stage_prob);
    const auto c_pij = find(schema.second_stage_prob);

    std::vector<Unit> rows;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        ++row;
        auto f = detail::split_csv_line(line, row);
        if (f.size() != header.size())
            fail(ErrorCategory::data, errc::parse_error,
                 "row " + std::to_string(row) + ": expected " + std::to_string(header.size()) + " fields, got " +
                     std::to_string(f.size()));
        Unit u;
        u.cluster_key = f[c_cluster];
        const std::string& a = f[c_treat];
        if (a == "0" || a == "0.0")
            u.treatment = 0;
        else if (a == "1" || a == "1.0")
            u.treatment = 1;
        else
            fail(ErrorCategory::data, errc::parse_error,
                 "row " + std::to_string(row) + ": treatment must be 0 or 1, got '" + a + "'");
        u.outcome = detail::parse_double(f[c_outcome], row, schema.outcome);
        for (std::size_t k = 0; k < c_cov.size(); ++k)
            u.covariates.push_back(detail::parse_double(f[c_cov[k]], row, names[k]));
        if (c_w && !f[*c_w].empty()) u.design_weight = detail::parse_double(f[*c_w], row, schema.weight);
        if (c_pi && !f[*c_pi].empty())
            u.first_stage_prob = detail::parse_double(f[*c_pi], row, schema.first_stage_prob);
        if (c_pij && !f[*c_pij].empty())
            u.second_stage_prob = detail::parse_double(f[*c_pij], row, schema.second_stage_prob);
        rows.push_back(std::move(u));
    }
    if (covariate_names) *covariate_names = std::move(names);
    return rows;
}

inline ClusteredSample load_csv(std::istream& in, const CsvSchema& schema = {},
                                const SampleDesign* design = nullptr) {
    std::vector<std::string> names;
    auto rows = read_csv_rows(in, schema, &names);
    return validate_sample(rows, design, std::move(names));
}

/// Write the canonical column set. Optional columns appear only when the
/// sample carries them. Values use round-trip precision.
inline void write_csv(std::ostream& out, const ClusteredSample& s) {
    const bool with_w = s.has_design_info();
    bool with_pi = false;
    for (const auto& c : s.clusters()) with_pi = with_pi || c.first_stage_prob.has_value();
    const bool with_pij = s.second_stage_prob().has_value();

    const auto old_precision = out.precision(std::numeric_limits<double>::max_digits10);
    out << "cluster,a,y";
    for (const auto& name : s.covariate_names()) out << ',' << detail::csv_quote(name);
    if (with_w) out << ",w";
    if (with_pi) out << ",pi_i";
    if (with_pij) out << ",pi_ji";
    out << '\n';
    for (Index k = 0; k < s.n(); ++k) {
        const ClusterInfo& c = s.cluster(s.cluster_of_unit()[static_cast<std::size_t>(k)]);
        out << detail::csv_quote(c.key) << ',' << (s.treated(k) ? 1 : 0) << ',' << s.outcome()[k];
        for (Index j = 0; j < s.p(); ++j) out << ',' << s.X()(k, j);
        if (with_w) out << ',' << s.design_weight()[k];
        if (with_pi) {
            out << ',';
            if (c.first_stage_prob) out << *c.first_stage_prob;
        }
        if (with_pij) out << ',' << (*s.second_stage_prob())[k];
        out << '\n';
    }
    out.precision(old_precision);
}

} // namespace clustercal
