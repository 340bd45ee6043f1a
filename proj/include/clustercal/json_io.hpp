#pragma once

// JSON serialization of reports and parsing of design metadata files.
// Requires nlohmann/json.

#include <cmath>
#include <cstdio>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "clustercal/calibration.hpp"
#include "clustercal/data_model.hpp"
#include "clustercal/diagnostics.hpp"
#include "clustercal/error.hpp"
#include "clustercal/estimators.hpp"
#include "clustercal/simulation.hpp"
#include "clustercal/working_models.hpp"

namespace clustercal {

using json = nlohmann::ordered_json;

namespace detail {

inline json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json vector_json(const Eigen::VectorXd& v) {
    json a = json::array();
    for (Index k = 0; k < v.size(); ++k) a.push_back(number(v[k]));
    return a;
}

inline json matrix_json(const Eigen::MatrixXd& m) {
    json a = json::array();
    for (Index r = 0; r < m.rows(); ++r) a.push_back(vector_json(m.row(r).transpose()));
    return a;
}

inline Eigen::MatrixXd matrix_from_json(const json& j, const std::string& what) {
    if (!j.is_array()) fail(ErrorCategory::data, errc::parse_error, what + " must be an array of rows");
    const auto rows = static_cast<Index>(j.size());
    Eigen::MatrixXd m(rows, rows);
    for (Index r = 0; r < rows; ++r) {
        const json& row = j[static_cast<std::size_t>(r)];
        if (!row.is_array() || static_cast<Index>(row.size()) != rows)
            fail(ErrorCategory::data, errc::dimension_mismatch, what + " must be square");
        for (Index c = 0; c < rows; ++c) {
            const json& v = row[static_cast<std::size_t>(c)];
            if (!v.is_number()) fail(ErrorCategory::data, errc::parse_error, what + " has a non-numeric entry");
            m(r, c) = v.get<double>();
        }
    }
    return m;
}

} // namespace detail

inline json to_json(const EstimateReport& r) {
    json j;
    j["method"] = std::string(to_string(r.method));
    j["tau_hat"] = detail::number(r.tau_hat);
    j["variance_method"] = std::string(to_string(r.variance_method));
    if (r.variance_method != VarianceMethod::none) {
        j["variance"] = detail::number(r.variance);
        j["se"] = detail::number(std::sqrt(r.variance));
        j["level"] = r.level;
        j["ci_low"] = detail::number(r.ci_low);
        j["ci_high"] = detail::number(r.ci_high);
    }
    json d = json::object();
    for (const auto& [k, v] : r.diagnostics) d[k] = detail::number(v);
    j["diagnostics"] = d;
    j["notes"] = r.notes;
    return j;
}

inline json to_json(const LogisticFit& f) {
    return json{{"coefficients", detail::vector_json(f.coefficients)},
                {"cluster_dummies", f.cluster_dummies},
                {"converged", f.converged},
                {"iterations", f.iterations},
                {"max_abs_score", detail::number(f.max_abs_score)}};
}

inline json to_json(const GlmmFit& f) {
    return json{{"fixed_coefficients", detail::vector_json(f.fixed_coefficients)},
                {"random_sd", detail::number(f.random_sd)},
                {"predicted_effects", detail::vector_json(f.predicted_effects)},
                {"marginal_loglik", detail::number(f.marginal_loglik)},
                {"quadrature_nodes", f.quadrature_nodes},
                {"converged", f.converged},
                {"iterations", f.iterations},
                {"boundary", f.boundary}};
}

inline json to_json(const CalibrationResult& c) {
    return json{{"lambda1", detail::vector_json(c.lambda1)},
                {"lambda2", detail::vector_json(c.lambda2)},
                {"alpha", detail::vector_json(c.alpha.values())},
                {"implied_propensity", detail::vector_json(c.implied_propensity)},
                {"iterations", c.iterations},
                {"residual_norm", detail::number(c.residual_norm)},
                {"converged", c.converged},
                {"weights_below_one", c.weights_below_one},
                {"notes", c.notes}};
}

inline json to_json(const Estimation& e) {
    json j = to_json(e.report);
    json fit = json::object();
    if (e.logistic) fit["logistic"] = to_json(*e.logistic);
    if (e.glmm) fit["glmm"] = to_json(*e.glmm);
    if (e.calibration) fit["calibration"] = to_json(*e.calibration);
    j["fit"] = fit;
    return j;
}

inline json to_json(const BalanceReport& b) {
    json covs = json::array();
    for (std::size_t j = 0; j < b.covariates.size(); ++j) {
        const auto jj = static_cast<Index>(j);
        json per = json::object();
        for (std::size_t i = 0; i < b.clusters.size(); ++i)
            per[b.clusters[i]] = detail::number(b.per_cluster(jj, static_cast<Index>(i)));
        covs.push_back(json{{"covariate", b.covariates[j]}, {"clusters", per}, {"whole_pop", detail::number(b.whole[jj])}});
    }
    return json{{"weights", b.weight_label}, {"covariates", covs}};
}

inline json to_json(const ScenarioConfig& c) {
    return json{{"name", c.name},
                {"outcome", std::string(to_string(c.outcome))},
                {"link", std::string(to_string(c.link))},
                {"gamma0", c.gamma0},
                {"gamma1", c.gamma1},
                {"tau", c.tau},
                {"M", c.M},
                {"m", c.m},
                {"n_e", c.n_e},
                {"reps", c.reps},
                {"seed", c.seed},
                {"level", c.level}};
}

inline json to_json(const SimSummary& s, bool replicates = false) {
    json j;
    j["config"] = to_json(s.config);
    j["replicates"] = s.replicates;
    j["mean_truth"] = detail::number(s.mean_truth);
    j["failures"] = s.failures;
    j["clamped_units"] = s.clamped_units;
    j["dropped_clusters"] = s.dropped_clusters;
    json methods = json::array();
    for (const auto& m : s.methods)
        methods.push_back(json{{"method", std::string(to_string(m.method))},
                               {"bias", detail::number(m.bias)},
                               {"variance", detail::number(m.variance)},
                               {"coverage", detail::number(m.coverage)},
                               {"mean_variance_estimate", detail::number(m.mean_variance_estimate)},
                               {"successes", m.successes},
                               {"failures", m.failures}});
    j["methods"] = methods;
    if (replicates) {
        json reps = json::array();
        for (const auto& r : s.replicate_results) {
            json est = json::object();
            for (Method m : all_methods) {
                const std::size_t k = method_index(m);
                est[std::string(to_string(m))] =
                    r.ok[k] ? json{{"tau_hat", detail::number(r.tau_hat[k])},
                                   {"variance", detail::number(r.variance[k])},
                                   {"covered", r.covered[k]}}
                            : json{{"error", r.error[k]}};
            }
            reps.push_back(json{{"truth", detail::number(r.truth)}, {"n", r.n}, {"estimates", est}});
        }
        j["replicate_results"] = reps;
    }
    return j;
}

/// Design metadata file:
/// {"total_population": N,
///  "clusters": {"<key>": {"pi_i": p, "N_i": n, "joint_second_stage": [[...]]}},
///  "joint_clusters": {"keys": ["<key>", ...], "probs": [[...]]}}
inline SampleDesign parse_design(std::istream& in) {
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        fail(ErrorCategory::data, errc::parse_error, std::string("design file: ") + e.what());
    }
    SampleDesign d;
    try {
        if (j.contains("total_population")) d.total_population = j.at("total_population").get<double>();
        if (j.contains("clusters")) {
            for (const auto& [key, c] : j.at("clusters").items()) {
                ClusterMeta meta;
                if (c.contains("pi_i")) meta.first_stage_prob = c.at("pi_i").get<double>();
                if (c.contains("N_i")) meta.population_size = c.at("N_i").get<double>();
                if (c.contains("joint_second_stage"))
                    meta.joint_second_stage_probs =
                        detail::matrix_from_json(c.at("joint_second_stage"), "cluster " + key + " joint_second_stage");
                d.clusters.emplace(key, std::move(meta));
            }
        }
        if (j.contains("joint_clusters")) {
            const json& jc = j.at("joint_clusters");
            d.joint_cluster_keys = jc.at("keys").get<std::vector<std::string>>();
            d.joint_cluster_probs = detail::matrix_from_json(jc.at("probs"), "joint_clusters.probs");
        }
    } catch (const json::exception& e) {
        fail(ErrorCategory::data, errc::parse_error, std::string("design file: ") + e.what());
    }
    return d;
}

/// Design metadata of a sample in the format read by parse_design.
inline json design_json(const ClusteredSample& s) {
    json j;
    if (s.total_population()) j["total_population"] = *s.total_population();
    json clusters = json::object();
    for (const auto& c : s.clusters()) {
        json cj = json::object();
        if (c.first_stage_prob) cj["pi_i"] = *c.first_stage_prob;
        if (c.population_size) cj["N_i"] = *c.population_size;
        if (c.joint_second_stage_probs) cj["joint_second_stage"] = detail::matrix_json(*c.joint_second_stage_probs);
        clusters[c.key] = cj;
    }
    j["clusters"] = clusters;
    if (s.joint_cluster_probs()) {
        json keys = json::array();
        for (const auto& c : s.clusters()) keys.push_back(c.key);
        j["joint_clusters"] = json{{"keys", keys}, {"probs", detail::matrix_json(*s.joint_cluster_probs())}};
    }
    return j;
}

/// Fixed-width estimate table: method, estimate, ve, confidence interval.
inline std::string format_estimate_table(const std::vector<EstimateReport>& reports) {
    std::ostringstream out;
    char buf[160];
    const double level = reports.empty() ? 0.95 : reports.front().level;
    char ci_head[32];
    std::snprintf(ci_head, sizeof ci_head, "%g%% c.i.", 100.0 * level);
    std::snprintf(buf, sizeof buf, "%-12s%12s%12s  %s\n", "Method", "estimate", "ve", ci_head);
    out << buf;
    for (const auto& r : reports) {
        const std::string name(to_string(r.method));
        if (r.variance_method == VarianceMethod::none) {
            std::snprintf(buf, sizeof buf, "%-12s%12.6g%12s  %s\n", name.c_str(), r.tau_hat, "-", "-");
        } else {
            std::snprintf(buf, sizeof buf, "%-12s%12.6g%12.6g  (%.6g, %.6g)\n", name.c_str(), r.tau_hat,
                          r.variance, r.ci_low, r.ci_high);
        }
        out << buf;
    }
    return out.str();
}

} // namespace clustercal
