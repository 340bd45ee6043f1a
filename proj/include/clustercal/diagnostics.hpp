#pragma once

// Covariate balance: standardized differences of weighted arm means per
// cluster and over the whole sample, scaled by the whole-sample standard
// deviation of each covariate.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clustercal/data_model.hpp"
#include "clustercal/error.hpp"

namespace clustercal {

struct BalanceReport {
    std::string weight_label = "none";
    std::vector<std::string> covariates;
    std::vector<std::string> clusters;
    Eigen::MatrixXd per_cluster; // p x m
    Eigen::VectorXd whole;       // p
};

namespace detail {

inline double arm_difference(const ClusteredSample& s, const Eigen::VectorXd& w, Index j, Index begin, Index count) {
    double s1 = 0, w1 = 0, s0 = 0, w0 = 0;
    for (Index k = begin; k < begin + count; ++k) {
        const double x = s.X()(k, j);
        if (s.treated(k)) {
            s1 += w[k] * x;
            w1 += w[k];
        } else {
            s0 += w[k] * x;
            w0 += w[k];
        }
    }
    return s1 / w1 - s0 / w0;
}

} // namespace detail

/// Standardized differences under the given weights (unweighted when absent).
inline BalanceReport standardized_differences(const ClusteredSample& s, const WeightSet* weights = nullptr,
                                              std::string label = "none") {
    const Index n = s.n(), p = s.p(), m = s.m();
    if (weights && weights->size() != n)
        fail(ErrorCategory::data, errc::dimension_mismatch, "weight vector length differs from sample size");
    if (n < 2) fail(ErrorCategory::numerical, errc::zero_variance, "need at least two units for a standard deviation");
    const Eigen::VectorXd w = weights ? weights->values() : Eigen::VectorXd::Ones(n);
    BalanceReport r;
    r.weight_label = std::move(label);
    r.covariates = s.covariate_names();
    for (const auto& c : s.clusters()) r.clusters.push_back(c.key);
    r.per_cluster.resize(p, m);
    r.whole.resize(p);
    for (Index j = 0; j < p; ++j) {
        const auto col = s.X().col(j);
        const double mean = col.mean();
        const double sd = std::sqrt((col.array() - mean).square().sum() / static_cast<double>(n));
        if (!(sd > 1e-12 * std::max(1.0, std::abs(mean))))
            fail(ErrorCategory::numerical, errc::zero_variance,
                 "covariate " + s.covariate_names()[static_cast<std::size_t>(j)] + " is constant in the sample");
        for (Index i = 0; i < m; ++i) {
            const ClusterInfo& c = s.cluster(i);
            r.per_cluster(j, i) = detail::arm_difference(s, w, j, c.offset, c.size) / sd;
        }
        r.whole[j] = detail::arm_difference(s, w, j, 0, n) / sd;
    }
    return r;
}

/// Table with one row per (covariate, cluster) plus a "Whole Pop" row per
/// covariate and one column per report. Reports must share a sample.
inline std::string format_balance_table(const std::vector<BalanceReport>& reports) {
    if (reports.empty()) return {};
    const BalanceReport& first = reports.front();
    std::size_t key_width = 9;
    for (const auto& k : first.clusters) key_width = std::max(key_width, k.size());
    std::size_t cov_width = 9;
    for (const auto& c : first.covariates) cov_width = std::max(cov_width, c.size());
    std::ostringstream out;
    auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w > s.size() ? w - s.size() : 0, ' '); };
    auto num = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%12.6g", v);
        return std::string(buf);
    };
    out << pad("Covariate", cov_width) << "  " << pad("Cluster", key_width);
    for (const auto& r : reports) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%12s", r.weight_label.c_str());
        out << buf;
    }
    out << '\n';
    for (std::size_t j = 0; j < first.covariates.size(); ++j) {
        for (std::size_t i = 0; i <= first.clusters.size(); ++i) {
            const bool whole = i == first.clusters.size();
            out << pad(i == 0 ? first.covariates[j] : "", cov_width) << "  "
                << pad(whole ? "Whole Pop" : first.clusters[i], key_width);
            for (const auto& r : reports) {
                const auto jj = static_cast<Index>(j);
                out << num(whole ? r.whole[jj] : r.per_cluster(jj, static_cast<Index>(i)));
            }
            out << '\n';
        }
    }
    return out.str();
}

} // namespace clustercal
