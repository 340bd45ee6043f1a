#pragma once

// Average treatment effect estimators (simple, fixed-effects IPTW,
// random-effects IPTW, calibrated), linearization ("plug-in") variances for
// plain clustered and two-stage survey samples, the cluster bootstrap, and
// Wald intervals.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "clustercal/calibration.hpp"
#include "clustercal/data_model.hpp"
#include "clustercal/error.hpp"
#include "clustercal/parallel.hpp"
#include "clustercal/rng.hpp"
#include "clustercal/working_models.hpp"

namespace clustercal {

enum class Method { simple, fixed, random, calibration };
enum class VarianceMethod { plugin, bootstrap, none };

inline std::string_view to_string(Method m) {
    switch (m) {
    case Method::simple: return "simple";
    case Method::fixed: return "fixed";
    case Method::random: return "random";
    case Method::calibration: return "calibration";
    }
    return "?";
}

inline std::string_view to_string(VarianceMethod v) {
    switch (v) {
    case VarianceMethod::plugin: return "plugin";
    case VarianceMethod::bootstrap: return "bootstrap";
    case VarianceMethod::none: return "none";
    }
    return "?";
}

inline std::optional<Method> parse_method(std::string_view s) {
    if (s == "simple") return Method::simple;
    if (s == "fixed") return Method::fixed;
    if (s == "random") return Method::random;
    if (s == "calibration") return Method::calibration;
    return std::nullopt;
}

inline constexpr Method all_methods[] = {Method::simple, Method::fixed, Method::random, Method::calibration};

/// Standard normal quantile: Acklam's rational approximation followed by one
/// Halley step against erfc, giving close to full double accuracy.
inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0))
        fail(ErrorCategory::config, errc::est_config, "normal quantile needs p in (0, 1)");
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                   1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                   6.680131188771972e+01, -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                   -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                   3.754408661907416e+00};
    constexpr double p_low = 0.02425;
    double x = 0.0;
    if (p < p_low) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - p_low) {
        const double q = p - 0.5;
        const double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log1p(-p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    const double e = 0.5 * std::erfc(-x / std::numbers::sqrt2) - p;
    const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
    return x - u / (1.0 + 0.5 * x * u);
}

/// Wald interval tau_hat -/+ z_{(1+level)/2} sqrt(variance).
inline std::pair<double, double> confidence_interval(double tau_hat, double variance, double level) {
    if (!(variance >= 0.0)) fail(ErrorCategory::config, errc::est_config, "variance must be non-negative");
    if (!(level > 0.0 && level < 1.0)) fail(ErrorCategory::config, errc::est_config, "level must lie in (0, 1)");
    const double half = normal_quantile(0.5 * (1.0 + level)) * std::sqrt(variance);
    return {tau_hat - half, tau_hat + half};
}

struct EstimateReport {
    Method method = Method::calibration;
    double tau_hat = 0.0;
    double variance = std::numeric_limits<double>::quiet_NaN();
    double ci_low = std::numeric_limits<double>::quiet_NaN();
    double ci_high = std::numeric_limits<double>::quiet_NaN();
    double level = 0.95;
    VarianceMethod variance_method = VarianceMethod::none;
    std::map<std::string, double> diagnostics;
    std::vector<std::string> notes;

    void attach_variance(double v, VarianceMethod how, double lvl) {
        variance = v;
        variance_method = how;
        level = lvl;
        std::tie(ci_low, ci_high) = confidence_interval(tau_hat, v, lvl);
    }
};

struct VarianceComponents {
    Eigen::VectorXd B1;
    Eigen::VectorXd B2;
    Eigen::VectorXd tau_ij;
    Eigen::VectorXd tau_i;
    Eigen::VectorXd V_i;
};

namespace detail {

inline double normalizer(const ClusteredSample& s, bool survey) {
    if (!survey) return static_cast<double>(s.n());
    return s.total_population() ? *s.total_population() : s.design_weight().sum();
}

inline Eigen::VectorXd unit_weights(const ClusteredSample& s, bool survey) {
    return survey ? Eigen::VectorXd(s.design_weight()) : Eigen::VectorXd::Ones(s.n());
}

} // namespace detail

/// Form of the unadjusted estimator.
///   total: N^-1 sum w {A Y - (1-A) Y}, the weighting estimator with unit
///          weights (no propensity adjustment).
///   ratio: design-weighted mean of treated minus that of controls (Hajek).
enum class SimpleForm { total, ratio };

inline std::optional<SimpleForm> parse_simple_form(std::string_view s) {
    if (s == "total") return SimpleForm::total;
    if (s == "ratio") return SimpleForm::ratio;
    return std::nullopt;
}

inline EstimateReport tau_simple(const ClusteredSample& s, bool survey = false, SimpleForm form = SimpleForm::total) {
    const Eigen::VectorXd w = detail::unit_weights(s, survey);
    double s1 = 0, w1 = 0, s0 = 0, w0 = 0;
    for (Index k = 0; k < s.n(); ++k) {
        if (s.treated(k)) {
            s1 += w[k] * s.outcome()[k];
            w1 += w[k];
        } else {
            s0 += w[k] * s.outcome()[k];
            w0 += w[k];
        }
    }
    EstimateReport r;
    r.method = Method::simple;
    r.tau_hat = form == SimpleForm::ratio ? s1 / w1 - s0 / w0 : (s1 - s0) / detail::normalizer(s, survey);
    return r;
}

/// IPTW estimator with given propensities; N^-1 sum w {AY/e - (1-A)Y/(1-e)}.
inline EstimateReport tau_iptw(const ClusteredSample& s, const Eigen::VectorXd& e, bool survey = false,
                               Method label = Method::fixed) {
    if (e.size() != s.n()) fail(ErrorCategory::data, errc::wm_dimension, "propensity vector has wrong length");
    const Eigen::VectorXd w = detail::unit_weights(s, survey);
    double total = 0.0;
    for (Index k = 0; k < s.n(); ++k) {
        if (!(e[k] > 0.0 && e[k] < 1.0))
            fail(ErrorCategory::numerical, errc::est_probability,
                 "propensity at unit " + std::to_string(k) + " is outside (0, 1)");
        const double y = s.outcome()[k];
        total += w[k] * (s.treated(k) ? y / e[k] : -y / (1.0 - e[k]));
    }
    EstimateReport r;
    r.method = label;
    r.tau_hat = total / detail::normalizer(s, survey);
    return r;
}

/// Calibrated estimator N^-1 sum w alpha {A Y - (1-A) Y}.
inline EstimateReport tau_calibrated(const ClusteredSample& s, const CalibrationResult& cal) {
    if (!cal.converged)
        fail(ErrorCategory::numerical, errc::cal_not_converged, "calibration result is not converged");
    if (cal.alpha.size() != s.n()) fail(ErrorCategory::data, errc::cal_dimension, "calibration does not match sample");
    const Eigen::VectorXd& w = cal.targets.unit_weight;
    double total = 0.0;
    for (Index k = 0; k < s.n(); ++k) {
        const double v = w[k] * cal.alpha[k] * s.outcome()[k];
        total += s.treated(k) ? v : -v;
    }
    EstimateReport r;
    r.method = Method::calibration;
    r.tau_hat = total / cal.targets.normalizer;
    r.diagnostics["iterations"] = cal.iterations;
    r.diagnostics["residual_norm"] = cal.residual_norm;
    r.diagnostics["weights_below_one"] = static_cast<double>(cal.weights_below_one);
    r.notes = cal.notes;
    return r;
}

/// Variance of N^-1 sum w_ij phi_ij from per-unit linearized values phi.
///
/// Plain mode: n^-1 { (m-1)^-1 sum_i (tbar_i - tau)^2 + m^-1 sum_i V_i }, with
/// tbar_i the cluster mean of phi and V_i its within-cluster sample variance.
/// Survey mode: the two-stage Horvitz-Thompson form with joint inclusion
/// probabilities at both stages.
inline double linearized_variance(const ClusteredSample& s, const Eigen::VectorXd& phi, double tau_hat, bool survey,
                                  Eigen::VectorXd* tau_i_out = nullptr, Eigen::VectorXd* V_i_out = nullptr) {
    const Index m = s.m();
    Eigen::VectorXd tau_i(m), V_i(m);
    double variance = 0.0;
    if (!survey) {
        if (m < 2) fail(ErrorCategory::numerical, errc::singular_moment, "plug-in variance needs at least two clusters");
        for (Index i = 0; i < m; ++i) {
            const ClusterInfo& c = s.cluster(i);
            const auto seg = phi.segment(c.offset, c.size);
            tau_i[i] = seg.mean();
            V_i[i] = c.size > 1 ? (seg.array() - tau_i[i]).square().sum() / static_cast<double>(c.size - 1) : 0.0;
        }
        const double between = (tau_i.array() - tau_hat).square().sum() / static_cast<double>(m - 1);
        const double within = V_i.mean();
        variance = (between + within) / static_cast<double>(s.n());
    } else {
        if (!s.supports_survey_variance())
            fail(ErrorCategory::data, errc::missing_design_info,
                 "survey plug-in variance needs pi_i, pi_j|i and joint inclusion probabilities at both stages");
        const Eigen::VectorXd& pij = *s.second_stage_prob();
        const Eigen::MatrixXd& Pc = *s.joint_cluster_probs();
        Eigen::VectorXd pi(m);
        for (Index i = 0; i < m; ++i) {
            const ClusterInfo& c = s.cluster(i);
            pi[i] = *c.first_stage_prob;
            const Eigen::MatrixXd& J = *c.joint_second_stage_probs;
            const Eigen::VectorXd pk = pij.segment(c.offset, c.size);
            const Eigen::VectorXd ek = phi.segment(c.offset, c.size).cwiseQuotient(pk);
            tau_i[i] = ek.sum();
            double v = 0.0;
            for (Index k = 0; k < c.size; ++k)
                for (Index l = 0; l < c.size; ++l) v += (J(k, l) - pk[k] * pk[l]) / J(k, l) * ek[k] * ek[l];
            V_i[i] = v;
        }
        const Eigen::VectorXd ei = tau_i.cwiseQuotient(pi);
        double first = 0.0;
        for (Index i = 0; i < m; ++i)
            for (Index j = 0; j < m; ++j) first += (Pc(i, j) - pi[i] * pi[j]) / Pc(i, j) * ei[i] * ei[j];
        double second = 0.0;
        for (Index i = 0; i < m; ++i) second += V_i[i] / pi[i];
        const double N = detail::normalizer(s, true);
        variance = (first + second) / (N * N);
    }
    if (tau_i_out) *tau_i_out = tau_i;
    if (V_i_out) *V_i_out = V_i;
    return std::max(variance, 0.0);
}

/// Plug-in variance of the calibrated estimator via the linearized values
/// tau_ij = alpha {A (Y - B1'X) - (1-A)(Y - B2'X)} + (B1 - B2)'X.
inline std::pair<VarianceComponents, double> plugin_variance(const ClusteredSample& s, const CalibrationResult& cal,
                                                             bool survey) {
    if (!cal.converged)
        fail(ErrorCategory::numerical, errc::cal_not_converged, "calibration result is not converged");
    const Index p = s.p();
    const Eigen::VectorXd w = detail::unit_weights(s, survey);
    Eigen::MatrixXd M1 = Eigen::MatrixXd::Zero(p, p), M2 = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd r1 = Eigen::VectorXd::Zero(p), r2 = Eigen::VectorXd::Zero(p);
    for (Index k = 0; k < s.n(); ++k) {
        const double ni = static_cast<double>(s.cluster(s.cluster_of_unit()[static_cast<std::size_t>(k)]).size);
        const double a = cal.alpha[k];
        const double c = w[k] * a * (1.0 - a / ni);
        const Eigen::VectorXd x = s.X().row(k).transpose();
        if (s.treated(k)) {
            M1.noalias() += c * x * x.transpose();
            r1 += c * s.outcome()[k] * x;
        } else {
            M2.noalias() += c * x * x.transpose();
            r2 += c * s.outcome()[k] * x;
        }
    }
    auto solve = [&](const Eigen::MatrixXd& M, const Eigen::VectorXd& r, const char* arm) {
        Eigen::FullPivLU<Eigen::MatrixXd> lu(M);
        lu.setThreshold(1e-12);
        if (!lu.isInvertible())
            fail(ErrorCategory::numerical, errc::singular_moment,
                 std::string("weighted moment matrix of the ") + arm + " arm is singular");
        return Eigen::VectorXd(lu.solve(r));
    };
    VarianceComponents vc;
    vc.B1 = solve(M1, r1, "treated");
    vc.B2 = solve(M2, r2, "control");
    vc.tau_ij.resize(s.n());
    for (Index k = 0; k < s.n(); ++k) {
        const Eigen::VectorXd x = s.X().row(k).transpose();
        const double y = s.outcome()[k];
        const double core = s.treated(k) ? (y - vc.B1.dot(x)) : -(y - vc.B2.dot(x));
        vc.tau_ij[k] = cal.alpha[k] * core + (vc.B1 - vc.B2).dot(x);
    }
    const double tau_hat = tau_calibrated(s, cal).tau_hat;
    const double v = linearized_variance(s, vc.tau_ij, tau_hat, survey, &vc.tau_i, &vc.V_i);
    return {std::move(vc), v};
}

/// Linearized values for the simple and IPTW estimators (propensities held fixed).
inline Eigen::VectorXd simple_contributions(const ClusteredSample& s, bool survey, SimpleForm form = SimpleForm::total) {
    Eigen::VectorXd phi(s.n());
    if (form == SimpleForm::total) {
        for (Index k = 0; k < s.n(); ++k) phi[k] = s.treated(k) ? s.outcome()[k] : -s.outcome()[k];
        return phi;
    }
    const Eigen::VectorXd w = detail::unit_weights(s, survey);
    double s1 = 0, w1 = 0, s0 = 0, w0 = 0;
    for (Index k = 0; k < s.n(); ++k) {
        (s.treated(k) ? s1 : s0) += w[k] * s.outcome()[k];
        (s.treated(k) ? w1 : w0) += w[k];
    }
    const double r1 = s1 / w1, r0 = s0 / w0, N = detail::normalizer(s, survey);
    for (Index k = 0; k < s.n(); ++k) {
        const double y = s.outcome()[k];
        phi[k] = s.treated(k) ? N / w1 * (y - r1) : -N / w0 * (y - r0);
        if (!survey) phi[k] += r1 - r0;
    }
    return phi;
}

inline Eigen::VectorXd iptw_contributions(const ClusteredSample& s, const Eigen::VectorXd& e) {
    Eigen::VectorXd phi(s.n());
    for (Index k = 0; k < s.n(); ++k) {
        const double y = s.outcome()[k];
        phi[k] = s.treated(k) ? y / e[k] : -y / (1.0 - e[k]);
    }
    return phi;
}

struct PipelineOptions {
    bool survey = false;
    SimpleForm simple_form = SimpleForm::total;
    SolverOptions solver;
    GlmmOptions glmm;
};

/// Everything produced by one run of a method on one sample.
struct Estimation {
    EstimateReport report;
    std::optional<LogisticFit> logistic;
    std::optional<GlmmFit> glmm;
    std::optional<CalibrationResult> calibration;
    Eigen::VectorXd propensity;    // fitted e_ij (fixed, random) or implied by alpha (calibration)
    Eigen::VectorXd contributions; // linearized per-unit values
};

/// Working fit (if any) and point estimate for one method. No variance.
inline Estimation run_method(const ClusteredSample& s, Method method, const PipelineOptions& opt = {}) {
    Estimation est;
    const Eigen::VectorXd w = s.design_weight();
    switch (method) {
    case Method::simple:
        est.report = tau_simple(s, opt.survey, opt.simple_form);
        break;
    case Method::fixed: {
        est.logistic = fit_logistic(s, true, opt.survey ? &w : nullptr);
        const Eigen::VectorXd e = predict_propensity(*est.logistic, s);
        est.propensity = e;
        est.report = tau_iptw(s, e, opt.survey, Method::fixed);
        est.report.diagnostics["iterations"] = est.logistic->iterations;
        est.contributions = iptw_contributions(s, e);
        break;
    }
    case Method::random: {
        est.glmm = fit_random_intercept_logistic(s, opt.glmm);
        const Eigen::VectorXd e = predict_propensity(*est.glmm, s);
        est.propensity = e;
        est.report = tau_iptw(s, e, opt.survey, Method::random);
        est.report.diagnostics["random_sd"] = est.glmm->random_sd;
        est.report.diagnostics["iterations"] = est.glmm->iterations;
        if (est.glmm->boundary) est.report.notes.push_back("boundary: random-intercept sd estimated at 0");
        est.contributions = iptw_contributions(s, e);
        break;
    }
    case Method::calibration: {
        const LogisticFit working = fit_logistic(s, false, opt.survey ? &w : nullptr);
        est.logistic = working;
        std::vector<std::string> notes;
        const WeightSet d = initial_weights(predict_propensity(working, s), s, &notes);
        est.calibration = solve_calibration(s, d, opt.solver, opt.survey);
        est.report = tau_calibrated(s, *est.calibration);
        est.propensity = est.calibration->implied_propensity;
        est.report.notes.insert(est.report.notes.begin(), notes.begin(), notes.end());
        break;
    }
    }
    if (method == Method::simple) est.contributions = simple_contributions(s, opt.survey, opt.simple_form);
    return est;
}

/// Effective unit weights of a fitted method: design weight times the
/// inverse-propensity or calibrated weight. Unit design weights when the
/// method has no propensity model.
inline WeightSet balancing_weights(const ClusteredSample& s, const Estimation& est, bool survey) {
    Eigen::VectorXd w = detail::unit_weights(s, survey);
    if (est.calibration) {
        w = w.cwiseProduct(est.calibration->alpha.values());
    } else if (est.propensity.size() == s.n()) {
        for (Index k = 0; k < s.n(); ++k)
            w[k] *= s.treated(k) ? 1.0 / est.propensity[k] : 1.0 / (1.0 - est.propensity[k]);
    }
    return WeightSet(std::move(w), est.calibration ? WeightKind::calibrated : WeightKind::initial);
}

/// Plug-in variance for an already computed Estimation.
inline double plugin_variance(const ClusteredSample& s, Estimation& est, bool survey) {
    if (est.calibration) return plugin_variance(s, *est.calibration, survey).second;
    return linearized_variance(s, est.contributions, est.report.tau_hat, survey);
}

struct BootstrapResult {
    double variance = 0.0;
    std::vector<double> replicates; // NaN for replicates that failed every redraw
    Index redraws = 0;
    Index failed = 0;
};

/// Resample clusters with replacement and rerun the whole pipeline.
/// Replicate r, attempt a draws from substream (seed, r, bootstrap|a).
inline BootstrapResult cluster_bootstrap_variance(const ClusteredSample& s, Method method, int B, std::uint64_t seed,
                                                  const PipelineOptions& opt = {}, unsigned threads = 1) {
    if (B < 2) fail(ErrorCategory::config, errc::est_config, "bootstrap needs at least 2 replicates");
    constexpr int max_retries = 10;
    BootstrapResult out;
    out.replicates.assign(static_cast<std::size_t>(B), std::numeric_limits<double>::quiet_NaN());
    std::vector<Index> redraws(static_cast<std::size_t>(B), 0);
    parallel_for(static_cast<std::size_t>(B), threads, [&](std::size_t r) {
        std::vector<Index> picks(static_cast<std::size_t>(s.m()));
        for (int attempt = 0; attempt <= max_retries; ++attempt) {
            const std::uint32_t stage = (static_cast<std::uint32_t>(Stage::bootstrap) << 16) | static_cast<std::uint32_t>(attempt);
            Philox4x32 gen(seed, static_cast<std::uint32_t>(r), stage);
            for (auto& pk : picks)
                pk = std::min<Index>(s.m() - 1, static_cast<Index>(uniform01(gen) * static_cast<double>(s.m())));
            try {
                const ClusteredSample rs = s.resample_clusters(picks);
                out.replicates[r] = run_method(rs, method, opt).report.tau_hat;
                return;
            } catch (const Error&) {
                ++redraws[r];
            }
        }
    });
    std::vector<double> ok;
    for (std::size_t r = 0; r < out.replicates.size(); ++r) {
        out.redraws += redraws[r];
        if (std::isnan(out.replicates[r]))
            ++out.failed;
        else
            ok.push_back(out.replicates[r]);
    }
    if (ok.size() < 2)
        fail(ErrorCategory::numerical, errc::resample_degenerate,
             "fewer than two bootstrap replicates succeeded (" + std::to_string(out.failed) + " failed)");
    double mean = 0.0;
    for (double v : ok) mean += v;
    mean /= static_cast<double>(ok.size());
    double ss = 0.0;
    for (double v : ok) ss += (v - mean) * (v - mean);
    out.variance = ss / static_cast<double>(ok.size() - 1);
    return out;
}

/// Full estimate: working fit, point estimate, requested variance and CI.
inline Estimation estimate(const ClusteredSample& s, Method method, const PipelineOptions& opt = {},
                           VarianceMethod variance = VarianceMethod::plugin, double level = 0.95,
                           int bootstrap_reps = 500, std::uint64_t seed = 0, unsigned threads = 1) {
    Estimation est = run_method(s, method, opt);
    est.report.level = level;
    switch (variance) {
    case VarianceMethod::plugin:
        est.report.attach_variance(plugin_variance(s, est, opt.survey), VarianceMethod::plugin, level);
        break;
    case VarianceMethod::bootstrap: {
        const BootstrapResult b = cluster_bootstrap_variance(s, method, bootstrap_reps, seed, opt, threads);
        est.report.attach_variance(b.variance, VarianceMethod::bootstrap, level);
        est.report.diagnostics["bootstrap_reps"] = bootstrap_reps;
        est.report.diagnostics["bootstrap_failed"] = static_cast<double>(b.failed);
        est.report.diagnostics["bootstrap_redraws"] = static_cast<double>(b.redraws);
        break;
    }
    case VarianceMethod::none:
        break;
    }
    return est;
}

} // namespace clustercal
