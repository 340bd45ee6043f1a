#pragma once

// Calibration of inverse-propensity weights. Initial weights d are tilted to
//
//   alpha_ij = T_i d_ij exp(l' X_ij) / sum_{k in arm(i)} w_ik d_ik exp(l' X_ik)
//
// with l = lambda1 for treated and lambda2 for controls. The per-cluster arm
// totals sum_j w_ij alpha_ij equal T_i for every lambda, and lambda solves
// the covariate balance equations Q(lambda) = 0. Q is the gradient of the
// convex dual
//
//   F(l) = N^-1 [ sum_i T_i log sum_{j in arm(i)} w_ij d_ij exp(l' X_ij) - l' sum_ij w_ij X_ij ],
//
// so each arm is solved by damped Newton on F.
//
// Plain mode: w = 1, T_i = n_i, N = n.
// Survey mode: w = design weight, T_i = N_i / pi_i (the first-stage expansion
// of the cluster size; falls back to sum_j w_ij when N_i or pi_i is unknown),
// N = total population if known, otherwise sum of w.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clustercal/data_model.hpp"
#include "clustercal/error.hpp"

namespace clustercal {

struct SolverOptions {
    double tolerance = 1e-10; // max |Q|
    int max_iterations = 100;
    bool damping = true;
    bool finite_difference_jacobian = false;
};

/// Unit weights, cluster targets and normalizer defining the constraints.
struct CalibrationTargets {
    Eigen::VectorXd unit_weight;    // w_ij
    Eigen::VectorXd cluster_target; // T_i
    double normalizer = 0.0;        // N
    bool survey = false;
    /// Some T_i were estimated from the weights rather than from known N_i, pi_i.
    bool estimated = false;
    /// N was estimated as the sum of design weights.
    bool normalizer_estimated = false;
};

inline CalibrationTargets calibration_targets(const ClusteredSample& s, bool survey) {
    CalibrationTargets t;
    t.survey = survey;
    t.cluster_target.resize(s.m());
    if (!survey) {
        t.unit_weight = Eigen::VectorXd::Ones(s.n());
        for (Index i = 0; i < s.m(); ++i) t.cluster_target[i] = static_cast<double>(s.cluster(i).size);
        t.normalizer = static_cast<double>(s.n());
        return t;
    }
    t.unit_weight = s.design_weight();
    for (Index i = 0; i < s.m(); ++i) {
        const ClusterInfo& c = s.cluster(i);
        if (c.population_size && c.first_stage_prob) {
            t.cluster_target[i] = *c.population_size / *c.first_stage_prob;
        } else {
            t.cluster_target[i] = t.unit_weight.segment(c.offset, c.size).sum();
            t.estimated = true;
        }
    }
    if (s.total_population()) {
        t.normalizer = *s.total_population();
    } else {
        t.normalizer = t.unit_weight.sum();
        t.normalizer_estimated = true;
    }
    return t;
}

/// Initial IPW weights: 1/e for treated, 1/(1-e) for controls.
/// Units whose weight exceeds extreme_threshold are reported in notes.
inline WeightSet initial_weights(const Eigen::VectorXd& e0, const ClusteredSample& s,
                                 std::vector<std::string>* notes = nullptr, double extreme_threshold = 100.0) {
    if (e0.size() != s.n())
        fail(ErrorCategory::data, errc::cal_dimension, "propensity vector length differs from sample size");
    Eigen::VectorXd d(s.n());
    Index extreme = 0;
    for (Index k = 0; k < s.n(); ++k) {
        if (!(e0[k] > 0.0 && e0[k] < 1.0))
            fail(ErrorCategory::numerical, errc::probability_out_of_range,
                 "initial propensity at unit " + std::to_string(k) + " is outside (0, 1)");
        d[k] = s.treated(k) ? 1.0 / e0[k] : 1.0 / (1.0 - e0[k]);
        if (d[k] > extreme_threshold) ++extreme;
    }
    if (extreme > 0 && notes)
        notes->push_back("extreme_weight: " + std::to_string(extreme) +
                         " initial weight(s) exceed " + std::to_string(extreme_threshold) +
                         " (propensity near 0 or 1)");
    return WeightSet(std::move(d), WeightKind::initial);
}

namespace detail {

// Tilt evaluation for one arm (treated or control).
class ArmTilt {
public:
    ArmTilt(const ClusteredSample& s, const Eigen::VectorXd& d, const CalibrationTargets& t, bool treated)
        : s_(s), d_(d), t_(t), members_(static_cast<std::size_t>(s.m())) {
        if (d.size() != s.n())
            fail(ErrorCategory::data, errc::cal_dimension, "weight vector length differs from sample size");
        for (Index i = 0; i < s.m(); ++i) {
            const ClusterInfo& c = s.cluster(i);
            auto& mem = members_[static_cast<std::size_t>(i)];
            for (Index k = c.offset; k < c.offset + c.size; ++k)
                if (s.treated(k) == treated) mem.push_back(k);
            if (mem.empty())
                fail(ErrorCategory::data, errc::cal_one_arm,
                     "cluster " + c.key + " has no " + (treated ? "treated" : "control") + " unit");
        }
        total_ = s.X().transpose() * t.unit_weight;
    }

    struct Eval {
        double objective = 0.0;
        Eigen::VectorXd gradient; // Q for this arm
        Eigen::MatrixXd hessian;
    };

    // Writes alpha for this arm's units into alpha (other entries untouched).
    Eval evaluate(const Eigen::VectorXd& lambda, Eigen::VectorXd& alpha, bool want_hessian) const {
        const Index p = s_.p();
        const Eigen::VectorXd& w = t_.unit_weight;
        Eval out;
        out.gradient = -total_;
        if (want_hessian) out.hessian = Eigen::MatrixXd::Zero(p, p);
        double obj = -lambda.dot(total_);
        std::vector<double> score;
        for (std::size_t i = 0; i < members_.size(); ++i) {
            const auto& mem = members_[i];
            const double target = t_.cluster_target[static_cast<Index>(i)];
            score.resize(mem.size());
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < mem.size(); ++j) {
                const Index k = mem[j];
                score[j] = std::log(w[k] * d_[k]) + s_.X().row(k).dot(lambda);
                mx = std::max(mx, score[j]);
            }
            if (!std::isfinite(mx))
                fail(ErrorCategory::numerical, errc::overflow, "tilt exponent is not finite");
            double sum = 0.0;
            for (double v : score) sum += std::exp(v - mx);
            obj += target * (mx + std::log(sum));
            Eigen::VectorXd m1 = Eigen::VectorXd::Zero(p);
            for (std::size_t j = 0; j < mem.size(); ++j) {
                const Index k = mem[j];
                const double share = std::exp(score[j] - mx) / sum; // w alpha / T
                alpha[k] = target * share / w[k];
                m1 += (target * share) * s_.X().row(k).transpose();
                if (want_hessian)
                    out.hessian.selfadjointView<Eigen::Lower>().rankUpdate(s_.X().row(k).transpose(), target * share);
            }
            out.gradient += m1;
            if (want_hessian) out.hessian.selfadjointView<Eigen::Lower>().rankUpdate(m1, -1.0 / target);
        }
        const double N = t_.normalizer;
        out.objective = obj / N;
        out.gradient /= N;
        if (want_hessian) {
            Eigen::MatrixXd full = out.hessian.selfadjointView<Eigen::Lower>();
            out.hessian = full / N;
        }
        return out;
    }

private:
    const ClusteredSample& s_;
    const Eigen::VectorXd& d_;
    const CalibrationTargets& t_;
    std::vector<std::vector<Index>> members_;
    Eigen::VectorXd total_;
};

inline void check_lambda(const ClusteredSample& s, const Eigen::VectorXd& l1, const Eigen::VectorXd& l2) {
    if (l1.size() != s.p() || l2.size() != s.p())
        fail(ErrorCategory::data, errc::cal_dimension, "lambda vectors must have length p");
}

} // namespace detail

/// Calibrated weights alpha(lambda1, lambda2).
inline WeightSet alpha_weights(const Eigen::VectorXd& lambda1, const Eigen::VectorXd& lambda2,
                               const ClusteredSample& s, const WeightSet& d, bool survey = false) {
    detail::check_lambda(s, lambda1, lambda2);
    const CalibrationTargets t = calibration_targets(s, survey);
    Eigen::VectorXd alpha(s.n());
    detail::ArmTilt(s, d.values(), t, true).evaluate(lambda1, alpha, false);
    detail::ArmTilt(s, d.values(), t, false).evaluate(lambda2, alpha, false);
    return WeightSet(std::move(alpha), WeightKind::calibrated);
}

/// Balance residual (Q1, Q2), length 2p.
inline Eigen::VectorXd q_residual(const Eigen::VectorXd& lambda1, const Eigen::VectorXd& lambda2,
                                  const ClusteredSample& s, const WeightSet& d, bool survey = false) {
    detail::check_lambda(s, lambda1, lambda2);
    const CalibrationTargets t = calibration_targets(s, survey);
    Eigen::VectorXd alpha(s.n());
    Eigen::VectorXd q(2 * s.p());
    q.head(s.p()) = detail::ArmTilt(s, d.values(), t, true).evaluate(lambda1, alpha, false).gradient;
    q.tail(s.p()) = detail::ArmTilt(s, d.values(), t, false).evaluate(lambda2, alpha, false).gradient;
    return q;
}

/// Dual objective whose gradient is q_residual.
inline double dual_objective(const Eigen::VectorXd& lambda1, const Eigen::VectorXd& lambda2,
                             const ClusteredSample& s, const WeightSet& d, bool survey = false) {
    detail::check_lambda(s, lambda1, lambda2);
    const CalibrationTargets t = calibration_targets(s, survey);
    Eigen::VectorXd alpha(s.n());
    return detail::ArmTilt(s, d.values(), t, true).evaluate(lambda1, alpha, false).objective +
           detail::ArmTilt(s, d.values(), t, false).evaluate(lambda2, alpha, false).objective;
}

/// Implied propensity: 1/alpha for treated, 1 - 1/alpha for controls.
/// Counts weights below one (implied probability outside (0,1)).
inline Eigen::VectorXd propensity_from_alpha(const WeightSet& alpha, const ClusteredSample& s,
                                             Index* below_one = nullptr) {
    if (alpha.size() != s.n())
        fail(ErrorCategory::data, errc::cal_dimension, "weight vector length differs from sample size");
    Eigen::VectorXd e(s.n());
    Index low = 0;
    for (Index k = 0; k < s.n(); ++k) {
        const double a = alpha[k];
        if (a < 1.0) ++low;
        e[k] = s.treated(k) ? 1.0 / a : 1.0 - 1.0 / a;
    }
    if (below_one) *below_one = low;
    return e;
}

struct CalibrationResult {
    Eigen::VectorXd lambda1;
    Eigen::VectorXd lambda2;
    WeightSet alpha;
    Eigen::VectorXd implied_propensity;
    int iterations = 0;
    double residual_norm = 0.0; // max |Q|
    bool converged = false;
    CalibrationTargets targets;
    Index weights_below_one = 0;
    std::vector<std::string> notes;
};

/// Thrown when Newton fails to reach the tolerance; carries the best iterate.
class CalibrationNotConverged : public Error {
public:
    CalibrationNotConverged(CalibrationResult best, const std::string& message)
        : Error(ErrorCategory::numerical, errc::cal_not_converged, message), best_(std::move(best)) {}
    const CalibrationResult& best() const noexcept { return best_; }

private:
    CalibrationResult best_;
};

namespace detail {

// Rejects covariate directions with no within-cluster-arm variation: the
// balance equations are then degenerate and the Jacobian singular.
inline void check_collinear(const Eigen::MatrixXd& H, const std::vector<std::string>& names, const char* arm) {
    const Index p = H.rows();
    Eigen::VectorXd scale(p);
    std::ostringstream msg;
    for (Index j = 0; j < p; ++j) {
        if (!(H(j, j) > 1e-14)) {
            msg << arm << " arm: covariate '" << names[static_cast<std::size_t>(j)]
                << "' has no within-cluster variation";
            fail(ErrorCategory::numerical, errc::collinear, msg.str());
        }
        scale[j] = 1.0 / std::sqrt(H(j, j));
    }
    const Eigen::MatrixXd C = scale.asDiagonal() * H * scale.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(C);
    const double top = eig.eigenvalues().maxCoeff();
    bool bad = false;
    msg << arm << " arm: collinear covariate direction(s):";
    for (Index k = 0; k < p; ++k) {
        if (eig.eigenvalues()[k] > 1e-10 * top) continue;
        bad = true;
        const Eigen::VectorXd v = eig.eigenvectors().col(k);
        msg << " [";
        bool first = true;
        for (Index j = 0; j < p; ++j) {
            if (std::abs(v[j]) < 1e-6) continue;
            msg << (first ? "" : " + ") << v[j] << "*" << names[static_cast<std::size_t>(j)];
            first = false;
        }
        msg << "]";
    }
    if (bad) fail(ErrorCategory::numerical, errc::collinear, msg.str());
}

} // namespace detail

/// Solve Q(lambda1, lambda2) = 0. Both arms decouple and are solved as
/// separate Newton problems on the dual objective.
inline CalibrationResult solve_calibration(const ClusteredSample& s, const WeightSet& d,
                                           const SolverOptions& opt = {}, bool survey = false) {
    if (!(opt.tolerance > 0.0) || opt.max_iterations < 1)
        fail(ErrorCategory::config, errc::bad_option, "solver tolerance must be > 0 and max_iterations >= 1");
    const Index p = s.p();
    CalibrationResult res;
    res.targets = calibration_targets(s, survey);
    if (res.targets.estimated)
        res.notes.push_back("cluster_totals_estimated: N_i/pi_i replaced by the sum of design weights");
    if (res.targets.normalizer_estimated) res.notes.push_back("population_size_estimated: N = sum of design weights");

    Eigen::VectorXd alpha = Eigen::VectorXd::Zero(s.n());
    Eigen::VectorXd lambda[2] = {Eigen::VectorXd::Zero(p), Eigen::VectorXd::Zero(p)};
    double residual[2] = {0.0, 0.0};
    int iterations = 0;
    bool ok = true;

    for (int arm = 0; arm < 2; ++arm) {
        const bool treated = arm == 0;
        detail::ArmTilt tilt(s, d.values(), res.targets, treated);
        Eigen::VectorXd& l = lambda[arm];

        auto evaluate = [&](const Eigen::VectorXd& at, bool hess) {
            auto e = tilt.evaluate(at, alpha, hess && !opt.finite_difference_jacobian);
            if (hess && opt.finite_difference_jacobian) {
                Eigen::VectorXd scratch = alpha;
                e.hessian.resize(p, p);
                for (Index j = 0; j < p; ++j) {
                    const double h = 1e-6 * std::max(1.0, std::abs(at[j]));
                    Eigen::VectorXd lp = at, lm = at;
                    lp[j] += h;
                    lm[j] -= h;
                    e.hessian.col(j) = (tilt.evaluate(lp, scratch, false).gradient -
                                        tilt.evaluate(lm, scratch, false).gradient) /
                                       (2.0 * h);
                }
                e.hessian = 0.5 * (e.hessian + e.hessian.transpose()).eval();
            }
            return e;
        };

        auto cur = evaluate(l, true);
        detail::check_collinear(cur.hessian, s.covariate_names(), treated ? "treated" : "control");
        int it = 0;
        for (;; ++it) {
            residual[arm] = cur.gradient.cwiseAbs().maxCoeff();
            if (residual[arm] <= opt.tolerance || it >= opt.max_iterations) break;
            Eigen::LDLT<Eigen::MatrixXd> ldlt(cur.hessian);
            Eigen::VectorXd step = -ldlt.solve(cur.gradient);
            if (ldlt.info() != Eigen::Success || !step.allFinite() || cur.gradient.dot(step) >= 0.0)
                step = -cur.gradient; // fall back to steepest descent on a degenerate Hessian
            Eigen::VectorXd next = l + step;
            auto cand = evaluate(next, true);
            if (opt.damping) {
                double t = 1.0;
                const double slope = cur.gradient.dot(step);
                int halvings = 0;
                // Near the solution the objective change falls below its rounding
                // error; then a step that shrinks the residual is accepted instead.
                const double noise = 64.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(cur.objective));
                const double gmax = cur.gradient.cwiseAbs().maxCoeff();
                auto accept = [&] {
                    if (cand.objective <= cur.objective + 1e-4 * t * slope) return true;
                    return cand.objective <= cur.objective + noise && cand.gradient.cwiseAbs().maxCoeff() < gmax;
                };
                while (!accept() && halvings < 60) {
                    t *= 0.5;
                    ++halvings;
                    next = l + t * step;
                    cand = evaluate(next, true);
                }
                if (halvings == 60 && !(cand.objective <= cur.objective)) {
                    // No further descent representable in floating point.
                    evaluate(l, false);
                    break;
                }
            }
            l = next;
            cur = std::move(cand);
        }
        residual[arm] = cur.gradient.cwiseAbs().maxCoeff();
        // evaluate() leaves alpha at the last evaluated point; refresh at l.
        tilt.evaluate(l, alpha, false);
        iterations = std::max(iterations, it);
        ok = ok && residual[arm] <= opt.tolerance;
    }

    res.lambda1 = lambda[0];
    res.lambda2 = lambda[1];
    res.iterations = iterations;
    res.residual_norm = std::max(residual[0], residual[1]);
    res.converged = ok;
    if (!alpha.allFinite() || !(alpha.array() > 0.0).all())
        fail(ErrorCategory::numerical, errc::overflow,
             "calibrated weights under- or overflowed (residual " + std::to_string(res.residual_norm) +
                 "); the balance constraints are likely infeasible for this sample");
    res.alpha = WeightSet(alpha, WeightKind::calibrated);
    res.implied_propensity = propensity_from_alpha(res.alpha, s, &res.weights_below_one);
    if (res.weights_below_one > 0)
        res.notes.push_back("weight_below_one: " + std::to_string(res.weights_below_one) +
                            " calibrated weight(s) < 1; implied propensity outside (0,1)");
    if (!ok) {
        std::ostringstream msg;
        msg << "calibration did not reach tolerance " << opt.tolerance << " in " << opt.max_iterations
            << " iterations (residual " << res.residual_norm
            << "); the balance constraints may be infeasible for this sample";
        throw CalibrationNotConverged(std::move(res), msg.str());
    }
    return res;
}

} // namespace clustercal
