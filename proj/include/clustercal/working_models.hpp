#pragma once

// Step-1 working propensity models: weighted logistic regression (optionally
// with cluster dummies) and a random-intercept logistic mixed model fitted by
// adaptive Gauss-Hermite quadrature. Also the inverse links used by the
// simulation truth models.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "clustercal/data_model.hpp"
#include "clustercal/error.hpp"

namespace clustercal {

enum class LinkKind { logit, probit, cloglog };

inline std::string_view to_string(LinkKind link) {
    switch (link) {
    case LinkKind::logit: return "logit";
    case LinkKind::probit: return "probit";
    case LinkKind::cloglog: return "cloglog";
    }
    return "?";
}

/// Inverse link h(eta), clamped into the open unit interval.
inline double inverse_link(LinkKind link, double eta) {
    constexpr double lo = std::numeric_limits<double>::min();
    constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
    double v = 0.0;
    switch (link) {
    case LinkKind::logit:
        v = eta >= 0.0 ? 1.0 / (1.0 + std::exp(-eta)) : std::exp(eta) / (1.0 + std::exp(eta));
        break;
    case LinkKind::probit:
        v = 0.5 * std::erfc(-eta / std::numbers::sqrt2);
        break;
    case LinkKind::cloglog:
        v = -std::expm1(-std::exp(eta));
        break;
    }
    return std::clamp(v, lo, hi);
}

namespace detail {

// log(1 + exp(x)) without overflow
inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// Bernoulli log-likelihood of a under logit-probability expit(eta).
inline double bernoulli_logit_ll(double a, double eta) { return a * eta - softplus(eta); }

inline double expit(double eta) { return inverse_link(LinkKind::logit, eta); }

} // namespace detail

struct LogisticOptions {
    double tolerance = 1e-10; // on max |score| / sum of weights
    int max_iterations = 50;
    double separation_cap = 30.0;
};

struct LogisticFit {
    /// Intercept, covariate slopes, then m-1 cluster effects (first cluster is the reference).
    Eigen::VectorXd coefficients;
    bool converged = false;
    int iterations = 0;
    /// Max-abs score divided by the total weight.
    double max_abs_score = 0.0;
    bool cluster_dummies = false;
    Index p = 0;
    Index n_clusters = 0;
};

namespace detail {

inline Eigen::MatrixXd logistic_design(const ClusteredSample& s, bool dummies) {
    const Index q = 1 + s.p() + (dummies ? s.m() - 1 : 0);
    Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(s.n(), q);
    Z.col(0).setOnes();
    Z.middleCols(1, s.p()) = s.X();
    if (dummies) {
        for (Index k = 0; k < s.n(); ++k) {
            Index c = s.cluster_of_unit()[static_cast<std::size_t>(k)];
            if (c > 0) Z(k, s.p() + c) = 1.0;
        }
    }
    return Z;
}

} // namespace detail

/// Weighted logistic regression of A on [1, X] (+ cluster dummies) by IRLS
/// with step-halving.
inline LogisticFit fit_logistic(const ClusteredSample& s, bool use_cluster_dummies = false,
                                const Eigen::VectorXd* weights = nullptr, const LogisticOptions& opt = {}) {
    if (weights) {
        if (weights->size() != s.n())
            fail(ErrorCategory::data, errc::wm_dimension, "weight vector length differs from sample size");
        for (Index k = 0; k < s.n(); ++k)
            if (!((*weights)[k] > 0.0))
                fail(ErrorCategory::data, errc::non_positive_weight, "logistic weights must be positive");
    }
    const Eigen::MatrixXd Z = detail::logistic_design(s, use_cluster_dummies);
    const Eigen::VectorXd w = weights ? *weights : Eigen::VectorXd::Ones(s.n());
    const Eigen::VectorXd& a = s.treatment();
    const double wsum = w.sum();

    auto loglik = [&](const Eigen::VectorXd& beta) {
        Eigen::VectorXd eta = Z * beta;
        double ll = 0.0;
        for (Index k = 0; k < s.n(); ++k) ll += w[k] * detail::bernoulli_logit_ll(a[k], eta[k]);
        return ll;
    };

    LogisticFit fit;
    fit.cluster_dummies = use_cluster_dummies;
    fit.p = s.p();
    fit.n_clusters = s.m();
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(Z.cols());
    double ll = loglik(beta);

    for (int iter = 0; iter <= opt.max_iterations; ++iter) {
        Eigen::VectorXd eta = Z * beta;
        Eigen::VectorXd resid(s.n()), wt(s.n());
        for (Index k = 0; k < s.n(); ++k) {
            const double pk = detail::expit(eta[k]);
            resid[k] = w[k] * (a[k] - pk);
            wt[k] = w[k] * pk * (1.0 - pk);
        }
        const Eigen::VectorXd score = Z.transpose() * resid;
        fit.iterations = iter;
        fit.max_abs_score = score.cwiseAbs().maxCoeff() / wsum;
        if (fit.max_abs_score <= opt.tolerance) {
            fit.converged = true;
            break;
        }
        if (iter == opt.max_iterations) break;

        const Eigen::MatrixXd info = Z.transpose() * wt.asDiagonal() * Z;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
        const Eigen::VectorXd diag = ldlt.vectorD().cwiseAbs();
        if (ldlt.info() != Eigen::Success || diag.minCoeff() <= 1e-13 * std::max(1.0, diag.maxCoeff()))
            fail(ErrorCategory::numerical, errc::singular_information,
                 "logistic information matrix is singular (collinear design or empty arm)");
        const Eigen::VectorXd step = ldlt.solve(score);

        double t = 1.0;
        Eigen::VectorXd next = beta + step;
        double ll_next = loglik(next);
        for (int h = 0; h < 40 && !(ll_next >= ll - 1e-12 * std::abs(ll)); ++h) {
            t *= 0.5;
            next = beta + t * step;
            ll_next = loglik(next);
        }
        beta = next;
        ll = ll_next;
        if (beta.cwiseAbs().maxCoeff() > opt.separation_cap)
            fail(ErrorCategory::numerical, errc::separation,
                 "logistic coefficients diverge (|coef| > " + std::to_string(opt.separation_cap) +
                     "); treatment is (quasi-)separated by the design");
    }
    fit.coefficients = beta;
    if (fit.converged) {
        // The score can vanish numerically while the likelihood is still
        // climbing toward perfect prediction.
        const Eigen::VectorXd eta = Z * beta;
        double worst = 0.0;
        for (Index k = 0; k < s.n(); ++k) worst = std::max(worst, std::abs(a[k] - detail::expit(eta[k])));
        if (worst < 1e-6)
            fail(ErrorCategory::numerical, errc::separation,
                 "treatment is perfectly predicted by the design (complete separation)");
    }
    if (!fit.converged)
        fail(ErrorCategory::numerical, errc::wm_not_converged,
             "IRLS did not converge in " + std::to_string(opt.max_iterations) + " iterations");
    return fit;
}

/// Gauss-Hermite rule for weight exp(-t^2) (Golub-Welsch).
struct GaussHermiteRule {
    Eigen::VectorXd nodes;
    Eigen::VectorXd weights;
};

inline GaussHermiteRule gauss_hermite(int count) {
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(count, count);
    for (int k = 1; k < count; ++k) J(k, k - 1) = J(k - 1, k) = std::sqrt(k / 2.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(J);
    GaussHermiteRule rule;
    rule.nodes = eig.eigenvalues();
    rule.weights = std::sqrt(std::numbers::pi) * eig.eigenvectors().row(0).transpose().array().square();
    return rule;
}

struct GlmmOptions {
    int quadrature_nodes = 15;
    int max_iterations = 100;
    /// On max |gradient| / n.
    double tolerance = 1e-8;
    /// |sigma| below this is reported as a boundary fit with sigma = 0.
    double boundary_threshold = 1e-4;
};

struct GlmmFit {
    Eigen::VectorXd fixed_coefficients; // intercept then slopes
    double random_sd = 0.0;
    Eigen::VectorXd predicted_effects; // posterior modes per cluster
    double marginal_loglik = 0.0;
    int quadrature_nodes = 0;
    bool converged = false;
    int iterations = 0;
    bool boundary = false;
};

namespace detail {

// Marginal log-likelihood of the random-intercept logistic model with
// U_i = sigma * u_i, u_i ~ N(0,1), evaluated by adaptive Gauss-Hermite.
class GlmmObjective {
public:
    GlmmObjective(const ClusteredSample& s, int nodes) : s_(s), rule_(gauss_hermite(nodes)), modes_(s.m()) {
        modes_.setZero();
        Z_.resize(s.n(), 1 + s.p());
        Z_.col(0).setOnes();
        Z_.rightCols(s.p()) = s.X();
    }

    // Returns log-likelihood; fills gradient w.r.t. (gamma, sigma).
    double evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad) {
        const Index q = Z_.cols();
        const Eigen::VectorXd gamma = theta.head(q);
        const double sigma = theta[q];
        const Eigen::VectorXd eta = Z_ * gamma;
        const Eigen::VectorXd& a = s_.treatment();
        const int K = static_cast<int>(rule_.nodes.size());
        if (grad) grad->setZero(q + 1);
        double total = 0.0;
        std::vector<double> logw(static_cast<std::size_t>(K));
        std::vector<double> uk(static_cast<std::size_t>(K));

        for (Index i = 0; i < s_.m(); ++i) {
            const ClusterInfo& c = s_.cluster(i);
            auto g = [&](double u) {
                double v = -0.5 * u * u;
                for (Index k = c.offset; k < c.offset + c.size; ++k) v += bernoulli_logit_ll(a[k], eta[k] + sigma * u);
                return v;
            };
            // Posterior mode in u: g is strictly concave.
            double u = modes_[i];
            double gu = g(u);
            double curv = 1.0;
            for (int it = 0; it < 100; ++it) {
                double d1 = -u, d2 = -1.0;
                for (Index k = c.offset; k < c.offset + c.size; ++k) {
                    const double pk = expit(eta[k] + sigma * u);
                    d1 += sigma * (a[k] - pk);
                    d2 -= sigma * sigma * pk * (1.0 - pk);
                }
                curv = -d2;
                const double step = d1 / curv;
                if (std::abs(step) < 1e-10 * std::max(1.0, std::abs(u))) break;
                if (std::abs(step) < 1e-4) {
                    // Quadratic convergence region: plain Newton.
                    u += step;
                    continue;
                }
                double t = 1.0, next = u + step, g_next = g(next);
                while (g_next < gu && t > 1e-10) {
                    t *= 0.5;
                    next = u + t * step;
                    g_next = g(next);
                }
                u = next;
                gu = g_next;
            }
            {
                double d2 = -1.0;
                for (Index k = c.offset; k < c.offset + c.size; ++k) {
                    const double pk = expit(eta[k] + sigma * u);
                    d2 -= sigma * sigma * pk * (1.0 - pk);
                }
                curv = -d2;
            }
            modes_[i] = u;
            const double scale = std::sqrt(2.0 / curv);
            // One pass over (node, unit): log-likelihood terms and residuals.
            const auto ni = static_cast<std::size_t>(c.size);
            resid_.resize(static_cast<std::size_t>(K) * ni);
            double mx = -std::numeric_limits<double>::infinity();
            for (int k = 0; k < K; ++k) {
                const double t = rule_.nodes[k];
                const double uu = u + scale * t;
                uk[static_cast<std::size_t>(k)] = uu;
                double v = -0.5 * uu * uu;
                for (std::size_t j = 0; j < ni; ++j) {
                    const Index row = c.offset + static_cast<Index>(j);
                    const double x = eta[row] + sigma * uu;
                    const double ex = std::exp(-std::abs(x));
                    v += a[row] * x - (std::max(x, 0.0) + std::log1p(ex));
                    const double pk = x >= 0.0 ? 1.0 / (1.0 + ex) : ex / (1.0 + ex);
                    resid_[static_cast<std::size_t>(k) * ni + j] = a[row] - pk;
                }
                logw[static_cast<std::size_t>(k)] = std::log(rule_.weights[k]) + t * t + v;
                mx = std::max(mx, logw[static_cast<std::size_t>(k)]);
            }
            double sum = 0.0;
            for (int k = 0; k < K; ++k) sum += std::exp(logw[static_cast<std::size_t>(k)] - mx);
            total += mx + std::log(sum) + std::log(scale) - 0.5 * std::log(2.0 * std::numbers::pi);

            if (grad) {
                for (std::size_t j = 0; j < ni; ++j) {
                    double rj = 0.0, ruj = 0.0;
                    for (int k = 0; k < K; ++k) {
                        const double post = std::exp(logw[static_cast<std::size_t>(k)] - mx) / sum;
                        const double r = resid_[static_cast<std::size_t>(k) * ni + j];
                        rj += post * r;
                        ruj += post * uk[static_cast<std::size_t>(k)] * r;
                    }
                    grad->head(q) += rj * Z_.row(c.offset + static_cast<Index>(j)).transpose();
                    (*grad)[q] += ruj;
                }
            }
        }
        return total;
    }

    const Eigen::VectorXd& modes() const { return modes_; }

private:
    const ClusteredSample& s_;
    GaussHermiteRule rule_;
    Eigen::VectorXd modes_;
    Eigen::MatrixXd Z_;
    std::vector<double> resid_;
};

} // namespace detail

/// Random-intercept logistic model fitted by maximizing the adaptive
/// Gauss-Hermite marginal likelihood (damped Newton, finite-difference
/// Hessian of the analytic score).
inline GlmmFit fit_random_intercept_logistic(const ClusteredSample& s, const GlmmOptions& opt = {}) {
    if (opt.quadrature_nodes < 5)
        fail(ErrorCategory::config, errc::bad_option, "quadrature_nodes must be at least 5");
    if (s.m() < 2)
        fail(ErrorCategory::numerical, errc::unidentifiable,
             "random-intercept variance is not identifiable from a single cluster");

    const LogisticFit start = fit_logistic(s);
    const Index q = 1 + s.p();
    Eigen::VectorXd theta(q + 1);
    theta.head(q) = start.coefficients;
    theta[q] = 1.0;

    detail::GlmmObjective obj(s, opt.quadrature_nodes);
    Eigen::VectorXd grad(q + 1), g2(q + 1);
    double ll = obj.evaluate(theta, &grad);
    const double n = static_cast<double>(s.n());

    GlmmFit fit;
    fit.quadrature_nodes = opt.quadrature_nodes;
    for (int iter = 0; iter <= opt.max_iterations; ++iter) {
        fit.iterations = iter;
        if (grad.cwiseAbs().maxCoeff() / n <= opt.tolerance) {
            fit.converged = true;
            break;
        }
        if (iter == opt.max_iterations) break;

        // Hessian of the log-likelihood by central differences of the score.
        Eigen::MatrixXd H(q + 1, q + 1);
        for (Index j = 0; j <= q; ++j) {
            const double h = 1e-5 * std::max(1.0, std::abs(theta[j]));
            Eigen::VectorXd tp = theta, tm = theta, gp(q + 1), gm(q + 1);
            tp[j] += h;
            tm[j] -= h;
            obj.evaluate(tp, &gp);
            obj.evaluate(tm, &gm);
            H.col(j) = (gp - gm) / (2.0 * h);
        }
        H = 0.5 * (H + H.transpose());
        // Newton direction on -ll; ridge until the negated Hessian is positive definite.
        Eigen::MatrixXd neg = -H;
        double ridge = 0.0;
        Eigen::LLT<Eigen::MatrixXd> llt(neg);
        while (llt.info() != Eigen::Success) {
            ridge = ridge == 0.0 ? 1e-6 * std::max(1.0, neg.diagonal().cwiseAbs().maxCoeff()) : ridge * 10.0;
            llt.compute(neg + ridge * Eigen::MatrixXd::Identity(q + 1, q + 1));
        }
        const Eigen::VectorXd step = llt.solve(grad);

        double t = 1.0;
        Eigen::VectorXd next = theta + step;
        double ll_next = obj.evaluate(next, &g2);
        while (!(ll_next >= ll + 1e-4 * t * grad.dot(step)) && t > 1e-10) {
            t *= 0.5;
            next = theta + t * step;
            ll_next = obj.evaluate(next, &g2);
        }
        if (!(ll_next >= ll - 1e-12 * std::abs(ll))) break; // no ascent possible
        theta = next;
        ll = ll_next;
        grad = g2;
    }
    if (!fit.converged)
        fail(ErrorCategory::numerical, errc::wm_not_converged,
             "random-intercept model did not converge in " + std::to_string(opt.max_iterations) + " iterations");

    const double sigma = std::abs(theta[q]);
    if (sigma < opt.boundary_threshold) {
        fit.boundary = true;
        fit.random_sd = 0.0;
        fit.fixed_coefficients = start.coefficients;
        fit.predicted_effects = Eigen::VectorXd::Zero(s.m());
        Eigen::VectorXd th = theta;
        th.head(q) = start.coefficients;
        th[q] = 0.0;
        fit.marginal_loglik = obj.evaluate(th, nullptr);
        return fit;
    }
    theta[q] = sigma;
    fit.marginal_loglik = obj.evaluate(theta, nullptr); // refresh modes at the reported sign
    fit.fixed_coefficients = theta.head(q);
    fit.random_sd = sigma;
    fit.predicted_effects = sigma * obj.modes();
    return fit;
}

inline Eigen::VectorXd predict_propensity(const LogisticFit& fit, const ClusteredSample& s) {
    if (fit.p != s.p() || (fit.cluster_dummies && fit.n_clusters != s.m()))
        fail(ErrorCategory::data, errc::wm_dimension, "fitted logistic model does not match sample dimensions");
    const Eigen::VectorXd eta = detail::logistic_design(s, fit.cluster_dummies) * fit.coefficients;
    return eta.unaryExpr([](double v) { return detail::expit(v); });
}

inline Eigen::VectorXd predict_propensity(const GlmmFit& fit, const ClusteredSample& s) {
    if (fit.fixed_coefficients.size() != 1 + s.p() || fit.predicted_effects.size() != s.m())
        fail(ErrorCategory::data, errc::wm_dimension, "fitted mixed model does not match sample dimensions");
    Eigen::VectorXd e(s.n());
    for (Index k = 0; k < s.n(); ++k) {
        const double eta = fit.fixed_coefficients[0] + s.X().row(k).dot(fit.fixed_coefficients.tail(s.p())) +
                           fit.predicted_effects[s.cluster_of_unit()[static_cast<std::size_t>(k)]];
        e[k] = detail::expit(eta);
    }
    return e;
}

} // namespace clustercal
