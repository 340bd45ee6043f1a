#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "clustercal/clustercal.hpp"
#include "support/oracles.hpp"

using namespace clustercal;
using oracle::unit;

namespace {

// Plain Newton-Raphson on the Bernoulli log-likelihood with design [1, X].
Eigen::VectorXd newton_mle(const Eigen::MatrixXd& Z, const Eigen::VectorXd& a) {
    Eigen::VectorXd b = Eigen::VectorXd::Zero(Z.cols());
    for (int it = 0; it < 100; ++it) {
        const Eigen::VectorXd p = (1.0 + (-(Z * b).array()).exp()).inverse().matrix();
        const Eigen::VectorXd g = Z.transpose() * (a - p);
        const Eigen::MatrixXd H = Z.transpose() * (p.array() * (1.0 - p.array())).matrix().asDiagonal() * Z;
        const Eigen::VectorXd step = H.ldlt().solve(g);
        b += step;
        if (step.cwiseAbs().maxCoeff() < 1e-14) break;
    }
    return b;
}

ClusteredSample random_sample(std::mt19937_64& rng, int m, int n, int p, double sigma, double g0 = -0.3) {
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> unif;
    for (;;) {
        std::vector<Unit> rows;
        bool ok = true;
        for (int i = 0; i < m && ok; ++i) {
            const double U = sigma * normal(rng);
            int nt = 0;
            for (int j = 0; j < n; ++j) {
                Unit u;
                u.cluster_key = oracle::key(i);
                u.covariates.resize(static_cast<std::size_t>(p));
                for (auto& x : u.covariates) x = normal(rng);
                const double eta = g0 + U + u.covariates[0];
                u.treatment = unif(rng) < 1.0 / (1.0 + std::exp(-eta)) ? 1 : 0;
                u.outcome = normal(rng);
                nt += u.treatment;
                rows.push_back(u);
            }
            ok = nt > 0 && nt < n;
        }
        if (ok) return validate_sample(rows);
    }
}

} // namespace

TEST(InverseLink, KnownValues) {
    EXPECT_DOUBLE_EQ(inverse_link(LinkKind::logit, 0.0), 0.5);
    EXPECT_NEAR(inverse_link(LinkKind::probit, 0.0), 0.5, 1e-15);
    EXPECT_NEAR(inverse_link(LinkKind::cloglog, 0.0), 1.0 - std::exp(-1.0), 1e-15);
    EXPECT_NEAR(inverse_link(LinkKind::probit, 1.959963984540054), 0.975, 1e-12);
}

TEST(InverseLink, MonotoneAndSymmetric) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> eta(-30.0, 30.0);
    for (LinkKind link : {LinkKind::logit, LinkKind::probit, LinkKind::cloglog}) {
        for (int t = 0; t < 2000; ++t) {
            double a = eta(rng), b = eta(rng);
            if (a > b) std::swap(a, b);
            if (b - a < 1e-3) continue;
            const double ha = inverse_link(link, a), hb = inverse_link(link, b);
            EXPECT_GE(ha, 0.0);
            EXPECT_LE(hb, 1.0);
            // Strict wherever doubles resolve the difference.
            if (ha > 1e-300 && hb < 1.0 - 1e-12) EXPECT_LT(ha, hb);
            else EXPECT_LE(ha, hb);
        }
    }
    for (int t = 0; t < 2000; ++t) {
        const double e = eta(rng);
        EXPECT_NEAR(inverse_link(LinkKind::logit, e) + inverse_link(LinkKind::logit, -e), 1.0, 1e-12);
    }
}

TEST(Logistic, SymmetricDataGivesZeroSlope) {
    const std::vector<Unit> rows{unit("a", 1, 0, {1.0}), unit("a", 1, 0, {-1.0}), unit("a", 0, 0, {1.0}),
                                 unit("a", 0, 0, {-1.0})};
    const LogisticFit fit = fit_logistic(validate_sample(rows));
    EXPECT_TRUE(fit.converged);
    EXPECT_NEAR(fit.coefficients[1], 0.0, 1e-8);
    EXPECT_NEAR(fit.coefficients[0], 0.0, 1e-8);
}

TEST(Logistic, MatchesIndependentNewtonMle) {
    std::mt19937_64 rng(11);
    const ClusteredSample s = random_sample(rng, 3, 10, 2, 0.0);
    const LogisticFit fit = fit_logistic(s);
    Eigen::MatrixXd Z(s.n(), 3);
    Z.col(0).setOnes();
    Z.rightCols(2) = s.X();
    const Eigen::VectorXd ref = newton_mle(Z, s.treatment());
    EXPECT_LT((fit.coefficients - ref).cwiseAbs().maxCoeff(), 1e-6);
    // Score at convergence.
    const Eigen::VectorXd e = predict_propensity(fit, s);
    const Eigen::VectorXd score = Z.transpose() * (s.treatment() - e);
    EXPECT_LE(score.cwiseAbs().maxCoeff(), 1e-8 * static_cast<double>(s.n()));
}

TEST(Logistic, WeightedFitMatchesReplication) {
    // Integer weights equal duplicated rows.
    std::mt19937_64 rng(3);
    const ClusteredSample s = random_sample(rng, 2, 12, 1, 0.0);
    Eigen::VectorXd w(s.n());
    std::vector<Unit> dup;
    for (Index k = 0; k < s.n(); ++k) {
        w[k] = 1.0 + static_cast<double>(k % 3);
        for (int r = 0; r < static_cast<int>(w[k]); ++r) dup.push_back(s.unit(k));
    }
    const LogisticFit a = fit_logistic(s, false, &w);
    const LogisticFit b = fit_logistic(validate_sample(dup));
    EXPECT_LT((a.coefficients - b.coefficients).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Logistic, ClusterDummiesReproduceTreatedFractions) {
    std::mt19937_64 rng(17);
    const ClusteredSample s = random_sample(rng, 5, 20, 1, 1.0);
    const LogisticFit fit = fit_logistic(s, true);
    EXPECT_EQ(fit.coefficients.size(), 2 + 4);
    const Eigen::VectorXd e = predict_propensity(fit, s);
    for (Index i = 0; i < s.m(); ++i) {
        const auto& c = s.cluster(i);
        EXPECT_NEAR(e.segment(c.offset, c.size).mean(), s.treatment().segment(c.offset, c.size).mean(), 1e-8);
    }
}

TEST(Logistic, DummyFitEqualsPerClusterRefitsWhenSlopesShared) {
    // With no covariate variation in play (x identical across clusters is not
    // needed): a 2-cluster sample with one covariate, the dummy fit equals a
    // fit with separate intercepts, i.e. the per-cluster intercept shift.
    const std::vector<Unit> rows{unit("a", 1, 0, {0.5}), unit("a", 0, 0, {-0.5}), unit("a", 1, 0, {-0.2}),
                                 unit("a", 0, 0, {0.9}),  unit("b", 1, 0, {1.5}),  unit("b", 0, 0, {0.1}),
                                 unit("b", 0, 0, {-1.0}), unit("b", 1, 0, {-0.3}), unit("b", 0, 0, {0.4})};
    const ClusteredSample s = validate_sample(rows);
    const LogisticFit fit = fit_logistic(s, true);
    // Reference: design [1_a, 1_b, x] fitted by the independent Newton MLE.
    Eigen::MatrixXd Z(s.n(), 3);
    for (Index k = 0; k < s.n(); ++k) {
        Z(k, 0) = s.cluster_of_unit()[static_cast<std::size_t>(k)] == 0 ? 1.0 : 0.0;
        Z(k, 1) = 1.0 - Z(k, 0);
        Z(k, 2) = s.X()(k, 0);
    }
    const Eigen::VectorXd ref = newton_mle(Z, s.treatment());
    const Eigen::VectorXd e = predict_propensity(fit, s);
    const Eigen::VectorXd e_ref = (1.0 + (-(Z * ref).array()).exp()).inverse().matrix();
    EXPECT_LT((e - e_ref).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Logistic, SeparationDetected) {
    const std::vector<Unit> rows{unit("a", 1, 0, {1.0}), unit("a", 1, 0, {2.0}), unit("a", 0, 0, {-1.0}),
                                 unit("a", 0, 0, {-2.0})};
    try {
        fit_logistic(validate_sample(rows));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "working_models.separation_detected");
    }
}

TEST(PredictPropensity, KnownCoefficients) {
    const std::vector<Unit> rows{unit("a", 1, 0, {0.5}), unit("a", 0, 0, {0.5})};
    const ClusteredSample s = validate_sample(rows);
    LogisticFit zero;
    zero.coefficients = Eigen::VectorXd::Zero(2);
    zero.p = 1;
    EXPECT_DOUBLE_EQ(predict_propensity(zero, s)[0], 0.5);
    LogisticFit known = zero;
    known.coefficients << -0.5, 1.0;
    EXPECT_DOUBLE_EQ(predict_propensity(known, s)[1], 0.5);
    GlmmFit g;
    g.fixed_coefficients = known.coefficients;
    g.predicted_effects = Eigen::VectorXd::Zero(1);
    EXPECT_DOUBLE_EQ(predict_propensity(g, s)[0], 0.5);
}

TEST(GaussHermite, IntegratesPolynomialsExactly) {
    const GaussHermiteRule r = gauss_hermite(15);
    // int exp(-t^2) t^{2k} dt = Gamma(k + 1/2)
    for (int k = 0; k < 15; ++k) {
        double q = 0.0;
        for (Index i = 0; i < r.nodes.size(); ++i) q += r.weights[i] * std::pow(r.nodes[i], 2 * k);
        EXPECT_NEAR(q / std::tgamma(k + 0.5), 1.0, 1e-11) << "k=" << k;
    }
}

TEST(Glmm, MarginalLikelihoodMatchesBruteForceIntegration) {
    std::mt19937_64 rng(23);
    const ClusteredSample s = random_sample(rng, 6, 15, 1, 1.0);
    const GlmmFit fit = fit_random_intercept_logistic(s);
    ASSERT_TRUE(fit.converged);
    ASSERT_FALSE(fit.boundary);
    // Dense midpoint rule on u in [-12, 12] for each cluster.
    double ll = 0.0;
    const int G = 20000;
    const double lo = -12.0, h = 24.0 / G;
    for (Index i = 0; i < s.m(); ++i) {
        const auto& c = s.cluster(i);
        std::vector<double> logs(G);
        double mx = -1e300;
        for (int g = 0; g < G; ++g) {
            const double u = lo + (g + 0.5) * h;
            double v = -0.5 * u * u - 0.5 * std::log(2.0 * M_PI);
            for (Index k = c.offset; k < c.offset + c.size; ++k) {
                const double eta = fit.fixed_coefficients[0] + fit.fixed_coefficients[1] * s.X()(k, 0) + fit.random_sd * u;
                v += s.treatment()[k] * eta - std::log1p(std::exp(eta));
            }
            logs[static_cast<std::size_t>(g)] = v;
            mx = std::max(mx, v);
        }
        double sum = 0.0;
        for (double v : logs) sum += std::exp(v - mx);
        ll += mx + std::log(sum * h);
    }
    EXPECT_NEAR(fit.marginal_loglik, ll, 1e-6 * std::abs(ll));
}

TEST(Glmm, NoRandomEffectGivesSmallSigmaAndLogisticCoefficients) {
    std::mt19937_64 rng(29);
    const ClusteredSample s = random_sample(rng, 50, 100, 1, 0.0);
    const GlmmFit fit = fit_random_intercept_logistic(s);
    const LogisticFit plain = fit_logistic(s);
    EXPECT_LE(fit.random_sd, 0.1);
    EXPECT_LT((fit.fixed_coefficients - plain.coefficients).cwiseAbs().maxCoeff(), 0.1);
    if (fit.boundary) EXPECT_LT((fit.fixed_coefficients - plain.coefficients).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Glmm, RecoversScenarioOneRandomEffectSd) {
    ScenarioConfig cfg = scenario_preset(1);
    cfg.M = 1000;
    std::vector<double> sds;
    for (std::uint32_t r = 0; r < 50; ++r) {
        const FinitePopulation pop = generate_population(cfg, 77, r);
        const TwoStageSample draw = draw_two_stage_sample(pop, 100, 30, 77, r);
        sds.push_back(fit_random_intercept_logistic(draw.sample).random_sd);
    }
    std::nth_element(sds.begin(), sds.begin() + 25, sds.end());
    EXPECT_NEAR(sds[25], 1.0, 0.3);
}

TEST(Glmm, SingleClusterIsUnidentifiable) {
    const std::vector<Unit> rows{unit("a", 1, 0, {0.3}), unit("a", 0, 0, {-0.1}), unit("a", 1, 0, {1.0})};
    try {
        fit_random_intercept_logistic(validate_sample(rows));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "working_models.unidentifiable");
    }
}
