#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "clustercal/clustercal.hpp"
#include "support/oracles.hpp"

using namespace clustercal;
using oracle::unit;

namespace {

ClusteredSample toy() {
    return validate_sample(std::vector<Unit>{unit("a", 1, 2, {0.0}), unit("a", 0, 1, {1.0}), unit("b", 1, 2, {0.5}),
                                             unit("b", 0, 1, {-1.0})});
}

CalibrationResult calibrate(const ClusteredSample& s, bool survey = false) {
    const Eigen::VectorXd w = s.design_weight();
    const LogisticFit fit = fit_logistic(s, false, survey ? &w : nullptr);
    return solve_calibration(s, initial_weights(predict_propensity(fit, s), s), {}, survey);
}

std::vector<Unit> random_rows(std::mt19937_64& rng, int m, int n, int p) {
    std::normal_distribution<double> normal;
    std::vector<Unit> rows;
    for (int i = 0; i < m; ++i) {
        const double U = normal(rng);
        for (int j = 0; j < n; ++j) {
            Unit u;
            u.cluster_key = oracle::key(i);
            u.covariates.resize(static_cast<std::size_t>(p));
            for (auto& x : u.covariates) x = normal(rng);
            u.treatment = j % 2 == 0 ? (normal(rng) + u.covariates[0] + 0.5 * U > 0 ? 1 : 0) : j % 4 == 1;
            u.outcome = u.covariates[0] + U + 2.0 * u.treatment + normal(rng);
            rows.push_back(u);
        }
    }
    return rows;
}

} // namespace

TEST(NormalQuantile, KnownValues) {
    EXPECT_NEAR(normal_quantile(0.975), 1.959963984540054, 1e-13);
    EXPECT_NEAR(normal_quantile(0.5), 0.0, 1e-15);
    EXPECT_NEAR(normal_quantile(0.001), -3.090232306167814, 1e-12);
    EXPECT_NEAR(normal_quantile(1e-10), -6.361340902404056, 1e-9);
    for (double p = 0.01; p < 1.0; p += 0.01) EXPECT_NEAR(0.5 * std::erfc(-normal_quantile(p) / std::sqrt(2.0)), p, 1e-14);
}

TEST(ConfidenceInterval, Examples) {
    auto [lo, hi] = confidence_interval(0.0, 1.0, 0.95);
    EXPECT_NEAR(lo, -1.96, 1e-4);
    EXPECT_NEAR(hi, 1.96, 1e-4);
    std::tie(lo, hi) = confidence_interval(2.0, 0.0, 0.95);
    EXPECT_DOUBLE_EQ(lo, 2.0);
    EXPECT_DOUBLE_EQ(hi, 2.0);
    std::tie(lo, hi) = confidence_interval(0.53, 0.39, 0.95);
    EXPECT_NEAR(lo, -0.70, 0.02);
    EXPECT_NEAR(hi, 1.75, 0.02);
}

TEST(TauSimple, RatioExamples) {
    const ClusteredSample s = toy();
    EXPECT_DOUBLE_EQ(tau_simple(s, false, SimpleForm::ratio).tau_hat, 1.0);
    const ClusteredSample w = validate_sample(std::vector<Unit>{unit("a", 1, 2, {0.0}, 1.0), unit("a", 0, 1, {1.0}),
                                                                unit("b", 1, 4, {0.5}, 3.0), unit("b", 0, 1, {-1.0})});
    EXPECT_DOUBLE_EQ(tau_simple(w, true, SimpleForm::ratio).tau_hat, 2.5);
}

TEST(TauSimple, TotalFormIsCalibratedFormWithUnitWeights) {
    const ClusteredSample s = toy();
    EXPECT_DOUBLE_EQ(tau_simple(s).tau_hat, (2.0 + 2.0 - 1.0 - 1.0) / 4.0);
}

TEST(TauIptw, HalfPropensityExample) {
    const ClusteredSample s = toy();
    EXPECT_DOUBLE_EQ(tau_iptw(s, Eigen::VectorXd::Constant(4, 0.5)).tau_hat, 1.0);
    EXPECT_THROW(tau_iptw(s, Eigen::VectorXd::Constant(4, 1.0)), Error);
}

TEST(TauIptw, UnbiasedOverAllAssignments) {
    // Two clusters of four randomized units, each padded with one treated
    // and one control unit whose outcomes are 0 in both arms.
    const double y0[8] = {0.3, -1.2, 2.0, 0.7, 1.1, -0.4, 0.0, 2.5};
    const double y1[8] = {2.1, 0.4, 3.3, 1.0, 2.0, 1.5, -0.7, 4.0};
    const double e[8] = {0.3, 0.5, 0.8, 0.6, 0.45, 0.2, 0.7, 0.5};
    double truth = 0.0;
    for (int k = 0; k < 8; ++k) truth += y1[k] - y0[k];
    truth /= 12.0;
    double expectation = 0.0;
    for (int mask = 0; mask < 256; ++mask) {
        std::vector<Unit> rows;
        Eigen::VectorXd ev(12);
        double prob = 1.0;
        Index r = 0;
        for (int i = 0; i < 2; ++i) {
            rows.push_back(unit(oracle::key(i), 1, 0.0, {0.0}));
            ev[r++] = 0.5;
            rows.push_back(unit(oracle::key(i), 0, 0.0, {0.0}));
            ev[r++] = 0.5;
            for (int j = 0; j < 4; ++j) {
                const int k = 4 * i + j;
                const int a = (mask >> k) & 1;
                prob *= a ? e[k] : 1.0 - e[k];
                rows.push_back(unit(oracle::key(i), a, a ? y1[k] : y0[k], {0.0}));
                ev[r++] = e[k];
            }
        }
        expectation += prob * tau_iptw(validate_sample(rows), ev).tau_hat;
    }
    EXPECT_NEAR(expectation, truth, 1e-12);
}

TEST(TauCalibrated, ConstantOutcomeGivesZero) {
    std::mt19937_64 rng(71);
    auto rows = random_rows(rng, 6, 20, 2);
    for (auto& u : rows) u.outcome = 3.7;
    const ClusteredSample s = validate_sample(rows);
    EXPECT_NEAR(tau_calibrated(s, calibrate(s)).tau_hat, 0.0, 1e-12);
}

TEST(TauCalibrated, MatchesOracleWeights) {
    std::mt19937_64 rng(73);
    const oracle::Instance inst = oracle::feasible_instance(rng, 3, 3, 8, 8, 2, 2);
    const ClusteredSample s = validate_sample(inst.rows);
    const CalibrationResult cal = solve_calibration(s, WeightSet(inst.d, WeightKind::initial));
    const Eigen::VectorXd a1 = oracle::kl_primal(s, inst.d, true), a0 = oracle::kl_primal(s, inst.d, false);
    double ref = 0.0;
    Index i1 = 0, i0 = 0;
    for (Index k = 0; k < s.n(); ++k) ref += s.treated(k) ? a1[i1++] * s.outcome()[k] : -a0[i0++] * s.outcome()[k];
    ref /= static_cast<double>(s.n());
    EXPECT_NEAR(tau_calibrated(s, cal).tau_hat, ref, 1e-6);
}

TEST(TauCalibrated, InvariantToClusterRelabelingAndUnitOrder) {
    std::mt19937_64 rng(79);
    auto rows = random_rows(rng, 5, 16, 2);
    const ClusteredSample s = validate_sample(rows);
    const double tau = tau_calibrated(s, calibrate(s)).tau_hat;
    for (auto& u : rows) u.cluster_key = "z" + std::to_string(99 - std::stoi(u.cluster_key.substr(1)));
    std::shuffle(rows.begin(), rows.end(), rng);
    const ClusteredSample t = validate_sample(rows);
    EXPECT_NEAR(tau_calibrated(t, calibrate(t)).tau_hat, tau, 1e-9);
}

TEST(PluginVariance, HandComputedB1) {
    const std::vector<Unit> rows{unit("a", 1, 1.0, {0.5}), unit("a", 1, 3.0, {1.5}), unit("a", 0, 0.2, {-0.3}),
                                 unit("a", 0, 1.1, {0.8}), unit("b", 1, 2.5, {0.2}), unit("b", 1, 0.7, {-1.1}),
                                 unit("b", 0, -0.4, {0.4}), unit("b", 0, 0.9, {-0.6}), unit("b", 0, 1.3, {1.9})};
    const ClusteredSample s = validate_sample(rows);
    const CalibrationResult cal = calibrate(s);
    const auto [vc, v] = plugin_variance(s, cal, false);
    double num1 = 0, den1 = 0, num0 = 0, den0 = 0;
    const double sizes[9] = {4, 4, 4, 4, 5, 5, 5, 5, 5};
    for (Index k = 0; k < 9; ++k) {
        const double a = cal.alpha[k], c = a * (1.0 - a / sizes[k]), x = s.X()(k, 0), y = s.outcome()[k];
        if (s.treated(k)) {
            num1 += c * x * y;
            den1 += c * x * x;
        } else {
            num0 += c * x * y;
            den0 += c * x * x;
        }
    }
    EXPECT_NEAR(vc.B1[0], num1 / den1, 1e-10);
    EXPECT_NEAR(vc.B2[0], num0 / den0, 1e-10);
    EXPECT_GT(v, 0.0);
}

TEST(PluginVariance, HandComputedClusterFormula) {
    std::mt19937_64 rng(83);
    const ClusteredSample s = validate_sample(random_rows(rng, 4, 10, 1));
    const CalibrationResult cal = calibrate(s);
    const auto [vc, v] = plugin_variance(s, cal, false);
    const double tau = tau_calibrated(s, cal).tau_hat;
    double between = 0, within = 0;
    for (Index i = 0; i < 4; ++i) {
        double mean = 0;
        for (Index k = 10 * i; k < 10 * i + 10; ++k) mean += vc.tau_ij[k];
        mean /= 10;
        double ss = 0;
        for (Index k = 10 * i; k < 10 * i + 10; ++k) ss += (vc.tau_ij[k] - mean) * (vc.tau_ij[k] - mean);
        between += (mean - tau) * (mean - tau);
        within += ss / 9.0;
    }
    EXPECT_NEAR(v, (between / 3.0 + within / 4.0) / 40.0, 1e-12);
}

TEST(PluginVariance, LocationAndScaleEquivariance) {
    std::mt19937_64 rng(89);
    auto rows = random_rows(rng, 6, 15, 2);
    const ClusteredSample s = validate_sample(rows);
    const CalibrationResult cal = calibrate(s);
    const double tau = tau_calibrated(s, cal).tau_hat;
    const double v = plugin_variance(s, cal, false).second;
    auto shifted = rows, scaled = rows;
    for (auto& u : shifted) u.outcome += 5.0;
    for (auto& u : scaled) u.outcome *= 3.0;
    const ClusteredSample t = validate_sample(shifted), k = validate_sample(scaled);
    EXPECT_NEAR(tau_calibrated(t, calibrate(t)).tau_hat, tau, 1e-9);
    const CalibrationResult cal_k = calibrate(k);
    const auto [vc, vk] = plugin_variance(k, cal_k, false);
    const auto [vc1, v1] = plugin_variance(s, cal, false);
    EXPECT_NEAR(tau_calibrated(k, cal_k).tau_hat, 3.0 * tau, 1e-9);
    EXPECT_NEAR(vk, 9.0 * v, 1e-9 * v);
    EXPECT_LT((vc.tau_ij - 3.0 * vc1.tau_ij).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(SurveyPath, CensusMatchesNonSurveyPointEstimates) {
    std::mt19937_64 rng(97);
    auto rows = random_rows(rng, 4, 12, 2);
    for (auto& u : rows) {
        u.second_stage_prob = 1.0;
        u.first_stage_prob = 1.0;
    }
    SampleDesign design;
    design.total_population = 48.0;
    for (int i = 0; i < 4; ++i) {
        auto& c = design.clusters[oracle::key(i)];
        c.population_size = 12.0;
        c.joint_second_stage_probs = Eigen::MatrixXd::Ones(12, 12);
        design.joint_cluster_keys.push_back(oracle::key(i));
    }
    design.joint_cluster_probs = Eigen::MatrixXd::Ones(4, 4);
    const ClusteredSample s = validate_sample(rows, &design);
    ASSERT_TRUE(s.supports_survey_variance());
    const CalibrationResult plain = calibrate(s, false), survey = calibrate(s, true);
    EXPECT_LT((plain.alpha.values() - survey.alpha.values()).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((plain.lambda1 - survey.lambda1).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((plain.lambda2 - survey.lambda2).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_NEAR(tau_calibrated(s, plain).tau_hat, tau_calibrated(s, survey).tau_hat, 1e-12);
    EXPECT_DOUBLE_EQ(plugin_variance(s, survey, true).second, 0.0);
    for (Method m : all_methods) {
        PipelineOptions a, b;
        b.survey = true;
        EXPECT_NEAR(run_method(s, m, a).report.tau_hat, run_method(s, m, b).report.tau_hat, 1e-9) << to_string(m);
    }
}

TEST(SurveyPath, MissingDesignInfoIsReported) {
    std::mt19937_64 rng(101);
    auto rows = random_rows(rng, 4, 10, 1);
    for (auto& u : rows) u.design_weight = 3.0;
    const ClusteredSample s = validate_sample(rows);
    const CalibrationResult cal = calibrate(s, true);
    try {
        plugin_variance(s, cal, true);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "estimators.missing_design_info");
    }
}

TEST(SurveyPath, TwoStageVarianceMatchesDirectDoubleSum) {
    ScenarioConfig cfg = scenario_preset(1);
    cfg.M = 200;
    const FinitePopulation pop = generate_population(cfg, 3, 0);
    const ClusteredSample s = draw_two_stage_sample(pop, 6, 8, 3, 0).sample;
    Eigen::VectorXd phi(s.n());
    std::mt19937_64 rng(5);
    std::normal_distribution<double> normal;
    for (auto& v : phi) v = normal(rng);
    // Unit-level double sum: between-cluster term over all pairs plus the
    // within-cluster term for pairs sharing a cluster.
    const Eigen::VectorXd& pk = *s.second_stage_prob();
    const Eigen::MatrixXd& P = *s.joint_cluster_probs();
    double ref = 0.0;
    for (Index a = 0; a < s.n(); ++a)
        for (Index b = 0; b < s.n(); ++b) {
            const Index i = s.cluster_of_unit()[static_cast<std::size_t>(a)];
            const Index j = s.cluster_of_unit()[static_cast<std::size_t>(b)];
            const double pia = *s.cluster(i).first_stage_prob * pk[a];
            const double pib = *s.cluster(j).first_stage_prob * pk[b];
            const double between = (P(i, j) - *s.cluster(i).first_stage_prob * *s.cluster(j).first_stage_prob) /
                                   P(i, j) * (phi[a] / pia) * (phi[b] / pib);
            double within = 0.0;
            if (i == j) {
                const double jkl = a == b ? pk[a] : pk[a] * pk[b];
                within = (jkl - pk[a] * pk[b]) / jkl * (phi[a] / pk[a]) * (phi[b] / pk[b]) /
                         *s.cluster(i).first_stage_prob;
            }
            ref += between + within;
        }
    const double N = *s.total_population();
    EXPECT_NEAR(linearized_variance(s, phi, 0.0, true), std::max(0.0, ref / (N * N)), 1e-12 * std::abs(ref) / (N * N));
}

TEST(Bootstrap, IdenticalClustersGiveZeroVariance) {
    std::vector<Unit> rows;
    for (int i = 0; i < 5; ++i) {
        for (const auto& [a, y, x] : std::vector<std::tuple<int, double, double>>{
                 {1, 2.0, 0.5}, {1, 3.5, -0.2}, {0, 1.0, 0.3}, {0, 0.4, -0.7}, {0, 1.2, 0.9}})
            rows.push_back(unit(oracle::key(i), a, y, {x}));
    }
    const ClusteredSample s = validate_sample(rows);
    for (Method m : {Method::simple, Method::calibration}) {
        const BootstrapResult b = cluster_bootstrap_variance(s, m, 2, 17);
        EXPECT_NEAR(b.variance, 0.0, 1e-24) << to_string(m);
    }
}

TEST(Bootstrap, DeterministicAcrossThreadCounts) {
    std::mt19937_64 rng(103);
    const ClusteredSample s = validate_sample(random_rows(rng, 8, 20, 2));
    const BootstrapResult a = cluster_bootstrap_variance(s, Method::calibration, 40, 99, {}, 1);
    const BootstrapResult b = cluster_bootstrap_variance(s, Method::calibration, 40, 99, {}, 4);
    ASSERT_EQ(a.replicates.size(), b.replicates.size());
    for (std::size_t r = 0; r < a.replicates.size(); ++r) EXPECT_EQ(a.replicates[r], b.replicates[r]);
    EXPECT_EQ(a.variance, b.variance);
    const BootstrapResult c = cluster_bootstrap_variance(s, Method::calibration, 40, 100, {}, 1);
    EXPECT_NE(a.variance, c.variance);
}

TEST(Bootstrap, RejectsTooFewReplicates) {
    EXPECT_THROW(cluster_bootstrap_variance(toy(), Method::simple, 1, 1), Error);
}

TEST(Estimate, ApplicationShapedDataGivesFiniteInterval) {
    std::mt19937_64 rng(107);
    std::normal_distribution<double> normal;
    std::vector<Unit> rows;
    const int sizes[5] = {120, 95, 88, 110, 80};
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < sizes[i]; ++j) {
            Unit u;
            u.cluster_key = oracle::key(i);
            u.covariates = {normal(rng), normal(rng)};
            u.treatment = normal(rng) + 0.5 * u.covariates[0] > 0 ? 1 : 0;
            u.outcome = 0.5 * u.treatment + u.covariates[0] - 0.3 * u.covariates[1] + 2.0 * normal(rng);
            rows.push_back(u);
        }
    const ClusteredSample s = validate_sample(rows);
    ASSERT_EQ(s.n(), 493);
    for (VarianceMethod vm : {VarianceMethod::plugin, VarianceMethod::bootstrap}) {
        const Estimation est = estimate(s, Method::calibration, {}, vm, 0.95, 100, 11);
        EXPECT_TRUE(std::isfinite(est.report.ci_low));
        EXPECT_GT(est.report.variance, 0.0);
        EXPECT_LT(est.report.variance, 1.0);
        EXPECT_LT(est.report.ci_low, est.report.tau_hat);
        EXPECT_GT(est.report.ci_high, est.report.tau_hat);
    }
}

TEST(Estimate, MethodsParseAndPrint) {
    for (Method m : all_methods) EXPECT_EQ(parse_method(to_string(m)), m);
    EXPECT_FALSE(parse_method("bogus"));
    EXPECT_EQ(parse_simple_form("ratio"), SimpleForm::ratio);
}
