#include <gtest/gtest.h>

#include <random>

#include "clustercal/clustercal.hpp"
#include "support/oracles.hpp"

using namespace clustercal;
using oracle::unit;

TEST(Balance, IdenticalArmsGiveZeroDifferences) {
    std::mt19937_64 rng(7);
    const ClusteredSample s = validate_sample(oracle::precalibrated_rows(rng, 3, 4, 2));
    const BalanceReport r = standardized_differences(s);
    EXPECT_LE(r.per_cluster.cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE(r.whole.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Balance, FourUnitHandExample) {
    // Whole-sample sd of {1,1,0,0} is 0.5 (divisor n).
    const std::vector<Unit> rows{unit("a", 1, 0, {1.0}), unit("a", 1, 0, {1.0}), unit("a", 0, 0, {0.0}),
                                 unit("a", 0, 0, {0.0})};
    const BalanceReport r = standardized_differences(validate_sample(rows));
    EXPECT_NEAR(r.whole[0], 2.0, 1e-12);
    EXPECT_NEAR(r.per_cluster(0, 0), 2.0, 1e-12);
}

TEST(Balance, CalibratedWeightsZeroWholeSampleRows) {
    std::mt19937_64 rng(13);
    for (int t = 0; t < 10; ++t) {
        const oracle::Instance inst = oracle::feasible_instance(rng, 2, 6, 6, 20, 1, 4);
        const ClusteredSample s = validate_sample(inst.rows);
        const CalibrationResult cal = solve_calibration(s, WeightSet(inst.d, WeightKind::initial));
        ASSERT_TRUE(cal.converged);
        const BalanceReport r = standardized_differences(s, &cal.alpha, "calibration");
        EXPECT_LE(r.whole.cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(Balance, SurveyCalibrationZeroesDesignWeightedRows) {
    ScenarioConfig cfg = scenario_preset(2);
    cfg.M = 500;
    const FinitePopulation pop = generate_population(cfg, 21, 0);
    const ClusteredSample s = draw_two_stage_sample(pop, 30, 40, 21, 0).sample;
    PipelineOptions opt;
    opt.survey = true;
    const Estimation est = run_method(s, Method::calibration, opt);
    const WeightSet w = balancing_weights(s, est, true);
    EXPECT_LE(standardized_differences(s, &w).whole.cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Balance, ConstantCovariateIsZeroVariance) {
    const std::vector<Unit> rows{unit("a", 1, 0, {1.0}), unit("a", 0, 0, {1.0}), unit("b", 1, 0, {1.0}),
                                 unit("b", 0, 0, {1.0})};
    try {
        standardized_differences(validate_sample(rows));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "diagnostics.zero_variance");
    }
}

TEST(Balance, TableHasCovariateByClusterGrid) {
    const std::vector<Unit> rows{unit("north", 1, 0, {1.0, 0.2}), unit("north", 0, 0, {0.0, 0.5}),
                                 unit("south", 1, 0, {0.4, -1.0}), unit("south", 0, 0, {0.7, 0.1})};
    const ClusteredSample s = validate_sample(rows);
    const BalanceReport none = standardized_differences(s);
    BalanceReport other = none;
    other.weight_label = "calibration";
    const std::string table = format_balance_table({none, other});
    // Header plus (2 clusters + Whole Pop) rows for each of 2 covariates.
    EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 1 + 2 * 3);
    EXPECT_NE(table.find("Whole Pop"), std::string::npos);
    EXPECT_NE(table.find("south"), std::string::npos);
    EXPECT_NE(table.find("calibration"), std::string::npos);
    EXPECT_NE(table.find("x2"), std::string::npos);
}
