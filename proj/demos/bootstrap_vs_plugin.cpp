// Plug-in and cluster bootstrap variances of the calibrated estimator on one sample.

#include <cstdio>

#include "clustercal/clustercal.hpp"

int main() {
    using namespace clustercal;
    ScenarioConfig cfg = scenario_preset(1);
    cfg.M = 1000;
    const FinitePopulation pop = generate_population(cfg, 11);
    const ClusteredSample s = draw_two_stage_sample(pop, cfg.m, cfg.n_e, 11).sample;
    PipelineOptions opt;
    opt.survey = true;
    const Estimation est = estimate(s, Method::calibration, opt);
    const BootstrapResult boot = cluster_bootstrap_variance(s, Method::calibration, 200, 11, opt);
    std::printf("tau_hat %.4f\nplug-in variance %.5f\nbootstrap variance %.5f (200 replicates, %lld failed)\n",
                est.report.tau_hat, est.report.variance, boot.variance, static_cast<long long>(boot.failed));
}
