#pragma once

// Finite-population generation under mixed-effects truth models, two-stage
// PPS + Poisson sampling, and the Monte Carlo harness comparing the four
// estimators by bias, variance and interval coverage.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clustercal/data_model.hpp"
#include "clustercal/error.hpp"
#include "clustercal/estimators.hpp"
#include "clustercal/parallel.hpp"
#include "clustercal/rng.hpp"
#include "clustercal/working_models.hpp"

namespace clustercal {

enum class OutcomeKind { linear, logistic };

inline std::string_view to_string(OutcomeKind k) { return k == OutcomeKind::linear ? "linear" : "logistic"; }

struct ScenarioConfig {
    std::string name = "custom";
    OutcomeKind outcome = OutcomeKind::linear;
    LinkKind link = LinkKind::logit;
    double gamma0 = -0.5;
    double gamma1 = 1.0;
    double tau = 2.0;
    Index M = 10000;
    Index m = 50;
    double n_e = 50.0;
    int reps = 200;
    std::uint64_t seed = 1;
    unsigned threads = 1;
    double level = 0.95;
    PipelineOptions pipeline = [] { PipelineOptions p; p.survey = true; return p; }();
};

/// Presets scenario1..scenario6.
inline ScenarioConfig scenario_preset(int id) {
    if (id < 1 || id > 6)
        fail(ErrorCategory::config, errc::unknown_scenario,
             "unknown scenario " + std::to_string(id) + " (expected 1..6)");
    ScenarioConfig c;
    c.name = "scenario" + std::to_string(id);
    c.outcome = id <= 3 ? OutcomeKind::linear : OutcomeKind::logistic;
    switch ((id - 1) % 3) {
    case 0: c.link = LinkKind::logit; c.gamma0 = -0.5; c.gamma1 = 1.0; break;
    case 1: c.link = LinkKind::probit; c.gamma0 = -0.25; c.gamma1 = 0.5; break;
    default: c.link = LinkKind::cloglog; c.gamma0 = -0.5; c.gamma1 = 0.1; break;
    }
    return c;
}

inline ScenarioConfig scenario_preset(const std::string& name) {
    const std::string prefix = "scenario";
    std::string digits = name.rfind(prefix, 0) == 0 ? name.substr(prefix.size()) : name;
    if (digits.empty() || digits.size() > 3 || !std::all_of(digits.begin(), digits.end(), [](unsigned char ch) { return std::isdigit(ch) != 0; }))
        fail(ErrorCategory::config, errc::unknown_scenario, "unknown scenario '" + name + "'");
    return scenario_preset(std::stoi(digits));
}

inline void validate_config(const ScenarioConfig& c) {
    auto bad = [](const std::string& msg) { fail(ErrorCategory::config, errc::sim_config, msg); };
    if (c.m < 1) bad("m must be at least 1");
    if (c.M < c.m) bad("M must be at least m");
    if (c.reps < 1) bad("reps must be at least 1");
    if (!(c.n_e > 0.0)) bad("n_e must be positive");
    if (!(c.level > 0.0 && c.level < 1.0)) bad("level must lie in (0, 1)");
    if (!std::isfinite(c.gamma0) || !std::isfinite(c.gamma1) || !std::isfinite(c.tau)) bad("parameters must be finite");
}

/// Cluster size rule: integer part of 500 * expit(2 + U).
inline Index cluster_size(double U) { return static_cast<Index>(std::floor(500.0 * detail::expit(2.0 + U))); }

struct FinitePopulation {
    OutcomeKind outcome = OutcomeKind::linear;
    std::vector<double> U;       // per cluster
    std::vector<Index> N;        // per cluster
    std::vector<Index> offset;   // first unit of each cluster
    std::vector<double> X, e, z, propensity, Y0, Y1, Y;
    std::vector<std::uint8_t> A;

    Index clusters() const { return static_cast<Index>(N.size()); }
    Index units() const { return static_cast<Index>(Y.size()); }
    /// Finite-population average treatment effect.
    double ate() const {
        double s = 0.0;
        for (std::size_t k = 0; k < Y.size(); ++k) s += Y1[k] - Y0[k];
        return s / static_cast<double>(Y.size());
    }
};

/// Draw one finite population from substream (seed, replicate, population).
inline FinitePopulation generate_population(const ScenarioConfig& cfg, std::uint64_t seed, std::uint32_t replicate = 0) {
    validate_config(cfg);
    Philox4x32 gen(seed, replicate, Stage::population);
    std::normal_distribution<double> normal;
    FinitePopulation pop;
    pop.outcome = cfg.outcome;
    const auto M = static_cast<std::size_t>(cfg.M);
    pop.U.resize(M);
    pop.N.resize(M);
    pop.offset.resize(M);
    Index total = 0;
    for (std::size_t i = 0; i < M; ++i) {
        pop.U[i] = normal(gen);
        pop.N[i] = cluster_size(pop.U[i]);
        pop.offset[i] = total;
        total += pop.N[i];
    }
    const auto n = static_cast<std::size_t>(total);
    for (auto* v : {&pop.X, &pop.e, &pop.z, &pop.propensity, &pop.Y0, &pop.Y1, &pop.Y}) v->resize(n);
    pop.A.resize(n);
    for (std::size_t i = 0; i < M; ++i) {
        const double U = pop.U[i];
        for (Index j = 0; j < pop.N[i]; ++j) {
            const auto k = static_cast<std::size_t>(pop.offset[i] + j);
            const double x = normal(gen);
            const double eps = normal(gen);
            pop.X[k] = x;
            pop.e[k] = eps;
            pop.propensity[k] = inverse_link(cfg.link, cfg.gamma0 + cfg.gamma1 * U + x);
            pop.A[k] = uniform01(gen) < pop.propensity[k] ? 1 : 0;
            if (cfg.outcome == OutcomeKind::linear) {
                pop.Y0[k] = x + U + eps;
                pop.Y1[k] = x + cfg.tau + cfg.tau * U + eps;
            } else {
                pop.Y0[k] = uniform01(gen) < detail::expit(x + U) ? 1.0 : 0.0;
                pop.Y1[k] = uniform01(gen) < detail::expit(x + cfg.tau + cfg.tau * U) ? 1.0 : 0.0;
            }
            pop.Y[k] = pop.A[k] ? pop.Y1[k] : pop.Y0[k];
            const bool low = cfg.outcome == OutcomeKind::linear ? eps < 0.0 : pop.Y[k] == 0.0;
            pop.z[k] = low ? 0.5 : 1.0;
        }
    }
    return pop;
}

/// First-stage inclusion probabilities pi_i = m N_i / sum N, with clusters
/// whose value reaches 1 taken with certainty and the rest rescaled.
inline std::vector<double> pps_probabilities(const std::vector<Index>& N, Index m) {
    std::vector<double> pi(N.size(), 0.0);
    std::vector<bool> certain(N.size(), false);
    for (;;) {
        Index k = 0;
        double rest = 0.0;
        for (std::size_t i = 0; i < N.size(); ++i) {
            if (certain[i]) ++k;
            else rest += static_cast<double>(N[i]);
        }
        bool changed = false;
        for (std::size_t i = 0; i < N.size(); ++i) {
            if (certain[i]) {
                pi[i] = 1.0;
                continue;
            }
            pi[i] = rest > 0.0 ? static_cast<double>(m - k) * static_cast<double>(N[i]) / rest : 0.0;
            if (pi[i] >= 1.0) {
                certain[i] = true;
                changed = true;
            }
        }
        if (!changed) return pi;
    }
}

/// Hartley-Rao approximation to the joint inclusion probability of a
/// fixed-size pi-ps design with n draws.
inline double hartley_rao_joint(double pi_i, double pi_j, double n, double sum_pi_sq) {
    if (pi_i >= 1.0 || pi_j >= 1.0) return pi_i * pi_j;
    const double v = (n - 1.0) / n * pi_i * pi_j + (n - 1.0) / (n * n) * (pi_i * pi_i * pi_j + pi_i * pi_j * pi_j) -
                     (n - 1.0) / (n * n * n) * pi_i * pi_j * sum_pi_sq;
    return std::clamp(v, 1e-3 * pi_i * pi_j, std::min(pi_i, pi_j));
}

struct TwoStageSample {
    ClusteredSample sample;
    std::vector<Index> selected;   // population indices of retained clusters
    Index clamped_units = 0;       // units with n_e z / sum z > 1, clamped to 1
    Index dropped_clusters = 0;    // selected clusters lacking one arm in the sample
};

/// Systematic PPS on a randomly ordered cluster list, then Poisson sampling
/// within clusters with pi_{j|i} = n_e z_ij / sum_j z_ij.
inline TwoStageSample draw_two_stage_sample(const FinitePopulation& pop, Index m, double n_e, std::uint64_t seed,
                                            std::uint32_t replicate = 0) {
    if (m < 1 || m > pop.clusters())
        fail(ErrorCategory::config, errc::sim_config, "m must lie in [1, M]");
    if (!(n_e > 0.0)) fail(ErrorCategory::config, errc::sim_config, "n_e must be positive");
    Philox4x32 gen(seed, replicate, Stage::sampling);
    const std::vector<double> pi = pps_probabilities(pop.N, m);

    std::vector<Index> order(static_cast<std::size_t>(pop.clusters()));
    std::iota(order.begin(), order.end(), Index{0});
    for (std::size_t i = order.size(); i > 1; --i) {
        const auto j = std::min<std::size_t>(i - 1, static_cast<std::size_t>(uniform01(gen) * static_cast<double>(i)));
        std::swap(order[i - 1], order[j]);
    }
    std::vector<Index> chosen;
    double next = uniform01(gen), cum = 0.0;
    for (Index c : order) {
        cum += pi[static_cast<std::size_t>(c)];
        while (next < cum && static_cast<Index>(chosen.size()) < m) {
            if (chosen.empty() || chosen.back() != c) chosen.push_back(c);
            next += 1.0;
        }
    }
    std::sort(chosen.begin(), chosen.end());

    TwoStageSample out;
    std::vector<Unit> rows;
    SampleDesign design;
    double total = 0.0;
    for (Index v : pop.N) total += static_cast<double>(v);
    design.total_population = total;
    char key[32];
    for (Index c : chosen) {
        const auto ci = static_cast<std::size_t>(c);
        const Index off = pop.offset[ci], Ni = pop.N[ci];
        double zsum = 0.0;
        for (Index j = 0; j < Ni; ++j) zsum += pop.z[static_cast<std::size_t>(off + j)];
        std::snprintf(key, sizeof key, "c%06lld", static_cast<long long>(c));
        std::vector<Unit> members;
        std::vector<double> probs;
        int treated = 0;
        Index clamped = 0;
        for (Index j = 0; j < Ni; ++j) {
            const auto k = static_cast<std::size_t>(off + j);
            double pj = n_e * pop.z[k] / zsum;
            if (pj > 1.0) {
                pj = 1.0;
                ++clamped;
            }
            if (!(uniform01(gen) < pj)) continue;
            Unit u;
            u.cluster_key = key;
            u.covariates = {pop.X[k]};
            u.treatment = pop.A[k];
            u.outcome = pop.Y[k];
            u.second_stage_prob = pj;
            u.first_stage_prob = pi[ci];
            u.design_weight = 1.0 / (pi[ci] * pj);
            treated += pop.A[k];
            members.push_back(std::move(u));
            probs.push_back(pj);
        }
        out.clamped_units += clamped;
        if (treated == 0 || treated == static_cast<int>(members.size())) {
            ++out.dropped_clusters;
            continue;
        }
        const auto ni = static_cast<Index>(members.size());
        Eigen::MatrixXd J(ni, ni);
        for (Index a = 0; a < ni; ++a)
            for (Index b = 0; b < ni; ++b)
                J(a, b) = a == b ? probs[static_cast<std::size_t>(a)]
                                 : probs[static_cast<std::size_t>(a)] * probs[static_cast<std::size_t>(b)];
        ClusterMeta meta;
        meta.first_stage_prob = pi[ci];
        meta.population_size = static_cast<double>(Ni);
        meta.joint_second_stage_probs = std::move(J);
        design.clusters.emplace(key, std::move(meta));
        design.joint_cluster_keys.push_back(key);
        out.selected.push_back(c);
        for (auto& u : members) rows.push_back(std::move(u));
    }
    if (out.selected.size() < 2)
        fail(ErrorCategory::data, errc::empty_input, "fewer than two sampled clusters contain both arms");

    double sum_pi_sq = 0.0;
    for (double v : pi) sum_pi_sq += v * v;
    const auto r = static_cast<Index>(out.selected.size());
    Eigen::MatrixXd P(r, r);
    for (Index a = 0; a < r; ++a)
        for (Index b = 0; b < r; ++b) {
            const double pa = pi[static_cast<std::size_t>(out.selected[static_cast<std::size_t>(a)])];
            const double pb = pi[static_cast<std::size_t>(out.selected[static_cast<std::size_t>(b)])];
            P(a, b) = a == b ? pa : hartley_rao_joint(pa, pb, static_cast<double>(m), sum_pi_sq);
        }
    design.joint_cluster_probs = std::move(P);
    out.sample = validate_sample(rows, &design, {"x1"});
    return out;
}

struct ReplicateResult {
    double truth = 0.0;
    bool sampled = false;
    Index clamped_units = 0;
    Index dropped_clusters = 0;
    Index n = 0;
    std::array<bool, 4> ok{};
    std::array<double, 4> tau_hat{};
    std::array<double, 4> variance{};
    std::array<bool, 4> covered{};
    std::array<std::string, 4> error;
};

struct MethodSummary {
    Method method = Method::calibration;
    double bias = 0.0;
    double variance = 0.0;      // Monte Carlo variance of tau_hat
    double coverage = 0.0;      // percent
    double mean_variance_estimate = 0.0;
    Index successes = 0;
    Index failures = 0;
};

struct SimSummary {
    ScenarioConfig config;
    int replicates = 0;
    double mean_truth = 0.0;
    Index failures = 0;         // replicates where at least one method failed
    Index clamped_units = 0;
    Index dropped_clusters = 0;
    std::vector<MethodSummary> methods;
    std::vector<ReplicateResult> replicate_results;
};

inline std::size_t method_index(Method m) { return static_cast<std::size_t>(m); }

/// One Monte Carlo replicate: population, sample, all four estimators.
inline ReplicateResult run_replicate(const ScenarioConfig& cfg, std::uint32_t r) {
    ReplicateResult res;
    const FinitePopulation pop = generate_population(cfg, cfg.seed, r);
    res.truth = pop.ate();
    std::optional<TwoStageSample> draw;
    try {
        draw = draw_two_stage_sample(pop, cfg.m, cfg.n_e, cfg.seed, r);
    } catch (const Error& e) {
        for (auto& msg : res.error) msg = e.code();
        return res;
    }
    res.sampled = true;
    res.clamped_units = draw->clamped_units;
    res.dropped_clusters = draw->dropped_clusters;
    res.n = draw->sample.n();
    for (Method method : all_methods) {
        const std::size_t k = method_index(method);
        try {
            const Estimation est = estimate(draw->sample, method, cfg.pipeline, VarianceMethod::plugin, cfg.level);
            res.tau_hat[k] = est.report.tau_hat;
            res.variance[k] = est.report.variance;
            res.covered[k] = est.report.ci_low <= res.truth && res.truth <= est.report.ci_high;
            res.ok[k] = true;
        } catch (const Error& e) {
            res.error[k] = e.code();
        }
    }
    return res;
}

inline SimSummary summarize(const ScenarioConfig& cfg, std::vector<ReplicateResult> results) {
    SimSummary s;
    s.config = cfg;
    s.replicates = static_cast<int>(results.size());
    for (const auto& r : results) {
        s.mean_truth += r.truth / static_cast<double>(results.size());
        s.clamped_units += r.clamped_units;
        s.dropped_clusters += r.dropped_clusters;
        if (!(r.ok[0] && r.ok[1] && r.ok[2] && r.ok[3])) ++s.failures;
    }
    for (Method method : all_methods) {
        const std::size_t k = method_index(method);
        MethodSummary ms;
        ms.method = method;
        double sum = 0.0, bias = 0.0, var_est = 0.0, cover = 0.0;
        for (const auto& r : results) {
            if (!r.ok[k]) {
                ++ms.failures;
                continue;
            }
            ++ms.successes;
            sum += r.tau_hat[k];
            bias += r.tau_hat[k] - r.truth;
            var_est += r.variance[k];
            cover += r.covered[k] ? 1.0 : 0.0;
        }
        if (ms.successes > 0) {
            const double cnt = static_cast<double>(ms.successes);
            const double mean = sum / cnt;
            ms.bias = bias / cnt;
            ms.mean_variance_estimate = var_est / cnt;
            ms.coverage = 100.0 * cover / cnt;
            double ss = 0.0;
            for (const auto& r : results)
                if (r.ok[k]) ss += (r.tau_hat[k] - mean) * (r.tau_hat[k] - mean);
            ms.variance = ms.successes > 1 ? ss / (cnt - 1.0) : 0.0;
        } else {
            ms.bias = ms.variance = ms.coverage = ms.mean_variance_estimate = std::numeric_limits<double>::quiet_NaN();
        }
        s.methods.push_back(ms);
    }
    s.replicate_results = std::move(results);
    return s;
}

/// Replicates run on cfg.threads workers; results are aggregated in
/// replicate order so the summary does not depend on the thread count.
inline SimSummary run_monte_carlo(const ScenarioConfig& cfg) {
    validate_config(cfg);
    std::vector<ReplicateResult> results(static_cast<std::size_t>(cfg.reps));
    parallel_for(results.size(), cfg.threads,
                 [&](std::size_t r) { results[r] = run_replicate(cfg, static_cast<std::uint32_t>(r)); });
    return summarize(cfg, std::move(results));
}

/// Text table: one row per method, one (bias, var x 1e-3, cvg) block per summary.
inline std::string format_sim_table(const std::vector<SimSummary>& blocks) {
    if (blocks.empty()) return {};
    std::ostringstream out;
    char buf[96];
    const SimSummary& first = blocks.front();
    out << first.config.name << ": " << to_string(first.config.outcome) << " outcome, "
        << to_string(first.config.link) << " propensity score\n";
    std::snprintf(buf, sizeof buf, "%-12s", "");
    out << buf;
    for (const auto& b : blocks) {
        std::snprintf(buf, sizeof buf, "(m,n_e)=(%lld,%g)", static_cast<long long>(b.config.m), b.config.n_e);
        std::string head = std::string("  ") + buf;
        head.resize(38, ' ');
        out << head;
    }
    out << '\n';
    std::snprintf(buf, sizeof buf, "%-12s", "Method");
    out << buf;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        std::snprintf(buf, sizeof buf, "  %12s%12s%12s", "bias", "var", "cvg");
        out << buf;
    }
    out << '\n';
    for (std::size_t k = 0; k < first.methods.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%-12s", std::string(to_string(first.methods[k].method)).c_str());
        out << buf;
        for (const auto& b : blocks) {
            const MethodSummary& ms = b.methods[k];
            std::snprintf(buf, sizeof buf, "  %12.6g%12.6g%12.6g", ms.bias, ms.variance * 1e3, ms.coverage);
            out << buf;
        }
        out << '\n';
    }
    for (const auto& b : blocks) {
        std::snprintf(buf, sizeof buf, "replicates %d, failures %lld, clamped units %lld, dropped clusters %lld\n",
                      b.replicates, static_cast<long long>(b.failures), static_cast<long long>(b.clamped_units),
                      static_cast<long long>(b.dropped_clusters));
        out << buf;
    }
    return out.str();
}

} // namespace clustercal
