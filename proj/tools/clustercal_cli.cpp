// clustercal: estimate, balance and simulate from the command line.

#include <CLI11.hpp>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "clustercal/clustercal.hpp"

namespace {

using namespace clustercal;

struct RunConfig {
    std::string input;
    std::string design;
    std::string output;
    std::string format = "json";
    std::optional<std::uint64_t> seed;
    unsigned threads = 1;
    double level = 0.95;
    std::string method;
    std::string variance = "plugin";
    int bootstrap_reps = 500;
    bool survey = false;
    std::string simple_form = "total";
    bool dump_fit = false;
    std::string covariates;
    std::string scenario;
    std::optional<Index> m;
    std::optional<double> n_e;
    std::optional<int> reps;
    std::optional<Index> M;
    bool with_replicates = false;
    std::string dump_sample;
};

[[noreturn]] void config_error(const std::string& msg) { fail(ErrorCategory::config, errc::bad_option, msg); }

std::vector<Method> selected_methods(const std::string& text, bool default_all) {
    if (text.empty()) {
        if (default_all) return {std::begin(all_methods), std::end(all_methods)};
        return {Method::calibration};
    }
    if (text == "all") return {std::begin(all_methods), std::end(all_methods)};
    std::vector<Method> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto m = parse_method(item);
        if (!m) config_error("unknown method '" + item + "' (simple|fixed|random|calibration|all)");
        out.push_back(*m);
    }
    return out;
}

ClusteredSample load_input(const RunConfig& rc) {
    if (rc.input.empty()) config_error("--input is required");
    std::ifstream in(rc.input);
    if (!in) fail(ErrorCategory::config, errc::io, "cannot open input file " + rc.input);
    CsvSchema schema;
    if (!rc.covariates.empty()) {
        std::stringstream ss(rc.covariates);
        std::string item;
        while (std::getline(ss, item, ',')) schema.covariates.push_back(item);
    }
    std::optional<SampleDesign> design;
    if (!rc.design.empty()) {
        std::ifstream din(rc.design);
        if (!din) fail(ErrorCategory::config, errc::io, "cannot open design file " + rc.design);
        design = parse_design(din);
    }
    return load_csv(in, schema, design ? &*design : nullptr);
}

void emit(const RunConfig& rc, const std::string& text) {
    if (rc.output.empty()) {
        std::cout << text;
        std::cout.flush();
        return;
    }
    std::ofstream out(rc.output, std::ios::binary);
    if (!out) fail(ErrorCategory::config, errc::io, "cannot write output file " + rc.output);
    out << text;
}

void check_common(const RunConfig& rc) {
    if (rc.format != "json" && rc.format != "table") config_error("--format must be json or table");
    if (!(rc.level > 0.0 && rc.level < 1.0)) config_error("--level must lie in (0, 1)");
    if (rc.threads < 1) config_error("--threads must be at least 1");
}

SimpleForm simple_form(const RunConfig& rc) {
    const auto f = parse_simple_form(rc.simple_form);
    if (!f) config_error("--simple-form must be total or ratio");
    return *f;
}

std::string table_notes(const std::vector<EstimateReport>& reports) {
    std::string out;
    for (const auto& r : reports)
        for (const auto& n : r.notes) out += std::string(to_string(r.method)) + ": " + n + "\n";
    return out;
}

int cmd_estimate(const RunConfig& rc) {
    check_common(rc);
    const auto methods = selected_methods(rc.method, false);
    VarianceMethod vm = VarianceMethod::plugin;
    if (rc.variance == "bootstrap") vm = VarianceMethod::bootstrap;
    else if (rc.variance == "none") vm = VarianceMethod::none;
    else if (rc.variance != "plugin") config_error("--variance must be plugin, bootstrap or none");
    if (vm == VarianceMethod::bootstrap && !rc.seed) config_error("--seed is required with --variance bootstrap");
    if (rc.bootstrap_reps < 2) config_error("--bootstrap-reps must be at least 2");

    const ClusteredSample s = load_input(rc);
    PipelineOptions opt;
    opt.survey = rc.survey;
    opt.simple_form = simple_form(rc);
    json doc;
    doc["input"] = rc.input;
    doc["n"] = s.n();
    doc["m"] = s.m();
    doc["p"] = s.p();
    doc["survey"] = rc.survey;
    json estimates = json::array();
    std::vector<EstimateReport> reports;
    for (Method method : methods) {
        const Estimation est =
            estimate(s, method, opt, vm, rc.level, rc.bootstrap_reps, rc.seed.value_or(0), rc.threads);
        estimates.push_back(rc.dump_fit ? to_json(est) : to_json(est.report));
        reports.push_back(est.report);
    }
    doc["estimates"] = estimates;
    if (rc.format == "json") emit(rc, doc.dump(2) + "\n");
    else emit(rc, format_estimate_table(reports) + table_notes(reports));
    return 0;
}

int cmd_balance(const RunConfig& rc) {
    check_common(rc);
    const auto methods = selected_methods(rc.method, true);
    const ClusteredSample s = load_input(rc);
    PipelineOptions opt;
    opt.survey = rc.survey;
    std::vector<BalanceReport> reports;
    if (rc.survey) {
        const WeightSet w(s.design_weight(), WeightKind::initial);
        reports.push_back(standardized_differences(s, &w, "none"));
    } else {
        reports.push_back(standardized_differences(s, nullptr, "none"));
    }
    for (Method method : methods) {
        if (method == Method::simple) continue;
        const Estimation est = run_method(s, method, opt);
        const WeightSet w = balancing_weights(s, est, rc.survey);
        reports.push_back(standardized_differences(s, &w, std::string(to_string(method))));
    }
    if (rc.format == "json") {
        json doc;
        doc["input"] = rc.input;
        doc["survey"] = rc.survey;
        json arr = json::array();
        for (const auto& r : reports) arr.push_back(to_json(r));
        doc["balance"] = arr;
        emit(rc, doc.dump(2) + "\n");
    } else {
        emit(rc, format_balance_table(reports));
    }
    return 0;
}

int cmd_simulate(const RunConfig& rc) {
    check_common(rc);
    if (rc.scenario.empty()) config_error("--scenario is required");
    if (!rc.seed) config_error("--seed is required for simulate");
    ScenarioConfig cfg = scenario_preset(rc.scenario);
    if (rc.m) cfg.m = *rc.m;
    if (rc.n_e) cfg.n_e = *rc.n_e;
    if (rc.reps) cfg.reps = *rc.reps;
    if (rc.M) cfg.M = *rc.M;
    cfg.seed = *rc.seed;
    cfg.threads = rc.threads;
    cfg.level = rc.level;
    cfg.pipeline.simple_form = simple_form(rc);
    validate_config(cfg);
    if (!rc.dump_sample.empty()) {
        const FinitePopulation pop = generate_population(cfg, cfg.seed, 0);
        const TwoStageSample draw = draw_two_stage_sample(pop, cfg.m, cfg.n_e, cfg.seed, 0);
        std::ofstream csv(rc.dump_sample, std::ios::binary);
        std::ofstream dj(rc.dump_sample + ".design.json", std::ios::binary);
        if (!csv || !dj) fail(ErrorCategory::config, errc::io, "cannot write sample dump " + rc.dump_sample);
        write_csv(csv, draw.sample);
        dj << design_json(draw.sample).dump(2) << "\n";
    }
    const SimSummary summary = run_monte_carlo(cfg);
    if (rc.format == "json") emit(rc, to_json(summary, rc.with_replicates).dump(2) + "\n");
    else emit(rc, format_sim_table({summary}));
    return 0;
}

void report_error(const std::string& code, const std::string& category, const std::string& message) {
    json err{{"error", json{{"code", code}, {"category", category}, {"message", message}}}};
    std::cerr << err.dump() << std::endl;
}

std::string category_name(ErrorCategory c) {
    switch (c) {
    case ErrorCategory::config: return "config";
    case ErrorCategory::data: return "data";
    case ErrorCategory::numerical: return "numerical";
    }
    return "unknown";
}

} // namespace

int main(int argc, char** argv) {
    RunConfig rc;
    CLI::App app{"Calibrated propensity score weighting for clustered and survey data"};
    app.require_subcommand(1, 1);
    app.set_config("--config", "", "Read options from a key=value file; flags given on the command line win");
    app.add_option("--input", rc.input, "Input CSV (cluster, a, y, x1..xp, optional w, pi_i, pi_ji)");
    app.add_option("--design", rc.design, "Design metadata JSON (pi_i, N_i, joint inclusion probabilities)");
    app.add_option("--covariates", rc.covariates, "Comma-separated covariate columns (default: x1, x2, ...)");
    app.add_option("--output", rc.output, "Write the report here instead of standard output");
    app.add_option("--format", rc.format, "json or table")->capture_default_str();
    app.add_option("--seed", rc.seed, "Random seed (required for simulate and bootstrap)");
    app.add_option("--threads", rc.threads, "Worker threads for simulation and bootstrap")->capture_default_str();
    app.add_option("--level", rc.level, "Confidence level")->capture_default_str();
    app.add_option("--method", rc.method, "simple|fixed|random|calibration|all, or a comma list");
    app.add_option("--variance", rc.variance, "plugin|bootstrap|none")->capture_default_str();
    app.add_option("--bootstrap-reps", rc.bootstrap_reps, "Bootstrap replicates")->capture_default_str();
    app.add_flag("--survey", rc.survey, "Use design weights and survey calibration targets");
    app.add_option("--simple-form", rc.simple_form, "Unadjusted estimator: total (weighted sum of signed outcomes over N) or ratio (difference of weighted means)")
        ->capture_default_str();
    app.add_flag("--dump-fit", rc.dump_fit, "Include working-model and calibration fits in JSON output");
    app.add_option("--scenario", rc.scenario, "Simulation scenario 1..6 (or scenario1..scenario6)");
    app.add_option("--m", rc.m, "Sampled clusters");
    app.add_option("--ne", rc.n_e, "Expected units sampled per cluster");
    app.add_option("--reps", rc.reps, "Monte Carlo replicates");
    app.add_option("--M", rc.M, "Population clusters");
    app.add_flag("--replicates", rc.with_replicates, "Include per-replicate results in simulate JSON");
    app.add_option("--dump-sample", rc.dump_sample, "Write replicate 0's sample CSV (and <path>.design.json)");

    CLI::App* estimate_cmd = app.add_subcommand("estimate", "Estimate the average treatment effect")->fallthrough();
    CLI::App* balance_cmd = app.add_subcommand("balance", "Standardized differences before and after weighting")->fallthrough();
    CLI::App* simulate_cmd = app.add_subcommand("simulate", "Run a Monte Carlo scenario")->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        report_error(errc::bad_option, "config", e.what());
        return exit_code(ErrorCategory::config);
    }

    try {
        if (estimate_cmd->parsed()) return cmd_estimate(rc);
        if (balance_cmd->parsed()) return cmd_balance(rc);
        if (simulate_cmd->parsed()) return cmd_simulate(rc);
        config_error("no subcommand given");
    } catch (const Error& e) {
        report_error(e.code(), category_name(e.category()), e.what());
        return exit_code(e.category());
    } catch (const std::exception& e) {
        report_error("internal", "numerical", e.what());
        return 1;
    }
}
