// gridfit: distribution line parameter estimation from smart meter data.
//
// Subcommands: synth, estimate, gradcheck, partition-estimate, evaluate.
// All randomness flows from the run seed; outputs are reproducible
// bit-for-bit for identical inputs.

#include "gridfit/gradcheck.hpp"
#include "gridfit/io.hpp"
#include "gridfit/synthlab.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace gridfit;

namespace {

FeederModel load_feeder(const std::string& spec) {
    if (fs::exists(spec)) return read_feeder_file(spec);
    return builtin_feeder(spec);
}

std::vector<int> parse_batch(const std::string& spec, int T) {
    std::vector<int> batch;
    if (spec.empty()) {
        for (int t = 1; t <= std::min(T, 3); ++t) batch.push_back(t);
        return batch;
    }
    std::istringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) batch.push_back(std::stoi(tok));
    return batch;
}

struct CommonArgs {
    int threads = 0;
    std::string out_dir = ".";
};

void ensure_out(const CommonArgs& common) { fs::create_directories(common.out_dir); }

int cmd_synth(const std::string& config_path, CommonArgs common, std::uint64_t seed_override,
              bool has_seed) {
    ensure_out(common);
    ConfigFile cfg = ConfigFile::load(config_path);
    ScenarioFileConfig sc = parse_scenario_config(cfg);
    if (has_seed) sc.scenario.rng_seed = seed_override;

    FeederModel model = load_feeder(sc.feeder);
    if (sc.scenario.peak_kw <= 0.0 && !fs::exists(sc.feeder))
        sc.scenario.peak_kw = builtin_peak_kw(sc.feeder);
    ParameterVector w_true = pack_parameters(model);

    std::cout << "generating scenario: feeder " << sc.feeder << ", T = " << sc.scenario.horizon
              << ", class " << sc.scenario.meter_class << "%\n";
    Scenario scenario = generate_scenario(model, w_true, sc.scenario);

    ParameterVector w_initial =
        perturb_parameters(w_true, sc.scenario.perturb_half_width, sc.scenario.rng_seed);
    FeederModel initial_model = model;
    apply_parameters(initial_model, w_initial);

    const std::string dir = common.out_dir;
    write_feeder_file(dir + "/feeder_true.txt", model);
    write_feeder_file(dir + "/feeder_initial.txt", initial_model);
    write_meter_series(dir + "/meters.csv", model, scenario.data);
    write_source_series(dir + "/source.csv", scenario.data.source);

    RunManifest manifest;
    manifest.subcommand = "synth";
    manifest.config_path = config_path;
    manifest.seed = sc.scenario.rng_seed;
    manifest.inputs = {config_path};
    manifest.outputs = {dir + "/feeder_true.txt", dir + "/feeder_initial.txt",
                        dir + "/meters.csv", dir + "/source.csv"};

    if (!sc.cuts.empty()) {
        PartitionPlan plan = partition_network(model, sc.cuts);
        SolverConfig tight;
        tight.eps_forward = 1e-26;
        tight.max_iter = 100000;
        auto quasi = make_quasi_source_data(model, w_true, scenario.data, plan, tight,
                                            common.threads);
        for (const auto& [node, qd] : quasi) {
            write_quasi_source(dir, model.node_names[node], model, qd);
            manifest.outputs.push_back(dir + "/quasi_" + model.node_names[node] + "_source.csv");
            manifest.outputs.push_back(dir + "/quasi_" + model.node_names[node] + "_loads.csv");
        }
    }

    manifest.extra["meter_class"] = sc.scenario.meter_class;
    manifest.extra["unbalance"] = scenario.unbalance;
    manifest.extra["perturb_half_width"] = sc.scenario.perturb_half_width;
    std::vector<double> wt(w_true.data(), w_true.data() + w_true.size());
    manifest.extra["w_true"] = wt;
    manifest.write(dir + "/manifest.json");
    std::cout << "unbalance level " << scenario.unbalance << "; wrote " << dir << "\n";
    return 0;
}

int write_estimate_outputs(const FeederModel& model, const ParameterVector& w_initial,
                           const ParameterVector& w_best, const EstimationTrace& trace,
                           const std::string& variant, std::uint64_t seed,
                           const std::string& truth_path, const CommonArgs& common,
                           RunManifest& manifest) {
    const std::string dir = common.out_dir;
    FeederModel estimated = model;
    apply_parameters(estimated, w_best);
    write_text_file(dir + "/w_best.csv", parameter_table_text(model, w_best));
    write_feeder_file(dir + "/feeder_estimated.txt", estimated);
    write_text_file(dir + "/trace.csv", trace_text(trace));
    manifest.outputs = {dir + "/w_best.csv", dir + "/feeder_estimated.txt", dir + "/trace.csv"};

    if (!truth_path.empty()) {
        FeederModel truth = read_feeder_file(truth_path);
        ParameterVector w_true = pack_parameters(truth);
        double madr_initial = madr(w_initial, w_true);
        double madr_final = madr(w_best, w_true);
        std::ostringstream report;
        report << report_csv_header();
        if (madr_initial == 0.0) {
            report << variant << "," << seed << ",0,0,already-optimal\n";
            std::cout << "initial estimate already optimal (MADR 0)\n";
        } else {
            EvaluationReport rep;
            rep.variant = variant;
            rep.seed = seed;
            rep.madr_initial = madr_initial;
            rep.madr_final = madr_final;
            rep.improvement_pct = improvement(madr_initial, madr_final);
            rep.abs_deviation = (w_best - w_true).cwiseAbs();
            report << report_csv_row(rep);
            write_text_file(dir + "/deviations.csv", deviation_table_text(model, rep));
            manifest.outputs.push_back(dir + "/deviations.csv");
            std::cout << "MADR " << madr_initial << "% -> " << madr_final << "% (improvement "
                      << rep.improvement_pct << "%)\n";
        }
        write_text_file(dir + "/report.csv", report.str());
        manifest.outputs.push_back(dir + "/report.csv");
    }
    return 0;
}

int cmd_estimate(const std::string& feeder_path, const std::string& meters_path,
                 const std::string& source_path, const std::string& config_path,
                 const std::string& truth_path, CommonArgs common, std::uint64_t seed_override,
                 bool has_seed) {
    ensure_out(common);
    FeederModel model = load_feeder(feeder_path);
    TimeSeriesSet data = read_timeseries(meters_path, source_path, model);
    EstimationFileConfig ec =
        config_path.empty() ? EstimationFileConfig{}
                            : parse_estimation_config(ConfigFile::load(config_path));
    if (has_seed) ec.estimator.rng_seed = seed_override;
    ec.estimator.threads = common.threads;

    ParameterVector w_initial = pack_parameters(model);
    std::cout << "estimating " << model.num_params() << " parameters over T = " << data.T
              << " (" << ec.variant << ")\n";
    VariantResult res = run_variant(model, data, w_initial, parse_variant(ec.variant),
                                    ec.estimator);

    RunManifest manifest;
    manifest.subcommand = "estimate";
    manifest.config_path = config_path;
    manifest.seed = ec.estimator.rng_seed;
    manifest.inputs = {feeder_path, meters_path, source_path};
    if (!config_path.empty()) manifest.inputs.push_back(config_path);
    write_estimate_outputs(model, w_initial, res.w_best, res.trace, ec.variant,
                           ec.estimator.rng_seed, truth_path, common, manifest);
    manifest.write(common.out_dir + "/manifest.json");
    return 0;
}

int cmd_gradcheck(const std::string& feeder_path, const std::string& meters_path,
                  const std::string& source_path, const std::string& batch_spec,
                  double tolerance, CommonArgs common) {
    ensure_out(common);
    FeederModel model = load_feeder(feeder_path);
    TimeSeriesSet data = read_timeseries(meters_path, source_path, model);

    GradcheckOptions opts;
    opts.batch = parse_batch(batch_spec, data.T);
    opts.tolerance = tolerance;
    opts.threads = common.threads;
    GradcheckReport report = gradcheck(model, pack_parameters(model), data, opts);

    std::ostringstream out;
    out << "index,name,analytic,finite_difference,rel_error\n";
    for (const auto& row : report.rows)
        out << row.index << "," << row.name << "," << format_g17(row.analytic) << ","
            << format_g17(row.finite_difference) << "," << format_g17(row.rel_error) << "\n";
    write_text_file(common.out_dir + "/gradcheck.csv", out.str());

    std::cout << (report.pass ? "PASS" : "FAIL") << ": max relative error "
              << report.max_rel_error << " over " << report.rows.size()
              << " coordinates (tolerance " << tolerance << ", oracle sweeps "
              << report.oracle_sweeps << ")\n";

    RunManifest manifest;
    manifest.subcommand = "gradcheck";
    manifest.inputs = {feeder_path, meters_path, source_path};
    manifest.outputs = {common.out_dir + "/gradcheck.csv"};
    manifest.extra["max_rel_error"] = report.max_rel_error;
    manifest.extra["pass"] = report.pass;
    manifest.write(common.out_dir + "/manifest.json");
    return report.pass ? 0 : 1;
}

int cmd_partition_estimate(const std::string& feeder_path, const std::string& meters_path,
                           const std::string& source_path, const std::string& config_path,
                           const std::string& quasi_dir, const std::string& truth_path,
                           CommonArgs common, std::uint64_t seed_override, bool has_seed) {
    ensure_out(common);
    FeederModel model = load_feeder(feeder_path);
    TimeSeriesSet data = read_timeseries(meters_path, source_path, model);
    EstimationFileConfig ec = parse_estimation_config(ConfigFile::load(config_path));
    if (has_seed) ec.estimator.rng_seed = seed_override;
    if (ec.cuts.empty()) throw InvalidCut("config has no [partition] cut entries");

    PartitionPlan plan = partition_network(model, ec.cuts);
    std::map<int, QuasiSourceData> quasi;
    for (int q : plan.quasi_nodes)
        if (!quasi.count(q)) quasi[q] = read_quasi_source(quasi_dir, model.node_names[q], model);

    std::cout << "partitioned into " << plan.subs.size() << " sub-networks\n";
    std::vector<ParameterVector> sub_w(plan.subs.size());
    std::vector<EstimationTrace> sub_traces(plan.subs.size());
    parallel_for(
        plan.subs.size(),
        [&](std::size_t s) {
            const auto& sub = plan.subs[s];
            TimeSeriesSet sub_data = make_sub_timeseries(model, plan, s, data, quasi);
            ParameterVector sub_init = slice_parameters(sub, pack_parameters(model));
            EstimatorConfig cfg = ec.estimator;
            cfg.rng_seed = substream(ec.estimator.rng_seed, 0x73756273, s);
            cfg.threads = 1;
            VariantResult res =
                run_variant(sub.model, sub_data, sub_init, parse_variant(ec.variant), cfg);
            sub_w[s] = res.w_best;
            sub_traces[s] = res.trace;
        },
        common.threads);

    ParameterVector w_best = merge_estimates(model, plan, sub_w);

    RunManifest manifest;
    manifest.subcommand = "partition-estimate";
    manifest.config_path = config_path;
    manifest.seed = ec.estimator.rng_seed;
    manifest.inputs = {feeder_path, meters_path, source_path, config_path};
    for (std::size_t s = 0; s < plan.subs.size(); ++s) {
        std::string path = common.out_dir + "/trace_sub" + std::to_string(s) + ".csv";
        write_text_file(path, trace_text(sub_traces[s]));
        manifest.outputs.push_back(path);
    }
    write_estimate_outputs(model, pack_parameters(model), w_best, sub_traces[0], ec.variant,
                           ec.estimator.rng_seed, truth_path, common, manifest);
    manifest.write(common.out_dir + "/manifest.json");
    return 0;
}

int cmd_evaluate(const std::string& config_path, const std::string& variants_spec, int n_seeds,
                 CommonArgs common, std::uint64_t seed_override, bool has_seed) {
    ensure_out(common);
    ConfigFile cfg = ConfigFile::load(config_path);
    ScenarioFileConfig sc = parse_scenario_config(cfg);
    EstimationFileConfig ec = parse_estimation_config(cfg);
    if (has_seed) sc.scenario.rng_seed = seed_override;

    FeederModel model = load_feeder(sc.feeder);
    if (sc.scenario.peak_kw <= 0.0 && !fs::exists(sc.feeder))
        sc.scenario.peak_kw = builtin_peak_kw(sc.feeder);
    Scenario scenario = generate_scenario(model, pack_parameters(model), sc.scenario);

    AblationOptions opts;
    opts.variants.clear();
    std::istringstream ss(variants_spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) opts.variants.push_back(parse_variant(tok));
    opts.n_seeds = n_seeds;
    opts.base_seed = sc.scenario.rng_seed;
    opts.perturb_half_width = sc.scenario.perturb_half_width;
    opts.estimator = ec.estimator;
    opts.threads = common.threads;

    std::cout << "ablation: " << opts.variants.size() << " variants x " << n_seeds << " seeds\n";
    AblationResult result = ablation_run(model, scenario.data, opts);

    std::ostringstream runs;
    runs << report_csv_header();
    for (const auto& cell : result.cells) {
        if (cell.failed)
            std::cerr << "run failed: " << cell.error << "\n";
        else
            runs << report_csv_row(cell.report);
    }
    write_text_file(common.out_dir + "/runs.csv", runs.str());
    write_text_file(common.out_dir + "/quantiles.csv",
                    quantile_table_text(result, opts.variants));

    for (Variant v : opts.variants) {
        auto vals = result.improvements(variant_name(v));
        if (!vals.empty())
            std::cout << variant_name(v) << ": median improvement " << median(vals) << "% over "
                      << vals.size() << " runs\n";
    }

    RunManifest manifest;
    manifest.subcommand = "evaluate";
    manifest.config_path = config_path;
    manifest.seed = sc.scenario.rng_seed;
    manifest.inputs = {config_path};
    manifest.outputs = {common.out_dir + "/runs.csv", common.out_dir + "/quantiles.csv"};
    manifest.extra["unbalance"] = scenario.unbalance;
    manifest.write(common.out_dir + "/manifest.json");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gridfit: three-phase line parameter estimation from smart meter data"};
    app.require_subcommand(1);

    CommonArgs common;
    std::uint64_t seed_override = 0;
    bool has_seed = false;
    app.add_option("--threads", common.threads, "worker threads (GRIDFIT_THREADS overrides)");

    std::string config_path, feeder_path, meters_path, source_path, truth_path;
    std::string batch_spec, variants_spec = "GL,GL+CON,GL+MAP,GL+CON&MAP", quasi_dir = ".";
    double tolerance = 1e-4;
    int n_seeds = 5;

    auto add_seed = [&](CLI::App* sub) {
        sub->add_option("--seed", seed_override, "override the run seed")
            ->each([&](const std::string&) { has_seed = true; });
    };

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic measurement campaign");
    synth->add_option("--config", config_path, "scenario config file")->required();
    synth->add_option("--out", common.out_dir, "output directory");
    add_seed(synth);

    CLI::App* estimate = app.add_subcommand("estimate", "estimate line parameters from data");
    estimate->add_option("--feeder", feeder_path, "feeder file or builtin name")->required();
    estimate->add_option("--meters", meters_path, "meter series csv")->required();
    estimate->add_option("--source", source_path, "source series csv")->required();
    estimate->add_option("--config", config_path, "estimation config file");
    estimate->add_option("--truth", truth_path, "ground-truth feeder for the report");
    estimate->add_option("--out", common.out_dir, "output directory");
    add_seed(estimate);

    CLI::App* gradcheck_cmd =
        app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
    gradcheck_cmd->add_option("--feeder", feeder_path)->required();
    gradcheck_cmd->add_option("--meters", meters_path)->required();
    gradcheck_cmd->add_option("--source", source_path)->required();
    gradcheck_cmd->add_option("--batch", batch_spec, "comma-separated instants (default 1,2,3)");
    gradcheck_cmd->add_option("--tolerance", tolerance, "max relative error to pass");
    gradcheck_cmd->add_option("--out", common.out_dir, "output directory");

    CLI::App* part = app.add_subcommand("partition-estimate",
                                        "estimate sub-networks in parallel and merge");
    part->add_option("--feeder", feeder_path)->required();
    part->add_option("--meters", meters_path)->required();
    part->add_option("--source", source_path)->required();
    part->add_option("--config", config_path, "estimation config with [partition] cuts")
        ->required();
    part->add_option("--quasi-dir", quasi_dir, "directory holding quasi-source files");
    part->add_option("--truth", truth_path, "ground-truth feeder for the report");
    part->add_option("--out", common.out_dir, "output directory");
    add_seed(part);

    CLI::App* evaluate = app.add_subcommand("evaluate", "run a variant/seed ablation study");
    evaluate->add_option("--config", config_path, "scenario + estimation config")->required();
    evaluate->add_option("--variants", variants_spec, "comma-separated variant list");
    evaluate->add_option("--seeds", n_seeds, "number of seeds per variant");
    evaluate->add_option("--out", common.out_dir, "output directory");
    add_seed(evaluate);

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return cmd_synth(config_path, common, seed_override, has_seed);
        if (estimate->parsed())
            return cmd_estimate(feeder_path, meters_path, source_path, config_path, truth_path,
                                common, seed_override, has_seed);
        if (gradcheck_cmd->parsed())
            return cmd_gradcheck(feeder_path, meters_path, source_path, batch_spec, tolerance,
                                 common);
        if (part->parsed())
            return cmd_partition_estimate(feeder_path, meters_path, source_path, config_path,
                                          quasi_dir, truth_path, common, seed_override, has_seed);
        if (evaluate->parsed())
            return cmd_evaluate(config_path, variants_spec, n_seeds, common, seed_override,
                                has_seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
