#pragma once

#include "gridfit/estimator.hpp"
#include "gridfit/synthlab.hpp"

#include <algorithm>

namespace gridfit {

// ---------------------------------------------------------------------------
// Accuracy metrics
// ---------------------------------------------------------------------------

/// Mean absolute deviation ratio, percent:
/// MADR = sum |w_i - w*_i| / sum |w*_i| * 100.
inline double madr(const ParameterVector& w, const ParameterVector& w_true) {
    if (w.size() != w_true.size()) throw IndexOutOfRange("parameter vector lengths differ");
    double denom = w_true.cwiseAbs().sum();
    if (denom == 0.0) throw ZeroTruth("all-zero ground truth");
    return (w - w_true).cwiseAbs().sum() / denom * 100.0;
}

/// Percent MADR improvement; 100 is perfect estimation, negative means the
/// estimate moved away from the truth.
inline double improvement(double madr_initial, double madr_final) {
    if (!(madr_initial > 0.0)) throw DegenerateInitial("madr_initial must be > 0");
    return (madr_initial - madr_final) / madr_initial * 100.0;
}

// ---------------------------------------------------------------------------
// Run reports
// ---------------------------------------------------------------------------

struct EvaluationReport {
    std::string variant;
    std::uint64_t seed = 0;
    double madr_initial = 0.0;
    double madr_final = 0.0;
    double improvement_pct = 0.0;
    Eigen::VectorXd abs_deviation;     // per parameter, |w - w_true|
    std::vector<double> loss_curve;    // J_best per epoch
};

inline EvaluationReport make_report(const std::string& variant, std::uint64_t seed,
                                    const ParameterVector& w_initial,
                                    const ParameterVector& w_final,
                                    const ParameterVector& w_true,
                                    const EstimationTrace& trace) {
    EvaluationReport rep;
    rep.variant = variant;
    rep.seed = seed;
    rep.madr_initial = madr(w_initial, w_true);
    rep.madr_final = madr(w_final, w_true);
    rep.improvement_pct = improvement(rep.madr_initial, rep.madr_final);
    rep.abs_deviation = (w_final - w_true).cwiseAbs();
    for (const auto& e : trace.epochs) rep.loss_curve.push_back(e.j_best);
    return rep;
}

// ---------------------------------------------------------------------------
// Ablation runs (variants x seeds)
// ---------------------------------------------------------------------------

struct AblationOptions {
    std::vector<Variant> variants = {Variant::GL, Variant::GL_CON, Variant::GL_MAP,
                                     Variant::GL_CON_MAP};
    int n_seeds = 5;
    std::uint64_t base_seed = 1;
    double perturb_half_width = 0.5;
    EstimatorConfig estimator;
    int threads = 0;
};

struct AblationCell {
    EvaluationReport report;
    bool failed = false;
    std::string error;
};

struct AblationResult {
    std::vector<AblationCell> cells;  // seeds-major within each variant

    std::vector<double> improvements(const std::string& variant) const {
        std::vector<double> vals;
        for (const auto& c : cells)
            if (!c.failed && c.report.variant == variant) vals.push_back(c.report.improvement_pct);
        return vals;
    }
};

inline double quantile(std::vector<double> vals, double q) {
    if (vals.empty()) throw IndexOutOfRange("quantile of empty set");
    std::sort(vals.begin(), vals.end());
    double pos = q * (vals.size() - 1);
    std::size_t lo = static_cast<std::size_t>(pos);
    std::size_t hi = std::min(lo + 1, vals.size() - 1);
    double frac = pos - lo;
    return vals[lo] * (1.0 - frac) + vals[hi] * frac;
}

inline double median(const std::vector<double>& vals) { return quantile(vals, 0.5); }

/// Runs every (variant, seed) combination on one generated scenario. The
/// per-run seed drives the initial perturbation and the SGD batch stream;
/// paired seeds across variants share the same starting point. Failed runs
/// are recorded and the sweep continues.
inline AblationResult ablation_run(const FeederModel& model, const TimeSeriesSet& data,
                                   const AblationOptions& opts) {
    if (data.w_true.size() == 0) throw ZeroTruth("scenario carries no ground truth");
    AblationResult result;
    struct Job {
        Variant variant;
        int seed_index;
    };
    std::vector<Job> jobs;
    for (Variant v : opts.variants)
        for (int s = 0; s < opts.n_seeds; ++s) jobs.push_back({v, s});
    result.cells.resize(jobs.size());
    parallel_for(
        jobs.size(),
        [&](std::size_t ji) {
            const Job& job = jobs[ji];
            std::uint64_t run_seed = substream(opts.base_seed, 0x72756e73, job.seed_index);
            AblationCell cell;
            try {
                ParameterVector w_initial =
                    perturb_parameters(data.w_true, opts.perturb_half_width, run_seed);
                EstimatorConfig cfg = opts.estimator;
                cfg.rng_seed = run_seed;
                cfg.threads = 1;
                VariantResult res = run_variant(model, data, w_initial, job.variant, cfg);
                cell.report = make_report(variant_name(job.variant), run_seed, w_initial,
                                          res.w_best, data.w_true, res.trace);
            } catch (const Error& e) {
                cell.failed = true;
                cell.error = e.what();
            }
            result.cells[ji] = std::move(cell);
        },
        opts.threads);
    return result;
}

}  // namespace gridfit
