#pragma once

#include "gridfit/gradengine.hpp"

#include <chrono>
#include <limits>
#include <numeric>
#include <random>

namespace gridfit {

// ---------------------------------------------------------------------------
// Prior, bounds, configuration
// ---------------------------------------------------------------------------

/// Gaussian prior on the parameters plus the meter-noise variance feeding the
/// MAP penalty weight.
struct PriorModel {
    Eigen::VectorXd mu;
    Eigen::VectorXd sigma_w;
    double gamma = 1.0;      // regularization factor; 0 disables the prior
    double sigma_v_sq = 0.0; // estimated first-difference noise variance

    /// Default construction per the usual field recipe: centered at the
    /// initial (GIS) estimate with three standard deviations spanning +/-50%.
    static PriorModel from_initial(const ParameterVector& w_initial, double gamma_ = 1.0,
                                   double sigma_rel = 0.5 / 3.0) {
        PriorModel p;
        p.mu = w_initial;
        p.sigma_w = (w_initial.cwiseAbs() * sigma_rel).cwiseMax(1e-12);
        p.gamma = gamma_;
        return p;
    }

    static PriorModel none(Eigen::Index n) {
        PriorModel p;
        p.mu = Eigen::VectorXd::Zero(n);
        p.sigma_w = Eigen::VectorXd::Ones(n);
        p.gamma = 0.0;
        return p;
    }

    void validate() const {
        if (mu.size() != sigma_w.size()) throw IndexOutOfRange("prior vector lengths differ");
        if ((sigma_w.array() <= 0.0).any()) throw IndexOutOfRange("prior sigma_w must be > 0");
        if (gamma < 0.0) throw IndexOutOfRange("gamma must be >= 0");
    }
};

/// R(w) = (sigma_v^2 / TM) sum (w_i - mu_i)^2 / sigma_wi^2 and its gradient.
inline std::pair<double, Eigen::VectorXd> regularizer(const ParameterVector& w,
                                                      const PriorModel& prior, int T, int M) {
    prior.validate();
    if (w.size() != prior.mu.size()) throw IndexOutOfRange("parameter/prior length mismatch");
    double scale = prior.sigma_v_sq / (static_cast<double>(T) * M);
    Eigen::ArrayXd dev = (w - prior.mu).array();
    Eigen::ArrayXd inv_var = prior.sigma_w.array().square().inverse();
    double r = scale * (dev.square() * inv_var).sum();
    Eigen::VectorXd grad = (2.0 * scale) * (dev * inv_var).matrix();
    return {r, grad};
}

/// sigma_v^2 =~ T/(T-1) e_w(T_full).
inline double estimate_sigma_v(double e_full, int T) {
    if (T < 2) throw IndexOutOfRange("sigma_v estimate needs T >= 2");
    if (e_full < 0.0) throw IndexOutOfRange("negative loss");
    return e_full * static_cast<double>(T) / (T - 1.0);
}

struct BoundBox {
    Eigen::VectorXd lower;
    Eigen::VectorXd upper;

    static BoundBox unbounded(Eigen::Index n) {
        BoundBox b;
        b.lower = Eigen::VectorXd::Constant(n, -std::numeric_limits<double>::infinity());
        b.upper = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
        return b;
    }

    /// [2/3 w_initial, 2 w_initial], the box implied by a +/-50% prior range.
    static BoundBox from_initial(const ParameterVector& w_initial, double lower_factor = 2.0 / 3.0,
                                 double upper_factor = 2.0) {
        BoundBox b;
        b.lower = w_initial * lower_factor;
        b.upper = w_initial * upper_factor;
        for (Eigen::Index i = 0; i < w_initial.size(); ++i)
            if (b.lower[i] > b.upper[i]) std::swap(b.lower[i], b.upper[i]);
        return b;
    }

    void validate() const {
        if (lower.size() != upper.size()) throw IndexOutOfRange("bound vector lengths differ");
        if ((lower.array() > upper.array()).any())
            throw IndexOutOfRange("bound box has lower > upper");
    }

    bool contains(const ParameterVector& w) const {
        return (w.array() >= lower.array()).all() && (w.array() <= upper.array()).all();
    }
};

/// CONS(w, w_min, w_max): elementwise clamp, idempotent.
inline ParameterVector cons_project(const ParameterVector& w, const BoundBox& bounds) {
    bounds.validate();
    if (w.size() != bounds.lower.size()) throw IndexOutOfRange("parameter/bounds length mismatch");
    return w.cwiseMax(bounds.lower).cwiseMin(bounds.upper);
}

struct EstimatorConfig {
    int n_batch = 10;
    int n_patience = 10;
    double s_initial = 1000.0;
    double alpha = 0.3;
    double beta = 0.5;
    double eps_stop = 0.01;
    std::uint64_t rng_seed = 1;
    int max_epochs = 200;              // safety cap; the stopping rule usually fires first
    double batch_failure_limit = 0.10; // abort when this fraction of batches fails
    double step_underflow_factor = 1e-16;
    SolverConfig forward;
    BackwardConfig backward;
    int threads = 0;

    void validate() const {
        if (n_batch < 1 || n_patience < 1 || max_epochs < 1)
            throw IndexOutOfRange("n_batch, n_patience and max_epochs must be >= 1");
        if (!(s_initial > 0.0)) throw IndexOutOfRange("s_initial must be > 0");
        if (!(alpha > 0.0 && alpha < 1.0 && beta > 0.0 && beta < 1.0))
            throw IndexOutOfRange("alpha and beta must lie in (0,1)");
        if (!(eps_stop > 0.0)) throw IndexOutOfRange("eps_stop must be > 0");
    }
};

// ---------------------------------------------------------------------------
// Backtracking line search (Alg. 3 steps 8-13)
// ---------------------------------------------------------------------------

/// Projects each trial step into the box, then applies the Armijo test
/// J(temp) <= J(w) + alpha s grad'J . delta. Returns the accepted point and
/// the accepted s. The loss functor may throw SolveError; that trial counts
/// as infinitely bad and the step keeps shrinking.
template <typename LossFn>
std::pair<ParameterVector, double> line_search(const LossFn& loss_of, const ParameterVector& w,
                                               double j_w, const Eigen::VectorXd& grad_j,
                                               const Eigen::VectorXd& delta_w,
                                               const BoundBox& bounds,
                                               const EstimatorConfig& cfg,
                                               int* halvings_out = nullptr) {
    double directional = grad_j.dot(delta_w);
    double s = cfg.s_initial;
    int halvings = 0;
    for (;;) {
        ParameterVector w_temp = cons_project(w + s * delta_w, bounds);
        double j_temp;
        try {
            j_temp = loss_of(w_temp);
        } catch (const SolveError&) {
            j_temp = std::numeric_limits<double>::infinity();
        }
        if (!(j_temp > j_w + cfg.alpha * s * directional)) {
            if (halvings_out) *halvings_out = halvings;
            return {w_temp, s};
        }
        s *= cfg.beta;
        ++halvings;
        if (s < cfg.step_underflow_factor * cfg.s_initial)
            throw StepUnderflow("no Armijo-acceptable step above " + format_g17(s));
    }
}

// ---------------------------------------------------------------------------
// SGD estimation (Alg. 3)
// ---------------------------------------------------------------------------

struct EpochRecord {
    int epoch = 0;
    double j_best = 0.0;
    double j_full = 0.0;
    double step_accept_rate = 0.0;  // accepted batch updates / batches
    double wall_ms = 0.0;
};

struct EstimationTrace {
    double j_initial = 0.0;
    std::vector<EpochRecord> epochs;  // j_best column is the non-increasing J_history
    int batches_failed = 0;
    int batches_total = 0;
    std::string stop_reason;
};

struct EstimationResult {
    ParameterVector w_best;
    double j_best = 0.0;
    EstimationTrace trace;
};

namespace detail {

/// Random disjoint mini-batches of 1..T; a named per-epoch stream drives the
/// permutation so runs are reproducible.
inline std::vector<std::vector<int>> split_batches(int T, int n_batch, std::uint64_t seed,
                                                   int epoch) {
    std::vector<int> ts(T);
    std::iota(ts.begin(), ts.end(), 1);
    std::mt19937_64 rng(substream(seed, 0x65706f63, static_cast<std::uint64_t>(epoch)));
    std::shuffle(ts.begin(), ts.end(), rng);
    std::vector<std::vector<int>> batches;
    for (int start = 0; start < T; start += n_batch) {
        int len = std::min(n_batch, T - start);
        batches.emplace_back(ts.begin() + start, ts.begin() + start + len);
    }
    return batches;
}

}  // namespace detail

/// Minimizes J_w(T) = e_w(T) + gamma R(w) by projected mini-batch descent
/// with backtracking line search, tracking the best full-batch J. Stops when
/// J_history improves by less than eps_stop over n_patience epochs.
inline EstimationResult sgd_estimate(const FeederModel& model, const TimeSeriesSet& data,
                                     const ParameterVector& w_initial, const PriorModel& prior,
                                     const BoundBox& bounds, const EstimatorConfig& cfg) {
    cfg.validate();
    prior.validate();
    bounds.validate();
    const int T = data.T;
    const int M = model.num_meters();
    if (T < 1) throw IndexOutOfRange("data horizon");

    std::vector<int> full_batch(T);
    std::iota(full_batch.begin(), full_batch.end(), 1);

    auto j_of = [&](const ParameterVector& w, const std::vector<int>& batch) {
        double e = loss(model, w, batch, data, cfg.forward, cfg.threads);
        if (prior.gamma == 0.0) return e;
        return e + prior.gamma * regularizer(w, prior, T, M).first;
    };

    EstimationResult result;
    EstimationTrace& trace = result.trace;

    ParameterVector w_iter = cons_project(w_initial, bounds);
    ParameterVector w_best = w_iter;
    double j_best = j_of(w_iter, full_batch);
    trace.j_initial = j_best;

    std::vector<double> j_history = {j_best};

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        auto epoch_start = std::chrono::steady_clock::now();
        auto batches = detail::split_batches(T, cfg.n_batch, cfg.rng_seed, epoch);
        int accepted = 0;
        int failed = 0;
        for (const auto& batch : batches) {
            ++trace.batches_total;
            try {
                double e_batch = 0.0;
                Eigen::VectorXd grad = backward_gradient(model, w_iter, batch, data, cfg.forward,
                                                         cfg.backward, cfg.threads, nullptr,
                                                         &e_batch);
                double j_batch = e_batch;
                if (prior.gamma != 0.0) {
                    auto [r, r_grad] = regularizer(w_iter, prior, T, M);
                    j_batch += prior.gamma * r;
                    grad += prior.gamma * r_grad;
                }
                auto [w_new, s_used] = line_search(
                    [&](const ParameterVector& w) { return j_of(w, batch); }, w_iter, j_batch,
                    grad, Eigen::VectorXd(-grad), bounds, cfg);
                w_iter = w_new;
                ++accepted;
            } catch (const SolveError&) {
                ++failed;
                ++trace.batches_failed;
            }
        }

        if (epoch == 1 && accepted == 0)
            throw NoProgress("every mini-batch of the first epoch failed");
        if (trace.batches_failed >
            cfg.batch_failure_limit * static_cast<double>(trace.batches_total))
            throw NoProgress(std::to_string(trace.batches_failed) + " of " +
                             std::to_string(trace.batches_total) + " batches failed");

        double j_full;
        try {
            j_full = j_of(w_iter, full_batch);
        } catch (const SolveError&) {
            j_full = std::numeric_limits<double>::infinity();
        }
        if (j_full < j_best) {
            j_best = j_full;
            w_best = w_iter;
        }
        j_history.push_back(j_best);

        EpochRecord rec;
        rec.epoch = epoch;
        rec.j_best = j_best;
        rec.j_full = j_full;
        rec.step_accept_rate =
            batches.empty() ? 0.0 : static_cast<double>(accepted) / batches.size();
        rec.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - epoch_start)
                          .count();
        trace.epochs.push_back(rec);

        // stopping rule; only defined once enough history exists
        if (epoch > cfg.n_patience) {
            double past = j_history[epoch - cfg.n_patience];
            if (past == 0.0) {
                trace.stop_reason = "converged to zero loss";
                break;
            }
            if (1.0 - j_history[epoch] / past < cfg.eps_stop) {
                trace.stop_reason = "patience";
                break;
            }
        }
        if (epoch == cfg.max_epochs) trace.stop_reason = "max_epochs";
    }

    result.w_best = w_best;
    result.j_best = j_best;
    return result;
}

// ---------------------------------------------------------------------------
// Two-stage MAP estimation
// ---------------------------------------------------------------------------

struct TwoStageResult {
    ParameterVector w_best;
    double sigma_v_sq = 0.0;
    EstimationTrace stage1;
    EstimationTrace stage2;
};

/// Stage 1 minimizes the plain loss and estimates sigma_v^2 from its best
/// full-batch value; stage 2 continues from the stage-1 estimate with the
/// Gaussian prior active (gamma = 1).
inline TwoStageResult two_stage_map(const FeederModel& model, const TimeSeriesSet& data,
                                    const ParameterVector& w_initial, const BoundBox& bounds,
                                    const EstimatorConfig& cfg, double prior_sigma_rel = 0.5 / 3.0) {
    TwoStageResult out;
    PriorModel no_prior = PriorModel::none(w_initial.size());
    EstimationResult stage1 = sgd_estimate(model, data, w_initial, no_prior, bounds, cfg);
    out.stage1 = stage1.trace;
    out.sigma_v_sq = estimate_sigma_v(stage1.j_best, data.T);

    PriorModel prior = PriorModel::from_initial(w_initial, 1.0, prior_sigma_rel);
    prior.sigma_v_sq = out.sigma_v_sq;
    EstimationResult stage2 = sgd_estimate(model, data, stage1.w_best, prior, bounds, cfg);
    out.stage2 = stage2.trace;
    out.w_best = stage2.w_best;
    return out;
}

// ---------------------------------------------------------------------------
// Method variants (the ablation axes: constraints and MAP on/off)
// ---------------------------------------------------------------------------

enum class Variant { GL, GL_CON, GL_MAP, GL_CON_MAP };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::GL: return "GL";
        case Variant::GL_CON: return "GL+CON";
        case Variant::GL_MAP: return "GL+MAP";
        case Variant::GL_CON_MAP: return "GL+CON&MAP";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "GL") return Variant::GL;
    if (s == "GL+CON") return Variant::GL_CON;
    if (s == "GL+MAP") return Variant::GL_MAP;
    if (s == "GL+CON&MAP") return Variant::GL_CON_MAP;
    throw ParseError("unknown variant '" + s + "'");
}

struct VariantResult {
    ParameterVector w_best;
    EstimationTrace trace;         // stage-2 trace for MAP variants
    double sigma_v_sq = 0.0;
};

inline VariantResult run_variant(const FeederModel& model, const TimeSeriesSet& data,
                                 const ParameterVector& w_initial, Variant variant,
                                 const EstimatorConfig& cfg) {
    bool with_bounds = variant == Variant::GL_CON || variant == Variant::GL_CON_MAP;
    bool with_map = variant == Variant::GL_MAP || variant == Variant::GL_CON_MAP;
    BoundBox bounds = with_bounds ? BoundBox::from_initial(w_initial)
                                  : BoundBox::unbounded(w_initial.size());
    VariantResult out;
    if (with_map) {
        TwoStageResult ts = two_stage_map(model, data, w_initial, bounds, cfg);
        out.w_best = ts.w_best;
        out.trace = ts.stage2;
        out.sigma_v_sq = ts.sigma_v_sq;
    } else {
        EstimationResult res =
            sgd_estimate(model, data, w_initial, PriorModel::none(w_initial.size()), bounds, cfg);
        out.w_best = res.w_best;
        out.trace = res.trace;
    }
    return out;
}

}  // namespace gridfit
