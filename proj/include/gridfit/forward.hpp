#pragma once

#include "gridfit/netmodel.hpp"

#include <cmath>
#include <set>

namespace gridfit {

// ---------------------------------------------------------------------------
// Solver configuration and state
// ---------------------------------------------------------------------------

struct SolverConfig {
    double eps_forward = 1e-20;   // relative squared-norm convergence ratio
    int max_iter = 10000;
    double divergence_cap = 1e6;  // state norm growth factor
    double damping = 1.0;         // theta in (0,1]; 1 reproduces the plain iteration
};

/// Nodal voltages in rectangular per-unit coordinates: x stacks
/// [Re u_n; Im u_n] over state nodes n = 1..N; the source is held separately.
struct NetworkState {
    Vec6 source = Vec6::Zero();
    Eigen::VectorXd x;
    int iterations = 0;

    Vec6 node(int n) const { return n == 0 ? source : Vec6(x.segment<6>(6 * (n - 1))); }
};

inline Vec6 balanced_flat_state() {
    // u = [1, e^{-j 2pi/3}, e^{+j 2pi/3}]
    Vec6 s;
    s << 1.0, -0.5, -0.5, 0.0, -std::sqrt(3.0) / 2.0, std::sqrt(3.0) / 2.0;
    return s;
}

// ---------------------------------------------------------------------------
// Transition function
// ---------------------------------------------------------------------------

/// [Re(s* / u*); Im(s* / u*)] for one node; the per-phase current-like term
/// of the local transition.
inline Vec6 conjugate_ratio(const Eigen::Ref<const Vec6>& state,
                            const Eigen::Ref<const Vec6>& feature) {
    Vec6 c;
    for (int ph = 0; ph < 3; ++ph) {
        double al = state[ph], be = state[3 + ph];
        double p = feature[ph], q = feature[3 + ph];
        double den = al * al + be * be;
        if (den == 0.0) throw ZeroVoltage("phase " + std::to_string(ph));
        c[ph] = (p * al + q * be) / den;
        c[3 + ph] = (p * be - q * al) / den;
    }
    return c;
}

/// One synchronous sweep of the local transition over all state nodes; the
/// source stays fixed.
inline void transition_step_into(const FeederModel& model, const NodalAdmittanceCache& cache,
                                 const Eigen::VectorXd& x, const Vec6& source,
                                 const FeatureVector& features, Eigen::VectorXd& out) {
    int n_state = model.num_state_nodes();
    for (int n = 1; n <= n_state; ++n) {
        const auto& entry = cache.nodes[n];
        Vec6 acc = conjugate_ratio(x.segment<6>(6 * (n - 1)), features.segment<6>(6 * (n - 1)));
        for (auto [k, l] : entry.neighbors) {
            if (k == 0)
                acc.noalias() += cache.line_y_embed[l] * source;
            else
                acc.noalias() += cache.line_y_embed[l] * x.segment<6>(6 * (k - 1));
        }
        out.segment<6>(6 * (n - 1)).noalias() = entry.z_embed * acc;
    }
}

inline NetworkState transition_step(const FeederModel& model, const NodalAdmittanceCache& cache,
                                    const NetworkState& state, const FeatureVector& features) {
    NetworkState next = state;
    next.x.resize(state.x.size());
    transition_step_into(model, cache, state.x, state.source, features, next.x);
    return next;
}

// ---------------------------------------------------------------------------
// Fixed-point solve (the FORWARD function)
// ---------------------------------------------------------------------------

inline NetworkState forward_solve(const FeederModel& model, const NodalAdmittanceCache& cache,
                                  const FeatureVector& features, const Vec6& source_state,
                                  const SolverConfig& cfg = {}) {
    int n_state = model.num_state_nodes();
    NetworkState st;
    st.source = source_state;
    st.x.resize(6 * n_state);
    Vec6 flat = balanced_flat_state();
    for (int n = 0; n < n_state; ++n) st.x.segment<6>(6 * n) = flat;

    double init_sq = std::max(1.0, st.x.squaredNorm());
    Eigen::VectorXd next(st.x.size());
    for (int iter = 1; iter <= cfg.max_iter; ++iter) {
        transition_step_into(model, cache, st.x, st.source, features, next);
        if (cfg.damping != 1.0) next = cfg.damping * next + (1.0 - cfg.damping) * st.x;
        double prev_sq = st.x.squaredNorm();
        double diff_sq = (next - st.x).squaredNorm();
        st.x.swap(next);
        st.iterations = iter;
        if (!std::isfinite(diff_sq) ||
            st.x.squaredNorm() > cfg.divergence_cap * cfg.divergence_cap * init_sq)
            throw Diverged("forward iteration " + std::to_string(iter));
        if (diff_sq < cfg.eps_forward * prev_sq || diff_sq == 0.0) return st;
    }
    throw NotConverged("forward hit max_iter = " + std::to_string(cfg.max_iter));
}

// ---------------------------------------------------------------------------
// Meter outputs and loss
// ---------------------------------------------------------------------------

/// Voltage magnitude a meter reports: sqrt(a^2 + b^2) of its measured phase,
/// or the phasor-difference magnitude for two-phase meters.
inline double meter_output(const NetworkState& state, const LoadSpec& load) {
    Vec6 xn = state.node(load.node);
    int i, j;
    measured_phases(load.connection, i, j);
    if (j < 0) return std::hypot(xn[i], xn[3 + i]);
    return std::hypot(xn[i] - xn[j], xn[3 + i] - xn[3 + j]);
}

inline Eigen::VectorXd meter_outputs(const FeederModel& model, const NetworkState& state) {
    Eigen::VectorXd o(model.num_meters());
    for (int m = 0; m < model.num_meters(); ++m) o[m] = meter_output(state, model.loads[m]);
    return o;
}

/// e_w(t) from the already-computed outputs at t-1 and t.
inline double loss_at(const FeederModel& model, const TimeSeriesSet& data,
                      const Eigen::VectorXd& o_prev, const Eigen::VectorXd& o_curr, int t) {
    int m_count = model.num_meters();
    double acc = 0.0;
    for (int m = 0; m < m_count; ++m) {
        double v_diff = data.v(t, m) - data.v(t - 1, m);
        double o_diff = o_curr[m] - o_prev[m];
        double r = v_diff - o_diff;
        acc += r * r;
    }
    return acc / m_count;
}

/// Solves the instants a batch needs (the batch and its backward shift) and
/// returns states addressable by t.
inline std::map<int, NetworkState> solve_instants(const FeederModel& model,
                                                  const NodalAdmittanceCache& cache,
                                                  const TimeSeriesSet& data,
                                                  const std::vector<int>& instants,
                                                  const SolverConfig& cfg, int threads = 0) {
    std::vector<int> ts(instants);
    std::sort(ts.begin(), ts.end());
    ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
    std::vector<NetworkState> slots(ts.size());
    parallel_for(
        ts.size(),
        [&](std::size_t idx) {
            int t = ts[idx];
            data.check_instant(t);
            FeatureVector f = injections_from_meters(model, data.p.row(t), data.q.row(t));
            try {
                slots[idx] = forward_solve(model, cache, f, data.source_state(t), cfg);
            } catch (const NotConverged& e) {
                throw NotConverged(std::string(e.what()) + " at t = " + std::to_string(t));
            } catch (const Diverged& e) {
                throw Diverged(std::string(e.what()) + " at t = " + std::to_string(t));
            } catch (const ZeroVoltage& e) {
                throw ZeroVoltage(std::string(e.what()) + " at t = " + std::to_string(t));
            }
        },
        threads);
    std::map<int, NetworkState> by_t;
    for (std::size_t i = 0; i < ts.size(); ++i) by_t[ts[i]] = std::move(slots[i]);
    return by_t;
}

/// Gross first-difference loss e_w(T) over a batch of instants.
inline double loss(const FeederModel& model, const ParameterVector& w,
                   const std::vector<int>& batch, const TimeSeriesSet& data,
                   const SolverConfig& cfg = {}, int threads = 0) {
    if (batch.empty()) throw IndexOutOfRange("empty batch");
    NodalAdmittanceCache cache = assemble_admittance(model, w);
    std::vector<int> instants;
    for (int t : batch) {
        if (t < 1 || t > data.T) throw IndexOutOfRange("batch instant " + std::to_string(t));
        instants.push_back(t);
        instants.push_back(t - 1);
    }
    auto states = solve_instants(model, cache, data, instants, cfg, threads);
    std::map<int, Eigen::VectorXd> outputs;
    for (const auto& [t, st] : states) outputs[t] = meter_outputs(model, st);
    double acc = 0.0;
    for (int t : batch) acc += loss_at(model, data, outputs[t - 1], outputs[t], t);
    return acc / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Power-balance residual (diagnostic, used heavily by tests)
// ---------------------------------------------------------------------------

/// Max abs per-phase mismatch of the nodal power equation
/// s_n = u_n . conj(Y_nn u_n - sum Y_nk u_k) over all state nodes.
inline double power_residual(const FeederModel& model, const NodalAdmittanceCache& cache,
                             const NetworkState& state, const FeatureVector& features) {
    double worst = 0.0;
    for (int n = 1; n < model.num_nodes(); ++n) {
        const auto& entry = cache.nodes[n];
        Vec6 u = state.node(n);
        Vec6 current = embed(entry.y_nn) * u;
        for (auto [k, l] : entry.neighbors) current -= cache.line_y_embed[l] * state.node(k);
        for (int ph = 0; ph < 3; ++ph) {
            double al = u[ph], be = u[3 + ph];
            double ir = current[ph], ii = current[3 + ph];
            double p = al * ir + be * ii;
            double q = be * ir - al * ii;
            worst = std::max(worst, std::abs(p - features[6 * (n - 1) + ph]));
            worst = std::max(worst, std::abs(q - features[6 * (n - 1) + 3 + ph]));
        }
    }
    return worst;
}

}  // namespace gridfit
