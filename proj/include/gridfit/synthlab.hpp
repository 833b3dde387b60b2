#pragma once

#include "gridfit/forward.hpp"

#include <cmath>
#include <complex>
#include <random>

namespace gridfit {

// ---------------------------------------------------------------------------
// Newton-Raphson power-flow oracle
//
// Independent verification solver: damped Newton on the nodal power-mismatch
// equations in rectangular coordinates. Shares no iteration scheme with
// forward_solve, and builds its admittance blocks by direct complex inversion
// rather than the Woodbury path.
// ---------------------------------------------------------------------------

struct NewtonConfig {
    double tol = 1e-10;     // max abs per-phase power mismatch, pu
    int max_iter = 60;
    int max_halvings = 10;
};

namespace detail {

struct ComplexNetwork {
    std::vector<Eigen::Matrix3cd> line_y;
    std::vector<std::vector<std::pair<int, int>>> adj;  // (node, line)

    static ComplexNetwork build(const FeederModel& model, const ParameterVector& w) {
        ComplexNetwork net;
        net.adj = model.adjacency();
        net.line_y.resize(model.num_lines());
        for (int l = 0; l < model.num_lines(); ++l) {
            LineParameters z = line_from_vector(w, l);
            Eigen::Matrix3cd zc;
            Mat3 r = z.r_matrix(), x = z.x_matrix();
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) zc(i, j) = {r(i, j), x(i, j)};
            Eigen::Matrix3cd y = zc.inverse();
            if (!y.allFinite()) throw SingularMatrix("oracle line inversion");
            net.line_y[l] = y;
        }
        return net;
    }

    /// I_n = Y_nn u_n - sum_k Y_nk u_k per state node.
    std::vector<Eigen::Vector3cd> injected_currents(
        const std::vector<Eigen::Vector3cd>& u) const {
        std::vector<Eigen::Vector3cd> cur(u.size(), Eigen::Vector3cd::Zero());
        for (std::size_t n = 1; n < u.size(); ++n) {
            for (auto [k, l] : adj[n]) cur[n] += line_y[l] * (u[n] - u[k]);
        }
        return cur;
    }
};

}  // namespace detail

inline NetworkState newton_oracle(const FeederModel& model, const ParameterVector& w,
                                  const FeatureVector& features, const Vec6& source_state,
                                  const NewtonConfig& cfg = {}) {
    const int n_state = model.num_state_nodes();
    detail::ComplexNetwork net = detail::ComplexNetwork::build(model, w);

    std::vector<Eigen::Vector3cd> u(model.num_nodes());
    u[0] = state_to_phasor(source_state);
    for (int n = 1; n <= n_state; ++n) u[n] = u[0];

    auto mismatch = [&](const std::vector<Eigen::Vector3cd>& volt, Eigen::VectorXd& m,
                        std::vector<Eigen::Vector3cd>& cur) {
        cur = net.injected_currents(volt);
        for (int n = 1; n <= n_state; ++n) {
            Eigen::Vector3cd s_calc = volt[n].cwiseProduct(cur[n].conjugate());
            for (int ph = 0; ph < 3; ++ph) {
                m[6 * (n - 1) + ph] = s_calc[ph].real() - features[6 * (n - 1) + ph];
                m[6 * (n - 1) + 3 + ph] = s_calc[ph].imag() - features[6 * (n - 1) + 3 + ph];
            }
        }
    };

    Eigen::VectorXd m(6 * n_state);
    std::vector<Eigen::Vector3cd> cur;
    mismatch(u, m, cur);
    double m_norm = m.cwiseAbs().maxCoeff();

    for (int iter = 0; iter < cfg.max_iter; ++iter) {
        if (m_norm <= cfg.tol) {
            NetworkState st;
            st.source = source_state;
            st.x.resize(6 * n_state);
            for (int n = 1; n <= n_state; ++n)
                st.x.segment<6>(6 * (n - 1)) = phasor_to_state(u[n]);
            st.iterations = iter;
            return st;
        }

        // Jacobian of the mismatch w.r.t. stacked [Re u; Im u]
        Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(6 * n_state, 6 * n_state);
        for (int n = 1; n <= n_state; ++n) {
            Mat6 w_n = Mat6::Zero();
            Mat6 v_n = Mat6::Zero();
            for (int ph = 0; ph < 3; ++ph) {
                double al = u[n][ph].real(), be = u[n][ph].imag();
                double ir = cur[n][ph].real(), ii = cur[n][ph].imag();
                w_n(ph, ph) = al;
                w_n(ph, 3 + ph) = be;
                w_n(3 + ph, ph) = be;
                w_n(3 + ph, 3 + ph) = -al;
                v_n(ph, ph) = ir;
                v_n(ph, 3 + ph) = ii;
                v_n(3 + ph, ph) = -ii;
                v_n(3 + ph, 3 + ph) = ir;
            }
            Eigen::Matrix3cd y_nn = Eigen::Matrix3cd::Zero();
            for (auto [k, l] : net.adj[n]) {
                y_nn += net.line_y[l];
                if (k == 0) continue;
                Mat6 y_emb = embed(ComplexMat3::from_complex(net.line_y[l]));
                jac.block<6, 6>(6 * (n - 1), 6 * (k - 1)) = -(w_n * y_emb);
            }
            Mat6 y_nn_emb = embed(ComplexMat3::from_complex(y_nn));
            jac.block<6, 6>(6 * (n - 1), 6 * (n - 1)) = w_n * y_nn_emb + v_n;
        }

        Eigen::VectorXd step = jac.partialPivLu().solve(-m);
        if (!step.allFinite()) throw OracleNotConverged("singular oracle Jacobian");

        // step halving on mismatch increase
        double lambda = 1.0;
        bool improved = false;
        std::vector<Eigen::Vector3cd> u_try = u;
        Eigen::VectorXd m_try(m.size());
        std::vector<Eigen::Vector3cd> cur_try;
        for (int h = 0; h <= cfg.max_halvings; ++h) {
            for (int n = 1; n <= n_state; ++n) {
                for (int ph = 0; ph < 3; ++ph) {
                    u_try[n][ph] = {u[n][ph].real() + lambda * step[6 * (n - 1) + ph],
                                    u[n][ph].imag() + lambda * step[6 * (n - 1) + 3 + ph]};
                }
            }
            mismatch(u_try, m_try, cur_try);
            double norm_try = m_try.cwiseAbs().maxCoeff();
            if (std::isfinite(norm_try) && norm_try < m_norm) {
                u = u_try;
                m = m_try;
                cur = cur_try;
                m_norm = norm_try;
                improved = true;
                break;
            }
            lambda *= 0.5;
        }
        if (!improved) throw OracleNotConverged("damping exhausted at mismatch " +
                                                format_g17(m_norm));
    }
    throw OracleNotConverged("max_iter with mismatch " + format_g17(m_norm));
}

// ---------------------------------------------------------------------------
// Feeder unbalance (substation current asymmetry)
// ---------------------------------------------------------------------------

/// Three-phase substation current magnitudes for one solved state.
inline Vec3 source_current_magnitudes(const FeederModel& model, const ParameterVector& w,
                                      const NetworkState& state) {
    detail::ComplexNetwork net = detail::ComplexNetwork::build(model, w);
    Eigen::Vector3cd u0 = state_to_phasor(state.source);
    Eigen::Vector3cd i0 = Eigen::Vector3cd::Zero();
    for (auto [k, l] : net.adj[0]) i0 += net.line_y[l] * (u0 - state_to_phasor(state.node(k)));
    return {std::abs(i0[0]), std::abs(i0[1]), std::abs(i0[2])};
}

/// Horizon-average unbalance: mean over t of
/// u(t) = (|I_A - I_m| + |I_B - I_m| + |I_C - I_m|) / (3 I_m).
inline double unbalance_level(const Eigen::MatrixXd& source_current_mag) {
    if (source_current_mag.rows() == 0 || source_current_mag.cols() != 3)
        throw IndexOutOfRange("expected a (T+1) x 3 current magnitude series");
    double acc = 0.0;
    for (Eigen::Index t = 0; t < source_current_mag.rows(); ++t) {
        double ia = source_current_mag(t, 0), ib = source_current_mag(t, 1),
               ic = source_current_mag(t, 2);
        double im = (ia + ib + ic) / 3.0;
        if (!(im > 0.0)) throw ZeroCurrent("t = " + std::to_string(t));
        acc += (std::abs(ia - im) + std::abs(ib - im) + std::abs(ic - im)) / (3.0 * im);
    }
    return acc / static_cast<double>(source_current_mag.rows());
}

// ---------------------------------------------------------------------------
// Initial-estimate perturbation
// ---------------------------------------------------------------------------

/// w_initial,i ~ uniform[w_true,i (1-h), w_true,i (1+h)], independent, seeded.
inline ParameterVector perturb_parameters(const ParameterVector& w_true, double half_width,
                                          std::uint64_t seed) {
    if (!(half_width > 0.0 && half_width < 1.0))
        throw IndexOutOfRange("perturbation half-width must lie in (0,1)");
    std::mt19937_64 rng(substream(seed, 0x70657274));
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    ParameterVector w = w_true;
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] *= 1.0 + half_width * unit(rng);
    return w;
}

// ---------------------------------------------------------------------------
// Scenario generation (synthetic smart-meter campaign)
// ---------------------------------------------------------------------------

struct ScenarioConfig {
    int horizon = 2160;               // instants t = 0..T, hourly; 2160 = 90 days
    double pf_min = 0.9;              // lagging power factor range
    double pf_max = 1.0;
    double meter_class = 0.0;         // percent of nominal at 3 sigma: 0, 0.1 or 0.2
    double perturb_half_width = 0.5;
    double target_unbalance = 0.0;    // <= 0: no targeting
    double peak_kw = 0.0;             // 0: feeder preset
    std::uint64_t rng_seed = 1;
    bool noise_p = true;
    bool noise_q = true;
    bool noise_v = true;
    NewtonConfig oracle;

    void validate() const {
        if (horizon < 2) throw IndexOutOfRange("horizon must be >= 2");
        if (!(pf_min > 0.0 && pf_min <= pf_max && pf_max <= 1.0))
            throw IndexOutOfRange("power factor range");
        if (meter_class != 0.0 && meter_class != 0.1 && meter_class != 0.2)
            throw IndexOutOfRange("meter class must be 0, 0.1 or 0.2");
    }
};

struct Scenario {
    TimeSeriesSet data;
    double unbalance = 0.0;            // achieved horizon-average unbalance
    Eigen::MatrixXd source_current_mag;  // (T+1) x 3, noiseless
};

namespace detail {

/// Diurnal + weekly shape with seeded jitter; replaces proprietary AMI data.
inline Eigen::MatrixXd load_shapes(int meters, int T, std::uint64_t seed) {
    constexpr double kTwoPi = 2.0 * 3.14159265358979323846;
    Eigen::MatrixXd shape(T + 1, meters);
    for (int m = 0; m < meters; ++m) {
        std::mt19937_64 rng(substream(seed, 0x73686170, m));
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        std::normal_distribution<double> gauss(0.0, 1.0);
        double peak_hour = 7.0 + 14.0 * uni(rng);
        double second_phase = 24.0 * uni(rng);
        double week_phase = kTwoPi * uni(rng);
        double level = 0.55 + 0.5 * uni(rng);
        for (int t = 0; t <= T; ++t) {
            double hour = t % 24;
            double day = (t / 24) % 7;
            double s = 0.5 + 0.34 * std::cos(kTwoPi * (hour - peak_hour) / 24.0) +
                       0.1 * std::cos(2.0 * kTwoPi * (hour - second_phase) / 24.0) +
                       0.08 * std::cos(kTwoPi * day / 7.0 + week_phase) + 0.05 * gauss(rng);
            shape(t, m) = level * std::max(0.08, s);
        }
    }
    return shape;
}

/// Multiplier applied to a load for phase weights (wa, wb, wc).
inline double phase_weight(Connection c, const Vec3& w) {
    switch (c) {
        case Connection::AN: return w[0];
        case Connection::BN: return w[1];
        case Connection::CN: return w[2];
        case Connection::AB: return 0.5 * (w[0] + w[1]);
        case Connection::BC: return 0.5 * (w[1] + w[2]);
        case Connection::CA: return 0.5 * (w[2] + w[0]);
        case Connection::ABC: return (w[0] + w[1] + w[2]) / 3.0;
    }
    return 1.0;
}

/// Aggregate per-phase apparent power, the stand-in for substation currents
/// while tuning phase weights (voltages near 1 pu).
inline Vec3 proxy_phase_power(const FeederModel& model, const Eigen::MatrixXd& p,
                              const Eigen::MatrixXd& q) {
    Vec3 acc = Vec3::Zero();
    for (int m = 0; m < model.num_meters(); ++m) {
        double s_sum = 0.0;
        for (Eigen::Index t = 0; t < p.rows(); ++t) s_sum += std::hypot(p(t, m), q(t, m));
        Vec3 share = Vec3::Zero();
        switch (model.loads[m].connection) {
            case Connection::AN: share[0] = 1.0; break;
            case Connection::BN: share[1] = 1.0; break;
            case Connection::CN: share[2] = 1.0; break;
            case Connection::AB: share[0] = share[1] = 0.5; break;
            case Connection::BC: share[1] = share[2] = 0.5; break;
            case Connection::CA: share[2] = share[0] = 0.5; break;
            case Connection::ABC: share.setConstant(1.0 / 3.0); break;
        }
        acc += share * s_sum;
    }
    return acc;
}

inline double proxy_unbalance(const Vec3& phase_power) {
    double im = phase_power.sum() / 3.0;
    if (!(im > 0.0)) throw ZeroCurrent("proxy");
    return ((phase_power.array() - im).abs().sum()) / (3.0 * im);
}

}  // namespace detail

/// Produces the full measurement campaign: seeded load shapes, reactive power
/// from a sampled lagging power factor, voltages from the Newton oracle, then
/// meter noise at 3 sigma = class percent of nominal (per-unit 1.0 for v,
/// per-meter peak |S| for p and q). The noiseless voltage archive is kept.
inline Scenario generate_scenario(const FeederModel& model, const ParameterVector& w_true,
                                  const ScenarioConfig& cfg) {
    cfg.validate();
    const int T = cfg.horizon;
    const int M = model.num_meters();
    if (M == 0) throw Error("feeder has no loads to meter");

    double peak_kw = cfg.peak_kw;
    if (peak_kw <= 0.0) peak_kw = 0.5 * model.base_kva;  // mild default loading

    Eigen::MatrixXd shape = detail::load_shapes(M, T, cfg.rng_seed);

    // lagging power factor per meter and instant
    Eigen::MatrixXd tan_phi(T + 1, M);
    for (int m = 0; m < M; ++m) {
        std::mt19937_64 rng(substream(cfg.rng_seed, 0x70666163, m));
        std::uniform_real_distribution<double> pf(cfg.pf_min, cfg.pf_max);
        for (int t = 0; t <= T; ++t) {
            double c = pf(rng);
            tan_phi(t, m) = std::sqrt(std::max(0.0, 1.0 - c * c)) / c;
        }
    }

    // phase weights tuned toward the requested unbalance level
    Vec3 weights = Vec3::Ones();
    auto build_pq = [&](const Vec3& w_ph, Eigen::MatrixXd& p, Eigen::MatrixXd& q) {
        p.resize(T + 1, M);
        q.resize(T + 1, M);
        for (int m = 0; m < M; ++m) {
            double mult = detail::phase_weight(model.loads[m].connection, w_ph);
            for (int t = 0; t <= T; ++t) {
                p(t, m) = shape(t, m) * mult;
                q(t, m) = p(t, m) * tan_phi(t, m);
            }
        }
        // scale so the peak aggregate real power hits peak_kw
        double peak = p.rowwise().sum().maxCoeff();
        double scale = peak_kw / peak;
        p *= scale;
        q *= scale;
    };

    Eigen::MatrixXd p_kw, q_kvar;
    build_pq(weights, p_kw, q_kvar);
    if (cfg.target_unbalance > 0.0) {
        for (int round = 0; round < 12; ++round) {
            Vec3 phase_power = detail::proxy_phase_power(model, p_kw, q_kvar);
            double u = detail::proxy_unbalance(phase_power);
            if (std::abs(u - cfg.target_unbalance) <= 0.02 * cfg.target_unbalance) break;
            double c = 1.5 * cfg.target_unbalance;
            Vec3 target_power{1.0 + c, 1.0, 1.0 - c};
            double im = phase_power.sum() / 3.0;
            for (int ph = 0; ph < 3; ++ph)
                weights[ph] *= target_power[ph] * im / phase_power[ph];
            weights *= 3.0 / weights.sum();
            build_pq(weights, p_kw, q_kvar);
        }
    }

    // per-unit conversion and oracle solves
    TimeSeriesSet data;
    data.T = T;
    data.meter_ids.reserve(M);
    for (const auto& ld : model.loads) data.meter_ids.push_back(ld.meter_id);
    double s_base = model.s_base_phase_kva();
    data.p = p_kw / s_base;
    data.q = q_kvar / s_base;
    data.v.resize(T + 1, M);
    data.source.resize(T + 1, 6);
    Vec6 source = balanced_flat_state();
    for (int t = 0; t <= T; ++t) data.source.row(t) = source.transpose();
    data.w_true = w_true;

    Eigen::MatrixXd current_mag(T + 1, 3);
    {
        detail::ComplexNetwork net = detail::ComplexNetwork::build(model, w_true);
        std::vector<Eigen::VectorXd> v_rows(T + 1);
        std::vector<Vec3> i_rows(T + 1);
        parallel_for(static_cast<std::size_t>(T) + 1, [&](std::size_t ti) {
            int t = static_cast<int>(ti);
            FeatureVector f = injections_from_meters(model, data.p.row(t), data.q.row(t));
            NetworkState st;
            try {
                st = newton_oracle(model, w_true, f, source, cfg.oracle);
            } catch (const OracleNotConverged& e) {
                throw OracleNotConverged(std::string(e.what()) + " at t = " + std::to_string(t));
            }
            v_rows[ti] = meter_outputs(model, st);
            Eigen::Vector3cd u0 = state_to_phasor(source);
            Eigen::Vector3cd i0 = Eigen::Vector3cd::Zero();
            for (auto [k, l] : net.adj[0])
                i0 += net.line_y[l] * (u0 - state_to_phasor(st.node(k)));
            i_rows[ti] = Vec3(std::abs(i0[0]), std::abs(i0[1]), std::abs(i0[2]));
        });
        for (int t = 0; t <= T; ++t) {
            data.v.row(t) = v_rows[t].transpose();
            current_mag.row(t) = i_rows[t].transpose();
        }
    }
    data.v_clean = data.v;

    // measurement noise: zero-mean Gaussian, 3 sigma = class% of nominal
    if (cfg.meter_class > 0.0) {
        double frac = cfg.meter_class / 100.0 / 3.0;
        for (int m = 0; m < M; ++m) {
            double peak_s = 0.0;
            for (int t = 0; t <= T; ++t)
                peak_s = std::max(peak_s, std::hypot(data.p(t, m), data.q(t, m)));
            std::mt19937_64 rng_p(substream(cfg.rng_seed, 0x6e6f6970, m));
            std::mt19937_64 rng_q(substream(cfg.rng_seed, 0x6e6f6971, m));
            std::mt19937_64 rng_v(substream(cfg.rng_seed, 0x6e6f6976, m));
            std::normal_distribution<double> gauss(0.0, 1.0);
            for (int t = 0; t <= T; ++t) {
                if (cfg.noise_p) data.p(t, m) += frac * peak_s * gauss(rng_p);
                if (cfg.noise_q) data.q(t, m) += frac * peak_s * gauss(rng_q);
                if (cfg.noise_v) data.v(t, m) += frac * 1.0 * gauss(rng_v);
            }
        }
    }

    Scenario out;
    out.data = std::move(data);
    out.source_current_mag = std::move(current_mag);
    out.unbalance = unbalance_level(out.source_current_mag);
    return out;
}

// ---------------------------------------------------------------------------
// Bundled corpus feeders
// ---------------------------------------------------------------------------

namespace detail {

inline Mat3 scale_matrix(const Mat3& base, double length, std::uint64_t jitter_seed) {
    std::mt19937_64 rng(jitter_seed);
    std::uniform_real_distribution<double> uni(-0.08, 0.08);
    Mat3 m = base * length;
    for (int k = 0; k < 6; ++k) {
        double f = 1.0 + uni(rng);
        m(kUpperRow[k], kUpperCol[k]) *= f;
        m(kUpperCol[k], kUpperRow[k]) = m(kUpperRow[k], kUpperCol[k]);
    }
    return m;
}

// untransposed overhead construction, ohms per mile
inline Mat3 overhead_r() {
    Mat3 m;
    m << 0.3465, 0.1560, 0.1580, 0.1560, 0.3375, 0.1535, 0.1580, 0.1535, 0.3414;
    return m;
}
inline Mat3 overhead_x() {
    Mat3 m;
    m << 1.0179, 0.5017, 0.4236, 0.5017, 1.0478, 0.3849, 0.4236, 0.3849, 1.0348;
    return m;
}
// cable-like construction, ohms per mile
inline Mat3 cable_r() {
    Mat3 m;
    m << 0.7982, 0.3192, 0.2849, 0.3192, 0.7891, 0.3071, 0.2849, 0.3071, 0.7982;
    return m;
}
inline Mat3 cable_x() {
    Mat3 m;
    m << 0.4463, 0.0328, 0.0143, 0.0328, 0.4041, 0.0327, 0.0143, 0.0327, 0.4463;
    return m;
}

inline void add_line(FeederModel& model, const std::string& a, const std::string& b,
                     bool cable, double length_miles) {
    FeederModel::Line ln;
    ln.a = model.node_index(a);
    ln.b = model.node_index(b);
    std::uint64_t seed = substream(0x677269646669740AULL, ln.a, ln.b);
    Mat3 r = scale_matrix(cable ? cable_r() : overhead_r(), length_miles, seed);
    Mat3 x = scale_matrix(cable ? cable_x() : overhead_x(), length_miles,
                          splitmix64(seed ^ 0x78));
    double zb = model.z_base_ohm();
    ln.z.r = upper_triangle(r) / zb;
    ln.z.x = upper_triangle(x) / zb;
    model.lines.push_back(ln);
}

inline void add_load(FeederModel& model, const std::string& node, Connection c) {
    LoadSpec ld;
    ld.meter_id = "m" + std::to_string(model.loads.size() + 1) + "_" + node + "_" +
                  connection_name(c);
    ld.node = model.node_index(node);
    ld.connection = c;
    model.loads.push_back(ld);
}

}  // namespace detail

/// Bundled synthetic test feeders:
///   pair2  - source plus one node, one line, one load
///   toy3   - two-line chain
///   chain4 - three-line chain (gradient-check corpus)
///   chain8 - seven-line chain (gradient-check corpus)
///   case13 - 10 loads / 6 segments, all 7 connection types, 3 MW class
///   case37 - 25 loads / 21 segments, partition test bed, 2.4 MW class
inline FeederModel builtin_feeder(const std::string& name) {
    using C = Connection;
    FeederModel model;
    if (name == "pair2") {
        model.node_names = {"0", "1"};
        model.base_kv = 4.16;
        model.base_kva = 5000.0;
        detail::add_line(model, "0", "1", false, 1.0);
        detail::add_load(model, "1", C::AN);
    } else if (name == "toy3") {
        model.node_names = {"0", "1", "2"};
        model.base_kv = 4.16;
        model.base_kva = 5000.0;
        detail::add_line(model, "0", "1", false, 1.0);
        detail::add_line(model, "1", "2", false, 0.7);
        detail::add_load(model, "1", C::AN);
        detail::add_load(model, "1", C::BC);
        detail::add_load(model, "1", C::ABC);
        detail::add_load(model, "2", C::BN);
        detail::add_load(model, "2", C::CN);
        detail::add_load(model, "2", C::AB);
        detail::add_load(model, "2", C::CA);
        detail::add_load(model, "2", C::ABC);
    } else if (name == "chain4") {
        model.node_names = {"0", "1", "2", "3"};
        model.base_kv = 4.16;
        model.base_kva = 5000.0;
        detail::add_line(model, "0", "1", false, 0.9);
        detail::add_line(model, "1", "2", false, 0.6);
        detail::add_line(model, "2", "3", true, 0.5);
        detail::add_load(model, "1", C::AN);
        detail::add_load(model, "1", C::BC);
        detail::add_load(model, "2", C::CA);
        detail::add_load(model, "2", C::BN);
        detail::add_load(model, "3", C::ABC);
        detail::add_load(model, "3", C::CN);
        detail::add_load(model, "3", C::AB);
    } else if (name == "chain8") {
        model.node_names = {"0", "1", "2", "3", "4", "5", "6", "7"};
        model.base_kv = 4.16;
        model.base_kva = 5000.0;
        for (int n = 0; n < 7; ++n)
            detail::add_line(model, std::to_string(n), std::to_string(n + 1), n >= 4,
                             0.4 + 0.1 * (n % 3));
        detail::add_load(model, "1", C::AN);
        detail::add_load(model, "2", C::BN);
        detail::add_load(model, "2", C::AB);
        detail::add_load(model, "3", C::CN);
        detail::add_load(model, "4", C::BC);
        detail::add_load(model, "4", C::ABC);
        detail::add_load(model, "5", C::CA);
        detail::add_load(model, "6", C::AN);
        detail::add_load(model, "6", C::ABC);
        detail::add_load(model, "7", C::BN);
        detail::add_load(model, "7", C::CN);
    } else if (name == "case13") {
        model.node_names = {"650", "632", "633", "671", "645", "675", "684"};
        model.base_kv = 4.16;
        model.base_kva = 5000.0;
        detail::add_line(model, "650", "632", false, 0.95);
        detail::add_line(model, "632", "633", false, 0.45);
        detail::add_line(model, "632", "671", false, 0.7);
        detail::add_line(model, "632", "645", true, 0.5);
        detail::add_line(model, "645", "675", true, 0.4);
        detail::add_line(model, "645", "684", false, 0.35);
        detail::add_load(model, "632", C::ABC);
        detail::add_load(model, "633", C::AN);
        detail::add_load(model, "633", C::BC);
        detail::add_load(model, "671", C::BN);
        detail::add_load(model, "671", C::CA);
        detail::add_load(model, "671", C::ABC);
        detail::add_load(model, "645", C::CN);
        detail::add_load(model, "675", C::AB);
        detail::add_load(model, "675", C::AN);
        detail::add_load(model, "684", C::CN);
    } else if (name == "case37") {
        model.node_names = {"799", "701", "702", "712", "713", "704", "714", "718",
                            "703", "727", "730", "744", "728", "729", "709", "708",
                            "733", "734", "737", "710", "738", "735"};
        model.base_kv = 4.8;
        model.base_kva = 5000.0;
        detail::add_line(model, "799", "701", false, 0.9);
        detail::add_line(model, "701", "702", false, 0.5);
        detail::add_line(model, "701", "712", true, 0.45);
        detail::add_line(model, "701", "713", false, 0.55);
        detail::add_line(model, "713", "704", false, 0.4);
        detail::add_line(model, "704", "714", true, 0.3);
        detail::add_line(model, "704", "718", false, 0.5);
        detail::add_line(model, "702", "703", false, 0.65);
        detail::add_line(model, "703", "727", true, 0.45);
        detail::add_line(model, "703", "730", false, 0.5);
        detail::add_line(model, "703", "744", false, 0.4);
        detail::add_line(model, "744", "728", true, 0.35);
        detail::add_line(model, "744", "729", false, 0.3);
        detail::add_line(model, "730", "709", false, 0.4);
        detail::add_line(model, "709", "708", false, 0.45);
        detail::add_line(model, "708", "733", false, 0.5);
        detail::add_line(model, "733", "734", false, 0.45);
        detail::add_line(model, "733", "737", true, 0.4);
        detail::add_line(model, "733", "710", false, 0.5);
        detail::add_line(model, "734", "738", false, 0.35);
        detail::add_line(model, "710", "735", true, 0.3);
        detail::add_load(model, "701", C::ABC);
        detail::add_load(model, "712", C::AN);
        detail::add_load(model, "712", C::BC);
        detail::add_load(model, "713", C::CN);
        detail::add_load(model, "704", C::AB);
        detail::add_load(model, "714", C::BN);
        detail::add_load(model, "714", C::CA);
        detail::add_load(model, "718", C::ABC);
        detail::add_load(model, "718", C::AN);
        detail::add_load(model, "703", C::BN);
        detail::add_load(model, "727", C::AN);
        detail::add_load(model, "728", C::ABC);
        detail::add_load(model, "728", C::BN);
        detail::add_load(model, "729", C::CA);
        detail::add_load(model, "730", C::BC);
        detail::add_load(model, "744", C::CN);
        detail::add_load(model, "709", C::AN);
        detail::add_load(model, "733", C::AB);
        detail::add_load(model, "734", C::CN);
        detail::add_load(model, "734", C::AN);
        detail::add_load(model, "737", C::ABC);
        detail::add_load(model, "738", C::BC);
        detail::add_load(model, "710", C::BN);
        detail::add_load(model, "735", C::CA);
        detail::add_load(model, "735", C::AN);
    } else {
        throw IndexOutOfRange("unknown builtin feeder '" + name + "'");
    }
    model.validate();
    return model;
}

inline double builtin_peak_kw(const std::string& name) {
    if (name == "case37") return 2400.0;
    if (name == "case13") return 3000.0;
    return 1500.0;
}

}  // namespace gridfit
