#pragma once

#include "gridfit/forward.hpp"

#include <cmath>

namespace gridfit {

// ---------------------------------------------------------------------------
// Backward (gradient) configuration
// ---------------------------------------------------------------------------

struct BackwardConfig {
    double eps_backward = 1e-20;    // relative squared-norm ratio for the z iteration
    int max_iter = 10000;
    double z_divergence_cap = 1e12;
    // fault injection for validating the gradient checker: added to the (0,0)
    // entry of every self block. Leave at 0 outside checker tests.
    double self_block_fault = 0.0;
};

// ---------------------------------------------------------------------------
// Transition Jacobian dF/dx, stored as 6x6 blocks on the network adjacency
// ---------------------------------------------------------------------------

/// Neighbor blocks <Z_nn><Y_nk> for state-node pairs. These depend only on
/// the parameters, not the state, so one set serves every instant.
struct AdjacencyBlocks {
    // per state node n (slot n-1): list of (k, block) with k a state node
    std::vector<std::vector<std::pair<int, Mat6>>> entries;
};

inline AdjacencyBlocks build_adjacency_blocks(const FeederModel& model,
                                              const NodalAdmittanceCache& cache) {
    AdjacencyBlocks blocks;
    blocks.entries.resize(model.num_state_nodes());
    for (int n = 1; n < model.num_nodes(); ++n) {
        const auto& entry = cache.nodes[n];
        for (auto [k, l] : entry.neighbors) {
            if (k == 0) continue;  // the fixed source contributes no Jacobian column
            blocks.entries[n - 1].push_back({k, entry.z_embed * cache.line_y_embed[l]});
        }
    }
    return blocks;
}

/// Self-block inner derivative of Eq-style conjugate ratio terms:
/// d[Re(s*/u*); Im(s*/u*)] / d[Re u; Im u], diagonal across phases.
inline Mat6 conjugate_ratio_jacobian(const Eigen::Ref<const Vec6>& state,
                                     const Eigen::Ref<const Vec6>& feature) {
    Mat6 d = Mat6::Zero();
    for (int ph = 0; ph < 3; ++ph) {
        double al = state[ph], be = state[3 + ph];
        double p = feature[ph], q = feature[3 + ph];
        double den = al * al + be * be;
        if (den == 0.0) throw ZeroVoltage("phase " + std::to_string(ph));
        double den2 = den * den;
        double d_re_da = (p * (be * be - al * al) - 2.0 * q * al * be) / den2;
        double d_re_db = (q * (al * al - be * be) - 2.0 * p * al * be) / den2;
        d(ph, ph) = d_re_da;
        d(ph, 3 + ph) = d_re_db;
        d(3 + ph, ph) = d_re_db;     // dIm/da = dRe/db
        d(3 + ph, 3 + ph) = -d_re_da;  // dIm/db = -dRe/da
    }
    return d;
}

/// State-dependent half of dF/dx for one instant: the self blocks
/// <Z_nn> * d(conjugate ratio)/dx_n.
struct SelfBlocks {
    std::vector<Mat6> blocks;  // per state node
};

inline SelfBlocks build_self_blocks(const FeederModel& model, const NodalAdmittanceCache& cache,
                                    const Eigen::VectorXd& x, const FeatureVector& features,
                                    double fault = 0.0) {
    SelfBlocks sb;
    int n_state = model.num_state_nodes();
    sb.blocks.resize(n_state);
    for (int n = 1; n <= n_state; ++n) {
        Mat6 inner = conjugate_ratio_jacobian(x.segment<6>(6 * (n - 1)),
                                              features.segment<6>(6 * (n - 1)));
        sb.blocks[n - 1] = cache.nodes[n].z_embed * inner;
        if (fault != 0.0) sb.blocks[n - 1](0, 0) += fault;
    }
    return sb;
}

/// out = z * (dF/dx) for a row vector z (stored as a column), using the block
/// structure: out_k = sum_n z_n A_{nk}.
inline void left_multiply_jacobian(const AdjacencyBlocks& adj, const SelfBlocks& self,
                                   const Eigen::VectorXd& z, Eigen::VectorXd& out) {
    out.setZero();
    int n_state = static_cast<int>(self.blocks.size());
    for (int n = 1; n <= n_state; ++n) {
        auto z_n = z.segment<6>(6 * (n - 1));
        out.segment<6>(6 * (n - 1)).noalias() += self.blocks[n - 1].transpose() * z_n;
        for (const auto& [k, block] : adj.entries[n - 1])
            out.segment<6>(6 * (k - 1)).noalias() += block.transpose() * z_n;
    }
}

/// Dense 6N x 6N dF/dx for one instant (debug/test path).
inline Eigen::MatrixXd dense_transition_jacobian(const FeederModel& model,
                                                 const AdjacencyBlocks& adj,
                                                 const SelfBlocks& self) {
    int n6 = 6 * model.num_state_nodes();
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n6, n6);
    for (int n = 1; n <= model.num_state_nodes(); ++n) {
        a.block<6, 6>(6 * (n - 1), 6 * (n - 1)) = self.blocks[n - 1];
        for (const auto& [k, block] : adj.entries[n - 1])
            a.block<6, 6>(6 * (n - 1), 6 * (k - 1)) = block;
    }
    return a;
}

// ---------------------------------------------------------------------------
// Paired (t-1, t) structures: A_hat and b_hat
// ---------------------------------------------------------------------------

/// States and features of the equivalent paired model at one first-difference
/// instant, both halves converged.
struct PairedState {
    int t = 0;
    NetworkState prev;  // t-1
    NetworkState curr;  // t
    FeatureVector features_prev;
    FeatureVector features_curr;
};

/// Dense 12N x 12N A_hat(t): block-diagonal across the two time halves.
inline Eigen::MatrixXd build_A_hat(const FeederModel& model, const NodalAdmittanceCache& cache,
                                   const PairedState& paired) {
    AdjacencyBlocks adj = build_adjacency_blocks(model, cache);
    SelfBlocks self_prev =
        build_self_blocks(model, cache, paired.prev.x, paired.features_prev);
    SelfBlocks self_curr =
        build_self_blocks(model, cache, paired.curr.x, paired.features_curr);
    int n6 = 6 * model.num_state_nodes();
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2 * n6, 2 * n6);
    a.topLeftCorner(n6, n6) = dense_transition_jacobian(model, adj, self_prev);
    a.bottomRightCorner(n6, n6) = dense_transition_jacobian(model, adj, self_curr);
    return a;
}

/// d(meter output)/d(node state) as six scalars at the meter's node.
inline Vec6 meter_output_gradient(const NetworkState& state, const LoadSpec& load) {
    Vec6 xn = state.node(load.node);
    int i, j;
    measured_phases(load.connection, i, j);
    Vec6 g = Vec6::Zero();
    if (j < 0) {
        double o = std::hypot(xn[i], xn[3 + i]);
        if (o == 0.0) throw ZeroMagnitude("meter '" + load.meter_id + "'");
        g[i] = xn[i] / o;
        g[3 + i] = xn[3 + i] / o;
    } else {
        double da = xn[i] - xn[j], db = xn[3 + i] - xn[3 + j];
        double o = std::hypot(da, db);
        if (o == 0.0) throw ZeroMagnitude("meter '" + load.meter_id + "'");
        g[i] = da / o;
        g[3 + i] = db / o;
        g[j] = -g[i];
        g[3 + j] = -g[3 + i];
    }
    return g;
}

/// b_hat(t) = de/do~ * [-dG(t-1)/dx, dG(t)/dx] as two 6N halves.
/// Coefficients: de/do~_m = (2/M)(o~_m - v~_m).
inline void build_b_hat_halves(const FeederModel& model, const TimeSeriesSet& data,
                               const PairedState& paired, Eigen::VectorXd& b_prev,
                               Eigen::VectorXd& b_curr) {
    int n6 = 6 * model.num_state_nodes();
    int m_count = model.num_meters();
    b_prev.setZero(n6);
    b_curr.setZero(n6);
    for (int m = 0; m < m_count; ++m) {
        const LoadSpec& load = model.loads[m];
        double o_prev = meter_output(paired.prev, load);
        double o_curr = meter_output(paired.curr, load);
        double v_diff = data.v(paired.t, m) - data.v(paired.t - 1, m);
        double coeff = 2.0 / m_count * ((o_curr - o_prev) - v_diff);
        if (coeff == 0.0) continue;
        int base = 6 * (load.node - 1);
        b_prev.segment<6>(base) -= coeff * meter_output_gradient(paired.prev, load);
        b_curr.segment<6>(base) += coeff * meter_output_gradient(paired.curr, load);
    }
}

/// Dense 1 x 12N b_hat(t) (debug/test path).
inline Eigen::VectorXd build_b_hat(const FeederModel& model, const TimeSeriesSet& data,
                                   const PairedState& paired) {
    Eigen::VectorXd b_prev, b_curr;
    build_b_hat_halves(model, data, paired, b_prev, b_curr);
    Eigen::VectorXd b(b_prev.size() + b_curr.size());
    b << b_prev, b_curr;
    return b;
}

// ---------------------------------------------------------------------------
// d(xi)/d(w): per-line 12x12 blocks through the Woodbury split
// ---------------------------------------------------------------------------

/// Derivatives of one line's conductance/susceptance parameters with respect
/// to its resistance/reactance parameters, both in upper-triangle order.
/// G = (R + X R^-1 X)^-1 and B = -G X R^-1 are differentiated by the product
/// rule with elementary-matrix partials dR/dw, dX/dw.
inline Mat12 line_dxi_dw(const LineParameters& z, double rcond_min = 1e-12) {
    Mat3 r = z.r_matrix();
    Mat3 x = z.x_matrix();
    Mat3 r_inv = invert_checked(r, rcond_min, "R_l");
    Mat3 k = r + x * r_inv * x;
    Mat3 g = invert_checked(k, rcond_min, "G_l inverse image");
    Mat3 x_rinv = x * r_inv;
    Mat3 rinv_x = r_inv * x;
    Mat12 jac;
    for (int c = 0; c < 12; ++c) {
        bool wrt_r = c < 6;
        Mat3 pattern = symmetric_pattern3(kUpperRow[c % 6], kUpperCol[c % 6]);
        Mat3 d_rinv = wrt_r ? Mat3(-(r_inv * pattern * r_inv)) : Mat3(Mat3::Zero());
        Mat3 dk;
        if (wrt_r)
            dk = pattern + x * d_rinv * x;
        else
            dk = pattern * rinv_x + x_rinv * pattern;
        Mat3 dg = -(g * dk * g);
        Mat3 db;
        if (wrt_r)
            db = -(dg * x_rinv + g * x * d_rinv);
        else
            db = -(dg * x_rinv + g * pattern * r_inv);
        jac.col(c).head<6>() = upper_triangle(dg);
        jac.col(c).tail<6>() = upper_triangle(db);
    }
    return jac;
}

/// Full 12L x 12L d(xi)/d(w), block-diagonal per line (debug/test path; the
/// gradient contraction uses the per-line blocks directly).
inline Eigen::MatrixXd d_xi_d_w(const ParameterVector& w, double rcond_min = 1e-12) {
    if (w.size() % 12 != 0) throw IndexOutOfRange("parameter vector length");
    int n_lines = static_cast<int>(w.size()) / 12;
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(w.size(), w.size());
    for (int l = 0; l < n_lines; ++l) {
        LineParameters z;
        z.r = w.segment<6>(12 * l);
        z.x = w.segment<6>(12 * l + 6);
        jac.block<12, 12>(12 * l, 12 * l) = line_dxi_dw(z, rcond_min);
    }
    return jac;
}

// ---------------------------------------------------------------------------
// dF/dw: transition sensitivity to the admittance parameters, chained to w
// ---------------------------------------------------------------------------

/// Per state node, the twelve d<Z_nn>/dxi patterns. The derivative depends
/// only on which upper-triangle slot of G_nn or B_nn the coordinate feeds, so
/// one set of twelve covers every incident line.
struct NodeZSensitivity {
    // index c in 0..11: c < 6 conductance pattern, else susceptance pattern
    std::array<Mat6, 12> d_z_embed;
};

inline NodeZSensitivity build_node_z_sensitivity(const NodalAdmittanceCache::NodeEntry& entry) {
    NodeZSensitivity out;
    const Mat3& g_nn = entry.y_nn.re;
    const Mat3& b_nn = entry.y_nn.im;
    const Mat3& g_inv = entry.g_inv;
    const Mat3& re_z = entry.z_nn.re;
    Mat3 bg = b_nn * g_inv;       // B G^-1
    Mat3 gb = g_inv * b_nn;       // G^-1 B
    for (int c = 0; c < 12; ++c) {
        Mat3 pattern = symmetric_pattern3(kUpperRow[c % 6], kUpperCol[c % 6]);
        Mat3 dg = c < 6 ? pattern : Mat3(Mat3::Zero());
        Mat3 db = c < 6 ? Mat3(Mat3::Zero()) : pattern;
        Mat3 dg_inv = c < 6 ? Mat3(-(g_inv * pattern * g_inv)) : Mat3(Mat3::Zero());
        Mat3 dc = dg + db * gb + b_nn * dg_inv * b_nn + bg * db;
        Mat3 d_re = -(re_z * dc * re_z);
        Mat3 d_im = -(d_re * bg + re_z * db * g_inv + re_z * b_nn * dg_inv);
        out.d_z_embed[c] = embed(d_re, d_im);
    }
    return out;
}

/// <dY/dxi_c> x for the sparse elementary derivative of a line admittance:
/// conductance coordinates hit the real part, susceptance the imaginary.
inline Vec6 apply_dY_pattern(int c, const Eigen::Ref<const Vec6>& x) {
    int i = kUpperRow[c % 6], j = kUpperCol[c % 6];
    Vec3 xr = x.head<3>(), xi = x.tail<3>();
    Vec3 pr = Vec3::Zero(), pi = Vec3::Zero();
    // pattern * v with pattern = E^(i,j) + E^(j,i) (single E on the diagonal)
    auto apply = [&](const Vec3& v) {
        Vec3 r = Vec3::Zero();
        r[i] += v[j];
        if (i != j) r[j] += v[i];
        return r;
    };
    if (c < 6) {  // d re(Y) = pattern
        pr = apply(xr);
        pi = apply(xi);
    } else {  // d im(Y) = pattern
        pr = -apply(xi);
        pi = apply(xr);
    }
    Vec6 out;
    out << pr, pi;
    return out;
}

/// dF/dw blocks for one instant: per (state node, incident line) pair a 6x12
/// block over that line's w coordinates, already chained through d(xi)/d(w).
struct DfDwBlocks {
    struct Entry {
        int node;  // 1..N
        int line;
        Mat6x12 block;
    };
    std::vector<Entry> entries;
};

inline DfDwBlocks build_df_dw_blocks(const FeederModel& model, const NodalAdmittanceCache& cache,
                                     const std::vector<NodeZSensitivity>& z_sens,
                                     const std::vector<Mat12>& dxi_dw,
                                     const NetworkState& state, const FeatureVector& features) {
    DfDwBlocks out;
    int n_state = model.num_state_nodes();
    for (int n = 1; n <= n_state; ++n) {
        const auto& entry = cache.nodes[n];
        // v_n = [Re(s*/u*); Im(s*/u*)] + sum_k <Y_nk> x_k
        Vec6 v_n = conjugate_ratio(state.x.segment<6>(6 * (n - 1)),
                                   features.segment<6>(6 * (n - 1)));
        for (auto [k, l] : entry.neighbors) v_n.noalias() += cache.line_y_embed[l] * state.node(k);

        std::array<Vec6, 12> dzv;
        for (int c = 0; c < 12; ++c) dzv[c].noalias() = z_sens[n - 1].d_z_embed[c] * v_n;

        for (auto [k, l] : entry.neighbors) {
            Mat6x12 dxi_block;
            Vec6 xk = state.node(k);
            for (int c = 0; c < 12; ++c)
                dxi_block.col(c) = dzv[c] + entry.z_embed * apply_dY_pattern(c, xk);
            out.entries.push_back({n, l, dxi_block * dxi_dw[l]});
        }
    }
    return out;
}

/// Dense 12N x 12L dF_hat/dw for a paired instant (debug/test path).
inline Eigen::MatrixXd build_d_F_hat_d_w(const FeederModel& model,
                                         const NodalAdmittanceCache& cache,
                                         const ParameterVector& w, const PairedState& paired) {
    int n6 = 6 * model.num_state_nodes();
    Eigen::MatrixXd full = Eigen::MatrixXd::Zero(2 * n6, w.size());
    std::vector<NodeZSensitivity> z_sens;
    for (int n = 1; n < model.num_nodes(); ++n)
        z_sens.push_back(build_node_z_sensitivity(cache.nodes[n]));
    std::vector<Mat12> dxi_dw;
    for (int l = 0; l < model.num_lines(); ++l)
        dxi_dw.push_back(line_dxi_dw(line_from_vector(w, l)));
    DfDwBlocks prev =
        build_df_dw_blocks(model, cache, z_sens, dxi_dw, paired.prev, paired.features_prev);
    DfDwBlocks curr =
        build_df_dw_blocks(model, cache, z_sens, dxi_dw, paired.curr, paired.features_curr);
    for (const auto& e : prev.entries)
        full.block<6, 12>(6 * (e.node - 1), 12 * e.line) += e.block;
    for (const auto& e : curr.entries)
        full.block<6, 12>(n6 + 6 * (e.node - 1), 12 * e.line) += e.block;
    return full;
}

// ---------------------------------------------------------------------------
// BACKWARD: the full analytic gradient of the first-difference loss
// ---------------------------------------------------------------------------

struct BackwardDiagnostics {
    int max_z_iterations = 0;
    double contraction_proxy = 0.0;  // last ratio of successive z-step norms
};

inline Eigen::VectorXd backward_gradient(const FeederModel& model, const ParameterVector& w,
                                         const std::vector<int>& batch,
                                         const TimeSeriesSet& data, const SolverConfig& fwd_cfg,
                                         const BackwardConfig& bwd_cfg = {}, int threads = 0,
                                         BackwardDiagnostics* diag = nullptr,
                                         double* batch_loss_out = nullptr) {
    if (batch.empty()) throw IndexOutOfRange("empty batch");
    for (int t : batch)
        if (t < 1 || t > data.T) throw IndexOutOfRange("batch instant " + std::to_string(t));

    NodalAdmittanceCache cache = assemble_admittance(model, w);
    AdjacencyBlocks adj = build_adjacency_blocks(model, cache);
    std::vector<NodeZSensitivity> z_sens;
    for (int n = 1; n < model.num_nodes(); ++n)
        z_sens.push_back(build_node_z_sensitivity(cache.nodes[n]));
    std::vector<Mat12> dxi_dw;
    for (int l = 0; l < model.num_lines(); ++l)
        dxi_dw.push_back(line_dxi_dw(line_from_vector(w, l)));

    std::vector<int> instants;
    for (int t : batch) {
        instants.push_back(t);
        instants.push_back(t - 1);
    }
    auto states = solve_instants(model, cache, data, instants, fwd_cfg, threads);

    const int n6 = 6 * model.num_state_nodes();
    std::vector<Eigen::VectorXd> per_t(batch.size());
    std::vector<double> per_t_loss(batch.size(), 0.0);
    std::vector<int> z_iters(batch.size(), 0);
    std::vector<double> ratios(batch.size(), 0.0);

    parallel_for(
        batch.size(),
        [&](std::size_t bi) {
            int t = batch[bi];
            PairedState paired;
            paired.t = t;
            paired.prev = states.at(t - 1);
            paired.curr = states.at(t);
            paired.features_prev =
                injections_from_meters(model, data.p.row(t - 1), data.q.row(t - 1));
            paired.features_curr = injections_from_meters(model, data.p.row(t), data.q.row(t));
            per_t_loss[bi] = loss_at(model, data, meter_outputs(model, paired.prev),
                                     meter_outputs(model, paired.curr), t);

            SelfBlocks self_prev = build_self_blocks(model, cache, paired.prev.x,
                                                     paired.features_prev,
                                                     bwd_cfg.self_block_fault);
            SelfBlocks self_curr = build_self_blocks(model, cache, paired.curr.x,
                                                     paired.features_curr,
                                                     bwd_cfg.self_block_fault);
            Eigen::VectorXd b_prev, b_curr;
            build_b_hat_halves(model, data, paired, b_prev, b_curr);

            // z(t) <- z(t) A_hat(t) + b_hat(t), from zero, until the relative
            // step ratio passes
            Eigen::VectorXd z_prev = Eigen::VectorXd::Zero(n6);
            Eigen::VectorXd z_curr = Eigen::VectorXd::Zero(n6);
            Eigen::VectorXd nz_prev(n6), nz_curr(n6);
            double prev_step = 0.0;
            int iter = 0;
            for (;;) {
                if (++iter > bwd_cfg.max_iter)
                    throw NotConverged("z iteration hit max_iter at t = " + std::to_string(t));
                left_multiply_jacobian(adj, self_prev, z_prev, nz_prev);
                nz_prev += b_prev;
                left_multiply_jacobian(adj, self_curr, z_curr, nz_curr);
                nz_curr += b_curr;
                double norm_prev_sq = z_prev.squaredNorm() + z_curr.squaredNorm();
                double diff_sq =
                    (nz_prev - z_prev).squaredNorm() + (nz_curr - z_curr).squaredNorm();
                z_prev.swap(nz_prev);
                z_curr.swap(nz_curr);
                double norm_sq = z_prev.squaredNorm() + z_curr.squaredNorm();
                if (!std::isfinite(norm_sq) ||
                    norm_sq > bwd_cfg.z_divergence_cap * bwd_cfg.z_divergence_cap)
                    throw ZIterationDiverged("t = " + std::to_string(t) + ", |z| = " +
                                             format_g17(std::sqrt(norm_sq)));
                if (diff_sq == 0.0 || diff_sq < bwd_cfg.eps_backward * norm_prev_sq) {
                    ratios[bi] = prev_step > 0.0 ? std::sqrt(diff_sq) / prev_step : 0.0;
                    break;
                }
                prev_step = std::sqrt(diff_sq);
            }
            z_iters[bi] = iter;

            // de_w(t)/dw = z(t) dF_hat/dw, contracted block by block
            Eigen::VectorXd g = Eigen::VectorXd::Zero(w.size());
            DfDwBlocks blocks_prev = build_df_dw_blocks(model, cache, z_sens, dxi_dw,
                                                        paired.prev, paired.features_prev);
            for (const auto& e : blocks_prev.entries)
                g.segment<12>(12 * e.line).noalias() +=
                    e.block.transpose() * z_prev.segment<6>(6 * (e.node - 1));
            DfDwBlocks blocks_curr = build_df_dw_blocks(model, cache, z_sens, dxi_dw,
                                                        paired.curr, paired.features_curr);
            for (const auto& e : blocks_curr.entries)
                g.segment<12>(12 * e.line).noalias() +=
                    e.block.transpose() * z_curr.segment<6>(6 * (e.node - 1));
            per_t[bi] = std::move(g);
        },
        threads);

    Eigen::VectorXd grad = Eigen::VectorXd::Zero(w.size());
    for (const auto& g : per_t) grad += g;
    grad /= static_cast<double>(batch.size());
    if (batch_loss_out) {
        double acc = 0.0;
        for (double e : per_t_loss) acc += e;
        *batch_loss_out = acc / static_cast<double>(batch.size());
    }
    if (diag) {
        for (std::size_t i = 0; i < batch.size(); ++i) {
            diag->max_z_iterations = std::max(diag->max_z_iterations, z_iters[i]);
            diag->contraction_proxy = std::max(diag->contraction_proxy, ratios[i]);
        }
    }
    return grad;
}

}  // namespace gridfit
