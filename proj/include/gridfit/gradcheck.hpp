#pragma once

#include "gridfit/gradengine.hpp"

#include <complex>

namespace gridfit {

// ---------------------------------------------------------------------------
// Independent finite-difference loss oracle
//
// A self-contained extended-precision evaluation of the first-difference
// loss: direct complex arithmetic, plain complex inversion, fixed sweep
// count. It shares no code with the production solver or Jacobians, and the
// long-double path keeps the rounding floor of e(w +/- h) far below the
// differencing signal at h = 1e-6 |w|.
// ---------------------------------------------------------------------------

namespace fdoracle {

using Real = long double;
using Cplx = std::complex<Real>;
using Mat3c = Eigen::Matrix<Cplx, 3, 3>;
using Vec3c = Eigen::Matrix<Cplx, 3, 1>;

inline Real batch_loss(const FeederModel& model, const ParameterVector& w,
                       const std::vector<int>& batch, const TimeSeriesSet& data, int sweeps) {
    auto adj = model.adjacency();
    const int n_nodes = model.num_nodes();
    const int m_count = model.num_meters();

    std::vector<Mat3c> line_y(model.num_lines());
    for (int l = 0; l < model.num_lines(); ++l) {
        LineParameters z = line_from_vector(w, l);
        Mat3 r = z.r_matrix(), x = z.x_matrix();
        Mat3c zc;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) zc(i, j) = Cplx(r(i, j), x(i, j));
        line_y[l] = zc.inverse();
    }
    std::vector<Mat3c> z_nn(n_nodes);
    for (int n = 1; n < n_nodes; ++n) {
        Mat3c y_nn = Mat3c::Zero();
        for (auto [k, l] : adj[n]) y_nn += line_y[l];
        z_nn[n] = y_nn.inverse();
    }

    auto solve_at = [&](int t) {
        FeatureVector f = injections_from_meters(model, data.p.row(t), data.q.row(t));
        Vec6 src = data.source_state(t);
        std::vector<Vec3c> u(n_nodes), u_next(n_nodes);
        u[0] = Vec3c(Cplx(src[0], src[3]), Cplx(src[1], src[4]), Cplx(src[2], src[5]));
        Vec3c flat(Cplx(1.0L, 0.0L), Cplx(-0.5L, -std::sqrt(3.0L) / 2.0L),
                   Cplx(-0.5L, std::sqrt(3.0L) / 2.0L));
        for (int n = 1; n < n_nodes; ++n) u[n] = flat;
        u_next[0] = u[0];
        for (int sweep = 0; sweep < sweeps; ++sweep) {
            for (int n = 1; n < n_nodes; ++n) {
                Vec3c acc = Vec3c::Zero();
                for (auto [k, l] : adj[n]) acc += line_y[l] * u[k];
                for (int ph = 0; ph < 3; ++ph) {
                    Cplx s(f[6 * (n - 1) + ph], f[6 * (n - 1) + 3 + ph]);
                    acc[ph] += std::conj(s) / std::conj(u[n][ph]);
                }
                u_next[n] = z_nn[n] * acc;
            }
            std::swap(u, u_next);
        }
        Eigen::Matrix<Real, Eigen::Dynamic, 1> outputs(m_count);
        for (int m = 0; m < m_count; ++m) {
            const LoadSpec& ld = model.loads[m];
            int i, j;
            measured_phases(ld.connection, i, j);
            const Vec3c& un = u[ld.node];
            Cplx val = j < 0 ? un[i] : Cplx(un[i] - un[j]);
            outputs[m] = std::abs(val);
        }
        return outputs;
    };

    std::vector<int> instants;
    for (int t : batch) {
        instants.push_back(t);
        instants.push_back(t - 1);
    }
    std::sort(instants.begin(), instants.end());
    instants.erase(std::unique(instants.begin(), instants.end()), instants.end());
    std::map<int, Eigen::Matrix<Real, Eigen::Dynamic, 1>> outputs;
    for (int t : instants) outputs[t] = solve_at(t);

    Real acc = 0.0L;
    for (int t : batch) {
        const auto& o_prev = outputs[t - 1];
        const auto& o_curr = outputs[t];
        Real e_t = 0.0L;
        for (int m = 0; m < m_count; ++m) {
            Real v_diff = static_cast<Real>(data.v(t, m)) - static_cast<Real>(data.v(t - 1, m));
            Real r = v_diff - (o_curr[m] - o_prev[m]);
            e_t += r * r;
        }
        acc += e_t / m_count;
    }
    return acc / static_cast<Real>(batch.size());
}

}  // namespace fdoracle

// ---------------------------------------------------------------------------
// Analytic-vs-finite-difference gradient comparison
// ---------------------------------------------------------------------------

struct GradcheckOptions {
    std::vector<int> batch = {1};
    SolverConfig forward{1e-26, 60000};    // analytic-path solver settings
    BackwardConfig backward{1e-24, 60000};
    double fd_step_rel = 1e-6;   // h = fd_step_rel * |w_m|
    double tolerance = 1e-4;
    double abs_floor = 1e-10;
    int forced_margin = 120;     // extra oracle sweeps beyond the observed solve count
    int threads = 0;
};

struct GradcheckRow {
    int index = 0;
    std::string name;
    double analytic = 0.0;
    double finite_difference = 0.0;
    double rel_error = 0.0;
};

struct GradcheckReport {
    std::vector<GradcheckRow> rows;
    double max_rel_error = 0.0;
    bool pass = false;
    int oracle_sweeps = 0;
    BackwardDiagnostics diagnostics;
};

/// Central finite differences of the batch loss against the analytic BACKWARD
/// gradient. The oracle loss runs a fixed sweep count (observed convergence
/// depth plus a margin) so e(w) is smooth across each +/-h pair.
inline GradcheckReport gradcheck(const FeederModel& model, const ParameterVector& w,
                                 const TimeSeriesSet& data, const GradcheckOptions& opts = {}) {
    GradcheckReport report;

    Eigen::VectorXd analytic = backward_gradient(model, w, opts.batch, data, opts.forward,
                                                 opts.backward, opts.threads,
                                                 &report.diagnostics);

    NodalAdmittanceCache cache = assemble_admittance(model, w);
    std::vector<int> instants;
    for (int t : opts.batch) {
        instants.push_back(t);
        instants.push_back(t - 1);
    }
    auto states = solve_instants(model, cache, data, instants, opts.forward, opts.threads);
    int deepest = 0;
    for (const auto& [t, st] : states) deepest = std::max(deepest, st.iterations);
    report.oracle_sweeps = deepest + opts.forced_margin;

    report.rows.resize(w.size());
    std::vector<GradcheckRow>& rows = report.rows;
    parallel_for(
        static_cast<std::size_t>(w.size()),
        [&](std::size_t m) {
            double h = opts.fd_step_rel * std::abs(w[m]);
            if (h == 0.0) h = 1e-12;
            ParameterVector w_hi = w, w_lo = w;
            w_hi[m] += h;
            w_lo[m] -= h;
            fdoracle::Real e_hi =
                fdoracle::batch_loss(model, w_hi, opts.batch, data, report.oracle_sweeps);
            fdoracle::Real e_lo =
                fdoracle::batch_loss(model, w_lo, opts.batch, data, report.oracle_sweeps);
            GradcheckRow row;
            row.index = static_cast<int>(m);
            row.name = parameter_name(model, static_cast<int>(m));
            row.analytic = analytic[m];
            row.finite_difference =
                static_cast<double>((e_hi - e_lo) / (2.0L * static_cast<fdoracle::Real>(h)));
            double denom = std::max({std::abs(row.analytic), std::abs(row.finite_difference),
                                     opts.abs_floor});
            row.rel_error = std::abs(row.analytic - row.finite_difference) / denom;
            rows[m] = std::move(row);
        },
        opts.threads);

    for (const auto& row : report.rows)
        report.max_rel_error = std::max(report.max_rel_error, row.rel_error);
    report.pass = report.max_rel_error < opts.tolerance;
    return report;
}

}  // namespace gridfit
