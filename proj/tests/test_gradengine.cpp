#include "gridfit/gradcheck.hpp"
#include "gridfit/synthlab.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace gridfit;

namespace {

TimeSeriesSet scenario_data(const std::string& feeder, int T, std::uint64_t seed) {
    FeederModel model = builtin_feeder(feeder);
    ScenarioConfig cfg;
    cfg.horizon = T;
    cfg.rng_seed = seed;
    cfg.peak_kw = builtin_peak_kw(feeder);
    return generate_scenario(model, pack_parameters(model), cfg).data;
}

PairedState make_paired(const FeederModel& model, const NodalAdmittanceCache& cache,
                        const TimeSeriesSet& data, int t, const SolverConfig& cfg) {
    PairedState paired;
    paired.t = t;
    paired.features_prev = injections_from_meters(model, data.p.row(t - 1), data.q.row(t - 1));
    paired.features_curr = injections_from_meters(model, data.p.row(t), data.q.row(t));
    paired.prev = forward_solve(model, cache, paired.features_prev, data.source_state(t - 1), cfg);
    paired.curr = forward_solve(model, cache, paired.features_curr, data.source_state(t), cfg);
    return paired;
}

double paired_loss(const FeederModel& model, const TimeSeriesSet& data, const PairedState& p) {
    return loss_at(model, data, meter_outputs(model, p.prev), meter_outputs(model, p.curr), p.t);
}

}  // namespace

TEST_CASE("A_hat block structure") {
    FeederModel model = builtin_feeder("chain4");
    TimeSeriesSet data = scenario_data("chain4", 4, 21);
    ParameterVector w = perturb_parameters(pack_parameters(model), 0.3, 5);
    NodalAdmittanceCache cache = assemble_admittance(model, w);
    SolverConfig cfg;
    cfg.eps_forward = 1e-26;
    cfg.max_iter = 50000;
    PairedState paired = make_paired(model, cache, data, 2, cfg);

    Eigen::MatrixXd a_hat = build_A_hat(model, cache, paired);
    int n6 = 6 * model.num_state_nodes();

    SECTION("cross-time blocks are exactly zero") {
        CHECK(a_hat.topRightCorner(n6, n6).cwiseAbs().maxCoeff() == 0.0);
        CHECK(a_hat.bottomLeftCorner(n6, n6).cwiseAbs().maxCoeff() == 0.0);
    }

    SECTION("non-adjacent pairs vanish, adjacent pairs are <Z_nn><Y_nk>") {
        // chain 0-1-2-3: nodes 1 and 3 are not adjacent
        CHECK(a_hat.block<6, 6>(0, 12).cwiseAbs().maxCoeff() == 0.0);
        CHECK(a_hat.block<6, 6>(12, 0).cwiseAbs().maxCoeff() == 0.0);

        int l12 = model.find_line(1, 2);
        Mat6 expected = embed(cache.nodes[1].z_nn) * embed(cache.line_y[l12]);
        CHECK((a_hat.block<6, 6>(0, 6) - expected).cwiseAbs().maxCoeff() < 1e-14);
    }

    SECTION("matches finite differences of transition_step over the state") {
        for (int half = 0; half < 2; ++half) {
            const NetworkState& base = half == 0 ? paired.prev : paired.curr;
            const FeatureVector& f = half == 0 ? paired.features_prev : paired.features_curr;
            double h = 1e-6;
            for (int col = 0; col < n6; ++col) {
                NetworkState hi = base, lo = base;
                hi.x[col] += h;
                lo.x[col] -= h;
                Eigen::VectorXd diff =
                    (transition_step(model, cache, hi, f).x - transition_step(model, cache, lo, f).x) /
                    (2.0 * h);
                Eigen::VectorXd analytic = a_hat.block(half * n6, half * n6, n6, n6).col(col);
                CHECK((diff - analytic).cwiseAbs().maxCoeff() < 1e-6);
            }
        }
    }
}

TEST_CASE("b_hat: zero residual, locality, and state finite differences") {
    FeederModel model = builtin_feeder("chain4");
    TimeSeriesSet data = scenario_data("chain4", 4, 33);
    ParameterVector w_true = data.w_true;
    SolverConfig cfg;
    cfg.eps_forward = 1e-26;
    cfg.max_iter = 50000;

    SECTION("perfect outputs give a zero b_hat") {
        NodalAdmittanceCache cache = assemble_admittance(model, w_true);
        PairedState paired = make_paired(model, cache, data, 2, cfg);
        // overwrite the measurements with the model's own outputs
        TimeSeriesSet exact = data;
        exact.v.row(1) = meter_outputs(model, paired.prev).transpose();
        exact.v.row(2) = meter_outputs(model, paired.curr).transpose();
        Eigen::VectorXd b = build_b_hat(model, exact, paired);
        CHECK(b.cwiseAbs().maxCoeff() == 0.0);
    }

    ParameterVector w = perturb_parameters(w_true, 0.3, 6);
    NodalAdmittanceCache cache = assemble_admittance(model, w);
    PairedState paired = make_paired(model, cache, data, 3, cfg);
    Eigen::VectorXd b = build_b_hat(model, data, paired);
    int n6 = 6 * model.num_state_nodes();

    SECTION("columns of meter-free nodes are zero") {
        // chain4 has no meter at node 1's phase-b-only? instead: verify that a
        // node hosting no meter contributes nothing: build a copy with the
        // node-2 meters moved and check locality directly per meter case
        Eigen::VectorXd b_single = Eigen::VectorXd::Zero(2 * n6);
        // recompute with only meter 0 active by zeroing the others' residuals
        TimeSeriesSet only0 = data;
        for (int m = 1; m < model.num_meters(); ++m) {
            double o_prev = meter_output(paired.prev, model.loads[m]);
            double o_curr = meter_output(paired.curr, model.loads[m]);
            only0.v(paired.t, m) = only0.v(paired.t - 1, m) + (o_curr - o_prev);
        }
        b_single = build_b_hat(model, only0, paired);
        int node0 = model.loads[0].node;
        for (int n = 1; n <= model.num_state_nodes(); ++n) {
            if (n == node0) continue;
            CHECK(b_single.segment<6>(6 * (n - 1)).cwiseAbs().maxCoeff() == 0.0);
            CHECK(b_single.segment<6>(n6 + 6 * (n - 1)).cwiseAbs().maxCoeff() == 0.0);
        }
    }

    SECTION("matches finite differences of the paired loss over states") {
        double h = 1e-7;
        for (int col = 0; col < 2 * n6; ++col) {
            PairedState hi = paired, lo = paired;
            if (col < n6) {
                hi.prev.x[col] += h;
                lo.prev.x[col] -= h;
            } else {
                hi.curr.x[col - n6] += h;
                lo.curr.x[col - n6] -= h;
            }
            double fd = (paired_loss(model, data, hi) - paired_loss(model, data, lo)) / (2.0 * h);
            CHECK(std::abs(fd - b[col]) < 1e-6);
        }
    }
}

TEST_CASE("d_xi_d_w: locality, scalar reduction, finite differences") {
    SECTION("parameters of one line do not move another line's admittance") {
        FeederModel model = builtin_feeder("chain4");
        ParameterVector w = perturb_parameters(pack_parameters(model), 0.3, 9);
        Eigen::MatrixXd jac = d_xi_d_w(w);
        for (int lr = 0; lr < model.num_lines(); ++lr)
            for (int lc = 0; lc < model.num_lines(); ++lc)
                if (lr != lc)
                    CHECK(jac.block<12, 12>(12 * lr, 12 * lc).cwiseAbs().maxCoeff() == 0.0);
    }

    SECTION("diagonal matrices reduce to the scalar formula") {
        // per phase: g = r/(r^2+x^2), dg/dr = (x^2-r^2)/(r^2+x^2)^2 = 0 at r = x = 1
        ParameterVector w(12);
        w << 1, 0, 0, 1, 0, 1, 1, 0, 0, 1, 0, 1;
        LineParameters z;
        z.r = w.head<6>();
        z.x = w.tail<6>();
        Mat12 jac = line_dxi_dw(z);
        CHECK(std::abs(jac(0, 0)) < 1e-14);  // dg_aa / dr_aa
        // db_aa/dr_aa = (2 r x)/(r^2+x^2)^2 = 1/2 at r = x = 1... with b = -x/(r^2+x^2)
        CHECK(jac(6, 0) == Catch::Approx(0.5).epsilon(1e-12));
    }

    SECTION("matches finite differences of params_to_admittance") {
        FeederModel model = builtin_feeder("chain4");
        ParameterVector w = perturb_parameters(pack_parameters(model), 0.3, 10);
        Eigen::MatrixXd jac = d_xi_d_w(w);
        double scale = w.cwiseAbs().mean();
        for (Eigen::Index m = 0; m < w.size(); ++m) {
            double h = 1e-7 * scale;
            ParameterVector hi = w, lo = w;
            hi[m] += h;
            lo[m] -= h;
            Eigen::VectorXd fd = (params_to_admittance(hi) - params_to_admittance(lo)) / (2.0 * h);
            Eigen::VectorXd analytic = jac.col(m);
            double denom = std::max(1e-10, fd.cwiseAbs().maxCoeff());
            CHECK((fd - analytic).cwiseAbs().maxCoeff() / denom < 1e-5);
        }
    }
}

TEST_CASE("d_F_hat_d_w: locality, elementary patterns, finite differences") {
    FeederModel model = builtin_feeder("chain4");
    TimeSeriesSet data = scenario_data("chain4", 4, 44);
    ParameterVector w = perturb_parameters(data.w_true, 0.3, 11);
    NodalAdmittanceCache cache = assemble_admittance(model, w);
    SolverConfig cfg;
    cfg.eps_forward = 1e-26;
    cfg.max_iter = 50000;
    PairedState paired = make_paired(model, cache, data, 2, cfg);
    Eigen::MatrixXd dfdw = build_d_F_hat_d_w(model, cache, w, paired);
    int n6 = 6 * model.num_state_nodes();

    SECTION("rows of a node are zero for non-incident lines") {
        // node 1 is incident to lines 0-1 and 1-2 only; line 2-3 does not touch it
        int l23 = model.find_line(2, 3);
        CHECK(dfdw.block<6, 12>(0, 12 * l23).cwiseAbs().maxCoeff() == 0.0);
        CHECK(dfdw.block<6, 12>(n6, 12 * l23).cwiseAbs().maxCoeff() == 0.0);
        // node 3 is incident to line 2-3 only
        int l01 = model.find_line(0, 1);
        CHECK(dfdw.block<6, 12>(12, 12 * l01).cwiseAbs().maxCoeff() == 0.0);
    }

    SECTION("dY pattern: off-diagonal conductance hits E(i,j) + E(j,i)") {
        // coordinate 1 is g_ab; applying its pattern to a basis vector picks
        // the paired entries
        Vec6 e_b = Vec6::Zero();
        e_b[1] = 1.0;  // Re u_b
        Vec6 out = apply_dY_pattern(1, e_b);
        CHECK(out[0] == 1.0);  // E^(a,b) row a picks b
        CHECK(out.cwiseAbs().sum() == 1.0);
        Vec6 e_a = Vec6::Zero();
        e_a[0] = 1.0;
        out = apply_dY_pattern(1, e_a);
        CHECK(out[1] == 1.0);  // E^(b,a) row b picks a
        CHECK(out.cwiseAbs().sum() == 1.0);
    }

    SECTION("matches finite differences of transition_step over w") {
        for (Eigen::Index m = 0; m < w.size(); ++m) {
            double h = 1e-6 * std::abs(w[m]);
            ParameterVector hi_w = w, lo_w = w;
            hi_w[m] += h;
            lo_w[m] -= h;
            NodalAdmittanceCache hi_cache = assemble_admittance(model, hi_w);
            NodalAdmittanceCache lo_cache = assemble_admittance(model, lo_w);
            Eigen::VectorXd fd(2 * n6);
            fd.head(n6) = (transition_step(model, hi_cache, paired.prev, paired.features_prev).x -
                           transition_step(model, lo_cache, paired.prev, paired.features_prev).x) /
                          (2.0 * h);
            fd.tail(n6) = (transition_step(model, hi_cache, paired.curr, paired.features_curr).x -
                           transition_step(model, lo_cache, paired.curr, paired.features_curr).x) /
                          (2.0 * h);
            double denom = std::max(1e-10, fd.cwiseAbs().maxCoeff());
            CHECK((fd - dfdw.col(m)).cwiseAbs().maxCoeff() / denom < 1e-5);
        }
    }
}

TEST_CASE("backward_gradient: zero at the truth on noiseless data") {
    FeederModel model = builtin_feeder("case13");
    ScenarioConfig scfg;
    scfg.horizon = 12;
    scfg.rng_seed = 3;
    scfg.peak_kw = 3000.0;
    scfg.oracle.tol = 3e-14;
    TimeSeriesSet data = generate_scenario(model, pack_parameters(model), scfg).data;

    SolverConfig fwd;
    fwd.eps_forward = 1e-28;
    fwd.max_iter = 100000;
    BackwardConfig bwd;
    bwd.eps_backward = 1e-28;
    bwd.max_iter = 100000;
    Eigen::VectorXd g =
        backward_gradient(model, pack_parameters(model), {2, 5, 9}, data, fwd, bwd);
    CHECK(g.norm() < 1e-9);
}

TEST_CASE("backward_gradient matches finite differences on chain4") {
    FeederModel model = builtin_feeder("chain4");
    TimeSeriesSet data = scenario_data("chain4", 6, 77);
    ParameterVector w = perturb_parameters(data.w_true, 0.4, 13);

    GradcheckOptions opts;
    opts.batch = {2, 4};
    opts.tolerance = 1e-5;
    GradcheckReport report = gradcheck(model, w, data, opts);
    INFO("max rel error " << report.max_rel_error);
    CHECK(report.pass);
    CHECK(report.rows.size() == static_cast<std::size_t>(model.num_params()));
}

TEST_CASE("batch gradient is the mean of per-instant gradients") {
    FeederModel model = builtin_feeder("chain4");
    TimeSeriesSet data = scenario_data("chain4", 5, 88);
    ParameterVector w = perturb_parameters(data.w_true, 0.3, 14);
    SolverConfig fwd;
    fwd.eps_forward = 1e-24;
    fwd.max_iter = 50000;
    BackwardConfig bwd;
    Eigen::VectorXd g2 = backward_gradient(model, w, {2}, data, fwd, bwd);
    Eigen::VectorXd g4 = backward_gradient(model, w, {4}, data, fwd, bwd);
    Eigen::VectorXd g24 = backward_gradient(model, w, {2, 4}, data, fwd, bwd);
    CHECK((0.5 * (g2 + g4) - g24).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("a corrupted Jacobian fails the gradient check") {
    FeederModel model = builtin_feeder("chain4");
    TimeSeriesSet data = scenario_data("chain4", 4, 99);
    ParameterVector w = perturb_parameters(data.w_true, 0.3, 15);

    GradcheckOptions opts;
    opts.batch = {2};
    opts.backward.self_block_fault = 1e-3;
    GradcheckReport report = gradcheck(model, w, data, opts);
    CHECK_FALSE(report.pass);
}

TEST_CASE("z iteration failure modes") {
    FeederModel model = builtin_feeder("chain4");
    TimeSeriesSet data = scenario_data("chain4", 4, 12);
    ParameterVector w = perturb_parameters(data.w_true, 0.3, 16);
    SolverConfig fwd;
    BackwardConfig starved;
    starved.max_iter = 2;
    starved.eps_backward = 1e-30;
    CHECK_THROWS_AS(backward_gradient(model, w, {2}, data, fwd, starved), NotConverged);
}
