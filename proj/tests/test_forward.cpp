#include "gridfit/forward.hpp"
#include "gridfit/synthlab.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <complex>
#include <random>

using namespace gridfit;

namespace {

/// Constant-in-time series with the given per-meter consumption.
TimeSeriesSet constant_data(const FeederModel& model, double p_pu, double q_pu, int T = 2) {
    TimeSeriesSet data;
    data.T = T;
    for (const auto& ld : model.loads) data.meter_ids.push_back(ld.meter_id);
    int m_count = model.num_meters();
    data.p = Eigen::MatrixXd::Constant(T + 1, m_count, p_pu);
    data.q = Eigen::MatrixXd::Constant(T + 1, m_count, q_pu);
    data.v = Eigen::MatrixXd::Ones(T + 1, m_count);
    data.source.resize(T + 1, 6);
    Vec6 src = balanced_flat_state();
    for (int t = 0; t <= T; ++t) data.source.row(t) = src.transpose();
    return data;
}

/// Direct complex-arithmetic evaluation of one transition sweep.
Eigen::VectorXd complex_transition_oracle(const FeederModel& model, const ParameterVector& w,
                                          const Eigen::VectorXd& x, const Vec6& source,
                                          const FeatureVector& features) {
    auto adj = model.adjacency();
    std::vector<Eigen::Matrix3cd> y(model.num_lines());
    for (int l = 0; l < model.num_lines(); ++l) {
        LineParameters z = line_from_vector(w, l);
        Eigen::Matrix3cd zc;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) zc(i, j) = {z.r_matrix()(i, j), z.x_matrix()(i, j)};
        y[l] = zc.inverse();
    }
    auto node_u = [&](int n) -> Eigen::Vector3cd {
        if (n == 0) return state_to_phasor(source);
        return state_to_phasor(Vec6(x.segment<6>(6 * (n - 1))));
    };
    Eigen::VectorXd out(x.size());
    for (int n = 1; n < model.num_nodes(); ++n) {
        Eigen::Matrix3cd y_nn = Eigen::Matrix3cd::Zero();
        Eigen::Vector3cd acc = Eigen::Vector3cd::Zero();
        for (auto [k, l] : adj[n]) {
            y_nn += y[l];
            acc += y[l] * node_u(k);
        }
        Eigen::Vector3cd u_n = node_u(n);
        for (int ph = 0; ph < 3; ++ph) {
            std::complex<double> s{features[6 * (n - 1) + ph], features[6 * (n - 1) + 3 + ph]};
            acc[ph] += std::conj(s) / std::conj(u_n[ph]);
        }
        Eigen::Vector3cd u_new = y_nn.inverse() * acc;
        out.segment<6>(6 * (n - 1)) = phasor_to_state(u_new);
    }
    return out;
}

}  // namespace

TEST_CASE("zero injections: every node equals the source") {
    FeederModel model = builtin_feeder("case13");
    ParameterVector w = pack_parameters(model);
    NodalAdmittanceCache cache = assemble_admittance(model, w);
    FeatureVector f = FeatureVector::Zero(6 * model.num_state_nodes());
    Vec6 src = balanced_flat_state();

    NetworkState st = forward_solve(model, cache, f, src);
    for (int n = 1; n < model.num_nodes(); ++n)
        CHECK((st.node(n) - src).cwiseAbs().maxCoeff() < 1e-13);

    // flat init equals the fixed point, so the first sweep already passes
    CHECK(st.iterations == 1);
}

TEST_CASE("two-node feeder matches the Newton oracle") {
    FeederModel model = builtin_feeder("pair2");
    ParameterVector w = pack_parameters(model);
    NodalAdmittanceCache cache = assemble_admittance(model, w);

    Eigen::VectorXd p(1), q(1);
    p << 0.05;
    q << 0.02;
    FeatureVector f = injections_from_meters(model, p, q);
    Vec6 src = balanced_flat_state();

    SolverConfig cfg;
    cfg.eps_forward = 1e-26;
    cfg.max_iter = 50000;
    NetworkState fixed_point = forward_solve(model, cache, f, src, cfg);
    NetworkState newton = newton_oracle(model, w, f, src);

    CHECK((fixed_point.x - newton.x).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(power_residual(model, cache, fixed_point, f) < 1e-8);
}

TEST_CASE("case13 at peak load satisfies the power-balance residual") {
    FeederModel model = builtin_feeder("case13");
    ParameterVector w = pack_parameters(model);
    NodalAdmittanceCache cache = assemble_admittance(model, w);

    // 3 MW spread over 10 meters at 0.95 lagging, per-unit phase base
    double p_pu = 300.0 / model.s_base_phase_kva();
    double q_pu = p_pu * 0.33;
    Eigen::VectorXd p = Eigen::VectorXd::Constant(10, p_pu);
    Eigen::VectorXd q = Eigen::VectorXd::Constant(10, q_pu);
    FeatureVector f = injections_from_meters(model, p, q);

    SolverConfig cfg;
    cfg.eps_forward = 1e-26;
    cfg.max_iter = 50000;
    NetworkState st = forward_solve(model, cache, f, balanced_flat_state(), cfg);
    CHECK(power_residual(model, cache, st, f) < 1e-8);
    for (int n = 1; n < model.num_nodes(); ++n) {
        Eigen::Vector3cd u = state_to_phasor(st.node(n));
        for (int ph = 0; ph < 3; ++ph) {
            CHECK(std::abs(u[ph]) > 0.5);
            CHECK(std::abs(u[ph]) < 1.5);
        }
    }
}

TEST_CASE("transition_step: fixed point maps to itself") {
    FeederModel model = builtin_feeder("chain4");
    ParameterVector w = pack_parameters(model);
    NodalAdmittanceCache cache = assemble_admittance(model, w);
    TimeSeriesSet data = constant_data(model, 0.03, 0.01);
    FeatureVector f = injections_from_meters(model, data.p.row(0), data.q.row(0));

    SolverConfig cfg;
    cfg.eps_forward = 1e-28;
    cfg.max_iter = 50000;
    NetworkState st = forward_solve(model, cache, f, balanced_flat_state(), cfg);
    NetworkState next = transition_step(model, cache, st, f);
    CHECK((next.x - st.x).cwiseAbs().maxCoeff() < 1e-11);
}

TEST_CASE("transition_step matches direct complex evaluation") {
    FeederModel model = builtin_feeder("chain4");
    ParameterVector w = pack_parameters(model);
    NodalAdmittanceCache cache = assemble_admittance(model, w);

    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> uni(-0.1, 0.1);
    Eigen::VectorXd x(6 * model.num_state_nodes());
    Vec6 flat = balanced_flat_state();
    for (int n = 0; n < model.num_state_nodes(); ++n)
        for (int i = 0; i < 6; ++i) x[6 * n + i] = flat[i] + uni(rng);
    FeatureVector f(6 * model.num_state_nodes());
    for (Eigen::Index i = 0; i < f.size(); ++i) f[i] = uni(rng) * 0.3;

    NetworkState st;
    st.source = balanced_flat_state();
    st.x = x;
    NetworkState stepped = transition_step(model, cache, st, f);
    Eigen::VectorXd oracle = complex_transition_oracle(model, w, x, st.source, f);
    CHECK((stepped.x - oracle).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("transition rejects a dead phase") {
    FeederModel model = builtin_feeder("pair2");
    NodalAdmittanceCache cache = assemble_admittance(model, pack_parameters(model));
    NetworkState st;
    st.source = balanced_flat_state();
    st.x = Eigen::VectorXd::Zero(6);
    FeatureVector f = FeatureVector::Ones(6) * 0.01;
    CHECK_THROWS_AS(transition_step(model, cache, st, f), ZeroVoltage);
}

TEST_CASE("meter_output closed forms") {
    FeederModel model = builtin_feeder("toy3");
    NetworkState st;
    st.source = balanced_flat_state();
    st.x.resize(12);
    st.x.segment<6>(0) = balanced_flat_state();
    st.x.segment<6>(6) = balanced_flat_state();

    LoadSpec an{"an", 1, Connection::AN, false};
    CHECK(meter_output(st, an) == Catch::Approx(1.0));

    LoadSpec ab{"ab", 1, Connection::AB, false};
    CHECK(meter_output(st, ab) == Catch::Approx(std::sqrt(3.0)));

    LoadSpec abc{"abc", 2, Connection::ABC, false};
    CHECK(meter_output(st, abc) == Catch::Approx(1.0));

    // arbitrary state: squared output equals the component sum
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    for (int i = 0; i < 12; ++i) st.x[i] = uni(rng);
    LoadSpec bc{"bc", 2, Connection::BC, false};
    double o = meter_output(st, bc);
    Vec6 xn = st.x.segment<6>(6);
    double expected_sq = (xn[1] - xn[2]) * (xn[1] - xn[2]) + (xn[4] - xn[5]) * (xn[4] - xn[5]);
    CHECK(o * o == Catch::Approx(expected_sq).epsilon(1e-14));
}

TEST_CASE("loss: zero residual, arithmetic, and batch decomposition") {
    FeederModel model = builtin_feeder("toy3");
    ParameterVector w = pack_parameters(model);
    TimeSeriesSet data = constant_data(model, 0.02, 0.008, 8);

    // record the model's own outputs -> zero loss
    NodalAdmittanceCache cache = assemble_admittance(model, w);
    SolverConfig cfg;
    for (int t = 0; t <= data.T; ++t) {
        FeatureVector f = injections_from_meters(model, data.p.row(t), data.q.row(t));
        NetworkState st = forward_solve(model, cache, f, data.source_state(t), cfg);
        data.v.row(t) = meter_outputs(model, st).transpose();
    }
    CHECK(loss(model, w, {1, 2, 3}, data) == Catch::Approx(0.0).margin(1e-18));

    // M = 1, single t, residual 0.01 -> 1e-4
    FeederModel single = builtin_feeder("pair2");
    TimeSeriesSet sdata = constant_data(single, 0.01, 0.004, 2);
    NodalAdmittanceCache scache = assemble_admittance(single, pack_parameters(single));
    for (int t = 0; t <= 2; ++t) {
        FeatureVector f = injections_from_meters(single, sdata.p.row(t), sdata.q.row(t));
        NetworkState st = forward_solve(single, scache, f, sdata.source_state(t), cfg);
        sdata.v.row(t) = meter_outputs(single, st).transpose();
    }
    sdata.v(1, 0) += 0.01;  // shift one reading's first difference by 0.01
    double e1 = loss(single, pack_parameters(single), {1}, sdata);
    CHECK(e1 == Catch::Approx(1e-4).epsilon(1e-9));

    // disjoint mini-batches recombine to the full loss
    TimeSeriesSet vdata = constant_data(model, 0.02, 0.008, 6);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> uni(0.9, 1.1);
    for (int t = 0; t <= 6; ++t)
        for (int m = 0; m < model.num_meters(); ++m) vdata.v(t, m) = uni(rng);
    double full = loss(model, w, {1, 2, 3, 4, 5, 6}, vdata);
    double b1 = loss(model, w, {1, 2}, vdata);
    double b2 = loss(model, w, {3, 4, 5, 6}, vdata);
    CHECK(std::abs((2.0 * b1 + 4.0 * b2) / 6.0 - full) < 1e-14);
}

TEST_CASE("solver is deterministic") {
    FeederModel model = builtin_feeder("case13");
    NodalAdmittanceCache cache = assemble_admittance(model, pack_parameters(model));
    TimeSeriesSet data = constant_data(model, 0.05, 0.02);
    FeatureVector f = injections_from_meters(model, data.p.row(0), data.q.row(0));
    NetworkState a = forward_solve(model, cache, f, balanced_flat_state());
    NetworkState b = forward_solve(model, cache, f, balanced_flat_state());
    CHECK((a.x - b.x).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.iterations == b.iterations);
}

TEST_CASE("transposed line model keeps balanced loads balanced") {
    FeederModel model;
    model.node_names = {"0", "1", "2"};
    model.base_kv = 4.16;
    model.base_kva = 5000.0;
    for (int n = 0; n < 2; ++n) {
        FeederModel::Line ln;
        ln.a = n;
        ln.b = n + 1;
        ln.z.r << 0.05, 0.02, 0.02, 0.05, 0.02, 0.05;
        ln.z.x << 0.12, 0.05, 0.05, 0.12, 0.05, 0.12;
        model.lines.push_back(ln);
    }
    LoadSpec ld;
    ld.meter_id = "abc1";
    ld.node = 1;
    ld.connection = Connection::ABC;
    model.loads.push_back(ld);
    ld.meter_id = "abc2";
    ld.node = 2;
    model.loads.push_back(ld);
    model.validate();

    NodalAdmittanceCache cache = assemble_admittance(model, pack_parameters(model));
    Eigen::VectorXd p = Eigen::VectorXd::Constant(2, 0.3), q = Eigen::VectorXd::Constant(2, 0.1);
    FeatureVector f = injections_from_meters(model, p, q);
    SolverConfig cfg;
    cfg.eps_forward = 1e-26;
    NetworkState st = forward_solve(model, cache, f, balanced_flat_state(), cfg);
    for (int n = 1; n < 3; ++n) {
        Eigen::Vector3cd u = state_to_phasor(st.node(n));
        CHECK(std::abs(std::abs(u[0]) - std::abs(u[1])) < 1e-10);
        CHECK(std::abs(std::abs(u[1]) - std::abs(u[2])) < 1e-10);
    }
}

TEST_CASE("solver failure modes") {
    FeederModel model = builtin_feeder("pair2");
    NodalAdmittanceCache cache = assemble_admittance(model, pack_parameters(model));
    Eigen::VectorXd p(1), q(1);
    p << 0.05;
    q << 0.02;
    FeatureVector f = injections_from_meters(model, p, q);

    SolverConfig starved;
    starved.max_iter = 1;
    starved.eps_forward = 1e-30;
    CHECK_THROWS_AS(forward_solve(model, cache, f, balanced_flat_state(), starved), NotConverged);

    // an impossible load blows the iteration past the divergence cap
    Eigen::VectorXd huge = Eigen::VectorXd::Constant(1, 1e8);
    FeatureVector f2 = injections_from_meters(model, huge, q);
    SolverConfig cap;
    cap.divergence_cap = 100.0;
    CHECK_THROWS_AS(forward_solve(model, cache, f2, balanced_flat_state(), cap), Diverged);
}
