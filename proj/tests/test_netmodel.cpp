#include "gridfit/netmodel.hpp"
#include "gridfit/synthlab.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace gridfit;

namespace {

ParameterVector random_feasible_w(const FeederModel& model, std::uint64_t seed) {
    return perturb_parameters(pack_parameters(model), 0.4, seed);
}

}  // namespace

TEST_CASE("parameter vector round-trips bit-exactly") {
    FeederModel model = builtin_feeder("case13");
    ParameterVector w = pack_parameters(model);
    REQUIRE(w.size() == model.num_params());

    FeederModel copy = model;
    apply_parameters(copy, w);
    ParameterVector w2 = pack_parameters(copy);
    for (Eigen::Index i = 0; i < w.size(); ++i) CHECK(w[i] == w2[i]);

    // per-line matrices rebuild the exact scalars
    for (int l = 0; l < model.num_lines(); ++l) {
        LineParameters p = line_from_vector(w, l);
        CHECK((upper_triangle(p.r_matrix()) - p.r).cwiseAbs().maxCoeff() == 0.0);
        CHECK((upper_triangle(p.x_matrix()) - p.x).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("params_to_admittance closed forms") {
    ParameterVector w(12);
    // R = I, X = 0  ->  G = I, B = 0
    w << 1, 0, 0, 1, 0, 1, 0, 0, 0, 0, 0, 0;
    AdmittanceParameterVector xi = params_to_admittance(w);
    Vec6 g_expected;
    g_expected << 1, 0, 0, 1, 0, 1;
    CHECK((xi.head<6>() - g_expected).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(xi.tail<6>().cwiseAbs().maxCoeff() < 1e-14);

    // R = I, X = I  ->  G = I/2, B = -I/2
    w << 1, 0, 0, 1, 0, 1, 1, 0, 0, 1, 0, 1;
    xi = params_to_admittance(w);
    CHECK((xi.head<6>() - 0.5 * g_expected).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((xi.tail<6>() + 0.5 * g_expected).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("admittance parameters invert back to the impedance parameters") {
    FeederModel model = builtin_feeder("chain8");
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        ParameterVector w = random_feasible_w(model, 100 + trial);
        AdmittanceParameterVector xi = params_to_admittance(w);
        for (int l = 0; l < model.num_lines(); ++l) {
            ComplexMat3 y{from_upper_triangle(xi.segment<6>(12 * l)),
                          from_upper_triangle(xi.segment<6>(12 * l + 6))};
            Eigen::Matrix3cd z_back = y.to_complex().inverse();
            LineParameters z = line_from_vector(w, l);
            CHECK((z_back.real() - z.r_matrix()).cwiseAbs().maxCoeff() < 1e-9);
            CHECK((z_back.imag() - z.x_matrix()).cwiseAbs().maxCoeff() < 1e-9);
        }
    }
}

TEST_CASE("assemble_admittance: diagonal line and cache identities") {
    FeederModel model;
    model.node_names = {"0", "1"};
    model.base_kv = 1.0;
    model.base_kva = 1000.0;
    FeederModel::Line ln;
    ln.a = 0;
    ln.b = 1;
    ln.z.r << 2.0, 0, 0, 4.0, 0, 5.0;
    ln.z.x.setZero();
    model.lines.push_back(ln);
    LoadSpec ld;
    ld.meter_id = "m1";
    ld.node = 1;
    model.loads.push_back(ld);
    model.validate();

    NodalAdmittanceCache cache = assemble_admittance(model, pack_parameters(model));
    CHECK(std::abs(cache.line_y[0].re(0, 0) - 0.5) < 1e-14);
    CHECK(std::abs(cache.line_y[0].re(1, 1) - 0.25) < 1e-14);
    CHECK(std::abs(cache.line_y[0].re(2, 2) - 0.2) < 1e-14);
    CHECK(cache.line_y[0].im.cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("cache: Y_nn is the neighbor sum and Z_nn its inverse") {
    FeederModel model = builtin_feeder("case13");
    ParameterVector w = random_feasible_w(model, 7);
    NodalAdmittanceCache cache = assemble_admittance(model, w);

    for (int n = 1; n < model.num_nodes(); ++n) {
        const auto& entry = cache.nodes[n];
        ComplexMat3 sum;
        for (auto [k, l] : entry.neighbors) sum = sum + cache.line_y[l];
        CHECK((sum.re - entry.y_nn.re).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((sum.im - entry.y_nn.im).cwiseAbs().maxCoeff() < 1e-12);

        // independent complex solve for Z_nn
        Eigen::Matrix3cd direct = entry.y_nn.to_complex().inverse();
        CHECK((direct - entry.z_nn.to_complex()).cwiseAbs().maxCoeff() < 1e-10);
        Eigen::Matrix3cd prod = entry.z_nn.to_complex() * entry.y_nn.to_complex();
        CHECK((prod - Eigen::Matrix3cd::Identity()).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("assemble_admittance is invariant under line reordering") {
    FeederModel model = builtin_feeder("case13");
    ParameterVector w = pack_parameters(model);
    NodalAdmittanceCache cache = assemble_admittance(model, w);

    FeederModel shuffled = model;
    std::reverse(shuffled.lines.begin(), shuffled.lines.end());
    NodalAdmittanceCache cache2 = assemble_admittance(shuffled, pack_parameters(shuffled));

    for (int n = 1; n < model.num_nodes(); ++n) {
        CHECK((cache.nodes[n].y_nn.re - cache2.nodes[n].y_nn.re).cwiseAbs().maxCoeff() == 0.0);
        CHECK((cache.nodes[n].y_nn.im - cache2.nodes[n].y_nn.im).cwiseAbs().maxCoeff() == 0.0);
        CHECK((cache.nodes[n].z_embed - cache2.nodes[n].z_embed).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("assemble_admittance names the offending line") {
    FeederModel model = builtin_feeder("pair2");
    ParameterVector w = pack_parameters(model);
    w.head<6>().setZero();  // kill the resistance of line 0-1
    try {
        assemble_admittance(model, w);
        FAIL("expected SingularMatrix");
    } catch (const SingularMatrix& e) {
        CHECK(std::string(e.what()).find("line 0-1") != std::string::npos);
    }
}

TEST_CASE("injections: placement, sign and split rules") {
    FeederModel model;
    model.node_names = {"0", "1", "2", "3"};
    model.base_kv = 1.0;
    model.base_kva = 3000.0;
    for (int n = 0; n < 3; ++n) {
        FeederModel::Line ln;
        ln.a = n;
        ln.b = n + 1;
        ln.z.r << 1, 0, 0, 1, 0, 1;
        ln.z.x << 1, 0, 0, 1, 0, 1;
        model.lines.push_back(ln);
    }
    auto add = [&](const char* id, int node, Connection c) {
        LoadSpec ld;
        ld.meter_id = id;
        ld.node = node;
        ld.connection = c;
        model.loads.push_back(ld);
    };
    add("an3", 3, Connection::AN);
    add("abc1", 1, Connection::ABC);
    add("ab2", 2, Connection::AB);
    add("bc2", 2, Connection::BC);
    model.validate();

    Eigen::VectorXd p(4), q(4);
    p << 0.01, 0.3, 0.2, 0.1;
    q << 0.005, 0.09, 0.06, 0.03;
    FeatureVector f = injections_from_meters(model, p, q);

    // AN load at node 3: everything lands on phase a, negated
    CHECK(f[6 * 2 + 0] == -0.01);
    CHECK(f[6 * 2 + 3] == -0.005);
    CHECK(f[6 * 2 + 1] == 0.0);

    // ABC load: equal thirds
    CHECK(f[6 * 0 + 0] == Catch::Approx(-0.1).margin(1e-15));
    CHECK(f[6 * 0 + 1] == Catch::Approx(-0.1).margin(1e-15));
    CHECK(f[6 * 0 + 2] == Catch::Approx(-0.1).margin(1e-15));
    CHECK(f[6 * 0 + 4] == Catch::Approx(-0.03).margin(1e-15));

    // AB and BC at node 2: phase b collects both half-shares
    CHECK(f[6 * 1 + 0] == Catch::Approx(-0.1).margin(1e-15));
    CHECK(f[6 * 1 + 1] == Catch::Approx(-0.1 - 0.05).margin(1e-15));
    CHECK(f[6 * 1 + 2] == Catch::Approx(-0.05).margin(1e-15));
    CHECK(f[6 * 1 + 4] == Catch::Approx(-0.03 - 0.015).margin(1e-15));

    // total system injection equals negative total consumption
    double total_p = 0.0;
    for (int n = 0; n < 3; ++n)
        for (int ph = 0; ph < 3; ++ph) total_p += f[6 * n + ph];
    CHECK(std::abs(total_p + p.sum()) < 1e-12);

    // missing reading
    p[1] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(injections_from_meters(model, p, q), MissingReading);
}

TEST_CASE("connection parsing") {
    CHECK(parse_connection("AN") == Connection::AN);
    CHECK(parse_connection("CA") == Connection::CA);
    CHECK(parse_connection("ABC") == Connection::ABC);
    CHECK_THROWS_AS(parse_connection("AC"), UnknownConnection);
}

TEST_CASE("per-unit bases") {
    FeederModel model = builtin_feeder("case13");
    CHECK(model.z_base_ohm() == Catch::Approx(4.16 * 4.16 * 1000.0 / 5000.0));
    CHECK(model.v_base_ln_volt() == Catch::Approx(4160.0 / std::sqrt(3.0)));
    CHECK(model.s_base_phase_kva() == Catch::Approx(5000.0 / 3.0));
}

TEST_CASE("source state reconstruction from magnitudes and angles") {
    Vec6 flat = source_state_from_angles(1.0, 1.0, 1.0, 120.0, -120.0);
    Vec6 expected = balanced_flat_state();
    CHECK((flat - expected).cwiseAbs().maxCoeff() < 1e-12);
}
