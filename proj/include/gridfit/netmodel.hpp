#pragma once

#include "gridfit/blockmath.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <string>
#include <vector>

namespace gridfit {

// ---------------------------------------------------------------------------
// Line parameters and the w / xi orderings
// ---------------------------------------------------------------------------

// Upper-triangle row-major order used everywhere a symmetric 3x3 becomes six
// scalars: aa ab ac bb bc cc.
inline constexpr int kUpperRow[6] = {0, 0, 0, 1, 1, 2};
inline constexpr int kUpperCol[6] = {0, 1, 2, 1, 2, 2};
inline const char* kUpperName[6] = {"aa", "ab", "ac", "bb", "bc", "cc"};

inline Vec6 upper_triangle(const Mat3& m) {
    Vec6 v;
    for (int k = 0; k < 6; ++k) v[k] = m(kUpperRow[k], kUpperCol[k]);
    return v;
}

inline Mat3 from_upper_triangle(const Vec6& v) {
    Mat3 m;
    for (int k = 0; k < 6; ++k) {
        m(kUpperRow[k], kUpperCol[k]) = v[k];
        m(kUpperCol[k], kUpperRow[k]) = v[k];
    }
    return m;
}

/// Symmetric series resistance/reactance of one line, six scalars each.
struct LineParameters {
    Vec6 r = Vec6::Zero();
    Vec6 x = Vec6::Zero();

    Mat3 r_matrix() const { return from_upper_triangle(r); }
    Mat3 x_matrix() const { return from_upper_triangle(x); }
};

// ---------------------------------------------------------------------------
// Loads
// ---------------------------------------------------------------------------

enum class Connection { AN, BN, CN, AB, BC, CA, ABC };

inline const char* connection_name(Connection c) {
    switch (c) {
        case Connection::AN: return "AN";
        case Connection::BN: return "BN";
        case Connection::CN: return "CN";
        case Connection::AB: return "AB";
        case Connection::BC: return "BC";
        case Connection::CA: return "CA";
        case Connection::ABC: return "ABC";
    }
    return "?";
}

inline Connection parse_connection(const std::string& s) {
    if (s == "AN") return Connection::AN;
    if (s == "BN") return Connection::BN;
    if (s == "CN") return Connection::CN;
    if (s == "AB") return Connection::AB;
    if (s == "BC") return Connection::BC;
    if (s == "CA") return Connection::CA;
    if (s == "ABC") return Connection::ABC;
    throw UnknownConnection(s);
}

/// Phases a meter's output depends on. Single-phase and three-phase meters
/// measure one phase (ABC meters read phase a); two-phase meters measure a
/// phase pair.
inline void measured_phases(Connection c, int& i, int& j) {
    switch (c) {
        case Connection::AN: i = 0; j = -1; return;
        case Connection::BN: i = 1; j = -1; return;
        case Connection::CN: i = 2; j = -1; return;
        case Connection::ABC: i = 0; j = -1; return;
        case Connection::AB: i = 0; j = 1; return;
        case Connection::BC: i = 1; j = 2; return;
        case Connection::CA: i = 2; j = 0; return;
    }
    throw UnknownConnection("unmapped connection");
}

struct LoadSpec {
    std::string meter_id;
    int node = -1;   // internal node index
    Connection connection = Connection::AN;
    bool pseudo = false;  // partition pseudo-load
};

// ---------------------------------------------------------------------------
// Feeder model
// ---------------------------------------------------------------------------

/// Topology, loads, and per-unit bases. Node 0 is the source; all impedances
/// are stored per-unit. Immutable after construction by convention.
struct FeederModel {
    struct Line {
        int a = -1;
        int b = -1;
        LineParameters z;  // per-unit
    };

    std::vector<std::string> node_names;  // index 0 = source
    std::vector<Line> lines;
    std::vector<LoadSpec> loads;
    double base_kv = 1.0;    // line-to-line kV
    double base_kva = 1.0;   // three-phase kVA

    int num_nodes() const { return static_cast<int>(node_names.size()); }
    int num_state_nodes() const { return num_nodes() - 1; }
    int num_lines() const { return static_cast<int>(lines.size()); }
    int num_meters() const { return static_cast<int>(loads.size()); }
    int num_params() const { return 12 * num_lines(); }

    double z_base_ohm() const { return base_kv * base_kv * 1000.0 / base_kva; }
    double v_base_ln_volt() const { return base_kv * 1000.0 / std::sqrt(3.0); }
    double s_base_phase_kva() const { return base_kva / 3.0; }

    int node_index(const std::string& name) const {
        for (int i = 0; i < num_nodes(); ++i)
            if (node_names[i] == name) return i;
        throw IndexOutOfRange("unknown node '" + name + "'");
    }

    int find_line(int a, int b) const {
        for (int l = 0; l < num_lines(); ++l) {
            if ((lines[l].a == a && lines[l].b == b) || (lines[l].a == b && lines[l].b == a))
                return l;
        }
        return -1;
    }

    /// Adjacency sorted by neighbor index, so per-node sums do not depend on
    /// the order lines are listed in.
    std::vector<std::vector<std::pair<int, int>>> adjacency() const {
        std::vector<std::vector<std::pair<int, int>>> adj(num_nodes());
        for (int l = 0; l < num_lines(); ++l) {
            adj[lines[l].a].push_back({lines[l].b, l});
            adj[lines[l].b].push_back({lines[l].a, l});
        }
        for (auto& v : adj) std::sort(v.begin(), v.end());
        return adj;
    }

    void validate() const {
        if (num_nodes() < 2) throw Error("feeder needs a source and at least one node");
        for (const auto& ln : lines) {
            if (ln.a < 0 || ln.b < 0 || ln.a >= num_nodes() || ln.b >= num_nodes())
                throw IndexOutOfRange("line endpoint out of range");
            if (ln.a == ln.b) throw Error("line endpoints must differ");
        }
        for (const auto& ld : loads) {
            if (ld.node < 1 || ld.node >= num_nodes())
                throw IndexOutOfRange("load '" + ld.meter_id + "' references node " +
                                      std::to_string(ld.node));
        }
        // connectivity from the source
        std::vector<char> seen(num_nodes(), 0);
        std::vector<int> stack = {0};
        seen[0] = 1;
        auto adj = adjacency();
        while (!stack.empty()) {
            int n = stack.back();
            stack.pop_back();
            for (auto [k, l] : adj[n]) {
                if (!seen[k]) {
                    seen[k] = 1;
                    stack.push_back(k);
                }
            }
        }
        for (int n = 0; n < num_nodes(); ++n)
            if (!seen[n]) throw Error("node '" + node_names[n] + "' is not connected to the source");
    }
};

// ---------------------------------------------------------------------------
// Parameter vector w (12 per line: r upper triangle, then x upper triangle)
// ---------------------------------------------------------------------------

using ParameterVector = Eigen::VectorXd;

inline ParameterVector pack_parameters(const FeederModel& model) {
    ParameterVector w(model.num_params());
    for (int l = 0; l < model.num_lines(); ++l) {
        w.segment<6>(12 * l) = model.lines[l].z.r;
        w.segment<6>(12 * l + 6) = model.lines[l].z.x;
    }
    return w;
}

inline LineParameters line_from_vector(const ParameterVector& w, int line) {
    LineParameters p;
    p.r = w.segment<6>(12 * line);
    p.x = w.segment<6>(12 * line + 6);
    return p;
}

inline void apply_parameters(FeederModel& model, const ParameterVector& w) {
    if (w.size() != model.num_params()) throw IndexOutOfRange("parameter vector length");
    for (int l = 0; l < model.num_lines(); ++l) model.lines[l].z = line_from_vector(w, l);
}

/// Human-readable name of coordinate m of w ("line3.xab" style).
inline std::string parameter_name(const FeederModel& model, int m) {
    int line = m / 12;
    int k = m % 12;
    std::string q = k < 6 ? "r" : "x";
    return model.node_names[model.lines[line].a] + "-" + model.node_names[model.lines[line].b] +
           "." + q + kUpperName[k % 6];
}

// ---------------------------------------------------------------------------
// Admittance-space parameters xi (12 per line: g upper triangle, then b)
// ---------------------------------------------------------------------------

using AdmittanceParameterVector = Eigen::VectorXd;

/// Per-line G_l = (R_l + X_l R_l^-1 X_l)^-1 and B_l = -G_l X_l R_l^-1,
/// flattened with the same ordering scheme as w.
inline AdmittanceParameterVector params_to_admittance(const ParameterVector& w,
                                                      double rcond_min = 1e-12) {
    if (w.size() % 12 != 0) throw IndexOutOfRange("parameter vector length");
    int n_lines = static_cast<int>(w.size()) / 12;
    AdmittanceParameterVector xi(w.size());
    for (int l = 0; l < n_lines; ++l) {
        Mat3 r = from_upper_triangle(w.segment<6>(12 * l));
        Mat3 x = from_upper_triangle(w.segment<6>(12 * l + 6));
        ComplexMat3 y = complex_inverse({r, x}, rcond_min);
        xi.segment<6>(12 * l) = upper_triangle(y.re);
        xi.segment<6>(12 * l + 6) = upper_triangle(y.im);
    }
    return xi;
}

/// Y_nk per line and Y_nn / Z_nn per state node, with 6x6 embeddings.
/// Rebuilt whole for every parameter vector; never mutated in place.
struct NodalAdmittanceCache {
    struct NodeEntry {
        ComplexMat3 y_nn;
        ComplexMat3 z_nn;
        Mat6 z_embed;
        Mat3 g_inv;           // G_nn^-1
        std::vector<std::pair<int, int>> neighbors;  // (node, line), sorted
    };

    std::vector<ComplexMat3> line_y;   // per line, from xi (exactly symmetric)
    std::vector<Mat6> line_y_embed;
    std::vector<NodeEntry> nodes;      // index 0 unused (source carries no state)
    AdmittanceParameterVector xi;
};

inline NodalAdmittanceCache assemble_admittance(const FeederModel& model,
                                                const ParameterVector& w,
                                                double rcond_min = 1e-12) {
    if (w.size() != model.num_params()) throw IndexOutOfRange("parameter vector length");
    NodalAdmittanceCache cache;
    cache.xi = AdmittanceParameterVector(w.size());
    cache.line_y.resize(model.num_lines());
    cache.line_y_embed.resize(model.num_lines());
    for (int l = 0; l < model.num_lines(); ++l) {
        Mat3 r = from_upper_triangle(w.segment<6>(12 * l));
        Mat3 x = from_upper_triangle(w.segment<6>(12 * l + 6));
        ComplexMat3 y;
        try {
            y = complex_inverse({r, x}, rcond_min);
        } catch (const SingularMatrix& e) {
            throw SingularMatrix("line " + model.node_names[model.lines[l].a] + "-" +
                                 model.node_names[model.lines[l].b] + ": " + e.what());
        }
        // store through the upper triangle so Y_nk == Y_kn holds exactly
        cache.xi.segment<6>(12 * l) = upper_triangle(y.re);
        cache.xi.segment<6>(12 * l + 6) = upper_triangle(y.im);
        cache.line_y[l] = {from_upper_triangle(cache.xi.segment<6>(12 * l)),
                           from_upper_triangle(cache.xi.segment<6>(12 * l + 6))};
        cache.line_y_embed[l] = embed(cache.line_y[l]);
    }

    auto adj = model.adjacency();
    cache.nodes.resize(model.num_nodes());
    for (int n = 1; n < model.num_nodes(); ++n) {
        auto& entry = cache.nodes[n];
        entry.neighbors = adj[n];
        ComplexMat3 y_nn;
        for (auto [k, l] : entry.neighbors) y_nn = y_nn + cache.line_y[l];
        entry.y_nn = y_nn;
        try {
            entry.z_nn = complex_inverse(y_nn, rcond_min);
            entry.g_inv = invert_checked(y_nn.re, rcond_min, "G_nn");
        } catch (const SingularMatrix& e) {
            throw SingularMatrix("node " + model.node_names[n] + ": " + e.what());
        }
        entry.z_embed = embed(entry.z_nn);
    }
    return cache;
}

// ---------------------------------------------------------------------------
// Metered powers -> nodal injections
// ---------------------------------------------------------------------------

/// Per state node n, the feature l_n = [Re s_n; Im s_n] stacked over
/// non-source nodes (6N scalars). Loads enter as negative injections.
/// Single-phase loads map to their phase, ABC loads split equally across the
/// three phases, delta loads split equally between the two involved phases.
using FeatureVector = Eigen::VectorXd;

inline FeatureVector injections_from_meters(const FeederModel& model,
                                            const Eigen::Ref<const Eigen::VectorXd>& p_pu,
                                            const Eigen::Ref<const Eigen::VectorXd>& q_pu) {
    if (p_pu.size() != model.num_meters() || q_pu.size() != model.num_meters())
        throw MissingReading("expected " + std::to_string(model.num_meters()) +
                             " meter readings");
    FeatureVector f = FeatureVector::Zero(6 * model.num_state_nodes());
    for (int m = 0; m < model.num_meters(); ++m) {
        double p = p_pu[m];
        double q = q_pu[m];
        if (!std::isfinite(p) || !std::isfinite(q))
            throw MissingReading("meter '" + model.loads[m].meter_id + "'");
        int base = 6 * (model.loads[m].node - 1);
        switch (model.loads[m].connection) {
            case Connection::AN:
                f[base + 0] -= p;
                f[base + 3] -= q;
                break;
            case Connection::BN:
                f[base + 1] -= p;
                f[base + 4] -= q;
                break;
            case Connection::CN:
                f[base + 2] -= p;
                f[base + 5] -= q;
                break;
            case Connection::ABC:
                for (int ph = 0; ph < 3; ++ph) {
                    f[base + ph] -= p / 3.0;
                    f[base + 3 + ph] -= q / 3.0;
                }
                break;
            case Connection::AB:
            case Connection::BC:
            case Connection::CA: {
                int i, j;
                measured_phases(model.loads[m].connection, i, j);
                f[base + i] -= 0.5 * p;
                f[base + 3 + i] -= 0.5 * q;
                f[base + j] -= 0.5 * p;
                f[base + 3 + j] -= 0.5 * q;
                break;
            }
        }
    }
    return f;
}

// ---------------------------------------------------------------------------
// Time series container (per-unit after ingest)
// ---------------------------------------------------------------------------

/// Meter and source series over instants t = 0..T, aligned with the model's
/// load order. Optionally carries generation ground truth for evaluation.
struct TimeSeriesSet {
    int T = 0;
    std::vector<std::string> meter_ids;
    Eigen::MatrixXd p;       // (T+1) x M, per-unit (phase base)
    Eigen::MatrixXd q;       // (T+1) x M
    Eigen::MatrixXd v;       // (T+1) x M, per-unit (line-to-neutral base)
    Eigen::MatrixXd source;  // (T+1) x 6, source state [Re u; Im u]

    // generation provenance, may be empty
    ParameterVector w_true;
    Eigen::MatrixXd v_clean;

    int num_meters() const { return static_cast<int>(meter_ids.size()); }

    void check_instant(int t) const {
        if (t < 0 || t > T) throw IndexOutOfRange("instant " + std::to_string(t));
    }

    Vec6 source_state(int t) const {
        check_instant(t);
        return source.row(t).transpose();
    }
};

/// Rectangular 6-vector [Re u; Im u] <-> complex three-phase phasor.
inline Eigen::Vector3cd state_to_phasor(const Eigen::Ref<const Vec6>& s) {
    return {std::complex<double>(s[0], s[3]), std::complex<double>(s[1], s[4]),
            std::complex<double>(s[2], s[5])};
}

inline Vec6 phasor_to_state(const Eigen::Vector3cd& u) {
    Vec6 s;
    s << u[0].real(), u[1].real(), u[2].real(), u[0].imag(), u[1].imag(), u[2].imag();
    return s;
}

/// Source state from magnitudes and inter-phase angle differences (degrees).
/// Phase a is the angle reference.
inline Vec6 source_state_from_angles(double vmag_a, double vmag_b, double vmag_c,
                                     double ang_ab_deg, double ang_ac_deg) {
    constexpr double kDeg = 3.14159265358979323846 / 180.0;
    Vec6 s;
    s[0] = vmag_a;
    s[3] = 0.0;
    s[1] = vmag_b * std::cos(-ang_ab_deg * kDeg);
    s[4] = vmag_b * std::sin(-ang_ab_deg * kDeg);
    s[2] = vmag_c * std::cos(-ang_ac_deg * kDeg);
    s[5] = vmag_c * std::sin(-ang_ac_deg * kDeg);
    return s;
}

}  // namespace gridfit
