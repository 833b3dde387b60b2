#pragma once

#include "gridfit/estimator.hpp"

#include <complex>
#include <map>

namespace gridfit {

// ---------------------------------------------------------------------------
// Network partition into sub-feeders (quasi-sources + pseudo-loads)
// ---------------------------------------------------------------------------

struct PartitionPlan {
    struct SubNetwork {
        FeederModel model;                        // node 0 = designated source
        std::vector<int> node_map;                // sub node index -> original node index
        std::vector<int> line_map;                // sub line index -> original line index
        int source_original = 0;
        std::vector<int> pseudo_nodes_original;   // embedded quasi-sources in this sub
    };
    std::vector<int> cut_lines;                   // original line indices
    std::vector<int> quasi_nodes;                 // quasi-source end per cut line
    std::vector<SubNetwork> subs;
};

namespace detail {

inline std::vector<int> distances_from_source(const FeederModel& model) {
    auto adj = model.adjacency();
    std::vector<int> dist(model.num_nodes(), -1);
    std::vector<int> queue = {0};
    dist[0] = 0;
    for (std::size_t head = 0; head < queue.size(); ++head) {
        int n = queue[head];
        for (auto [k, l] : adj[n]) {
            if (dist[k] < 0) {
                dist[k] = dist[n] + 1;
                queue.push_back(k);
            }
        }
    }
    return dist;
}

}  // namespace detail

/// Splits the feeder along the given cut edges. One end of every cut edge
/// (the end nearer the substation) becomes a quasi-source: it is the source
/// node of the downstream sub-network and an ordinary node with three
/// single-phase pseudo-loads in the sub-network that contains it. Cut-line
/// parameters belong to the downstream sub-network.
inline PartitionPlan partition_network(const FeederModel& model,
                                       const std::vector<std::pair<std::string, std::string>>& cuts) {
    PartitionPlan plan;
    for (const auto& [a, b] : cuts) {
        int l = model.find_line(model.node_index(a), model.node_index(b));
        if (l < 0) throw InvalidCut("edge " + a + "-" + b + " is not a feeder line");
        plan.cut_lines.push_back(l);
    }

    // components after removing cut edges
    std::vector<int> component(model.num_nodes(), -1);
    auto adj = model.adjacency();
    int n_comp = 0;
    for (int start = 0; start < model.num_nodes(); ++start) {
        if (component[start] >= 0) continue;
        int c = n_comp++;
        std::vector<int> stack = {start};
        component[start] = c;
        while (!stack.empty()) {
            int n = stack.back();
            stack.pop_back();
            for (auto [k, l] : adj[n]) {
                if (std::find(plan.cut_lines.begin(), plan.cut_lines.end(), l) !=
                    plan.cut_lines.end())
                    continue;
                if (component[k] < 0) {
                    component[k] = c;
                    stack.push_back(k);
                }
            }
        }
    }
    if (!cuts.empty() && n_comp < 2)
        throw InvalidCut("cut edges do not disconnect the feeder");

    std::vector<int> dist = detail::distances_from_source(model);
    std::vector<int> inbound_cut(n_comp, -1);  // cut line feeding each component
    plan.quasi_nodes.resize(plan.cut_lines.size());
    for (std::size_t ci = 0; ci < plan.cut_lines.size(); ++ci) {
        const auto& line = model.lines[plan.cut_lines[ci]];
        if (component[line.a] == component[line.b])
            throw InvalidCut("edge " + model.node_names[line.a] + "-" +
                             model.node_names[line.b] + " does not separate components");
        int quasi = dist[line.a] <= dist[line.b] ? line.a : line.b;
        int downstream = quasi == line.a ? line.b : line.a;
        plan.quasi_nodes[ci] = quasi;
        int comp = component[downstream];
        if (comp == component[0])
            throw InvalidCut("edge " + model.node_names[line.a] + "-" +
                             model.node_names[line.b] + " feeds the substation component");
        if (inbound_cut[comp] >= 0)
            throw InvalidCut("component of node " + model.node_names[downstream] +
                             " has multiple inbound cut edges");
        inbound_cut[comp] = static_cast<int>(ci);
    }
    for (int c = 0; c < n_comp; ++c)
        if (c != component[0] && inbound_cut[c] < 0)
            throw InvalidCut("a component has no inbound cut edge");

    // deterministic sub-network order: substation component first, the rest
    // by their quasi-source's position in the node list
    std::vector<int> comp_order;
    comp_order.push_back(component[0]);
    {
        std::vector<std::pair<int, int>> rest;  // (quasi node index, comp)
        for (int c = 0; c < n_comp; ++c)
            if (c != component[0]) rest.push_back({plan.quasi_nodes[inbound_cut[c]], c});
        std::sort(rest.begin(), rest.end());
        for (auto [q, c] : rest) comp_order.push_back(c);
    }

    for (int c : comp_order) {
        PartitionPlan::SubNetwork sub;
        int source_orig = c == component[0] ? 0 : plan.quasi_nodes[inbound_cut[c]];
        sub.source_original = source_orig;

        sub.node_map.push_back(source_orig);
        for (int n = 0; n < model.num_nodes(); ++n)
            if (component[n] == c && n != source_orig) sub.node_map.push_back(n);

        sub.model.base_kv = model.base_kv;
        sub.model.base_kva = model.base_kva;
        for (int n : sub.node_map) sub.model.node_names.push_back(model.node_names[n]);

        auto sub_index = [&](int orig) {
            for (std::size_t i = 0; i < sub.node_map.size(); ++i)
                if (sub.node_map[i] == orig) return static_cast<int>(i);
            return -1;
        };

        // internal lines, plus the inbound cut line this sub owns
        for (int l = 0; l < model.num_lines(); ++l) {
            bool is_cut = std::find(plan.cut_lines.begin(), plan.cut_lines.end(), l) !=
                          plan.cut_lines.end();
            const auto& line = model.lines[l];
            bool internal = !is_cut && component[line.a] == c && component[line.b] == c;
            bool owned_cut = is_cut && c != component[0] &&
                             inbound_cut[c] == static_cast<int>(std::find(plan.cut_lines.begin(),
                                                                          plan.cut_lines.end(), l) -
                                                                plan.cut_lines.begin());
            if (!internal && !owned_cut) continue;
            FeederModel::Line sub_line;
            sub_line.a = sub_index(line.a);
            sub_line.b = sub_index(line.b);
            sub_line.z = line.z;
            sub.model.lines.push_back(sub_line);
            sub.line_map.push_back(l);
        }

        // original loads at member nodes (the designated source carries none)
        for (const auto& ld : model.loads) {
            if (component[ld.node] != c || ld.node == source_orig) continue;
            LoadSpec sub_load = ld;
            sub_load.node = sub_index(ld.node);
            sub.model.loads.push_back(sub_load);
        }

        // embedded quasi-sources become ordinary nodes with three
        // single-phase pseudo-loads
        for (std::size_t ci = 0; ci < plan.cut_lines.size(); ++ci) {
            int q = plan.quasi_nodes[ci];
            if (component[q] != c || q == source_orig) continue;
            sub.pseudo_nodes_original.push_back(q);
            const Connection phases[3] = {Connection::AN, Connection::BN, Connection::CN};
            const char* tag[3] = {"a", "b", "c"};
            for (int ph = 0; ph < 3; ++ph) {
                LoadSpec pseudo;
                pseudo.meter_id = model.node_names[q] + ".pseudo." + tag[ph];
                pseudo.node = sub_index(q);
                pseudo.connection = phases[ph];
                pseudo.pseudo = true;
                sub.model.loads.push_back(pseudo);
            }
        }

        sub.model.validate();
        plan.subs.push_back(std::move(sub));
    }
    return plan;
}

/// Reassembles the full-feeder parameter vector from per-sub estimates.
inline ParameterVector merge_estimates(const FeederModel& model, const PartitionPlan& plan,
                                       const std::vector<ParameterVector>& sub_w) {
    if (sub_w.size() != plan.subs.size())
        throw OwnershipConflict("expected " + std::to_string(plan.subs.size()) +
                                " sub-network estimates");
    ParameterVector w = ParameterVector::Zero(model.num_params());
    std::vector<int> owner_count(model.num_lines(), 0);
    for (std::size_t s = 0; s < plan.subs.size(); ++s) {
        const auto& sub = plan.subs[s];
        if (sub_w[s].size() != sub.model.num_params())
            throw OwnershipConflict("sub-network " + std::to_string(s) +
                                    " estimate has wrong length");
        for (std::size_t i = 0; i < sub.line_map.size(); ++i) {
            int orig = sub.line_map[i];
            if (owner_count[orig]++)
                throw OwnershipConflict("line " + std::to_string(orig) +
                                        " owned by multiple sub-networks");
            w.segment<12>(12 * orig) = sub_w[s].segment<12>(12 * static_cast<int>(i));
        }
    }
    for (int l = 0; l < model.num_lines(); ++l)
        if (!owner_count[l]) throw OwnershipConflict("line " + std::to_string(l) + " unowned");
    return w;
}

/// Slice of the full parameter vector a sub-network owns.
inline ParameterVector slice_parameters(const PartitionPlan::SubNetwork& sub,
                                        const ParameterVector& w_full) {
    ParameterVector w(12 * static_cast<int>(sub.line_map.size()));
    for (std::size_t i = 0; i < sub.line_map.size(); ++i)
        w.segment<12>(12 * static_cast<int>(i)) = w_full.segment<12>(12 * sub.line_map[i]);
    return w;
}

// ---------------------------------------------------------------------------
// Quasi-source measurement data
// ---------------------------------------------------------------------------

/// Full measurement set at one quasi-source: its per-phase voltage (as a
/// source-state series, rotation-normalized to phase a) and the three
/// pseudo-load series (p, q per-unit and per-phase voltage magnitude).
struct QuasiSourceData {
    Eigen::MatrixXd source;      // (T+1) x 6
    Eigen::MatrixXd pseudo_pqv;  // (T+1) x 9: pa qa va pb qb vb pc qc vc
};

namespace detail {

inline Vec6 rotation_normalized(const Eigen::Vector3cd& u) {
    double ma = std::abs(u[0]), mb = std::abs(u[1]), mc = std::abs(u[2]);
    double ang_ab = std::arg(u[0]) - std::arg(u[1]);
    double ang_ac = std::arg(u[0]) - std::arg(u[2]);
    constexpr double kRad2Deg = 180.0 / 3.14159265358979323846;
    return source_state_from_angles(ma, mb, mc, ang_ab * kRad2Deg, ang_ac * kRad2Deg);
}

}  // namespace detail

/// Measures every quasi-source from whole-network forward solves of the data
/// at w: voltage magnitudes, inter-phase angles, and the per-phase complex
/// power flowing into the owned cut line (the pseudo-load consumption).
inline std::map<int, QuasiSourceData> make_quasi_source_data(
    const FeederModel& model, const ParameterVector& w, const TimeSeriesSet& data,
    const PartitionPlan& plan, const SolverConfig& cfg = {}, int threads = 0) {
    NodalAdmittanceCache cache = assemble_admittance(model, w);
    std::map<int, QuasiSourceData> out;
    for (std::size_t ci = 0; ci < plan.cut_lines.size(); ++ci) {
        QuasiSourceData q;
        q.source.resize(data.T + 1, 6);
        q.pseudo_pqv.resize(data.T + 1, 9);
        out[plan.quasi_nodes[ci]] = std::move(q);
    }
    std::vector<int> instants(data.T + 1);
    std::iota(instants.begin(), instants.end(), 0);
    std::vector<std::map<int, Eigen::VectorXd>> rows(data.T + 1);
    parallel_for(
        static_cast<std::size_t>(data.T) + 1,
        [&](std::size_t ti) {
            int t = static_cast<int>(ti);
            FeatureVector f = injections_from_meters(model, data.p.row(t), data.q.row(t));
            NetworkState st = forward_solve(model, cache, f, data.source_state(t), cfg);
            for (std::size_t ci = 0; ci < plan.cut_lines.size(); ++ci) {
                int q_node = plan.quasi_nodes[ci];
                const auto& line = model.lines[plan.cut_lines[ci]];
                int other = line.a == q_node ? line.b : line.a;
                Eigen::Vector3cd u_q = state_to_phasor(st.node(q_node));
                Eigen::Vector3cd u_o = state_to_phasor(st.node(other));
                Eigen::Matrix3cd y = cache.line_y[plan.cut_lines[ci]].to_complex();
                Eigen::Vector3cd s_cut = u_q.cwiseProduct((y * (u_q - u_o)).conjugate());
                Eigen::VectorXd row(6 + 9);
                row.head<6>() = detail::rotation_normalized(u_q);
                for (int ph = 0; ph < 3; ++ph) {
                    row[6 + 3 * ph + 0] = s_cut[ph].real();
                    row[6 + 3 * ph + 1] = s_cut[ph].imag();
                    row[6 + 3 * ph + 2] = std::abs(u_q[ph]);
                }
                rows[ti][q_node] = row;
            }
        },
        threads);
    for (int t = 0; t <= data.T; ++t) {
        for (auto& [q_node, qd] : out) {
            const Eigen::VectorXd& row = rows[t].at(q_node);
            qd.source.row(t) = row.head<6>().transpose();
            qd.pseudo_pqv.row(t) = row.tail<9>().transpose();
        }
    }
    return out;
}

/// Per-sub-network time series: original meter columns carried over, pseudo
/// meters fed from the quasi-source data, source series from the designated
/// source's measurements.
inline TimeSeriesSet make_sub_timeseries(const FeederModel& model, const PartitionPlan& plan,
                                         std::size_t sub_index, const TimeSeriesSet& data,
                                         const std::map<int, QuasiSourceData>& quasi) {
    const auto& sub = plan.subs.at(sub_index);
    TimeSeriesSet out;
    out.T = data.T;
    int m_count = sub.model.num_meters();
    out.p.resize(data.T + 1, m_count);
    out.q.resize(data.T + 1, m_count);
    out.v.resize(data.T + 1, m_count);
    for (int m = 0; m < m_count; ++m) {
        const LoadSpec& ld = sub.model.loads[m];
        out.meter_ids.push_back(ld.meter_id);
        if (ld.pseudo) {
            int orig = sub.node_map[ld.node];
            auto it = quasi.find(orig);
            if (it == quasi.end())
                throw MissingQuasiSourceData("node " + model.node_names[orig]);
            int ph = ld.connection == Connection::AN ? 0 : ld.connection == Connection::BN ? 1 : 2;
            out.p.col(m) = it->second.pseudo_pqv.col(3 * ph + 0);
            out.q.col(m) = it->second.pseudo_pqv.col(3 * ph + 1);
            out.v.col(m) = it->second.pseudo_pqv.col(3 * ph + 2);
        } else {
            auto pos = std::find(data.meter_ids.begin(), data.meter_ids.end(), ld.meter_id);
            if (pos == data.meter_ids.end())
                throw MissingReading("meter '" + ld.meter_id + "' absent from data");
            int col = static_cast<int>(pos - data.meter_ids.begin());
            out.p.col(m) = data.p.col(col);
            out.q.col(m) = data.q.col(col);
            out.v.col(m) = data.v.col(col);
        }
    }
    if (sub.source_original == 0) {
        out.source = data.source;
    } else {
        auto it = quasi.find(sub.source_original);
        if (it == quasi.end())
            throw MissingQuasiSourceData("node " + model.node_names[sub.source_original]);
        out.source = it->second.source;
    }
    if (data.w_true.size() > 0) {
        PartitionPlan::SubNetwork const& s = sub;
        out.w_true = slice_parameters(s, data.w_true);
    }
    return out;
}

}  // namespace gridfit
