#pragma once

#include "gridfit/evaluation.hpp"
#include "gridfit/partition.hpp"

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <sstream>

namespace gridfit {

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << content;
}

inline std::string file_hash_hex(const std::string& path) {
    std::string content = read_text_file(path);
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(content.data(), content.size())));
    return buf;
}

namespace ioutil {

inline std::vector<std::string> tokens(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) {
        if (tok[0] == '#') break;
        out.push_back(tok);
    }
    return out;
}

inline double to_double(const std::string& s, int line_no) {
    try {
        std::size_t used = 0;
        double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ParseError("bad number '" + s + "' at line " + std::to_string(line_no));
    }
}

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace ioutil

// ---------------------------------------------------------------------------
// Sectioned key-value config files
// ---------------------------------------------------------------------------

/// "[section]" headers over whitespace-separated key/value-list lines;
/// '#' starts a comment. Repeated keys accumulate.
struct ConfigFile {
    std::map<std::string, std::vector<std::vector<std::string>>> entries;  // "sec.key" -> rows

    static ConfigFile parse(const std::string& text) {
        ConfigFile cfg;
        std::istringstream ss(text);
        std::string line, section;
        int line_no = 0;
        while (std::getline(ss, line)) {
            ++line_no;
            auto toks = ioutil::tokens(line);
            if (toks.empty()) continue;
            if (toks[0].front() == '[') {
                if (toks[0].back() != ']')
                    throw ParseError("bad section header at line " + std::to_string(line_no));
                section = toks[0].substr(1, toks[0].size() - 2);
                continue;
            }
            if (section.empty())
                throw ParseError("key outside any section at line " + std::to_string(line_no));
            std::string key = section + "." + toks[0];
            cfg.entries[key].push_back({toks.begin() + 1, toks.end()});
        }
        return cfg;
    }

    static ConfigFile load(const std::string& path) { return parse(read_text_file(path)); }

    bool has(const std::string& key) const { return entries.count(key) > 0; }

    std::string get_string(const std::string& key, const std::string& fallback = "") const {
        auto it = entries.find(key);
        if (it == entries.end()) return fallback;
        if (it->second.empty() || it->second.back().empty())
            throw ParseError("key '" + key + "' has no value");
        return it->second.back()[0];
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = entries.find(key);
        if (it == entries.end()) return fallback;
        return ioutil::to_double(get_string(key), 0);
    }

    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
        auto it = entries.find(key);
        if (it == entries.end()) return fallback;
        return std::stoull(get_string(key));
    }

    int get_int(const std::string& key, int fallback) const {
        auto it = entries.find(key);
        if (it == entries.end()) return fallback;
        return std::stoi(get_string(key));
    }

    std::vector<std::vector<std::string>> rows(const std::string& key) const {
        auto it = entries.find(key);
        return it == entries.end() ? std::vector<std::vector<std::string>>{} : it->second;
    }
};

// ---------------------------------------------------------------------------
// Feeder file: sections nodes / lines / loads / bases, line records in ohms
// ---------------------------------------------------------------------------

inline FeederModel read_feeder_file(const std::string& path) {
    ConfigFile cfg = ConfigFile::load(path);
    FeederModel model;
    model.base_kv = cfg.get_double("bases.base_kv", 0.0);
    model.base_kva = cfg.get_double("bases.base_kva", 0.0);
    if (model.base_kv <= 0.0 || model.base_kva <= 0.0)
        throw ParseError(path + ": [bases] must set positive base_kv and base_kva");

    for (const auto& row : cfg.rows("nodes.node")) {
        if (row.empty()) throw ParseError(path + ": node row without a name");
        model.node_names.push_back(row[0]);
    }
    if (model.node_names.empty()) throw ParseError(path + ": no nodes");

    double z_base = model.z_base_ohm();
    for (const auto& row : cfg.rows("lines.line")) {
        if (row.size() != 14)
            throw ParseError(path + ": line record needs from to and 12 ohm values");
        FeederModel::Line ln;
        ln.a = model.node_index(row[0]);
        ln.b = model.node_index(row[1]);
        for (int k = 0; k < 6; ++k) ln.z.r[k] = ioutil::to_double(row[2 + k], 0) / z_base;
        for (int k = 0; k < 6; ++k) ln.z.x[k] = ioutil::to_double(row[8 + k], 0) / z_base;
        model.lines.push_back(ln);
    }

    for (const auto& row : cfg.rows("loads.load")) {
        if (row.size() < 3) throw ParseError(path + ": load record needs meter_id node connection");
        LoadSpec ld;
        ld.meter_id = row[0];
        ld.node = model.node_index(row[1]);
        ld.connection = parse_connection(row[2]);
        ld.pseudo = row.size() > 3 && row[3] == "pseudo";
        model.loads.push_back(ld);
    }
    model.validate();
    return model;
}

inline std::string feeder_file_text(const FeederModel& model) {
    std::ostringstream out;
    out << "# gridfit feeder\n[bases]\n";
    out << "base_kv " << format_g17(model.base_kv) << "\n";
    out << "base_kva " << format_g17(model.base_kva) << "\n\n[nodes]\n";
    for (const auto& name : model.node_names) out << "node " << name << "\n";
    out << "\n[lines]\n# line from to raa rab rac rbb rbc rcc xaa xab xac xbb xbc xcc (ohm)\n";
    double z_base = model.z_base_ohm();
    for (const auto& ln : model.lines) {
        out << "line " << model.node_names[ln.a] << " " << model.node_names[ln.b];
        for (int k = 0; k < 6; ++k) out << " " << format_g17(ln.z.r[k] * z_base);
        for (int k = 0; k < 6; ++k) out << " " << format_g17(ln.z.x[k] * z_base);
        out << "\n";
    }
    out << "\n[loads]\n# load meter_id node connection [pseudo]\n";
    for (const auto& ld : model.loads) {
        out << "load " << ld.meter_id << " " << model.node_names[ld.node] << " "
            << connection_name(ld.connection);
        if (ld.pseudo) out << " pseudo";
        out << "\n";
    }
    return out.str();
}

inline void write_feeder_file(const std::string& path, const FeederModel& model) {
    write_text_file(path, feeder_file_text(model));
}

// ---------------------------------------------------------------------------
// Meter and source series files (CSV)
// ---------------------------------------------------------------------------

inline std::string meter_series_text(const FeederModel& model, const TimeSeriesSet& data) {
    std::ostringstream out;
    out << "t,meter_id,p_kw,q_kvar,v_volt\n";
    double s_base = model.s_base_phase_kva();
    double v_base = model.v_base_ln_volt();
    for (int t = 0; t <= data.T; ++t) {
        for (int m = 0; m < data.num_meters(); ++m) {
            out << t << "," << data.meter_ids[m] << "," << format_g17(data.p(t, m) * s_base)
                << "," << format_g17(data.q(t, m) * s_base) << ","
                << format_g17(data.v(t, m) * v_base) << "\n";
        }
    }
    return out.str();
}

inline std::string source_series_text(const Eigen::MatrixXd& source) {
    std::ostringstream out;
    out << "t,vmag_a,vmag_b,vmag_c,ang_ab_deg,ang_ac_deg\n";
    constexpr double kRad2Deg = 180.0 / 3.14159265358979323846;
    for (Eigen::Index t = 0; t < source.rows(); ++t) {
        Eigen::Vector3cd u = state_to_phasor(Vec6(source.row(t).transpose()));
        out << t << "," << format_g17(std::abs(u[0])) << "," << format_g17(std::abs(u[1])) << ","
            << format_g17(std::abs(u[2])) << ","
            << format_g17((std::arg(u[0]) - std::arg(u[1])) * kRad2Deg) << ","
            << format_g17((std::arg(u[0]) - std::arg(u[2])) * kRad2Deg) << "\n";
    }
    return out.str();
}

inline void write_meter_series(const std::string& path, const FeederModel& model,
                               const TimeSeriesSet& data) {
    write_text_file(path, meter_series_text(model, data));
}

inline void write_source_series(const std::string& path, const Eigen::MatrixXd& source) {
    write_text_file(path, source_series_text(source));
}

inline Eigen::MatrixXd read_source_series(const std::string& path) {
    std::istringstream ss(read_text_file(path));
    std::string line;
    if (!std::getline(ss, line)) throw ParseError(path + ": empty source series");
    std::vector<std::array<double, 5>> rows;
    int line_no = 1;
    while (std::getline(ss, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto cells = ioutil::split_csv(line);
        if (cells.size() != 6) throw ParseError(path + ": bad row at line " + std::to_string(line_no));
        int t = std::stoi(cells[0]);
        if (t != static_cast<int>(rows.size()))
            throw ParseError(path + ": non-contiguous instants at line " + std::to_string(line_no));
        rows.push_back({ioutil::to_double(cells[1], line_no), ioutil::to_double(cells[2], line_no),
                        ioutil::to_double(cells[3], line_no), ioutil::to_double(cells[4], line_no),
                        ioutil::to_double(cells[5], line_no)});
    }
    Eigen::MatrixXd source(rows.size(), 6);
    for (std::size_t t = 0; t < rows.size(); ++t)
        source.row(t) =
            source_state_from_angles(rows[t][0], rows[t][1], rows[t][2], rows[t][3], rows[t][4])
                .transpose();
    return source;
}

/// Reads a meter series and aligns its columns with the model's load order.
/// Every (t, meter) pair in 0..T must be present exactly once.
inline TimeSeriesSet read_timeseries(const std::string& meter_path, const std::string& source_path,
                                     const FeederModel& model) {
    std::istringstream ss(read_text_file(meter_path));
    std::string line;
    if (!std::getline(ss, line)) throw ParseError(meter_path + ": empty meter series");

    std::map<std::string, int> column;
    for (int m = 0; m < model.num_meters(); ++m) column[model.loads[m].meter_id] = m;

    struct Reading {
        double p, q, v;
    };
    std::map<int, std::map<int, Reading>> table;  // t -> meter -> reading
    int max_t = -1;
    int line_no = 1;
    while (std::getline(ss, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto cells = ioutil::split_csv(line);
        if (cells.size() != 5)
            throw ParseError(meter_path + ": bad row at line " + std::to_string(line_no));
        int t = std::stoi(cells[0]);
        auto it = column.find(cells[1]);
        if (it == column.end()) continue;  // meters the model does not know are skipped
        table[t][it->second] = {ioutil::to_double(cells[2], line_no),
                                ioutil::to_double(cells[3], line_no),
                                ioutil::to_double(cells[4], line_no)};
        max_t = std::max(max_t, t);
    }
    if (max_t < 1) throw MissingReading(meter_path + ": needs instants 0..T with T >= 1");

    TimeSeriesSet data;
    data.T = max_t;
    for (const auto& ld : model.loads) data.meter_ids.push_back(ld.meter_id);
    int m_count = model.num_meters();
    data.p.resize(max_t + 1, m_count);
    data.q.resize(max_t + 1, m_count);
    data.v.resize(max_t + 1, m_count);
    double s_base = model.s_base_phase_kva();
    double v_base = model.v_base_ln_volt();
    for (int t = 0; t <= max_t; ++t) {
        auto row = table.find(t);
        for (int m = 0; m < m_count; ++m) {
            if (row == table.end() || !row->second.count(m))
                throw MissingReading("meter '" + model.loads[m].meter_id + "' at t = " +
                                     std::to_string(t));
            const Reading& r = row->second.at(m);
            data.p(t, m) = r.p / s_base;
            data.q(t, m) = r.q / s_base;
            data.v(t, m) = r.v / v_base;
        }
    }

    data.source = read_source_series(source_path);
    if (data.source.rows() != max_t + 1)
        throw MissingReading(source_path + ": source series length differs from meter series");
    return data;
}

// ---------------------------------------------------------------------------
// Quasi-source measurement files
// ---------------------------------------------------------------------------

inline void write_quasi_source(const std::string& dir, const std::string& node_name,
                               const FeederModel& model, const QuasiSourceData& qd) {
    write_source_series(dir + "/quasi_" + node_name + "_source.csv", qd.source);
    std::ostringstream out;
    out << "t,meter_id,p_kw,q_kvar,v_volt\n";
    double s_base = model.s_base_phase_kva();
    double v_base = model.v_base_ln_volt();
    const char* tag[3] = {"a", "b", "c"};
    for (Eigen::Index t = 0; t < qd.pseudo_pqv.rows(); ++t) {
        for (int ph = 0; ph < 3; ++ph) {
            out << t << "," << node_name << ".pseudo." << tag[ph] << ","
                << format_g17(qd.pseudo_pqv(t, 3 * ph + 0) * s_base) << ","
                << format_g17(qd.pseudo_pqv(t, 3 * ph + 1) * s_base) << ","
                << format_g17(qd.pseudo_pqv(t, 3 * ph + 2) * v_base) << "\n";
        }
    }
    write_text_file(dir + "/quasi_" + node_name + "_loads.csv", out.str());
}

inline QuasiSourceData read_quasi_source(const std::string& dir, const std::string& node_name,
                                         const FeederModel& model) {
    QuasiSourceData qd;
    std::string source_path = dir + "/quasi_" + node_name + "_source.csv";
    std::string loads_path = dir + "/quasi_" + node_name + "_loads.csv";
    try {
        qd.source = read_source_series(source_path);
    } catch (const IoError&) {
        throw MissingQuasiSourceData(source_path);
    }
    std::string text;
    try {
        text = read_text_file(loads_path);
    } catch (const IoError&) {
        throw MissingQuasiSourceData(loads_path);
    }
    std::istringstream ss(text);
    std::string line;
    std::getline(ss, line);
    qd.pseudo_pqv.resize(qd.source.rows(), 9);
    qd.pseudo_pqv.setConstant(std::numeric_limits<double>::quiet_NaN());
    double s_base = model.s_base_phase_kva();
    double v_base = model.v_base_ln_volt();
    int line_no = 1;
    while (std::getline(ss, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto cells = ioutil::split_csv(line);
        if (cells.size() != 5)
            throw ParseError(loads_path + ": bad row at line " + std::to_string(line_no));
        int t = std::stoi(cells[0]);
        char phase = cells[1].back();
        int ph = phase == 'a' ? 0 : phase == 'b' ? 1 : 2;
        qd.pseudo_pqv(t, 3 * ph + 0) = ioutil::to_double(cells[2], line_no) / s_base;
        qd.pseudo_pqv(t, 3 * ph + 1) = ioutil::to_double(cells[3], line_no) / s_base;
        qd.pseudo_pqv(t, 3 * ph + 2) = ioutil::to_double(cells[4], line_no) / v_base;
    }
    if (!qd.pseudo_pqv.allFinite()) throw MissingQuasiSourceData(loads_path + ": incomplete series");
    return qd;
}

// ---------------------------------------------------------------------------
// Estimation outputs: parameter table, trace, evaluation reports
// ---------------------------------------------------------------------------

inline std::string parameter_table_text(const FeederModel& model, const ParameterVector& w) {
    std::ostringstream out;
    out << "index,name,value_pu\n";
    for (Eigen::Index m = 0; m < w.size(); ++m)
        out << m << "," << parameter_name(model, static_cast<int>(m)) << "," << format_g17(w[m])
            << "\n";
    return out.str();
}

inline std::string trace_text(const EstimationTrace& trace) {
    std::ostringstream out;
    out << "epoch,J_best,J_full,step_accept_rate,wall_ms\n";
    for (const auto& e : trace.epochs)
        out << e.epoch << "," << format_g17(e.j_best) << "," << format_g17(e.j_full) << ","
            << format_g17(e.step_accept_rate) << "," << format_g17(e.wall_ms) << "\n";
    return out.str();
}

inline std::string report_csv_header() {
    return "variant,seed,madr_initial_pct,madr_final_pct,improvement_pct\n";
}

inline std::string report_csv_row(const EvaluationReport& rep) {
    std::ostringstream out;
    out << rep.variant << "," << rep.seed << "," << format_g17(rep.madr_initial) << ","
        << format_g17(rep.madr_final) << "," << format_g17(rep.improvement_pct) << "\n";
    return out.str();
}

inline std::string deviation_table_text(const FeederModel& model, const EvaluationReport& rep) {
    std::ostringstream out;
    out << "index,name,abs_deviation_pu\n";
    for (Eigen::Index m = 0; m < rep.abs_deviation.size(); ++m)
        out << m << "," << parameter_name(model, static_cast<int>(m)) << ","
            << format_g17(rep.abs_deviation[m]) << "\n";
    return out.str();
}

/// Box-plot quantile table over per-variant improvements.
inline std::string quantile_table_text(const AblationResult& result,
                                       const std::vector<Variant>& variants) {
    std::ostringstream out;
    out << "variant,q0,q25,q50,q75,q100\n";
    for (Variant v : variants) {
        auto vals = result.improvements(variant_name(v));
        if (vals.empty()) continue;
        out << variant_name(v);
        for (double q : {0.0, 0.25, 0.5, 0.75, 1.0}) out << "," << format_g17(quantile(vals, q));
        out << "\n";
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

struct RunManifest {
    std::string subcommand;
    std::string config_path;
    std::uint64_t seed = 0;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    nlohmann::json extra;

    void write(const std::string& path) const {
        nlohmann::json j;
        j["subcommand"] = subcommand;
        j["config"] = config_path;
        j["seed"] = seed;
        j["timestamp_utc"] = static_cast<std::int64_t>(std::time(nullptr));
        nlohmann::json in = nlohmann::json::object(), out = nlohmann::json::object();
        for (const auto& p : inputs) in[p] = file_hash_hex(p);
        for (const auto& p : outputs) out[p] = file_hash_hex(p);
        j["inputs"] = in;
        j["outputs"] = out;
        if (!extra.is_null()) j["extra"] = extra;
        write_text_file(path, j.dump(2) + "\n");
    }
};

// ---------------------------------------------------------------------------
// Scenario / estimation run configuration files
// ---------------------------------------------------------------------------

struct ScenarioFileConfig {
    std::string feeder = "case13";  // builtin name or feeder-file path
    ScenarioConfig scenario;
    std::vector<std::pair<std::string, std::string>> cuts;
};

inline ScenarioFileConfig parse_scenario_config(const ConfigFile& cfg) {
    ScenarioFileConfig out;
    out.feeder = cfg.get_string("scenario.feeder", out.feeder);
    out.scenario.horizon = cfg.get_int("scenario.horizon", out.scenario.horizon);
    out.scenario.pf_min = cfg.get_double("scenario.pf_min", out.scenario.pf_min);
    out.scenario.pf_max = cfg.get_double("scenario.pf_max", out.scenario.pf_max);
    out.scenario.meter_class = cfg.get_double("scenario.meter_class", out.scenario.meter_class);
    out.scenario.perturb_half_width =
        cfg.get_double("scenario.perturb_half_width", out.scenario.perturb_half_width);
    out.scenario.target_unbalance =
        cfg.get_double("scenario.target_unbalance", out.scenario.target_unbalance);
    out.scenario.peak_kw = cfg.get_double("scenario.peak_kw", out.scenario.peak_kw);
    out.scenario.rng_seed = cfg.get_u64("scenario.rng_seed", out.scenario.rng_seed);
    out.scenario.noise_p = cfg.get_int("scenario.noise_p", 1) != 0;
    out.scenario.noise_q = cfg.get_int("scenario.noise_q", 1) != 0;
    out.scenario.noise_v = cfg.get_int("scenario.noise_v", 1) != 0;
    for (const auto& row : cfg.rows("partition.cut")) {
        if (row.size() != 2) throw ParseError("partition cut needs two node names");
        out.cuts.push_back({row[0], row[1]});
    }
    return out;
}

struct EstimationFileConfig {
    EstimatorConfig estimator;
    std::string variant = "GL+CON&MAP";
    double prior_sigma_rel = 0.5 / 3.0;
    double bounds_lower_factor = 2.0 / 3.0;
    double bounds_upper_factor = 2.0;
    std::vector<std::pair<std::string, std::string>> cuts;
};

inline EstimationFileConfig parse_estimation_config(const ConfigFile& cfg) {
    EstimationFileConfig out;
    EstimatorConfig& est = out.estimator;
    est.n_batch = cfg.get_int("estimator.n_batch", est.n_batch);
    est.n_patience = cfg.get_int("estimator.n_patience", est.n_patience);
    est.s_initial = cfg.get_double("estimator.s_initial", est.s_initial);
    est.alpha = cfg.get_double("estimator.alpha", est.alpha);
    est.beta = cfg.get_double("estimator.beta", est.beta);
    est.eps_stop = cfg.get_double("estimator.eps_stop", est.eps_stop);
    est.rng_seed = cfg.get_u64("estimator.rng_seed", est.rng_seed);
    est.max_epochs = cfg.get_int("estimator.max_epochs", est.max_epochs);
    est.forward.eps_forward = cfg.get_double("estimator.eps_forward", est.forward.eps_forward);
    est.forward.max_iter = cfg.get_int("estimator.forward_max_iter", est.forward.max_iter);
    est.backward.eps_backward = cfg.get_double("estimator.eps_backward", est.backward.eps_backward);
    est.backward.max_iter = cfg.get_int("estimator.backward_max_iter", est.backward.max_iter);
    out.variant = cfg.get_string("estimator.variant", out.variant);
    out.prior_sigma_rel = cfg.get_double("prior.sigma_rel", out.prior_sigma_rel);
    out.bounds_lower_factor = cfg.get_double("bounds.lower_factor", out.bounds_lower_factor);
    out.bounds_upper_factor = cfg.get_double("bounds.upper_factor", out.bounds_upper_factor);
    for (const auto& row : cfg.rows("partition.cut")) {
        if (row.size() != 2) throw ParseError("partition cut needs two node names");
        out.cuts.push_back({row[0], row[1]});
    }
    return out;
}

}  // namespace gridfit
