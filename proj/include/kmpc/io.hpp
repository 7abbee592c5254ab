#pragma once

// File plumbing: JSON configuration, binary matrix artifacts and CSV exports.
//
// Binary artifact layout (all integers and floats little-endian):
//   bytes 0..7    magic "KMPCBIN1"
//   bytes 8..15   uint64 length L of the JSON header
//   next L bytes  UTF-8 JSON header; header["matrices"] lists {name, rows, cols} in payload order
//   payload       for each listed matrix, rows * cols float64 values in row-major order

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "kmpc/controller.hpp"
#include "kmpc/data_gen.hpp"
#include "kmpc/edmd.hpp"
#include "kmpc/errors.hpp"
#include "kmpc/grid_model.hpp"
#include "kmpc/qp.hpp"
#include "kmpc/synthetic.hpp"

namespace kmpc {

using json = nlohmann::json;

inline constexpr const char* tool_version = "kmpc 0.1.0";
inline constexpr char artifact_magic[8] = {'K', 'M', 'P', 'C', 'B', 'I', 'N', '1'};

/// Identification stamped into every output file.
struct Provenance {
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string version = tool_version;

    json to_json() const { return {{"tool_version", version}, {"seed", seed}, {"config_hash", config_hash}}; }
    std::string comment() const {
        return "# " + version + " seed=" + std::to_string(seed) + " config_hash=" + config_hash;
    }
};

/// 64-bit FNV-1a of `text`, as 16 lowercase hex digits.
inline std::string fnv1a_hex(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------------------------
// Binary artifacts

struct Artifact {
    json header = json::object();
    std::vector<std::pair<std::string, Eigen::MatrixXd>> matrices;

    const Eigen::MatrixXd& matrix(const std::string& name) const {
        for (const auto& [n, M] : matrices) {
            if (n == name) return M;
        }
        throw ConfigError("artifact has no matrix '" + name + "'");
    }
    bool has(const std::string& name) const {
        for (const auto& entry : matrices) {
            if (entry.first == name) return true;
        }
        return false;
    }
};

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
    os.write(b, 8);
}

inline std::uint64_t get_u64(const unsigned char* b) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::ofstream open_output(const std::filesystem::path& path, std::ios::openmode mode = std::ios::out) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, mode);
    if (!out) throw ConfigError("cannot write '" + path.string() + "'");
    return out;
}

}  // namespace detail

inline void write_artifact(const std::filesystem::path& path, const Artifact& art) {
    json header = art.header;
    header["matrices"] = json::array();
    for (const auto& [name, M] : art.matrices) {
        header["matrices"].push_back({{"name", name}, {"rows", M.rows()}, {"cols", M.cols()}});
    }
    const std::string text = header.dump();
    auto out = detail::open_output(path, std::ios::out | std::ios::binary | std::ios::trunc);
    out.write(artifact_magic, 8);
    detail::put_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& entry : art.matrices) {
        const Eigen::MatrixXd& M = entry.second;
        for (Eigen::Index r = 0; r < M.rows(); ++r) {
            for (Eigen::Index c = 0; c < M.cols(); ++c) detail::put_u64(out, std::bit_cast<std::uint64_t>(M(r, c)));
        }
    }
    if (!out) throw ConfigError("write failed for '" + path.string() + "'");
}

inline Artifact read_artifact(const std::filesystem::path& path) {
    const std::string bytes = detail::read_file(path);
    const auto* b = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::string where = "artifact '" + path.string() + "'";
    if (bytes.size() < 16 || !std::equal(artifact_magic, artifact_magic + 8, bytes.begin())) {
        throw ConfigError(where + ": bad magic");
    }
    const std::uint64_t hlen = detail::get_u64(b + 8);
    if (hlen > bytes.size() - 16) throw ConfigError(where + ": truncated header");
    Artifact art;
    try {
        art.header = json::parse(bytes.substr(16, hlen));
    } catch (const json::exception& e) {
        throw ConfigError(where + ": header is not valid JSON: " + e.what());
    }
    std::size_t pos = 16 + hlen;
    if (!art.header.contains("matrices") || !art.header["matrices"].is_array()) {
        throw ConfigError(where + ": header lacks a matrix list");
    }
    for (const auto& entry : art.header["matrices"]) {
        const auto rows = entry.at("rows").get<Eigen::Index>();
        const auto cols = entry.at("cols").get<Eigen::Index>();
        if (rows < 0 || cols < 0) throw ConfigError(where + ": negative matrix size");
        const auto count = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
        if (count > (bytes.size() - pos) / 8) throw ConfigError(where + ": truncated payload");
        Eigen::MatrixXd M(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index c = 0; c < cols; ++c) {
                M(r, c) = std::bit_cast<double>(detail::get_u64(b + pos));
                pos += 8;
            }
        }
        art.matrices.emplace_back(entry.at("name").get<std::string>(), std::move(M));
    }
    if (pos != bytes.size()) throw ConfigError(where + ": trailing bytes after payload");
    return art;
}

// Dataset, model and QP-dump artifacts.

inline Artifact dataset_artifact(const Dataset& ds, double T_s, const Provenance& prov) {
    Artifact art;
    art.header = {{"kind", "dataset"}, {"n_gen", ds.X.rows() / 2}, {"K", ds.size()}, {"T_s", T_s}};
    art.header.update(prov.to_json());
    art.matrices = {{"X", ds.X}, {"Y", ds.Y}, {"U", ds.U}};
    return art;
}

inline Dataset dataset_from(const Artifact& art) {
    if (art.header.value("kind", "") != "dataset") throw ConfigError("artifact is not a dataset");
    Dataset ds{art.matrix("X"), art.matrix("Y"), art.matrix("U")};
    ds.validate();
    return ds;
}

inline Artifact model_artifact(const LiftedPredictor& model, const std::vector<int>& generators,
                               const Provenance& prov) {
    Artifact art;
    art.header = {{"kind", "model"},
                  {"N", model.lifted_dim()},
                  {"m", model.input_dim()},
                  {"n", model.state_dim()},
                  {"T_s", model.T_s},
                  {"regularization", model.regularization},
                  {"residuals",
                   {{"dynamics", model.residuals.dynamics},
                    {"output", model.residuals.output},
                    {"samples", model.residuals.samples}}},
                  {"generators", generators}};
    art.header.update(prov.to_json());
    art.matrices = {{"A", model.A}, {"B", model.B}, {"C", model.C}};
    return art;
}

inline LiftedPredictor model_from(const Artifact& art) {
    if (art.header.value("kind", "") != "model") throw ConfigError("artifact is not a model");
    LiftedPredictor model;
    model.A = art.matrix("A");
    model.B = art.matrix("B");
    model.C = art.matrix("C");
    model.embedding = Embedding::for_generators(model.C.rows() / 2);
    model.T_s = art.header.at("T_s").get<double>();
    model.regularization = art.header.value("regularization", 0.0);
    const auto& res = art.header.at("residuals");
    model.residuals = {res.at("dynamics").get<double>(), res.at("output").get<double>(),
                       res.at("samples").get<Eigen::Index>()};
    model.validate();
    return model;
}

inline Artifact qp_dump_artifact(const DenseQP& qp, const Eigen::VectorXd& z0, const Provenance& prov) {
    Artifact art;
    art.header = {{"kind", "qp"}, {"N", qp.dims().N}, {"m", qp.dims().m}, {"N_p", qp.dims().N_p}};
    art.header.update(prov.to_json());
    art.matrices = {{"H", qp.H()}, {"G", qp.G()}, {"L", qp.L()}, {"M", qp.M()}, {"c", qp.c()}, {"z0", z0}};
    return art;
}

/// Rebuilds the QP and the parameter z0 of a dump.
inline std::pair<DenseQP, Eigen::VectorXd> qp_from(const Artifact& art) {
    if (art.header.value("kind", "") != "qp") throw ConfigError("artifact is not a QP dump");
    const QpDims dims{art.header.at("N").get<Eigen::Index>(), art.header.at("m").get<Eigen::Index>(),
                      art.header.at("N_p").get<Eigen::Index>()};
    DenseQP qp(art.matrix("H"), art.matrix("G"), art.matrix("L"), art.matrix("M"), art.matrix("c"), dims);
    return {std::move(qp), art.matrix("z0")};
}

// ---------------------------------------------------------------------------------------------
// JSON configuration

namespace detail {

/// 1-based line number of byte offset `pos` in `text`.
inline std::size_t line_of(const std::string& text, std::size_t pos) {
    pos = std::min(pos, text.size());
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
}

}  // namespace detail

inline json parse_json_text(const std::string& text, const std::string& source) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(source + ":" + std::to_string(detail::line_of(text, e.byte == 0 ? 0 : e.byte - 1)) +
                          ": JSON syntax error: " + e.what());
    }
}

inline json load_json(const std::filesystem::path& path) { return parse_json_text(detail::read_file(path), path.string()); }

namespace detail {

inline ConfigError field_error(const std::string& field, const std::string& msg) {
    return ConfigError("field '" + field + "': " + msg);
}

inline double get_number(const json& j, const std::string& field) {
    if (!j.is_number()) throw field_error(field, "expected a number");
    return j.get<double>();
}

/// A length-n vector given either as a scalar (broadcast) or as an array.
inline Eigen::VectorXd get_vector(const json& j, Eigen::Index n, const std::string& field) {
    if (j.is_number()) return Eigen::VectorXd::Constant(n, j.get<double>());
    if (!j.is_array()) throw field_error(field, "expected a number or an array");
    if (static_cast<Eigen::Index>(j.size()) != n) {
        throw field_error(field, "expected " + std::to_string(n) + " entries, got " + std::to_string(j.size()));
    }
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = get_number(j[static_cast<std::size_t>(i)], field + "[" + std::to_string(i) + "]");
    return v;
}

inline Eigen::MatrixXd get_matrix(const json& j, Eigen::Index rows, Eigen::Index cols, const std::string& field) {
    if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows) {
        throw field_error(field, "expected an array of " + std::to_string(rows) + " rows");
    }
    Eigen::MatrixXd M(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const std::string row_field = field + "[" + std::to_string(r) + "]";
        M.row(r) = get_vector(j[static_cast<std::size_t>(r)], cols, row_field).transpose();
        if (!j[static_cast<std::size_t>(r)].is_array()) throw field_error(row_field, "expected an array");
    }
    return M;
}

/// Symmetric edits [[i, j, value], ...] with 0 = infinite bus and 1..n = generators.
inline void apply_edges(Eigen::MatrixXd& M, const json& j, const std::string& field) {
    if (!j.is_array()) throw field_error(field, "expected an array of [i, j, value]");
    for (std::size_t k = 0; k < j.size(); ++k) {
        const auto& e = j[k];
        const std::string f = field + "[" + std::to_string(k) + "]";
        if (!e.is_array() || e.size() != 3 || !e[0].is_number_integer() || !e[1].is_number_integer()) {
            throw field_error(f, "expected [i, j, value] with integer indices");
        }
        const auto a = e[0].get<Eigen::Index>();
        const auto b = e[1].get<Eigen::Index>();
        if (a < 0 || b < 0 || a >= M.rows() || b >= M.rows()) throw field_error(f, "bus index out of range");
        M(a, b) = get_number(e[2], f + "[2]");
        M(b, a) = M(a, b);
    }
}

inline CascadeOptions cascade_options(const json& j, const std::string& field) {
    if (!j.is_object()) throw field_error(field, "expected an object");
    CascadeOptions o;
    for (const auto& [key, val] : j.items()) {
        const std::string f = field + "." + key;
        if (key == "n_grids") {
            o.n_grids = val.get<int>();
        } else if (key == "gens_per_grid") {
            o.gens_per_grid = val.get<int>();
        } else {
            static const std::pair<const char*, double CascadeOptions::*> fields[] = {
                {"f_b", &CascadeOptions::f_b},       {"H", &CascadeOptions::H},
                {"D", &CascadeOptions::D},           {"P_m", &CascadeOptions::P_m},
                {"V", &CascadeOptions::V},           {"V_inf", &CascadeOptions::V_inf},
                {"G_self", &CascadeOptions::G_self}, {"b_intra", &CascadeOptions::b_intra},
                {"g_intra", &CascadeOptions::g_intra}, {"b_tie", &CascadeOptions::b_tie},
                {"b_inf", &CascadeOptions::b_inf},   {"fault_ratio", &CascadeOptions::fault_ratio},
                {"trip_ratio", &CascadeOptions::trip_ratio}, {"t_fault", &CascadeOptions::t_fault},
                {"t_clear", &CascadeOptions::t_clear}};
            bool known = false;
            for (const auto& [name, member] : fields) {
                if (key == name) {
                    o.*member = get_number(val, f);
                    known = true;
                }
            }
            if (!known) throw field_error(f, "unknown key");
        }
    }
    if (o.n_grids < 1 || o.gens_per_grid < 1) throw field_error(field, "n_grids and gens_per_grid must be positive");
    return o;
}

/// Applies the GridParameters fields present in `j` on top of `p`. `n` is the generator count.
inline void apply_parameter_fields(GridParameters& p, const json& j, Eigen::Index n, const std::string& field) {
    if (!j.is_object()) throw field_error(field, "expected an object");
    for (const auto& [key, val] : j.items()) {
        const std::string f = field + "." + key;
        if (key == "f_b") {
            p.f_b = get_number(val, f);
        } else if (key == "V_inf") {
            p.V_inf = get_number(val, f);
        } else if (key == "H") {
            p.H = get_vector(val, n, f);
        } else if (key == "D") {
            p.D = get_vector(val, n, f);
        } else if (key == "P_m") {
            p.P_m = get_vector(val, n, f);
        } else if (key == "V") {
            p.V = get_vector(val, n, f);
        } else if (key == "G_self") {
            p.G_self = get_vector(val, n, f);
        } else if (key == "G") {
            p.G = get_matrix(val, n + 1, n + 1, f);
        } else if (key == "B") {
            p.B = get_matrix(val, n + 1, n + 1, f);
        } else if (key == "grid_of") {
            if (!val.is_array() || static_cast<Eigen::Index>(val.size()) != n) {
                throw field_error(f, "expected " + std::to_string(n) + " grid ids");
            }
            p.grid_of = val.get<std::vector<int>>();
        } else if (key == "n_gen" || key == "t_start") {
            continue;
        } else if (key == "G_edges" || key == "B_edges") {
            continue;  // applied after full matrices
        } else {
            throw field_error(f, "unknown key");
        }
    }
    if (j.contains("G_edges")) apply_edges(p.G, j["G_edges"], field + ".G_edges");
    if (j.contains("B_edges")) apply_edges(p.B, j["B_edges"], field + ".B_edges");
}

inline Eigen::Index generator_count(const json& base, const std::string& field) {
    if (base.contains("n_gen")) return base["n_gen"].get<Eigen::Index>();
    if (base.contains("H") && base["H"].is_array()) return static_cast<Eigen::Index>(base["H"].size());
    if (base.contains("grid_of") && base["grid_of"].is_array()) return static_cast<Eigen::Index>(base["grid_of"].size());
    throw field_error(field, "cannot infer the generator count; give n_gen or an H array");
}

}  // namespace detail

/// Parameter schedule from JSON. Either
///   {"synthetic": {CascadeOptions fields}}   (pre-fault / fault-on / post-trip cascade), or
///   {"base": {GridParameters fields}, "segments": [{"t_start": t, <overrides>}, ...]}.
/// Overrides may replace any field or edit admittances with "B_edges"/"G_edges": [[i, j, v], ...].
/// An optional "no_fault": true keeps only the first segment.
inline ParameterSchedule parse_schedule(const json& j, const std::string& field = "schedule") {
    if (!j.is_object()) throw detail::field_error(field, "expected an object");
    std::vector<ParameterSchedule::Segment> segs;
    if (j.contains("synthetic")) {
        const CascadeOptions o = detail::cascade_options(j["synthetic"], field + ".synthetic");
        segs = synthetic_fault_schedule(o).segments();
    } else {
        if (!j.contains("base")) throw detail::field_error(field, "needs 'base' or 'synthetic'");
        const json& base = j["base"];
        const Eigen::Index n = detail::generator_count(base, field + ".base");
        GridParameters p;
        p.H = p.D = p.P_m = p.G_self = Eigen::VectorXd::Zero(n);
        p.V = Eigen::VectorXd::Ones(n);
        p.G = p.B = Eigen::MatrixXd::Zero(n + 1, n + 1);
        p.grid_of.assign(static_cast<std::size_t>(n), 1);
        detail::apply_parameter_fields(p, base, n, field + ".base");
        segs.push_back({0.0, p});
        if (j.contains("segments")) {
            const json& list = j["segments"];
            if (!list.is_array()) throw detail::field_error(field + ".segments", "expected an array");
            for (std::size_t k = 0; k < list.size(); ++k) {
                const std::string f = field + ".segments[" + std::to_string(k) + "]";
                if (!list[k].contains("t_start")) throw detail::field_error(f, "missing t_start");
                GridParameters q = segs.back().params;
                detail::apply_parameter_fields(q, list[k], n, f);
                segs.push_back({detail::get_number(list[k]["t_start"], f + ".t_start"), std::move(q)});
            }
        }
    }
    if (j.value("no_fault", false)) segs.resize(1);
    try {
        return ParameterSchedule(std::move(segs));
    } catch (const std::invalid_argument& e) {
        throw detail::field_error(field, e.what());
    }
}

inline SamplingConfig parse_sampling(const json& j, const std::string& field = "sampling") {
    if (!j.is_object()) throw detail::field_error(field, "expected an object");
    SamplingConfig c;
    for (const auto& [key, val] : j.items()) {
        const std::string f = field + "." + key;
        if (key == "n_traj") {
            if (!val.is_number_integer() || val.get<long long>() < 1) throw detail::field_error(f, "expected a positive integer");
            c.n_traj = val.get<std::size_t>();
        } else if (key == "traj_len") {
            c.traj_len = detail::get_number(val, f);
        } else if (key == "T_s") {
            c.T_s = detail::get_number(val, f);
        } else if (key == "dt_int") {
            c.dt_int = detail::get_number(val, f);
        } else if (key == "delta_halfwidth") {
            c.delta_halfwidth = detail::get_number(val, f);
        } else if (key == "omega_halfwidth") {
            c.omega_halfwidth = detail::get_number(val, f);
        } else if (key == "u_min") {
            c.u_min = detail::get_number(val, f);
        } else if (key == "u_max") {
            c.u_max = detail::get_number(val, f);
        } else if (key == "threads") {
            c.threads = val.get<unsigned>();
        } else if (key == "center") {
            const auto s = val.get<std::string>();
            if (s == "equilibrium") {
                c.center = AngleCenter::equilibrium;
            } else if (s == "zero") {
                c.center = AngleCenter::zero;
            } else {
                throw detail::field_error(f, "expected 'equilibrium' or 'zero'");
            }
        } else if (key == "regularization") {
            continue;  // read by the fit stage
        } else {
            throw detail::field_error(f, "unknown key");
        }
    }
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw detail::field_error(field, e.what());
    }
    return c;
}

/// Per-controller MPC settings; the weight/bound shapes follow the controller scope size.
struct MpcSettings {
    Eigen::Index N_p = 20;
    double r = 0.01;
    double u_bound = 0.2;
    double theta_max = std::numeric_limits<double>::infinity();
    double omega_max = std::numeric_limits<double>::infinity();
    QpOptions qp;

    MpcConfig make(Eigen::Index n_gen) const {
        MpcConfig cfg = MpcConfig::frequency_regulation(n_gen, N_p, r, u_bound);
        if (std::isfinite(theta_max) || std::isfinite(omega_max)) cfg.set_angle_frequency_bounds(theta_max, omega_max);
        return cfg;
    }
};

inline MpcSettings parse_mpc(const json& j, const std::string& field = "mpc") {
    if (!j.is_object()) throw detail::field_error(field, "expected an object");
    MpcSettings s;
    for (const auto& [key, val] : j.items()) {
        const std::string f = field + "." + key;
        if (key == "N_p") {
            if (!val.is_number_integer() || val.get<long long>() < 1) throw detail::field_error(f, "expected a positive integer");
            s.N_p = val.get<Eigen::Index>();
        } else if (key == "r") {
            s.r = detail::get_number(val, f);
            if (s.r <= 0.0) throw detail::field_error(f, "must be positive");
        } else if (key == "u_bound") {
            s.u_bound = detail::get_number(val, f);
            if (s.u_bound < 0.0) throw detail::field_error(f, "must be non-negative");
        } else if (key == "theta_max") {
            s.theta_max = detail::get_number(val, f);
        } else if (key == "omega_max") {
            s.omega_max = detail::get_number(val, f);
        } else if (key == "kkt_tolerance") {
            s.qp.kkt_tolerance = detail::get_number(val, f);
        } else if (key == "max_iterations") {
            s.qp.max_iterations = val.get<int>();
        } else {
            throw detail::field_error(f, "unknown key");
        }
    }
    return s;
}

// ---------------------------------------------------------------------------------------------
// CSV / JSON exports

namespace detail {

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

/// Trajectory CSV: provenance comment, header `t,delta_1..,omega_1..,u_1..`, one row per sample.
/// The last state row has no applied input; its u columns repeat the last held input.
inline void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& tr, const Provenance& prov) {
    auto out = detail::open_output(path);
    const Eigen::Index n = tr.states.front().size();
    out << prov.comment() << "\nt";
    for (Eigen::Index j = 1; j <= n; ++j) out << ",delta_" << j;
    for (Eigen::Index j = 1; j <= n; ++j) out << ",omega_" << j;
    for (Eigen::Index j = 1; j <= n; ++j) out << ",u_" << j;
    out << '\n';
    for (std::size_t k = 0; k < tr.states.size(); ++k) {
        const auto& s = tr.states[k];
        out << detail::fmt(tr.times[k]);
        for (Eigen::Index j = 0; j < n; ++j) out << ',' << detail::fmt(s.delta(j));
        for (Eigen::Index j = 0; j < n; ++j) out << ',' << detail::fmt(s.omega(j));
        const Eigen::VectorXd u = tr.inputs.empty() ? Eigen::VectorXd::Zero(n)
                                                    : tr.inputs[std::min(k, tr.inputs.size() - 1)];
        for (Eigen::Index j = 0; j < n; ++j) out << ',' << detail::fmt(u(j));
        out << '\n';
    }
}

/// Reads the numeric body of a trajectory CSV (comment and header skipped).
inline std::vector<std::vector<double>> read_csv_rows(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open '" + path.string() + "'");
    std::vector<std::vector<double>> rows;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (header) {
            header = false;
            continue;
        }
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        rows.push_back(std::move(row));
    }
    return rows;
}

/// controls.csv: t and the input applied over [t, t + T_s) for each generator.
inline void write_controls_csv(const std::filesystem::path& path, const Trajectory& tr, const Provenance& prov) {
    auto out = detail::open_output(path);
    const Eigen::Index n = tr.states.front().size();
    out << prov.comment() << "\nt";
    for (Eigen::Index j = 1; j <= n; ++j) out << ",u_" << j;
    out << '\n';
    for (std::size_t k = 0; k < tr.inputs.size(); ++k) {
        out << detail::fmt(tr.times[k]);
        for (Eigen::Index j = 0; j < n; ++j) out << ',' << detail::fmt(tr.inputs[k](j));
        out << '\n';
    }
}

/// Per-grid panels: grid_<g>.csv with t, delta_j and df_j [Hz] for the generators of grid g,
/// plus plots.gp drawing one angle panel and one frequency panel per grid.
inline void write_grid_series(const std::filesystem::path& dir, const Trajectory& tr, const std::vector<int>& grid_of,
                              const Provenance& prov) {
    const int n_grids = grid_of.empty() ? 0 : *std::max_element(grid_of.begin(), grid_of.end());
    for (int g = 1; g <= n_grids; ++g) {
        std::vector<Eigen::Index> gens;
        for (std::size_t j = 0; j < grid_of.size(); ++j) {
            if (grid_of[j] == g) gens.push_back(static_cast<Eigen::Index>(j));
        }
        auto out = detail::open_output(dir / ("grid_" + std::to_string(g) + ".csv"));
        out << prov.comment() << "\nt";
        for (auto j : gens) out << ",delta_" << j + 1;
        for (auto j : gens) out << ",df_" << j + 1;
        out << '\n';
        for (std::size_t k = 0; k < tr.states.size(); ++k) {
            out << detail::fmt(tr.times[k]);
            for (auto j : gens) out << ',' << detail::fmt(tr.states[k].delta(j));
            for (auto j : gens) out << ',' << detail::fmt(frequency_deviation(tr.states[k].omega(j)));
            out << '\n';
        }
    }
    auto gp = detail::open_output(dir / "plots.gp");
    gp << prov.comment() << "\n"
       << "set datafile separator ','\n"
       << "set terminal pngcairo size 1000," << std::max(1, n_grids) * 300 << "\n"
       << "set output 'trajectories.png'\n"
       << "set multiplot layout " << std::max(1, n_grids) << ",2\n"
       << "set key off\n";
    for (int g = 1; g <= n_grids; ++g) {
        const auto count = std::count(grid_of.begin(), grid_of.end(), g);
        const std::string file = "grid_" + std::to_string(g) + ".csv";
        gp << "set title 'grid " << g << ": rotor angle [rad]'\n"
           << "plot for [c=2:" << 1 + count << "] '" << file << "' skip 2 using 1:c with lines\n"
           << "set title 'grid " << g << ": frequency deviation [Hz]'\n"
           << "plot for [c=" << 2 + count << ":" << 1 + 2 * count << "] '" << file
           << "' skip 2 using 1:c with lines\n";
    }
    gp << "unset multiplot\n";
}

inline json metrics_json(const Metrics& m, const RunRecord& rec, const Provenance& prov) {
    const auto finite_or_null = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    std::vector<json> settle;
    for (double s : m.settling_time_per_grid) settle.push_back(finite_or_null(s));
    std::size_t fallbacks = 0;
    for (const auto& step : rec.fallbacks) fallbacks += static_cast<std::size_t>(std::count(step.begin(), step.end(), true));
    json j = {{"mode", to_string(rec.mode)},
              {"max_df_hz", m.max_df},
              {"max_df_per_grid_hz", m.max_df_per_grid},
              {"threshold_hz", m.threshold},
              {"settling_time_s", finite_or_null(m.settling_time)},
              {"settling_time_per_grid_s", settle},
              {"saturation_fraction", m.saturation_fraction},
              {"mean_step_seconds", m.mean_step_seconds},
              {"max_step_seconds", m.max_step_seconds},
              {"final_time_s", m.final_time},
              {"fallback_steps", fallbacks},
              {"truncated", rec.truncated},
              {"diagnostic", rec.diagnostic}};
    j.update(prov.to_json());
    return j;
}

inline void write_json(const std::filesystem::path& path, const json& j) {
    auto out = detail::open_output(path);
    out << j.dump(2) << '\n';
}

}  // namespace kmpc
