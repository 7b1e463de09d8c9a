#pragma once

// File formats: shape datasets (JSON), time series (CSV) and run manifests.
// Every double is written with 17 significant digits so values round-trip.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "stochlm/dynamics.hpp"
#include "stochlm/em.hpp"
#include "stochlm/moments.hpp"
#include "stochlm/optimize.hpp"

namespace stochlm {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// 64-bit FNV-1a hash.
inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline json positions_to_json(const Positions& q) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
        json r = json::array();
        for (Eigen::Index a = 0; a < q.cols(); ++a) r.push_back(q(i, a));
        rows.push_back(std::move(r));
    }
    return rows;
}

inline json vector_to_json(const Vector& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline json matrix_to_json(const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(vector_to_json(m.row(i).transpose()));
    return rows;
}

/// Reads a number, raising ConfigError that names `path`.
inline double number_at(const json& j, const std::string& path) {
    if (!j.is_number()) throw ConfigError(path + ": expected a number");
    const double v = j.get<double>();
    if (!std::isfinite(v)) throw ConfigError(path + ": must be finite");
    return v;
}

inline Vector vector_from_json(const json& j, const std::string& path, Eigen::Index expected = -1) {
    if (!j.is_array()) throw ConfigError(path + ": expected an array of numbers");
    if (expected >= 0 && static_cast<Eigen::Index>(j.size()) != expected)
        throw ConfigError(path + ": expected " + std::to_string(expected) + " entries, got " +
                          std::to_string(j.size()));
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i)
        v[static_cast<Eigen::Index>(i)] = number_at(j[i], path + "[" + std::to_string(i) + "]");
    return v;
}

/// N x d array from [[x, y], ...]; `n`/`d` of -1 accept any size.
inline Positions positions_from_json(const json& j, const std::string& path, Eigen::Index n = -1,
                                     Eigen::Index d = -1) {
    if (!j.is_array() || j.empty()) throw ConfigError(path + ": expected a non-empty array of points");
    if (n >= 0 && static_cast<Eigen::Index>(j.size()) != n)
        throw ConfigError(path + ": expected " + std::to_string(n) + " points, got " +
                          std::to_string(j.size()));
    const auto rows = static_cast<Eigen::Index>(j.size());
    const Eigen::Index cols = d >= 0 ? d : (j[0].is_array() ? static_cast<Eigen::Index>(j[0].size()) : 0);
    if (cols < 1) throw ConfigError(path + "[0]: expected a point with at least one coordinate");
    Positions q(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        q.row(i) = vector_from_json(j[static_cast<std::size_t>(i)], path + "[" + std::to_string(i) + "]", cols)
                       .transpose();
    return q;
}

struct ShapeDataset {
    Eigen::Index d = 2;
    Eigen::Index n_landmarks = 0;
    std::vector<Positions> shapes;
    std::string provenance;
};

inline json dataset_to_json(const ShapeDataset& ds) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["d"] = ds.d;
    j["n_landmarks"] = ds.n_landmarks;
    if (!ds.provenance.empty()) j["provenance"] = ds.provenance;
    json shapes = json::array();
    for (const auto& s : ds.shapes) shapes.push_back(positions_to_json(s));
    j["shapes"] = std::move(shapes);
    return j;
}

inline ShapeDataset dataset_from_shapes(std::vector<Positions> shapes, std::string provenance) {
    if (shapes.empty()) throw ConfigError("dataset: no shapes");
    ShapeDataset ds;
    ds.n_landmarks = shapes.front().rows();
    ds.d = shapes.front().cols();
    ds.shapes = std::move(shapes);
    ds.provenance = std::move(provenance);
    return ds;
}

inline ShapeDataset dataset_from_json(const json& j, const std::string& where = "dataset") {
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    if (j.contains("schema_version") && j["schema_version"] != kSchemaVersion)
        throw ConfigError(where + ".schema_version: unsupported version");
    for (const char* key : {"d", "n_landmarks", "shapes"})
        if (!j.contains(key)) throw ConfigError(where + "." + key + ": missing");
    ShapeDataset ds;
    if (!j["d"].is_number_integer() || j["d"].get<long>() < 1)
        throw ConfigError(where + ".d: expected a positive integer");
    if (!j["n_landmarks"].is_number_integer() || j["n_landmarks"].get<long>() < 1)
        throw ConfigError(where + ".n_landmarks: expected a positive integer");
    ds.d = j["d"].get<Eigen::Index>();
    ds.n_landmarks = j["n_landmarks"].get<Eigen::Index>();
    if (j.contains("provenance") && j["provenance"].is_string()) ds.provenance = j["provenance"];
    const json& shapes = j["shapes"];
    if (!shapes.is_array()) throw ConfigError(where + ".shapes: expected an array");
    for (std::size_t s = 0; s < shapes.size(); ++s)
        ds.shapes.push_back(positions_from_json(shapes[s], where + ".shapes[" + std::to_string(s) + "]",
                                                ds.n_landmarks, ds.d));
    return ds;
}

inline json read_json_file(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw ConfigError("cannot open '" + p.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("'" + p.string() + "': invalid JSON: " + e.what());
    }
}

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
    out << text;
    if (!out) throw std::runtime_error("write failed for '" + p.string() + "'");
}

inline void write_json_file(const std::filesystem::path& p, const json& j) {
    write_text_file(p, j.dump(2) + "\n");
}

inline ShapeDataset read_dataset(const std::filesystem::path& p) {
    return dataset_from_json(read_json_file(p), p.filename().string());
}

inline void write_dataset(const std::filesystem::path& p, const ShapeDataset& ds) {
    write_json_file(p, dataset_to_json(ds));
}

/// t, landmark_index, q_1..q_d, p_1..p_d
inline std::string trajectory_csv(const Trajectory& traj) {
    std::ostringstream os;
    const auto d = traj.empty() ? 0 : traj.front().dim();
    os << "t,landmark_index";
    for (Eigen::Index a = 1; a <= d; ++a) os << ",q_" << a;
    for (Eigen::Index a = 1; a <= d; ++a) os << ",p_" << a;
    os << "\n";
    for (const auto& s : traj)
        for (Eigen::Index i = 0; i < s.n_landmarks(); ++i) {
            os << fmt_double(s.t) << "," << i;
            for (Eigen::Index a = 0; a < d; ++a) os << "," << fmt_double(s.q(i, a));
            for (Eigen::Index a = 0; a < d; ++a) os << "," << fmt_double(s.p(i, a));
            os << "\n";
        }
    return os.str();
}

/// t, block, i, j, value. Blocks mean_q / mean_p use j = coordinate; covariance
/// blocks qq / qp / pp use flat landmark-coordinate indices i, j.
inline std::string moments_csv(const std::vector<MomentTrajectoryPoint>& traj) {
    std::ostringstream os;
    os << "t,block,i,j,value\n";
    for (const auto& pt : traj) {
        const auto& ms = pt.state;
        const Layout& L = ms.layout;
        const std::string t = fmt_double(pt.t);
        for (Eigen::Index i = 0; i < L.n; ++i)
            for (Eigen::Index a = 0; a < L.d; ++a)
                os << t << ",mean_q," << i << "," << a << "," << fmt_double(ms.mean[L.qi(i, a)]) << "\n";
        for (Eigen::Index i = 0; i < L.n; ++i)
            for (Eigen::Index a = 0; a < L.d; ++a)
                os << t << ",mean_p," << i << "," << a << "," << fmt_double(ms.mean[L.pi(i, a)]) << "\n";
        const auto nd = L.nd();
        auto block = [&](const char* name, Eigen::Index r0, Eigen::Index c0, bool upper) {
            for (Eigen::Index i = 0; i < nd; ++i)
                for (Eigen::Index j = upper ? i : 0; j < nd; ++j)
                    os << t << "," << name << "," << i << "," << j << ","
                       << fmt_double(ms.cov(r0 + i, c0 + j)) << "\n";
        };
        block("qq", 0, 0, true);
        block("qp", 0, nd, false);
        block("pp", nd, nd, true);
    }
    return os.str();
}

/// generation, best_cost (polish steps continue the numbering).
inline std::string de_trace_csv(const std::vector<TracePoint>& trace) {
    std::ostringstream os;
    os << "generation,best_cost\n";
    for (const auto& tp : trace) os << tp.iteration << "," << fmt_double(tp.best) << "\n";
    return os.str();
}

/// iteration, parameter_name, value, Q_estimate, ess (long format).
inline std::string em_trace_csv(const EmResult& res) {
    std::ostringstream os;
    os << "iteration,parameter_name,value,Q_estimate,ess\n";
    for (const auto& it : res.trace) {
        const Theta& th = it.theta;
        auto emit = [&](const std::string& name, double v) {
            os << it.iteration << "," << name << "," << fmt_double(v) << "," << fmt_double(it.q_value)
               << "," << fmt_double(it.mean_ess) << "\n";
        };
        auto emit_array = [&](const std::string& base, const Positions& a) {
            for (Eigen::Index i = 0; i < a.rows(); ++i)
                for (Eigen::Index c = 0; c < a.cols(); ++c)
                    emit(base + "[" + std::to_string(i) + "][" + std::to_string(c) + "]", a(i, c));
        };
        emit_array("q0", th.q0);
        emit_array("p0", th.p0);
        emit_array("lambda", th.lambdas);
    }
    return os.str();
}

}  // namespace stochlm
