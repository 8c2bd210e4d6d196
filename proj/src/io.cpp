#include "segtopo/io.hpp"

#include <yaml-cpp/yaml.h>

#include "json.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace segtopo::io {

namespace {

constexpr double kRad = 180.0 / 3.14159265358979323846;

// ---------------------------------------------------------------- config

class Reader {
public:
    explicit Reader(std::string source) : source_(std::move(source)) {}

    [[noreturn]] void fail(const YAML::Node& at, const std::string& key, const std::string& what) const {
        throw ConfigError(key, where(at.Mark()) + what);
    }

    std::string where(const YAML::Mark& m) const {
        if (m.is_null()) return source_ + ": ";
        return source_ + ":" + std::to_string(m.line + 1) + ":" + std::to_string(m.column + 1) + ": ";
    }

    // Rejects keys outside `allowed` and remembers where each key was written.
    void keys(const YAML::Node& map, const std::string& section, std::set<std::string> allowed) {
        if (!map.IsMap()) fail(map, section, "section '" + section + "' must be a mapping");
        for (const auto& kv : map) {
            const std::string k = kv.first.as<std::string>();
            if (!allowed.count(k))
                fail(kv.first, k, "unknown key '" + k + "' in section '" + section + "'");
            marks_.emplace(k, kv.first.Mark());
        }
    }

    template <class T>
    void get(const YAML::Node& map, const std::string& key, T& out) const {
        const YAML::Node n = map[key];
        if (!n) return;
        if (!n.IsScalar()) fail(n, key, "'" + key + "' must be a scalar");
        try {
            out = n.as<T>();
        } catch (const YAML::Exception&) {
            fail(n, key, "cannot parse '" + n.Scalar() + "' as a value for '" + key + "'");
        }
    }

    template <class T>
    void require(const YAML::Node& map, const std::string& key, T& out, const std::string& section) const {
        if (!map[key]) fail(map, key, "missing required key '" + key + "' in section '" + section + "'");
        get(map, key, out);
    }

    Vec3 vec3(const YAML::Node& n, const std::string& key) const {
        if (!n || !n.IsSequence() || n.size() != 3) fail(n, key, "'" + key + "' must be a list of 3 numbers");
        Vec3 v;
        for (int d = 0; d < 3; ++d) {
            try {
                v[d] = n[d].as<double>();
            } catch (const YAML::Exception&) {
                fail(n[d], key, "'" + key + "' must be a list of 3 numbers");
            }
        }
        return v;
    }

    Box box(const YAML::Node& n, const std::string& key) {
        keys(n, key, {"lo", "hi"});
        if (!n["lo"]) fail(n, "lo", "missing required key 'lo' in " + key);
        if (!n["hi"]) fail(n, "hi", "missing required key 'hi' in " + key);
        return {vec3(n["lo"], "lo"), vec3(n["hi"], "hi")};
    }

    // Position of a key for errors raised after parsing.
    std::string where_key(const std::string& key) const {
        auto it = marks_.find(key);
        return it == marks_.end() ? source_ + ": " : where(it->second);
    }

    std::map<std::string, YAML::Mark> marks_;

private:
    std::string source_;
};

Mirror parse_mirror(const std::string& s) {
    if (s == "none") return Mirror::none;
    if (s == "x") return Mirror::x;
    if (s == "y") return Mirror::y;
    if (s == "z") return Mirror::z;
    throw ConfigError("mirror", "mirror must be one of none, x, y, z");
}

std::array<bool, 3> parse_dofs(const std::string& s) {
    std::array<bool, 3> d{false, false, false};
    if (s.empty()) throw ConfigError("dofs", "dofs must name at least one of x, y, z");
    for (char c : s) {
        if (c < 'x' || c > 'z') throw ConfigError("dofs", "dofs must be letters from 'xyz'");
        d[c - 'x'] = true;
    }
    return d;
}

std::string dofs_string(const std::array<bool, 3>& d) {
    std::string s;
    for (int i = 0; i < 3; ++i)
        if (d[i]) s += char('x' + i);
    return s;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void emit_vec(YAML::Emitter& e, const Vec3& v) {
    e << YAML::Flow << YAML::BeginSeq;
    for (double x : v) e << fmt(x);
    e << YAML::EndSeq;
}

void emit_box(YAML::Emitter& e, const Box& b) {
    e << YAML::BeginMap << YAML::Key << "lo" << YAML::Value;
    emit_vec(e, b.lo);
    e << YAML::Key << "hi" << YAML::Value;
    emit_vec(e, b.hi);
    e << YAML::EndMap;
}

// ---------------------------------------------------------------- text helpers

double parse_double(std::string_view s, std::size_t line) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw IoError("line " + std::to_string(line) + ": cannot parse number '" + std::string(s) + "'");
    return v;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i)
        if (i == line.size() || line[i] == sep) {
            out.push_back(line.substr(start, i - start));
            start = i + 1;
        }
    return out;
}

std::vector<std::string_view> lines_of(std::string_view text) {
    std::vector<std::string_view> out;
    for (auto l : split(text, '\n')) {
        if (!l.empty() && l.back() == '\r') l.remove_suffix(1);
        if (!l.empty()) out.push_back(l);
    }
    return out;
}

// ---------------------------------------------------------------- binary

// Little-endian regardless of the host byte order.
class Writer {
public:
    void u32(std::uint32_t v) { le(v, 4); }
    void f64(double d) { le(std::bit_cast<std::uint64_t>(d), 8); }
    void f64s(std::span<const double> v) {
        u32(static_cast<std::uint32_t>(v.size()));
        for (double d : v) f64(d);
    }
    void raw(const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); }
    std::string out;

private:
    void le(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
};

class ByteReader {
public:
    explicit ByteReader(std::string_view b) : b_(b) {}
    std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
    double f64() { return std::bit_cast<double>(le(8)); }
    std::vector<double> f64s() {
        const std::uint32_t n = u32();
        if (std::size_t(n) * 8 > b_.size() - pos_) throw IoError("parameter file is truncated");
        std::vector<double> v(n);
        for (double& d : v) d = f64();
        return v;
    }
    void take(void* p, std::size_t n) {
        if (pos_ + n > b_.size()) throw IoError("parameter file is truncated");
        std::memcpy(p, b_.data() + pos_, n);
        pos_ += n;
    }
    bool done() const { return pos_ == b_.size(); }

private:
    std::uint64_t le(int n) {
        unsigned char buf[8];
        take(buf, n);
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= std::uint64_t(buf[i]) << (8 * i);
        return v;
    }
    std::string_view b_;
    std::size_t pos_ = 0;
};

constexpr char kMagic[4] = {'N', 'F', 'T', 'O'};
constexpr std::uint32_t kVersion = 1;

std::uint32_t mode_code(opt::Mode m) { return static_cast<std::uint32_t>(m); }

}  // namespace

// ---------------------------------------------------------------- config

ProblemDomain parse_problem(std::string_view text, const std::string& source) {
    YAML::Node root;
    try {
        root = YAML::Load(std::string(text));
    } catch (const YAML::ParserException& e) {
        throw ConfigError("syntax", source + ":" + std::to_string(e.mark.line + 1) + ":" +
                                        std::to_string(e.mark.column + 1) + ": " + e.msg);
    }
    Reader r(source);
    if (!root.IsMap()) throw ConfigError("syntax", source + ": configuration must be a mapping");
    r.keys(root, "top level",
           {"name", "mesh", "material", "design", "am", "network", "solver", "schedule", "loads",
            "fixed", "passive"});

    ProblemDomain p;
    r.get(root, "name", p.name);

    if (!root["mesh"]) r.fail(root, "mesh", "missing required section 'mesh'");
    const YAML::Node mesh = root["mesh"];
    r.keys(mesh, "mesh", {"nelx", "nely", "nelz"});
    r.require(mesh, "nelx", p.nelx, "mesh");
    r.require(mesh, "nely", p.nely, "mesh");
    r.require(mesh, "nelz", p.nelz, "mesh");

    if (const YAML::Node m = root["material"]) {
        r.keys(m, "material", {"E0", "Emin", "nu", "penal"});
        r.get(m, "E0", p.material.E0);
        r.get(m, "Emin", p.material.Emin);
        r.get(m, "nu", p.material.nu);
        r.get(m, "penal", p.material.penal);
    }
    if (const YAML::Node d = root["design"]) {
        r.keys(d, "design", {"vol_frac", "segments", "mirror", "seed"});
        r.get(d, "vol_frac", p.vol_frac);
        r.get(d, "segments", p.n_segs);
        std::string mirror = "none";
        r.get(d, "mirror", mirror);
        try {
            p.mirror = parse_mirror(mirror);
        } catch (const ConfigError& e) {
            r.fail(d["mirror"], "mirror", e.what());
        }
        r.get(d, "seed", p.seed);
    }
    if (const YAML::Node a = root["am"]) {
        r.keys(a, "am", {"critical_angle", "beta", "height_penalty", "init_rx", "init_rz"});
        r.get(a, "critical_angle", p.critical_angle_deg);
        r.get(a, "beta", p.beta);
        r.get(a, "height_penalty", p.height_penalty);
        r.get(a, "init_rx", p.init_rx_deg);
        r.get(a, "init_rz", p.init_rz_deg);
    }
    if (const YAML::Node n = root["network"]) {
        r.keys(n, "network", {"features_per_axis", "feature_grid", "f_max", "seg_f_max", "random_phase"});
        r.get(n, "features_per_axis", p.network.features_per_axis);
        if (const YAML::Node g = n["feature_grid"]) {
            const Vec3 v = r.vec3(g, "feature_grid");
            for (int d = 0; d < 3; ++d) {
                if (v[d] != std::floor(v[d]) || std::abs(v[d]) > 1e6) r.fail(g, "feature_grid", "'feature_grid' must be a list of 3 integers");
                p.network.feature_grid[d] = static_cast<int>(v[d]);
            }
        }
        r.get(n, "f_max", p.network.f_max);
        r.get(n, "seg_f_max", p.network.seg_f_max);
        r.get(n, "random_phase", p.network.random_phase);
    }
    if (const YAML::Node s = root["solver"]) {
        r.keys(s, "solver", {"tol", "max_iter", "preconditioner"});
        r.get(s, "tol", p.solver.tol);
        r.get(s, "max_iter", p.solver.max_iter);
        std::string pc = "multigrid";
        r.get(s, "preconditioner", pc);
        if (pc != "multigrid" && pc != "jacobi")
            r.fail(s["preconditioner"], "preconditioner", "preconditioner must be multigrid or jacobi");
        p.solver.multigrid = pc == "multigrid";
    }
    if (const YAML::Node s = root["schedule"]) {
        Schedule& c = p.schedule;
        r.keys(s, "schedule",
               {"iterations", "sgd_iters", "topo_only_iters", "angle_only_iters", "alpha1_warmup",
                "alpha1_ramp", "alpha1_max", "alpha2_ramp", "alpha2_max", "sgd_lr", "adam_lr",
                "angle_sgd_lr", "angle_adam_lr", "seg_sgd_lr", "seg_adam_lr", "simp_sgd_lr",
                "simp_adam_lr", "adam_beta1", "adam_beta2", "adam_eps", "batches"});
        r.get(s, "iterations", c.iterations);
        r.get(s, "sgd_iters", c.sgd_iters);
        r.get(s, "topo_only_iters", c.topo_only_iters);
        r.get(s, "angle_only_iters", c.angle_only_iters);
        r.get(s, "alpha1_warmup", c.alpha1_warmup);
        r.get(s, "alpha1_ramp", c.alpha1_ramp);
        r.get(s, "alpha1_max", c.alpha1_max);
        r.get(s, "alpha2_ramp", c.alpha2_ramp);
        r.get(s, "alpha2_max", c.alpha2_max);
        r.get(s, "sgd_lr", c.sgd_lr);
        r.get(s, "adam_lr", c.adam_lr);
        r.get(s, "angle_sgd_lr", c.angle_sgd_lr);
        r.get(s, "angle_adam_lr", c.angle_adam_lr);
        r.get(s, "seg_sgd_lr", c.seg_sgd_lr);
        r.get(s, "seg_adam_lr", c.seg_adam_lr);
        r.get(s, "simp_sgd_lr", c.simp_sgd_lr);
        r.get(s, "simp_adam_lr", c.simp_adam_lr);
        r.get(s, "adam_beta1", c.adam_beta1);
        r.get(s, "adam_beta2", c.adam_beta2);
        r.get(s, "adam_eps", c.adam_eps);
        r.get(s, "batches", c.batches);
    }
    if (const YAML::Node loads = root["loads"]) {
        if (!loads.IsSequence()) r.fail(loads, "load", "'loads' must be a list");
        for (const auto& l : loads) {
            r.keys(l, "load", {"region", "force"});
            if (!l["region"]) r.fail(l, "region", "load is missing 'region'");
            if (!l["force"]) r.fail(l, "force", "load is missing 'force'");
            p.loads.push_back({r.box(l["region"], "region"), r.vec3(l["force"], "force")});
        }
    }
    if (const YAML::Node fixed = root["fixed"]) {
        if (!fixed.IsSequence()) r.fail(fixed, "fixed", "'fixed' must be a list");
        for (const auto& f : fixed) {
            r.keys(f, "fixed", {"region", "dofs"});
            if (!f["region"]) r.fail(f, "region", "fixed support is missing 'region'");
            FixedSpec spec;
            spec.region = r.box(f["region"], "region");
            std::string dofs = "xyz";
            r.get(f, "dofs", dofs);
            try {
                spec.dofs = parse_dofs(dofs);
            } catch (const ConfigError& e) {
                r.fail(f["dofs"], "dofs", e.what());
            }
            p.fixed.push_back(spec);
        }
    }
    if (const YAML::Node passive = root["passive"]) {
        if (!passive.IsSequence()) r.fail(passive, "passive", "'passive' must be a list");
        for (const auto& b : passive) p.passive.push_back(r.box(b, "passive"));
    }

    try {
        p.validate();
    } catch (const ConfigError& e) {
        const std::string at = e.key() == "load" || e.key() == "force" ? "loads" : e.key();
        throw ConfigError(e.key(), r.where_key(at) + e.what());
    } catch (const StructuralError& e) {
        throw ConfigError("fixed", r.where_key("fixed") + e.what());
    }
    return p;
}

ProblemDomain load_problem(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const IoError& e) {
        throw ConfigError("config", e.what());
    }
    return parse_problem(text, path.string());
}

std::string serialize_problem(const ProblemDomain& p) {
    YAML::Emitter e;
    e << YAML::BeginMap;
    e << YAML::Key << "name" << YAML::Value << YAML::DoubleQuoted << p.name;
    e << YAML::Key << "mesh" << YAML::Value << YAML::BeginMap << YAML::Key << "nelx" << YAML::Value
      << p.nelx << YAML::Key << "nely" << YAML::Value << p.nely << YAML::Key << "nelz"
      << YAML::Value << p.nelz << YAML::EndMap;
    e << YAML::Key << "material" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "E0" << YAML::Value << fmt(p.material.E0);
    e << YAML::Key << "Emin" << YAML::Value << fmt(p.material.Emin);
    e << YAML::Key << "nu" << YAML::Value << fmt(p.material.nu);
    e << YAML::Key << "penal" << YAML::Value << fmt(p.material.penal);
    e << YAML::EndMap;
    e << YAML::Key << "design" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "vol_frac" << YAML::Value << fmt(p.vol_frac);
    e << YAML::Key << "segments" << YAML::Value << p.n_segs;
    e << YAML::Key << "mirror" << YAML::Value << to_string(p.mirror);
    e << YAML::Key << "seed" << YAML::Value << p.seed;
    e << YAML::EndMap;
    e << YAML::Key << "am" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "critical_angle" << YAML::Value << fmt(p.critical_angle_deg);
    e << YAML::Key << "beta" << YAML::Value << fmt(p.beta);
    e << YAML::Key << "height_penalty" << YAML::Value << p.height_penalty;
    e << YAML::Key << "init_rx" << YAML::Value << fmt(p.init_rx_deg);
    e << YAML::Key << "init_rz" << YAML::Value << fmt(p.init_rz_deg);
    e << YAML::EndMap;
    e << YAML::Key << "network" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "features_per_axis" << YAML::Value << p.network.features_per_axis;
    if (p.network.feature_grid != std::array<int, 3>{0, 0, 0})
        e << YAML::Key << "feature_grid" << YAML::Value << YAML::Flow
          << std::vector<int>(p.network.feature_grid.begin(), p.network.feature_grid.end());
    e << YAML::Key << "f_max" << YAML::Value << fmt(p.network.f_max);
    e << YAML::Key << "seg_f_max" << YAML::Value << fmt(p.network.seg_f_max);
    e << YAML::Key << "random_phase" << YAML::Value << p.network.random_phase;
    e << YAML::EndMap;
    e << YAML::Key << "solver" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "tol" << YAML::Value << fmt(p.solver.tol);
    e << YAML::Key << "max_iter" << YAML::Value << p.solver.max_iter;
    e << YAML::Key << "preconditioner" << YAML::Value << (p.solver.multigrid ? "multigrid" : "jacobi");
    e << YAML::EndMap;
    const Schedule& s = p.schedule;
    e << YAML::Key << "schedule" << YAML::Value << YAML::BeginMap;
    auto i = [&](const char* k, int v) { e << YAML::Key << k << YAML::Value << v; };
    auto d = [&](const char* k, double v) { e << YAML::Key << k << YAML::Value << fmt(v); };
    i("iterations", s.iterations);
    i("sgd_iters", s.sgd_iters);
    i("topo_only_iters", s.topo_only_iters);
    i("angle_only_iters", s.angle_only_iters);
    i("alpha1_warmup", s.alpha1_warmup);
    i("alpha1_ramp", s.alpha1_ramp);
    d("alpha1_max", s.alpha1_max);
    i("alpha2_ramp", s.alpha2_ramp);
    d("alpha2_max", s.alpha2_max);
    d("sgd_lr", s.sgd_lr);
    d("adam_lr", s.adam_lr);
    d("angle_sgd_lr", s.angle_sgd_lr);
    d("angle_adam_lr", s.angle_adam_lr);
    d("seg_sgd_lr", s.seg_sgd_lr);
    d("seg_adam_lr", s.seg_adam_lr);
    d("simp_sgd_lr", s.simp_sgd_lr);
    d("simp_adam_lr", s.simp_adam_lr);
    d("adam_beta1", s.adam_beta1);
    d("adam_beta2", s.adam_beta2);
    d("adam_eps", s.adam_eps);
    i("batches", s.batches);
    e << YAML::EndMap;
    e << YAML::Key << "loads" << YAML::Value << YAML::BeginSeq;
    for (const auto& l : p.loads) {
        e << YAML::BeginMap << YAML::Key << "region" << YAML::Value;
        emit_box(e, l.region);
        e << YAML::Key << "force" << YAML::Value;
        emit_vec(e, l.force);
        e << YAML::EndMap;
    }
    e << YAML::EndSeq;
    e << YAML::Key << "fixed" << YAML::Value << YAML::BeginSeq;
    for (const auto& f : p.fixed) {
        e << YAML::BeginMap << YAML::Key << "region" << YAML::Value;
        emit_box(e, f.region);
        e << YAML::Key << "dofs" << YAML::Value << dofs_string(f.dofs) << YAML::EndMap;
    }
    e << YAML::EndSeq;
    if (!p.passive.empty()) {
        e << YAML::Key << "passive" << YAML::Value << YAML::BeginSeq;
        for (const auto& b : p.passive) emit_box(e, b);
        e << YAML::EndSeq;
    }
    e << YAML::EndMap;
    return std::string(e.c_str()) + "\n";
}

// ---------------------------------------------------------------- voxels

void VoxelField::validate() const {
    if (nx < 1 || ny < 1 || nz < 1) throw InvalidInput("voxel field dimensions must be >= 1");
    if (density.size() != size()) throw InvalidInput("voxel density count does not match dimensions");
    if (!points.empty() && points.size() != size())
        throw InvalidInput("voxel point count does not match dimensions");
    for (double r : density)
        if (!(r >= 0.0 && r <= 1.0)) throw InvalidInput("voxel densities must lie in [0, 1]");
    if (!labels.empty()) {
        if (labels.size() != size()) throw InvalidInput("voxel label count does not match dimensions");
        for (int l : labels)
            if (l < 0 || l >= n_segs) throw InvalidInput("voxel label outside [0, n_segs)");
    }
    if (!overhang.empty() && overhang.size() != size())
        throw InvalidInput("overhang weight count does not match dimensions");
}

namespace {

VoxelField grid_field(const ProblemDomain& problem, int m) {
    VoxelField f;
    f.nx = problem.nelx * m;
    f.ny = problem.nely * m;
    f.nz = problem.nelz * m;
    f.spacing = problem.element_size() / m;
    const Vec3 e = problem.extents();
    f.origin = {-0.5 * e[0], -0.5 * e[1], -0.5 * e[2]};
    f.points = problem.sample_grid(m);
    return f;
}

std::vector<int> argmax_labels(const fields::SampleBatch& b) {
    const int ns = b.n_segs;
    std::vector<int> out(b.size(), 0);
    for (std::size_t i = 0; i < b.size(); ++i)
        for (int s = 1; s < ns; ++s)
            if (b.seg_weights[i * ns + s] > b.seg_weights[i * ns + out[i]]) out[i] = s;
    return out;
}

}  // namespace

VoxelField voxels_from_run(const ProblemDomain& problem, const opt::RunResult& result) {
    VoxelField f = grid_field(problem, 1);
    f.density = result.density;
    f.n_segs = result.params.seg.n_segs;
    if (f.n_segs > 1) f.labels = result.labels;
    f.overhang = result.overhang_weight;
    f.validate();
    return f;
}

std::string to_vtk(const VoxelField& f) {
    f.validate();
    std::string out;
    out += "# vtk DataFile Version 3.0\n";
    out += "voxel density field\n";
    out += "ASCII\n";
    out += "DATASET STRUCTURED_POINTS\n";
    out += "DIMENSIONS " + std::to_string(f.nx + 1) + " " + std::to_string(f.ny + 1) + " " +
           std::to_string(f.nz + 1) + "\n";
    out += "ORIGIN " + fmt(f.origin[0]) + " " + fmt(f.origin[1]) + " " + fmt(f.origin[2]) + "\n";
    out += "SPACING " + fmt(f.spacing) + " " + fmt(f.spacing) + " " + fmt(f.spacing) + "\n";
    out += "CELL_DATA " + std::to_string(f.size()) + "\n";
    out += "SCALARS density double 1\nLOOKUP_TABLE default\n";
    for (double r : f.density) out += fmt(r) + "\n";
    if (!f.labels.empty()) {
        out += "SCALARS segment int 1\nLOOKUP_TABLE default\n";
        for (int l : f.labels) out += std::to_string(l) + "\n";
    }
    if (!f.overhang.empty()) {
        out += "SCALARS overhang double 1\nLOOKUP_TABLE default\n";
        for (double w : f.overhang) out += fmt(w) + "\n";
    }
    return out;
}

std::string to_csv(const VoxelField& f) {
    f.validate();
    if (f.points.size() != f.size()) throw InvalidInput("CSV export needs voxel centre coordinates");
    const bool lab = !f.labels.empty();
    std::string out = lab ? "x,y,z,rho,label\n" : "x,y,z,rho\n";
    for (std::size_t i = 0; i < f.size(); ++i) {
        const Vec3& p = f.points[i];
        out += fmt(p[0]) + "," + fmt(p[1]) + "," + fmt(p[2]) + "," + fmt(f.density[i]);
        if (lab) out += "," + std::to_string(f.labels[i]);
        out += "\n";
    }
    return out;
}

VoxelField parse_csv(std::string_view text) {
    const auto lines = lines_of(text);
    if (lines.empty()) throw IoError("empty CSV");
    const auto head = split(lines[0], ',');
    const bool lab = head.size() == 5;
    if (!(head.size() == 4 || lab) || head[0] != "x" || head[3] != "rho")
        throw IoError("line 1: expected header x,y,z,rho[,label]");
    VoxelField f;
    for (std::size_t l = 1; l < lines.size(); ++l) {
        const auto c = split(lines[l], ',');
        if (c.size() != head.size())
            throw IoError("line " + std::to_string(l + 1) + ": expected " + std::to_string(head.size()) +
                          " columns");
        f.points.push_back({parse_double(c[0], l + 1), parse_double(c[1], l + 1), parse_double(c[2], l + 1)});
        f.density.push_back(parse_double(c[3], l + 1));
        if (lab) {
            const int v = static_cast<int>(parse_double(c[4], l + 1));
            f.labels.push_back(v);
            f.n_segs = std::max(f.n_segs, v + 1);
        }
    }
    f.nx = static_cast<int>(f.density.size());
    f.ny = f.nz = 1;
    return f;
}

// ---------------------------------------------------------------- history

std::string history_csv(std::span<const opt::HistoryRow> history) {
    std::string out = "iteration,loss,compliance,rho_bar,P,H,alpha1,alpha2,phase\n";
    for (const auto& r : history) {
        out += std::to_string(r.iteration) + "," + fmt(r.loss) + "," + fmt(r.compliance) + "," +
               fmt(r.rho_bar) + "," + fmt(r.P) + "," + fmt(r.H) + "," + fmt(r.alpha1) + "," +
               fmt(r.alpha2) + "," + r.phase + "\n";
    }
    return out;
}

std::vector<opt::HistoryRow> parse_history_csv(std::string_view text) {
    const auto lines = lines_of(text);
    if (lines.empty() || lines[0] != "iteration,loss,compliance,rho_bar,P,H,alpha1,alpha2,phase")
        throw IoError("line 1: unexpected history header");
    std::vector<opt::HistoryRow> out;
    for (std::size_t l = 1; l < lines.size(); ++l) {
        const auto c = split(lines[l], ',');
        if (c.size() != 9) throw IoError("line " + std::to_string(l + 1) + ": expected 9 columns");
        opt::HistoryRow r;
        r.iteration = static_cast<int>(parse_double(c[0], l + 1));
        r.loss = parse_double(c[1], l + 1);
        r.compliance = parse_double(c[2], l + 1);
        r.rho_bar = parse_double(c[3], l + 1);
        r.P = parse_double(c[4], l + 1);
        r.H = parse_double(c[5], l + 1);
        r.alpha1 = parse_double(c[6], l + 1);
        r.alpha2 = parse_double(c[7], l + 1);
        r.phase = std::string(c[8]);
        out.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------- params

std::string encode_params(const SavedParams& s) {
    Writer w;
    w.raw(kMagic, 4);
    w.u32(kVersion);
    w.u32(mode_code(s.mode));
    const auto& p = s.params;
    w.u32(static_cast<std::uint32_t>(p.angles.n_segs()));
    w.f64s(opt::pack(p.angles));
    if (s.mode == opt::Mode::simp) {
        w.f64s(s.simp_theta);
        return w.out;
    }
    w.u32(static_cast<std::uint32_t>(p.topo.n_features()));
    w.f64s(opt::pack(p.topo));
    w.u32(static_cast<std::uint32_t>(p.seg.n_features()));
    w.u32(static_cast<std::uint32_t>(p.seg.n_segs));
    w.f64s(opt::pack(p.seg));
    return w.out;
}

SavedParams decode_params(std::string_view bytes) {
    ByteReader r(bytes);
    char magic[4];
    r.take(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw IoError("not a parameter file (bad magic)");
    if (const auto v = r.u32(); v != kVersion)
        throw IoError("unsupported parameter file version " + std::to_string(v));
    const std::uint32_t mode = r.u32();
    if (mode > 3) throw IoError("unknown mode code in parameter file");
    SavedParams s;
    s.mode = static_cast<opt::Mode>(mode);
    const std::uint32_t ns = r.u32();
    if (ns < 1 || ns > 16) throw IoError("parameter file has an invalid segment count");
    s.params.angles.angles.assign(ns, {0.0, 0.0});
    opt::unpack(r.f64s(), s.params.angles);
    if (s.mode == opt::Mode::simp) {
        s.simp_theta = r.f64s();
    } else {
        const std::uint32_t nf = r.u32();
        auto& t = s.params.topo;
        t.layer.kernels.assign(3 * std::size_t(nf), 0.0);
        t.layer.bias.assign(nf, 0.0);
        t.weights.assign(nf, 0.0);
        opt::unpack(r.f64s(), t);
        const std::uint32_t sf = r.u32();
        const std::uint32_t sn = r.u32();
        if (sn != ns) throw IoError("parameter file segment counts disagree");
        auto& g = s.params.seg;
        g.n_segs = static_cast<int>(sn);
        g.layer.kernels.assign(3 * std::size_t(sf), 0.0);
        g.layer.bias.assign(sf, 0.0);
        g.weights.assign(std::size_t(sf) * sn, 0.0);
        g.bias.assign(sn, 0.0);
        opt::unpack(r.f64s(), g);
    }
    if (!r.done()) throw IoError("trailing bytes in parameter file");
    return s;
}

// ---------------------------------------------------------------- analysis

VoxelField upsample(const ProblemDomain& problem, const SavedParams& saved, int multiplier) {
    if (saved.mode == opt::Mode::simp)
        throw InvalidInput("simp-baseline parameters are per element and cannot be resampled");
    VoxelField f = grid_field(problem, multiplier);
    const auto batch = opt::evaluate_field(saved.params, f.points, problem.mirror);
    f.density = batch.density;
    f.n_segs = batch.n_segs;
    if (f.n_segs > 1) f.labels = argmax_labels(batch);
    return f;
}

Analysis analyze(const ProblemDomain& problem, const SavedParams& saved) {
    Analysis a;
    a.angles = saved.params.angles.angles;
    if (saved.mode == opt::Mode::simp) {
        const auto rho = opt::simp_density(problem, saved.simp_theta);
        const auto batch = opt::voxel_batch(problem, rho);
        a.report = opt::overhang_report(problem, batch, saved.params.angles);
        for (double r : rho) a.rho_bar += r;
        a.rho_bar /= double(rho.size());
        return a;
    }
    const auto batch = opt::evaluate_field(saved.params, problem.sample_grid(), problem.mirror);
    a.report = opt::overhang_report(problem, batch, saved.params.angles);
    for (double r : batch.density) a.rho_bar += r;
    a.rho_bar /= double(batch.size());
    return a;
}

Analysis analyze_field(const ProblemDomain& problem, const VoxelField& field,
                       const std::vector<std::pair<double, double>>& angles) {
    const std::size_t n0 = std::size_t(problem.nelx) * problem.nely * problem.nelz;
    int m = 1;
    while (n0 * std::size_t(m) * m * m < field.density.size()) ++m;
    if (n0 * std::size_t(m) * m * m != field.density.size())
        throw InvalidInput("voxel count " + std::to_string(field.density.size()) +
                           " does not match the problem grid or any refinement of it");
    for (double r : field.density)
        if (!(r >= 0.0 && r <= 1.0)) throw InvalidInput("voxel densities must lie in [0, 1]");
    const int ns = static_cast<int>(angles.size());
    if (ns < 1) throw InvalidInput("at least one print angle pair is required");
    if (!field.labels.empty() && field.labels.size() != field.density.size())
        throw InvalidInput("label count does not match the voxel count");
    const auto base = opt::voxel_batch(problem, field.density, m);
    std::vector<double> w(base.size() * ns, ns == 1 ? 1.0 : 0.0);
    if (ns > 1) {
        if (field.labels.empty()) throw InvalidInput("several print angles need per-voxel labels");
        for (std::size_t i = 0; i < base.size(); ++i) {
            const int l = field.labels[i];
            if (l < 0 || l >= ns) throw InvalidInput("voxel label outside the angle list");
            w[i * ns + l] = 1.0;
        }
    }
    const auto batch = fields::combine(base.points, base.density, base.spatial_grad, w,
                                       std::vector<Vec3>(w.size(), Vec3{0.0, 0.0, 0.0}), ns);
    Analysis a;
    a.angles = angles;
    a.report = opt::overhang_report(problem, batch, fields::AngleNet{angles}, m);
    for (double r : field.density) a.rho_bar += r;
    a.rho_bar /= double(field.density.size());
    return a;
}

std::string summary_json(const ProblemDomain& problem, const opt::RunResult& r, int batches) {
    nlohmann::ordered_json j;
    j["problem"] = problem.name;
    j["mode"] = opt::to_string(r.mode);
    j["mesh"] = {problem.nelx, problem.nely, problem.nelz};
    j["iterations"] = r.history.size();
    j["batches"] = batches;
    j["compliance"] = r.compliance;
    j["c0"] = r.c0;
    j["rho_bar"] = r.rho_bar;
    j["vol_frac"] = problem.vol_frac;
    j["P"] = r.P;
    j["H"] = r.H;
    auto segs = nlohmann::ordered_json::array();
    for (std::size_t s = 0; s < r.segments.size(); ++s) {
        const auto& a = r.params.angles.angles[s];
        segs.push_back({{"rx_deg", a.first * kRad},
                        {"rz_deg", a.second * kRad},
                        {"P", r.segments[s].P},
                        {"H", r.segments[s].H},
                        {"lowest_solid", r.segments[s].x_lowest},
                        {"degenerate", r.segments[s].degenerate}});
    }
    j["segments"] = segs;
    j["peak_gradient_bytes"] = r.peak_grad_bytes;
    j["seconds"] = r.seconds;
    return j.dump(2) + "\n";
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("error reading '" + path.string() + "'");
    return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    out.close();
    if (!out) throw IoError("error writing '" + path.string() + "'");
}

}  // namespace segtopo::io
