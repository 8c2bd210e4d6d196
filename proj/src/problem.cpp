#include "segtopo/problem.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "segtopo/am.hpp"

namespace segtopo {

namespace {

constexpr double kRegionTol = 1e-9;

bool inside(const Box& b, const Vec3& f) {
    for (int d = 0; d < 3; ++d)
        if (f[d] < b.lo[d] - kRegionTol || f[d] > b.hi[d] + kRegionTol) return false;
    return true;
}

void check_box(const Box& b, const std::string& key) {
    for (int d = 0; d < 3; ++d)
        if (!(b.lo[d] >= 0.0 && b.hi[d] <= 1.0 && b.lo[d] <= b.hi[d]))
            throw ConfigError(key, key + ": region bounds must satisfy 0 <= lo <= hi <= 1");
}

template <class F>
void for_nodes(int nx, int ny, int nz, const Box& b, F&& f) {
    for (int k = 0; k <= nz; ++k)
        for (int j = 0; j <= ny; ++j)
            for (int i = 0; i <= nx; ++i)
                if (inside(b, {double(i) / nx, double(j) / ny, double(k) / nz})) f(i, j, k);
}

// Coordinate of cell centre i of m cells on an axis whose cells have size h.
// Written so that mirrored cells give bitwise-negated coordinates.
inline double centre(int i, int m, int mult, double h) {
    return (double(2 * i + 1 - m) / double(2 * mult)) * h;
}

}  // namespace

void Schedule::validate() const {
    if (iterations < 1) throw ConfigError("iterations", "iterations must be >= 1");
    if (sgd_iters < 0) throw ConfigError("sgd_iters", "sgd_iters must be >= 0");
    if (topo_only_iters < 0) throw ConfigError("topo_only_iters", "topo_only_iters must be >= 0");
    if (angle_only_iters < 0) throw ConfigError("angle_only_iters", "angle_only_iters must be >= 0");
    if (alpha1_warmup < 0) throw ConfigError("alpha1_warmup", "alpha1_warmup must be >= 0");
    if (alpha1_ramp < 0) throw ConfigError("alpha1_ramp", "alpha1_ramp must be >= 0");
    if (alpha2_ramp < 0) throw ConfigError("alpha2_ramp", "alpha2_ramp must be >= 0");
    if (!(alpha1_max >= 0.0 && alpha1_max <= 100.0))
        throw ConfigError("alpha1_max", "alpha1_max must be in [0, 100]");
    if (!(alpha2_max >= 0.0 && alpha2_max <= 1.0))
        throw ConfigError("alpha2_max", "alpha2_max must be in [0, 1]");
    const std::pair<const char*, double> lrs[] = {
        {"sgd_lr", sgd_lr},           {"adam_lr", adam_lr},         {"angle_sgd_lr", angle_sgd_lr},
        {"angle_adam_lr", angle_adam_lr}, {"seg_sgd_lr", seg_sgd_lr}, {"seg_adam_lr", seg_adam_lr},
        {"simp_sgd_lr", simp_sgd_lr}, {"simp_adam_lr", simp_adam_lr}};
    for (const auto& [key, v] : lrs)
        if (!(v >= 0.0) || !std::isfinite(v))
            throw ConfigError(key, std::string(key) + " must be a finite non-negative number");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ConfigError("adam_beta1", "adam_beta1 must be in [0, 1)");
    if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ConfigError("adam_beta2", "adam_beta2 must be in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps", "adam_eps must be positive");
    if (batches < 1) throw ConfigError("batches", "batches must be >= 1");
    if (sgd_iters > iterations) throw ConfigError("sgd_iters", "sgd_iters exceeds iterations");
    if (alpha1_warmup > iterations)
        throw ConfigError("alpha1_warmup", "alpha1_warmup exceeds iterations");
    if (topo_only_iters + angle_only_iters > iterations)
        throw ConfigError("topo_only_iters",
                          "topo_only_iters + angle_only_iters exceeds iterations");
}

void ProblemDomain::validate() const {
    if (nelx < 1) throw ConfigError("nelx", "nelx must be >= 1");
    if (nely < 1) throw ConfigError("nely", "nely must be >= 1");
    if (nelz < 1) throw ConfigError("nelz", "nelz must be >= 1");
    material.validate();
    if (!(vol_frac > 0.0 && vol_frac < 1.0)) throw ConfigError("vol_frac", "vol_frac must be in (0, 1)");
    if (n_segs < 1 || n_segs > 16) throw ConfigError("segments", "segments must be in [1, 16]");
    if (!(critical_angle_deg > 0.0 && critical_angle_deg < 90.0))
        throw ConfigError("critical_angle", "critical_angle must be in (0, 90) degrees");
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("beta", "beta must be positive");
    if (!std::isfinite(init_rx_deg)) throw ConfigError("init_rx", "init_rx must be finite");
    if (!std::isfinite(init_rz_deg)) throw ConfigError("init_rz", "init_rz must be finite");
    if (network.features_per_axis < 1 || network.features_per_axis > 32)
        throw ConfigError("features_per_axis", "features_per_axis must be in [1, 32]");
    {
        const auto& g = network.feature_grid;
        const bool none = g[0] == 0 && g[1] == 0 && g[2] == 0;
        const bool ok = g[0] >= 1 && g[1] >= 1 && g[2] >= 1 && g[0] <= 32 && g[1] <= 32 && g[2] <= 32;
        if (!none && !ok) throw ConfigError("feature_grid", "feature_grid entries must be in [1, 32]");
    }
    if (!(network.f_max > 0.0) || !std::isfinite(network.f_max))
        throw ConfigError("f_max", "f_max must be positive");
    if (!(network.seg_f_max > 0.0) || !std::isfinite(network.seg_f_max))
        throw ConfigError("seg_f_max", "seg_f_max must be positive");
    if (!(solver.tol > 0.0 && solver.tol < 1.0)) throw ConfigError("tol", "tol must be in (0, 1)");
    if (solver.max_iter < 0) throw ConfigError("max_iter", "max_iter must be >= 0");
    schedule.validate();
    if (schedule.batches > nely)
        throw ConfigError("batches", "batches cannot exceed the number of element rows in y");

    if (loads.empty()) throw ConfigError("load", "no load case: at least one [[load]] is required");
    if (fixed.empty()) throw ConfigError("fixed", "at least one [[fixed]] support is required");
    for (const auto& l : loads) {
        check_box(l.region, "load");
        if (!std::isfinite(l.force[0]) || !std::isfinite(l.force[1]) || !std::isfinite(l.force[2]))
            throw ConfigError("force", "load force must be finite");
        if (l.force == Vec3{0.0, 0.0, 0.0}) throw ConfigError("force", "load force is zero");
        bool any = false;
        for_nodes(nelx, nely, nelz, l.region, [&](int, int, int) { any = true; });
        if (!any) throw ConfigError("load", "load region contains no mesh nodes");
    }
    for (const auto& f : fixed) {
        check_box(f.region, "fixed");
        if (!f.dofs[0] && !f.dofs[1] && !f.dofs[2])
            throw ConfigError("dofs", "fixed support constrains no direction");
        bool any = false;
        for_nodes(nelx, nely, nelz, f.region, [&](int, int, int) { any = true; });
        if (!any) throw ConfigError("fixed", "fixed region contains no mesh nodes");
    }
    for (const auto& p : passive) check_box(p, "passive");

    const auto bc = boundary_conditions();
    for (std::size_t d = 0; d < bc.fixed.size(); ++d)
        if (bc.fixed[d] && bc.force[d] != 0.0)
            throw ConfigError("load", "load region overlaps a fixed support (dof " +
                                          std::to_string(d) + ")");
    try {
        fea::check_rigid_body_constraints(mesh(), bc);
    } catch (const StructuralError& e) {
        throw ConfigError("fixed", e.what());
    }
}

double ProblemDomain::element_size() const { return 1.0 / std::max({nelx, nely, nelz}); }

Vec3 ProblemDomain::extents() const {
    const double h = element_size();
    return {nelx * h, nely * h, nelz * h};
}

double ProblemDomain::char_area() const { return am::characteristic_area(extents()); }

fea::Mesh ProblemDomain::mesh(int m) const {
    return {nelx * m, nely * m, nelz * m, element_size() / m};
}

fea::BoundaryConditions ProblemDomain::boundary_conditions(int m) const {
    const fea::Mesh msh = mesh(m);
    const auto g = msh.grid();
    auto bc = fea::BoundaryConditions::empty(msh);
    for (const auto& f : fixed)
        for_nodes(g.nx, g.ny, g.nz, f.region, [&](int i, int j, int k) {
            for (int d = 0; d < 3; ++d)
                if (f.dofs[d]) bc.fixed[3 * g.node(i, j, k) + d] = 1;
        });
    for (const auto& l : loads) {
        std::vector<std::size_t> nodes;
        for_nodes(g.nx, g.ny, g.nz, l.region, [&](int i, int j, int k) { nodes.push_back(g.node(i, j, k)); });
        for (std::size_t n : nodes)
            for (int d = 0; d < 3; ++d) bc.force[3 * n + d] += l.force[d] / nodes.size();
    }
    return bc;
}

fea::SolverOptions ProblemDomain::solver_options() const {
    fea::SolverOptions o;
    o.tol = solver.tol;
    o.max_iter = solver.max_iter;
    o.preconditioner = solver.multigrid ? fea::Preconditioner::multigrid : fea::Preconditioner::jacobi;
    return o;
}

fields::FieldInit ProblemDomain::field_init() const {
    fields::FieldInit init;
    init.features_per_axis = network.features_per_axis;
    init.feature_grid = network.feature_grid;
    init.f_max = network.f_max;
    init.seg_f_max = network.seg_f_max;
    init.random_phase = network.random_phase;
    init.vol_frac = vol_frac;
    init.seed = seed;
    return init;
}

std::vector<Vec3> ProblemDomain::sample_grid(int m) const {
    if (m < 1) throw InvalidInput("upsampling multiplier must be >= 1");
    const double count = double(nelx) * nely * nelz * double(m) * m * m;
    if (count > 1e8)
        throw ResourceError("sampling grid of " + std::to_string(static_cast<long long>(count)) +
                            " points exceeds the 1e8 limit");
    const int mx = nelx * m, my = nely * m, mz = nelz * m;
    const double h = element_size();
    std::vector<Vec3> pts;
    pts.reserve(static_cast<std::size_t>(count));
    for (int k = 0; k < mz; ++k)
        for (int j = 0; j < my; ++j)
            for (int i = 0; i < mx; ++i)
                pts.push_back({centre(i, mx, m, h), centre(j, my, m, h), centre(k, mz, m, h)});
    return pts;
}

std::vector<unsigned char> ProblemDomain::passive_mask(int m) const {
    const int mx = nelx * m, my = nely * m, mz = nelz * m;
    std::vector<unsigned char> mask(std::size_t(mx) * my * mz, 0);
    if (passive.empty()) return mask;
    std::size_t e = 0;
    for (int k = 0; k < mz; ++k)
        for (int j = 0; j < my; ++j)
            for (int i = 0; i < mx; ++i, ++e) {
                const Vec3 f{(i + 0.5) / mx, (j + 0.5) / my, (k + 0.5) / mz};
                for (const Box& b : passive)
                    if (inside(b, f)) mask[e] = 1;
            }
    return mask;
}

std::vector<Vec3> ProblemDomain::passive_points(int m) const {
    const auto mask = passive_mask(m);
    if (passive.empty()) return {};
    const auto pts = sample_grid(m);
    std::vector<Vec3> out;
    for (std::size_t e = 0; e < pts.size(); ++e)
        if (mask[e]) out.push_back(pts[e]);
    return out;
}

Vec3 mirror_point(const Vec3& x, Mirror m) {
    Vec3 r = x;
    if (m != Mirror::none) r[static_cast<int>(m) - 1] = -r[static_cast<int>(m) - 1];
    return r;
}

Vec3 mirror_vector(const Vec3& v, Mirror m) { return mirror_point(v, m); }

const char* to_string(Mirror m) {
    switch (m) {
        case Mirror::x: return "x";
        case Mirror::y: return "y";
        case Mirror::z: return "z";
        default: return "none";
    }
}

}  // namespace segtopo
