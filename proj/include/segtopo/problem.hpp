#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "segtopo/common.hpp"
#include "segtopo/fea.hpp"
#include "segtopo/fields.hpp"

namespace segtopo {

// Axis-aligned region in fractional domain coordinates, each axis in [0, 1].
struct Box {
    Vec3 lo{0.0, 0.0, 0.0};
    Vec3 hi{1.0, 1.0, 1.0};

    bool operator==(const Box&) const = default;
};

// Total force spread evenly over the mesh nodes inside the region.
struct LoadSpec {
    Box region;
    Vec3 force{0.0, 0.0, 0.0};

    bool operator==(const LoadSpec&) const = default;
};

struct FixedSpec {
    Box region;
    std::array<bool, 3> dofs{true, true, true};

    bool operator==(const FixedSpec&) const = default;
};

enum class Mirror { none, x, y, z };

struct Schedule {
    int iterations = 300;
    int sgd_iters = 100;
    int topo_only_iters = 150;
    int angle_only_iters = 100;
    int alpha1_warmup = 0;
    int alpha1_ramp = 200;
    double alpha1_max = 100.0;
    int alpha2_ramp = 100;
    double alpha2_max = 1.0;

    double sgd_lr = 0.01;
    double adam_lr = 5e-3;
    double angle_sgd_lr = 0.02;
    double angle_adam_lr = 0.02;
    double seg_sgd_lr = 0.01;
    double seg_adam_lr = 2e-3;
    double simp_sgd_lr = 200.0;
    double simp_adam_lr = 0.05;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    int batches = 1;

    bool operator==(const Schedule&) const = default;
    void validate() const;
};

struct NetworkConfig {
    int features_per_axis = 8;
    std::array<int, 3> feature_grid{0, 0, 0};  // per-axis counts; zeros use features_per_axis
    double f_max = 30.0;
    double seg_f_max = 10.0;
    bool random_phase = true;

    bool operator==(const NetworkConfig&) const = default;
};

struct SolverConfig {
    double tol = 1e-6;
    long max_iter = 0;
    bool multigrid = true;

    bool operator==(const SolverConfig&) const = default;
};

struct ProblemDomain {
    std::string name = "problem";
    int nelx = 1, nely = 1, nelz = 1;
    fea::Material material;
    std::vector<LoadSpec> loads;
    std::vector<FixedSpec> fixed;
    std::vector<Box> passive;
    Mirror mirror = Mirror::none;
    double vol_frac = 0.3;
    int n_segs = 1;
    double critical_angle_deg = 45.0;
    double beta = 10.0;
    bool height_penalty = true;
    double init_rx_deg = 0.0;
    double init_rz_deg = 0.0;
    NetworkConfig network;
    Schedule schedule;
    SolverConfig solver;
    std::uint64_t seed = 0;

    bool operator==(const ProblemDomain&) const = default;

    // Throws ConfigError naming the offending key.
    void validate() const;

    // Edge length of one element; the longest domain edge has length 1.
    double element_size() const;
    Vec3 extents() const;
    double char_area() const;

    fea::Mesh mesh(int multiplier = 1) const;
    fea::BoundaryConditions boundary_conditions(int multiplier = 1) const;
    fea::SolverOptions solver_options() const;
    fields::FieldInit field_init() const;

    // Element-centre coordinates on a grid refined `multiplier` times per axis,
    // x fastest. Throws ResourceError above 1e8 points.
    std::vector<Vec3> sample_grid(int multiplier = 1) const;
    // Element-centre coordinates inside the passive boxes.
    std::vector<Vec3> passive_points(int multiplier = 1) const;
    std::vector<unsigned char> passive_mask(int multiplier = 1) const;
};

// Reflection of a point through the mirror plane (coordinate negated).
Vec3 mirror_point(const Vec3& x, Mirror m);
// Reflection of a gradient vector.
Vec3 mirror_vector(const Vec3& v, Mirror m);

const char* to_string(Mirror m);

}  // namespace segtopo
