#pragma once

#include <numbers>
#include <span>
#include <vector>

#include "segtopo/common.hpp"
#include "segtopo/fields.hpp"

namespace segtopo::am {

struct OverhangParams {
    double critical_angle = std::numbers::pi / 4.0;  // radians
    double beta = 10.0;
    double char_area = 1.0;
    double eps = 1e-8;

    void validate() const;
};

// b = (sin Rz, cos Rx cos Rz, sin Rx cos Rz) and its partial derivatives.
struct BuildDirection {
    Vec3 b;
    Vec3 d_rx;
    Vec3 d_rz;
};

BuildDirection build_vector(double rx, double rz);

double smooth_heaviside(double xi, double beta);
double density_heaviside(double rho, double beta);

// Product of the two largest edge lengths.
double characteristic_area(const Vec3& extents);

struct LowestSolid {
    double height = 1.0;
    bool degenerate = false;
};

// min((h - 1) * rho_tilde) + 1. Degenerate when no point has rho_tilde >= 0.5.
LowestSolid lowest_solid_height(std::span<const double> heights, std::span<const double> rho_tilde);

double overhang_area(std::span<const Vec3> grads, const Vec3& b, const OverhangParams& params,
                     double cell_volume);

double height_penalized_overhang(std::span<const Vec3> points, std::span<const Vec3> grads,
                                 const Vec3& b, const OverhangParams& params, double x_lowest,
                                 double cell_volume);

// Per-point smooth overhang indicator H(b.n - cos(alpha)).
std::vector<double> overhang_weights(std::span<const Vec3> grads, const Vec3& b,
                                     const OverhangParams& params);

struct SegmentReport {
    double P = 0.0;
    double H = 0.0;
    double x_lowest = 1.0;
    bool degenerate = false;
};

struct OverhangReport {
    double P = 0.0;
    double H = 0.0;
    std::vector<SegmentReport> segments;
};

// Lowest-solid heights of every segment along its own rotated build axis.
std::vector<LowestSolid> segment_lowest(const fields::SampleBatch& batch,
                                        const fields::AngleNet& angles,
                                        const OverhangParams& params);

// Sum over segments of P and H, each segment in its own build frame.
// `lowest` overrides the per-segment lowest-solid heights when non-empty.
OverhangReport segmented_overhang(const fields::SampleBatch& batch, const fields::AngleNet& angles,
                                  const OverhangParams& params, double cell_volume,
                                  std::span<const LowestSolid> lowest = {});

struct MetricGradient {
    double value = 0.0;
    std::vector<Vec3> d_grad;  // point-major, n * n_segs
    std::vector<std::pair<double, double>> d_angles;
};

// Gradient of sum_s H_s (or sum_s P_s when height_penalty is false) with
// respect to the per-segment spatial gradients and the angles, lowest-solid
// heights held fixed.
MetricGradient segmented_overhang_grad(const fields::SampleBatch& batch,
                                       const fields::AngleNet& angles,
                                       const OverhangParams& params, double cell_volume,
                                       bool height_penalty, std::span<const LowestSolid> lowest);

}  // namespace segtopo::am
