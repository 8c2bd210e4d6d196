#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "segtopo/common.hpp"

namespace segtopo::fields {

// cos(X K + b) feature layer shared by the topology and segmentation networks.
// kernels are stored feature-major: kernels[3*f + d] is component d of K_f.
struct FourierLayer {
    std::vector<double> kernels;
    std::vector<double> bias;

    int n_features() const { return static_cast<int>(bias.size()); }
};

// T(X) = sigmoid(cos(X K + b_kernel) W + b_dense)
struct TopoNet {
    FourierLayer layer;
    std::vector<double> weights;
    double bias = 0.0;

    int n_features() const { return layer.n_features(); }
};

// S(X) = softmax(cos(X K + b_kernel) W + b_dense), one output per segment.
// weights[f * n_segs + s].
struct SegNet {
    FourierLayer layer;
    std::vector<double> weights;
    std::vector<double> bias;
    int n_segs = 1;

    int n_features() const { return layer.n_features(); }
};

// Print angles per segment, (R_x, R_z) in radians.
struct AngleNet {
    std::vector<std::pair<double, double>> angles;

    int n_segs() const { return static_cast<int>(angles.size()); }
};

struct FieldParams {
    TopoNet topo;
    SegNet seg;
    AngleNet angles;
};

struct TopoGrad {
    std::vector<double> kernels;
    std::vector<double> kernel_bias;
    std::vector<double> weights;
    double bias = 0.0;
};

struct SegGrad {
    std::vector<double> kernels;
    std::vector<double> kernel_bias;
    std::vector<double> weights;
    std::vector<double> bias;
};

struct FieldGrads {
    TopoGrad topo;
    SegGrad seg;
    std::vector<std::pair<double, double>> angles;
};

// Densities and spatial gradients at a set of sample points.
// Per-segment arrays are point-major: [i * n_segs + s].
struct SampleBatch {
    std::vector<Vec3> points;
    std::vector<double> density;
    std::vector<Vec3> spatial_grad;
    std::vector<double> seg_weights;
    std::vector<Vec3> seg_grad;
    std::vector<double> per_segment_density;
    std::vector<Vec3> per_segment_grad;
    int n_segs = 1;

    std::size_t size() const { return points.size(); }
};

struct FieldInit {
    int features_per_axis = 8;
    std::array<int, 3> feature_grid{0, 0, 0};  // overrides features_per_axis when all set
    double f_max = 30.0;
    double seg_f_max = 10.0;
    bool random_phase = true;
    double vol_frac = 0.3;
    std::uint64_t seed = 0;
};

// Frequencies on a linear grid spanning [-f_max, f_max]^3.
FourierLayer make_grid_layer(const FieldInit& init);
TopoNet make_topo_net(const FieldInit& init);
SegNet make_seg_net(const FieldInit& init, int n_segs);
AngleNet make_angle_net(int n_segs, double rx = 0.0, double rz = 0.0);

// Shifts the dense bias so the mean density over `points` equals target.
void calibrate_mean_density(TopoNet& net, std::span<const Vec3> points, double target);

std::vector<double> topo_forward(const TopoNet& net, std::span<const Vec3> points);
std::vector<Vec3> topo_spatial_grad(const TopoNet& net, std::span<const Vec3> points);
// Rows of n_segs weights per point.
std::vector<double> seg_forward(const SegNet& net, std::span<const Vec3> points);
std::vector<Vec3> seg_spatial_grad(const SegNet& net, std::span<const Vec3> points);

// Product-rule assembly of per-segment fields rho_s = T * S_s.
SampleBatch combine(std::span<const Vec3> points, std::span<const double> topo,
                    std::span<const Vec3> topo_grad, std::span<const double> seg,
                    std::span<const Vec3> seg_grad, int n_segs);

// Forward pass of both networks with spatial gradients, combined.
SampleBatch evaluate(const FieldParams& params, std::span<const Vec3> points);

// Upstream derivatives of a scalar loss with respect to the per-segment
// densities and their spatial gradients (both point-major, n * n_segs).
struct Upstream {
    std::vector<double> d_density;
    std::vector<Vec3> d_grad;
};

// Chain rule from per-segment upstream into every network parameter.
// Angles receive zero (they do not influence the density field).
FieldGrads backprop_params(const FieldParams& params, std::span<const Vec3> points,
                           const Upstream& upstream);

// Lower-level entry points used by the optimizer for symmetric and passive paths.
void topo_backprop(const TopoNet& net, std::span<const Vec3> points,
                   std::span<const double> d_rho, std::span<const Vec3> d_grad, TopoGrad& out);
void seg_backprop(const SegNet& net, std::span<const Vec3> points,
                  std::span<const double> d_weights, std::span<const Vec3> d_grad, SegGrad& out);

// Splits per-segment upstream into upstream on T, grad T, S and grad S.
struct SplitUpstream {
    std::vector<double> d_topo;
    std::vector<Vec3> d_topo_grad;
    std::vector<double> d_seg;
    std::vector<Vec3> d_seg_grad;
};
SplitUpstream split_upstream(const SampleBatch& batch, const Upstream& upstream);

FieldGrads zero_grads(const FieldParams& params);
void add_into(FieldGrads& acc, const FieldGrads& g);

// Farthest-point sampling over candidate points, starting from the point
// closest to the centroid.
std::vector<Vec3> farthest_point_seeds(std::span<const Vec3> candidates, int n_seeds);

// Fits the segmentation logits to a clamped inverse-distance field of the
// seeds by ridge-regularized least squares over the sample points.
void seg_pretrain_inverse_distance(SegNet& net, std::span<const Vec3> points,
                                   std::span<const Vec3> seeds, double min_distance);

void validate(const TopoNet& net);
void validate(const SegNet& net);
void validate_points(std::span<const Vec3> points);

}  // namespace segtopo::fields
