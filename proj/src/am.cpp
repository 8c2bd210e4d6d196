#include "segtopo/am.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "segtopo/kernels.hpp"

namespace segtopo::am {

namespace {

// Sums f(i) over [0, n) in fixed blocks combined in block order.
template <int N, class F>
std::array<double, N> block_sum(std::size_t n, F&& f) {
    const std::size_t nb = (n + kernels::kBlock - 1) / kernels::kBlock;
    std::vector<std::array<double, N>> part(nb);
    const long nbl = static_cast<long>(nb);
#pragma omp parallel for schedule(static)
    for (long blk = 0; blk < nbl; ++blk) {
        std::array<double, N> acc{};
        const std::size_t end = std::min(n, (blk + 1) * kernels::kBlock);
        for (std::size_t i = blk * kernels::kBlock; i < end; ++i) f(i, acc);
        part[blk] = acc;
    }
    std::array<double, N> total{};
    for (const auto& p : part)
        for (int k = 0; k < N; ++k) total[k] += p[k];
    return total;
}

struct PointTerm {
    double w;    // smooth overhang indicator
    double d;    // b . grad; points with d <= 0 face away and contribute nothing
    double q;    // regularized gradient norm
    double dh;   // derivative of the indicator with respect to its argument
};

inline PointTerm point_term(const Vec3& v, const Vec3& b, const OverhangParams& p, double cos_a) {
    PointTerm t;
    t.q = std::sqrt(dot(v, v) + p.eps * p.eps);
    t.d = dot(b, v);
    t.w = smooth_heaviside(t.d / t.q - cos_a, p.beta);
    t.dh = 2.0 * p.beta * t.w * (1.0 - t.w);
    return t;
}

void check_sizes(std::size_t a, std::size_t b, const char* what) {
    if (a != b) throw InvalidInput(std::string(what) + ": array sizes do not match");
}

std::vector<Vec3> column(const std::vector<Vec3>& v, std::size_t n, int ns, int s) {
    std::vector<Vec3> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = v[i * ns + s];
    return out;
}

}  // namespace

void OverhangParams::validate() const {
    if (!(critical_angle > 0.0 && critical_angle < std::numbers::pi / 2))
        throw ConfigError("critical_angle", "critical angle must be in (0, 90) degrees");
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("beta", "beta must be positive");
    if (!(char_area > 0.0) || !std::isfinite(char_area))
        throw ConfigError("char_area", "characteristic area must be positive");
    if (!(eps > 0.0)) throw ConfigError("eps", "gradient regularization must be positive");
}

BuildDirection build_vector(double rx, double rz) {
    const double sx = std::sin(rx), cx = std::cos(rx);
    const double sz = std::sin(rz), cz = std::cos(rz);
    return {{sz, cx * cz, sx * cz}, {0.0, -sx * cz, cx * cz}, {cz, -cx * sz, -sx * sz}};
}

double smooth_heaviside(double xi, double beta) { return sigmoid(2.0 * beta * xi); }

double density_heaviside(double rho, double beta) { return sigmoid(2.0 * beta * (rho - 0.5)); }

double characteristic_area(const Vec3& e) {
    std::array<double, 3> s{e[0], e[1], e[2]};
    std::sort(s.begin(), s.end());
    return s[1] * s[2];
}

LowestSolid lowest_solid_height(std::span<const double> heights,
                                std::span<const double> rho_tilde) {
    check_sizes(heights.size(), rho_tilde.size(), "lowest_solid_height");
    double m = 0.0, peak = 0.0;
    for (std::size_t i = 0; i < heights.size(); ++i) {
        m = std::min(m, (heights[i] - 1.0) * rho_tilde[i]);
        peak = std::max(peak, rho_tilde[i]);
    }
    return {m + 1.0, peak < 0.5};
}

std::vector<double> overhang_weights(std::span<const Vec3> grads, const Vec3& b,
                                     const OverhangParams& params) {
    const double cos_a = std::cos(params.critical_angle);
    std::vector<double> w(grads.size());
    for (std::size_t i = 0; i < grads.size(); ++i) w[i] = point_term(grads[i], b, params, cos_a).w;
    return w;
}

double overhang_area(std::span<const Vec3> grads, const Vec3& b, const OverhangParams& params,
                     double cell_volume) {
    params.validate();
    const double cos_a = std::cos(params.critical_angle);
    const auto s = block_sum<1>(grads.size(), [&](std::size_t i, std::array<double, 1>& acc) {
        const PointTerm t = point_term(grads[i], b, params, cos_a);
        if (t.d > 0.0) acc[0] += t.w * t.d;
    });
    return s[0] * (cell_volume / params.char_area);
}

double height_penalized_overhang(std::span<const Vec3> points, std::span<const Vec3> grads,
                                 const Vec3& b, const OverhangParams& params, double x_lowest,
                                 double cell_volume) {
    params.validate();
    check_sizes(points.size(), grads.size(), "height_penalized_overhang");
    const double cos_a = std::cos(params.critical_angle);
    const auto s = block_sum<1>(grads.size(), [&](std::size_t i, std::array<double, 1>& acc) {
        const PointTerm t = point_term(grads[i], b, params, cos_a);
        if (t.d > 0.0) acc[0] += t.w * t.d * std::max(dot(b, points[i]) - x_lowest, 0.0);
    });
    return s[0] * (cell_volume / params.char_area);
}

std::vector<LowestSolid> segment_lowest(const fields::SampleBatch& batch,
                                        const fields::AngleNet& angles,
                                        const OverhangParams& params) {
    const std::size_t n = batch.size();
    const int ns = batch.n_segs;
    if (angles.n_segs() != ns) throw InvalidInput("angle count does not match the segment count");
    std::vector<LowestSolid> out(ns);
    std::vector<double> h(n), rt(n);
    for (int s = 0; s < ns; ++s) {
        const Vec3 b = build_vector(angles.angles[s].first, angles.angles[s].second).b;
        for (std::size_t i = 0; i < n; ++i) {
            h[i] = dot(b, batch.points[i]);
            rt[i] = density_heaviside(batch.per_segment_density[i * ns + s], params.beta);
        }
        out[s] = lowest_solid_height(h, rt);
    }
    return out;
}

OverhangReport segmented_overhang(const fields::SampleBatch& batch, const fields::AngleNet& angles,
                                  const OverhangParams& params, double cell_volume,
                                  std::span<const LowestSolid> lowest) {
    params.validate();
    const std::size_t n = batch.size();
    const int ns = batch.n_segs;
    if (angles.n_segs() != ns) throw InvalidInput("angle count does not match the segment count");
    std::vector<LowestSolid> own;
    if (lowest.empty()) {
        own = segment_lowest(batch, angles, params);
        lowest = own;
    }
    check_sizes(lowest.size(), static_cast<std::size_t>(ns), "segmented_overhang");
    OverhangReport rep;
    rep.segments.resize(ns);
    for (int s = 0; s < ns; ++s) {
        const Vec3 b = build_vector(angles.angles[s].first, angles.angles[s].second).b;
        const std::vector<Vec3> g = column(batch.per_segment_grad, n, ns, s);
        SegmentReport& r = rep.segments[s];
        r.x_lowest = lowest[s].height;
        r.degenerate = lowest[s].degenerate;
        r.P = overhang_area(g, b, params, cell_volume);
        r.H = height_penalized_overhang(batch.points, g, b, params, r.x_lowest, cell_volume);
        rep.P += r.P;
        rep.H += r.H;
    }
    return rep;
}

MetricGradient segmented_overhang_grad(const fields::SampleBatch& batch,
                                       const fields::AngleNet& angles,
                                       const OverhangParams& params, double cell_volume,
                                       bool height_penalty, std::span<const LowestSolid> lowest) {
    params.validate();
    const std::size_t n = batch.size();
    const int ns = batch.n_segs;
    if (angles.n_segs() != ns) throw InvalidInput("angle count does not match the segment count");
    check_sizes(lowest.size(), static_cast<std::size_t>(ns), "segmented_overhang_grad");
    const double cos_a = std::cos(params.critical_angle);
    const double scale = cell_volume / params.char_area;
    MetricGradient out;
    out.d_grad.assign(n * ns, Vec3{0.0, 0.0, 0.0});
    out.d_angles.assign(ns, {0.0, 0.0});
    for (int s = 0; s < ns; ++s) {
        const BuildDirection bd = build_vector(angles.angles[s].first, angles.angles[s].second);
        const Vec3& b = bd.b;
        const double x_low = lowest[s].height;
        // acc: value, dL/db (3)
        const auto sums = block_sum<4>(n, [&](std::size_t i, std::array<double, 4>& acc) {
            const Vec3& v = batch.per_segment_grad[i * ns + s];
            const Vec3& X = batch.points[i];
            const PointTerm t = point_term(v, b, params, cos_a);
            if (t.d <= 0.0) return;  // facing away from the build direction
            const double lift = dot(b, X) - x_low;
            const double phi = height_penalty ? std::max(lift, 0.0) : 1.0;
            acc[0] += t.w * t.d * phi;
            const double q3 = t.q * t.q * t.q;
            const double c1 = t.d * t.dh;
            Vec3& dv = out.d_grad[i * ns + s];
            for (int k = 0; k < 3; ++k) {
                dv[k] = scale * phi * (t.w * b[k] + c1 * (b[k] / t.q - t.d * v[k] / q3));
                double db = phi * (t.w * v[k] + c1 * v[k] / t.q);
                if (height_penalty && lift > 0.0) db += t.w * t.d * X[k];
                acc[1 + k] += db;
            }
        });
        out.value += scale * sums[0];
        const Vec3 db{scale * sums[1], scale * sums[2], scale * sums[3]};
        out.d_angles[s] = {dot(db, bd.d_rx), dot(db, bd.d_rz)};
    }
    return out;
}

}  // namespace segtopo::am
