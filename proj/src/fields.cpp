#include "segtopo/fields.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>

#include "segtopo/kernels.hpp"

namespace segtopo::fields {

namespace {

void check(bool ok, const std::string& what) {
    if (!ok) throw InvalidInput(what);
}

}  // namespace

FourierLayer make_grid_layer(const FieldInit& init) {
    std::array<int, 3> n{init.features_per_axis, init.features_per_axis, init.features_per_axis};
    if (init.feature_grid[0] > 0 && init.feature_grid[1] > 0 && init.feature_grid[2] > 0)
        n = init.feature_grid;
    if (n[0] < 1 || n[1] < 1 || n[2] < 1)
        throw ConfigError("features_per_axis", "features_per_axis must be >= 1");
    if (!(init.f_max > 0.0) || !std::isfinite(init.f_max))
        throw ConfigError("f_max", "f_max must be positive and finite");
    auto axis = [&](int m, int i) {
        return m > 1 ? -init.f_max + 2.0 * init.f_max * i / (m - 1) : 0.0;
    };

    FourierLayer layer;
    const int nf = n[0] * n[1] * n[2];
    layer.kernels.resize(3 * std::size_t(nf));
    layer.bias.assign(nf, 0.0);
    int f = 0;
    for (int k = 0; k < n[2]; ++k)
        for (int j = 0; j < n[1]; ++j)
            for (int i = 0; i < n[0]; ++i, ++f) {
                layer.kernels[3 * f] = axis(n[0], i);
                layer.kernels[3 * f + 1] = axis(n[1], j);
                layer.kernels[3 * f + 2] = axis(n[2], k);
            }
    if (init.random_phase) {
        std::mt19937_64 rng(init.seed);
        std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
        for (double& b : layer.bias) b = phase(rng);
    }
    return layer;
}

TopoNet make_topo_net(const FieldInit& init) {
    if (!(init.vol_frac > 0.0 && init.vol_frac < 1.0))
        throw ConfigError("vol_frac", "vol_frac must be in (0, 1)");
    TopoNet net;
    net.layer = make_grid_layer(init);
    const int nf = net.n_features();
    std::mt19937_64 rng(init.seed ^ 0x9e3779b97f4a7c15ULL);
    const double a = 1.0 / std::sqrt(static_cast<double>(nf));
    std::uniform_real_distribution<double> uni(-a, a);
    net.weights.resize(nf);
    for (double& w : net.weights) w = uni(rng);
    net.bias = std::log(init.vol_frac / (1.0 - init.vol_frac));
    return net;
}

SegNet make_seg_net(const FieldInit& init, int n_segs) {
    if (n_segs < 1 || n_segs > 16) throw ConfigError("segments", "segments must be in [1, 16]");
    FieldInit seg_init = init;
    seg_init.seed = init.seed + 0x5bd1e995ULL;
    seg_init.f_max = init.seg_f_max;
    SegNet net;
    net.layer = make_grid_layer(seg_init);
    net.n_segs = n_segs;
    net.weights.assign(std::size_t(net.n_features()) * n_segs, 0.0);
    net.bias.assign(n_segs, 0.0);
    return net;
}

AngleNet make_angle_net(int n_segs, double rx, double rz) {
    AngleNet net;
    net.angles.assign(n_segs, {rx, rz});
    return net;
}

void calibrate_mean_density(TopoNet& net, std::span<const Vec3> points, double target) {
    if (points.empty()) return;
    const TopoNet base = net;
    // Logits are shifted uniformly; Newton on the shift.
    std::vector<double> rho(points.size());
    for (int it = 0; it < 50; ++it) {
        kernels::omp::topo_eval(net, points, rho, {});
        double mean = 0.0, slope = 0.0;
        for (double r : rho) {
            mean += r;
            slope += r * (1.0 - r);
        }
        mean /= rho.size();
        slope /= rho.size();
        const double err = mean - target;
        if (std::abs(err) < 1e-12 || slope <= 0.0) break;
        net.bias -= err / slope;
    }
    if (!std::isfinite(net.bias)) net = base;
}

void validate_points(std::span<const Vec3> points) {
    for (const Vec3& p : points)
        check(std::isfinite(p[0]) && std::isfinite(p[1]) && std::isfinite(p[2]),
              "non-finite sample coordinate");
}

void validate(const TopoNet& net) {
    const std::size_t nf = net.layer.bias.size();
    check(nf > 0, "topology network has no features");
    check(net.layer.kernels.size() == 3 * nf && net.weights.size() == nf,
          "topology network shape mismatch");
    check(all_finite(net.layer.kernels) && all_finite(net.layer.bias) && all_finite(net.weights) &&
              std::isfinite(net.bias),
          "non-finite topology network parameter");
}

void validate(const SegNet& net) {
    const std::size_t nf = net.layer.bias.size();
    check(nf > 0, "segmentation network has no features");
    check(net.n_segs >= 1 && net.n_segs <= 16, "segment count out of range");
    check(net.layer.kernels.size() == 3 * nf && net.weights.size() == nf * net.n_segs &&
              net.bias.size() == std::size_t(net.n_segs),
          "segmentation network shape mismatch");
    check(all_finite(net.layer.kernels) && all_finite(net.layer.bias) && all_finite(net.weights) &&
              all_finite(net.bias),
          "non-finite segmentation network parameter");
}

std::vector<double> topo_forward(const TopoNet& net, std::span<const Vec3> points) {
    validate(net);
    validate_points(points);
    std::vector<double> rho(points.size());
    kernels::omp::topo_eval(net, points, rho, {});
    return rho;
}

std::vector<Vec3> topo_spatial_grad(const TopoNet& net, std::span<const Vec3> points) {
    validate(net);
    validate_points(points);
    std::vector<double> rho(points.size());
    std::vector<Vec3> grad(points.size());
    kernels::omp::topo_eval(net, points, rho, grad);
    return grad;
}

std::vector<double> seg_forward(const SegNet& net, std::span<const Vec3> points) {
    validate(net);
    validate_points(points);
    std::vector<double> w(points.size() * net.n_segs);
    kernels::omp::seg_eval(net, points, w, {});
    return w;
}

std::vector<Vec3> seg_spatial_grad(const SegNet& net, std::span<const Vec3> points) {
    validate(net);
    validate_points(points);
    std::vector<double> w(points.size() * net.n_segs);
    std::vector<Vec3> grad(points.size() * net.n_segs);
    kernels::omp::seg_eval(net, points, w, grad);
    return grad;
}

SampleBatch combine(std::span<const Vec3> points, std::span<const double> topo,
                    std::span<const Vec3> topo_grad, std::span<const double> seg,
                    std::span<const Vec3> seg_grad, int n_segs) {
    const std::size_t n = points.size();
    check(n_segs >= 1, "n_segs must be >= 1");
    check(topo.size() == n && topo_grad.size() == n && seg.size() == n * n_segs &&
              seg_grad.size() == n * n_segs,
          "combine: array shapes do not match the point count");
    SampleBatch b;
    b.n_segs = n_segs;
    b.points.assign(points.begin(), points.end());
    b.density.assign(topo.begin(), topo.end());
    b.spatial_grad.assign(topo_grad.begin(), topo_grad.end());
    b.seg_weights.assign(seg.begin(), seg.end());
    b.seg_grad.assign(seg_grad.begin(), seg_grad.end());
    b.per_segment_density.resize(n * n_segs);
    b.per_segment_grad.resize(n * n_segs);
    for (std::size_t i = 0; i < n; ++i) {
        for (int s = 0; s < n_segs; ++s) {
            const std::size_t is = i * n_segs + s;
            b.per_segment_density[is] = topo[i] * seg[is];
            for (int d = 0; d < 3; ++d)
                b.per_segment_grad[is][d] = seg[is] * topo_grad[i][d] + topo[i] * seg_grad[is][d];
        }
    }
    return b;
}

SampleBatch evaluate(const FieldParams& params, std::span<const Vec3> points) {
    validate(params.topo);
    validate_points(points);
    const std::size_t n = points.size();
    const int ns = params.seg.n_segs;
    std::vector<double> rho(n);
    std::vector<Vec3> grad(n);
    kernels::omp::topo_eval(params.topo, points, rho, grad);
    std::vector<double> w(n * ns, 1.0);
    std::vector<Vec3> wg(n * ns, Vec3{0.0, 0.0, 0.0});
    if (ns > 1) {
        validate(params.seg);
        kernels::omp::seg_eval(params.seg, points, w, wg);
    }
    return combine(points, rho, grad, w, wg, ns);
}

SplitUpstream split_upstream(const SampleBatch& batch, const Upstream& up) {
    const std::size_t n = batch.size();
    const int ns = batch.n_segs;
    check(up.d_density.size() == n * ns && up.d_grad.size() == n * ns,
          "upstream arrays do not match the sample batch");
    SplitUpstream out;
    out.d_topo.assign(n, 0.0);
    out.d_topo_grad.assign(n, Vec3{0.0, 0.0, 0.0});
    out.d_seg.assign(n * ns, 0.0);
    out.d_seg_grad.assign(n * ns, Vec3{0.0, 0.0, 0.0});
    for (std::size_t i = 0; i < n; ++i) {
        const double T = batch.density[i];
        const Vec3& gT = batch.spatial_grad[i];
        for (int s = 0; s < ns; ++s) {
            const std::size_t is = i * ns + s;
            const double a = up.d_density[is];
            const Vec3& A = up.d_grad[is];
            const double S = batch.seg_weights[is];
            out.d_topo[i] += a * S + dot(A, batch.seg_grad[is]);
            for (int d = 0; d < 3; ++d) {
                out.d_topo_grad[i][d] += S * A[d];
                out.d_seg_grad[is][d] = T * A[d];
            }
            out.d_seg[is] = a * T + dot(A, gT);
        }
    }
    return out;
}

FieldGrads zero_grads(const FieldParams& p) {
    FieldGrads g;
    g.topo.kernels.assign(p.topo.layer.kernels.size(), 0.0);
    g.topo.kernel_bias.assign(p.topo.layer.bias.size(), 0.0);
    g.topo.weights.assign(p.topo.weights.size(), 0.0);
    g.topo.bias = 0.0;
    g.seg.kernels.assign(p.seg.layer.kernels.size(), 0.0);
    g.seg.kernel_bias.assign(p.seg.layer.bias.size(), 0.0);
    g.seg.weights.assign(p.seg.weights.size(), 0.0);
    g.seg.bias.assign(p.seg.bias.size(), 0.0);
    g.angles.assign(p.angles.angles.size(), {0.0, 0.0});
    return g;
}

namespace {

void add_vec(std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw InvalidInput("gradient shape mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

}  // namespace

void add_into(FieldGrads& acc, const FieldGrads& g) {
    add_vec(acc.topo.kernels, g.topo.kernels);
    add_vec(acc.topo.kernel_bias, g.topo.kernel_bias);
    add_vec(acc.topo.weights, g.topo.weights);
    acc.topo.bias += g.topo.bias;
    add_vec(acc.seg.kernels, g.seg.kernels);
    add_vec(acc.seg.kernel_bias, g.seg.kernel_bias);
    add_vec(acc.seg.weights, g.seg.weights);
    add_vec(acc.seg.bias, g.seg.bias);
    if (acc.angles.size() != g.angles.size()) throw InvalidInput("gradient shape mismatch");
    for (std::size_t s = 0; s < acc.angles.size(); ++s) {
        acc.angles[s].first += g.angles[s].first;
        acc.angles[s].second += g.angles[s].second;
    }
}

void topo_backprop(const TopoNet& net, std::span<const Vec3> points, std::span<const double> d_rho,
                   std::span<const Vec3> d_grad, TopoGrad& out) {
    check(d_rho.size() == points.size() && d_grad.size() == points.size(),
          "topology upstream does not match the point count");
    kernels::omp::topo_backprop(net, points, d_rho, d_grad, out);
}

void seg_backprop(const SegNet& net, std::span<const Vec3> points, std::span<const double> d_weights,
                  std::span<const Vec3> d_grad, SegGrad& out) {
    const std::size_t ns = net.n_segs;
    check(d_weights.size() == points.size() * ns && d_grad.size() == points.size() * ns,
          "segmentation upstream does not match the point count");
    kernels::omp::seg_backprop(net, points, d_weights, d_grad, out);
}

FieldGrads backprop_params(const FieldParams& params, std::span<const Vec3> points,
                           const Upstream& upstream) {
    validate(params.topo);
    validate_points(points);
    const SampleBatch batch = evaluate(params, points);
    const SplitUpstream split = split_upstream(batch, upstream);
    FieldGrads g = zero_grads(params);
    topo_backprop(params.topo, points, split.d_topo, split.d_topo_grad, g.topo);
    if (params.seg.n_segs > 1)
        seg_backprop(params.seg, points, split.d_seg, split.d_seg_grad, g.seg);
    return g;
}

std::vector<Vec3> farthest_point_seeds(std::span<const Vec3> candidates, int n_seeds) {
    if (n_seeds < 1 || static_cast<std::size_t>(n_seeds) > candidates.size())
        throw ConfigError("segments", "cannot place " + std::to_string(n_seeds) +
                                          " segment seeds in " +
                                          std::to_string(candidates.size()) + " design points");
    Vec3 c{0.0, 0.0, 0.0};
    for (const Vec3& p : candidates)
        for (int d = 0; d < 3; ++d) c[d] += p[d] / candidates.size();
    auto dist2 = [](const Vec3& a, const Vec3& b) {
        const Vec3 d{a[0] - b[0], a[1] - b[1], a[2] - b[2]};
        return dot(d, d);
    };
    std::size_t first = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const double d = dist2(candidates[i], c);
        if (d < best) {
            best = d;
            first = i;
        }
    }
    std::vector<Vec3> seeds{candidates[first]};
    std::vector<double> mind(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) mind[i] = dist2(candidates[i], seeds[0]);
    while (static_cast<int>(seeds.size()) < n_seeds) {
        std::size_t arg = 0;
        for (std::size_t i = 1; i < candidates.size(); ++i)
            if (mind[i] > mind[arg]) arg = i;
        if (mind[arg] <= 0.0)
            throw ConfigError("segments", "not enough distinct design points for segment seeds");
        seeds.push_back(candidates[arg]);
        for (std::size_t i = 0; i < candidates.size(); ++i)
            mind[i] = std::min(mind[i], dist2(candidates[i], seeds.back()));
    }
    return seeds;
}

void seg_pretrain_inverse_distance(SegNet& net, std::span<const Vec3> points,
                                   std::span<const Vec3> seeds, double min_distance) {
    validate(net);
    const int ns = net.n_segs;
    if (ns == 1) return;
    if (static_cast<int>(seeds.size()) != ns)
        throw ConfigError("segments", "seed count does not match the segment count");
    if (points.empty()) throw InvalidInput("no sample points for segmentation pretraining");
    const int nf = net.n_features();
    const Eigen::Index n = static_cast<Eigen::Index>(points.size());

    Eigen::MatrixXd phi(n, nf + 1);
    Eigen::MatrixXd target(n, ns);
    const double* K = net.layer.kernels.data();
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vec3& x = points[i];
        for (int f = 0; f < nf; ++f)
            phi(i, f) = std::cos(x[0] * K[3 * f] + x[1] * K[3 * f + 1] + x[2] * K[3 * f + 2] +
                                 net.layer.bias[f]);
        phi(i, nf) = 1.0;
        // log of the inverse-square distance weight, clamped near each seed
        for (int s = 0; s < ns; ++s) {
            const Vec3 d{x[0] - seeds[s][0], x[1] - seeds[s][1], x[2] - seeds[s][2]};
            target(i, s) = -std::log(std::max(dot(d, d), min_distance * min_distance));
        }
    }
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(nf + 1, nf + 1);
    gram.selfadjointView<Eigen::Lower>().rankUpdate(phi.transpose());
    gram = gram.selfadjointView<Eigen::Lower>();
    const double ridge = 1e-8 * gram.diagonal().head(nf).mean();
    for (int f = 0; f < nf; ++f) gram(f, f) += ridge;
    const Eigen::MatrixXd rhs = phi.transpose() * target;
    const Eigen::MatrixXd sol = gram.ldlt().solve(rhs);
    if (!sol.allFinite()) throw NumericalError("segmentation pretraining solve failed");
    for (int f = 0; f < nf; ++f)
        for (int s = 0; s < ns; ++s) net.weights[std::size_t(f) * ns + s] = sol(f, s);
    for (int s = 0; s < ns; ++s) net.bias[s] = sol(nf, s);
}

}  // namespace segtopo::fields
