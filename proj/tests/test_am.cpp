#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>
#include <random>

#include "segtopo/am.hpp"

using namespace segtopo;
using namespace segtopo::am;

namespace {

constexpr double kPi = std::numbers::pi;

// Cell-centred grid over [-ex/2, ex/2] x [-ey/2, ey/2] x [-ez/2, ez/2].
struct Grid {
    std::vector<Vec3> pts;
    double cell = 0.0;
};

Grid make_grid(int nx, int ny, int nz, double h) {
    Grid g;
    g.cell = h * h * h;
    for (int k = 0; k < nz; ++k)
        for (int j = 0; j < ny; ++j)
            for (int i = 0; i < nx; ++i)
                g.pts.push_back({(i + 0.5 - 0.5 * nx) * h, (j + 0.5 - 0.5 * ny) * h, (k + 0.5 - 0.5 * nz) * h});
    return g;
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Field given as density plus analytic gradient.
using Field = std::function<double(const Vec3&, Vec3&)>;

fields::SampleBatch sample(const Grid& g, const Field& f) {
    fields::SampleBatch b;
    b.points = g.pts;
    b.n_segs = 1;
    for (const Vec3& x : g.pts) {
        Vec3 grad;
        const double r = f(x, grad);
        b.density.push_back(r);
        b.spatial_grad.push_back(grad);
        b.seg_weights.push_back(1.0);
        b.seg_grad.push_back({0, 0, 0});
        b.per_segment_density.push_back(r);
        b.per_segment_grad.push_back(grad);
    }
    return b;
}

// Smoothed slab occupying lo < coordinate[axis] < hi, optionally restricted to x > 0.
Field slab(int axis, double lo, double hi, double k, bool half = false) {
    return [=](const Vec3& x, Vec3& g) {
        const double a = logistic(k * (x[axis] - lo));
        const double b = logistic(k * (hi - x[axis]));
        const double c = half ? logistic(k * x[0]) : 1.0;
        g = {0, 0, 0};
        g[axis] += k * a * (1 - a) * b * c;
        g[axis] -= k * b * (1 - b) * a * c;
        if (half) g[0] += a * b * k * c * (1 - c);
        return a * b * c;
    };
}

Field sum(const Field& f1, const Field& f2) {
    return [=](const Vec3& x, Vec3& g) {
        Vec3 g1, g2;
        const double r = f1(x, g1) + f2(x, g2);
        for (int d = 0; d < 3; ++d) g[d] = g1[d] + g2[d];
        return r;
    };
}

}  // namespace

TEST(BuildVector, SpotValues) {
    const auto a = build_vector(0, 0).b;
    EXPECT_EQ(a, (Vec3{0, 1, 0}));
    const auto b = build_vector(kPi / 2, 0).b;
    EXPECT_NEAR(b[0], 0, 1e-15);
    EXPECT_NEAR(b[1], 0, 1e-15);
    EXPECT_NEAR(b[2], 1, 1e-15);
    const auto c = build_vector(0, kPi / 2).b;
    EXPECT_NEAR(c[0], 1, 1e-15);
    EXPECT_NEAR(c[1], 0, 1e-15);
    EXPECT_NEAR(c[2], 0, 1e-15);
}

TEST(BuildVector, UnitNormAndJacobian) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-20.0, 20.0);
    for (int i = 0; i < 10000; ++i) {
        const double rx = u(rng), rz = u(rng);
        const BuildDirection bd = build_vector(rx, rz);
        ASSERT_NEAR(norm(bd.b), 1.0, 1e-9);
        if (i < 100) {
            const double h = 1e-6;
            const Vec3 px = build_vector(rx + h, rz).b, mx = build_vector(rx - h, rz).b;
            const Vec3 pz = build_vector(rx, rz + h).b, mz = build_vector(rx, rz - h).b;
            for (int d = 0; d < 3; ++d) {
                EXPECT_NEAR(bd.d_rx[d], (px[d] - mx[d]) / (2 * h), 1e-8);
                EXPECT_NEAR(bd.d_rz[d], (pz[d] - mz[d]) / (2 * h), 1e-8);
            }
        }
    }
}

TEST(Heaviside, SpotValues) {
    EXPECT_EQ(smooth_heaviside(0.0, 10.0), 0.5);
    EXPECT_NEAR(smooth_heaviside(0.1, 10.0), 0.8807970779778823, 1e-6);
    EXPECT_NEAR(smooth_heaviside(-0.5, 10.0), 4.5397868702434395e-05, 1e-6);
    EXPECT_NEAR(smooth_heaviside(-0.5, 10.0) / 4.5397868702434395e-05, 1.0, 1e-12);
    EXPECT_EQ(density_heaviside(0.5, 10.0), 0.5);
    EXPECT_NEAR(density_heaviside(1.0, 10.0), 0.9999546021312976, 1e-12);
    EXPECT_NEAR(density_heaviside(0.0, 10.0), 4.5397868702434395e-05, 1e-12);
    double prev = 0.0;
    for (double xi = -2.0; xi <= 2.0; xi += 0.01) {
        const double v = smooth_heaviside(xi, 10.0);
        EXPECT_GE(v, prev);
        prev = v;
    }
}

TEST(LowestSolid, Examples) {
    std::vector<double> h, solid;
    for (int j = 0; j < 20; ++j) {
        h.push_back(-0.5 + j / 19.0);
        solid.push_back(1.0);
    }
    const auto full = lowest_solid_height(h, solid);
    EXPECT_NEAR(full.height, -0.5, 1e-15);
    EXPECT_FALSE(full.degenerate);

    std::vector<double> hh, rt;
    const double dy = 1.0 / 40;
    for (int j = 0; j < 40; ++j) {
        const double y = -0.5 + (j + 0.5) * dy;
        hh.push_back(y);
        rt.push_back(density_heaviside(y >= 0.0 ? 1.0 : 0.0, 10.0));
    }
    const auto half = lowest_solid_height(hh, rt);
    EXPECT_NEAR(half.height, 0.0, dy);

    std::vector<double> zero(20, 0.0);
    const auto none = lowest_solid_height(h, zero);
    EXPECT_EQ(none.height, 1.0);
    EXPECT_TRUE(none.degenerate);
}

TEST(OverhangArea, UniformFieldIsZero) {
    const Grid g = make_grid(8, 8, 8, 1.0 / 8);
    const auto b = sample(g, [](const Vec3&, Vec3& gr) {
        gr = {0, 0, 0};
        return 0.3;
    });
    EXPECT_EQ(overhang_area(b.spatial_grad, {0, 1, 0}, OverhangParams{}, g.cell), 0.0);
}

TEST(OverhangArea, SlabOracles) {
    const int n = 64;
    const double h = 1.0 / n;
    const Grid g = make_grid(n, n, 8, h);
    OverhangParams p;
    p.char_area = 1.0;
    const double interface_area = 1.0 * 8 * h;
    // solid below y = 0: the top face faces up
    const auto below = sample(g, slab(1, -1.0, 0.0, 2.0 / h));
    EXPECT_NEAR(overhang_area(below.spatial_grad, {0, 1, 0}, p, g.cell), 0.0, 1e-4);
    // solid above y = 0: the underside needs support
    const auto above = sample(g, slab(1, 0.0, 1.0, 2.0 / h));
    const double P = overhang_area(above.spatial_grad, {0, 1, 0}, p, g.cell);
    EXPECT_NEAR(P / interface_area, 1.0, 0.05);
}

TEST(OverhangArea, HardThresholdOnBall) {
    const int n = 48;
    const double h = 1.0 / n, r0 = 0.3, k = 1.5 / h;
    const Grid g = make_grid(n, n, n, h);
    const auto ball = sample(g, [=](const Vec3& x, Vec3& gr) {
        const double r = std::max(norm(x), 1e-12);
        const double s = logistic(k * (r0 - r));
        for (int d = 0; d < 3; ++d) gr[d] = -k * s * (1 - s) * x[d] / r;
        return s;
    });
    const Vec3 b{0, 1, 0};
    double hard = 0.0;
    for (const Vec3& v : ball.spatial_grad) {
        const double d = dot(b, v);
        if (d / std::sqrt(dot(v, v) + 1e-16) > std::cos(kPi / 4)) hard += d;
    }
    hard *= g.cell;
    // projected area of the downward cap within the critical angle: pi (r sin a)^2
    EXPECT_NEAR(hard / (kPi * r0 * r0 * 0.5), 1.0, 0.05);
    OverhangParams p;
    p.beta = 200.0;
    EXPECT_NEAR(overhang_area(ball.spatial_grad, b, p, g.cell) / hard, 1.0, 0.05);
}

TEST(OverhangArea, ApproachesGeometricAreaAsBetaGrows) {
    // half-space above a plane tilted 30 degrees: every column crosses the
    // underside once, so the exact overhang integral is the projected area
    const int n = 40;
    const double h = 1.0 / n, k = 2.0 / h;
    const Grid g = make_grid(n, n, 6, h);
    const Vec3 nrm{std::sin(kPi / 6), std::cos(kPi / 6), 0.0};
    const auto tilted = sample(g, [=](const Vec3& x, Vec3& gr) {
        const double s = logistic(k * dot(nrm, x));
        for (int d = 0; d < 3; ++d) gr[d] = k * s * (1 - s) * nrm[d];
        return s;
    });
    const double exact = 1.0 * 6 * h;
    OverhangParams p;
    double prev = 1e300;
    for (double beta : {2.5, 5.0, 10.0, 20.0, 40.0}) {
        p.beta = beta;
        const double err = std::abs(overhang_area(tilted.spatial_grad, {0, 1, 0}, p, g.cell) - exact);
        EXPECT_LT(err, prev) << beta;
        prev = err;
    }
    EXPECT_LT(prev, 1e-3 * exact);
}

TEST(OverhangArea, RotationalConsistency) {
    const int n = 40;
    const double h = 1.0 / n;
    const Grid g = make_grid(n, n, 10, h);
    OverhangParams p;
    // an overhanging shelf: slab above y = 0.1 restricted to x > 0
    const Field shelf = slab(1, 0.1, 0.3, 2.0 / h, true);
    const auto a = sample(g, shelf);
    // rotate the field by +90 degrees about z: X' = R X, rho'(X') = rho(R^T X')
    const auto rotated = sample(g, [&](const Vec3& x, Vec3& gr) {
        const Vec3 back{x[1], -x[0], x[2]};
        Vec3 gb;
        const double r = shelf(back, gb);
        gr = {-gb[1], gb[0], gb[2]};
        return r;
    });
    const double P0 = overhang_area(a.spatial_grad, build_vector(0, 0).b, p, g.cell);
    const double P1 = overhang_area(rotated.spatial_grad, build_vector(0, -kPi / 2).b, p, g.cell);
    ASSERT_GT(P0, 0.0);
    EXPECT_NEAR(P1 / P0, 1.0, 0.05);
}

TEST(HeightPenalized, ZeroAtBuildPlateAndLinearInGap) {
    const int n = 80;
    const double h = 1.0 / n, k = 2.0 / h;
    const Grid g = make_grid(n, n, 8, h);
    OverhangParams p;
    // base plate resting on the domain floor plus a shelf `gap` above the lowest solid
    const double floor_y = -0.5 + 0.5 * h;
    auto run = [&](double gap) {
        const Field f = sum(slab(1, -1.0, -0.4, k), slab(1, floor_y + gap, floor_y + gap + 0.05, k, true));
        const auto b = sample(g, f);
        std::vector<double> hgt, rt;
        for (std::size_t i = 0; i < b.size(); ++i) {
            hgt.push_back(b.points[i][1]);
            rt.push_back(density_heaviside(b.density[i], p.beta));
        }
        const auto low = lowest_solid_height(hgt, rt);
        EXPECT_NEAR(low.height, floor_y, 1e-3);
        return height_penalized_overhang(b.points, b.spatial_grad, {0, 1, 0}, p, low.height, g.cell);
    };
    const double H1 = run(0.2), H2 = run(0.4);
    EXPECT_GT(H1, 0.0);
    EXPECT_NEAR(H2 / H1, 2.0, 0.1);

    // a lone slab: its underside is the lowest solid, so only the upper half of
    // the smoothed interface is lifted, by ln2 / k on average
    const double lo = -0.45;
    const auto lone = sample(g, slab(1, lo, lo + 0.1, k));
    const double P = overhang_area(lone.spatial_grad, {0, 1, 0}, p, g.cell);
    const double H = height_penalized_overhang(lone.points, lone.spatial_grad, {0, 1, 0}, p, lo, g.cell);
    EXPECT_GT(P, 0.0);
    EXPECT_NEAR(H / P, std::log(2.0) / k, 0.1 * std::log(2.0) / k);  // one sample per interface width
}

TEST(Segmented, SingleSegmentAndForcedWeightsMatchUnsegmented) {
    const Grid g = make_grid(20, 20, 6, 1.0 / 20);
    const auto b1 = sample(g, slab(1, 0.0, 0.2, 30.0, true));
    OverhangParams p;
    const fields::AngleNet one{{{0.3, -0.2}}};
    const auto r1 = segmented_overhang(b1, one, p, g.cell);
    const Vec3 b = build_vector(0.3, -0.2).b;
    const auto low = segment_lowest(b1, one, p);
    EXPECT_EQ(r1.P, overhang_area(b1.per_segment_grad, b, p, g.cell));
    EXPECT_EQ(r1.H, height_penalized_overhang(b1.points, b1.per_segment_grad, b, p, low[0].height, g.cell));

    // two segments with all weight on the first
    std::vector<double> w(2 * b1.size());
    std::vector<Vec3> wg(2 * b1.size(), Vec3{0, 0, 0});
    for (std::size_t i = 0; i < b1.size(); ++i) w[2 * i] = 1.0;
    const auto b2 = fields::combine(b1.points, b1.density, b1.spatial_grad, w, wg, 2);
    const fields::AngleNet two{{{0.3, -0.2}, {1.0, 0.5}}};
    const auto r2 = segmented_overhang(b2, two, p, g.cell);
    EXPECT_EQ(r2.P, r1.P);
    EXPECT_EQ(r2.H, r1.H);
    EXPECT_TRUE(r2.segments[1].degenerate);
}

TEST(Segmented, RotatingOneSegmentHelps) {
    // a floor slab printed upright and a wall whose underside shelf overhangs
    const int n = 40;
    const double h = 1.0 / n, k = 2.0 / h;
    const Grid g = make_grid(n, n, 8, h);
    const Field floor = slab(1, -0.4, -0.3, k);
    const Field shelf = [=](const Vec3& x, Vec3& gr) {
        const Field s = slab(1, 0.1, 0.2, k, true);
        return s(x, gr);
    };
    const auto a = sample(g, floor), c = sample(g, shelf);
    std::vector<double> rho, w;
    std::vector<Vec3> grad, wg;
    for (std::size_t i = 0; i < a.size(); ++i) {
        // one segment per slab, weights sharp in y
        const double split = logistic(k * (g.pts[i][1] + 0.05));
        rho.push_back(a.density[i] + c.density[i]);
        grad.push_back({a.spatial_grad[i][0] + c.spatial_grad[i][0], a.spatial_grad[i][1] + c.spatial_grad[i][1],
                        a.spatial_grad[i][2] + c.spatial_grad[i][2]});
        w.push_back(1.0 - split);
        w.push_back(split);
        const double ds = k * split * (1 - split);
        wg.push_back({0, -ds, 0});
        wg.push_back({0, ds, 0});
    }
    const auto batch = fields::combine(g.pts, rho, grad, w, wg, 2);
    OverhangParams p;
    const auto upright = segmented_overhang(batch, fields::AngleNet{{{0, 0}, {0, 0}}}, p, g.cell);
    const auto flipped = segmented_overhang(batch, fields::AngleNet{{{0, 0}, {kPi, 0}}}, p, g.cell);
    EXPECT_LT(flipped.segments[1].H, upright.segments[1].H);
    EXPECT_LT(flipped.H, upright.H);
}

namespace {

double metric_value(const fields::SampleBatch& b, const fields::AngleNet& a, const OverhangParams& p,
                    double cell, bool height, std::span<const LowestSolid> low) {
    const auto r = segmented_overhang(b, a, p, cell, low);
    return height ? r.H : r.P;
}

}  // namespace

TEST(Segmented, GradientMatchesFiniteDifferences) {
    const Grid g = make_grid(10, 8, 4, 0.1);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const int ns = 3;
    fields::SampleBatch b;
    b.points = g.pts;
    b.n_segs = ns;
    for (std::size_t i = 0; i < g.pts.size(); ++i)
        for (int s = 0; s < ns; ++s) {
            b.per_segment_density.push_back(0.5 + 0.4 * u(rng));
            b.per_segment_grad.push_back({u(rng), u(rng), u(rng)});
        }
    const fields::AngleNet angles{{{0.2, 0.1}, {-0.7, 0.4}, {1.3, -0.9}}};
    OverhangParams p;
    const auto low = segment_lowest(b, angles, p);
    for (bool height : {false, true}) {
        const auto grad = segmented_overhang_grad(b, angles, p, g.cell, height, low);
        EXPECT_NEAR(grad.value, metric_value(b, angles, p, g.cell, height, low), 1e-12);
        const double hs = 1e-6;
        double worst = 0.0, scale = 0.0;
        for (std::size_t k = 0; k < 30; ++k) {
            const std::size_t idx = (k * 37) % b.per_segment_grad.size();
            for (int d = 0; d < 3; ++d) {
                auto bp = b, bm = b;
                bp.per_segment_grad[idx][d] += hs;
                bm.per_segment_grad[idx][d] -= hs;
                const double fd = (metric_value(bp, angles, p, g.cell, height, low) -
                                   metric_value(bm, angles, p, g.cell, height, low)) / (2 * hs);
                worst = std::max(worst, std::abs(fd - grad.d_grad[idx][d]));
                scale = std::max(scale, std::abs(fd));
            }
        }
        EXPECT_LT(worst, 1e-4 * scale);
        for (int s = 0; s < ns; ++s) {
            for (int which = 0; which < 2; ++which) {
                auto ap = angles, am_ = angles;
                (which ? ap.angles[s].second : ap.angles[s].first) += hs;
                (which ? am_.angles[s].second : am_.angles[s].first) -= hs;
                const double fd = (metric_value(b, ap, p, g.cell, height, low) -
                                   metric_value(b, am_, p, g.cell, height, low)) / (2 * hs);
                const double an = which ? grad.d_angles[s].second : grad.d_angles[s].first;
                EXPECT_NEAR(an, fd, 1e-4 * std::max(std::abs(fd), 1e-3)) << s << " " << which << " " << height;
            }
        }
    }
}

TEST(OverhangParams, Validation) {
    OverhangParams p;
    p.critical_angle = 2.0;
    EXPECT_THROW(p.validate(), ConfigError);
    p = {};
    p.beta = 0.0;
    EXPECT_THROW(p.validate(), ConfigError);
    EXPECT_EQ(characteristic_area({1.0, 0.5, 0.2}), 0.5);
}
