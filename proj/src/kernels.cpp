#include "segtopo/kernels.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <vector>

namespace segtopo::kernels {

namespace {

constexpr int kMaxSegs = 16;

inline double clamp_density(double s) {
    return std::min(std::max(s, DBL_MIN), 1.0 - DBL_EPSILON / 2.0);
}

inline void sin_cos(double z, double& s, double& c) {
    s = std::sin(z);
    c = std::cos(z);
}

inline void topo_point(const fields::TopoNet& net, const Vec3& x, double& rho, Vec3* grad) {
    const int nf = net.n_features();
    const double* K = net.layer.kernels.data();
    const double* b = net.layer.bias.data();
    const double* W = net.weights.data();
    double m = net.bias;
    double v0 = 0.0, v1 = 0.0, v2 = 0.0;
    for (int f = 0; f < nf; ++f) {
        const double z = x[0] * K[3 * f] + x[1] * K[3 * f + 1] + x[2] * K[3 * f + 2] + b[f];
        double s, c;
        sin_cos(z, s, c);
        m += W[f] * c;
        const double a = -W[f] * s;
        v0 += a * K[3 * f];
        v1 += a * K[3 * f + 1];
        v2 += a * K[3 * f + 2];
    }
    const double sig = sigmoid(m);
    rho = clamp_density(sig);
    if (grad) {
        const double q = sig * (1.0 - sig);
        *grad = {q * v0, q * v1, q * v2};
    }
}

// Softmax weights and their spatial gradients at one point.
inline void seg_point(const fields::SegNet& net, const Vec3& x, double* w, Vec3* grad,
                      Vec3* u_out = nullptr) {
    const int nf = net.n_features();
    const int ns = net.n_segs;
    const double* K = net.layer.kernels.data();
    const double* b = net.layer.bias.data();
    const double* W = net.weights.data();
    double m[kMaxSegs] = {};
    Vec3 u[kMaxSegs];
    for (int t = 0; t < ns; ++t) {
        m[t] = net.bias[t];
        u[t] = {0.0, 0.0, 0.0};
    }
    for (int f = 0; f < nf; ++f) {
        const double z = x[0] * K[3 * f] + x[1] * K[3 * f + 1] + x[2] * K[3 * f + 2] + b[f];
        double s, c;
        sin_cos(z, s, c);
        const double* Wf = W + std::size_t(f) * ns;
        for (int t = 0; t < ns; ++t) {
            m[t] += Wf[t] * c;
            const double a = -Wf[t] * s;
            u[t][0] += a * K[3 * f];
            u[t][1] += a * K[3 * f + 1];
            u[t][2] += a * K[3 * f + 2];
        }
    }
    double mmax = m[0];
    for (int t = 1; t < ns; ++t) mmax = std::max(mmax, m[t]);
    double sum = 0.0;
    for (int t = 0; t < ns; ++t) {
        w[t] = std::exp(m[t] - mmax);
        sum += w[t];
    }
    for (int t = 0; t < ns; ++t) w[t] /= sum;
    if (grad) {
        Vec3 ubar{0.0, 0.0, 0.0};
        for (int t = 0; t < ns; ++t)
            for (int d = 0; d < 3; ++d) ubar[d] += w[t] * u[t][d];
        for (int t = 0; t < ns; ++t)
            for (int d = 0; d < 3; ++d) grad[t][d] = w[t] * (u[t][d] - ubar[d]);
    }
    if (u_out)
        for (int t = 0; t < ns; ++t) u_out[t] = u[t];
}

// Accumulates the parameter gradient of one point into the given buffers.
// Layout of acc: [dK (3F) | db_kernel (F) | dW (F) | db_dense (1)].
inline void topo_backprop_point(const fields::TopoNet& net, const Vec3& x, double g, const Vec3& G,
                                double* acc) {
    const int nf = net.n_features();
    const double* K = net.layer.kernels.data();
    const double* b = net.layer.bias.data();
    const double* W = net.weights.data();
    double m = net.bias;
    Vec3 v{0.0, 0.0, 0.0};
    for (int f = 0; f < nf; ++f) {
        const double z = x[0] * K[3 * f] + x[1] * K[3 * f + 1] + x[2] * K[3 * f + 2] + b[f];
        double s, c;
        sin_cos(z, s, c);
        m += W[f] * c;
        const double a = -W[f] * s;
        v[0] += a * K[3 * f];
        v[1] += a * K[3 * f + 1];
        v[2] += a * K[3 * f + 2];
    }
    const double sig = sigmoid(m);
    const double q = sig * (1.0 - sig);
    const double q2 = q * (1.0 - 2.0 * sig);
    const double gamma = g * q + q2 * dot(G, v);
    double* dK = acc;
    double* db = acc + 3 * nf;
    double* dW = acc + 4 * nf;
    for (int f = 0; f < nf; ++f) {
        const double z = x[0] * K[3 * f] + x[1] * K[3 * f + 1] + x[2] * K[3 * f + 2] + b[f];
        double s, c;
        sin_cos(z, s, c);
        const double gk = G[0] * K[3 * f] + G[1] * K[3 * f + 1] + G[2] * K[3 * f + 2];
        dW[f] += gamma * c - q * s * gk;
        const double zeta = -gamma * W[f] * s - q * W[f] * c * gk;
        db[f] += zeta;
        const double gs = -q * W[f] * s;
        dK[3 * f] += zeta * x[0] + gs * G[0];
        dK[3 * f + 1] += zeta * x[1] + gs * G[1];
        dK[3 * f + 2] += zeta * x[2] + gs * G[2];
    }
    acc[5 * nf] += gamma;
}

// Layout of acc: [dK (3F) | db_kernel (F) | dW (F*S) | db_dense (S)].
inline void seg_backprop_point(const fields::SegNet& net, const Vec3& x, const double* h,
                               const Vec3* H, double* acc) {
    const int nf = net.n_features();
    const int ns = net.n_segs;
    const double* K = net.layer.kernels.data();
    const double* b = net.layer.bias.data();
    const double* W = net.weights.data();
    double S[kMaxSegs];
    Vec3 u[kMaxSegs];
    seg_point(net, x, S, nullptr, u);

    Vec3 ubar{0.0, 0.0, 0.0}, hbar{0.0, 0.0, 0.0};
    for (int t = 0; t < ns; ++t)
        for (int d = 0; d < 3; ++d) {
            ubar[d] += S[t] * u[t][d];
            hbar[d] += S[t] * H[t][d];
        }
    double hp[kMaxSegs];
    double hmean = 0.0;
    for (int t = 0; t < ns; ++t) {
        const Vec3 du{u[t][0] - ubar[0], u[t][1] - ubar[1], u[t][2] - ubar[2]};
        hp[t] = h[t] + dot(H[t], du) - dot(hbar, u[t]);
        hmean += hp[t] * S[t];
    }
    double mu[kMaxSegs];
    Vec3 gh[kMaxSegs];
    for (int t = 0; t < ns; ++t) {
        mu[t] = S[t] * (hp[t] - hmean);
        for (int d = 0; d < 3; ++d) gh[t][d] = S[t] * (H[t][d] - hbar[d]);
    }

    double* dK = acc;
    double* db = acc + 3 * nf;
    double* dW = acc + 4 * nf;
    double* dbd = acc + 4 * nf + std::size_t(nf) * ns;
    for (int f = 0; f < nf; ++f) {
        const double* Kf = K + 3 * f;
        const double z = x[0] * Kf[0] + x[1] * Kf[1] + x[2] * Kf[2] + b[f];
        double s, c;
        sin_cos(z, s, c);
        const double* Wf = W + std::size_t(f) * ns;
        double* dWf = dW + std::size_t(f) * ns;
        double zeta = 0.0;
        Vec3 wg{0.0, 0.0, 0.0};
        for (int t = 0; t < ns; ++t) {
            const double gk = gh[t][0] * Kf[0] + gh[t][1] * Kf[1] + gh[t][2] * Kf[2];
            dWf[t] += mu[t] * c - s * gk;
            zeta += -mu[t] * Wf[t] * s - Wf[t] * c * gk;
            for (int d = 0; d < 3; ++d) wg[d] += Wf[t] * gh[t][d];
        }
        db[f] += zeta;
        for (int d = 0; d < 3; ++d) dK[3 * f + d] += zeta * x[d] - s * wg[d];
    }
    for (int t = 0; t < ns; ++t) dbd[t] += mu[t];
}

void unpack_topo(const std::vector<double>& acc, int nf, fields::TopoGrad& out) {
    out.kernels.assign(acc.begin(), acc.begin() + 3 * nf);
    out.kernel_bias.assign(acc.begin() + 3 * nf, acc.begin() + 4 * nf);
    out.weights.assign(acc.begin() + 4 * nf, acc.begin() + 5 * nf);
    out.bias = acc[5 * nf];
}

void unpack_seg(const std::vector<double>& acc, int nf, int ns, fields::SegGrad& out) {
    const std::size_t wend = 4 * std::size_t(nf) + std::size_t(nf) * ns;
    out.kernels.assign(acc.begin(), acc.begin() + 3 * nf);
    out.kernel_bias.assign(acc.begin() + 3 * nf, acc.begin() + 4 * nf);
    out.weights.assign(acc.begin() + 4 * nf, acc.begin() + wend);
    out.bias.assign(acc.begin() + wend, acc.begin() + wend + ns);
}

inline void hex_node(const HexGrid& g, const ElementOperator& op, const unsigned char* free,
                     const double* u, double* y, int i, int j, int k) {
    const std::size_t n = g.node(i, j, k);
    double acc[3] = {0.0, 0.0, 0.0};
    std::size_t en[8];
    for (int ek = k - 1; ek <= k; ++ek) {
        if (ek < 0 || ek >= g.nz) continue;
        for (int ej = j - 1; ej <= j; ++ej) {
            if (ej < 0 || ej >= g.ny) continue;
            for (int ei = i - 1; ei <= i; ++ei) {
                if (ei < 0 || ei >= g.nx) continue;
                const std::size_t e = g.element(ei, ej, ek);
                const int dx = i - ei, dy = j - ej, dz = k - ek;
                int a = 0;
                for (; a < 8; ++a)
                    if (kCorner[a][0] == dx && kCorner[a][1] == dy && kCorner[a][2] == dz) break;
                element_nodes(g, ei, ej, ek, en);
                double ue[24];
                for (int c = 0; c < 8; ++c)
                    for (int d = 0; d < 3; ++d) ue[3 * c + d] = u[3 * en[c] + d];
                const double* M = op.mats + op.stride * e;
                const double sc = op.scale ? op.scale[e] : 1.0;
                for (int d = 0; d < 3; ++d) {
                    const double* row = M + (3 * a + d) * 24;
                    double r = 0.0;
                    for (int c = 0; c < 24; ++c) r += row[c] * ue[c];
                    acc[d] += sc * r;
                }
            }
        }
    }
    for (int d = 0; d < 3; ++d) y[3 * n + d] = free[3 * n + d] ? acc[d] : 0.0;
}

}  // namespace

void element_nodes(const HexGrid& g, int ei, int ej, int ek, std::size_t out[8]) {
    for (int c = 0; c < 8; ++c)
        out[c] = g.node(ei + kCorner[c][0], ej + kCorner[c][1], ek + kCorner[c][2]);
}

namespace serial {

void topo_eval(const fields::TopoNet& net, std::span<const Vec3> pts, std::span<double> rho,
               std::span<Vec3> grad) {
    const bool want_grad = !grad.empty();
    for (std::size_t i = 0; i < pts.size(); ++i)
        topo_point(net, pts[i], rho[i], want_grad ? &grad[i] : nullptr);
}

void seg_eval(const fields::SegNet& net, std::span<const Vec3> pts, std::span<double> weights,
              std::span<Vec3> grad) {
    const std::size_t ns = net.n_segs;
    const bool want_grad = !grad.empty();
    for (std::size_t i = 0; i < pts.size(); ++i)
        seg_point(net, pts[i], &weights[i * ns], want_grad ? &grad[i * ns] : nullptr);
}

void topo_backprop(const fields::TopoNet& net, std::span<const Vec3> pts,
                   std::span<const double> d_rho, std::span<const Vec3> d_grad,
                   fields::TopoGrad& out) {
    const int nf = net.n_features();
    std::vector<double> acc(5 * std::size_t(nf) + 1, 0.0);
    for (std::size_t i = 0; i < pts.size(); ++i)
        topo_backprop_point(net, pts[i], d_rho[i], d_grad[i], acc.data());
    unpack_topo(acc, nf, out);
}

void seg_backprop(const fields::SegNet& net, std::span<const Vec3> pts,
                  std::span<const double> d_weights, std::span<const Vec3> d_grad,
                  fields::SegGrad& out) {
    const int nf = net.n_features();
    const int ns = net.n_segs;
    std::vector<double> acc(4 * std::size_t(nf) + std::size_t(nf) * ns + ns, 0.0);
    for (std::size_t i = 0; i < pts.size(); ++i)
        seg_backprop_point(net, pts[i], &d_weights[i * ns], &d_grad[i * ns], acc.data());
    unpack_seg(acc, nf, ns, out);
}

void hex_apply(const HexGrid& g, const ElementOperator& op, std::span<const unsigned char> free,
               std::span<const double> u, std::span<double> y) {
    for (int k = 0; k <= g.nz; ++k)
        for (int j = 0; j <= g.ny; ++j)
            for (int i = 0; i <= g.nx; ++i)
                hex_node(g, op, free.data(), u.data(), y.data(), i, j, k);
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace serial

namespace omp {

void topo_eval(const fields::TopoNet& net, std::span<const Vec3> pts, std::span<double> rho,
               std::span<Vec3> grad) {
    const bool want_grad = !grad.empty();
    const long n = static_cast<long>(pts.size());
#pragma omp parallel for schedule(static)
    for (long i = 0; i < n; ++i) topo_point(net, pts[i], rho[i], want_grad ? &grad[i] : nullptr);
}

void seg_eval(const fields::SegNet& net, std::span<const Vec3> pts, std::span<double> weights,
              std::span<Vec3> grad) {
    const std::size_t ns = net.n_segs;
    const bool want_grad = !grad.empty();
    const long n = static_cast<long>(pts.size());
#pragma omp parallel for schedule(static)
    for (long i = 0; i < n; ++i)
        seg_point(net, pts[i], &weights[i * ns], want_grad ? &grad[i * ns] : nullptr);
}

void topo_backprop(const fields::TopoNet& net, std::span<const Vec3> pts,
                   std::span<const double> d_rho, std::span<const Vec3> d_grad,
                   fields::TopoGrad& out) {
    const int nf = net.n_features();
    const std::size_t width = 5 * std::size_t(nf) + 1;
    const long n_blocks = static_cast<long>((pts.size() + kBlock - 1) / kBlock);
    std::vector<double> partial(width * std::max<long>(n_blocks, 1), 0.0);
#pragma omp parallel for schedule(static)
    for (long blk = 0; blk < n_blocks; ++blk) {
        double* acc = partial.data() + width * blk;
        const std::size_t end = std::min(pts.size(), (blk + 1) * kBlock);
        for (std::size_t i = blk * kBlock; i < end; ++i)
            topo_backprop_point(net, pts[i], d_rho[i], d_grad[i], acc);
    }
    std::vector<double> acc(width, 0.0);
    for (long blk = 0; blk < n_blocks; ++blk)
        for (std::size_t p = 0; p < width; ++p) acc[p] += partial[width * blk + p];
    unpack_topo(acc, nf, out);
}

void seg_backprop(const fields::SegNet& net, std::span<const Vec3> pts,
                  std::span<const double> d_weights, std::span<const Vec3> d_grad,
                  fields::SegGrad& out) {
    const int nf = net.n_features();
    const int ns = net.n_segs;
    const std::size_t width = 4 * std::size_t(nf) + std::size_t(nf) * ns + ns;
    const long n_blocks = static_cast<long>((pts.size() + kBlock - 1) / kBlock);
    std::vector<double> partial(width * std::max<long>(n_blocks, 1), 0.0);
#pragma omp parallel for schedule(static)
    for (long blk = 0; blk < n_blocks; ++blk) {
        double* acc = partial.data() + width * blk;
        const std::size_t end = std::min(pts.size(), (blk + 1) * kBlock);
        for (std::size_t i = blk * kBlock; i < end; ++i)
            seg_backprop_point(net, pts[i], &d_weights[i * ns], &d_grad[i * ns], acc);
    }
    std::vector<double> acc(width, 0.0);
    for (long blk = 0; blk < n_blocks; ++blk)
        for (std::size_t p = 0; p < width; ++p) acc[p] += partial[width * blk + p];
    unpack_seg(acc, nf, ns, out);
}

void hex_apply(const HexGrid& g, const ElementOperator& op, std::span<const unsigned char> free,
               std::span<const double> u, std::span<double> y) {
    const long planes = static_cast<long>(g.nz + 1) * (g.ny + 1);
#pragma omp parallel for schedule(static)
    for (long p = 0; p < planes; ++p) {
        const int k = static_cast<int>(p / (g.ny + 1));
        const int j = static_cast<int>(p % (g.ny + 1));
        for (int i = 0; i <= g.nx; ++i) hex_node(g, op, free.data(), u.data(), y.data(), i, j, k);
    }
}

double dot(std::span<const double> a, std::span<const double> b) {
    const long n_blocks = static_cast<long>((a.size() + kBlock - 1) / kBlock);
    std::vector<double> partial(std::max<long>(n_blocks, 1), 0.0);
#pragma omp parallel for schedule(static)
    for (long blk = 0; blk < n_blocks; ++blk) {
        double s = 0.0;
        const std::size_t end = std::min(a.size(), (blk + 1) * kBlock);
        for (std::size_t i = blk * kBlock; i < end; ++i) s += a[i] * b[i];
        partial[blk] = s;
    }
    double s = 0.0;
    for (long blk = 0; blk < n_blocks; ++blk) s += partial[blk];
    return s;
}

}  // namespace omp

}  // namespace segtopo::kernels
