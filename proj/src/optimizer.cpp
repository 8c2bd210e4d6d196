#include "segtopo/optimizer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <sstream>

#include "segtopo/kernels.hpp"

namespace segtopo::opt {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

// Sum in index order; the loss and its logged value must not depend on threads.
double ordered_sum(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
}

template <class T>
std::size_t bytes_of(const std::vector<T>& v) {
    return v.size() * sizeof(T);
}

std::size_t bytes_of(const fields::SampleBatch& b) {
    return bytes_of(b.points) + bytes_of(b.density) + bytes_of(b.spatial_grad) +
           bytes_of(b.seg_weights) + bytes_of(b.seg_grad) + bytes_of(b.per_segment_density) +
           bytes_of(b.per_segment_grad);
}

fields::SampleBatch select_rows(const fields::SampleBatch& b, std::span<const std::size_t> rows) {
    const int ns = b.n_segs;
    fields::SampleBatch out;
    out.n_segs = ns;
    const std::size_t m = rows.size();
    out.points.resize(m);
    out.density.resize(m);
    out.spatial_grad.resize(m);
    out.seg_weights.resize(m * ns);
    out.seg_grad.resize(m * ns);
    out.per_segment_density.resize(m * ns);
    out.per_segment_grad.resize(m * ns);
    for (std::size_t r = 0; r < m; ++r) {
        const std::size_t e = rows[r];
        out.points[r] = b.points[e];
        out.density[r] = b.density[e];
        out.spatial_grad[r] = b.spatial_grad[e];
        for (int s = 0; s < ns; ++s) {
            out.seg_weights[r * ns + s] = b.seg_weights[e * ns + s];
            out.seg_grad[r * ns + s] = b.seg_grad[e * ns + s];
            out.per_segment_density[r * ns + s] = b.per_segment_density[e * ns + s];
            out.per_segment_grad[r * ns + s] = b.per_segment_grad[e * ns + s];
        }
    }
    return out;
}

// Index of the element mirrored through the domain mid-plane.
std::vector<std::size_t> mirror_elements(const ProblemDomain& p, Mirror m) {
    const kernels::HexGrid g{p.nelx, p.nely, p.nelz};
    std::vector<std::size_t> out(g.n_elements());
    for (int k = 0; k < g.nz; ++k)
        for (int j = 0; j < g.ny; ++j)
            for (int i = 0; i < g.nx; ++i) {
                int a = i, b = j, c = k;
                if (m == Mirror::x) a = g.nx - 1 - i;
                if (m == Mirror::y) b = g.ny - 1 - j;
                if (m == Mirror::z) c = g.nz - 1 - k;
                out[g.element(i, j, k)] = g.element(a, b, c);
            }
    return out;
}

double norm2(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

Mode parse_mode(const std::string& s) {
    if (s == "topo") return Mode::topo;
    if (s == "topo-angle") return Mode::topo_angle;
    if (s == "topo-angle-seg") return Mode::topo_angle_seg;
    if (s == "simp-baseline") return Mode::simp;
    throw ConfigError("mode", "unknown mode '" + s +
                                  "' (expected topo, topo-angle, topo-angle-seg or simp-baseline)");
}

const char* to_string(Mode m) {
    switch (m) {
        case Mode::topo: return "topo";
        case Mode::topo_angle: return "topo-angle";
        case Mode::topo_angle_seg: return "topo-angle-seg";
        case Mode::simp: return "simp-baseline";
    }
    return "topo";
}

LossReport total_loss(double c, double c0, double rho_bar, double vol_frac, double H, double alpha1,
                      double alpha2, double passive) {
    if (!(c0 > 0.0)) throw ConfigError("c0", "initial compliance must be positive");
    if (!(vol_frac > 0.0 && vol_frac < 1.0))
        throw ConfigError("vol_frac", "vol_frac must be in (0, 1)");
    LossReport r;
    r.alpha1 = alpha1;
    r.alpha2 = alpha2;
    r.compliance = c / c0;
    const double dv = rho_bar / vol_frac - 1.0;
    r.volume = alpha1 * dv * dv;
    r.overhang = alpha2 * H;
    r.passive = passive;
    r.value = r.compliance + r.volume + r.overhang + r.passive;
    return r;
}

double passive_loss(const fields::TopoNet& net, std::span<const Vec3> passive_points) {
    if (passive_points.empty()) return 0.0;
    std::vector<double> rho(passive_points.size());
    kernels::omp::topo_eval(net, passive_points, rho, {});
    return ordered_sum(rho);
}

std::vector<double> symmetry_density(const fields::TopoNet& net, std::span<const Vec3> points,
                                     Mirror mirror) {
    fields::validate(net);
    fields::validate_points(points);
    const std::size_t n = points.size();
    std::vector<double> rho(n);
    kernels::omp::topo_eval(net, points, rho, {});
    if (mirror == Mirror::none) return rho;
    std::vector<Vec3> mp(n);
    for (std::size_t i = 0; i < n; ++i) mp[i] = mirror_point(points[i], mirror);
    std::vector<double> rm(n);
    kernels::omp::topo_eval(net, mp, rm, {});
    for (std::size_t i = 0; i < n; ++i) rho[i] = 0.5 * (rho[i] + rm[i]);
    return rho;
}

fields::SampleBatch evaluate_field(const fields::FieldParams& params, std::span<const Vec3> points,
                                   Mirror mirror) {
    if (mirror == Mirror::none) return fields::evaluate(params, points);
    fields::validate(params.topo);
    fields::validate_points(points);
    const std::size_t n = points.size();
    const int ns = params.seg.n_segs;
    std::vector<Vec3> both(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        both[i] = points[i];
        both[n + i] = mirror_point(points[i], mirror);
    }
    std::vector<double> t(2 * n);
    std::vector<Vec3> tg(2 * n);
    kernels::omp::topo_eval(params.topo, both, t, tg);
    std::vector<double> T(n);
    std::vector<Vec3> G(n);
    for (std::size_t i = 0; i < n; ++i) {
        T[i] = 0.5 * (t[i] + t[n + i]);
        const Vec3 gm = mirror_vector(tg[n + i], mirror);
        for (int d = 0; d < 3; ++d) G[i][d] = 0.5 * (tg[i][d] + gm[d]);
    }
    std::vector<double> S(n * ns, 1.0);
    std::vector<Vec3> SG(n * ns, Vec3{0.0, 0.0, 0.0});
    if (ns > 1) {
        fields::validate(params.seg);
        std::vector<double> w(2 * n * ns);
        std::vector<Vec3> wg(2 * n * ns);
        kernels::omp::seg_eval(params.seg, both, w, wg);
        for (std::size_t i = 0; i < n; ++i)
            for (int s = 0; s < ns; ++s) {
                const std::size_t a = i * ns + s, b = (n + i) * ns + s;
                S[a] = 0.5 * (w[a] + w[b]);
                const Vec3 gm = mirror_vector(wg[b], mirror);
                for (int d = 0; d < 3; ++d) SG[a][d] = 0.5 * (wg[a][d] + gm[d]);
            }
    }
    return fields::combine(points, T, G, S, SG, ns);
}

Penalties penalty_schedule(int iter, const Schedule& s, Mode mode) {
    auto ramp = [](int t, int len, double max) {
        if (t < 0) return 0.0;
        if (len <= 0) return max;
        return std::min(max, max * double(t) / double(len));
    };
    Penalties p;
    p.alpha1 = ramp(iter - s.alpha1_warmup, s.alpha1_ramp, s.alpha1_max);
    if (mode == Mode::topo_angle || mode == Mode::topo_angle_seg)
        p.alpha2 = ramp(iter - s.topo_only_iters, s.alpha2_ramp, s.alpha2_max);
    return p;
}

Groups phase_gate(int iter, const Schedule& s, Mode mode) {
    switch (mode) {
        case Mode::topo:
        case Mode::simp: return {true, false, false};
        case Mode::topo_angle:
            if (iter < s.topo_only_iters) return {true, false, false};
            return {true, false, true};
        case Mode::topo_angle_seg:
            if (iter < s.topo_only_iters) return {true, false, false};
            if (iter < s.topo_only_iters + s.angle_only_iters) return {false, false, true};
            return {true, true, true};
    }
    return {};
}

std::string phase_name(const Groups& g, Mode mode) {
    if (mode == Mode::simp) return "simp";
    std::string out;
    auto add = [&](bool on, const char* name) {
        if (!on) return;
        if (!out.empty()) out += '+';
        out += name;
    };
    add(g.topo, "topology");
    add(g.seg, "segmentation");
    add(g.angles, "angles");
    return out.empty() ? "frozen" : out;
}

void step(std::span<double> x, std::span<const double> grad, GroupState& st, int iter,
          int sgd_iters, const StepRates& r, const std::string& group) {
    if (x.size() != grad.size()) throw InvalidInput("step: parameter and gradient sizes differ");
    for (double g : grad)
        if (!std::isfinite(g)) {
            std::ostringstream os;
            os << "non-finite gradient at iteration " << iter << " in group '" << group
               << "' (norm " << norm2(grad) << ")";
            throw NumericalError(os.str(), norm2(grad));
        }
    if (iter < sgd_iters) {
        for (std::size_t i = 0; i < x.size(); ++i) x[i] -= r.sgd_lr * grad[i];
        return;
    }
    if (st.m.size() != x.size()) {
        st.m.assign(x.size(), 0.0);
        st.v.assign(x.size(), 0.0);
        st.t = 0;
    }
    ++st.t;
    const double c1 = 1.0 - std::pow(r.beta1, double(st.t));
    const double c2 = 1.0 - std::pow(r.beta2, double(st.t));
    for (std::size_t i = 0; i < x.size(); ++i) {
        st.m[i] = r.beta1 * st.m[i] + (1.0 - r.beta1) * grad[i];
        st.v[i] = r.beta2 * st.v[i] + (1.0 - r.beta2) * grad[i] * grad[i];
        x[i] -= r.adam_lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + r.eps);
    }
}

std::vector<double> pack(const fields::TopoNet& n) {
    std::vector<double> x(n.layer.kernels);
    x.insert(x.end(), n.layer.bias.begin(), n.layer.bias.end());
    x.insert(x.end(), n.weights.begin(), n.weights.end());
    x.push_back(n.bias);
    return x;
}

std::vector<double> pack(const fields::SegNet& n) {
    std::vector<double> x(n.layer.kernels);
    x.insert(x.end(), n.layer.bias.begin(), n.layer.bias.end());
    x.insert(x.end(), n.weights.begin(), n.weights.end());
    x.insert(x.end(), n.bias.begin(), n.bias.end());
    return x;
}

std::vector<double> pack(const fields::AngleNet& n) { return pack_angles(n.angles); }

std::vector<double> pack(const fields::TopoGrad& g) {
    std::vector<double> x(g.kernels);
    x.insert(x.end(), g.kernel_bias.begin(), g.kernel_bias.end());
    x.insert(x.end(), g.weights.begin(), g.weights.end());
    x.push_back(g.bias);
    return x;
}

std::vector<double> pack(const fields::SegGrad& g) {
    std::vector<double> x(g.kernels);
    x.insert(x.end(), g.kernel_bias.begin(), g.kernel_bias.end());
    x.insert(x.end(), g.weights.begin(), g.weights.end());
    x.insert(x.end(), g.bias.begin(), g.bias.end());
    return x;
}

std::vector<double> pack_angles(const std::vector<std::pair<double, double>>& a) {
    std::vector<double> x;
    x.reserve(2 * a.size());
    for (const auto& [rx, rz] : a) {
        x.push_back(rx);
        x.push_back(rz);
    }
    return x;
}

void unpack(std::span<const double> x, fields::TopoNet& n) {
    const std::size_t nf = n.layer.bias.size();
    if (x.size() != 5 * nf + 1) throw InvalidInput("topology parameter vector has the wrong size");
    auto it = x.begin();
    std::copy(it, it + 3 * nf, n.layer.kernels.begin());
    it += 3 * nf;
    std::copy(it, it + nf, n.layer.bias.begin());
    it += nf;
    std::copy(it, it + nf, n.weights.begin());
    n.bias = x.back();
}

void unpack(std::span<const double> x, fields::SegNet& n) {
    const std::size_t nf = n.layer.bias.size(), ns = n.n_segs;
    if (x.size() != 4 * nf + nf * ns + ns)
        throw InvalidInput("segmentation parameter vector has the wrong size");
    auto it = x.begin();
    std::copy(it, it + 3 * nf, n.layer.kernels.begin());
    it += 3 * nf;
    std::copy(it, it + nf, n.layer.bias.begin());
    it += nf;
    std::copy(it, it + nf * ns, n.weights.begin());
    it += nf * ns;
    std::copy(it, it + ns, n.bias.begin());
}

void unpack(std::span<const double> x, fields::AngleNet& n) {
    if (x.size() != 2 * n.angles.size()) throw InvalidInput("angle vector has the wrong size");
    for (std::size_t s = 0; s < n.angles.size(); ++s) n.angles[s] = {x[2 * s], x[2 * s + 1]};
}

std::vector<Vec3> grid_gradient(int nx, int ny, int nz, double h, std::span<const double> rho) {
    const kernels::HexGrid g{nx, ny, nz};
    if (rho.size() != g.n_elements()) throw InvalidInput("grid_gradient: density size mismatch");
    std::vector<Vec3> out(rho.size(), Vec3{0.0, 0.0, 0.0});
    const int dims[3] = {nx, ny, nz};
    for (int k = 0; k < nz; ++k)
        for (int j = 0; j < ny; ++j)
            for (int i = 0; i < nx; ++i) {
                const int idx[3] = {i, j, k};
                Vec3& o = out[g.element(i, j, k)];
                for (int d = 0; d < 3; ++d) {
                    if (dims[d] == 1) continue;
                    int lo[3] = {i, j, k}, hi[3] = {i, j, k};
                    lo[d] = std::max(idx[d] - 1, 0);
                    hi[d] = std::min(idx[d] + 1, dims[d] - 1);
                    o[d] = (rho[g.element(hi[0], hi[1], hi[2])] - rho[g.element(lo[0], lo[1], lo[2])]) /
                           (double(hi[d] - lo[d]) * h);
                }
            }
    return out;
}

am::OverhangParams overhang_params(const ProblemDomain& problem) {
    am::OverhangParams p;
    p.critical_angle = problem.critical_angle_deg * kDeg;
    p.beta = problem.beta;
    p.char_area = problem.char_area();
    return p;
}

am::OverhangReport overhang_report(const ProblemDomain& problem, const fields::SampleBatch& batch,
                                   const fields::AngleNet& angles, int multiplier) {
    const am::OverhangParams op = overhang_params(problem);
    const double h = problem.element_size() / multiplier;
    const auto lowest = am::segment_lowest(batch, angles, op);
    return am::segmented_overhang(batch, angles, op, h * h * h, lowest);
}

std::vector<double> simp_density(const ProblemDomain& problem, std::span<const double> theta) {
    const std::size_t n = std::size_t(problem.nelx) * problem.nely * problem.nelz;
    if (theta.size() != n) throw InvalidInput("simp logits do not match the element count");
    std::vector<double> raw(n);
    for (std::size_t e = 0; e < n; ++e) raw[e] = sigmoid(theta[e]);
    if (problem.mirror == Mirror::none) return raw;
    const auto mir = mirror_elements(problem, problem.mirror);
    std::vector<double> rho(n);
    for (std::size_t e = 0; e < n; ++e) rho[e] = 0.5 * (raw[e] + raw[mir[e]]);
    return rho;
}

fields::SampleBatch voxel_batch(const ProblemDomain& problem, std::span<const double> density,
                                int multiplier) {
    const int m = multiplier;
    const auto pts = problem.sample_grid(m);
    if (density.size() != pts.size()) throw InvalidInput("voxel density does not match the grid");
    const auto grad = grid_gradient(problem.nelx * m, problem.nely * m, problem.nelz * m,
                                    problem.element_size() / m, density);
    const std::size_t n = pts.size();
    return fields::combine(pts, density, grad, std::vector<double>(n, 1.0),
                           std::vector<Vec3>(n, Vec3{0.0, 0.0, 0.0}), 1);
}

LossEvaluator::LossEvaluator(const ProblemDomain& problem, Mode mode)
    : problem_(problem),
      mode_(mode),
      points_(problem.sample_grid()),
      passive_(problem.passive_mask()),
      solver_(problem.mesh(), problem.material, problem.boundary_conditions(),
              problem.solver_options()) {
    if (problem_.mirror != Mirror::none) {
        mirrored_.resize(points_.size());
        for (std::size_t i = 0; i < points_.size(); ++i)
            mirrored_[i] = mirror_point(points_[i], problem_.mirror);
    }
    const std::vector<double> uniform(points_.size(), problem_.vol_frac);
    c0_ = solver_.solve(uniform).compliance;
    if (!(c0_ > 0.0)) throw ConfigError("c0", "initial compliance is not positive");
    solver_.options().warm_start = true;
}

double LossEvaluator::cell_volume() const {
    const double h = problem_.element_size();
    return h * h * h;
}

void LossEvaluator::finish(Evaluation& ev, const fields::SampleBatch& batch,
                           const fields::AngleNet& angles, const EvalRequest& req, double passive) {
    const am::OverhangParams op = overhang_params(problem_);
    if (req.lowest.empty())
        ev.lowest = am::segment_lowest(batch, angles, op);
    else
        ev.lowest.assign(req.lowest.begin(), req.lowest.end());
    ev.overhang = am::segmented_overhang(batch, angles, op, cell_volume(), ev.lowest);
    ev.P = ev.overhang.P;
    ev.H = ev.overhang.H;
    ev.rho_bar = ordered_sum(ev.density) / double(ev.density.size());
    ev.loss = total_loss(ev.compliance, c0_, ev.rho_bar, problem_.vol_frac,
                         problem_.height_penalty ? ev.H : ev.P, req.penalties.alpha1,
                         req.penalties.alpha2, passive);
}

Evaluation LossEvaluator::evaluate(const fields::FieldParams& params, const EvalRequest& req) {
    if (mode_ == Mode::simp) throw InvalidInput("neural evaluation requested in simp-baseline mode");
    const Mirror mirror = problem_.mirror;
    const std::size_t n = points_.size();
    const int ns = params.seg.n_segs;
    if (params.angles.n_segs() != ns)
        throw InvalidInput("angle count does not match the segment count");

    Evaluation ev;
    const fields::SampleBatch batch = evaluate_field(params, points_, mirror);
    ev.density = batch.density;
    const fea::FeaResult fr = solver_.solve(ev.density);
    ev.compliance = fr.compliance;
    ev.fea_iterations = fr.iterations;

    std::vector<Vec3> passive_pts;
    for (std::size_t e = 0; e < n; ++e)
        if (passive_[e]) passive_pts.push_back(points_[e]);
    const double passive = passive_loss(params.topo, passive_pts);
    finish(ev, batch, params.angles, req, passive);

    ev.grads = fields::zero_grads(params);
    if (!req.need_grad) return ev;

    std::vector<std::size_t> all;
    std::span<const std::size_t> rows = req.rows;
    if (rows.empty()) {
        all.resize(n);
        for (std::size_t e = 0; e < n; ++e) all[e] = e;
        rows = all;
    }
    const std::size_t m = rows.size();
    const double a1 = req.penalties.alpha1, a2 = req.penalties.alpha2;
    const double V = problem_.vol_frac;
    const double dvol = a1 * 2.0 * (ev.rho_bar / V - 1.0) / (V * double(n));

    const fields::SampleBatch sub = select_rows(batch, rows);
    fields::Upstream up;
    up.d_density.resize(m * ns);
    up.d_grad.assign(m * ns, Vec3{0.0, 0.0, 0.0});
    for (std::size_t r = 0; r < m; ++r) {
        const double g = fr.sensitivity[rows[r]] / c0_ + dvol;
        for (int s = 0; s < ns; ++s) up.d_density[r * ns + s] = g;
    }
    std::size_t bytes = bytes_of(sub) + bytes_of(up.d_density) + bytes_of(up.d_grad);
    if (a2 > 0.0) {
        const am::MetricGradient mg = am::segmented_overhang_grad(
            sub, params.angles, overhang_params(problem_), cell_volume(), problem_.height_penalty, ev.lowest);
        bytes += bytes_of(mg.d_grad);
        for (std::size_t i = 0; i < m * ns; ++i)
            for (int d = 0; d < 3; ++d) up.d_grad[i][d] = a2 * mg.d_grad[i][d];
        if (req.active.angles)
            for (int s = 0; s < ns; ++s)
                ev.grads.angles[s] = {a2 * mg.d_angles[s].first, a2 * mg.d_angles[s].second};
    }
    const fields::SplitUpstream split = fields::split_upstream(sub, up);
    bytes += bytes_of(split.d_topo) + bytes_of(split.d_topo_grad) + bytes_of(split.d_seg) +
             bytes_of(split.d_seg_grad);

    const std::size_t copies = mirror == Mirror::none ? 1 : 2;
    if (req.active.topo) {
        std::vector<Vec3> pts;
        std::vector<double> dr;
        std::vector<Vec3> dg;
        pts.reserve(copies * m);
        dr.reserve(copies * m);
        dg.reserve(copies * m);
        const double half = mirror == Mirror::none ? 1.0 : 0.5;
        for (std::size_t r = 0; r < m; ++r) {
            pts.push_back(sub.points[r]);
            dr.push_back(half * split.d_topo[r]);
            Vec3 g = split.d_topo_grad[r];
            for (double& c : g) c *= half;
            dg.push_back(g);
        }
        if (mirror != Mirror::none)
            for (std::size_t r = 0; r < m; ++r) {
                pts.push_back(mirrored_[rows[r]]);
                dr.push_back(0.5 * split.d_topo[r]);
                Vec3 g = mirror_vector(split.d_topo_grad[r], mirror);
                for (double& c : g) c *= 0.5;
                dg.push_back(g);
            }
        for (std::size_t r = 0; r < m; ++r)
            if (passive_[rows[r]]) {
                pts.push_back(sub.points[r]);
                dr.push_back(1.0);
                dg.push_back({0.0, 0.0, 0.0});
            }
        bytes += bytes_of(pts) + bytes_of(dr) + bytes_of(dg);
        fields::topo_backprop(params.topo, pts, dr, dg, ev.grads.topo);
    }
    if (req.active.seg && ns > 1) {
        std::vector<Vec3> pts;
        std::vector<double> dw;
        std::vector<Vec3> dg;
        const double half = mirror == Mirror::none ? 1.0 : 0.5;
        for (std::size_t r = 0; r < m; ++r) pts.push_back(sub.points[r]);
        for (std::size_t i = 0; i < m * ns; ++i) {
            dw.push_back(half * split.d_seg[i]);
            Vec3 g = split.d_seg_grad[i];
            for (double& c : g) c *= half;
            dg.push_back(g);
        }
        if (mirror != Mirror::none) {
            for (std::size_t r = 0; r < m; ++r) pts.push_back(mirrored_[rows[r]]);
            for (std::size_t i = 0; i < m * ns; ++i) {
                dw.push_back(0.5 * split.d_seg[i]);
                Vec3 g = mirror_vector(split.d_seg_grad[i], mirror);
                for (double& c : g) c *= 0.5;
                dg.push_back(g);
            }
        }
        bytes += bytes_of(pts) + bytes_of(dw) + bytes_of(dg);
        fields::seg_backprop(params.seg, pts, dw, dg, ev.grads.seg);
    }
    ev.grad_bytes = bytes;
    return ev;
}

Evaluation LossEvaluator::evaluate_simp(std::span<const double> theta, const fields::AngleNet& angles,
                                        const EvalRequest& req) {
    const std::size_t n = points_.size();
    if (theta.size() != n) throw InvalidInput("simp logits do not match the element count");
    if (angles.n_segs() != 1) throw InvalidInput("simp-baseline uses a single segment");
    const Mirror mirror = problem_.mirror;
    std::vector<std::size_t> mir;
    if (mirror != Mirror::none) mir = mirror_elements(problem_, mirror);
    Evaluation ev;
    ev.density = simp_density(problem_, theta);
    const fea::FeaResult fr = solver_.solve(ev.density);
    ev.compliance = fr.compliance;
    ev.fea_iterations = fr.iterations;

    const fields::SampleBatch batch = voxel_batch(problem_, ev.density);

    std::vector<double> passive_rho;
    for (std::size_t e = 0; e < n; ++e)
        if (passive_[e]) passive_rho.push_back(ev.density[e]);
    finish(ev, batch, angles, req, ordered_sum(passive_rho));
    if (!req.need_grad) return ev;

    const double V = problem_.vol_frac;
    const double dvol = req.penalties.alpha1 * 2.0 * (ev.rho_bar / V - 1.0) / (V * double(n));
    std::vector<double> g(n);
    for (std::size_t e = 0; e < n; ++e)
        g[e] = fr.sensitivity[e] / c0_ + dvol + (passive_[e] ? 1.0 : 0.0);
    ev.simp_grad.assign(n, 0.0);
    std::vector<unsigned char> on(n, req.rows.empty() ? 1 : 0);
    for (std::size_t e : req.rows) on[e] = 1;
    for (std::size_t e = 0; e < n; ++e) {
        if (!on[e]) continue;
        const double ge = mirror == Mirror::none ? g[e] : 0.5 * (g[e] + g[mir[e]]);
        const double r = sigmoid(theta[e]);
        ev.simp_grad[e] = r * (1.0 - r) * ge;
    }
    ev.grad_bytes = bytes_of(g) + bytes_of(ev.simp_grad) + bytes_of(on);
    return ev;
}

std::vector<std::vector<std::size_t>> y_bands(const ProblemDomain& p, int n) {
    if (n < 1 || n > p.nely) throw ConfigError("batches", "batches must be in [1, nely]");
    const kernels::HexGrid g{p.nelx, p.nely, p.nelz};
    std::vector<std::vector<std::size_t>> bands(n);
    for (int b = 0; b < n; ++b) {
        const int j0 = b * p.nely / n, j1 = (b + 1) * p.nely / n;
        for (int k = 0; k < p.nelz; ++k)
            for (int j = j0; j < j1; ++j)
                for (int i = 0; i < p.nelx; ++i) bands[b].push_back(g.element(i, j, k));
        std::sort(bands[b].begin(), bands[b].end());
    }
    return bands;
}

fields::FieldParams initial_params(const ProblemDomain& problem, Mode mode) {
    const int ns = mode == Mode::topo_angle_seg ? problem.n_segs : 1;
    const fields::FieldInit init = problem.field_init();
    const auto pts = problem.sample_grid();
    fields::FieldParams p;
    p.topo = fields::make_topo_net(init);
    fields::calibrate_mean_density(p.topo, pts, problem.vol_frac);
    p.seg = fields::make_seg_net(init, ns);
    if (ns > 1) {
        const auto mask = problem.passive_mask();
        std::vector<Vec3> design;
        for (std::size_t e = 0; e < pts.size(); ++e)
            if (!mask[e]) design.push_back(pts[e]);
        const auto seeds = fields::farthest_point_seeds(design, ns);
        fields::seg_pretrain_inverse_distance(p.seg, pts, seeds, problem.element_size());
    }
    p.angles = fields::make_angle_net(ns, problem.init_rx_deg * kDeg, problem.init_rz_deg * kDeg);
    return p;
}

namespace {

HistoryRow make_row(int it, const Evaluation& ev, const Penalties& pen, const std::string& phase) {
    return {it, ev.loss.value, ev.compliance, ev.rho_bar, ev.P, ev.H, pen.alpha1, pen.alpha2, phase};
}

void fill_outputs(RunResult& out, const Evaluation& ev, const fields::SampleBatch& batch,
                  const fields::AngleNet& angles, const am::OverhangParams& op) {
    out.density = ev.density;
    out.compliance = ev.compliance;
    out.P = ev.P;
    out.H = ev.H;
    out.rho_bar = ev.rho_bar;
    out.segments = ev.overhang.segments;
    const std::size_t n = batch.size();
    const int ns = batch.n_segs;
    out.labels.assign(n, 0);
    out.overhang_weight.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        int best = 0;
        for (int s = 1; s < ns; ++s)
            if (batch.seg_weights[i * ns + s] > batch.seg_weights[i * ns + best]) best = s;
        out.labels[i] = best;
    }
    for (int s = 0; s < ns; ++s) {
        std::vector<Vec3> g(n);
        for (std::size_t i = 0; i < n; ++i) g[i] = batch.per_segment_grad[i * ns + s];
        const Vec3 b = am::build_vector(angles.angles[s].first, angles.angles[s].second).b;
        const auto w = am::overhang_weights(g, b, op);
        for (std::size_t i = 0; i < n; ++i) out.overhang_weight[i] += batch.seg_weights[i * ns + s] * w[i];
    }
}

RunResult run_impl(const ProblemDomain& problem, Mode mode, int n_batches, const RunOptions& options) {
    const auto t0 = std::chrono::steady_clock::now();
    problem.validate();
    const Schedule& sch = problem.schedule;
    const auto bands = y_bands(problem, n_batches);

    LossEvaluator ev(problem, mode);
    RunResult out;
    out.mode = mode;
    out.c0 = ev.c0();
    out.params = initial_params(problem, mode);
    const bool simp = mode == Mode::simp;
    if (simp) {
        out.simp_theta.assign(ev.points().size(),
                              std::log(problem.vol_frac / (1.0 - problem.vol_frac)));
        out.params.seg = fields::make_seg_net(problem.field_init(), 1);
    }

    GroupState st_topo, st_seg, st_angle, st_simp;
    const StepRates topo_r{sch.sgd_lr, sch.adam_lr, sch.adam_beta1, sch.adam_beta2, sch.adam_eps};
    const StepRates seg_r{sch.seg_sgd_lr, sch.seg_adam_lr, sch.adam_beta1, sch.adam_beta2, sch.adam_eps};
    const StepRates ang_r{sch.angle_sgd_lr, sch.angle_adam_lr, sch.adam_beta1, sch.adam_beta2,
                          sch.adam_eps};
    const StepRates simp_r{sch.simp_sgd_lr, sch.simp_adam_lr, sch.adam_beta1, sch.adam_beta2,
                           sch.adam_eps};

    Evaluation last;
    for (int it = 0; it < sch.iterations; ++it) {
        const Penalties pen = penalty_schedule(it, sch, mode);
        const Groups act = phase_gate(it, sch, mode);
        const bool final_iter = it == sch.iterations - 1;
        for (std::size_t b = 0; b < bands.size(); ++b) {
            EvalRequest req;
            req.penalties = pen;
            req.active = act;
            req.need_grad = !final_iter;
            req.rows = bands[b];
            Evaluation e = simp ? ev.evaluate_simp(out.simp_theta, out.params.angles, req)
                                : ev.evaluate(out.params, req);
            if (b == 0) {
                out.history.push_back(make_row(it, e, pen, phase_name(act, mode)));
                if (options.on_row) options.on_row(out.history.back());
            }
            if (final_iter) {
                last = std::move(e);
                break;
            }
            out.peak_grad_bytes = std::max(out.peak_grad_bytes, e.grad_bytes);
            if (simp) {
                step(out.simp_theta, e.simp_grad, st_simp, it, sch.sgd_iters, simp_r, "simp");
                continue;
            }
            if (act.topo) {
                auto x = pack(out.params.topo);
                step(x, pack(e.grads.topo), st_topo, it, sch.sgd_iters, topo_r, "topology");
                unpack(x, out.params.topo);
            }
            if (act.seg && out.params.seg.n_segs > 1) {
                auto x = pack(out.params.seg);
                step(x, pack(e.grads.seg), st_seg, it, sch.sgd_iters, seg_r, "segmentation");
                unpack(x, out.params.seg);
            }
            if (act.angles) {
                auto x = pack(out.params.angles);
                step(x, pack_angles(e.grads.angles), st_angle, it, sch.sgd_iters, ang_r, "angles");
                unpack(x, out.params.angles);
            }
        }
    }

    const am::OverhangParams op = overhang_params(problem);
    if (simp) {
        fill_outputs(out, last, voxel_batch(problem, last.density), out.params.angles, op);
    } else {
        const auto batch = evaluate_field(out.params, ev.points(), problem.mirror);
        fill_outputs(out, last, batch, out.params.angles, op);
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

}  // namespace

RunResult run(const ProblemDomain& problem, Mode mode, const RunOptions& options) {
    const int nb = options.batches > 0 ? options.batches : problem.schedule.batches;
    return run_impl(problem, mode, nb, options);
}

RunResult minibatch_run(const ProblemDomain& problem, Mode mode, int n_batches,
                        const RunOptions& options) {
    return run_impl(problem, mode, n_batches, options);
}

RunResult simp_baseline(const ProblemDomain& problem, const RunOptions& options) {
    return run(problem, Mode::simp, options);
}

ProblemDomain gradient_check_problem() {
    ProblemDomain p;
    p.name = "gradient-check";
    p.nelx = 4;
    p.nely = 2;
    p.nelz = 2;
    p.loads.push_back({{{1, 0, 0}, {1, 0, 1}}, {0.0, -1.0, 0.3}});
    p.fixed.push_back({{{0, 0, 0}, {0, 1, 1}}, {true, true, true}});
    p.passive.push_back({{0.75, 0.5, 0.0}, {1.0, 1.0, 0.5}});
    p.n_segs = 2;
    p.init_rx_deg = 20.0;
    p.init_rz_deg = -15.0;
    p.network.feature_grid = {2, 2, 4};
    p.network.f_max = 6.0;
    p.network.seg_f_max = 6.0;
    p.solver.tol = 1e-10;
    p.seed = 7;
    p.schedule.iterations = 1;
    p.schedule.sgd_iters = 0;
    p.schedule.topo_only_iters = 0;
    p.schedule.angle_only_iters = 0;
    return p;
}

GradientCheck check_loss_gradient(const ProblemDomain& problem, double step, double alpha1,
                                  double alpha2) {
    const auto t0 = std::chrono::steady_clock::now();
    problem.validate();
    const Mode mode = Mode::topo_angle_seg;
    LossEvaluator ev(problem, mode);
    fields::FieldParams base = initial_params(problem, mode);
    // Move off the calibrated start: denser topology, sharper segments and
    // distinct angles, so every segment has solid and no term vanishes.
    base.topo.bias += 2.0;
    for (std::size_t i = 0; i < base.seg.weights.size(); ++i)
        base.seg.weights[i] = 4.0 * base.seg.weights[i] + 0.05 * std::sin(double(i));
    for (int s = 0; s < base.angles.n_segs(); ++s) {
        base.angles.angles[s].first += 0.3 * (s + 1);
        base.angles.angles[s].second -= 0.2 * (s + 1);
    }

    EvalRequest req;
    req.penalties = {alpha1, alpha2};
    req.active = {true, true, true};
    const Evaluation e0 = ev.evaluate(base, req);
    const std::vector<am::LowestSolid> lowest = e0.lowest;
    req.lowest = lowest;
    req.need_grad = false;

    auto loss_at = [&](const fields::FieldParams& p) { return ev.evaluate(p, req).loss.value; };

    // Relative error per component with a floor at 1e-4 of the largest
    // component of the group, so entries near zero are judged absolutely.
    auto check_group = [&](std::vector<double> x, const std::vector<double>& g, auto apply) {
        double gmax = 0.0;
        for (double v : g) gmax = std::max(gmax, std::abs(v));
        double worst = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double keep = x[i];
            fields::FieldParams p = base;
            x[i] = keep + step;
            apply(x, p);
            const double lp = loss_at(p);
            x[i] = keep - step;
            apply(x, p);
            const double lm = loss_at(p);
            x[i] = keep;
            const double fd = (lp - lm) / (2.0 * step);
            const double den = std::max({std::abs(fd), std::abs(g[i]), 1e-4 * gmax, 1e-300});
            worst = std::max(worst, std::abs(fd - g[i]) / den);
        }
        return worst;
    };

    GradientCheck out;
    const auto gt = pack(e0.grads.topo);
    const auto gs = pack(e0.grads.seg);
    const auto ga = pack_angles(e0.grads.angles);
    out.n_params = gt.size() + gs.size() + ga.size();
    out.topo = check_group(pack(base.topo), gt,
                           [](const std::vector<double>& x, fields::FieldParams& p) { unpack(x, p.topo); });
    out.seg = check_group(pack(base.seg), gs,
                          [](const std::vector<double>& x, fields::FieldParams& p) { unpack(x, p.seg); });
    out.angles = check_group(pack(base.angles), ga, [](const std::vector<double>& x, fields::FieldParams& p) {
        unpack(x, p.angles);
    });
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

}  // namespace segtopo::opt
