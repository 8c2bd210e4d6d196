// Acceptance checks. One line per criterion; exit status 1 if any fails.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "segtopo/am.hpp"
#include "segtopo/fea.hpp"
#include "segtopo/io.hpp"
#include "segtopo/kernels.hpp"
#include "segtopo/optimizer.hpp"

using namespace segtopo;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kGradTol = 1e-3;
constexpr double kGradSeconds = 60.0;
constexpr double kParityBand = 0.25;
constexpr double kVolumeTol = 0.02;
constexpr double kOverhangReduction = 0.80;
constexpr double kComplianceInflation = 2.5;
constexpr double kHeightComplianceBand = 0.15;
constexpr double kUpsampleTimeRatio = 0.40;
constexpr double kUpsampleComplianceLo = 1.20;
constexpr double kUpsampleComplianceHi = 2.20;
constexpr double kBatchComplianceLo = 1.00;
constexpr double kBatchComplianceHi = 1.35;
constexpr double kBatchMemoryTol = 0.20;  // relative deviation from 1/n scaling
constexpr double kSolverTol = 1e-8;
constexpr double kPatchTol = 1e-8;
constexpr double kAdjointTol = 1e-4;
constexpr double kSlabTol = 0.05;
constexpr double kFlatTopTol = 1e-3;
constexpr double kUnitNormTol = 1e-9;
constexpr double kHeavisideTol = 1e-6;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

ProblemDomain config(const std::string& name) {
    return io::load_problem(fs::path(SEGTOPO_CONFIG_DIR) / (name + ".yaml"));
}

// Runs shared between criteria are computed once.
std::map<std::string, opt::RunResult> g_runs;

const opt::RunResult& cached(const std::string& key, const ProblemDomain& p, opt::Mode mode, int batches = 1) {
    auto it = g_runs.find(key);
    if (it != g_runs.end()) return it->second;
    std::fprintf(stderr, "  [run %s: %dx%dx%d %s, %d batch(es)]\n", key.c_str(), p.nelx, p.nely, p.nelz,
                 opt::to_string(mode), batches);
    opt::RunOptions o;
    o.batches = batches;
    auto r = opt::run(p, mode, o);
    std::fprintf(stderr, "  [done %s: c %.4g, rho %.4f, P %.4g, H %.4g, %.1f s]\n", key.c_str(), r.compliance,
                 r.rho_bar, r.P, r.H, r.seconds);
    return g_runs.emplace(key, std::move(r)).first->second;
}

// ------------------------------------------------------------------ 1

Outcome gradient_fidelity() {
    const auto p = opt::gradient_check_problem();
    const auto g = opt::check_loss_gradient(p);
    const auto& fg = p.network.feature_grid;
    const bool pass = g.max() < kGradTol && g.seconds < kGradSeconds;
    return {pass, fmt("%dx%dx%d, %d features, %zu params: max rel err topo %.1e seg %.1e angles %.1e "
                      "(< %.0e), %.2f s (< %.0f s)",
                      p.nelx, p.nely, p.nelz, fg[0] * fg[1] * fg[2], g.n_params, g.topo, g.seg, g.angles,
                      kGradTol, g.seconds, kGradSeconds)};
}

// ------------------------------------------------------------------ 2

Outcome simp_parity() {
    const auto p = config("cantilever");
    const auto& nn = cached("cantilever/topo", p, opt::Mode::topo);
    const auto& simp = cached("cantilever/simp", p, opt::Mode::simp);
    const double ratio = nn.compliance / simp.compliance;
    const bool pass = std::abs(ratio - 1.0) <= kParityBand && std::abs(nn.rho_bar - p.vol_frac) < kVolumeTol &&
                      std::abs(simp.rho_bar - p.vol_frac) < kVolumeTol;
    return {pass, fmt("c neural %.4g / simp %.4g = %.3f (within 1 +- %.2f); rho_bar %.4f, %.4f (V* %.2f +- %.2f); "
                      "%.0f s + %.0f s",
                      nn.compliance, simp.compliance, ratio, kParityBand, nn.rho_bar, simp.rho_bar, p.vol_frac,
                      kVolumeTol, nn.seconds, simp.seconds)};
}

// ------------------------------------------------------------------ 3

Outcome overhang_reduction() {
    const auto p = config("cantilever");
    const auto& topo = cached("cantilever/topo", p, opt::Mode::topo);
    const auto& am = cached("cantilever/topo-angle", p, opt::Mode::topo_angle);
    const double red = topo.H > 0 ? 1.0 - am.H / topo.H : 0.0;
    const double infl = am.compliance / topo.compliance;
    const bool pass = topo.H > 0 && red >= kOverhangReduction && infl <= kComplianceInflation;
    return {pass, fmt("H topology-only %.4g -> with angles %.4g: reduction %.1f%% (>= %.0f%%); c %.4g -> %.4g, "
                      "x%.2f (<= %.1f)",
                      topo.H, am.H, 100 * red, 100 * kOverhangReduction, topo.compliance, am.compliance, infl,
                      kComplianceInflation)};
}

// ------------------------------------------------------------------ 4

Outcome height_penalty_effect() {
    const auto p = config("cantilever");
    ProblemDomain q = p;
    q.height_penalty = false;
    const auto& with = cached("cantilever/topo-angle", p, opt::Mode::topo_angle);
    const auto& without = cached("cantilever/topo-angle-area", q, opt::Mode::topo_angle);
    const double dc = std::abs(with.compliance / without.compliance - 1.0);
    const bool pass = with.H < without.H && dc <= kHeightComplianceBand;
    return {pass, fmt("H with height penalty %.4g vs without %.4g (strictly lower required); c %.4g vs %.4g, "
                      "differ %.1f%% (<= %.0f%%)",
                      with.H, without.H, with.compliance, without.compliance, 100 * dc,
                      100 * kHeightComplianceBand)};
}

// ------------------------------------------------------------------ 5

Outcome segmentation_benefit() {
    const auto p = config("bike");
    ProblemDomain single = p;
    single.n_segs = 1;
    const auto& seg = cached("bike/topo-angle-seg", p, opt::Mode::topo_angle_seg);
    const auto& one = cached("bike/topo-angle", single, opt::Mode::topo_angle);
    const bool pass = seg.H < one.H && seg.compliance < one.compliance;
    return {pass, fmt("%d segments: H %.4g, c %.4g; unsegmented: H %.4g, c %.4g (both lower required)", p.n_segs,
                      seg.H, seg.compliance, one.H, one.compliance)};
}

// ------------------------------------------------------------------ 6

Outcome upsampling_economics() {
    // 20x10x8 against 40x20x16 on the cantilever
    ProblemDomain coarse = config("cantilever");
    coarse.nelx = 20;
    coarse.nely = 10;
    coarse.nelz = 8;
    ProblemDomain fine = coarse;
    fine.nelx *= 2;
    fine.nely *= 2;
    fine.nelz *= 2;
    const auto& lo = cached("cantilever-20x10x8/topo", coarse, opt::Mode::topo);
    const auto t0 = std::chrono::steady_clock::now();
    const auto up = io::upsample(coarse, {lo.mode, lo.params, {}}, 2);
    const double t_up = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto& hi = cached("cantilever-40x20x16/topo", fine, opt::Mode::topo);

    fea::SolverOptions so = coarse.solver_options();
    const auto c_up = fea::assemble_and_solve(coarse.mesh(2), coarse.material, coarse.boundary_conditions(2),
                                              up.density, so)
                          .compliance;
    const double t_ratio = (lo.seconds + t_up) / hi.seconds;
    const double c_ratio = c_up / hi.compliance;
    const bool pass = t_ratio <= kUpsampleTimeRatio && c_ratio >= kUpsampleComplianceLo &&
                      c_ratio <= kUpsampleComplianceHi;
    return {pass, fmt("%dx%dx%d + 2x upsample %.0f s vs %dx%dx%d %.0f s: %.2f (<= %.2f); fine-grid c %.4g vs "
                      "%.4g: x%.2f (in [%.2f, %.2f])",
                      coarse.nelx, coarse.nely, coarse.nelz, lo.seconds + t_up, fine.nelx, fine.nely, fine.nelz,
                      hi.seconds, t_ratio, kUpsampleTimeRatio, c_up, hi.compliance, c_ratio,
                      kUpsampleComplianceLo, kUpsampleComplianceHi)};
}

// ------------------------------------------------------------------ 7

Outcome minibatch_equivalence() {
    // the cantilever at 1.5x resolution, 21600 elements
    ProblemDomain p = config("cantilever");
    p.nelx = 60;
    p.nely = 30;
    p.nelz = 12;
    const int nb = 4;
    const auto& full = cached("cantilever-60x30x12/topo", p, opt::Mode::topo);
    const auto& mini = cached("cantilever-60x30x12/topo/4", p, opt::Mode::topo, nb);
    const double ratio = mini.compliance / full.compliance;
    const double mem = double(full.peak_grad_bytes) / double(mini.peak_grad_bytes);
    const bool pass = ratio >= kBatchComplianceLo && ratio <= kBatchComplianceHi &&
                      std::abs(mem / nb - 1.0) <= kBatchMemoryTol;
    return {pass, fmt("%dx%dx%d: c %d batches %.4g / full %.4g = %.3f (in [%.2f, %.2f]); gradient memory "
                      "%zu -> %zu bytes, ratio %.2f (%d +- %.0f%%)",
                      p.nelx, p.nely, p.nelz, nb, mini.compliance, full.compliance, ratio, kBatchComplianceLo,
                      kBatchComplianceHi, full.peak_grad_bytes, mini.peak_grad_bytes, mem, nb, 100 * kBatchMemoryTol)};
}

// ------------------------------------------------------------------ 8

fea::BoundaryConditions clamp_and_pull(const fea::Mesh& m) {
    auto bc = fea::BoundaryConditions::empty(m);
    const auto g = m.grid();
    for (int k = 0; k <= g.nz; ++k)
        for (int j = 0; j <= g.ny; ++j)
            for (int d = 0; d < 3; ++d) bc.fixed[3 * g.node(0, j, k) + d] = 1;
    for (int k = 0; k <= g.nz; ++k) bc.force[3 * g.node(g.nx, 0, k) + 1] = -1.0 / (g.nz + 1);
    return bc;
}

// Global stiffness assembled densely, fixed dofs dropped, LU solve.
double dense_compliance(const fea::Mesh& m, const fea::Material& mat, const fea::BoundaryConditions& bc,
                        const std::vector<double>& rho) {
    const auto g = m.grid();
    const auto ke = fea::element_stiffness(1.0, mat.nu, m.element_size);
    const int n = static_cast<int>(m.n_dofs());
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n, n);
    for (int k = 0; k < g.nz; ++k)
        for (int j = 0; j < g.ny; ++j)
            for (int i = 0; i < g.nx; ++i) {
                std::size_t en[8];
                kernels::element_nodes(g, i, j, k, en);
                const double E = mat.Emin + std::pow(rho[g.element(i, j, k)], mat.penal) * (mat.E0 - mat.Emin);
                for (int a = 0; a < 24; ++a)
                    for (int b = 0; b < 24; ++b) K(3 * en[a / 3] + a % 3, 3 * en[b / 3] + b % 3) += E * ke[a * 24 + b];
            }
    std::vector<int> fr;
    for (int d = 0; d < n; ++d)
        if (!bc.fixed[d]) fr.push_back(d);
    const int nf = static_cast<int>(fr.size());
    Eigen::MatrixXd Kf(nf, nf);
    Eigen::VectorXd f(nf);
    for (int a = 0; a < nf; ++a) {
        f(a) = bc.force[fr[a]];
        for (int b = 0; b < nf; ++b) Kf(a, b) = K(fr[a], fr[b]);
    }
    return f.dot(Kf.partialPivLu().solve(f));
}

Outcome solver_correctness() {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    const fea::Material mat;
    double worst_oracle = 0.0;
    for (auto [nx, ny, nz] : {std::array{2, 1, 1}, std::array{3, 2, 2}, std::array{4, 2, 2}, std::array{4, 4, 4}})
        for (int trial = 0; trial < 3; ++trial) {
            const fea::Mesh m{nx, ny, nz, 1.0 / nx};
            std::vector<double> rho(m.n_elements());
            for (double& r : rho) r = u(rng);
            const auto bc = clamp_and_pull(m);
            const double ref = dense_compliance(m, mat, bc, rho);
            for (auto pc : {fea::Preconditioner::multigrid, fea::Preconditioner::jacobi}) {
                fea::SolverOptions so;
                so.tol = 1e-10;
                so.preconditioner = pc;
                const double c = fea::assemble_and_solve(m, mat, bc, rho, so).compliance;
                worst_oracle = std::max(worst_oracle, std::abs(c - ref) / ref);
            }
        }

    // uniaxial patch: unit cube, symmetry planes fixed, unit traction on x = 1
    double worst_patch = 0.0;
    {
        const fea::Mesh m{1, 1, 1, 1.0};
        const fea::Material pm{2.5, 1e-9, 0.3, 3.0};
        auto bc = fea::BoundaryConditions::empty(m);
        const auto g = m.grid();
        for (int c = 0; c < 8; ++c) {
            const int i = kernels::kCorner[c][0], j = kernels::kCorner[c][1], k = kernels::kCorner[c][2];
            const std::size_t nd = g.node(i, j, k);
            if (i == 0) bc.fixed[3 * nd] = 1;
            if (j == 0) bc.fixed[3 * nd + 1] = 1;
            if (k == 0) bc.fixed[3 * nd + 2] = 1;
            if (i == 1) bc.force[3 * nd] = 0.25;
        }
        fea::SolverOptions so;
        so.tol = 1e-14;
        const auto res = fea::assemble_and_solve(m, pm, bc, std::vector<double>{1.0}, so);
        for (int c = 0; c < 8; ++c) {
            const int i = kernels::kCorner[c][0], j = kernels::kCorner[c][1], k = kernels::kCorner[c][2];
            const std::size_t nd = g.node(i, j, k);
            if (i == 1) worst_patch = std::max(worst_patch, std::abs(res.u[3 * nd] - 1.0 / pm.E0) * pm.E0);
            if (j == 1) worst_patch = std::max(worst_patch, std::abs(res.u[3 * nd + 1] + pm.nu / pm.E0) * pm.E0);
            if (k == 1) worst_patch = std::max(worst_patch, std::abs(res.u[3 * nd + 2] + pm.nu / pm.E0) * pm.E0);
        }
    }

    double worst_adj = 0.0;
    for (auto [nx, ny, nz] : {std::array{2, 2, 2}, std::array{8, 4, 4}}) {
        const fea::Mesh m{nx, ny, nz, 1.0 / nx};
        std::uniform_real_distribution<double> v(0.2, 0.8);
        std::vector<double> rho(m.n_elements());
        for (double& r : rho) r = v(rng);
        worst_adj = std::max(worst_adj, fea::sensitivity_check(m, mat, clamp_and_pull(m), rho, 8, 1e-5, 3));
    }
    const bool pass = worst_oracle < kSolverTol && worst_patch < kPatchTol && worst_adj < kAdjointTol;
    return {pass, fmt("dense oracle rel err %.1e (< %.0e, up to 4x4x4, both preconditioners); patch %.1e (< %.0e); "
                      "adjoint vs FD %.1e (< %.0e)",
                      worst_oracle, kSolverTol, worst_patch, kPatchTol, worst_adj, kAdjointTol)};
}

// ------------------------------------------------------------------ 9

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Smoothed slab lo < y < hi, optionally only for x > 0; returns density and gradient.
struct Slab {
    double lo, hi, k;
    bool half = false;
    double operator()(const Vec3& x, Vec3& g) const {
        const double a = logistic(k * (x[1] - lo)), b = logistic(k * (hi - x[1]));
        const double c = half ? logistic(k * x[0]) : 1.0;
        g = {half ? a * b * k * c * (1 - c) : 0.0, k * c * (a * (1 - a) * b - b * (1 - b) * a), 0.0};
        return a * b * c;
    }
};

Outcome metric_kernels() {
    const int n = 80, nz = 8;
    const double h = 1.0 / n, k = 2.0 / h, cell = h * h * h;
    std::vector<Vec3> pts;
    for (int kk = 0; kk < nz; ++kk)
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i) pts.push_back({(i + 0.5) * h - 0.5, (j + 0.5) * h - 0.5, (kk + 0.5) * h - 0.5 * nz * h});
    auto sample = [&](const std::vector<Slab>& slabs, std::vector<double>& rho, std::vector<Vec3>& grad) {
        rho.assign(pts.size(), 0.0);
        grad.assign(pts.size(), Vec3{0, 0, 0});
        for (std::size_t i = 0; i < pts.size(); ++i)
            for (const auto& s : slabs) {
                Vec3 g;
                rho[i] += s(pts[i], g);
                for (int d = 0; d < 3; ++d) grad[i][d] += g[d];
            }
    };
    am::OverhangParams prm;
    prm.char_area = 1.0;
    const Vec3 up{0, 1, 0};
    const double interface = 1.0 * nz * h;
    std::vector<double> rho;
    std::vector<Vec3> grad;

    sample({{-1.0, 0.0, k}}, rho, grad);
    const double flat = am::overhang_area(grad, up, prm, cell) / interface;
    sample({{0.0, 1.0, k}}, rho, grad);
    const double under = am::overhang_area(grad, up, prm, cell) / interface;

    const double floor_y = -0.5 + 0.5 * h;
    auto H_at = [&](double gap) {
        sample({{-1.0, -0.4, k}, {floor_y + gap, floor_y + gap + 0.05, k, true}}, rho, grad);
        std::vector<double> hgt(pts.size()), rt(pts.size());
        for (std::size_t i = 0; i < pts.size(); ++i) {
            hgt[i] = pts[i][1];
            rt[i] = am::density_heaviside(rho[i], prm.beta);
        }
        const auto low = am::lowest_solid_height(hgt, rt);
        return am::height_penalized_overhang(pts, grad, up, prm, low.height, cell);
    };
    const double lin = H_at(0.4) / H_at(0.2) / 2.0;

    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> ang(-2 * std::numbers::pi, 2 * std::numbers::pi);
    double worst_norm = 0.0;
    for (int i = 0; i < 10000; ++i)
        worst_norm = std::max(worst_norm, std::abs(norm(am::build_vector(ang(rng), ang(rng)).b) - 1.0));

    // 1 / (1 + exp(-2 beta xi))
    const double spots[][3] = {{0.0, 10.0, 0.5},
                               {0.1, 10.0, 0.8807970779778823},
                               {-0.5, 10.0, 4.5397868702434395e-05},
                               {0.05, 20.0, 0.8807970779778823},
                               {-0.2, 5.0, 0.11920292202211755}};
    double worst_hv = 0.0;
    for (const auto& s : spots) worst_hv = std::max(worst_hv, std::abs(am::smooth_heaviside(s[0], s[1]) - s[2]));

    const bool pass = std::abs(flat) < kFlatTopTol && std::abs(under - 1.0) <= kSlabTol &&
                      std::abs(lin - 1.0) <= kSlabTol && worst_norm < kUnitNormTol && worst_hv < kHeavisideTol;
    return {pass, fmt("flat top P %.1e (< %.0e); underside P/area %.4f; height linearity %.4f (1 +- %.2f); "
                      "|b| err %.1e (< %.0e); heaviside err %.1e (< %.0e)",
                      flat, kFlatTopTol, under, lin, kSlabTol, worst_norm, kUnitNormTol, worst_hv, kHeavisideTol)};
}

// ------------------------------------------------------------------ 10

Outcome determinism() {
    ProblemDomain p = config("cantilever");
    p.nelx = 12;
    p.nely = 6;
    p.nelz = 4;
    p.n_segs = 2;
    Schedule& s = p.schedule;
    s.iterations = 40;
    s.sgd_iters = 10;
    s.topo_only_iters = 15;
    s.angle_only_iters = 10;
    s.alpha1_ramp = 20;
    s.alpha2_ramp = 10;
    std::string detail;
    bool pass = true;
    for (auto mode : {opt::Mode::topo, opt::Mode::topo_angle, opt::Mode::topo_angle_seg, opt::Mode::simp}) {
        for (int batches : {1, 2}) {
            opt::RunOptions o;
            o.batches = batches;
            const auto a = io::history_csv(opt::run(p, mode, o).history);
            const auto b = io::history_csv(opt::run(p, mode, o).history);
            const bool same = a == b;
            pass = pass && same;
            detail += fmt("%s%s/%d %s", detail.empty() ? "" : ", ", opt::to_string(mode), batches,
                          same ? "identical" : "DIFFER");
        }
    }
    return {pass, "two runs per mode and batch count, history bytes: " + detail};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> check;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all = {
        {1, "gradient fidelity", gradient_fidelity},
        {2, "SIMP parity", simp_parity},
        {3, "overhang reduction", overhang_reduction},
        {4, "height-penalty effect", height_penalty_effect},
        {5, "segmentation benefit", segmentation_benefit},
        {6, "upsampling economics", upsampling_economics},
        {7, "mini-batch equivalence", minibatch_equivalence},
        {8, "solver correctness", solver_correctness},
        {9, "metric kernels", metric_kernels},
        {10, "determinism", determinism},
    };
    std::set<int> pick;
    for (int i = 1; i < argc; ++i) pick.insert(std::atoi(argv[i]));

    int failed = 0;
    for (const auto& c : all) {
        if (!pick.empty() && !pick.count(c.id)) continue;
        Outcome o;
        try {
            o = c.check();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        std::printf("C%-2d %s  %-24s %s\n", c.id, o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str());
        std::fflush(stdout);
        if (!o.pass) ++failed;
    }
    return failed ? 1 : 0;
}
