// segtopo command line: run, analyze, upsample, validate-gradients.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "segtopo/fea.hpp"
#include "segtopo/io.hpp"
#include "segtopo/optimizer.hpp"

namespace fs = std::filesystem;
using namespace segtopo;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;
constexpr int kExitIo = 4;
constexpr int kExitSolver = 5;
constexpr int kExitResource = 6;
constexpr int kExitCheckFailed = 7;

constexpr double kDeg = std::numbers::pi / 180.0;

struct RunArgs {
    std::string config;
    std::string mode = "topo";
    int segments = 0;
    int upsample = 1;
    std::string out = "out";
    long long seed = -1;
    int batches = 0;
    int iterations = 0;
    bool quiet = false;
};

struct AnalyzeArgs {
    std::string config;
    std::string params;
    std::string field;
    std::vector<std::string> angles;
    std::string out;
};

struct UpsampleArgs {
    std::string config;
    std::string params;
    int upsample = 2;
    std::string out = "out";
    bool compliance = false;
};

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
}

void write_voxels(const fs::path& dir, const std::string& stem, const io::VoxelField& f) {
    io::write_file(dir / (stem + ".vtk"), io::to_vtk(f));
    io::write_file(dir / (stem + ".csv"), io::to_csv(f));
}

// "rx,rz" in degrees.
std::pair<double, double> parse_angle(const std::string& s) {
    const auto comma = s.find(',');
    if (comma == std::string::npos) throw ConfigError("angle", "--angle expects rx,rz in degrees, got '" + s + "'");
    try {
        std::size_t a = 0, b = 0;
        const double rx = std::stod(s.substr(0, comma), &a);
        const double rz = std::stod(s.substr(comma + 1), &b);
        if (a != comma || b != s.size() - comma - 1 || !std::isfinite(rx) || !std::isfinite(rz))
            throw std::invalid_argument(s);
        return {rx * kDeg, rz * kDeg};
    } catch (const std::logic_error&) {
        throw ConfigError("angle", "--angle expects rx,rz in degrees, got '" + s + "'");
    }
}

void print_report(const am::OverhangReport& r, double rho_bar,
                  const std::vector<std::pair<double, double>>& angles) {
    std::printf("rho_bar %.6f\nP %.9g\nH %.9g\n", rho_bar, r.P, r.H);
    for (std::size_t s = 0; s < r.segments.size(); ++s) {
        const auto& g = r.segments[s];
        std::printf("segment %zu: rx %.3f rz %.3f deg, P %.9g, H %.9g, lowest solid %.6g%s\n", s,
                    angles[s].first / kDeg, angles[s].second / kDeg, g.P, g.H, g.x_lowest,
                    g.degenerate ? " (degenerate: no solid)" : "");
    }
}

int cmd_run(const RunArgs& a) {
    ProblemDomain p = io::load_problem(a.config);
    const opt::Mode mode = opt::parse_mode(a.mode);
    if (a.seed >= 0) p.seed = static_cast<std::uint64_t>(a.seed);
    if (a.batches > 0) p.schedule.batches = a.batches;
    if (a.iterations > 0) {
        // phases and ramps keep their proportions
        Schedule& s = p.schedule;
        const auto scale = [&](int v) { return int(std::int64_t(v) * a.iterations / s.iterations); };
        s.sgd_iters = scale(s.sgd_iters);
        s.topo_only_iters = scale(s.topo_only_iters);
        s.angle_only_iters = scale(s.angle_only_iters);
        s.alpha1_warmup = scale(s.alpha1_warmup);
        s.alpha1_ramp = scale(s.alpha1_ramp);
        s.alpha2_ramp = scale(s.alpha2_ramp);
        s.iterations = a.iterations;
    }
    if (a.segments > 0) {
        if (a.segments > 1 && mode != opt::Mode::topo_angle_seg)
            throw ConfigError("segments", "--segments > 1 needs --mode topo-angle-seg");
        p.n_segs = a.segments;
    }
    p.validate();
    if (a.upsample > 1) (void)p.sample_grid(a.upsample);  // resource check before the run

    const fs::path dir(a.out);
    make_dir(dir);
    io::write_file(dir / "config.yaml", io::serialize_problem(p));

    std::vector<opt::HistoryRow> history;
    opt::RunOptions o;
    o.on_row = [&](const opt::HistoryRow& r) {
        history.push_back(r);
        if (!a.quiet && (r.iteration % 25 == 0 || r.iteration == p.schedule.iterations - 1))
            std::fprintf(stderr, "iter %4d  loss %.5f  c %.5g  rho %.4f  P %.4g  H %.4g  [%s]\n", r.iteration,
                         r.loss, r.compliance, r.rho_bar, r.P, r.H, r.phase.c_str());
    };
    opt::RunResult r;
    try {
        r = opt::run(p, mode, o);
    } catch (...) {
        // Keep whatever converged so far.
        try {
            io::write_file(dir / "history.csv", io::history_csv(history));
        } catch (const IoError&) {
        }
        throw;
    }

    io::write_file(dir / "history.csv", io::history_csv(r.history));
    write_voxels(dir, "voxels", io::voxels_from_run(p, r));
    io::write_file(dir / "params.bin", io::encode_params({r.mode, r.params, r.simp_theta}));
    io::write_file(dir / "summary.json", io::summary_json(p, r, p.schedule.batches));
    if (a.upsample > 1) {
        if (mode == opt::Mode::simp)
            throw InvalidInput("simp-baseline results are per element and cannot be upsampled");
        write_voxels(dir, "voxels_x" + std::to_string(a.upsample),
                     io::upsample(p, {r.mode, r.params, {}}, a.upsample));
    }
    std::printf("mode %s\ncompliance %.9g (c0 %.9g)\nrho_bar %.6f (target %.3f)\nP %.9g\nH %.9g\n"
                "time %.1f s\noutputs in %s\n",
                opt::to_string(mode), r.compliance, r.c0, r.rho_bar, p.vol_frac, r.P, r.H, r.seconds,
                dir.string().c_str());
    return 0;
}

int cmd_analyze(const AnalyzeArgs& a) {
    const ProblemDomain p = io::load_problem(a.config);
    io::Analysis res;
    if (!a.params.empty()) {
        io::SavedParams s = io::decode_params(io::read_file(a.params));
        if (!a.angles.empty()) {
            if (a.angles.size() != s.params.angles.angles.size())
                throw ConfigError("angle", "--angle count must match the saved segment count (" +
                                               std::to_string(s.params.angles.angles.size()) + ")");
            for (std::size_t i = 0; i < a.angles.size(); ++i) s.params.angles.angles[i] = parse_angle(a.angles[i]);
        }
        res = io::analyze(p, s);
    } else {
        const io::VoxelField f = io::parse_csv(io::read_file(a.field));
        std::vector<std::pair<double, double>> angles;
        for (const auto& s : a.angles) angles.push_back(parse_angle(s));
        if (angles.empty()) angles.assign(std::size_t(f.labels.empty() ? 1 : f.n_segs),
                                          {p.init_rx_deg * kDeg, p.init_rz_deg * kDeg});
        res = io::analyze_field(p, f, angles);
    }
    print_report(res.report, res.rho_bar, res.angles);
    if (!a.out.empty()) {
        make_dir(a.out);
        nlohmann::ordered_json j;
        j["rho_bar"] = res.rho_bar;
        j["P"] = res.report.P;
        j["H"] = res.report.H;
        auto segs = nlohmann::ordered_json::array();
        for (std::size_t s = 0; s < res.report.segments.size(); ++s) {
            const auto& g = res.report.segments[s];
            segs.push_back({{"rx_deg", res.angles[s].first / kDeg},
                            {"rz_deg", res.angles[s].second / kDeg},
                            {"P", g.P},
                            {"H", g.H},
                            {"lowest_solid", g.x_lowest},
                            {"degenerate", g.degenerate}});
        }
        j["segments"] = segs;
        io::write_file(fs::path(a.out) / "analysis.json", j.dump(2) + "\n");
    }
    return 0;
}

int cmd_upsample(const UpsampleArgs& a) {
    const ProblemDomain p = io::load_problem(a.config);
    const io::SavedParams s = io::decode_params(io::read_file(a.params));
    const io::VoxelField f = io::upsample(p, s, a.upsample);
    const fs::path dir(a.out);
    make_dir(dir);
    write_voxels(dir, "voxels_x" + std::to_string(a.upsample), f);
    std::printf("%d x %d x %d voxels written to %s\n", f.nx, f.ny, f.nz, dir.string().c_str());
    if (a.compliance) {
        const auto res = fea::assemble_and_solve(p.mesh(a.upsample), p.material,
                                                 p.boundary_conditions(a.upsample), f.density,
                                                 p.solver_options());
        std::printf("compliance on the refined mesh %.9g (%d CG iterations)\n", res.compliance, res.iterations);
    }
    return 0;
}

// Central differences of a scalar function of a point against its analytic gradient.
double spatial_check(const std::function<std::vector<double>(std::span<const Vec3>)>& f,
                     const std::function<std::vector<Vec3>(std::span<const Vec3>)>& grad,
                     std::span<const Vec3> pts, int n_out) {
    const double h = 1e-5;
    const auto g = grad(pts);
    double worst = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (int d = 0; d < 3; ++d) {
            Vec3 xp = pts[i], xm = pts[i];
            xp[d] += h;
            xm[d] -= h;
            const auto fp = f(std::span<const Vec3>(&xp, 1));
            const auto fm = f(std::span<const Vec3>(&xm, 1));
            for (int o = 0; o < n_out; ++o) {
                const double fd = (fp[o] - fm[o]) / (2 * h);
                const double an = g[i * n_out + o][d];
                worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3}));
            }
        }
    return worst;
}

int cmd_validate_gradients() {
    bool ok = true;
    auto report = [&](const char* name, double err, double tol) {
        const bool pass = err < tol;
        ok = ok && pass;
        std::printf("%-40s max rel err %.3e (tol %.0e)  %s\n", name, err, tol, pass ? "PASS" : "FAIL");
    };

    fields::FieldInit init;
    init.features_per_axis = 3;
    init.f_max = 8.0;
    init.seed = 5;
    const auto topo = fields::make_topo_net(init);
    auto seg = fields::make_seg_net(init, 3);
    for (std::size_t i = 0; i < seg.weights.size(); ++i) seg.weights[i] = std::sin(0.7 * double(i));
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    std::vector<Vec3> pts(50);
    for (auto& x : pts) x = {u(rng), u(rng), u(rng)};
    report("topology network spatial gradient",
           spatial_check([&](auto x) { return fields::topo_forward(topo, x); },
                         [&](auto x) { return fields::topo_spatial_grad(topo, x); }, pts, 1),
           1e-5);
    report("segmentation network spatial gradient",
           spatial_check([&](auto x) { return fields::seg_forward(seg, x); },
                         [&](auto x) { return fields::seg_spatial_grad(seg, x); }, pts, 3),
           1e-5);

    const ProblemDomain gp = opt::gradient_check_problem();
    std::vector<double> rho(std::size_t(gp.nelx) * gp.nely * gp.nelz);
    std::uniform_real_distribution<double> ur(0.1, 1.0);
    for (double& r : rho) r = ur(rng);
    report("FEA adjoint sensitivity",
           fea::sensitivity_check(gp.mesh(), gp.material, gp.boundary_conditions(), rho, int(rho.size()), 1e-5, 0),
           1e-4);

    const auto g = opt::check_loss_gradient(gp);
    std::printf("full loss on %dx%dx%d, %zu parameters, %.2f s\n", gp.nelx, gp.nely, gp.nelz, g.n_params,
                g.seconds);
    report("  topology parameters", g.topo, 1e-3);
    report("  segmentation parameters", g.seg, 1e-3);
    report("  print angles", g.angles, 1e-3);
    return ok ? 0 : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Neural-field topology optimization with additive-manufacturing constraints"};
    app.require_subcommand(1);

    RunArgs ra;
    auto* run = app.add_subcommand("run", "optimize a problem and write history, voxels, parameters");
    run->add_option("--config", ra.config, "problem file (YAML)")->required()->check(CLI::ExistingFile);
    run->add_option("--mode", ra.mode, "optimization mode")
        ->check(CLI::IsMember({"topo", "topo-angle", "topo-angle-seg", "simp-baseline"}));
    run->add_option("--segments", ra.segments, "number of segments (topo-angle-seg)")->check(CLI::Range(1, 16));
    run->add_option("--upsample", ra.upsample, "also export the field at K times the resolution")
        ->check(CLI::Range(1, 64));
    run->add_option("--out", ra.out, "output directory");
    run->add_option("--seed", ra.seed, "random seed")->check(CLI::NonNegativeNumber);
    run->add_option("--batches", ra.batches, "mini-batches per iteration")->check(CLI::PositiveNumber);
    run->add_option("--iterations", ra.iterations, "override the iteration count; phase lengths scale with it")->check(CLI::PositiveNumber);
    run->add_flag("--quiet", ra.quiet, "no progress lines");

    AnalyzeArgs aa;
    auto* analyze = app.add_subcommand("analyze", "overhang metrics of saved parameters or a voxel CSV");
    analyze->add_option("--config", aa.config, "problem file (YAML)")->required()->check(CLI::ExistingFile);
    auto* params = analyze->add_option("--params", aa.params, "saved parameters (params.bin)")->check(CLI::ExistingFile);
    auto* field = analyze->add_option("--field", aa.field, "voxel CSV (x,y,z,rho[,label])")->check(CLI::ExistingFile);
    params->excludes(field);
    analyze->add_option("--angle", aa.angles, "print angles rx,rz in degrees, one per segment");
    analyze->add_option("--out", aa.out, "write analysis.json here");

    UpsampleArgs ua;
    auto* up = app.add_subcommand("upsample", "resample saved parameters on a finer grid");
    up->add_option("--config", ua.config, "problem file (YAML)")->required()->check(CLI::ExistingFile);
    up->add_option("--params", ua.params, "saved parameters (params.bin)")->required()->check(CLI::ExistingFile);
    up->add_option("--upsample", ua.upsample, "resolution multiplier")->check(CLI::Range(1, 64));
    up->add_option("--out", ua.out, "output directory");
    up->add_flag("--compliance", ua.compliance, "solve the refined mesh and print its compliance");

    auto* vg = app.add_subcommand("validate-gradients", "finite-difference gradient suites");

    try {
        app.parse(argc, argv);
        if (*analyze && aa.params.empty() && aa.field.empty())
            throw CLI::RequiredError("analyze needs --params or --field");
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (*run) return cmd_run(ra);
        if (*analyze) return cmd_analyze(aa);
        if (*up) return cmd_upsample(ua);
        if (*vg) return cmd_validate_gradients();
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "configuration error [%s]: %s\n", e.key().c_str(), e.what());
        return kExitConfig;
    } catch (const InvalidInput& e) {
        std::fprintf(stderr, "invalid input: %s\n", e.what());
        return kExitConfig;
    } catch (const IoError& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kExitIo;
    } catch (const StructuralError& e) {
        std::fprintf(stderr, "structural error: %s\n", e.what());
        return kExitSolver;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical error: %s\n", e.what());
        return kExitSolver;
    } catch (const ResourceError& e) {
        std::fprintf(stderr, "resource error: %s\n", e.what());
        return kExitResource;
    }
    return kExitUsage;
}
