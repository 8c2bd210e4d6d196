#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "segtopo/io.hpp"

using namespace segtopo;

namespace {

const char* kCantilever = R"(name: small
mesh: {nelx: 6, nely: 4, nelz: 2}
design: {vol_frac: 0.4, seed: 11}
am: {init_rx: 10, init_rz: -5}
network: {features_per_axis: 3, f_max: 6}
solver: {tol: 1.0e-8}
schedule:
  iterations: 8
  sgd_iters: 2
  topo_only_iters: 3
  angle_only_iters: 2
  alpha1_ramp: 4
  alpha2_ramp: 2
loads:
  - region: {lo: [1, 0, 0], hi: [1, 0, 1]}
    force: [0, -1, 0]
fixed:
  - region: {lo: [0, 0, 0], hi: [0, 1, 1]}
    dofs: xyz
)";

ProblemDomain small() { return io::parse_problem(kCantilever, "small.yaml"); }

std::string with(const std::string& from, const std::string& to) {
    std::string s = kCantilever;
    const auto at = s.find(from);
    EXPECT_NE(at, std::string::npos) << from;
    s.replace(at, from.size(), to);
    return s;
}

ConfigError config_error(const std::string& text) {
    try {
        io::parse_problem(text, "bad.yaml");
    } catch (const ConfigError& e) {
        return e;
    }
    ADD_FAILURE() << "config accepted";
    return ConfigError("", "");
}

std::size_t count(const std::string& s, const std::string& what) {
    std::size_t n = 0;
    for (auto p = s.find(what); p != std::string::npos; p = s.find(what, p + 1)) ++n;
    return n;
}

}  // namespace

TEST(Config, ParsesCantilever) {
    const auto p = small();
    EXPECT_EQ(p.nelx, 6);
    EXPECT_EQ(p.nelz, 2);
    EXPECT_DOUBLE_EQ(p.vol_frac, 0.4);
    EXPECT_EQ(p.seed, 11u);
    EXPECT_EQ(p.loads.size(), 1u);
    EXPECT_EQ(p.fixed[0].dofs, (std::array<bool, 3>{true, true, true}));
    EXPECT_DOUBLE_EQ(p.element_size(), 1.0 / 6.0);
}

TEST(Config, ShippedCantilever) {
    const auto p = io::load_problem(std::filesystem::path(SEGTOPO_CONFIG_DIR) / "cantilever.yaml");
    EXPECT_EQ(p.nelx, 40);
    EXPECT_EQ(p.nely, 20);
    EXPECT_EQ(p.nelz, 8);
    EXPECT_DOUBLE_EQ(p.vol_frac, 0.3);
}

TEST(Config, AllShippedConfigsValidate) {
    for (const auto& e : std::filesystem::directory_iterator(SEGTOPO_CONFIG_DIR))
        if (e.path().extension() == ".yaml") {
            EXPECT_NO_THROW(io::load_problem(e.path())) << e.path();
        }
}

TEST(Config, RoundTrip) {
    auto p = small();
    p.passive.push_back({{0.1, 0.2, 0.3}, {0.4, 0.5, 0.6}});
    p.mirror = Mirror::z;
    p.n_segs = 3;
    p.network.feature_grid = {2, 3, 4};
    p.fixed.push_back({{{1, 1, 0}, {1, 1, 1}}, {false, true, false}});
    p.schedule.adam_lr = 0.1 + 0.2;  // not exactly representable in short form
    const auto text = io::serialize_problem(p);
    const auto q = io::parse_problem(text);
    EXPECT_EQ(p, q);
    EXPECT_EQ(io::serialize_problem(q), text);
}

TEST(Config, VolumeFractionOutOfRange) {
    const auto e = config_error(with("vol_frac: 0.4", "vol_frac: 1.5"));
    EXPECT_EQ(e.key(), "vol_frac");
    EXPECT_NE(std::string(e.what()).find("bad.yaml:3:"), std::string::npos) << e.what();
}

TEST(Config, NoLoadsRejected) {
    std::string s = kCantilever;
    s.erase(s.find("loads:"), s.find("fixed:") - s.find("loads:"));
    const auto e = config_error(s);
    EXPECT_EQ(e.key(), "load");
    EXPECT_NE(std::string(e.what()).find("no load case"), std::string::npos);
}

TEST(Config, UnknownKeyNamesLine) {
    const auto e = config_error(with("solver: {tol: 1.0e-8}", "solver: {tol: 1.0e-8, tolerance: 3}"));
    EXPECT_EQ(e.key(), "tolerance");
    EXPECT_NE(std::string(e.what()).find("bad.yaml:6:"), std::string::npos) << e.what();
}

TEST(Config, MissingMeshKey) {
    const auto e = config_error(with("nelz: 2", "nelw: 2"));
    EXPECT_EQ(e.key(), "nelw");
}

TEST(Config, BadValueType) {
    const auto e = config_error(with("nely: 4", "nely: four"));
    EXPECT_EQ(e.key(), "nely");
}

TEST(Config, LoadOverlappingSupport) {
    const auto e = config_error(with("lo: [1, 0, 0], hi: [1, 0, 1]", "lo: [0, 0, 0], hi: [0, 0, 1]"));
    EXPECT_EQ(e.key(), "load");
    EXPECT_NE(std::string(e.what()).find("overlaps"), std::string::npos);
}

TEST(Config, UnderConstrained) {
    const auto e = config_error(with("dofs: xyz", "dofs: y"));
    EXPECT_EQ(e.key(), "fixed");
}

TEST(Config, ScheduleOrdering) {
    const auto e = config_error(with("sgd_iters: 2", "sgd_iters: 20"));
    EXPECT_EQ(e.key(), "sgd_iters");
}

TEST(Config, SyntaxError) {
    const auto e = config_error("mesh: {nelx: 1, nely: [\n");
    EXPECT_EQ(e.key(), "syntax");
}

TEST(Config, LoadSpreadsTotalForce) {
    const auto p = small();
    for (int m : {1, 2}) {
        const auto bc = p.boundary_conditions(m);
        double fy = 0.0;
        for (std::size_t d = 1; d < bc.force.size(); d += 3) fy += bc.force[d];
        EXPECT_NEAR(fy, -1.0, 1e-14);
    }
}

TEST(SampleGrid, Counts) {
    ProblemDomain p = small();
    p.nelx = 2;
    p.nely = 1;
    p.nelz = 1;
    const auto g = p.sample_grid(1);
    ASSERT_EQ(g.size(), 2u);
    EXPECT_DOUBLE_EQ(g[0][0], -0.25);
    EXPECT_DOUBLE_EQ(g[1][0], 0.25);
    EXPECT_DOUBLE_EQ(g[0][1], 0.0);
    EXPECT_EQ(p.sample_grid(2).size(), 16u);
    EXPECT_EQ(p.sample_grid(3).size(), 54u);
    EXPECT_THROW(p.sample_grid(0), InvalidInput);
    p.nelx = p.nely = p.nelz = 100;
    EXPECT_THROW(p.sample_grid(5), ResourceError);
}

TEST(SampleGrid, RefinedGridContainsCoarseCentresForOddMultipliers) {
    const auto p = small();
    const auto c = p.sample_grid(1);
    const auto f = p.sample_grid(3);
    const int fx = 3 * p.nelx, fy = 3 * p.nely;
    for (int k = 0; k < p.nelz; ++k)
        for (int j = 0; j < p.nely; ++j)
            for (int i = 0; i < p.nelx; ++i) {
                const auto& a = c[i + p.nelx * (j + p.nely * k)];
                const auto& b = f[(3 * i + 1) + fx * ((3 * j + 1) + fy * (3 * k + 1))];
                for (int d = 0; d < 3; ++d) EXPECT_NEAR(a[d], b[d], 1e-15);
            }
}

TEST(Voxels, VtkHeader) {
    io::VoxelField f;
    f.nx = 2;
    f.ny = f.nz = 1;
    f.spacing = 0.5;
    f.density = {0.25, 1.0};
    const auto vtk = io::to_vtk(f);
    EXPECT_NE(vtk.find("DIMENSIONS 3 2 2\n"), std::string::npos);
    EXPECT_NE(vtk.find("CELL_DATA 2\n"), std::string::npos);
    EXPECT_EQ(count(vtk, "SCALARS"), 1u);
    f.labels = {0, 1};
    f.n_segs = 2;
    f.overhang = {0.0, 0.5};
    const auto vtk2 = io::to_vtk(f);
    EXPECT_EQ(count(vtk2, "SCALARS"), 3u);
    EXPECT_EQ(io::to_vtk(f), vtk2);
}

TEST(Voxels, RejectsInvalidField) {
    io::VoxelField f;
    f.nx = 2;
    f.ny = f.nz = 1;
    f.density = {0.25, 1.5};
    EXPECT_THROW(io::to_vtk(f), InvalidInput);
    f.density = {0.25, 0.5};
    f.labels = {0, 2};
    EXPECT_THROW(io::to_vtk(f), InvalidInput);
}

TEST(Voxels, CsvRoundTrip) {
    const auto p = small();
    const auto r = opt::run(p, opt::Mode::topo);
    const auto f = io::voxels_from_run(p, r);
    const auto csv = io::to_csv(f);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "x,y,z,rho");
    const auto g = io::parse_csv(csv);
    EXPECT_EQ(g.density, f.density);
    EXPECT_EQ(g.points, f.points);
    EXPECT_TRUE(g.labels.empty());
    EXPECT_EQ(io::to_csv(g), csv);
}

TEST(Voxels, CsvLabelColumn) {
    auto p = small();
    p.n_segs = 2;
    const auto r = opt::run(p, opt::Mode::topo_angle_seg);
    const auto f = io::voxels_from_run(p, r);
    ASSERT_EQ(f.labels.size(), f.size());
    const auto csv = io::to_csv(f);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "x,y,z,rho,label");
    EXPECT_EQ(io::parse_csv(csv).labels, f.labels);
}

TEST(Voxels, CsvErrorsNameLine) {
    try {
        io::parse_csv("x,y,z,rho\n0,0,0,0.5\n0,0,zero,0.5\n");
        FAIL();
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
    }
}

TEST(History, RoundTripAndDeterministic) {
    const auto p = small();
    const auto a = opt::run(p, opt::Mode::topo_angle);
    const auto csv = io::history_csv(a.history);
    EXPECT_EQ(count(csv, "\n"), a.history.size() + 1);
    EXPECT_EQ(io::parse_history_csv(csv), a.history);
    EXPECT_EQ(io::history_csv(opt::run(p, opt::Mode::topo_angle).history), csv);
}

TEST(Params, RoundTripNeural) {
    auto p = small();
    p.n_segs = 3;
    io::SavedParams s{opt::Mode::topo_angle_seg, opt::initial_params(p, opt::Mode::topo_angle_seg), {}};
    const auto bytes = io::encode_params(s);
    EXPECT_EQ(bytes.substr(0, 4), "NFTO");
    const auto t = io::decode_params(bytes);
    EXPECT_EQ(t.mode, s.mode);
    EXPECT_EQ(opt::pack(t.params.topo), opt::pack(s.params.topo));
    EXPECT_EQ(opt::pack(t.params.seg), opt::pack(s.params.seg));
    EXPECT_EQ(t.params.angles.angles, s.params.angles.angles);
    EXPECT_EQ(io::encode_params(t), bytes);
}

TEST(Params, RoundTripSimp) {
    io::SavedParams s;
    s.mode = opt::Mode::simp;
    s.params.angles.angles = {{0.1, -0.2}};
    s.simp_theta = {1.0, -2.5, 3e-300};
    const auto t = io::decode_params(io::encode_params(s));
    EXPECT_EQ(t.simp_theta, s.simp_theta);
    EXPECT_EQ(t.params.angles.angles, s.params.angles.angles);
}

TEST(Params, CorruptFilesRejected) {
    io::SavedParams s;
    s.mode = opt::Mode::simp;
    s.params.angles.angles = {{0.1, -0.2}};
    s.simp_theta = {1.0, 2.0};
    const auto bytes = io::encode_params(s);
    EXPECT_THROW(io::decode_params(bytes.substr(0, bytes.size() - 3)), IoError);
    EXPECT_THROW(io::decode_params(bytes + "x"), IoError);
    EXPECT_THROW(io::decode_params("ABCD" + bytes.substr(4)), IoError);
    EXPECT_THROW(io::decode_params(""), IoError);
}

TEST(Upsample, IdentityAtOneAndCounts) {
    const auto p = small();
    const auto r = opt::run(p, opt::Mode::topo);
    const io::SavedParams s{r.mode, r.params, {}};
    const auto one = io::upsample(p, s, 1);
    EXPECT_EQ(one.density, r.density);
    const auto two = io::upsample(p, s, 2);
    EXPECT_EQ(two.size(), 8 * one.size());
    EXPECT_EQ(two.nx, 2 * p.nelx);
    EXPECT_DOUBLE_EQ(two.spacing, p.element_size() / 2);
    io::SavedParams simp{opt::Mode::simp, r.params, r.density};
    EXPECT_THROW(io::upsample(p, simp, 2), InvalidInput);
}

TEST(Upsample, MirrorSymmetricAtAnyMultiplier) {
    auto p = small();
    p.mirror = Mirror::x;
    const auto r = opt::run(p, opt::Mode::topo);
    const auto f = io::upsample(p, {r.mode, r.params, {}}, 3);
    for (int k = 0; k < f.nz; ++k)
        for (int j = 0; j < f.ny; ++j)
            for (int i = 0; i < f.nx; ++i)
                ASSERT_EQ(f.density[i + f.nx * (j + f.ny * k)],
                          f.density[(f.nx - 1 - i) + f.nx * (j + f.ny * k)]);
}

TEST(Analyze, ReproducesLoggedMetrics) {
    auto p = small();
    p.vol_frac = 0.5;
    p.n_segs = 2;
    for (auto mode : {opt::Mode::topo_angle, opt::Mode::topo_angle_seg}) {
        const auto r = opt::run(p, mode);
        const auto a = io::analyze(p, {mode, r.params, {}});
        EXPECT_NEAR(a.report.P, r.history.back().P, 1e-9);
        EXPECT_NEAR(a.report.H, r.history.back().H, 1e-9);
        EXPECT_NEAR(a.rho_bar, r.history.back().rho_bar, 1e-12);
    }
}

TEST(Analyze, ExportedSimpFieldReproducesLoggedMetrics) {
    auto p = small();
    p.vol_frac = 0.5;
    const auto r = opt::simp_baseline(p);
    const auto f = io::parse_csv(io::to_csv(io::voxels_from_run(p, r)));
    const auto a = io::analyze_field(p, f, r.params.angles.angles);
    EXPECT_NEAR(a.report.P, r.history.back().P, 1e-9);
    EXPECT_NEAR(a.report.H, r.history.back().H, 1e-9);
    const auto b = io::analyze(p, {opt::Mode::simp, r.params, r.simp_theta});
    EXPECT_NEAR(b.report.H, r.history.back().H, 1e-9);
}

TEST(Analyze, AllVoidIsDegenerate) {
    const auto p = small();
    io::VoxelField f;
    f.density.assign(std::size_t(p.nelx) * p.nely * p.nelz, 0.0);
    const auto a = io::analyze_field(p, f, {{0.0, 0.0}});
    ASSERT_EQ(a.report.segments.size(), 1u);
    EXPECT_TRUE(a.report.segments[0].degenerate);
    EXPECT_EQ(a.report.H, 0.0);
    EXPECT_EQ(a.report.P, 0.0);
}

TEST(Analyze, WrongVoxelCount) {
    const auto p = small();
    io::VoxelField f;
    f.density.assign(7, 0.5);
    EXPECT_THROW(io::analyze_field(p, f, {{0.0, 0.0}}), InvalidInput);
}

TEST(Summary, ContainsRunFacts) {
    const auto p = small();
    const auto r = opt::run(p, opt::Mode::topo);
    const auto js = io::summary_json(p, r, 1);
    EXPECT_NE(js.find("\"mode\""), std::string::npos);
    EXPECT_NE(js.find("\"compliance\""), std::string::npos);
    EXPECT_EQ(io::summary_json(p, r, 1), js);
}

TEST(Files, UnwritablePath) {
    EXPECT_THROW(io::write_file("/nonexistent-dir/x/y.csv", "a"), IoError);
    EXPECT_THROW(io::read_file("/nonexistent-dir/x/y.csv"), IoError);
}
