#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cmath>
#include <random>

#include "segtopo/fea.hpp"
#include "segtopo/kernels.hpp"

using namespace segtopo;
using namespace segtopo::fea;

namespace {

// Cantilever: x = 0 face clamped, downward load spread over the x = nelx edge at y = 0.
BoundaryConditions cantilever_bc(const Mesh& m, double force = -1.0) {
    auto bc = BoundaryConditions::empty(m);
    const auto g = m.grid();
    for (int k = 0; k <= g.nz; ++k)
        for (int j = 0; j <= g.ny; ++j)
            for (int d = 0; d < 3; ++d) bc.fixed[3 * g.node(0, j, k) + d] = 1;
    for (int k = 0; k <= g.nz; ++k) bc.force[3 * g.node(g.nx, 0, k) + 1] = force / (g.nz + 1);
    return bc;
}

std::vector<double> random_densities(std::size_t n, double lo, double hi, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> r(n);
    for (auto& v : r) v = u(rng);
    return r;
}

// Dense oracle: global K assembled entry by entry, fixed dofs eliminated, LU solve.
double dense_compliance(const Mesh& m, const Material& mat, const BoundaryConditions& bc,
                        const std::vector<double>& rho) {
    const auto g = m.grid();
    const auto ke = element_stiffness(1.0, mat.nu, m.element_size);
    const int n = static_cast<int>(m.n_dofs());
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n, n);
    for (int k = 0; k < g.nz; ++k)
        for (int j = 0; j < g.ny; ++j)
            for (int i = 0; i < g.nx; ++i) {
                std::size_t en[8];
                kernels::element_nodes(g, i, j, k, en);
                const double E = mat.Emin + std::pow(rho[g.element(i, j, k)], mat.penal) * (mat.E0 - mat.Emin);
                for (int a = 0; a < 24; ++a)
                    for (int b = 0; b < 24; ++b)
                        K(3 * en[a / 3] + a % 3, 3 * en[b / 3] + b % 3) += E * ke[a * 24 + b];
            }
    std::vector<int> freed;
    for (int d = 0; d < n; ++d)
        if (!bc.fixed[d]) freed.push_back(d);
    const int nf = static_cast<int>(freed.size());
    Eigen::MatrixXd Kf(nf, nf);
    Eigen::VectorXd f(nf);
    for (int a = 0; a < nf; ++a) {
        f(a) = bc.force[freed[a]];
        for (int b = 0; b < nf; ++b) Kf(a, b) = K(freed[a], freed[b]);
    }
    Eigen::VectorXd u = Kf.partialPivLu().solve(f);
    return f.dot(u);
}

}  // namespace

TEST(ElementStiffness, SymmetricWithSixRigidModes) {
    const auto ke = element_stiffness(Material{});
    for (int a = 0; a < 24; ++a)
        for (int b = 0; b < 24; ++b) EXPECT_EQ(ke[a * 24 + b], ke[b * 24 + a]);
    Eigen::Map<const Eigen::Matrix<double, 24, 24, Eigen::RowMajor>> K(ke.data());
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 24, 24>> eig(K);
    const auto ev = eig.eigenvalues();
    const double mx = ev.maxCoeff();
    int zero = 0;
    for (int i = 0; i < 24; ++i) {
        if (std::abs(ev(i)) < 1e-10 * mx) ++zero;
        else EXPECT_GT(ev(i), 0.0);
    }
    EXPECT_EQ(zero, 6);
    // translations produce no force
    for (int d = 0; d < 3; ++d)
        for (int a = 0; a < 24; ++a) {
            double s = 0.0;
            for (int c = 0; c < 8; ++c) s += ke[a * 24 + 3 * c + d];
            EXPECT_NEAR(s, 0.0, 1e-12);
        }
}

TEST(ElementStiffness, ScalesLinearlyWithEdge) {
    const auto k1 = element_stiffness(2.0, 0.3, 1.0);
    const auto k2 = element_stiffness(2.0, 0.3, 0.25);
    for (int i = 0; i < 576; ++i) EXPECT_NEAR(k2[i], 0.25 * k1[i], 1e-14);
}

TEST(ElementStiffness, InvalidPoissonRatio) {
    EXPECT_THROW(element_stiffness(1.0, 0.5, 1.0), ConfigError);
    Material m;
    m.nu = -0.1;
    EXPECT_THROW(m.validate(), ConfigError);
}

TEST(ElementStiffness, UniaxialPatchTest) {
    for (double h : {1.0, 0.1}) {
        Mesh m{1, 1, 1, h};
        Material mat{2.5, 1e-9, 0.3, 3.0};
        auto bc = BoundaryConditions::empty(m);
        const auto g = m.grid();
        for (int c = 0; c < 8; ++c) {
            const int i = kernels::kCorner[c][0], j = kernels::kCorner[c][1], k = kernels::kCorner[c][2];
            const std::size_t n = g.node(i, j, k);
            if (i == 0) bc.fixed[3 * n] = 1;
            if (j == 0) bc.fixed[3 * n + 1] = 1;
            if (k == 0) bc.fixed[3 * n + 2] = 1;
            if (i == 1) bc.force[3 * n] = 0.25;
        }
        SolverOptions opt;
        opt.tol = 1e-14;
        const auto res = assemble_and_solve(m, mat, bc, std::vector<double>{1.0}, opt);
        const double stress = 1.0 / (h * h);
        for (int c = 0; c < 8; ++c) {
            const int i = kernels::kCorner[c][0], j = kernels::kCorner[c][1], k = kernels::kCorner[c][2];
            const std::size_t n = g.node(i, j, k);
            if (i == 1) {
                const double E = stress / (res.u[3 * n] / h);
                EXPECT_NEAR(E, mat.E0, 1e-8 * mat.E0);
            }
            if (j == 1) {
                EXPECT_NEAR(res.u[3 * n + 1] / h, -mat.nu * stress / mat.E0, 1e-10);
            }
            if (k == 1) {
                EXPECT_NEAR(res.u[3 * n + 2] / h, -mat.nu * stress / mat.E0, 1e-10);
            }
        }
    }
}

TEST(FeaSolver, MatchesDenseOracle) {
    Material mat;
    for (auto [nx, ny, nz] : {std::array{2, 1, 1}, std::array{3, 2, 2}, std::array{4, 4, 4}}) {
        Mesh m{nx, ny, nz, 1.0 / nx};
        const auto bc = cantilever_bc(m);
        for (unsigned seed = 0; seed < 3; ++seed) {
            auto rho = random_densities(m.n_elements(), 0.05, 1.0, seed);
            if (nx == 2) rho.assign(rho.size(), 1.0);
            const double ref = dense_compliance(m, mat, bc, rho);
            for (auto pc : {Preconditioner::multigrid, Preconditioner::jacobi}) {
                SolverOptions opt;
                opt.preconditioner = pc;
                opt.tol = 1e-10;
                const auto res = assemble_and_solve(m, mat, bc, rho, opt);
                EXPECT_NEAR(res.compliance, ref, 1e-8 * ref) << nx << " " << ny << " " << nz;
            }
        }
    }
}

TEST(FeaSolver, MultigridMatchesSparseDirect) {
    Mesh m{16, 8, 8, 1.0 / 16};
    Material mat;
    const auto bc = cantilever_bc(m);
    const auto rho = random_densities(m.n_elements(), 0.01, 1.0, 7);
    SolverOptions mg;
    mg.tol = 1e-10;
    SolverOptions jac = mg;
    jac.preconditioner = Preconditioner::jacobi;
    const auto a = assemble_and_solve(m, mat, bc, rho, mg);
    const auto b = assemble_and_solve(m, mat, bc, rho, jac);
    EXPECT_NEAR(a.compliance, b.compliance, 1e-8 * b.compliance);
    EXPECT_LT(a.iterations, b.iterations);
}

TEST(FeaSolver, VoidScalesWithEmin) {
    Mesh m{4, 2, 2, 0.25};
    Material mat;
    const auto bc = cantilever_bc(m);
    const auto full = assemble_and_solve(m, mat, bc, std::vector<double>(m.n_elements(), 1.0));
    const auto empty = assemble_and_solve(m, mat, bc, std::vector<double>(m.n_elements(), 0.0));
    EXPECT_NEAR(empty.compliance * mat.Emin, full.compliance * mat.E0, 1e-6 * full.compliance);
}

TEST(FeaSolver, DoublingModulusHalvesCompliance) {
    Mesh m{6, 3, 2, 1.0 / 6};
    Material a;
    a.Emin = 0.0 + 1e-9;
    Material b = a;
    b.E0 = 2.0;
    b.Emin = 2e-9;
    const auto bc = cantilever_bc(m);
    const auto rho = random_densities(m.n_elements(), 0.1, 1.0, 3);
    SolverOptions opt;
    opt.tol = 1e-10;
    const double ca = assemble_and_solve(m, a, bc, rho, opt).compliance;
    const double cb = assemble_and_solve(m, b, bc, rho, opt).compliance;
    EXPECT_NEAR(cb, 0.5 * ca, 1e-8 * ca);
}

TEST(FeaSolver, CompliancePositiveSensitivitiesNonPositive) {
    Mesh m{8, 4, 4, 0.125};
    const auto bc = cantilever_bc(m);
    const auto rho = random_densities(m.n_elements(), 0.0, 1.0, 11);
    const auto res = assemble_and_solve(m, Material{}, bc, rho);
    EXPECT_GT(res.compliance, 0.0);
    for (double s : res.sensitivity) EXPECT_LE(s, 0.0);
}

TEST(FeaSolver, SensitivityAtFullDensity) {
    Mesh m{2, 1, 1, 0.5};
    Material mat;
    const auto bc = cantilever_bc(m);
    SolverOptions opt;
    opt.tol = 1e-12;
    FeaSolver solver(m, mat, bc, opt);
    const auto res = solver.solve(std::vector<double>(2, 1.0));
    const auto g = m.grid();
    const auto& ke = solver.unit_stiffness();
    for (int e = 0; e < 2; ++e) {
        std::size_t en[8];
        kernels::element_nodes(g, e, 0, 0, en);
        double energy = 0.0;
        for (int a = 0; a < 24; ++a)
            for (int b = 0; b < 24; ++b)
                energy += res.u[3 * en[a / 3] + a % 3] * ke[a * 24 + b] * res.u[3 * en[b / 3] + b % 3];
        EXPECT_NEAR(res.sensitivity[e], -3.0 * (mat.E0 - mat.Emin) * energy, 1e-12 * energy);
        EXPECT_LT(res.sensitivity[e], 0.0);
    }
}

TEST(FeaSolver, SymmetricSensitivitiesUnderSymmetricLoad) {
    Mesh m{4, 2, 2, 0.25};
    auto bc = BoundaryConditions::empty(m);
    const auto g = m.grid();
    for (int k = 0; k <= g.nz; ++k)
        for (int j = 0; j <= g.ny; ++j)
            for (int d = 0; d < 3; ++d) bc.fixed[3 * g.node(0, j, k) + d] = 1;
    // load at the centre of the free end, symmetric in z
    bc.force[3 * g.node(g.nx, 1, 1) + 1] = -1.0;
    SolverOptions opt;
    opt.tol = 1e-12;
    const auto res = assemble_and_solve(m, Material{}, bc, std::vector<double>(m.n_elements(), 0.5), opt);
    for (int i = 0; i < g.nx; ++i)
        for (int j = 0; j < g.ny; ++j) {
            const double a = res.sensitivity[g.element(i, j, 0)];
            const double b = res.sensitivity[g.element(i, j, 1)];
            EXPECT_NEAR(a, b, 1e-8 * std::abs(a));
        }
}

TEST(FeaSolver, AdjointMatchesFiniteDifferences) {
    Mesh m{2, 2, 2, 0.5};
    const auto bc = cantilever_bc(m);
    const auto rho = random_densities(m.n_elements(), 0.2, 0.8, 5);
    EXPECT_LT(sensitivity_check(m, Material{}, bc, rho, 8, 1e-5, 1), 1e-4);
    Mesh big{8, 4, 4, 0.125};
    const auto rho2 = random_densities(big.n_elements(), 0.2, 0.8, 6);
    EXPECT_LT(sensitivity_check(big, Material{}, cantilever_bc(big), rho2, 8, 1e-5, 2), 1e-4);
}

TEST(FeaSolver, WarmStartReusesSolution) {
    Mesh m{16, 8, 4, 1.0 / 16};
    const auto bc = cantilever_bc(m);
    SolverOptions opt;
    opt.warm_start = true;
    FeaSolver solver(m, Material{}, bc, opt);
    const auto rho = random_densities(m.n_elements(), 0.2, 1.0, 9);
    const auto first = solver.solve(rho);
    const auto second = solver.solve(rho);
    EXPECT_LE(second.iterations, 1);
    EXPECT_NEAR(first.compliance, second.compliance, 1e-6 * first.compliance);
}

TEST(FeaSolver, RejectsBadInput) {
    Mesh m{2, 1, 1, 0.5};
    auto bc = BoundaryConditions::empty(m);
    bc.force[3 * 5 + 1] = -1.0;
    EXPECT_THROW(FeaSolver(m, Material{}, bc), StructuralError);
    // six fixed dofs that all lie on one line leave a rotation free
    for (int d = 0; d < 3; ++d) {
        bc.fixed[d] = 1;
        bc.fixed[3 * 1 + d] = 1;
    }
    EXPECT_THROW(FeaSolver(m, Material{}, bc), StructuralError);
    auto good = cantilever_bc(m);
    FeaSolver solver(m, Material{}, good);
    EXPECT_THROW(solver.solve(std::vector<double>{0.5}), InvalidInput);
    EXPECT_THROW(solver.solve(std::vector<double>{0.5, 1.5}), InvalidInput);
    auto clash = good;
    clash.fixed[3 * m.grid().node(2, 0, 0) + 1] = 1;
    EXPECT_THROW(FeaSolver(m, Material{}, clash), InvalidInput);
    EXPECT_THROW((Mesh{0, 1, 1, 1.0}.validate()), ConfigError);
}

TEST(FeaSolver, NonConvergenceCarriesResidual) {
    Mesh m{8, 4, 4, 0.125};
    SolverOptions opt;
    opt.preconditioner = Preconditioner::jacobi;
    opt.max_iter = 3;
    FeaSolver solver(m, Material{}, cantilever_bc(m), opt);
    try {
        solver.solve(std::vector<double>(m.n_elements(), 1.0));
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_GT(e.residual(), 1e-6);
    }
}

TEST(Kernels, OmpMatvecAndDotMatchSerial) {
    const kernels::HexGrid g{5, 3, 4};
    const auto ke = element_stiffness(1.0, 0.3, 0.2);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::vector<double> scale(g.n_elements());
    for (double& s : scale) s = u01(rng);
    std::vector<unsigned char> free(g.n_dofs(), 1);
    for (std::size_t i = 0; i < free.size(); i += 7) free[i] = 0;
    std::vector<double> u(g.n_dofs()), ys(g.n_dofs()), yo(g.n_dofs());
    for (double& v : u) v = u01(rng) - 0.5;
    const kernels::ElementOperator op{ke.data(), 0, scale.data()};
    kernels::serial::hex_apply(g, op, free, u, ys);
    kernels::omp::hex_apply(g, op, free, u, yo);
    double big = 0.0;
    for (double v : ys) big = std::max(big, std::abs(v));
    for (std::size_t i = 0; i < ys.size(); ++i) EXPECT_NEAR(yo[i], ys[i], 1e-13 * big) << i;

    const double ds = kernels::serial::dot(u, ys), dom = kernels::omp::dot(u, ys);
    EXPECT_NEAR(dom, ds, 1e-12 * std::abs(ds));
}
