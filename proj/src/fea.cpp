#include "segtopo/fea.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace segtopo::fea {

void Mesh::validate() const {
    if (nelx < 1 || nely < 1 || nelz < 1) throw ConfigError("nelx", "element counts must be >= 1");
    if (!(element_size > 0.0) || !std::isfinite(element_size))
        throw ConfigError("element_size", "element size must be positive");
}

double Material::modulus(double rho) const { return Emin + std::pow(rho, penal) * (E0 - Emin); }

void Material::validate() const {
    if (!(E0 > 0.0) || !std::isfinite(E0)) throw ConfigError("E0", "E0 must be positive");
    if (!(Emin > 0.0) || !(Emin < E0)) throw ConfigError("Emin", "Emin must be in (0, E0)");
    if (!(nu > 0.0 && nu < 0.5)) throw ConfigError("nu", "Poisson ratio must be in (0, 0.5)");
    if (!(penal >= 1.0) || !std::isfinite(penal)) throw ConfigError("penal", "penal must be >= 1");
}

BoundaryConditions BoundaryConditions::empty(const Mesh& mesh) {
    BoundaryConditions bc;
    bc.fixed.assign(mesh.n_dofs(), 0);
    bc.force.assign(mesh.n_dofs(), 0.0);
    return bc;
}

std::size_t BoundaryConditions::n_fixed() const {
    return static_cast<std::size_t>(std::count(fixed.begin(), fixed.end(), 1));
}

void BoundaryConditions::validate(const Mesh& mesh) const {
    if (fixed.size() != mesh.n_dofs() || force.size() != mesh.n_dofs())
        throw InvalidInput("boundary condition arrays do not match the mesh dof count");
    for (std::size_t d = 0; d < force.size(); ++d) {
        if (!std::isfinite(force[d])) throw InvalidInput("non-finite load");
        if (fixed[d] && force[d] != 0.0)
            throw InvalidInput("dof " + std::to_string(d) + " is both fixed and loaded");
    }
    if (n_fixed() < 6)
        throw StructuralError("fewer than 6 constrained dofs; rigid-body modes remain");
}

void check_rigid_body_constraints(const Mesh& mesh, const BoundaryConditions& bc) {
    const kernels::HexGrid g = mesh.grid();
    const double cx = 0.5 * g.nx, cy = 0.5 * g.ny, cz = 0.5 * g.nz;
    Eigen::Matrix<double, 6, 6> gram = Eigen::Matrix<double, 6, 6>::Zero();
    for (int k = 0; k <= g.nz; ++k)
        for (int j = 0; j <= g.ny; ++j)
            for (int i = 0; i <= g.nx; ++i) {
                const std::size_t n = g.node(i, j, k);
                const double x = i - cx, y = j - cy, z = k - cz;
                const double modes[3][6] = {{1, 0, 0, 0, z, -y},
                                            {0, 1, 0, -z, 0, x},
                                            {0, 0, 1, y, -x, 0}};
                for (int d = 0; d < 3; ++d) {
                    if (!bc.fixed[3 * n + d]) continue;
                    Eigen::Matrix<double, 6, 1> row;
                    for (int m = 0; m < 6; ++m) row(m) = modes[d][m];
                    gram += row * row.transpose();
                }
            }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 6, 6>> eig(gram);
    const auto ev = eig.eigenvalues();
    if (!(ev(0) > 1e-10 * std::max(ev(5), 1.0)))
        throw StructuralError("supports leave a rigid-body motion unconstrained");
}

ElementMatrix element_stiffness(double E, double nu, double h) {
    if (!(nu > 0.0 && nu < 0.5)) throw ConfigError("nu", "Poisson ratio must be in (0, 0.5)");
    const double lambda = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    const double mu = E / (2.0 * (1.0 + nu));
    double D[6][6] = {};
    for (int a = 0; a < 3; ++a) {
        for (int b = 0; b < 3; ++b) D[a][b] = lambda;
        D[a][a] = lambda + 2.0 * mu;
        D[3 + a][3 + a] = mu;
    }
    ElementMatrix ke{};
    const double gp = 1.0 / std::sqrt(3.0);
    const double detj = h * h * h / 8.0;
    const double sc = 2.0 / h;
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c) {
                const double xi[3] = {a ? gp : -gp, b ? gp : -gp, c ? gp : -gp};
                double dN[8][3];
                for (int q = 0; q < 8; ++q) {
                    double s[3];
                    for (int ax = 0; ax < 3; ++ax) s[ax] = kernels::kCorner[q][ax] ? 1.0 : -1.0;
                    const double f0 = 1.0 + s[0] * xi[0];
                    const double f1 = 1.0 + s[1] * xi[1];
                    const double f2 = 1.0 + s[2] * xi[2];
                    dN[q][0] = 0.125 * s[0] * f1 * f2 * sc;
                    dN[q][1] = 0.125 * s[1] * f0 * f2 * sc;
                    dN[q][2] = 0.125 * s[2] * f0 * f1 * sc;
                }
                // Voigt order xx, yy, zz, yz, xz, xy
                double B[6][24] = {};
                for (int q = 0; q < 8; ++q) {
                    const int c0 = 3 * q;
                    B[0][c0] = dN[q][0];
                    B[1][c0 + 1] = dN[q][1];
                    B[2][c0 + 2] = dN[q][2];
                    B[3][c0 + 1] = dN[q][2];
                    B[3][c0 + 2] = dN[q][1];
                    B[4][c0] = dN[q][2];
                    B[4][c0 + 2] = dN[q][0];
                    B[5][c0] = dN[q][1];
                    B[5][c0 + 1] = dN[q][0];
                }
                double DB[6][24];
                for (int r = 0; r < 6; ++r)
                    for (int col = 0; col < 24; ++col) {
                        double s = 0.0;
                        for (int m = 0; m < 6; ++m) s += D[r][m] * B[m][col];
                        DB[r][col] = s;
                    }
                for (int r = 0; r < 24; ++r)
                    for (int col = 0; col < 24; ++col) {
                        double s = 0.0;
                        for (int m = 0; m < 6; ++m) s += B[m][r] * DB[m][col];
                        ke[r * 24 + col] += s * detj;
                    }
            }
    // exact symmetry
    for (int r = 0; r < 24; ++r)
        for (int col = r + 1; col < 24; ++col) {
            const double v = 0.5 * (ke[r * 24 + col] + ke[col * 24 + r]);
            ke[r * 24 + col] = ke[col * 24 + r] = v;
        }
    return ke;
}

ElementMatrix element_stiffness(const Material& material, double h) {
    material.validate();
    return element_stiffness(material.E0, material.nu, h);
}

namespace {

using kernels::ElementOperator;
using kernels::HexGrid;

void apply(const HexGrid& g, const ElementOperator& op, std::span<const unsigned char> free,
           std::span<const double> u, std::span<double> y) {
    kernels::omp::hex_apply(g, op, free, u, y);
}

double vdot(std::span<const double> a, std::span<const double> b) { return kernels::omp::dot(a, b); }

std::vector<double> inverse_diagonal(const HexGrid& g, const ElementOperator& op,
                                     std::span<const unsigned char> free) {
    std::vector<double> diag(g.n_dofs(), 0.0);
    std::size_t en[8];
    for (int ek = 0; ek < g.nz; ++ek)
        for (int ej = 0; ej < g.ny; ++ej)
            for (int ei = 0; ei < g.nx; ++ei) {
                const std::size_t e = g.element(ei, ej, ek);
                kernels::element_nodes(g, ei, ej, ek, en);
                const double* M = op.mats + op.stride * e;
                const double sc = op.scale ? op.scale[e] : 1.0;
                for (int c = 0; c < 8; ++c)
                    for (int d = 0; d < 3; ++d)
                        diag[3 * en[c] + d] += sc * M[(3 * c + d) * 24 + 3 * c + d];
            }
    for (std::size_t i = 0; i < diag.size(); ++i)
        diag[i] = (free[i] && diag[i] > 0.0) ? 1.0 / diag[i] : 0.0;
    return diag;
}

// Trilinear interpolation weights of fine offset o in {-1,0,1} along one axis.
inline double axis_weight(int o) { return o == 0 ? 1.0 : 0.5; }

}  // namespace

// Geometric multigrid V-cycle with Galerkin coarse operators built element by
// element (coarse element matrix = sum over its 8 children of P^T K P).
class Multigrid {
public:
    Multigrid(const Mesh& mesh, std::span<const unsigned char> free, int sweeps, double omega)
        : sweeps_(sweeps), omega_(omega) {
        Level fine;
        fine.g = mesh.grid();
        fine.free.assign(free.begin(), free.end());
        levels_.push_back(std::move(fine));
        while (true) {
            const HexGrid& g = levels_.back().g;
            if (g.nx % 2 || g.ny % 2 || g.nz % 2) break;
            if (g.n_dofs() <= 1500) break;
            Level c;
            c.g = {g.nx / 2, g.ny / 2, g.nz / 2};
            c.free.assign(c.g.n_dofs(), 0);
            const Level& f = levels_.back();
            for (int k = 0; k <= c.g.nz; ++k)
                for (int j = 0; j <= c.g.ny; ++j)
                    for (int i = 0; i <= c.g.nx; ++i)
                        for (int d = 0; d < 3; ++d)
                            c.free[3 * c.g.node(i, j, k) + d] =
                                f.free[3 * f.g.node(2 * i, 2 * j, 2 * k) + d];
            levels_.push_back(std::move(c));
        }
        for (Level& l : levels_) {
            l.r.assign(l.g.n_dofs(), 0.0);
            l.z.assign(l.g.n_dofs(), 0.0);
            l.t.assign(l.g.n_dofs(), 0.0);
        }
    }

    std::size_t n_levels() const { return levels_.size(); }

    void update(const ElementMatrix& ke, std::span<const double> scale) {
        ke_ = &ke;
        scale_ = scale;
        levels_[0].inv_diag = inverse_diagonal(levels_[0].g, op(0), levels_[0].free);
        for (std::size_t l = 1; l < levels_.size(); ++l) {
            galerkin(l);
            levels_[l].inv_diag = inverse_diagonal(levels_[l].g, op(l), levels_[l].free);
        }
        factor_coarsest();
    }

    const std::vector<double>& fine_inv_diag() const { return levels_[0].inv_diag; }

    ElementOperator op(std::size_t l) const {
        if (l == 0) return {ke_->data(), 0, scale_.data()};
        return {levels_[l].mats.data(), 576, nullptr};
    }

    void precondition(std::span<const double> r, std::span<double> z) {
        std::copy(r.begin(), r.end(), levels_[0].r.begin());
        vcycle(0);
        std::copy(levels_[0].z.begin(), levels_[0].z.end(), z.begin());
    }

private:
    struct Level {
        HexGrid g;
        std::vector<unsigned char> free;
        std::vector<double> mats;
        std::vector<double> inv_diag;
        std::vector<double> r, z, t;
    };

    void galerkin(std::size_t l) {
        const Level& f = levels_[l - 1];
        Level& c = levels_[l];
        const ElementOperator fop = op(l - 1);
        c.mats.assign(c.g.n_elements() * 576, 0.0);
        // interpolation weight of child corner q to coarse corner Q for child (a,b,cz)
        const long n_coarse = static_cast<long>(c.g.n_elements());
#pragma omp parallel for schedule(static)
        for (long E = 0; E < n_coarse; ++E) {
            const int I = static_cast<int>(E % c.g.nx);
            const int J = static_cast<int>((E / c.g.nx) % c.g.ny);
            const int K = static_cast<int>(E / (std::size_t(c.g.nx) * c.g.ny));
            std::size_t cn[8];
            kernels::element_nodes(c.g, I, J, K, cn);
            double* KE = c.mats.data() + 576 * E;
            double P[24][24];
            double T[24][24];
            for (int child = 0; child < 8; ++child) {
                const int a = kernels::kCorner[child][0];
                const int b = kernels::kCorner[child][1];
                const int cc = kernels::kCorner[child][2];
                const int fi = 2 * I + a, fj = 2 * J + b, fk = 2 * K + cc;
                const std::size_t fe = f.g.element(fi, fj, fk);
                std::size_t fnodes[8];
                kernels::element_nodes(f.g, fi, fj, fk, fnodes);
                const double* Kc = fop.mats + fop.stride * fe;
                const double sc = fop.scale ? fop.scale[fe] : 1.0;
                for (int q = 0; q < 24; ++q)
                    for (int Q = 0; Q < 24; ++Q) P[q][Q] = 0.0;
                for (int q = 0; q < 8; ++q) {
                    const double t[3] = {0.5 * (a + kernels::kCorner[q][0]),
                                         0.5 * (b + kernels::kCorner[q][1]),
                                         0.5 * (cc + kernels::kCorner[q][2])};
                    for (int Q = 0; Q < 8; ++Q) {
                        double w = 1.0;
                        for (int ax = 0; ax < 3; ++ax)
                            w *= kernels::kCorner[Q][ax] ? t[ax] : 1.0 - t[ax];
                        if (w == 0.0) continue;
                        for (int d = 0; d < 3; ++d) {
                            if (!f.free[3 * fnodes[q] + d] || !c.free[3 * cn[Q] + d]) continue;
                            P[3 * q + d][3 * Q + d] = w;
                        }
                    }
                }
                // T = Kc P
                for (int r = 0; r < 24; ++r)
                    for (int Q = 0; Q < 24; ++Q) {
                        double s = 0.0;
                        for (int q = Q % 3; q < 24; q += 3) s += Kc[r * 24 + q] * P[q][Q];
                        T[r][Q] = sc * s;
                    }
                // KE += P^T T
                for (int R = 0; R < 24; ++R)
                    for (int Q = 0; Q < 24; ++Q) {
                        double s = 0.0;
                        for (int r = R % 3; r < 24; r += 3) s += P[r][R] * T[r][Q];
                        KE[R * 24 + Q] += s;
                    }
            }
        }
    }

    void factor_coarsest() {
        const Level& c = levels_.back();
        const HexGrid& g = c.g;
        const ElementOperator cop = op(levels_.size() - 1);
        std::vector<Eigen::Triplet<double>> trip;
        trip.reserve(g.n_elements() * 576 + g.n_dofs());
        std::size_t en[8];
        for (int k = 0; k < g.nz; ++k)
            for (int j = 0; j < g.ny; ++j)
                for (int i = 0; i < g.nx; ++i) {
                    const std::size_t e = g.element(i, j, k);
                    kernels::element_nodes(g, i, j, k, en);
                    const double* M = cop.mats + cop.stride * e;
                    const double sc = cop.scale ? cop.scale[e] : 1.0;
                    for (int r = 0; r < 24; ++r) {
                        const std::size_t gr = 3 * en[r / 3] + r % 3;
                        if (!c.free[gr]) continue;
                        for (int q = 0; q < 24; ++q) {
                            const std::size_t gq = 3 * en[q / 3] + q % 3;
                            if (!c.free[gq]) continue;
                            trip.emplace_back(static_cast<int>(gr), static_cast<int>(gq),
                                              sc * M[r * 24 + q]);
                        }
                    }
                }
        for (std::size_t d = 0; d < g.n_dofs(); ++d)
            if (!c.free[d]) trip.emplace_back(static_cast<int>(d), static_cast<int>(d), 1.0);
        Eigen::SparseMatrix<double> A(static_cast<int>(g.n_dofs()), static_cast<int>(g.n_dofs()));
        A.setFromTriplets(trip.begin(), trip.end());
        coarse_.compute(A);
        if (coarse_.info() != Eigen::Success)
            throw StructuralError("coarse stiffness factorization failed (singular system)");
    }

    void smooth(std::size_t l, bool zero_start) {
        Level& L = levels_[l];
        const std::size_t n = L.g.n_dofs();
        int start = 0;
        if (zero_start) {
            for (std::size_t i = 0; i < n; ++i) L.z[i] = omega_ * L.inv_diag[i] * L.r[i];
            start = 1;
        }
        for (int s = start; s < sweeps_; ++s) {
            apply(L.g, op(l), L.free, L.z, L.t);
            for (std::size_t i = 0; i < n; ++i) L.z[i] += omega_ * L.inv_diag[i] * (L.r[i] - L.t[i]);
        }
    }

    void vcycle(std::size_t l) {
        Level& L = levels_[l];
        if (l + 1 == levels_.size()) {
            Eigen::Map<const Eigen::VectorXd> rhs(L.r.data(), static_cast<Eigen::Index>(L.r.size()));
            Eigen::VectorXd sol = coarse_.solve(rhs);
            for (std::size_t i = 0; i < L.z.size(); ++i) L.z[i] = L.free[i] ? sol(i) : 0.0;
            return;
        }
        smooth(l, true);
        apply(L.g, op(l), L.free, L.z, L.t);
        for (std::size_t i = 0; i < L.t.size(); ++i) L.t[i] = L.r[i] - L.t[i];
        restrict_to(l);
        vcycle(l + 1);
        prolong_add(l);
        smooth(l, false);
    }

    // coarse r = P^T (fine residual held in fine.t)
    void restrict_to(std::size_t l) {
        const Level& f = levels_[l];
        Level& c = levels_[l + 1];
        const long n_nodes = static_cast<long>(c.g.n_nodes());
#pragma omp parallel for schedule(static)
        for (long node = 0; node < n_nodes; ++node) {
            const int I = static_cast<int>(node % (c.g.nx + 1));
            const int J = static_cast<int>((node / (c.g.nx + 1)) % (c.g.ny + 1));
            const int K = static_cast<int>(node / (std::size_t(c.g.nx + 1) * (c.g.ny + 1)));
            double acc[3] = {0.0, 0.0, 0.0};
            for (int oz = -1; oz <= 1; ++oz) {
                const int k = 2 * K + oz;
                if (k < 0 || k > f.g.nz) continue;
                for (int oy = -1; oy <= 1; ++oy) {
                    const int j = 2 * J + oy;
                    if (j < 0 || j > f.g.ny) continue;
                    for (int ox = -1; ox <= 1; ++ox) {
                        const int i = 2 * I + ox;
                        if (i < 0 || i > f.g.nx) continue;
                        const double w = axis_weight(ox) * axis_weight(oy) * axis_weight(oz);
                        const std::size_t fn = f.g.node(i, j, k);
                        for (int d = 0; d < 3; ++d)
                            if (f.free[3 * fn + d]) acc[d] += w * f.t[3 * fn + d];
                    }
                }
            }
            for (int d = 0; d < 3; ++d)
                c.r[3 * node + d] = c.free[3 * node + d] ? acc[d] : 0.0;
        }
    }

    // fine z += P (coarse z)
    void prolong_add(std::size_t l) {
        Level& f = levels_[l];
        const Level& c = levels_[l + 1];
        const long n_nodes = static_cast<long>(f.g.n_nodes());
#pragma omp parallel for schedule(static)
        for (long node = 0; node < n_nodes; ++node) {
            const int i = static_cast<int>(node % (f.g.nx + 1));
            const int j = static_cast<int>((node / (f.g.nx + 1)) % (f.g.ny + 1));
            const int k = static_cast<int>(node / (std::size_t(f.g.nx + 1) * (f.g.ny + 1)));
            int ci[2], cj[2], ck[2];
            double wi[2], wj[2], wk[2];
            int ni = 0, nj = 0, nk = 0;
            auto split = [](int x, int* c, double* w, int& n) {
                if (x % 2 == 0) {
                    c[0] = x / 2;
                    w[0] = 1.0;
                    n = 1;
                } else {
                    c[0] = (x - 1) / 2;
                    c[1] = (x + 1) / 2;
                    w[0] = w[1] = 0.5;
                    n = 2;
                }
            };
            split(i, ci, wi, ni);
            split(j, cj, wj, nj);
            split(k, ck, wk, nk);
            double acc[3] = {0.0, 0.0, 0.0};
            for (int a = 0; a < nk; ++a)
                for (int b = 0; b < nj; ++b)
                    for (int cc = 0; cc < ni; ++cc) {
                        const std::size_t cn = c.g.node(ci[cc], cj[b], ck[a]);
                        const double w = wi[cc] * wj[b] * wk[a];
                        for (int d = 0; d < 3; ++d) acc[d] += w * c.z[3 * cn + d];
                    }
            for (int d = 0; d < 3; ++d)
                if (f.free[3 * node + d]) f.z[3 * node + d] += acc[d];
        }
    }

    std::vector<Level> levels_;
    const ElementMatrix* ke_ = nullptr;
    std::span<const double> scale_;
    int sweeps_;
    double omega_;
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> coarse_;
};

FeaSolver::FeaSolver(Mesh mesh, Material material, BoundaryConditions bc, SolverOptions options)
    : mesh_(mesh), material_(material), bc_(std::move(bc)), options_(options) {
    mesh_.validate();
    material_.validate();
    bc_.validate(mesh_);
    check_rigid_body_constraints(mesh_, bc_);
    if (!(options_.tol > 0.0)) throw ConfigError("tol", "solver tolerance must be positive");
    ke_ = element_stiffness(1.0, material_.nu, mesh_.element_size);
    free_.resize(mesh_.n_dofs());
    for (std::size_t d = 0; d < free_.size(); ++d) free_[d] = bc_.fixed[d] ? 0 : 1;
    mg_ = std::make_unique<Multigrid>(mesh_, free_, options_.smoothing_sweeps,
                                      options_.smoothing_damping);
}

FeaSolver::~FeaSolver() = default;
FeaSolver::FeaSolver(FeaSolver&&) noexcept = default;
FeaSolver& FeaSolver::operator=(FeaSolver&&) noexcept = default;

FeaResult FeaSolver::solve(std::span<const double> densities) {
    const std::size_t ne = mesh_.n_elements();
    const std::size_t nd = mesh_.n_dofs();
    if (densities.size() != ne)
        throw InvalidInput("density count " + std::to_string(densities.size()) +
                           " does not match element count " + std::to_string(ne));
    std::vector<double> moduli(ne);
    for (std::size_t e = 0; e < ne; ++e) {
        const double r = densities[e];
        if (!(r >= 0.0 && r <= 1.0)) throw InvalidInput("element density outside [0, 1]");
        moduli[e] = material_.modulus(r);
    }
    const HexGrid g = mesh_.grid();
    const ElementOperator op{ke_.data(), 0, moduli.data()};

    std::vector<double> inv_diag;
    if (options_.preconditioner == Preconditioner::multigrid)
        mg_->update(ke_, moduli);
    else
        inv_diag = inverse_diagonal(g, op, free_);

    auto precondition = [&](std::span<const double> r, std::span<double> z) {
        if (options_.preconditioner == Preconditioner::multigrid) {
            mg_->precondition(r, z);
        } else {
            for (std::size_t i = 0; i < nd; ++i) z[i] = inv_diag[i] * r[i];
        }
    };

    std::vector<double> b(nd);
    for (std::size_t i = 0; i < nd; ++i) b[i] = free_[i] ? bc_.force[i] : 0.0;
    FeaResult res;
    res.u.assign(nd, 0.0);
    if (options_.warm_start && last_u_.size() == nd) res.u = last_u_;

    const double bnorm = std::sqrt(vdot(b, b));
    if (bnorm == 0.0) {
        res.u.assign(nd, 0.0);
        res.sensitivity.assign(ne, 0.0);
        return res;
    }
    std::vector<double> r(nd), z(nd), p(nd), q(nd);
    apply(g, op, free_, res.u, q);
    for (std::size_t i = 0; i < nd; ++i) r[i] = b[i] - q[i];
    precondition(r, z);
    p = z;
    double rz = vdot(r, z);
    double rnorm = std::sqrt(vdot(r, r));
    const long max_iter = options_.max_iter > 0 ? options_.max_iter : 10 * static_cast<long>(nd);
    long it = 0;
    while (rnorm > options_.tol * bnorm) {
        if (it >= max_iter)
            throw NumericalError("FEA solver did not converge in " + std::to_string(max_iter) +
                                     " iterations; relative residual " +
                                     std::to_string(rnorm / bnorm),
                                 rnorm / bnorm);
        apply(g, op, free_, p, q);
        const double pq = vdot(p, q);
        if (!(pq > 0.0)) throw StructuralError("stiffness matrix is not positive definite");
        const double alpha = rz / pq;
        for (std::size_t i = 0; i < nd; ++i) {
            res.u[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        precondition(r, z);
        const double rz_new = vdot(r, z);
        const double beta = rz_new / rz;
        rz = rz_new;
        for (std::size_t i = 0; i < nd; ++i) p[i] = z[i] + beta * p[i];
        rnorm = std::sqrt(vdot(r, r));
        ++it;
        if (!std::isfinite(rnorm)) throw NumericalError("FEA residual became non-finite", rnorm);
    }
    res.iterations = static_cast<int>(it);
    res.relative_residual = rnorm / bnorm;
    res.compliance = vdot(b, res.u);
    if (options_.warm_start) last_u_ = res.u;

    res.sensitivity.resize(ne);
    const double dE = material_.E0 - material_.Emin;
    const long n_el = static_cast<long>(ne);
#pragma omp parallel for schedule(static)
    for (long e = 0; e < n_el; ++e) {
        const int ei = static_cast<int>(e % g.nx);
        const int ej = static_cast<int>((e / g.nx) % g.ny);
        const int ek = static_cast<int>(e / (std::size_t(g.nx) * g.ny));
        std::size_t en[8];
        kernels::element_nodes(g, ei, ej, ek, en);
        double ue[24];
        for (int c = 0; c < 8; ++c)
            for (int d = 0; d < 3; ++d) ue[3 * c + d] = res.u[3 * en[c] + d];
        double energy = 0.0;
        for (int row = 0; row < 24; ++row) {
            double s = 0.0;
            for (int col = 0; col < 24; ++col) s += ke_[row * 24 + col] * ue[col];
            energy += ue[row] * s;
        }
        const double rho = densities[e];
        res.sensitivity[e] = -material_.penal * std::pow(rho, material_.penal - 1.0) * dE * energy;
    }
    return res;
}

FeaResult assemble_and_solve(const Mesh& mesh, const Material& material,
                             const BoundaryConditions& bc, std::span<const double> densities,
                             const SolverOptions& options) {
    FeaSolver solver(mesh, material, bc, options);
    return solver.solve(densities);
}

double sensitivity_check(const Mesh& mesh, const Material& material, const BoundaryConditions& bc,
                         std::span<const double> densities, int n_samples, double step,
                         std::uint64_t seed) {
    SolverOptions opts;
    opts.tol = 1e-12;
    FeaSolver solver(mesh, material, bc, opts);
    const FeaResult base = solver.solve(densities);
    std::vector<double> rho(densities.begin(), densities.end());
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, rho.size() - 1);
    const int n = std::min<int>(n_samples, static_cast<int>(rho.size()));
    double worst = 0.0;
    for (int s = 0; s < n; ++s) {
        const std::size_t e = pick(rng);
        const double r0 = rho[e];
        const double lo = std::max(0.0, r0 - step);
        const double hi = std::min(1.0, r0 + step);
        rho[e] = hi;
        const double cp = solver.solve(rho).compliance;
        rho[e] = lo;
        const double cm = solver.solve(rho).compliance;
        rho[e] = r0;
        const double fd = (cp - cm) / (hi - lo);
        const double an = base.sensitivity[e];
        const double denom = std::max({std::abs(an), std::abs(fd), 1e-300});
        worst = std::max(worst, std::abs(fd - an) / denom);
    }
    return worst;
}

}  // namespace segtopo::fea
