#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "segtopo/common.hpp"
#include "segtopo/kernels.hpp"

namespace segtopo::fea {

// Structured mesh of cubic 8-node hexahedra. Node (i,j,k) has index
// i + (nelx+1)*(j + (nely+1)*k); dof 3*node + component.
struct Mesh {
    int nelx = 1, nely = 1, nelz = 1;
    double element_size = 1.0;

    kernels::HexGrid grid() const { return {nelx, nely, nelz}; }
    std::size_t n_elements() const { return grid().n_elements(); }
    std::size_t n_nodes() const { return grid().n_nodes(); }
    std::size_t n_dofs() const { return grid().n_dofs(); }
    void validate() const;
};

// SIMP material: E(rho) = Emin + rho^p (E0 - Emin).
struct Material {
    double E0 = 1.0;
    double Emin = 1e-9;
    double nu = 0.3;
    double penal = 3.0;

    bool operator==(const Material&) const = default;
    double modulus(double rho) const;
    void validate() const;
};

struct BoundaryConditions {
    std::vector<unsigned char> fixed;  // per dof, 1 = constrained to zero
    std::vector<double> force;         // per dof

    static BoundaryConditions empty(const Mesh& mesh);
    std::size_t n_fixed() const;
    void validate(const Mesh& mesh) const;
};

struct FeaResult {
    std::vector<double> u;
    double compliance = 0.0;
    std::vector<double> sensitivity;  // dc/drho per element
    int iterations = 0;
    double relative_residual = 0.0;
};

enum class Preconditioner { jacobi, multigrid };

struct SolverOptions {
    double tol = 1e-6;
    long max_iter = 0;  // 0 selects 10 * n_dofs
    Preconditioner preconditioner = Preconditioner::multigrid;
    bool warm_start = false;
    int smoothing_sweeps = 2;
    double smoothing_damping = 0.6;
};

using ElementMatrix = std::array<double, 576>;

// Hex8 stiffness (row-major 24x24) of a cube with edge h for modulus E,
// integrated with 2x2x2 Gauss points.
ElementMatrix element_stiffness(double E, double nu, double h);
ElementMatrix element_stiffness(const Material& material, double h = 1.0);

// Throws StructuralError when the fixed dofs leave a rigid-body motion free.
void check_rigid_body_constraints(const Mesh& mesh, const BoundaryConditions& bc);

class Multigrid;

// Reusable solver: geometry, boundary conditions and multigrid structure are
// built once; each solve() takes a new density vector.
class FeaSolver {
public:
    FeaSolver(Mesh mesh, Material material, BoundaryConditions bc, SolverOptions options = {});
    ~FeaSolver();
    FeaSolver(FeaSolver&&) noexcept;
    FeaSolver& operator=(FeaSolver&&) noexcept;

    FeaResult solve(std::span<const double> densities);

    const Mesh& mesh() const { return mesh_; }
    const Material& material() const { return material_; }
    const BoundaryConditions& bc() const { return bc_; }
    const SolverOptions& options() const { return options_; }
    SolverOptions& options() { return options_; }
    const ElementMatrix& unit_stiffness() const { return ke_; }
    void reset_warm_start() { last_u_.clear(); }

private:
    Mesh mesh_;
    Material material_;
    BoundaryConditions bc_;
    SolverOptions options_;
    ElementMatrix ke_;
    std::vector<unsigned char> free_;
    std::unique_ptr<Multigrid> mg_;
    std::vector<double> last_u_;
};

FeaResult assemble_and_solve(const Mesh& mesh, const Material& material,
                             const BoundaryConditions& bc, std::span<const double> densities,
                             const SolverOptions& options = {});

// Central finite differences of the compliance over a random subset of
// elements; returns the max relative deviation from the adjoint sensitivity.
double sensitivity_check(const Mesh& mesh, const Material& material, const BoundaryConditions& bc,
                         std::span<const double> densities, int n_samples = 8, double step = 1e-5,
                         std::uint64_t seed = 0);

}  // namespace segtopo::fea
