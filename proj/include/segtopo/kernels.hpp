#pragma once

// Hot loops of the engine. Every kernel exists twice: a plain serial
// reference used by the tests and benchmarks, and an OpenMP version used by
// the library. Parallel reductions use fixed-size blocks combined in block
// order, so results do not depend on the thread count.

#include <cstddef>
#include <span>

#include "segtopo/common.hpp"
#include "segtopo/fields.hpp"

namespace segtopo::kernels {

// Element grid of an 8-node hexahedral mesh (element counts per axis).
struct HexGrid {
    int nx = 1, ny = 1, nz = 1;

    std::size_t n_elements() const { return std::size_t(nx) * ny * nz; }
    std::size_t n_nodes() const { return std::size_t(nx + 1) * (ny + 1) * (nz + 1); }
    std::size_t n_dofs() const { return 3 * n_nodes(); }
    std::size_t node(int i, int j, int k) const {
        return std::size_t(i) + std::size_t(nx + 1) * (std::size_t(j) + std::size_t(ny + 1) * k);
    }
    std::size_t element(int i, int j, int k) const {
        return std::size_t(i) + std::size_t(nx) * (std::size_t(j) + std::size_t(ny) * k);
    }
};

// Local corner order of a hex element: x fastest on the bottom face, then top.
inline constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                                      {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};

void element_nodes(const HexGrid& g, int ei, int ej, int ek, std::size_t out[8]);

// Element operator description for hex_apply. When stride is 0 every element
// shares `mats`; `scale` (optional) multiplies each element matrix.
struct ElementOperator {
    const double* mats = nullptr;
    std::size_t stride = 0;
    const double* scale = nullptr;
};

inline constexpr std::size_t kBlock = 256;

namespace serial {

void topo_eval(const fields::TopoNet& net, std::span<const Vec3> pts, std::span<double> rho,
               std::span<Vec3> grad);
void seg_eval(const fields::SegNet& net, std::span<const Vec3> pts, std::span<double> weights,
              std::span<Vec3> grad);
void topo_backprop(const fields::TopoNet& net, std::span<const Vec3> pts,
                   std::span<const double> d_rho, std::span<const Vec3> d_grad,
                   fields::TopoGrad& out);
void seg_backprop(const fields::SegNet& net, std::span<const Vec3> pts,
                  std::span<const double> d_weights, std::span<const Vec3> d_grad,
                  fields::SegGrad& out);
// y = sum_e A_e u_e over the free dofs; y is zero where mask is 0.
void hex_apply(const HexGrid& g, const ElementOperator& op, std::span<const unsigned char> free,
               std::span<const double> u, std::span<double> y);
double dot(std::span<const double> a, std::span<const double> b);

}  // namespace serial

namespace omp {

void topo_eval(const fields::TopoNet& net, std::span<const Vec3> pts, std::span<double> rho,
               std::span<Vec3> grad);
void seg_eval(const fields::SegNet& net, std::span<const Vec3> pts, std::span<double> weights,
              std::span<Vec3> grad);
void topo_backprop(const fields::TopoNet& net, std::span<const Vec3> pts,
                   std::span<const double> d_rho, std::span<const Vec3> d_grad,
                   fields::TopoGrad& out);
void seg_backprop(const fields::SegNet& net, std::span<const Vec3> pts,
                  std::span<const double> d_weights, std::span<const Vec3> d_grad,
                  fields::SegGrad& out);
void hex_apply(const HexGrid& g, const ElementOperator& op, std::span<const unsigned char> free,
               std::span<const double> u, std::span<double> y);
double dot(std::span<const double> a, std::span<const double> b);

}  // namespace omp

}  // namespace segtopo::kernels
