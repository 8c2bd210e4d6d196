// Serial reference kernels against their OpenMP versions.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "segtopo/fea.hpp"
#include "segtopo/fields.hpp"
#include "segtopo/kernels.hpp"

using namespace segtopo;

namespace {

std::vector<Vec3> points(std::size_t n) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    std::vector<Vec3> p(n);
    for (auto& x : p) x = {u(rng), 0.5 * u(rng), 0.2 * u(rng)};
    return p;
}

fields::TopoNet topo_net() {
    fields::FieldInit init;  // 512 features
    return fields::make_topo_net(init);
}

fields::SegNet seg_net() {
    fields::FieldInit init;
    auto net = fields::make_seg_net(init, 3);
    for (std::size_t i = 0; i < net.weights.size(); ++i) net.weights[i] = 0.01 * double(i % 7);
    return net;
}

template <auto Kernel>
void BM_topo_eval(benchmark::State& st) {
    const auto net = topo_net();
    const auto pts = points(st.range(0));
    std::vector<double> rho(pts.size());
    std::vector<Vec3> grad(pts.size());
    for (auto _ : st) {
        Kernel(net, pts, rho, grad);
        benchmark::DoNotOptimize(rho.data());
    }
    st.SetItemsProcessed(st.iterations() * pts.size());
}

template <auto Kernel>
void BM_seg_eval(benchmark::State& st) {
    const auto net = seg_net();
    const auto pts = points(st.range(0));
    std::vector<double> w(pts.size() * 3);
    std::vector<Vec3> grad(pts.size() * 3);
    for (auto _ : st) {
        Kernel(net, pts, w, grad);
        benchmark::DoNotOptimize(w.data());
    }
    st.SetItemsProcessed(st.iterations() * pts.size());
}

template <auto Kernel>
void BM_topo_backprop(benchmark::State& st) {
    const auto net = topo_net();
    const auto pts = points(st.range(0));
    std::vector<double> d_rho(pts.size(), 1e-3);
    std::vector<Vec3> d_grad(pts.size(), Vec3{1e-4, -2e-4, 3e-4});
    fields::TopoGrad g;
    for (auto _ : st) {
        Kernel(net, pts, d_rho, d_grad, g);
        benchmark::DoNotOptimize(g.weights.data());
    }
    st.SetItemsProcessed(st.iterations() * pts.size());
}

template <auto Kernel>
void BM_hex_apply(benchmark::State& st) {
    const int n = static_cast<int>(st.range(0));
    const kernels::HexGrid g{2 * n, n, n / 2 > 0 ? n / 2 : 1};
    const auto ke = fea::element_stiffness(1.0, 0.3, 1.0);
    std::vector<double> scale(g.n_elements(), 0.5);
    const kernels::ElementOperator op{ke.data(), 0, scale.data()};
    std::vector<unsigned char> free(g.n_dofs(), 1);
    std::vector<double> u(g.n_dofs(), 1e-3), y(g.n_dofs());
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = 1e-3 * double(i % 13);
    for (auto _ : st) {
        Kernel(g, op, free, u, y);
        benchmark::DoNotOptimize(y.data());
    }
    st.SetItemsProcessed(st.iterations() * g.n_elements());
}

template <auto Kernel>
void BM_dot(benchmark::State& st) {
    std::vector<double> a(st.range(0), 0.5), b(st.range(0), 2.0);
    for (auto _ : st) benchmark::DoNotOptimize(Kernel(a, b));
    st.SetItemsProcessed(st.iterations() * a.size());
}

}  // namespace

BENCHMARK(BM_topo_eval<kernels::serial::topo_eval>)->Name("topo_eval/serial")->Arg(6400);
BENCHMARK(BM_topo_eval<kernels::omp::topo_eval>)->Name("topo_eval/omp")->Arg(6400);
BENCHMARK(BM_seg_eval<kernels::serial::seg_eval>)->Name("seg_eval/serial")->Arg(6400);
BENCHMARK(BM_seg_eval<kernels::omp::seg_eval>)->Name("seg_eval/omp")->Arg(6400);
BENCHMARK(BM_topo_backprop<kernels::serial::topo_backprop>)->Name("topo_backprop/serial")->Arg(6400);
BENCHMARK(BM_topo_backprop<kernels::omp::topo_backprop>)->Name("topo_backprop/omp")->Arg(6400);
BENCHMARK(BM_hex_apply<kernels::serial::hex_apply>)->Name("hex_apply/serial")->Arg(20);
BENCHMARK(BM_hex_apply<kernels::omp::hex_apply>)->Name("hex_apply/omp")->Arg(20);
BENCHMARK(BM_dot<kernels::serial::dot>)->Name("dot/serial")->Arg(1 << 20);
BENCHMARK(BM_dot<kernels::omp::dot>)->Name("dot/omp")->Arg(1 << 20);

BENCHMARK_MAIN();
