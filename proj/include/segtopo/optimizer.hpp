#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "segtopo/am.hpp"
#include "segtopo/fea.hpp"
#include "segtopo/fields.hpp"
#include "segtopo/problem.hpp"

namespace segtopo::opt {

enum class Mode { topo, topo_angle, topo_angle_seg, simp };

Mode parse_mode(const std::string& s);
const char* to_string(Mode m);

struct LossReport {
    double value = 0.0;
    double compliance = 0.0;  // c / c0
    double volume = 0.0;      // alpha1 (rho_bar / V* - 1)^2
    double overhang = 0.0;    // alpha2 * H (or P)
    double passive = 0.0;
    double alpha1 = 0.0;
    double alpha2 = 0.0;
};

// L = c/c0 + alpha1 (rho_bar/V* - 1)^2 + alpha2 H + passive.
// value is the left-to-right sum of the four reported components.
LossReport total_loss(double c, double c0, double rho_bar, double vol_frac, double H, double alpha1,
                      double alpha2, double passive = 0.0);

// Sum of raw topology densities at the passive points.
double passive_loss(const fields::TopoNet& net, std::span<const Vec3> passive_points);

// 0.5 (T(X) + T(mirror X)); identical bits at X and mirror X.
std::vector<double> symmetry_density(const fields::TopoNet& net, std::span<const Vec3> points,
                                     Mirror mirror);

// Full symmetrized field (topology and segmentation) with spatial gradients.
fields::SampleBatch evaluate_field(const fields::FieldParams& params, std::span<const Vec3> points,
                                   Mirror mirror);

struct Penalties {
    double alpha1 = 0.0;
    double alpha2 = 0.0;
};

Penalties penalty_schedule(int iter, const Schedule& s, Mode mode);

struct Groups {
    bool topo = false;
    bool seg = false;
    bool angles = false;

    bool operator==(const Groups&) const = default;
};

Groups phase_gate(int iter, const Schedule& s, Mode mode);
std::string phase_name(const Groups& g, Mode mode);

// SGD below sgd_iters, Adam afterwards. Moments start fresh at the switch and
// the Adam step counter belongs to the group.
struct GroupState {
    std::vector<double> m;
    std::vector<double> v;
    long t = 0;
};

struct StepRates {
    double sgd_lr = 0.01;
    double adam_lr = 2e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Throws NumericalError naming the iteration, group and gradient norm when
// the gradient is not finite.
void step(std::span<double> x, std::span<const double> grad, GroupState& state, int iter,
          int sgd_iters, const StepRates& rates, const std::string& group);

// Parameter packing used by the optimizer and the parameter files.
std::vector<double> pack(const fields::TopoNet& net);
std::vector<double> pack(const fields::SegNet& net);
std::vector<double> pack(const fields::AngleNet& net);
std::vector<double> pack(const fields::TopoGrad& g);
std::vector<double> pack(const fields::SegGrad& g);
std::vector<double> pack_angles(const std::vector<std::pair<double, double>>& a);
void unpack(std::span<const double> x, fields::TopoNet& net);
void unpack(std::span<const double> x, fields::SegNet& net);
void unpack(std::span<const double> x, fields::AngleNet& net);

// Central-difference spatial gradient of a voxel density grid (one-sided on
// the boundary), x fastest.
std::vector<Vec3> grid_gradient(int nx, int ny, int nz, double h, std::span<const double> rho);

am::OverhangParams overhang_params(const ProblemDomain& problem);

// P and H of a sampled field on the grid refined `multiplier` times, each
// segment measured from its own lowest solid.
am::OverhangReport overhang_report(const ProblemDomain& problem, const fields::SampleBatch& batch,
                                   const fields::AngleNet& angles, int multiplier = 1);

// sigmoid(theta), symmetrized through the mirror plane.
std::vector<double> simp_density(const ProblemDomain& problem, std::span<const double> theta);

// Single-segment sample batch of a voxel density grid with finite-difference
// spatial gradients.
fields::SampleBatch voxel_batch(const ProblemDomain& problem, std::span<const double> density,
                                int multiplier = 1);

struct EvalRequest {
    Penalties penalties;
    Groups active;
    bool need_grad = true;
    // Element rows whose points feed the gradient; empty means all.
    std::span<const std::size_t> rows;
    // Overrides the per-segment lowest-solid heights when non-empty.
    std::span<const am::LowestSolid> lowest;
};

struct Evaluation {
    LossReport loss;
    double compliance = 0.0;
    double rho_bar = 0.0;
    double P = 0.0;
    double H = 0.0;
    std::vector<double> density;
    std::vector<am::LowestSolid> lowest;
    am::OverhangReport overhang;
    fields::FieldGrads grads;        // neural parameters
    std::vector<double> simp_grad;   // per element logits
    std::size_t grad_bytes = 0;      // buffers allocated for the gradient pass
    int fea_iterations = 0;
};

// Loss and gradient of one problem at its training resolution. Holds the
// FEA solver so repeated evaluations reuse the multigrid setup and warm start.
class LossEvaluator {
public:
    LossEvaluator(const ProblemDomain& problem, Mode mode);

    double c0() const { return c0_; }
    Mode mode() const { return mode_; }
    const ProblemDomain& problem() const { return problem_; }
    const std::vector<Vec3>& points() const { return points_; }
    const std::vector<unsigned char>& passive_mask() const { return passive_; }
    double cell_volume() const;
    fea::FeaSolver& solver() { return solver_; }

    Evaluation evaluate(const fields::FieldParams& params, const EvalRequest& req);
    // Per-element logits, rho = sigmoid(theta); angles only feed P and H.
    Evaluation evaluate_simp(std::span<const double> theta, const fields::AngleNet& angles,
                             const EvalRequest& req);

private:
    void finish(Evaluation& ev, const fields::SampleBatch& batch, const fields::AngleNet& angles,
                const EvalRequest& req, double passive);

    ProblemDomain problem_;
    Mode mode_;
    std::vector<Vec3> points_;
    std::vector<Vec3> mirrored_;
    std::vector<unsigned char> passive_;
    fea::FeaSolver solver_;
    double c0_ = 1.0;
};

struct HistoryRow {
    int iteration = 0;
    double loss = 0.0;
    double compliance = 0.0;
    double rho_bar = 0.0;
    double P = 0.0;
    double H = 0.0;
    double alpha1 = 0.0;
    double alpha2 = 0.0;
    std::string phase;

    bool operator==(const HistoryRow&) const = default;
};

struct RunResult {
    Mode mode = Mode::topo;
    fields::FieldParams params;
    std::vector<double> simp_theta;
    std::vector<HistoryRow> history;
    std::vector<double> density;        // final element densities
    std::vector<int> labels;            // argmax segment per element
    std::vector<double> overhang_weight;  // per element, summed over segments
    double compliance = 0.0;
    double c0 = 0.0;
    double P = 0.0;
    double H = 0.0;
    double rho_bar = 0.0;
    std::vector<am::SegmentReport> segments;
    std::size_t peak_grad_bytes = 0;
    double seconds = 0.0;
};

struct RunOptions {
    int batches = 0;  // 0 takes the problem schedule
    std::function<void(const HistoryRow&)> on_row;
};

// Initial parameters: calibrated topology at V*, inverse-distance segmentation
// seeds, configured print angles.
fields::FieldParams initial_params(const ProblemDomain& problem, Mode mode);

// Full optimization; modes other than topo-angle-seg use one segment. A row of history per epoch; the last epoch only
// evaluates, so the final row describes the returned field.
RunResult run(const ProblemDomain& problem, Mode mode, const RunOptions& options = {});
RunResult minibatch_run(const ProblemDomain& problem, Mode mode, int n_batches,
                        const RunOptions& options = {});
RunResult simp_baseline(const ProblemDomain& problem, const RunOptions& options = {});

// Finite-difference check of the full loss gradient with every group active
// and the lowest-solid heights frozen at the base point.
struct GradientCheck {
    double topo = 0.0;    // max relative error per group
    double seg = 0.0;
    double angles = 0.0;
    std::size_t n_params = 0;
    double seconds = 0.0;

    double max() const { return std::max({topo, seg, angles}); }
};

// 4x2x2 cantilever with 16 Fourier features, two segments, a passive box and
// tight solver tolerance.
ProblemDomain gradient_check_problem();
GradientCheck check_loss_gradient(const ProblemDomain& problem, double step = 1e-5,
                                  double alpha1 = 50.0, double alpha2 = 1.0);

// Near-even split of the element rows along y into n bands; each entry lists
// the element indices of one band.
std::vector<std::vector<std::size_t>> y_bands(const ProblemDomain& problem, int n);

}  // namespace segtopo::opt
