#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "segtopo/optimizer.hpp"
#include "segtopo/problem.hpp"

namespace segtopo::io {

// YAML problem description. Errors are ConfigError carrying the key and a
// "source:line:column:" prefix.
ProblemDomain parse_problem(std::string_view text, const std::string& source = "<config>");
ProblemDomain load_problem(const std::filesystem::path& path);
std::string serialize_problem(const ProblemDomain& problem);

struct VoxelField {
    int nx = 0, ny = 0, nz = 0;
    double spacing = 1.0;
    Vec3 origin{0.0, 0.0, 0.0};      // lower corner of the grid
    std::vector<Vec3> points;        // element centres, x fastest
    std::vector<double> density;
    std::vector<int> labels;         // empty when unsegmented
    std::vector<double> overhang;    // empty when not computed
    int n_segs = 1;

    std::size_t size() const { return std::size_t(nx) * ny * nz; }
    void validate() const;
};

// Voxel field of a run result on the training grid.
VoxelField voxels_from_run(const ProblemDomain& problem, const opt::RunResult& result);

// Legacy VTK structured points; one cell per voxel, cell data density,
// segment (when labelled) and overhang (when present).
std::string to_vtk(const VoxelField& field);
// x,y,z,rho[,label] with %.17g values.
std::string to_csv(const VoxelField& field);
// Parses to_csv output back into points, densities and labels.
VoxelField parse_csv(std::string_view text);

std::string history_csv(std::span<const opt::HistoryRow> history);
std::vector<opt::HistoryRow> parse_history_csv(std::string_view text);

// Saved optimization variables. Neural files hold both networks and the
// print angles; simp files hold the per-element logits and the angles.
struct SavedParams {
    opt::Mode mode = opt::Mode::topo;
    fields::FieldParams params;
    std::vector<double> simp_theta;
};

std::string encode_params(const SavedParams& saved);
SavedParams decode_params(std::string_view bytes);

// Densities (and labels) of saved parameters on the grid refined
// `multiplier` times. Multiplier 1 reproduces the training densities bitwise.
VoxelField upsample(const ProblemDomain& problem, const SavedParams& saved, int multiplier);

struct Analysis {
    am::OverhangReport report;
    double rho_bar = 0.0;
    std::vector<std::pair<double, double>> angles;
};

// P and H of saved parameters on the training grid, computed exactly as the
// optimizer logs them.
Analysis analyze(const ProblemDomain& problem, const SavedParams& saved);
// P and H of a bare voxel density grid (finite-difference gradients) at the
// given print angles, one pair per segment; labels assign voxels to segments.
Analysis analyze_field(const ProblemDomain& problem, const VoxelField& field,
                       const std::vector<std::pair<double, double>>& angles);

std::string summary_json(const ProblemDomain& problem, const opt::RunResult& result, int batches);

// Whole-file helpers; throw IoError naming the path.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view data);

}  // namespace segtopo::io
