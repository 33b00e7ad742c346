#pragma once

#include "kronlvm/kernels.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace kronlvm {

// How KLE modes are weighted when a sample is assembled. The standard
// expansion scales mode i by sqrt(lambda_i), which reproduces the kernel
// covariance; as_printed scales by lambda_i.
enum class KleScaling { sqrt_eigenvalue, as_printed };

[[nodiscard]] KleScaling parse_kle_scaling(std::string_view name);
[[nodiscard]] std::string_view kle_scaling_name(KleScaling s);

struct PriorConfig {
    double warp_variance = 0.25;    // layer 1
    double warp_lengthscale = 2.0;  // as written in exp(-sum((x - x') / l)^2)
    double field_variance = 1.0;    // layer 2
    double field_lengthscale = 0.1;
    Index kl_terms_warp = 16;
    Index kl_terms_field = 32;
    Index grid = 33;                // points per axis on [0, 1]
    std::uint64_t seed = 0;
    KleScaling scaling = KleScaling::sqrt_eigenvalue;

    [[nodiscard]] Index n_s() const { return grid * grid; }
    void validate() const;
};

struct KleBasis {
    VectorXd lambda;   // descending, truncated
    MatrixXd phi;      // n x d, orthonormal columns
    double energy = 1.0;  // retained fraction of the trace
};

[[nodiscard]] KleBasis kle_decompose(const KernelSpec& kernel, const MatrixXd& points, Index d);
[[nodiscard]] KleBasis kle_decompose(const MatrixXd& K, Index d);

// Mode weights for the configured scaling.
[[nodiscard]] VectorXd kle_weights(const KleBasis& b, KleScaling s);

// Uniform grid on [0, 1] and the n^2 x 2 node list in Kronecker order
// (first coordinate slowest).
[[nodiscard]] VectorXd unit_grid(Index n);
[[nodiscard]] MatrixXd grid_points(Index n);

// Layer-1 basis: the vector-valued warp has one independent scalar GP per
// coordinate, so its modes are the scalar modes repeated for x1 and x2.
struct WarpBasis {
    KleBasis scalar;        // ceil(d / 2) modes of the scalar kernel
    Index terms = 0;        // d
};
[[nodiscard]] WarpBasis warp_basis(const PriorConfig& cfg);

// Warped coordinates for coefficients omega (length cfg.kl_terms_warp);
// mode i perturbs coordinate i % 2 with scalar mode i / 2.
[[nodiscard]] MatrixXd warp_coordinates(const PriorConfig& cfg, const WarpBasis& wb, const VectorXd& omega);

struct PriorSample {
    VectorXd log_a;
    MatrixXd warped;       // n_s x 2
    double field_energy = 1.0;
    int retries = 0;
};

[[nodiscard]] PriorSample sample_prior_one(const PriorConfig& cfg, const WarpBasis& wb, std::uint64_t index);

struct FieldDataset {
    enum class Kind { log_conductivity, solution_hat };
    MatrixXd values;                   // n_xi x n_s
    std::vector<VectorXd> grid;        // axis coordinates
    Kind kind = Kind::log_conductivity;
    PriorConfig prior;
    std::uint64_t first_index = 0;     // sample index of row 0
    std::vector<double> field_energy;  // per-sample retained layer-2 energy
    double warp_energy = 1.0;
    int retries = 0;

    [[nodiscard]] Index n_xi() const { return values.rows(); }
    void validate() const;
};

[[nodiscard]] std::string_view dataset_kind_name(FieldDataset::Kind k);
[[nodiscard]] FieldDataset::Kind parse_dataset_kind(std::string_view name);

// Samples with indices first_index .. first_index + n - 1; each index owns
// an independent random stream, so disjoint ranges give disjoint draws.
[[nodiscard]] FieldDataset sample_prior(const PriorConfig& cfg, Index n, std::uint64_t first_index = 0);

struct FemMesh {
    Index n = 0;                             // nodes per axis
    MatrixXd nodes;                          // n^2 x 2
    std::vector<std::array<Index, 3>> tris;  // counter-clockwise
    std::vector<bool> dirichlet;             // x1 in {0, 1}, corners included
    std::vector<bool> neumann;               // x2 in {0, 1}, corners excluded

    [[nodiscard]] double signed_area(std::size_t t) const;
};

// Cells are split along one diagonal in the lower half (x2 < 1/2) and its
// mirror image in the upper half, so the mesh is symmetric under x2 -> 1 - x2.
[[nodiscard]] FemMesh make_mesh(Index n);

struct FemSolution {
    VectorXd u;
    VectorXd u_hat;  // u - (1 - x1)
};

// P1 Galerkin solve of -div(a grad u) = 0 with u = 1 - x1 on x1 in {0, 1}
// and zero flux on x2 in {0, 1}. Element conductivity is exp of the mean of
// the nodal log-conductivities.
[[nodiscard]] FemSolution fem_solve(const VectorXd& log_a, const FemMesh& mesh);

// Solves every realization of a log-conductivity dataset.
[[nodiscard]] FieldDataset solve_dataset(const FieldDataset& inputs);

struct Observations {
    std::vector<std::vector<Index>> axis_index;  // indices into the solution grid axes
    std::vector<VectorXd> grid;                  // observed axis coordinates
    MatrixXd values;                             // n_xi x n_obs, Kronecker order
};

// Axis points of an n_obs-point uniform sub-grid; (grid - 1) must be a
// multiple of (n_obs - 1).
[[nodiscard]] std::vector<Index> uniform_subgrid(Index grid, Index n_obs);

[[nodiscard]] Observations subsample_observations(const FieldDataset& solutions,
                                                  const std::vector<std::vector<Index>>& axis_index,
                                                  double noise_sigma, std::uint64_t seed);
// Coordinates must coincide with solution grid nodes.
[[nodiscard]] std::vector<Index> locate_on_grid(const VectorXd& axis, const VectorXd& coords);

}  // namespace kronlvm
