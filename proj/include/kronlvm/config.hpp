#pragma once

#include "kronlvm/pipeline.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace kronlvm {

enum class PipelineKind { two_model, joint, pca_baseline };
enum class Direction { forward, inverse };

[[nodiscard]] PipelineKind parse_pipeline(std::string_view name);
[[nodiscard]] std::string_view pipeline_name(PipelineKind k);
[[nodiscard]] Direction parse_direction(std::string_view name);
[[nodiscard]] std::string_view direction_name(Direction d);

// YAML layout (every key optional):
//   experiment:   name, pipeline, directions, n_xi, seeds, n_test, output_dir
//   prior:        warp_variance, warp_lengthscale, field_variance,
//                 field_lengthscale, kl_terms (pair), grid, kle_scaling,
//                 unit_conductivity
//   model:        kernel, output_kernel, latent_dim, inducing
//   training:     max_iter, tol, patience, memory
//   inference:    max_iter, tol, restarts, n_mog
//   observations: grid, noise_fraction
// Environment variables KRONLVM_<SECTION>__<KEY> override file values and
// are parsed as YAML scalars or flow sequences.
struct ExperimentConfig {
    std::string name = "experiment";
    PipelineKind pipeline = PipelineKind::two_model;
    std::vector<Direction> directions{Direction::forward};
    std::vector<Index> n_xi{16, 32, 64};
    std::vector<std::uint64_t> seeds{0};
    Index n_test = 50;
    std::string output_dir = "runs";

    PriorConfig prior;              // seed is replaced per run
    bool unit_conductivity = false; // a = 1 everywhere (solver check)
    SurrogateConfig surrogate;      // seed is replaced per run

    Index obs_grid = 5;             // observed points per axis (inverse)
    double noise_fraction = 0.1;    // noise std / std of the test solutions

    [[nodiscard]] Index max_n_xi() const;
    // Column label in the result tables, e.g. 2M-Sum, JM-Sum, 2M-PCA.
    [[nodiscard]] std::string variant() const;
    void validate() const;
};

using EnvMap = std::map<std::string, std::string>;

[[nodiscard]] EnvMap environment_overrides();  // KRONLVM_* entries of the process environment
[[nodiscard]] ExperimentConfig parse_config(const std::string& yaml_text, const EnvMap& env = {});
[[nodiscard]] ExperimentConfig load_config(const std::filesystem::path& path, const EnvMap& env);
// Canonical YAML rendering; parse_config(render_config(c)) == c.
[[nodiscard]] std::string render_config(const ExperimentConfig& c);

}  // namespace kronlvm
