#pragma once

#include "kronlvm/sgplvm.hpp"
#include "kronlvm/sgpr.hpp"

#include <optional>
#include <vector>

namespace kronlvm {

// Posterior over the latent of one test realization, plus the precision of
// its observation noise.
struct TestLatentPosterior {
    Eigen::RowVectorXd mu;
    Eigen::RowVectorXd s;
    double beta_star = 1.0;

    [[nodiscard]] LatentPosterior as_posterior() const { return {mu, s}; }
    void validate() const;
};

// Predictions at fixed latent points x_xi_star (one row each) on the spatial
// test grid x_s_star, using the optimal q(U) of the trained model.
[[nodiscard]] PredictiveMoments predict_given_latent(const SgplvmModel& m, const BoundCache& c,
                                                     const MatrixXd& x_xi_star, const std::vector<MatrixXd>& x_s_star,
                                                     const PredictOptions& opts = {});
[[nodiscard]] PredictiveMoments predict_given_latent(const SgplvmModel& m, const MatrixXd& x_xi_star,
                                                     const std::vector<MatrixXd>& x_s_star,
                                                     const PredictOptions& opts = {});

struct MarginalOptions {
    Index n_mog = 100;
    std::uint64_t seed = 0;
    bool include_noise = true;
};

// Mean integrated analytically over q_star; variance from a mixture of
// Gaussians centred on n_mog latent samples.
[[nodiscard]] PredictiveMoments predict_marginalized(const SgplvmModel& m, const BoundCache& c,
                                                     const TestLatentPosterior& q_star,
                                                     const std::vector<MatrixXd>& x_s_star,
                                                     const MarginalOptions& opts = {});

// Analytic marginal mean alone.
[[nodiscard]] MatrixXd marginal_mean(const SgplvmModel& m, const BoundCache& c, const LatentPosterior& q_star,
                                     const std::vector<MatrixXd>& x_s_star);

struct TestTerm {
    VectorXd per_dim;        // F*_j, zero for masked columns
    double sum = 0.0;        // sum over observed columns
    double kl = 0.0;
    double objective = 0.0;  // sum - kl
    // Gradients of the objective.
    Eigen::RowVectorXd d_mu;
    Eigen::RowVectorXd d_log_s;
    double d_log_beta_star = 0.0;
};

// y_star: n_s* x d in row-major spatial order; observed[j] selects the
// columns that carry observations (empty: all observed).
[[nodiscard]] TestTerm test_term(const SgplvmModel& m, const BoundCache& c, const TestLatentPosterior& q_star,
                                 const MatrixXd& y_star, const std::vector<MatrixXd>& x_s_star,
                                 const std::vector<bool>& observed = {});

struct InferOptions {
    bool optimize_beta_star = true;
    int restarts = 5;
    std::uint64_t seed = 0;
    double beta_star_min = 1e-6;
    double beta_star_max = 1e12;
    OptimizerSettings optimizer{};
};

struct InferResult {
    TestLatentPosterior q_star;
    double objective = 0.0;
    double initial_objective = 0.0;  // at the start of the winning restart
    int best_restart = 0;
    std::vector<double> restart_objectives;
};

// Maximizes the test objective over (mu, log s) and optionally log beta*,
// keeping every training quantity fixed. Restart 0 starts from the training
// latent that scores best; the others draw the mean from the prior.
[[nodiscard]] InferResult infer_latent(const SgplvmModel& m, const BoundCache& c, const MatrixXd& y_star,
                                       const std::vector<MatrixXd>& x_s_star, const std::vector<bool>& observed = {},
                                       const InferOptions& opts = {});

}  // namespace kronlvm
