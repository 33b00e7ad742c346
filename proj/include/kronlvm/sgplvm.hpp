#pragma once

#include "kronlvm/kernels.hpp"
#include "kronlvm/optimize.hpp"
#include "kronlvm/rng.hpp"

#include <vector>

namespace kronlvm {

struct FrozenGroups {
    bool latents = false;    // q.mu, q.s
    bool inducing = false;   // z_xi
    bool kernel_xi = false;
    bool kernel_s = false;
    bool beta = false;
};

// Spatial inducing inputs are tied to the training grid, so the spatial
// factors enter only through their gram matrices.
struct SgplvmModel {
    MatrixXd y;                  // (n_xi * n_s) x d, Kronecker row order
    std::vector<MatrixXd> x_s;   // spatial grid factors
    LatentPosterior q;
    MatrixXd z_xi;               // m_xi x d_xi
    KernelSpec k_xi;
    std::vector<KernelSpec> k_s; // unit variance; lengthscales trainable
    double beta = 1.0;
    // Fixed diagonal added to the stochastic K_uu. Without it the optimizer
    // can drive K_uu singular (e.g. a vanishing rbf variance under the sum
    // kernel) and exploit round-off in tr(K_uu^-1 Psi2).
    double kuu_jitter = 0.0;
    FrozenGroups frozen;

    [[nodiscard]] Index n_xi() const { return q.mu.rows(); }
    [[nodiscard]] Index n_s() const;
    [[nodiscard]] Index latent_dim() const { return q.mu.cols(); }
    [[nodiscard]] std::vector<Index> data_dims() const;     // (n_xi, n_s1, ...)
    [[nodiscard]] std::vector<Index> inducing_dims() const; // (m_xi, n_s1, ...)
    void validate() const;
};

// Per Kronecker factor: K = L L^T, C = L^-1 Psi2 L^-T = Q diag(lambda) Q^T,
// E = L^-T Q (so E^T K E = I and E^T Psi2 E = diag(lambda)), Phi = Psi1 E.
struct FactorCache {
    MatrixXd K;
    CholFactor L;
    EigenPair C;
    MatrixXd E;
    MatrixXd Phi;
    double psi0 = 0.0;
    MatrixXd psi1;
    MatrixXd psi2;
};

struct BoundCache {
    std::vector<FactorCache> factors;  // stochastic first
    VectorXd lambda;                   // composed eigenvalues of C
    VectorXd D;                        // 1/beta + lambda
    MatrixXd B;                        // (x Phi_f)^T Y, m x d
    MatrixXd v_hat;                    // B ./ D
    VectorXd yy;                       // per-column y^T y
    double psi0 = 0.0;
    double trace_c = 0.0;
    double kl = 0.0;
    VectorXd per_dim;                  // L_j
    double bound = 0.0;
};

[[nodiscard]] double latent_prior_kl(const LatentPosterior& q);

[[nodiscard]] BoundCache bound_cache(const SgplvmModel& m);
[[nodiscard]] double collapsed_bound(const SgplvmModel& m);

struct BoundGradient {
    MatrixXd mu;
    MatrixXd log_s;
    MatrixXd z_xi;
    VectorXd k_xi;               // stochastic log-parameters
    std::vector<VectorXd> k_s;   // spatial log-lengthscales
    double log_beta = 0.0;
};

// Gradient of the collapsed bound; frozen groups are zeroed.
[[nodiscard]] BoundGradient bound_gradients(const SgplvmModel& m, const BoundCache& c);

// Optimizer parameter vector over the unfrozen groups, in the order
// mu, log s, z_xi, stochastic log-parameters, spatial log-lengthscales, log beta.
[[nodiscard]] VectorXd sgplvm_pack(const SgplvmModel& m);
void sgplvm_unpack(SgplvmModel& m, const VectorXd& p);
[[nodiscard]] VectorXd sgplvm_pack_gradient(const SgplvmModel& m, const BoundGradient& g);

struct InitPolicy {
    Index latent_dim = 0;    // 0: min(n_xi / 2, 128)
    Index inducing = 0;      // 0: min(n_xi / 2, 128)
    KernelFamily family = KernelFamily::rbf_ard;
    double init_s = 0.1;
    double spatial_lengthscale_fraction = 0.25;
    double snr = 100.0;      // beta = snr / var(Y)
    std::uint64_t seed = 0;
};

// PCA latents, random-subset inducing inputs, data-scaled hyperparameters.
[[nodiscard]] SgplvmModel sgplvm_init(const MatrixXd& y, const std::vector<MatrixXd>& x_s, const InitPolicy& policy);
// Same hyperparameter and inducing-input initialization around given latents
// (policy.latent_dim and init_s are ignored).
[[nodiscard]] SgplvmModel sgplvm_init_with_latents(const MatrixXd& y, const std::vector<MatrixXd>& x_s,
                                                   const LatentPosterior& q, const InitPolicy& policy);

// Inducing inputs drawn as a random subset of the current latent means.
[[nodiscard]] MatrixXd random_inducing_subset(const MatrixXd& mu, Index m, Rng& rng);

struct SgplvmTrainResult {
    SgplvmModel model;
    OptimizeResult opt;
    double initial_bound = 0.0;
};
[[nodiscard]] SgplvmTrainResult sgplvm_train(SgplvmModel m, const OptimizerSettings& settings = {},
                                             const IterationCallback& on_iteration = {});

// Optimal q(U): mean (x K_f E_f) v_hat and covariance
// (x K_f E_f) diag(1 / (beta D)) (x K_f E_f)^T.
struct OptimalQu {
    MatrixXd mean;        // m x d
    KronMatrix factor;    // x K_f E_f
    VectorXd diag;        // 1 / (beta D)

    [[nodiscard]] MatrixXd dense_covariance() const;
};
[[nodiscard]] OptimalQu optimal_qu(const SgplvmModel& m, const BoundCache& c);

}  // namespace kronlvm
