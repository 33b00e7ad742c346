#pragma once

#include "kronlvm/kron.hpp"

namespace kronlvm {

enum class KernelFamily { rbf_ard, exponential, linear, sum };

// Hyperparameters are positive and optimized through log_params(), whose
// layout is: [log variance, log lengthscales...] for rbf_ard/exponential,
// [log linear variances...] for linear, rbf block then linear block for sum.
struct KernelSpec {
    KernelFamily family = KernelFamily::rbf_ard;
    double variance = 1.0;
    VectorXd lengthscales;
    VectorXd linear_variances;

    static KernelSpec rbf(double variance, VectorXd lengthscales);
    static KernelSpec exponential(double lengthscale, double variance = 1.0);
    static KernelSpec linear(VectorXd variances);
    static KernelSpec sum(double variance, VectorXd lengthscales, VectorXd linear_variances);

    [[nodiscard]] bool has_rbf() const { return family == KernelFamily::rbf_ard || family == KernelFamily::sum; }
    [[nodiscard]] bool has_linear() const { return family == KernelFamily::linear || family == KernelFamily::sum; }
    [[nodiscard]] Index input_dim() const;
    [[nodiscard]] Index num_params() const;
    [[nodiscard]] VectorXd log_params() const;
    void set_log_params(const VectorXd& p);
    void validate() const;
};

[[nodiscard]] KernelFamily parse_family(std::string_view name);
[[nodiscard]] std::string_view family_name(KernelFamily f);

[[nodiscard]] MatrixXd gram(const KernelSpec& k, const MatrixXd& X1, const MatrixXd& X2);
[[nodiscard]] VectorXd gram_diag(const KernelSpec& k, const MatrixXd& X);

struct GramGradient {
    VectorXd log_params;
    MatrixXd X1;  // zero-sized for the exponential kernel (inputs are fixed grids)
    MatrixXd X2;
};

// Vector-Jacobian product: gradients of sum(G .* gram(k, X1, X2)).
[[nodiscard]] GramGradient gram_vjp(const KernelSpec& k, const MatrixXd& X1, const MatrixXd& X2, const MatrixXd& G);

struct LatentPosterior {
    MatrixXd mu;  // n x d
    MatrixXd s;   // n x d, variances

    void validate() const;
};

struct PsiStats {
    double psi0 = 0.0;
    MatrixXd psi1;  // n x m
    MatrixXd psi2;  // m x m
};

[[nodiscard]] PsiStats psi_stats_rbf(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z);
[[nodiscard]] PsiStats psi_stats_linear(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z);
[[nodiscard]] PsiStats psi_stats_sum(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z);
[[nodiscard]] PsiStats psi_stats(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z);

// Psi2 summand of a single latent row.
[[nodiscard]] MatrixXd psi2_row(const KernelSpec& k, const LatentPosterior& q, Index row, const MatrixXd& Z);

struct PsiGradient {
    MatrixXd mu;
    MatrixXd s;
    MatrixXd Z;
    VectorXd log_params;
};

// Gradients of g0*psi0 + sum(G1 .* Psi1) + sum(G2 .* Psi2).
[[nodiscard]] PsiGradient psi_vjp(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z, double g0,
                                  const MatrixXd& G1, const MatrixXd& G2);

}  // namespace kronlvm
