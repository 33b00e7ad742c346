#pragma once

#include "kronlvm/kernels.hpp"
#include "kronlvm/optimize.hpp"

#include <vector>

namespace kronlvm {

// Cartesian-product design: stochastic inputs times spatial factors, in
// Kronecker order (stochastic slowest, last spatial factor fastest).
struct StructuredInputs {
    MatrixXd x_xi;
    std::vector<MatrixXd> x_s;

    [[nodiscard]] std::vector<Index> dims() const;
    [[nodiscard]] Index n() const;
    [[nodiscard]] Index n_s() const;
    void validate() const;
};

struct PredictOptions {
    bool variance = true;
    bool full_covariance = false;  // single stochastic test point only
    bool include_noise = true;
};

struct PredictiveMoments {
    MatrixXd mean;        // n* x d
    MatrixXd variance;    // n* x d
    MatrixXd covariance;  // n_s* x n_s*, when requested
};

// Spatial kernels carry unit variance; only their lengthscales are trained.
struct SgprModel {
    StructuredInputs inputs;
    MatrixXd y;  // n x d
    KernelSpec k_xi;
    std::vector<KernelSpec> k_s;
    double beta = 1.0;

    void validate() const;
};

struct SgprCache {
    std::vector<EigenPair> eig;  // stochastic factor first
    VectorXd lambda;             // composed, Kronecker order
    MatrixXd rotated_y;          // Q^T Y
};

[[nodiscard]] SgprCache sgpr_cache(const SgprModel& m);
[[nodiscard]] double sgpr_log_likelihood(const SgprModel& m, const SgprCache& c);
[[nodiscard]] double sgpr_log_likelihood(const SgprModel& m);

struct SgprGradient {
    VectorXd k_xi;                 // w.r.t. stochastic log-parameters
    std::vector<VectorXd> k_s;     // w.r.t. spatial log-lengthscales
    double log_beta = 0.0;
};
[[nodiscard]] SgprGradient sgpr_gradients(const SgprModel& m, const SgprCache& c);

// Flat parameter vector: stochastic log-parameters, spatial log-lengthscales, log beta.
[[nodiscard]] VectorXd sgpr_pack(const SgprModel& m);
void sgpr_unpack(SgprModel& m, const VectorXd& p);

struct SgprTrainResult {
    SgprModel model;
    OptimizeResult opt;
};
[[nodiscard]] SgprTrainResult sgpr_train(SgprModel m, const OptimizerSettings& settings = {});

[[nodiscard]] PredictiveMoments sgpr_predict(const SgprModel& m, const SgprCache& c, const StructuredInputs& test,
                                             const PredictOptions& opts = {});

}  // namespace kronlvm
