#pragma once

#include "kronlvm/elliptic.hpp"
#include "kronlvm/predictive.hpp"

#include <string>
#include <vector>

namespace kronlvm {

struct SurrogateConfig {
    KernelFamily input_kernel = KernelFamily::sum;       // also the joint model's kernel
    KernelFamily output_kernel = KernelFamily::rbf_ard;  // two-model output submodel
    Index latent_dim = 0;  // 0: min(n_xi / 2, 128)
    Index inducing = 0;    // 0: min(n_xi / 2, 128)
    OptimizerSettings train{};
    OptimizerSettings infer{300, 1e-6, 5, 10, 40};
    int restarts = 5;
    Index n_mog = 100;
    std::uint64_t seed = 0;

    void validate() const;
};

// Flattened (n_xi * n_s) x 1 column in Kronecker row order.
[[nodiscard]] MatrixXd stack_realizations(const MatrixXd& values);
[[nodiscard]] std::vector<MatrixXd> grid_factors(const std::vector<VectorXd>& axes);

// Rows of the input dataset matched by each output row, from the sample
// indices of both datasets.
[[nodiscard]] std::vector<Index> solved_rows(const FieldDataset& data_in, const FieldDataset& data_out);

struct TwoModelSurrogate {
    SgplvmModel input_model;
    SgplvmModel output_model;     // latents frozen copies of input rows
    std::vector<Index> solved;    // output row t is input row solved[t]
    double input_offset = 0.0;    // scalar means removed before training
    double output_offset = 0.0;
    BoundCache input_cache;
    BoundCache output_cache;

    void refresh();  // rebuild caches after loading
    void validate() const;
};

struct TrainReport {
    double initial_bound = 0.0;
    double bound = 0.0;
    int iterations = 0;
    std::string status;
    std::vector<IterationRecord> log;
};

struct TwoModelTrainResult {
    TwoModelSurrogate surrogate;
    TrainReport input;
    TrainReport output;
};

[[nodiscard]] TwoModelTrainResult train_two_model(const FieldDataset& data_in, const FieldDataset& data_out,
                                                  const SurrogateConfig& cfg);

struct FieldPrediction {
    PredictiveMoments moments;  // column vector fields, offsets restored
    TestLatentPosterior q_star;
    double objective = 0.0;
};

// field_in: n_s* values on x_s_in_star; beta* fixed to the input model's beta.
[[nodiscard]] FieldPrediction forward_predict_two_model(const TwoModelSurrogate& s, const VectorXd& field_in,
                                                        const std::vector<MatrixXd>& x_s_in_star,
                                                        const std::vector<MatrixXd>& x_s_out_star,
                                                        const SurrogateConfig& cfg);
// y_obs: observed output values on the grid x_s_obs; beta* optimized.
[[nodiscard]] FieldPrediction inverse_predict_two_model(const TwoModelSurrogate& s, const VectorXd& y_obs,
                                                        const std::vector<MatrixXd>& x_s_obs,
                                                        const std::vector<MatrixXd>& x_s_in_star,
                                                        const SurrogateConfig& cfg);

// Column 0 holds the input field, column 1 the output scaled to unit variance.
struct JointSurrogate {
    SgplvmModel model;
    double input_offset = 0.0;
    double output_offset = 0.0;
    double output_scale = 1.0;
    BoundCache cache;

    void refresh();
    void validate() const;
};

struct JointTrainResult {
    JointSurrogate surrogate;
    TrainReport report;
};

[[nodiscard]] JointTrainResult train_joint(const FieldDataset& data_in, const FieldDataset& data_out,
                                           const SurrogateConfig& cfg);
[[nodiscard]] FieldPrediction forward_predict_joint(const JointSurrogate& s, const VectorXd& field_in,
                                                    const std::vector<MatrixXd>& x_s_in_star,
                                                    const std::vector<MatrixXd>& x_s_out_star,
                                                    const SurrogateConfig& cfg);
[[nodiscard]] FieldPrediction inverse_predict_joint(const JointSurrogate& s, const VectorXd& y_obs,
                                                    const std::vector<MatrixXd>& x_s_obs,
                                                    const std::vector<MatrixXd>& x_s_in_star,
                                                    const SurrogateConfig& cfg);

// Deterministic linear input model. Latent coordinates are whitened scores,
// so they are standard normal across the training set.
struct PcaInputModel {
    VectorXd mean;               // n_s
    MatrixXd components;         // n_s x d, orthonormal columns
    VectorXd singular_values;    // d
    Index n_train = 0;
    double residual_variance = 0.0;  // per point, from discarded directions

    [[nodiscard]] Index dim() const { return components.cols(); }
    [[nodiscard]] MatrixXd loadings() const;  // components * diag(sigma / sqrt(n))
    [[nodiscard]] Eigen::RowVectorXd encode(const VectorXd& field) const;
    [[nodiscard]] VectorXd decode(const Eigen::RowVectorXd& z) const;
};

[[nodiscard]] PcaInputModel fit_pca(const MatrixXd& values, Index d);

struct PcaSurrogate {
    PcaInputModel input_model;
    SgplvmModel output_model;  // latents = PCA scores, frozen
    std::vector<Index> solved;
    double output_offset = 0.0;
    BoundCache output_cache;

    void refresh();
};

struct PcaTrainResult {
    PcaSurrogate surrogate;
    TrainReport output;
};

// The PCA model fixes the latent grid: forward and inverse stay on the
// training grids.
[[nodiscard]] PcaTrainResult train_pca_baseline(const FieldDataset& data_in, const FieldDataset& data_out,
                                                const SurrogateConfig& cfg);
[[nodiscard]] FieldPrediction forward_predict_pca(const PcaSurrogate& s, const VectorXd& field_in,
                                                  const std::vector<MatrixXd>& x_s_out_star, const SurrogateConfig& cfg);
[[nodiscard]] FieldPrediction inverse_predict_pca(const PcaSurrogate& s, const VectorXd& y_obs,
                                                  const std::vector<MatrixXd>& x_s_obs, const SurrogateConfig& cfg);

struct Metrics {
    double rmse = 0.0;
    double mnlp = 0.0;      // median negative log density
    double mlp = 0.0;       // median log density
    double coverage = 0.0;  // fraction of points within two standard deviations
};

[[nodiscard]] Metrics metrics(const VectorXd& mean, const VectorXd& variance, const VectorXd& truth);

}  // namespace kronlvm
