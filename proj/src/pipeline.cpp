#include "kronlvm/pipeline.hpp"

#include "kronlvm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace kronlvm {

namespace {

Index default_dim(Index n) { return std::clamp<Index>(n / 2, 1, 128); }

Index grid_size(const std::vector<MatrixXd>& x_s) {
    Index n = 1;
    for (const auto& f : x_s) n *= f.rows();
    return n;
}

InitPolicy policy_for(const SurrogateConfig& cfg, KernelFamily family, Index n_xi, std::uint64_t seed_offset) {
    InitPolicy p;
    p.family = family;
    p.latent_dim = cfg.latent_dim > 0 ? cfg.latent_dim : default_dim(n_xi);
    p.inducing = cfg.inducing > 0 ? std::min(cfg.inducing, n_xi) : default_dim(n_xi);
    p.seed = Rng::mix(cfg.seed, seed_offset);
    return p;
}

TrainReport report_of(const SgplvmTrainResult& r, const BoundCache& c) {
    return {r.initial_bound, c.bound, r.opt.iterations, r.opt.status, r.opt.log};
}

InferOptions infer_options(const SurrogateConfig& cfg, bool optimize_beta) {
    InferOptions o;
    o.optimize_beta_star = optimize_beta;
    o.restarts = cfg.restarts;
    o.seed = Rng::mix(cfg.seed, 101);
    o.optimizer = cfg.infer;
    return o;
}

MarginalOptions marginal_options(const SurrogateConfig& cfg) {
    MarginalOptions o;
    o.n_mog = cfg.n_mog;
    o.seed = Rng::mix(cfg.seed, 202);
    return o;
}

void check_field(const VectorXd& v, const std::vector<MatrixXd>& grid, const char* what) {
    if (v.size() != grid_size(grid)) {
        throw ValidationError(std::string(what) + ": field has " + std::to_string(v.size()) + " values but the grid has " +
                              std::to_string(grid_size(grid)) + " points");
    }
    if (!v.allFinite()) throw ValidationError(std::string(what) + ": field contains non-finite values");
}

void check_same_grid(const FieldDataset& a, const FieldDataset& b, const char* what) {
    bool same = a.grid.size() == b.grid.size();
    for (std::size_t k = 0; same && k < a.grid.size(); ++k) same = a.grid[k] == b.grid[k];
    if (!same) throw ValidationError(std::string(what) + ": input and output datasets must share one spatial grid");
}

MatrixXd select_rows(const MatrixXd& x, const std::vector<Index>& rows) {
    MatrixXd out(static_cast<Index>(rows.size()), x.cols());
    for (std::size_t t = 0; t < rows.size(); ++t) out.row(static_cast<Index>(t)) = x.row(rows[t]);
    return out;
}

}  // namespace

void SurrogateConfig::validate() const {
    if (latent_dim < 0 || inducing < 0) throw ValidationError("surrogate: latent_dim and inducing must be non-negative");
    if (restarts < 1) throw ValidationError("surrogate: restarts must be at least 1");
    if (n_mog < 1) throw ValidationError("surrogate: n_mog must be at least 1");
    if (output_kernel == KernelFamily::exponential || input_kernel == KernelFamily::exponential) {
        throw ValidationError("surrogate: the stochastic kernel must be linear, rbf or sum");
    }
}

MatrixXd stack_realizations(const MatrixXd& values) {
    const MatrixXd t = values.transpose();
    return t.reshaped(values.size(), 1);
}

std::vector<MatrixXd> grid_factors(const std::vector<VectorXd>& axes) {
    std::vector<MatrixXd> out;
    for (const auto& a : axes) out.emplace_back(a);
    return out;
}

std::vector<Index> solved_rows(const FieldDataset& data_in, const FieldDataset& data_out) {
    if (data_out.n_xi() == 0) throw ValidationError("two-model training: no solved realizations");
    if (data_out.first_index < data_in.first_index ||
        data_out.first_index + static_cast<std::uint64_t>(data_out.n_xi()) >
            data_in.first_index + static_cast<std::uint64_t>(data_in.n_xi())) {
        throw ValidationError("two-model training: solved realizations are not a subset of the input realizations");
    }
    std::vector<Index> rows(static_cast<std::size_t>(data_out.n_xi()));
    const auto start = static_cast<Index>(data_out.first_index - data_in.first_index);
    for (Index t = 0; t < data_out.n_xi(); ++t) rows[static_cast<std::size_t>(t)] = start + t;
    return rows;
}

// ---- two-model ----

void TwoModelSurrogate::refresh() {
    input_cache = bound_cache(input_model);
    output_cache = bound_cache(output_model);
}

void TwoModelSurrogate::validate() const {
    input_model.validate();
    output_model.validate();
    if (static_cast<Index>(solved.size()) != output_model.n_xi()) {
        throw ValidationError("two-model surrogate: solved map length differs from the output realizations");
    }
    for (std::size_t t = 0; t < solved.size(); ++t) {
        const Index i = solved[t];
        if (i < 0 || i >= input_model.n_xi()) throw ValidationError("two-model surrogate: solved map out of range");
        const auto r = static_cast<Index>(t);
        if (output_model.q.mu.row(r) != input_model.q.mu.row(i) || output_model.q.s.row(r) != input_model.q.s.row(i)) {
            throw ValidationError("two-model surrogate: output latents differ from the input latents they copy");
        }
    }
    if (!output_model.frozen.latents) throw ValidationError("two-model surrogate: output latents must be frozen");
}

TwoModelTrainResult train_two_model(const FieldDataset& data_in, const FieldDataset& data_out,
                                    const SurrogateConfig& cfg) {
    cfg.validate();
    data_in.validate();
    data_out.validate();
    TwoModelTrainResult res;
    TwoModelSurrogate& s = res.surrogate;
    s.solved = solved_rows(data_in, data_out);

    s.input_offset = data_in.values.mean();
    const MatrixXd y_in = stack_realizations(data_in.values.array() - s.input_offset);
    const SgplvmTrainResult in_fit =
        sgplvm_train(sgplvm_init(y_in, grid_factors(data_in.grid), policy_for(cfg, cfg.input_kernel, data_in.n_xi(), 1)),
                     cfg.train);
    s.input_model = in_fit.model;

    // Copy the posterior of the solved realizations and keep it fixed.
    const LatentPosterior q_out{select_rows(s.input_model.q.mu, s.solved), select_rows(s.input_model.q.s, s.solved)};
    s.output_offset = data_out.values.mean();
    const MatrixXd y_out = stack_realizations(data_out.values.array() - s.output_offset);
    SgplvmModel out0 = sgplvm_init_with_latents(y_out, grid_factors(data_out.grid), q_out,
                                                policy_for(cfg, cfg.output_kernel, data_out.n_xi(), 2));
    out0.frozen.latents = true;
    const SgplvmTrainResult out_fit = sgplvm_train(std::move(out0), cfg.train);
    s.output_model = out_fit.model;

    s.refresh();
    res.input = report_of(in_fit, s.input_cache);
    res.output = report_of(out_fit, s.output_cache);
    return res;
}

FieldPrediction forward_predict_two_model(const TwoModelSurrogate& s, const VectorXd& field_in,
                                          const std::vector<MatrixXd>& x_s_in_star,
                                          const std::vector<MatrixXd>& x_s_out_star, const SurrogateConfig& cfg) {
    check_field(field_in, x_s_in_star, "forward prediction");
    const InferResult inf = infer_latent(s.input_model, s.input_cache, field_in.array() - s.input_offset, x_s_in_star,
                                         {}, infer_options(cfg, false));
    FieldPrediction out;
    out.q_star = inf.q_star;
    out.objective = inf.objective;
    out.moments = predict_marginalized(s.output_model, s.output_cache, inf.q_star, x_s_out_star, marginal_options(cfg));
    out.moments.mean.array() += s.output_offset;
    return out;
}

FieldPrediction inverse_predict_two_model(const TwoModelSurrogate& s, const VectorXd& y_obs,
                                          const std::vector<MatrixXd>& x_s_obs,
                                          const std::vector<MatrixXd>& x_s_in_star, const SurrogateConfig& cfg) {
    check_field(y_obs, x_s_obs, "inverse prediction");
    const InferResult inf = infer_latent(s.output_model, s.output_cache, y_obs.array() - s.output_offset, x_s_obs, {},
                                         infer_options(cfg, true));
    FieldPrediction out;
    out.q_star = inf.q_star;
    out.objective = inf.objective;
    out.moments = predict_marginalized(s.input_model, s.input_cache, inf.q_star, x_s_in_star, marginal_options(cfg));
    out.moments.mean.array() += s.input_offset;
    return out;
}

// ---- joint ----

void JointSurrogate::refresh() { cache = bound_cache(model); }

void JointSurrogate::validate() const {
    model.validate();
    if (model.y.cols() != 2) throw ValidationError("joint surrogate: model must have two output columns");
    if (!(output_scale > 0.0) || !std::isfinite(output_scale)) {
        throw ValidationError("joint surrogate: output scale must be positive");
    }
}

JointTrainResult train_joint(const FieldDataset& data_in, const FieldDataset& data_out, const SurrogateConfig& cfg) {
    cfg.validate();
    data_in.validate();
    data_out.validate();
    if (data_in.n_xi() != data_out.n_xi() || data_in.first_index != data_out.first_index) {
        throw ValidationError(
            "joint training: input and output datasets must hold the same realizations "
            "(the joint model needs n_xi,in = n_xi,out)");
    }
    check_same_grid(data_in, data_out, "joint training");

    JointTrainResult res;
    JointSurrogate& s = res.surrogate;
    s.input_offset = data_in.values.mean();
    s.output_offset = data_out.values.mean();
    const double var_out = (data_out.values.array() - s.output_offset).square().mean();
    if (!(var_out > 1e-20)) throw ValidationError("joint training: output data is constant");
    s.output_scale = std::sqrt(var_out);

    MatrixXd y(data_in.values.size(), 2);
    y.col(0) = stack_realizations(data_in.values.array() - s.input_offset);
    y.col(1) = stack_realizations((data_out.values.array() - s.output_offset) / s.output_scale);
    const SgplvmTrainResult fit =
        sgplvm_train(sgplvm_init(y, grid_factors(data_in.grid), policy_for(cfg, cfg.input_kernel, data_in.n_xi(), 3)),
                     cfg.train);
    s.model = fit.model;
    s.refresh();
    res.report = report_of(fit, s.cache);
    return res;
}

FieldPrediction forward_predict_joint(const JointSurrogate& s, const VectorXd& field_in,
                                      const std::vector<MatrixXd>& x_s_in_star,
                                      const std::vector<MatrixXd>& x_s_out_star, const SurrogateConfig& cfg) {
    check_field(field_in, x_s_in_star, "forward prediction");
    MatrixXd y(field_in.size(), 2);
    y.col(0) = field_in.array() - s.input_offset;
    y.col(1).setConstant(std::numeric_limits<double>::quiet_NaN());
    const InferResult inf = infer_latent(s.model, s.cache, y, x_s_in_star, {true, false}, infer_options(cfg, false));
    FieldPrediction out;
    out.q_star = inf.q_star;
    out.objective = inf.objective;
    const PredictiveMoments p = predict_marginalized(s.model, s.cache, inf.q_star, x_s_out_star, marginal_options(cfg));
    out.moments.mean = (p.mean.col(1).array() * s.output_scale + s.output_offset).matrix();
    out.moments.variance = p.variance.col(1) * (s.output_scale * s.output_scale);
    return out;
}

FieldPrediction inverse_predict_joint(const JointSurrogate& s, const VectorXd& y_obs,
                                      const std::vector<MatrixXd>& x_s_obs,
                                      const std::vector<MatrixXd>& x_s_in_star, const SurrogateConfig& cfg) {
    check_field(y_obs, x_s_obs, "inverse prediction");
    MatrixXd y(y_obs.size(), 2);
    y.col(0).setConstant(std::numeric_limits<double>::quiet_NaN());
    y.col(1) = (y_obs.array() - s.output_offset) / s.output_scale;
    const InferResult inf = infer_latent(s.model, s.cache, y, x_s_obs, {false, true}, infer_options(cfg, true));
    FieldPrediction out;
    out.q_star = inf.q_star;
    out.objective = inf.objective;
    const PredictiveMoments p = predict_marginalized(s.model, s.cache, inf.q_star, x_s_in_star, marginal_options(cfg));
    out.moments.mean = (p.mean.col(0).array() + s.input_offset).matrix();
    out.moments.variance = p.variance.col(0);
    return out;
}

// ---- PCA baseline ----

MatrixXd PcaInputModel::loadings() const {
    return components * (singular_values / std::sqrt(static_cast<double>(n_train))).asDiagonal();
}

Eigen::RowVectorXd PcaInputModel::encode(const VectorXd& field) const {
    if (field.size() != mean.size()) throw ValidationError("pca encode: field size differs from the model");
    // Least squares against the (orthogonal) loading columns.
    const VectorXd scale = singular_values / std::sqrt(static_cast<double>(n_train));
    return ((components.transpose() * (field - mean)).array() / scale.array()).matrix().transpose();
}

VectorXd PcaInputModel::decode(const Eigen::RowVectorXd& z) const {
    if (z.size() != dim()) throw ValidationError("pca decode: latent size differs from the model");
    return mean + loadings() * z.transpose();
}

PcaInputModel fit_pca(const MatrixXd& values, Index d) {
    const Index n = values.rows();
    if (n < 2) throw ValidationError("pca: need at least two realizations");
    if (d < 1 || d > std::min(n, values.cols())) throw ValidationError("pca: retained dimension out of range");
    PcaInputModel p;
    p.n_train = n;
    p.mean = values.colwise().mean().transpose();
    const MatrixXd R = values.rowwise() - p.mean.transpose();
    const Eigen::BDCSVD<MatrixXd> svd(R, Eigen::ComputeThinV);
    const VectorXd& sv = svd.singularValues();
    if (!(sv(d - 1) > 1e-12 * sv(0))) throw ValidationError("pca: data spans fewer directions than requested");
    p.components = svd.matrixV().leftCols(d);
    p.singular_values = sv.head(d);
    p.residual_variance = sv.tail(sv.size() - d).squaredNorm() / static_cast<double>(n * values.cols());
    return p;
}

void PcaSurrogate::refresh() { output_cache = bound_cache(output_model); }

PcaTrainResult train_pca_baseline(const FieldDataset& data_in, const FieldDataset& data_out,
                                  const SurrogateConfig& cfg) {
    cfg.validate();
    data_in.validate();
    data_out.validate();
    PcaTrainResult res;
    PcaSurrogate& s = res.surrogate;
    s.solved = solved_rows(data_in, data_out);
    const Index d = cfg.latent_dim > 0 ? cfg.latent_dim : default_dim(data_in.n_xi());
    s.input_model = fit_pca(data_in.values, d);

    LatentPosterior q{MatrixXd(data_out.n_xi(), d), MatrixXd::Constant(data_out.n_xi(), d, 1e-6)};
    for (Index t = 0; t < data_out.n_xi(); ++t) {
        q.mu.row(t) = s.input_model.encode(data_in.values.row(s.solved[static_cast<std::size_t>(t)]).transpose());
    }
    s.output_offset = data_out.values.mean();
    const MatrixXd y_out = stack_realizations(data_out.values.array() - s.output_offset);
    SgplvmModel out0 = sgplvm_init_with_latents(y_out, grid_factors(data_out.grid), q,
                                                policy_for(cfg, cfg.output_kernel, data_out.n_xi(), 4));
    out0.frozen.latents = true;
    const SgplvmTrainResult fit = sgplvm_train(std::move(out0), cfg.train);
    s.output_model = fit.model;
    s.refresh();
    res.output = report_of(fit, s.output_cache);
    return res;
}

FieldPrediction forward_predict_pca(const PcaSurrogate& s, const VectorXd& field_in,
                                    const std::vector<MatrixXd>& x_s_out_star, const SurrogateConfig& cfg) {
    (void)cfg;
    FieldPrediction out;
    out.q_star = {s.input_model.encode(field_in), Eigen::RowVectorXd::Constant(s.input_model.dim(), 1e-6),
                  s.output_model.beta};
    out.moments = predict_given_latent(s.output_model, s.output_cache, out.q_star.mu, x_s_out_star);
    out.moments.mean.array() += s.output_offset;
    return out;
}

FieldPrediction inverse_predict_pca(const PcaSurrogate& s, const VectorXd& y_obs, const std::vector<MatrixXd>& x_s_obs,
                                    const SurrogateConfig& cfg) {
    check_field(y_obs, x_s_obs, "inverse prediction");
    const InferResult inf = infer_latent(s.output_model, s.output_cache, y_obs.array() - s.output_offset, x_s_obs, {},
                                         infer_options(cfg, true));
    FieldPrediction out;
    out.q_star = inf.q_star;
    out.objective = inf.objective;
    // The decoder is linear, so latent uncertainty maps through the squared
    // loadings; discarded directions add their average variance.
    const MatrixXd L = s.input_model.loadings();
    out.moments.mean = s.input_model.decode(inf.q_star.mu);
    out.moments.variance =
        (L.cwiseAbs2() * inf.q_star.s.transpose()).array() + s.input_model.residual_variance;
    return out;
}

// ---- metrics ----

Metrics metrics(const VectorXd& mean, const VectorXd& variance, const VectorXd& truth) {
    const Index n = truth.size();
    if (n == 0 || mean.size() != n || variance.size() != n) throw ValidationError("metrics: shapes differ or are empty");
    if (!(variance.array() > 0.0).all()) throw ValidationError("metrics: predictive variances must be positive");
    const VectorXd r = mean - truth;
    Metrics m;
    m.rmse = std::sqrt(r.squaredNorm() / static_cast<double>(n));
    std::vector<double> nlp(static_cast<std::size_t>(n));
    Index inside = 0;
    for (Index i = 0; i < n; ++i) {
        nlp[static_cast<std::size_t>(i)] =
            0.5 * (std::log(2.0 * std::numbers::pi * variance(i)) + r(i) * r(i) / variance(i));
        if (std::abs(r(i)) <= 2.0 * std::sqrt(variance(i))) ++inside;
    }
    std::sort(nlp.begin(), nlp.end());
    const std::size_t h = nlp.size() / 2;
    m.mnlp = nlp.size() % 2 == 1 ? nlp[h] : 0.5 * (nlp[h - 1] + nlp[h]);
    m.mlp = -m.mnlp;
    m.coverage = static_cast<double>(inside) / static_cast<double>(n);
    return m;
}

}  // namespace kronlvm
