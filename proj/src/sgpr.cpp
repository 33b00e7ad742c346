#include "kronlvm/sgpr.hpp"

#include "kronlvm/errors.hpp"

#include <cmath>
#include <numbers>

namespace kronlvm {

std::vector<Index> StructuredInputs::dims() const {
    std::vector<Index> d{x_xi.rows()};
    for (const auto& f : x_s) d.push_back(f.rows());
    return d;
}

Index StructuredInputs::n() const { return x_xi.rows() * n_s(); }

Index StructuredInputs::n_s() const {
    Index n = 1;
    for (const auto& f : x_s) n *= f.rows();
    return n;
}

void StructuredInputs::validate() const {
    if (x_xi.rows() == 0 || x_xi.cols() == 0) throw ValidationError("structured inputs: empty stochastic factor");
    for (const auto& f : x_s) {
        if (f.rows() == 0 || f.cols() == 0) throw ValidationError("structured inputs: empty spatial factor");
    }
}

namespace {

void check_spatial_kernel(const KernelSpec& k) {
    if (k.family != KernelFamily::exponential && k.family != KernelFamily::rbf_ard) {
        throw ValidationError("spatial kernels must be exponential or rbf");
    }
    k.validate();
}

const KernelSpec& factor_kernel(const SgprModel& m, std::size_t f) { return f == 0 ? m.k_xi : m.k_s[f - 1]; }

const MatrixXd& factor_input(const StructuredInputs& in, std::size_t f) { return f == 0 ? in.x_xi : in.x_s[f - 1]; }

VectorXd inverse_diag(const VectorXd& lambda, double beta) {
    return (lambda.array() + 1.0 / beta).inverse();
}

// Kronecker product of all eigenvalue vectors except factor `skip`.
VectorXd other_eigenvalues(const std::vector<EigenPair>& eig, std::size_t skip) {
    std::vector<VectorXd> parts;
    for (std::size_t g = 0; g < eig.size(); ++g) {
        if (g != skip) parts.push_back(eig[g].lambda);
    }
    return kron_vectors(parts);
}

}  // namespace

void SgprModel::validate() const {
    inputs.validate();
    if (k_s.size() != inputs.x_s.size()) throw ValidationError("sgpr: one spatial kernel per spatial factor required");
    if (y.rows() != inputs.n()) {
        throw ValidationError("sgpr: output rows (" + std::to_string(y.rows()) + ") do not match the design size (" +
                              std::to_string(inputs.n()) + ")");
    }
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ValidationError("sgpr: noise precision must be positive");
    k_xi.validate();
    for (const auto& k : k_s) check_spatial_kernel(k);
}

SgprCache sgpr_cache(const SgprModel& m) {
    m.validate();
    SgprCache c;
    const std::size_t F = 1 + m.k_s.size();
    std::vector<VectorXd> lams;
    for (std::size_t f = 0; f < F; ++f) {
        const MatrixXd& X = factor_input(m.inputs, f);
        const MatrixXd K = gram(factor_kernel(m, f), X, X);
        if (!K.allFinite()) throw NumericalError("sgpr: kernel matrix has non-finite entries");
        EigenPair e = sym_eig(K);
        e.lambda = e.lambda.cwiseMax(0.0);
        lams.push_back(e.lambda);
        c.eig.push_back(std::move(e));
    }
    c.lambda = kron_vectors(lams);

    std::vector<MatrixXd> qt;
    for (const auto& e : c.eig) qt.push_back(e.Q.transpose());
    std::vector<const MatrixXd*> ptr;
    for (const auto& q : qt) ptr.push_back(&q);
    const auto dims = m.inputs.dims();
    c.rotated_y.resize(m.y.rows(), m.y.cols());
    for (Index j = 0; j < m.y.cols(); ++j) c.rotated_y.col(j) = multi_mode_product(Tensor{m.y.col(j), dims}, ptr).data;
    return c;
}

double sgpr_log_likelihood(const SgprModel& m, const SgprCache& c) {
    const double n = static_cast<double>(m.y.rows());
    const double d = static_cast<double>(m.y.cols());
    const VectorXd noisy = c.lambda.array() + 1.0 / m.beta;
    const VectorXd inv = noisy.cwiseInverse();
    const double logdet = noisy.array().log().sum();
    const double fit = (c.rotated_y.array().square().colwise() * inv.array()).sum();
    return -0.5 * d * (n * std::log(2.0 * std::numbers::pi) + logdet) - 0.5 * fit;
}

double sgpr_log_likelihood(const SgprModel& m) { return sgpr_log_likelihood(m, sgpr_cache(m)); }

SgprGradient sgpr_gradients(const SgprModel& m, const SgprCache& c) {
    const auto dims = m.inputs.dims();
    const double d = static_cast<double>(m.y.cols());
    const VectorXd inv = inverse_diag(c.lambda, m.beta);
    const MatrixXd alpha = c.rotated_y.array().colwise() * inv.array();

    std::vector<VectorXd> lams;
    for (const auto& e : c.eig) lams.push_back(e.lambda);

    SgprGradient g;
    for (std::size_t f = 0; f < c.eig.size(); ++f) {
        const VectorXd w = other_eigenvalues(c.eig, f);
        MatrixXd N = MatrixXd::Zero(dims[f], dims[f]);
        for (Index j = 0; j < alpha.cols(); ++j) {
            const MatrixXd U = unfold(Tensor{alpha.col(j), dims}, f);
            N.noalias() += 0.5 * U * w.asDiagonal() * U.transpose();
        }
        N.diagonal() -= 0.5 * d * weighted_partial_sum(Tensor{inv, dims}, f, lams);
        const MatrixXd& Q = c.eig[f].Q;
        const MatrixXd G = Q * N * Q.transpose();
        const MatrixXd& X = factor_input(m.inputs, f);
        const VectorXd lp = gram_vjp(factor_kernel(m, f), X, X, G).log_params;
        if (f == 0) {
            g.k_xi = lp;
        } else {
            g.k_s.push_back(lp.tail(lp.size() - 1));
        }
    }
    const double d_noise_var = 0.5 * alpha.squaredNorm() - 0.5 * d * inv.sum();
    g.log_beta = -d_noise_var / m.beta;
    return g;
}

VectorXd sgpr_pack(const SgprModel& m) {
    std::vector<double> p;
    const VectorXd kx = m.k_xi.log_params();
    p.insert(p.end(), kx.data(), kx.data() + kx.size());
    for (const auto& k : m.k_s) {
        const VectorXd lp = k.log_params();
        p.insert(p.end(), lp.data() + 1, lp.data() + lp.size());
    }
    p.push_back(std::log(m.beta));
    return Eigen::Map<const VectorXd>(p.data(), static_cast<Index>(p.size()));
}

void sgpr_unpack(SgprModel& m, const VectorXd& p) {
    Index o = 0;
    const Index nx = m.k_xi.num_params();
    m.k_xi.set_log_params(p.segment(o, nx));
    o += nx;
    for (auto& k : m.k_s) {
        VectorXd lp = k.log_params();
        lp.tail(lp.size() - 1) = p.segment(o, lp.size() - 1);
        o += lp.size() - 1;
        k.set_log_params(lp);
    }
    m.beta = std::exp(p(o++));
    if (o != p.size()) throw ValidationError("sgpr_unpack: parameter vector has wrong length");
}

SgprTrainResult sgpr_train(SgprModel m, const OptimizerSettings& settings) {
    m.validate();
    const SgprModel base = m;
    auto objective = [&base](const VectorXd& p, VectorXd& grad) {
        SgprModel trial = base;
        SgprCache c;
        try {
            sgpr_unpack(trial, p);
            c = sgpr_cache(trial);
        } catch (const ValidationError& e) {
            throw NumericalError(std::string("trial point outside the parameter domain: ") + e.what());
        }
        const double ll = sgpr_log_likelihood(trial, c);
        const SgprGradient g = sgpr_gradients(trial, c);
        Index o = 0;
        grad.segment(o, g.k_xi.size()) = g.k_xi;
        o += g.k_xi.size();
        for (const auto& gs : g.k_s) {
            grad.segment(o, gs.size()) = gs;
            o += gs.size();
        }
        grad(o) = g.log_beta;
        return ll;
    };
    SgprTrainResult res;
    res.opt = maximize(objective, sgpr_pack(m), settings);
    sgpr_unpack(m, res.opt.x);
    res.model = std::move(m);
    return res;
}

PredictiveMoments sgpr_predict(const SgprModel& m, const SgprCache& c, const StructuredInputs& test,
                               const PredictOptions& opts) {
    test.validate();
    if (test.x_s.size() != m.inputs.x_s.size()) throw ValidationError("sgpr_predict: spatial factor count differs");
    if (opts.full_covariance && test.x_xi.rows() != 1) {
        throw ValidationError("sgpr_predict: full covariance requires a single stochastic test point");
    }
    const std::size_t F = c.eig.size();
    const VectorXd inv = inverse_diag(c.lambda, m.beta);
    const MatrixXd alpha = c.rotated_y.array().colwise() * inv.array();

    std::vector<MatrixXd> A(F), A2(F);
    std::vector<VectorXd> kss;
    for (std::size_t f = 0; f < F; ++f) {
        A[f] = gram(factor_kernel(m, f), factor_input(test, f), factor_input(m.inputs, f)) * c.eig[f].Q;
        A2[f] = A[f].cwiseAbs2();
        kss.push_back(gram_diag(factor_kernel(m, f), factor_input(test, f)));
    }

    PredictiveMoments out;
    out.mean.resize(test.n(), m.y.cols());
    for (Index j = 0; j < m.y.cols(); ++j) out.mean.col(j) = kron_apply(A, alpha.col(j));

    const double noise = opts.include_noise ? 1.0 / m.beta : 0.0;
    if (opts.variance) {
        const VectorXd v = kron_vectors(kss) - kron_apply(A2, inv) + VectorXd::Constant(test.n(), noise);
        out.variance = v.replicate(1, m.y.cols());
    }
    if (opts.full_covariance) {
        // Blockwise accumulation over training realizations: each block of
        // the rotated inverse is diagonal in the spatial eigenbasis.
        if (F < 2) throw ValidationError("sgpr_predict: full covariance needs at least one spatial factor");
        const std::vector<MatrixXd> spatial(A.begin() + 1, A.end());
        const MatrixXd As = KronMatrix{spatial}.dense();
        std::vector<VectorXd> slam;
        std::vector<MatrixXd> kss_full;
        for (std::size_t f = 1; f < F; ++f) {
            slam.push_back(c.eig[f].lambda);
            kss_full.push_back(gram(factor_kernel(m, f), factor_input(test, f), factor_input(test, f)));
        }
        const VectorXd lam_s = kron_vectors(slam);
        const Eigen::RowVectorXd g = A[0].row(0);
        const double kxx = gram(m.k_xi, test.x_xi, test.x_xi)(0, 0);
        MatrixXd S = MatrixXd::Zero(As.rows(), As.rows());
        for (Index a = 0; a < g.size(); ++a) {
            const VectorXd h = (c.eig[0].lambda(a) * lam_s.array() + 1.0 / m.beta).inverse().sqrt();
            const MatrixXd H = As * h.asDiagonal();
            S.selfadjointView<Eigen::Lower>().rankUpdate(H, -g(a) * g(a));
        }
        S = S.selfadjointView<Eigen::Lower>();
        out.covariance = kxx * KronMatrix{kss_full}.dense() + S;
        out.covariance.diagonal().array() += noise;
    }
    return out;
}

}  // namespace kronlvm
