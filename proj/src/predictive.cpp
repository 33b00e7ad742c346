#include "kronlvm/predictive.hpp"

#include "kronlvm/errors.hpp"
#include "kronlvm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace kronlvm {

void TestLatentPosterior::validate() const {
    if (mu.size() == 0 || mu.size() != s.size()) throw ValidationError("test latent: mu and s must have equal nonzero length");
    if ((s.array() <= 0.0).any()) throw ValidationError("test latent: variances must be positive");
    if (!mu.allFinite() || !s.allFinite()) throw NumericalError("test latent: non-finite entries");
    if (!(beta_star > 0.0) || !std::isfinite(beta_star)) throw ValidationError("test latent: noise precision must be positive");
}

namespace {

constexpr double log_2pi = 1.8378770664093454836;

void check_cache(const SgplvmModel& m, const BoundCache& c) {
    if (c.factors.size() != 1 + m.x_s.size() || c.v_hat.cols() != m.y.cols() ||
        c.factors[0].E.rows() != m.z_xi.rows()) {
        throw ValidationError("predictive: bound cache does not belong to this model");
    }
}

void check_spatial(const SgplvmModel& m, const std::vector<MatrixXd>& x_s_star) {
    if (x_s_star.size() != m.x_s.size()) {
        throw ValidationError("predictive: expected " + std::to_string(m.x_s.size()) + " spatial test factors, got " +
                              std::to_string(x_s_star.size()));
    }
    for (std::size_t f = 0; f < x_s_star.size(); ++f) {
        if (x_s_star[f].rows() == 0 || x_s_star[f].cols() != m.x_s[f].cols()) {
            throw ValidationError("predictive: spatial test factor " + std::to_string(f) + " has the wrong shape");
        }
    }
}

Index grid_size(const std::vector<MatrixXd>& x_s) {
    Index n = 1;
    for (const auto& f : x_s) n *= f.rows();
    return n;
}

// K*_f E_f for every spatial factor.
std::vector<MatrixXd> spatial_phi(const SgplvmModel& m, const BoundCache& c, const std::vector<MatrixXd>& x_s_star) {
    std::vector<MatrixXd> out;
    for (std::size_t f = 0; f < m.x_s.size(); ++f) {
        out.push_back(gram(m.k_s[f], x_s_star[f], m.x_s[f]) * c.factors[f + 1].E);
    }
    return out;
}

// 1 - 1/(beta D): the weights of the variance reduction.
VectorXd shrinkage(const SgplvmModel& m, const BoundCache& c) {
    return (1.0 - (m.beta * c.D.array()).inverse()).matrix();
}

MatrixXd apply_all(const std::vector<MatrixXd>& factors, const MatrixXd& V) {
    Index rows = 1;
    for (const auto& f : factors) rows *= f.rows();
    MatrixXd out(rows, V.cols());
    for (Index j = 0; j < V.cols(); ++j) out.col(j) = kron_apply(factors, V.col(j));
    return out;
}

}  // namespace

PredictiveMoments predict_given_latent(const SgplvmModel& m, const BoundCache& c, const MatrixXd& x_xi_star,
                                       const std::vector<MatrixXd>& x_s_star, const PredictOptions& opts) {
    check_cache(m, c);
    check_spatial(m, x_s_star);
    if (x_xi_star.rows() == 0 || x_xi_star.cols() != m.latent_dim()) {
        throw ValidationError("predict_given_latent: test latents must have " + std::to_string(m.latent_dim()) + " columns");
    }
    if (opts.full_covariance && x_xi_star.rows() != 1) {
        throw ValidationError("predict_given_latent: full covariance requires a single stochastic test point");
    }
    std::vector<MatrixXd> A{gram(m.k_xi, x_xi_star, m.z_xi) * c.factors[0].E};
    for (auto& p : spatial_phi(m, c, x_s_star)) A.push_back(std::move(p));

    PredictiveMoments out;
    out.mean = apply_all(A, c.v_hat);
    const Index n_star = out.mean.rows();
    const double noise = opts.include_noise ? 1.0 / m.beta : 0.0;
    const VectorXd w = shrinkage(m, c);

    if (opts.variance) {
        std::vector<VectorXd> kss{gram_diag(m.k_xi, x_xi_star)};
        std::vector<MatrixXd> A2;
        for (std::size_t f = 0; f < x_s_star.size(); ++f) kss.push_back(gram_diag(m.k_s[f], x_s_star[f]));
        for (const auto& a : A) A2.push_back(a.cwiseAbs2());
        const VectorXd v = (kron_vectors(kss) - kron_apply(A2, w)).cwiseMax(0.0);
        out.variance = (v.array() + noise).matrix().replicate(1, m.y.cols());
    }
    if (opts.full_covariance) {
        if (x_s_star.empty()) throw ValidationError("predict_given_latent: full covariance needs a spatial factor");
        // One rank update per stochastic inducing index; each block of the
        // weights is diagonal in the spatial eigenbasis.
        const std::vector<MatrixXd> spatial(A.begin() + 1, A.end());
        const MatrixXd As = KronMatrix{spatial}.dense();
        const Index ms = As.cols();
        const Eigen::RowVectorXd g = A[0].row(0);
        MatrixXd S = MatrixXd::Zero(n_star, n_star);
        for (Index a = 0; a < g.size(); ++a) {
            const MatrixXd H = As * w.segment(a * ms, ms).cwiseSqrt().asDiagonal();
            S.selfadjointView<Eigen::Lower>().rankUpdate(H, -g(a) * g(a));
        }
        S = S.selfadjointView<Eigen::Lower>();
        std::vector<MatrixXd> kss_full;
        for (std::size_t f = 0; f < x_s_star.size(); ++f) kss_full.push_back(gram(m.k_s[f], x_s_star[f], x_s_star[f]));
        out.covariance = gram(m.k_xi, x_xi_star, x_xi_star)(0, 0) * KronMatrix{kss_full}.dense() + S;
        out.covariance.diagonal().array() += noise;
    }
    return out;
}

PredictiveMoments predict_given_latent(const SgplvmModel& m, const MatrixXd& x_xi_star,
                                       const std::vector<MatrixXd>& x_s_star, const PredictOptions& opts) {
    return predict_given_latent(m, bound_cache(m), x_xi_star, x_s_star, opts);
}

MatrixXd marginal_mean(const SgplvmModel& m, const BoundCache& c, const LatentPosterior& q_star,
                       const std::vector<MatrixXd>& x_s_star) {
    check_cache(m, c);
    check_spatial(m, x_s_star);
    q_star.validate();
    if (q_star.mu.cols() != m.latent_dim()) throw ValidationError("marginal_mean: latent dimension differs from the model");
    std::vector<MatrixXd> A{psi_stats(m.k_xi, q_star, m.z_xi).psi1 * c.factors[0].E};
    for (auto& p : spatial_phi(m, c, x_s_star)) A.push_back(std::move(p));
    return apply_all(A, c.v_hat);
}

PredictiveMoments predict_marginalized(const SgplvmModel& m, const BoundCache& c, const TestLatentPosterior& q_star,
                                       const std::vector<MatrixXd>& x_s_star, const MarginalOptions& opts) {
    q_star.validate();
    if (opts.n_mog < 1) throw ValidationError("predict_marginalized: n_mog must be at least 1");
    PredictiveMoments out;
    out.mean = marginal_mean(m, c, q_star.as_posterior(), x_s_star);

    Rng rng(opts.seed);
    const Eigen::RowVectorXd sd = q_star.s.cwiseSqrt();
    MatrixXd x(opts.n_mog, q_star.mu.size());
    for (Index i = 0; i < opts.n_mog; ++i) {
        for (Index k = 0; k < x.cols(); ++k) x(i, k) = q_star.mu(k) + sd(k) * rng.normal();
    }
    PredictOptions po;
    po.include_noise = opts.include_noise;
    out.variance = MatrixXd::Zero(out.mean.rows(), out.mean.cols());
    for (Index i = 0; i < opts.n_mog; ++i) {
        const PredictiveMoments p = predict_given_latent(m, c, x.row(i), x_s_star, po);
        out.variance += (p.mean - out.mean).cwiseAbs2() + p.variance;
    }
    out.variance /= static_cast<double>(opts.n_mog);
    return out;
}

TestTerm test_term(const SgplvmModel& m, const BoundCache& c, const TestLatentPosterior& q_star, const MatrixXd& y_star,
                   const std::vector<MatrixXd>& x_s_star, const std::vector<bool>& observed) {
    check_cache(m, c);
    check_spatial(m, x_s_star);
    q_star.validate();
    const Index d = m.y.cols();
    const Index n_star = grid_size(x_s_star);
    if (q_star.mu.size() != m.latent_dim()) throw ValidationError("test_term: latent dimension differs from the model");
    if (y_star.rows() != n_star || y_star.cols() != d) {
        throw ValidationError("test_term: observations must be " + std::to_string(n_star) + " x " + std::to_string(d));
    }
    if (!observed.empty() && static_cast<Index>(observed.size()) != d) {
        throw ValidationError("test_term: mask length differs from the output dimension");
    }
    auto is_observed = [&observed](Index j) { return observed.empty() || observed[static_cast<std::size_t>(j)]; };
    Index n_obs = 0;
    for (Index j = 0; j < d; ++j) {
        if (!is_observed(j)) continue;
        ++n_obs;
        if (!y_star.col(j).allFinite()) throw ValidationError("test_term: observed column contains non-finite values");
    }
    if (n_obs == 0) throw ValidationError("test_term: every output dimension is masked");

    const LatentPosterior q = q_star.as_posterior();
    const PsiStats ps = psi_stats(m.k_xi, q, m.z_xi);
    const MatrixXd& Ex = c.factors[0].E;
    const Index mx = Ex.cols();
    const Index ms = c.lambda.size() / mx;

    const std::vector<MatrixXd> phi = spatial_phi(m, c, x_s_star);
    std::vector<MatrixXd> phit, omega;
    std::vector<VectorXd> omega_diag;
    double trace_kss = 1.0;
    for (std::size_t f = 0; f < phi.size(); ++f) {
        phit.push_back(phi[f].transpose());
        omega.push_back(phi[f].transpose() * phi[f]);
        omega_diag.push_back(omega.back().diagonal());
        trace_kss *= gram_diag(m.k_s[f], x_s_star[f]).sum();
    }
    const VectorXd wdiag_s = kron_vectors(omega_diag);

    // Diagonal contribution of the q(U) covariance and the -K^-1 term.
    const MatrixXd inv_bd = (m.beta * c.D.array()).inverse().matrix().reshaped<Eigen::RowMajor>(mx, ms);
    const VectorXd wdiag = (inv_bd.array() - 1.0).matrix() * wdiag_s;

    const double beta = q_star.beta_star;
    TestTerm t;
    t.per_dim = VectorXd::Zero(d);
    MatrixXd G1 = MatrixXd::Zero(1, mx), G2 = MatrixXd::Zero(mx, mx);
    for (Index j = 0; j < d; ++j) {
        if (!is_observed(j)) continue;
        const MatrixXd V = c.v_hat.col(j).reshaped<Eigen::RowMajor>(mx, ms);
        const VectorXd r = kron_apply(phit, y_star.col(j));
        MatrixXd VO(mx, ms);
        for (Index a = 0; a < mx; ++a) VO.row(a) = kron_apply(omega, V.row(a).transpose()).transpose();
        MatrixXd M = V * VO.transpose();
        M.diagonal() += wdiag;
        const VectorXd gamma = Ex * (V * r);
        const MatrixXd EME = Ex * M * Ex.transpose();
        const double X = y_star.col(j).squaredNorm() - 2.0 * ps.psi1.row(0).dot(gamma) + (ps.psi2.array() * EME.array()).sum() +
                         ps.psi0 * trace_kss;
        t.per_dim(j) = -0.5 * static_cast<double>(n_star) * (log_2pi - std::log(beta)) - 0.5 * beta * X;
        t.d_log_beta_star += 0.5 * static_cast<double>(n_star) - 0.5 * beta * X;
        G1 += beta * gamma.transpose();
        G2 -= 0.5 * beta * EME;
    }
    t.sum = t.per_dim.sum();
    t.kl = latent_prior_kl(q);
    t.objective = t.sum - t.kl;
    if (!std::isfinite(t.objective)) throw NumericalError("test_term: objective is not finite");

    const double g0 = -0.5 * beta * static_cast<double>(n_obs) * trace_kss;
    const PsiGradient pg = psi_vjp(m.k_xi, q, m.z_xi, g0, G1, G2);
    t.d_mu = pg.mu.row(0) - q_star.mu;
    t.d_log_s = (pg.s.row(0).array() * q_star.s.array() - 0.5 * (q_star.s.array() - 1.0)).matrix();
    return t;
}

namespace {

struct InferProblem {
    const SgplvmModel& m;
    const BoundCache& c;
    const MatrixXd& y_star;
    const std::vector<MatrixXd>& x_s_star;
    const std::vector<bool>& observed;
    const InferOptions& opts;
    double beta_fixed;

    [[nodiscard]] Index dim() const { return m.latent_dim(); }

    [[nodiscard]] VectorXd pack(const TestLatentPosterior& q) const {
        VectorXd p(2 * dim() + (opts.optimize_beta_star ? 1 : 0));
        p.head(dim()) = q.mu.transpose();
        p.segment(dim(), dim()) = q.s.array().log().matrix().transpose();
        if (opts.optimize_beta_star) p(2 * dim()) = std::log(q.beta_star);
        return p;
    }

    [[nodiscard]] TestLatentPosterior unpack(const VectorXd& p, bool& beta_clamped) const {
        TestLatentPosterior q;
        q.mu = p.head(dim()).transpose();
        q.s = p.segment(dim(), dim()).array().exp().matrix().transpose();
        q.beta_star = beta_fixed;
        beta_clamped = false;
        if (opts.optimize_beta_star) {
            const double lo = std::log(opts.beta_star_min), hi = std::log(opts.beta_star_max);
            const double lb = p(2 * dim());
            beta_clamped = lb < lo || lb > hi;
            q.beta_star = std::exp(std::clamp(lb, lo, hi));
        }
        return q;
    }

    double operator()(const VectorXd& p, VectorXd& grad) const {
        bool clamped = false;
        const TestLatentPosterior q = unpack(p, clamped);
        TestTerm t;
        try {
            t = test_term(m, c, q, y_star, x_s_star, observed);
        } catch (const ValidationError& e) {
            throw NumericalError(std::string("trial point outside the parameter domain: ") + e.what());
        }
        grad.resize(p.size());
        grad.head(dim()) = t.d_mu.transpose();
        grad.segment(dim(), dim()) = t.d_log_s.transpose();
        if (opts.optimize_beta_star) grad(2 * dim()) = clamped ? 0.0 : t.d_log_beta_star;
        return t.objective;
    }
};

}  // namespace

InferResult infer_latent(const SgplvmModel& m, const BoundCache& c, const MatrixXd& y_star,
                         const std::vector<MatrixXd>& x_s_star, const std::vector<bool>& observed,
                         const InferOptions& opts) {
    check_cache(m, c);
    if (opts.restarts < 1) throw ValidationError("infer_latent: at least one restart is required");
    if (!(opts.beta_star_min > 0.0) || !(opts.beta_star_max >= opts.beta_star_min)) {
        throw ValidationError("infer_latent: invalid noise precision bounds");
    }
    const InferProblem problem{m, c, y_star, x_s_star, observed, opts,
                               std::clamp(m.beta, opts.beta_star_min, opts.beta_star_max)};
    const Eigen::RowVectorXd s0 = m.q.s.colwise().mean();

    // Warm start: the training latent whose point estimate scores best.
    TestLatentPosterior warm{m.q.mu.row(0), s0, problem.beta_fixed};
    double warm_value = -std::numeric_limits<double>::infinity();
    for (Index i = 0; i < m.n_xi(); ++i) {
        const TestLatentPosterior cand{m.q.mu.row(i), s0, problem.beta_fixed};
        const double v = test_term(m, c, cand, y_star, x_s_star, observed).objective;
        if (v > warm_value) {
            warm_value = v;
            warm = cand;
        }
    }

    InferResult best;
    best.objective = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (int r = 0; r < opts.restarts; ++r) {
        TestLatentPosterior start = warm;
        if (r > 0) {
            Rng rng(opts.seed, static_cast<std::uint64_t>(r));
            for (Index k = 0; k < start.mu.size(); ++k) start.mu(k) = rng.normal();
        }
        OptimizeResult res;
        double initial = 0.0;
        try {
            VectorXd g;
            const VectorXd p0 = problem.pack(start);
            initial = problem(p0, g);
            res = maximize(problem, p0, opts.optimizer);
        } catch (const NumericalError&) {
            best.restart_objectives.push_back(std::numeric_limits<double>::quiet_NaN());
            continue;
        }
        best.restart_objectives.push_back(res.value);
        if (!any || res.value > best.objective) {
            any = true;
            bool clamped = false;
            best.q_star = problem.unpack(res.x, clamped);
            best.objective = res.value;
            best.initial_objective = initial;
            best.best_restart = r;
        }
    }
    if (!any) throw NumericalError("infer_latent: objective is non-finite at every restart");
    return best;
}

}  // namespace kronlvm
