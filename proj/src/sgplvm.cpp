#include "kronlvm/sgplvm.hpp"

#include "kronlvm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <numeric>

namespace kronlvm {

Index SgplvmModel::n_s() const {
    Index n = 1;
    for (const auto& f : x_s) n *= f.rows();
    return n;
}

std::vector<Index> SgplvmModel::data_dims() const {
    std::vector<Index> d{n_xi()};
    for (const auto& f : x_s) d.push_back(f.rows());
    return d;
}

std::vector<Index> SgplvmModel::inducing_dims() const {
    std::vector<Index> d{z_xi.rows()};
    for (const auto& f : x_s) d.push_back(f.rows());
    return d;
}

void SgplvmModel::validate() const {
    q.validate();
    if (n_xi() == 0 || latent_dim() == 0) throw ValidationError("sgplvm: empty latent posterior");
    if (y.rows() != n_xi() * n_s()) {
        throw ValidationError("sgplvm: data has " + std::to_string(y.rows()) + " rows but the design has " +
                              std::to_string(n_xi()) + " realizations x " + std::to_string(n_s()) + " spatial points");
    }
    if (y.cols() == 0) throw ValidationError("sgplvm: data has no output columns");
    if (z_xi.rows() == 0 || z_xi.cols() != latent_dim()) {
        throw ValidationError("sgplvm: inducing inputs must have one column per latent dimension");
    }
    if (k_xi.input_dim() != latent_dim()) throw ValidationError("sgplvm: stochastic kernel dimension differs from latents");
    if (k_s.size() != x_s.size()) throw ValidationError("sgplvm: one spatial kernel per spatial factor required");
    for (std::size_t f = 0; f < x_s.size(); ++f) {
        if (k_s[f].family != KernelFamily::exponential && k_s[f].family != KernelFamily::rbf_ard) {
            throw ValidationError("sgplvm: spatial kernels must be exponential or rbf");
        }
        if (x_s[f].rows() == 0) throw ValidationError("sgplvm: empty spatial factor");
        k_s[f].validate();
    }
    k_xi.validate();
    if (!(kuu_jitter >= 0.0) || !std::isfinite(kuu_jitter)) throw ValidationError("sgplvm: K_uu jitter must be non-negative");
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ValidationError("sgplvm: noise precision must be positive");
    if (!y.allFinite()) throw ValidationError("sgplvm: data contains non-finite values");
}

double latent_prior_kl(const LatentPosterior& q) {
    q.validate();
    return 0.5 * (q.s.array() - q.s.array().log() + q.mu.array().square() - 1.0).sum();
}

namespace {

constexpr double log_2pi = 1.8378770664093454836;

void factorize(FactorCache& fc, const std::string& name) {
    fc.L = chol(fc.K, name);
    const MatrixXd left = tri_solve(fc.L, fc.psi2);
    MatrixXd C = tri_solve(fc.L, left.transpose());
    fc.C = sym_eig(0.5 * (C + C.transpose()));
    fc.C.lambda = fc.C.lambda.cwiseMax(0.0);
    fc.E = tri_solve(fc.L, fc.C.Q, Side::left, Transpose::yes);
    fc.Phi = fc.psi1 * fc.E;
}

VectorXd kron_except(const std::vector<FactorCache>& fs, std::size_t skip) {
    std::vector<VectorXd> parts;
    for (std::size_t g = 0; g < fs.size(); ++g) {
        if (g != skip) parts.push_back(fs[g].C.lambda);
    }
    return kron_vectors(parts);
}

}  // namespace

BoundCache bound_cache(const SgplvmModel& m) {
    m.validate();
    BoundCache c;
    const std::size_t F = 1 + m.x_s.size();
    c.factors.resize(F);

    FactorCache& fx = c.factors[0];
    fx.K = gram(m.k_xi, m.z_xi, m.z_xi);
    fx.K.diagonal().array() += m.kuu_jitter;
    const PsiStats ps = psi_stats(m.k_xi, m.q, m.z_xi);
    if (!std::isfinite(ps.psi0) || !ps.psi1.allFinite() || !ps.psi2.allFinite()) {
        throw NumericalError("sgplvm: non-finite psi statistics");
    }
    fx.psi0 = ps.psi0;
    fx.psi1 = ps.psi1;
    fx.psi2 = ps.psi2;
    factorize(fx, "stochastic K_uu");
    for (std::size_t f = 1; f < F; ++f) {
        FactorCache& fs = c.factors[f];
        fs.K = gram(m.k_s[f - 1], m.x_s[f - 1], m.x_s[f - 1]);
        fs.psi0 = fs.K.trace();
        fs.psi1 = fs.K;
        fs.psi2 = fs.K * fs.K;
        factorize(fs, "spatial K_uu " + std::to_string(f));
    }

    std::vector<VectorXd> lams;
    c.psi0 = 1.0;
    c.trace_c = 1.0;
    for (const auto& fc : c.factors) {
        lams.push_back(fc.C.lambda);
        c.psi0 *= fc.psi0;
        c.trace_c *= fc.C.lambda.sum();
    }
    c.lambda = kron_vectors(lams);
    c.D = c.lambda.array() + 1.0 / m.beta;

    std::vector<MatrixXd> phit;
    for (const auto& fc : c.factors) phit.push_back(fc.Phi.transpose());
    std::vector<const MatrixXd*> ptr;
    for (const auto& p : phit) ptr.push_back(&p);
    const auto dims = m.data_dims();
    c.B.resize(c.lambda.size(), m.y.cols());
    for (Index j = 0; j < m.y.cols(); ++j) c.B.col(j) = multi_mode_product(Tensor{m.y.col(j), dims}, ptr).data;
    c.v_hat = c.B.array().colwise() / c.D.array();
    c.yy = m.y.colwise().squaredNorm().transpose();

    const double n = static_cast<double>(m.y.rows());
    const double mm = static_cast<double>(c.lambda.size());
    const double shared = 0.5 * ((n - mm) * std::log(m.beta) - n * log_2pi - c.D.array().log().sum()) -
                          0.5 * m.beta * (c.psi0 - c.trace_c);
    c.per_dim.resize(m.y.cols());
    for (Index j = 0; j < m.y.cols(); ++j) {
        const double fit = c.B.col(j).cwiseAbs2().cwiseQuotient(c.D).sum();
        c.per_dim(j) = shared - 0.5 * m.beta * (c.yy(j) - fit);
    }
    c.kl = latent_prior_kl(m.q);
    c.bound = c.per_dim.sum() - c.kl;
    if (!std::isfinite(c.bound)) throw NumericalError("sgplvm: bound is not finite");
    return c;
}

double collapsed_bound(const SgplvmModel& m) { return bound_cache(m).bound; }

BoundGradient bound_gradients(const SgplvmModel& m, const BoundCache& c) {
    const std::size_t F = c.factors.size();
    const double beta = m.beta;
    const double d = static_cast<double>(m.y.cols());
    const double n = static_cast<double>(m.y.rows());
    const double mm = static_cast<double>(c.lambda.size());
    const auto ddims = m.data_dims();
    const auto idims = m.inducing_dims();

    // Diagonal parts of dL/dK and dL/dPsi2 in the rotated basis.
    const VectorXd mk = (0.5 * d - 0.5 * d / (beta * c.D.array()) - 0.5 * beta * d * c.lambda.array()).matrix();
    const VectorXd m2 = (-0.5 * d / c.D.array() + 0.5 * beta * d).matrix();
    std::vector<VectorXd> lams;
    for (const auto& fc : c.factors) lams.push_back(fc.C.lambda);

    std::vector<MatrixXd> phit;
    for (const auto& fc : c.factors) phit.push_back(fc.Phi.transpose());

    std::vector<MatrixXd> dK(F), d1(F), d2(F);
    std::vector<double> d0(F);
    for (std::size_t f = 0; f < F; ++f) {
        const Index mf = idims[f];
        const VectorXd wl = kron_except(c.factors, f);
        MatrixXd NK = MatrixXd::Zero(mf, mf), N2 = MatrixXd::Zero(mf, mf);
        NK.diagonal() = weighted_partial_sum(Tensor{mk, idims}, f, {});
        N2.diagonal() = weighted_partial_sum(Tensor{m2, idims}, f, lams);

        std::vector<const MatrixXd*> ptr(F, nullptr);
        for (std::size_t g = 0; g < F; ++g) {
            if (g != f) ptr[g] = &phit[g];
        }
        MatrixXd G1 = MatrixXd::Zero(ddims[f], mf);
        for (Index j = 0; j < m.y.cols(); ++j) {
            const MatrixXd U = unfold(Tensor{c.v_hat.col(j), idims}, f);
            NK.noalias() -= 0.5 * U * U.transpose();
            N2.noalias() -= 0.5 * beta * U * wl.asDiagonal() * U.transpose();
            const Tensor T = multi_mode_product(Tensor{m.y.col(j), ddims}, ptr);
            G1.noalias() += unfold(T, f) * U.transpose();
        }
        const MatrixXd& E = c.factors[f].E;
        dK[f] = E * NK * E.transpose();
        d2[f] = E * N2 * E.transpose();
        d1[f] = beta * G1 * E.transpose();
        double others = 1.0;
        for (std::size_t g = 0; g < F; ++g) {
            if (g != f) others *= c.factors[g].psi0;
        }
        d0[f] = -0.5 * beta * d * others;
    }

    BoundGradient g;
    const PsiGradient pg = psi_vjp(m.k_xi, m.q, m.z_xi, d0[0], d1[0], d2[0]);
    const GramGradient kg = gram_vjp(m.k_xi, m.z_xi, m.z_xi, dK[0]);
    g.mu = pg.mu - m.q.mu;
    g.log_s = (pg.s.array() - 0.5 * (1.0 - m.q.s.array().inverse())) * m.q.s.array();
    g.z_xi = pg.Z + kg.X1 + kg.X2;
    g.k_xi = pg.log_params + kg.log_params;
    for (std::size_t f = 1; f < F; ++f) {
        const MatrixXd& K = c.factors[f].K;
        MatrixXd G = dK[f] + d1[f] + d2[f] * K + K * d2[f];
        G.diagonal().array() += d0[f];
        const VectorXd lp = gram_vjp(m.k_s[f - 1], m.x_s[f - 1], m.x_s[f - 1], G).log_params;
        g.k_s.push_back(lp.tail(lp.size() - 1));
    }

    const VectorXd invD = c.D.cwiseInverse();
    const double b2_d = (c.B.array().square().colwise() * invD.array()).sum();
    const double b2_d2 = (c.B.array().square().colwise() * invD.array().square()).sum();
    const double dbeta = 0.5 * d * (n - mm) / beta + 0.5 * d * invD.sum() / (beta * beta) - 0.5 * c.yy.sum() +
                         0.5 * b2_d + 0.5 * b2_d2 / beta - 0.5 * d * (c.psi0 - c.trace_c);
    g.log_beta = beta * dbeta;

    const FrozenGroups& fr = m.frozen;
    if (fr.latents) {
        g.mu.setZero();
        g.log_s.setZero();
    }
    if (fr.inducing) g.z_xi.setZero();
    if (fr.kernel_xi) g.k_xi.setZero();
    if (fr.kernel_s) {
        for (auto& v : g.k_s) v.setZero();
    }
    if (fr.beta) g.log_beta = 0.0;
    return g;
}

namespace {

template <class Visit>
void visit_groups(const SgplvmModel& m, Visit&& visit) {
    const FrozenGroups& fr = m.frozen;
    if (!fr.latents) {
        visit(0);
        visit(1);
    }
    if (!fr.inducing) visit(2);
    if (!fr.kernel_xi) visit(3);
    if (!fr.kernel_s) visit(4);
    if (!fr.beta) visit(5);
}

void append(std::vector<double>& out, const MatrixXd& M) { out.insert(out.end(), M.data(), M.data() + M.size()); }

VectorXd to_vector(const std::vector<double>& v) {
    return Eigen::Map<const VectorXd>(v.data(), static_cast<Index>(v.size()));
}

VectorXd spatial_lengthscales(const KernelSpec& k) {
    const VectorXd lp = k.log_params();
    return lp.tail(lp.size() - 1);
}

}  // namespace

VectorXd sgplvm_pack(const SgplvmModel& m) {
    std::vector<double> p;
    visit_groups(m, [&](int group) {
        switch (group) {
            case 0: append(p, m.q.mu); break;
            case 1: append(p, m.q.s.array().log().matrix()); break;
            case 2: append(p, m.z_xi); break;
            case 3: append(p, m.k_xi.log_params()); break;
            case 4:
                for (const auto& k : m.k_s) append(p, spatial_lengthscales(k));
                break;
            case 5: p.push_back(std::log(m.beta)); break;
        }
    });
    return to_vector(p);
}

void sgplvm_unpack(SgplvmModel& m, const VectorXd& p) {
    Index o = 0;
    auto take = [&](Index count) {
        if (o + count > p.size()) throw ValidationError("sgplvm_unpack: parameter vector too short");
        const VectorXd seg = p.segment(o, count);
        o += count;
        return seg;
    };
    visit_groups(m, [&](int group) {
        switch (group) {
            case 0: m.q.mu = take(m.q.mu.size()).reshaped(m.q.mu.rows(), m.q.mu.cols()); break;
            case 1: m.q.s = take(m.q.s.size()).array().exp().matrix().reshaped(m.q.s.rows(), m.q.s.cols()); break;
            case 2: m.z_xi = take(m.z_xi.size()).reshaped(m.z_xi.rows(), m.z_xi.cols()); break;
            case 3: m.k_xi.set_log_params(take(m.k_xi.num_params())); break;
            case 4:
                for (auto& k : m.k_s) {
                    VectorXd lp = k.log_params();
                    lp.tail(lp.size() - 1) = take(lp.size() - 1);
                    k.set_log_params(lp);
                }
                break;
            case 5: m.beta = std::exp(take(1)(0)); break;
        }
    });
    if (o != p.size()) throw ValidationError("sgplvm_unpack: parameter vector too long");
}

VectorXd sgplvm_pack_gradient(const SgplvmModel& m, const BoundGradient& g) {
    std::vector<double> p;
    visit_groups(m, [&](int group) {
        switch (group) {
            case 0: append(p, g.mu); break;
            case 1: append(p, g.log_s); break;
            case 2: append(p, g.z_xi); break;
            case 3: append(p, g.k_xi); break;
            case 4:
                for (const auto& v : g.k_s) append(p, v);
                break;
            case 5: p.push_back(g.log_beta); break;
        }
    });
    return to_vector(p);
}

MatrixXd random_inducing_subset(const MatrixXd& mu, Index m, Rng& rng) {
    if (m > mu.rows()) throw ValidationError("sgplvm: more inducing points than latent rows");
    std::vector<Index> idx(static_cast<std::size_t>(mu.rows()));
    std::iota(idx.begin(), idx.end(), Index{0});
    for (Index i = 0; i < m; ++i) {
        const Index j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(mu.rows() - i)));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    MatrixXd Z(m, mu.cols());
    for (Index i = 0; i < m; ++i) Z.row(i) = mu.row(idx[static_cast<std::size_t>(i)]);
    return Z;
}

namespace {

Index grid_points_of(const std::vector<MatrixXd>& x_s) {
    Index ns = 1;
    for (const auto& f : x_s) ns *= f.rows();
    return ns;
}

// Everything but the latents: inducing inputs, kernels and noise.
SgplvmModel init_around(const MatrixXd& y, const std::vector<MatrixXd>& x_s, LatentPosterior q, const InitPolicy& policy,
                        Rng& rng) {
    const Index nx = q.mu.rows(), dq = q.mu.cols();
    const Index mq = policy.inducing > 0 ? policy.inducing : std::clamp<Index>(nx / 2, 1, 128);
    SgplvmModel m;
    m.q = std::move(q);
    m.z_xi = random_inducing_subset(m.q.mu, mq, rng);

    const double mean = y.mean();
    const double var = (y.array() - mean).square().mean();
    // Constant data (e.g. solutions for a = 1) has nothing to fit; the bound
    // would grow without limit as the noise variance shrinks.
    if (!(var > 1e-20)) throw ValidationError("sgplvm init: training data is constant");
    const VectorXd ell = VectorXd::Constant(dq, std::sqrt(static_cast<double>(dq)));
    const VectorXd lin = VectorXd::Constant(dq, var / static_cast<double>(dq));
    switch (policy.family) {
        case KernelFamily::rbf_ard: m.k_xi = KernelSpec::rbf(var, ell); break;
        case KernelFamily::linear: m.k_xi = KernelSpec::linear(lin); break;
        case KernelFamily::sum: m.k_xi = KernelSpec::sum(var, ell, lin); break;
        case KernelFamily::exponential: throw ValidationError("sgplvm_init: exponential stochastic kernel is not supported");
    }
    m.x_s = x_s;
    for (const auto& f : x_s) {
        const double extent = f.col(0).maxCoeff() - f.col(0).minCoeff();
        m.k_s.push_back(KernelSpec::exponential(policy.spatial_lengthscale_fraction * (extent > 0.0 ? extent : 1.0)));
    }
    m.y = y;
    m.beta = policy.snr / var;
    m.kuu_jitter = 1e-6 * var;
    m.validate();
    return m;
}

}  // namespace

SgplvmModel sgplvm_init(const MatrixXd& y, const std::vector<MatrixXd>& x_s, const InitPolicy& policy) {
    const Index ns = grid_points_of(x_s);
    if (ns == 0 || y.rows() % ns != 0) throw ValidationError("sgplvm_init: data rows are not a multiple of the grid size");
    const Index nx = y.rows() / ns;
    if (nx < 2) throw ValidationError("sgplvm_init: need at least two realizations");
    const Index dq = policy.latent_dim > 0 ? policy.latent_dim : std::clamp<Index>(nx / 2, 1, 128);

    // Realizations as rows, every (spatial point, output column) as a feature.
    MatrixXd R(nx, ns * y.cols());
    for (Index j = 0; j < y.cols(); ++j) R.middleCols(j * ns, ns) = y.col(j).reshaped<Eigen::RowMajor>(nx, ns);
    R.rowwise() -= R.colwise().mean();
    const Eigen::BDCSVD<MatrixXd> svd(R, Eigen::ComputeThinU);
    Rng rng(policy.seed);
    LatentPosterior q;
    q.mu = MatrixXd::Zero(nx, dq);
    const double smax = svd.singularValues().size() > 0 ? svd.singularValues()(0) : 0.0;
    for (Index k = 0; k < dq; ++k) {
        if (k < svd.singularValues().size() && svd.singularValues()(k) > 1e-10 * smax) {
            q.mu.col(k) = svd.matrixU().col(k) * std::sqrt(static_cast<double>(nx));
        } else {
            q.mu.col(k) = 0.1 * rng.normal_matrix(nx, 1);  // data has no variance left in this direction
        }
    }
    q.s = MatrixXd::Constant(nx, dq, policy.init_s);
    return init_around(y, x_s, std::move(q), policy, rng);
}

SgplvmModel sgplvm_init_with_latents(const MatrixXd& y, const std::vector<MatrixXd>& x_s, const LatentPosterior& q,
                                     const InitPolicy& policy) {
    q.validate();
    if (y.rows() != q.mu.rows() * grid_points_of(x_s)) {
        throw ValidationError("sgplvm_init: data rows do not match latent rows x grid size");
    }
    Rng rng(policy.seed);
    return init_around(y, x_s, q, policy, rng);
}

SgplvmTrainResult sgplvm_train(SgplvmModel m, const OptimizerSettings& settings, const IterationCallback& on_iteration) {
    SgplvmTrainResult res;
    res.initial_bound = collapsed_bound(m);
    const SgplvmModel base = m;
    auto objective = [&base](const VectorXd& p, VectorXd& grad) {
        SgplvmModel trial = base;
        try {
            sgplvm_unpack(trial, p);
            const BoundCache c = bound_cache(trial);
            grad = sgplvm_pack_gradient(trial, bound_gradients(trial, c));
            return c.bound;
        } catch (const ValidationError& e) {
            // Exponentiated parameters can underflow on a long trial step.
            throw NumericalError(std::string("trial point outside the parameter domain: ") + e.what());
        }
    };
    res.opt = maximize(objective, sgplvm_pack(m), settings, on_iteration);
    sgplvm_unpack(m, res.opt.x);
    res.model = std::move(m);
    return res;
}

MatrixXd OptimalQu::dense_covariance() const {
    const MatrixXd A = factor.dense();
    return A * diag.asDiagonal() * A.transpose();
}

OptimalQu optimal_qu(const SgplvmModel& m, const BoundCache& c) {
    if (c.factors.size() != 1 + m.x_s.size() || c.v_hat.cols() != m.y.cols()) {
        throw ValidationError("optimal_qu: cache does not belong to this model");
    }
    OptimalQu out;
    for (const auto& fc : c.factors) out.factor.factors.push_back(fc.K * fc.E);
    out.mean.resize(c.v_hat.rows(), c.v_hat.cols());
    for (Index j = 0; j < c.v_hat.cols(); ++j) out.mean.col(j) = kron_matvec(out.factor, c.v_hat.col(j));
    out.diag = (m.beta * c.D.array()).inverse();
    return out;
}

}  // namespace kronlvm
