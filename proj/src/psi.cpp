#include "kronlvm/errors.hpp"
#include "kronlvm/kernels.hpp"

#include <cmath>

namespace kronlvm {

namespace {

void check_inputs(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z) {
    q.validate();
    if (Z.cols() != q.mu.cols()) throw ValidationError("psi statistics: inducing inputs and latents differ in width");
    if (k.family == KernelFamily::exponential) throw ValidationError("psi statistics: not defined for exponential kernel");
    if (k.input_dim() != q.mu.cols()) throw ValidationError("psi statistics: kernel dimension does not match latents");
    if (k.has_rbf() && (k.lengthscales.array() <= 0.0).any()) throw ValidationError("psi statistics: lengthscales must be positive");
    if (k.variance < 0.0 || (k.has_linear() && (k.linear_variances.array() < 0.0).any())) {
        throw ValidationError("psi statistics: variances must be non-negative");
    }
}

MatrixXd rbf_psi1(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z) {
    const Index n = q.mu.rows(), m = Z.rows(), d = Z.cols();
    const VectorXd l2 = k.lengthscales.array().square();
    MatrixXd P(n, m);
    for (Index i = 0; i < n; ++i) {
        double log_c = std::log(k.variance);
        VectorXd b(d);
        for (Index q_ = 0; q_ < d; ++q_) {
            b(q_) = 1.0 / (l2(q_) + q.s(i, q_));
            log_c += 0.5 * std::log(l2(q_) * b(q_));
        }
        for (Index j = 0; j < m; ++j) {
            double e = 0.0;
            for (Index q_ = 0; q_ < d; ++q_) {
                const double h = q.mu(i, q_) - Z(j, q_);
                e += b(q_) * h * h;
            }
            P(i, j) = std::exp(log_c - 0.5 * e);
        }
    }
    return P;
}

// -(z_m - z_m')^2 / (4 l^2) summed over dimensions.
MatrixXd rbf_pair_exponent(const VectorXd& l2, const MatrixXd& Z) {
    const Index m = Z.rows();
    MatrixXd E(m, m);
    for (Index b = 0; b < m; ++b)
        for (Index a = 0; a < m; ++a) E(a, b) = -0.25 * (Z.row(a) - Z.row(b)).cwiseQuotient(l2.transpose().cwiseSqrt()).squaredNorm();
    return E;
}

struct RbfRow {
    VectorXd a;     // 1 / (l^2 + 2 s_i)
    MatrixXd H;     // mu_i - z_m, m x d
    MatrixXd psi2;  // summand
};

RbfRow rbf_psi2_row(const KernelSpec& k, const LatentPosterior& q, Index i, const MatrixXd& Z, const MatrixXd& E0) {
    const Index m = Z.rows(), d = Z.cols();
    const VectorXd l2 = k.lengthscales.array().square();
    RbfRow r;
    r.a.resize(d);
    double log_c = 2.0 * std::log(k.variance);
    for (Index q_ = 0; q_ < d; ++q_) {
        r.a(q_) = 1.0 / (l2(q_) + 2.0 * q.s(i, q_));
        log_c += 0.5 * std::log(l2(q_) * r.a(q_));
    }
    r.H = (-Z).rowwise() + q.mu.row(i);
    const MatrixXd HA = r.H * r.a.asDiagonal();
    const MatrixXd cross = HA * r.H.transpose();
    const VectorXd p = cross.diagonal();
    r.psi2.resize(m, m);
    for (Index b = 0; b < m; ++b)
        for (Index a = 0; a < m; ++a) r.psi2(a, b) = std::exp(log_c + E0(a, b) - 0.25 * (p(a) + p(b) + 2.0 * cross(a, b)));
    return r;
}

MatrixXd rbf_psi2(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z) {
    const VectorXd l2 = k.lengthscales.array().square();
    const MatrixXd E0 = rbf_pair_exponent(l2, Z);
    MatrixXd P = MatrixXd::Zero(Z.rows(), Z.rows());
    for (Index i = 0; i < q.mu.rows(); ++i) P += rbf_psi2_row(k, q, i, Z, E0).psi2;
    return P;
}

double linear_psi0(const KernelSpec& k, const LatentPosterior& q) {
    return ((q.mu.array().square() + q.s.array()).colwise().sum().transpose() * k.linear_variances.array()).sum();
}

MatrixXd linear_psi1(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z) {
    return q.mu * k.linear_variances.asDiagonal() * Z.transpose();
}

MatrixXd linear_omega(const LatentPosterior& q) {
    MatrixXd Om = q.mu.transpose() * q.mu;
    Om.diagonal() += q.s.colwise().sum().transpose();
    return Om;
}

MatrixXd linear_psi2(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z) {
    const MatrixXd A = k.linear_variances.asDiagonal() * Z.transpose();
    return A.transpose() * linear_omega(q) * A;
}

// Gaussian-product mean of the RBF factor times q(x_i): (l^2 mu + s z) / (l^2 + s).
double product_mean(double l2, double mu, double s, double z) {
    return (l2 * mu + s * z) / (l2 + s);
}

// Wc(q, m') = sum_i Psi1_rbf(i, m') * mtilde(i, m', q);  X = Z S Wc.
MatrixXd cross_weights(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z, const MatrixXd& P1) {
    const Index n = q.mu.rows(), m = Z.rows(), d = Z.cols();
    const VectorXd l2 = k.lengthscales.array().square();
    MatrixXd Wc = MatrixXd::Zero(d, m);
    for (Index j = 0; j < m; ++j)
        for (Index i = 0; i < n; ++i)
            for (Index q_ = 0; q_ < d; ++q_) Wc(q_, j) += P1(i, j) * product_mean(l2(q_), q.mu(i, q_), q.s(i, q_), Z(j, q_));
    return Wc;
}

MatrixXd cross_term(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z, const MatrixXd& P1) {
    return Z * k.linear_variances.asDiagonal() * cross_weights(k, q, Z, P1);
}

KernelSpec rbf_part(const KernelSpec& k) { return KernelSpec::rbf(k.variance, k.lengthscales); }
KernelSpec linear_part(const KernelSpec& k) { return KernelSpec::linear(k.linear_variances); }

void rbf_vjp(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z, double g0, const MatrixXd& G1,
             const MatrixXd& G2, PsiGradient& out, Index offset) {
    const Index n = q.mu.rows(), m = Z.rows(), d = Z.cols();
    const VectorXd l2 = k.lengthscales.array().square();
    VectorXd d_l2 = VectorXd::Zero(d);
    double d_logvar = g0 * static_cast<double>(n) * k.variance;

    if (G1.size() > 0) {
        const MatrixXd P1 = rbf_psi1(k, q, Z);
        const MatrixXd W1 = G1.cwiseProduct(P1);
        d_logvar += W1.sum();
        for (Index i = 0; i < n; ++i) {
            const double rs = W1.row(i).sum();
            for (Index q_ = 0; q_ < d; ++q_) {
                const double b = 1.0 / (l2(q_) + q.s(i, q_));
                double wh = 0.0, wh2 = 0.0;
                for (Index j = 0; j < m; ++j) {
                    const double h = q.mu(i, q_) - Z(j, q_);
                    wh += W1(i, j) * h;
                    wh2 += W1(i, j) * h * h;
                    out.Z(j, q_) += W1(i, j) * b * h;
                }
                out.mu(i, q_) -= b * wh;
                const double ds = -0.5 * b * rs + 0.5 * b * b * wh2;
                out.s(i, q_) += ds;
                d_l2(q_) += ds + 0.5 * rs / l2(q_);
            }
        }
    }

    if (G2.size() > 0) {
        const MatrixXd E0 = rbf_pair_exponent(l2, Z);
        MatrixXd S_tot = MatrixXd::Zero(m, m);
        for (Index i = 0; i < n; ++i) {
            const RbfRow r = rbf_psi2_row(k, q, i, Z, E0);
            const MatrixXd W = G2.cwiseProduct(r.psi2);
            const MatrixXd S = W + W.transpose();
            S_tot += S;
            const VectorXd S1 = S.rowwise().sum();
            const double wsum = W.sum();
            d_logvar += 2.0 * wsum;
            const MatrixXd SH = S * r.H;
            for (Index q_ = 0; q_ < d; ++q_) {
                const double a = r.a(q_);
                const double s1h = S1.dot(r.H.col(q_));
                out.mu(i, q_) -= a * s1h;
                // sum_mm' W (h_m + h_m')^2 = S1.(h∘h) + h^T S h
                const double quad = S1.dot(r.H.col(q_).cwiseAbs2()) + r.H.col(q_).dot(SH.col(q_));
                const double ds = -a * wsum + 0.5 * a * a * quad;
                out.s(i, q_) += ds;
                d_l2(q_) += 0.5 * ds + 0.5 * wsum / l2(q_);
                for (Index j = 0; j < m; ++j) out.Z(j, q_) += 0.5 * a * (S1(j) * r.H(j, q_) + SH(j, q_));
            }
        }
        const VectorXd S1t = S_tot.rowwise().sum();
        const MatrixXd SZ = S_tot * Z;
        for (Index q_ = 0; q_ < d; ++q_) {
            for (Index j = 0; j < m; ++j) out.Z(j, q_) -= (S1t(j) * Z(j, q_) - SZ(j, q_)) / (2.0 * l2(q_));
            // sum W_tot (z_m - z_m')^2 = S1t.(z∘z) - z^T S_tot z
            const double pair = S1t.dot(Z.col(q_).cwiseAbs2()) - Z.col(q_).dot(SZ.col(q_));
            d_l2(q_) += pair / (4.0 * l2(q_) * l2(q_));
        }
    }
    out.log_params(offset) += d_logvar;
    for (Index q_ = 0; q_ < d; ++q_) out.log_params(offset + 1 + q_) += 2.0 * l2(q_) * d_l2(q_);
}

void linear_vjp(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z, double g0, const MatrixXd& G1,
                const MatrixXd& G2, PsiGradient& out, Index offset) {
    const VectorXd& s2 = k.linear_variances;
    const Index d = s2.size();
    VectorXd d_s2 = VectorXd::Zero(d);
    if (g0 != 0.0) {
        out.mu += 2.0 * g0 * q.mu * s2.asDiagonal();
        out.s += g0 * MatrixXd::Ones(q.s.rows(), 1) * s2.transpose();
        d_s2 += g0 * (q.mu.array().square() + q.s.array()).colwise().sum().transpose().matrix();
    }
    if (G1.size() > 0) {
        out.mu += G1 * Z * s2.asDiagonal();
        out.Z += G1.transpose() * q.mu * s2.asDiagonal();
        d_s2 += (q.mu.transpose() * G1 * Z).diagonal();
    }
    if (G2.size() > 0) {
        const MatrixXd A = s2.asDiagonal() * Z.transpose();
        const MatrixXd Om = linear_omega(q);
        const MatrixXd dA = Om * A * (G2 + G2.transpose());
        const MatrixXd dOm = A * G2 * A.transpose();
        out.mu += q.mu * (dOm + dOm.transpose());
        out.s += MatrixXd::Ones(q.s.rows(), 1) * dOm.diagonal().transpose();
        out.Z += dA.transpose() * s2.asDiagonal();
        d_s2 += (dA * Z).diagonal();
    }
    out.log_params.segment(offset, d) += s2.cwiseProduct(d_s2);
}

// Cross term of the sum kernel; returns the extra Psi1_rbf cotangent.
MatrixXd cross_vjp(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z, const MatrixXd& G2,
                   const MatrixXd& P1, PsiGradient& out, Index rbf_offset, Index lin_offset) {
    const Index n = q.mu.rows(), m = Z.rows(), d = Z.cols();
    const VectorXd l2 = k.lengthscales.array().square();
    const VectorXd& s2 = k.linear_variances;
    const MatrixXd H = G2 + G2.transpose();
    const MatrixXd Wc = cross_weights(k, q, Z, P1);
    out.Z += H * Wc.transpose() * s2.asDiagonal();
    const VectorXd d_s2 = (Z.transpose() * H * Wc.transpose()).diagonal();
    out.log_params.segment(lin_offset, d) += s2.cwiseProduct(d_s2);
    const MatrixXd U = s2.asDiagonal() * Z.transpose() * H;  // d x m
    MatrixXd dP1 = MatrixXd::Zero(n, m);
    VectorXd d_l2 = VectorXd::Zero(d);
    for (Index j = 0; j < m; ++j)
        for (Index i = 0; i < n; ++i)
            for (Index q_ = 0; q_ < d; ++q_) {
                const double mu = q.mu(i, q_), s = q.s(i, q_), z = Z(j, q_), den = l2(q_) + s;
                dP1(i, j) += U(q_, j) * product_mean(l2(q_), mu, s, z);
                const double dT = P1(i, j) * U(q_, j);
                out.mu(i, q_) += dT * l2(q_) / den;
                out.Z(j, q_) += dT * s / den;
                out.s(i, q_) += dT * l2(q_) * (z - mu) / (den * den);
                d_l2(q_) += dT * s * (mu - z) / (den * den);
            }
    for (Index q_ = 0; q_ < d; ++q_) out.log_params(rbf_offset + 1 + q_) += 2.0 * l2(q_) * d_l2(q_);
    return dP1;
}

}  // namespace

PsiStats psi_stats_rbf(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z) {
    if (k.family != KernelFamily::rbf_ard) throw ValidationError("psi_stats_rbf: kernel is not rbf_ard");
    check_inputs(k, q, Z);
    return {static_cast<double>(q.mu.rows()) * k.variance, rbf_psi1(k, q, Z), rbf_psi2(k, q, Z)};
}

PsiStats psi_stats_linear(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z) {
    if (k.family != KernelFamily::linear) throw ValidationError("psi_stats_linear: kernel is not linear");
    check_inputs(k, q, Z);
    return {linear_psi0(k, q), linear_psi1(k, q, Z), linear_psi2(k, q, Z)};
}

PsiStats psi_stats_sum(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z) {
    if (k.family != KernelFamily::sum) throw ValidationError("psi_stats_sum: kernel is not a sum kernel");
    check_inputs(k, q, Z);
    const KernelSpec r = rbf_part(k);
    const MatrixXd P1 = rbf_psi1(r, q, Z);
    const MatrixXd X = cross_term(k, q, Z, P1);
    PsiStats out;
    out.psi0 = static_cast<double>(q.mu.rows()) * k.variance + linear_psi0(k, q);
    out.psi1 = P1 + linear_psi1(k, q, Z);
    out.psi2 = rbf_psi2(r, q, Z) + linear_psi2(k, q, Z) + X + X.transpose();
    return out;
}

PsiStats psi_stats(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z) {
    switch (k.family) {
        case KernelFamily::rbf_ard: return psi_stats_rbf(k, q, Z);
        case KernelFamily::linear: return psi_stats_linear(k, q, Z);
        case KernelFamily::sum: return psi_stats_sum(k, q, Z);
        case KernelFamily::exponential: break;
    }
    throw ValidationError("psi statistics: not defined for exponential kernel");
}

MatrixXd psi2_row(const KernelSpec& k, const LatentPosterior& q, Index row, const MatrixXd& Z) {
    LatentPosterior one{q.mu.row(row), q.s.row(row)};
    return psi_stats(k, one, Z).psi2;
}

PsiGradient psi_vjp(const KernelSpec& k, const LatentPosterior& q, const MatrixXd& Z, double g0, const MatrixXd& G1,
                    const MatrixXd& G2) {
    check_inputs(k, q, Z);
    PsiGradient out{MatrixXd::Zero(q.mu.rows(), q.mu.cols()), MatrixXd::Zero(q.s.rows(), q.s.cols()),
                    MatrixXd::Zero(Z.rows(), Z.cols()), VectorXd::Zero(k.num_params())};
    const Index lin_offset = k.family == KernelFamily::sum ? 1 + k.lengthscales.size() : 0;
    switch (k.family) {
        case KernelFamily::rbf_ard: rbf_vjp(k, q, Z, g0, G1, G2, out, 0); break;
        case KernelFamily::linear: linear_vjp(k, q, Z, g0, G1, G2, out, 0); break;
        case KernelFamily::sum: {
            const KernelSpec r = rbf_part(k);
            MatrixXd G1_rbf = G1;
            if (G2.size() > 0) {
                const MatrixXd dP1 = cross_vjp(k, q, Z, G2, rbf_psi1(r, q, Z), out, 0, lin_offset);
                G1_rbf = G1.size() > 0 ? MatrixXd(G1 + dP1) : dP1;
            }
            rbf_vjp(r, q, Z, g0, G1_rbf, G2, out, 0);
            linear_vjp(linear_part(k), q, Z, g0, G1, G2, out, lin_offset);
            break;
        }
        case KernelFamily::exponential: throw ValidationError("psi_vjp: not defined for exponential kernel");
    }
    return out;
}

}  // namespace kronlvm
