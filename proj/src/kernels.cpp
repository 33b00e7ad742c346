#include "kronlvm/kernels.hpp"

#include "kronlvm/errors.hpp"

#include <cmath>
#include <string>

namespace kronlvm {

KernelSpec KernelSpec::rbf(double variance, VectorXd lengthscales) {
    KernelSpec k;
    k.family = KernelFamily::rbf_ard;
    k.variance = variance;
    k.lengthscales = std::move(lengthscales);
    return k;
}

KernelSpec KernelSpec::exponential(double lengthscale, double variance) {
    KernelSpec k;
    k.family = KernelFamily::exponential;
    k.variance = variance;
    k.lengthscales = VectorXd::Constant(1, lengthscale);
    return k;
}

KernelSpec KernelSpec::linear(VectorXd variances) {
    KernelSpec k;
    k.family = KernelFamily::linear;
    k.variance = 0.0;
    k.linear_variances = std::move(variances);
    return k;
}

KernelSpec KernelSpec::sum(double variance, VectorXd lengthscales, VectorXd linear_variances) {
    KernelSpec k;
    k.family = KernelFamily::sum;
    k.variance = variance;
    k.lengthscales = std::move(lengthscales);
    k.linear_variances = std::move(linear_variances);
    return k;
}

Index KernelSpec::input_dim() const {
    switch (family) {
        case KernelFamily::rbf_ard: return lengthscales.size();
        case KernelFamily::exponential: return -1;  // any
        case KernelFamily::linear: return linear_variances.size();
        case KernelFamily::sum: return lengthscales.size();
    }
    return -1;
}

Index KernelSpec::num_params() const {
    Index n = 0;
    if (has_rbf() || family == KernelFamily::exponential) n += 1 + lengthscales.size();
    if (has_linear()) n += linear_variances.size();
    return n;
}

VectorXd KernelSpec::log_params() const {
    VectorXd p(num_params());
    Index o = 0;
    if (has_rbf() || family == KernelFamily::exponential) {
        p(o++) = std::log(variance);
        p.segment(o, lengthscales.size()) = lengthscales.array().log();
        o += lengthscales.size();
    }
    if (has_linear()) p.segment(o, linear_variances.size()) = linear_variances.array().log();
    return p;
}

void KernelSpec::set_log_params(const VectorXd& p) {
    if (p.size() != num_params()) throw ValidationError("KernelSpec: parameter vector has wrong length");
    Index o = 0;
    if (has_rbf() || family == KernelFamily::exponential) {
        variance = std::exp(p(o++));
        lengthscales = p.segment(o, lengthscales.size()).array().exp();
        o += lengthscales.size();
    }
    if (has_linear()) linear_variances = p.segment(o, linear_variances.size()).array().exp();
}

void KernelSpec::validate() const {
    if (family == KernelFamily::exponential && lengthscales.size() != 1) {
        throw ValidationError("exponential kernel takes exactly one lengthscale");
    }
    if (family == KernelFamily::sum && linear_variances.size() != lengthscales.size()) {
        throw ValidationError("sum kernel components must share the input dimension");
    }
    // Component variances of a sum may be zero (component switched off).
    const bool strict = family != KernelFamily::sum;
    auto positive = [strict](double v) { return strict ? v > 0.0 : v >= 0.0; };
    if ((has_rbf() || family == KernelFamily::exponential) && !positive(variance)) {
        throw ValidationError("kernel variance must be positive");
    }
    if ((has_rbf() || family == KernelFamily::exponential) && (lengthscales.array() <= 0.0).any()) {
        throw ValidationError("kernel lengthscales must be positive");
    }
    if (has_linear()) {
        for (Index q = 0; q < linear_variances.size(); ++q) {
            if (!positive(linear_variances(q))) throw ValidationError("linear kernel variances must be positive");
        }
    }
}

KernelFamily parse_family(std::string_view name) {
    if (name == "rbf" || name == "rbf_ard") return KernelFamily::rbf_ard;
    if (name == "linear") return KernelFamily::linear;
    if (name == "sum") return KernelFamily::sum;
    if (name == "exponential") return KernelFamily::exponential;
    throw ValidationError("unknown kernel family '" + std::string(name) + "' (expected rbf, linear, sum, exponential)");
}

std::string_view family_name(KernelFamily f) {
    switch (f) {
        case KernelFamily::rbf_ard: return "rbf";
        case KernelFamily::exponential: return "exponential";
        case KernelFamily::linear: return "linear";
        case KernelFamily::sum: return "sum";
    }
    return "?";
}

namespace {

void check_dims(const KernelSpec& k, const MatrixXd& X1, const MatrixXd& X2) {
    if (X1.cols() != X2.cols()) throw ValidationError("gram: input column counts differ");
    const Index d = k.input_dim();
    if (d >= 0 && X1.cols() != d) {
        throw ValidationError("gram: inputs have " + std::to_string(X1.cols()) + " columns, kernel expects " +
                              std::to_string(d));
    }
}

MatrixXd rbf_gram(double variance, const VectorXd& ell, const MatrixXd& X1, const MatrixXd& X2) {
    const MatrixXd A = X1 * ell.cwiseInverse().asDiagonal();
    const MatrixXd B = X2 * ell.cwiseInverse().asDiagonal();
    MatrixXd K(X1.rows(), X2.rows());
    for (Index j = 0; j < X2.rows(); ++j)
        for (Index i = 0; i < X1.rows(); ++i) K(i, j) = variance * std::exp(-0.5 * (A.row(i) - B.row(j)).squaredNorm());
    return K;
}

MatrixXd linear_gram(const VectorXd& sigma2, const MatrixXd& X1, const MatrixXd& X2) {
    return X1 * sigma2.asDiagonal() * X2.transpose();
}

MatrixXd gram_impl(const KernelSpec& k, const MatrixXd& X1, const MatrixXd& X2);

}  // namespace

MatrixXd gram(const KernelSpec& k, const MatrixXd& X1, const MatrixXd& X2) {
    check_dims(k, X1, X2);
    if (X1.rows() == X2.rows() && X1 == X2) {
        const MatrixXd K = gram_impl(k, X1, X2);
        return 0.5 * (K + K.transpose());
    }
    return gram_impl(k, X1, X2);
}

namespace {

MatrixXd gram_impl(const KernelSpec& k, const MatrixXd& X1, const MatrixXd& X2) {
    switch (k.family) {
        case KernelFamily::rbf_ard: return rbf_gram(k.variance, k.lengthscales, X1, X2);
        case KernelFamily::linear: return linear_gram(k.linear_variances, X1, X2);
        case KernelFamily::sum:
            return rbf_gram(k.variance, k.lengthscales, X1, X2) + linear_gram(k.linear_variances, X1, X2);
        case KernelFamily::exponential: {
            MatrixXd K(X1.rows(), X2.rows());
            const double ell = k.lengthscales(0);
            for (Index j = 0; j < X2.rows(); ++j)
                for (Index i = 0; i < X1.rows(); ++i) K(i, j) = k.variance * std::exp(-(X1.row(i) - X2.row(j)).norm() / ell);
            return K;
        }
    }
    throw ValidationError("gram: unknown kernel family");
}

}  // namespace

VectorXd gram_diag(const KernelSpec& k, const MatrixXd& X) {
    VectorXd d = VectorXd::Zero(X.rows());
    if (k.has_rbf() || k.family == KernelFamily::exponential) d.array() += k.variance;
    if (k.has_linear()) d += (X.array().square().matrix() * k.linear_variances);
    return d;
}

GramGradient gram_vjp(const KernelSpec& k, const MatrixXd& X1, const MatrixXd& X2, const MatrixXd& G) {
    check_dims(k, X1, X2);
    GramGradient out;
    out.log_params = VectorXd::Zero(k.num_params());
    if (k.family == KernelFamily::exponential) {
        const MatrixXd K = gram(k, X1, X2);
        const double ell = k.lengthscales(0);
        double gv = 0.0, gl = 0.0;
        for (Index j = 0; j < X2.rows(); ++j)
            for (Index i = 0; i < X1.rows(); ++i) {
                const double w = G(i, j) * K(i, j);
                gv += w;
                gl += w * (X1.row(i) - X2.row(j)).norm() / ell;
            }
        out.log_params << gv, gl;
        return out;
    }
    out.X1 = MatrixXd::Zero(X1.rows(), X1.cols());
    out.X2 = MatrixXd::Zero(X2.rows(), X2.cols());
    Index o = 0;
    if (k.has_rbf()) {
        const VectorXd& ell = k.lengthscales;
        const VectorXd inv_l2 = ell.array().square().inverse();
        const MatrixXd K = rbf_gram(k.variance, ell, X1, X2);
        const MatrixXd W = G.cwiseProduct(K);
        out.log_params(o) = W.sum();
        for (Index q = 0; q < X1.cols(); ++q) {
            double gl = 0.0;
            for (Index j = 0; j < X2.rows(); ++j)
                for (Index i = 0; i < X1.rows(); ++i) {
                    const double diff = X1(i, q) - X2(j, q);
                    gl += W(i, j) * diff * diff;
                    out.X1(i, q) -= W(i, j) * diff * inv_l2(q);
                    out.X2(j, q) += W(i, j) * diff * inv_l2(q);
                }
            out.log_params(o + 1 + q) = gl * inv_l2(q);
        }
        o += 1 + ell.size();
    }
    if (k.has_linear()) {
        const VectorXd& s2 = k.linear_variances;
        out.X1 += G * X2 * s2.asDiagonal();
        out.X2 += G.transpose() * X1 * s2.asDiagonal();
        const MatrixXd M = X1.transpose() * G * X2;
        out.log_params.segment(o, s2.size()) = s2.cwiseProduct(M.diagonal());
    }
    return out;
}

void LatentPosterior::validate() const {
    if (mu.rows() != s.rows() || mu.cols() != s.cols()) throw ValidationError("latent posterior: mu and s shapes differ");
    if ((s.array() <= 0.0).any()) throw ValidationError("latent posterior: variances must be positive");
    if (!mu.allFinite() || !s.allFinite()) throw NumericalError("latent posterior: non-finite entries");
}

}  // namespace kronlvm
