#include "kronlvm/kron.hpp"

#include "kronlvm/errors.hpp"

#include <lapacke.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace kronlvm {

namespace {

using RowBlock = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using RowBlockMut = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

void check_finite(const MatrixXd& A, std::string_view what) {
    if (!A.allFinite()) {
        throw NumericalError(std::string(what) + ": non-finite entries");
    }
}

}  // namespace

Index product(std::span<const Index> dims) {
    return std::accumulate(dims.begin(), dims.end(), Index{1}, std::multiplies<>());
}

Index KronMatrix::size() const {
    Index n = 1;
    for (const auto& f : factors) n *= f.rows();
    return n;
}

MatrixXd KronMatrix::dense() const {
    if (factors.empty()) throw ValidationError("KronMatrix: no factors");
    MatrixXd out = factors.front();
    for (std::size_t k = 1; k < factors.size(); ++k) {
        const MatrixXd& B = factors[k];
        MatrixXd next(out.rows() * B.rows(), out.cols() * B.cols());
        for (Index i = 0; i < out.rows(); ++i)
            for (Index j = 0; j < out.cols(); ++j)
                next.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = out(i, j) * B;
        out = std::move(next);
    }
    return out;
}

Tensor mode_product(const Tensor& x, std::size_t mode, const MatrixXd& M) {
    if (mode >= x.dims.size()) throw ValidationError("mode_product: mode out of range");
    const Index mid = x.dims[mode];
    if (M.cols() != mid) {
        throw ValidationError("mode_product: matrix has " + std::to_string(M.cols()) +
                              " columns, mode size is " + std::to_string(mid));
    }
    const Index pre = product(std::span(x.dims).first(mode));
    const Index post = product(std::span(x.dims).subspan(mode + 1));
    Tensor y;
    y.dims = x.dims;
    y.dims[mode] = M.rows();
    y.data.resize(pre * M.rows() * post);
    for (Index p = 0; p < pre; ++p) {
        RowBlock xb(x.data.data() + p * mid * post, mid, post);
        RowBlockMut yb(y.data.data() + p * M.rows() * post, M.rows(), post);
        yb.noalias() = M * xb;
    }
    return y;
}

Tensor multi_mode_product(Tensor x, std::span<const MatrixXd* const> mats) {
    if (mats.size() != x.dims.size()) throw ValidationError("multi_mode_product: one entry per mode required");
    for (std::size_t k = 0; k < mats.size(); ++k) {
        if (mats[k] != nullptr) x = mode_product(x, k, *mats[k]);
    }
    return x;
}

MatrixXd unfold(const Tensor& x, std::size_t mode) {
    const Index mid = x.dims[mode];
    const Index pre = product(std::span(x.dims).first(mode));
    const Index post = product(std::span(x.dims).subspan(mode + 1));
    MatrixXd out(mid, pre * post);
    for (Index p = 0; p < pre; ++p) {
        out.middleCols(p * post, post) = RowBlock(x.data.data() + p * mid * post, mid, post);
    }
    return out;
}

VectorXd kron_vectors(std::span<const VectorXd> parts) {
    VectorXd out = VectorXd::Ones(1);
    for (const auto& v : parts) {
        VectorXd next(out.size() * v.size());
        for (Index i = 0; i < out.size(); ++i) next.segment(i * v.size(), v.size()) = out(i) * v;
        out = std::move(next);
    }
    return out;
}

VectorXd weighted_partial_sum(const Tensor& x, std::size_t mode, std::span<const VectorXd> weights) {
    std::vector<VectorXd> w(x.dims.size());
    for (std::size_t g = 0; g < x.dims.size(); ++g) {
        if (g == mode || g >= weights.size() || weights[g].size() == 0) {
            w[g] = VectorXd::Ones(x.dims[g]);
        } else {
            w[g] = weights[g];
        }
    }
    Tensor weighted{x.data.cwiseProduct(kron_vectors(w)), x.dims};
    return unfold(weighted, mode).rowwise().sum();
}

VectorXd kron_matvec(const KronMatrix& K, const VectorXd& v) {
    if (K.factors.empty()) throw ValidationError("kron_matvec: no factors");
    Tensor t{v, {}};
    for (const auto& f : K.factors) {
        if (f.rows() != f.cols()) throw ValidationError("kron_matvec: factors must be square");
        t.dims.push_back(f.cols());
    }
    if (product(t.dims) != v.size()) {
        throw ValidationError("kron_matvec: vector length " + std::to_string(v.size()) +
                              " does not match logical size " + std::to_string(product(t.dims)));
    }
    for (std::size_t k = 0; k < K.factors.size(); ++k) t = mode_product(t, k, K.factors[k]);
    return t.data;
}

VectorXd kron_apply(std::span<const MatrixXd> factors, const VectorXd& v) {
    Tensor t{v, {}};
    for (const auto& f : factors) t.dims.push_back(f.cols());
    if (product(t.dims) != v.size()) throw ValidationError("kron_apply: vector length does not match factor columns");
    for (std::size_t k = 0; k < factors.size(); ++k) t = mode_product(t, k, factors[k]);
    return t.data;
}

MatrixXd kron_matmat(const KronMatrix& K, const MatrixXd& M) {
    if (M.rows() != K.size()) throw ValidationError("kron_matmat: row count does not match logical size");
    MatrixXd out(M.rows(), M.cols());
    for (Index j = 0; j < M.cols(); ++j) out.col(j) = kron_matvec(K, M.col(j));
    return out;
}

EigenPair sym_eig(const MatrixXd& A) {
    if (A.rows() != A.cols()) throw ValidationError("sym_eig: matrix not square");
    check_finite(A, "sym_eig");
    const MatrixXd S = 0.5 * (A + A.transpose());
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(S);
    if (es.info() != Eigen::Success) throw NumericalError("sym_eig: eigensolver did not converge");
    return {es.eigenvectors(), es.eigenvalues()};
}

EigenPair sym_eig_top(const MatrixXd& A, Index k) {
    const Index n = A.rows();
    if (A.cols() != n) throw ValidationError("sym_eig_top: matrix not square");
    if (k < 1 || k > n) throw ValidationError("sym_eig_top: requested count out of range");
    check_finite(A, "sym_eig_top");
    MatrixXd S = 0.5 * (A + A.transpose());
    VectorXd w(n);
    MatrixXd Z(n, k);
    std::vector<lapack_int> support(2 * static_cast<std::size_t>(k));
    lapack_int found = 0;
    const lapack_int info = LAPACKE_dsyevr(LAPACK_COL_MAJOR, 'V', 'I', 'L', static_cast<lapack_int>(n), S.data(),
                                           static_cast<lapack_int>(n), 0.0, 0.0, static_cast<lapack_int>(n - k + 1),
                                           static_cast<lapack_int>(n), 0.0, &found, w.data(), Z.data(),
                                           static_cast<lapack_int>(n), support.data());
    if (info != 0 || found != k) {
        throw NumericalError("sym_eig_top: LAPACK dsyevr failed (info " + std::to_string(info) + ")");
    }
    EigenPair out{MatrixXd(n, k), VectorXd(k)};
    for (Index i = 0; i < k; ++i) {
        out.lambda(i) = w(k - 1 - i);
        out.Q.col(i) = Z.col(k - 1 - i);
    }
    if (!out.Q.allFinite() || !out.lambda.allFinite()) throw NumericalError("sym_eig_top: non-finite output");
    return out;
}

KronEigen kron_eig(const KronMatrix& K) {
    KronEigen out;
    std::vector<VectorXd> lams;
    for (const auto& f : K.factors) {
        EigenPair e = sym_eig(f);
        out.Q.factors.push_back(std::move(e.Q));
        lams.push_back(std::move(e.lambda));
    }
    out.lambda = kron_vectors(lams);
    return out;
}

double eigen_floor(const VectorXd& lambda) {
    return lambda.size() == 0 ? 0.0 : 1e-12 * std::max(lambda.maxCoeff(), 0.0);
}

VectorXd clamp_eigenvalues(const VectorXd& lambda) {
    return lambda.cwiseMax(eigen_floor(lambda));
}

CholFactor chol(const MatrixXd& A, std::string_view name, const JitterPolicy& policy) {
    if (A.rows() != A.cols()) throw ValidationError(std::string(name) + ": Cholesky of non-square matrix");
    check_finite(A, name);
    const double scale = A.rows() > 0 && A.diagonal().mean() > 0.0 ? A.diagonal().mean() : 1.0;
    double jitter = 0.0;
    for (int attempt = 0; attempt <= policy.max_retries; ++attempt) {
        if (attempt > 0) jitter = policy.initial_relative * scale * std::pow(policy.growth, attempt - 1);
        MatrixXd Aj = A;
        Aj.diagonal().array() += jitter;
        Eigen::LLT<MatrixXd> llt(Aj);
        if (llt.info() == Eigen::Success) {
            MatrixXd L = llt.matrixL();
            if (L.allFinite() && (L.diagonal().array() > 0.0).all()) return {std::move(L), jitter};
        }
    }
    throw NumericalError(std::string(name) + ": not positive definite after " + std::to_string(policy.max_retries) +
                         " jitter retries (last jitter " + std::to_string(jitter) + ")");
}

MatrixXd tri_solve(const CholFactor& L, const MatrixXd& B, Side side, Transpose op) {
    const Index n = L.L.rows();
    if ((L.L.diagonal().array() == 0.0).any()) throw NumericalError("tri_solve: zero diagonal entry");
    const auto tri = L.L.triangularView<Eigen::Lower>();
    if (side == Side::left) {
        if (B.rows() != n) throw ValidationError("tri_solve: shape mismatch");
        return op == Transpose::no ? MatrixXd(tri.solve(B)) : MatrixXd(tri.transpose().solve(B));
    }
    if (B.cols() != n) throw ValidationError("tri_solve: shape mismatch");
    // X op(L) = B  <=>  op(L)^T X^T = B^T
    MatrixXd Bt = B.transpose();
    MatrixXd Xt = op == Transpose::no ? MatrixXd(tri.transpose().solve(Bt)) : MatrixXd(tri.solve(Bt));
    return Xt.transpose();
}

}  // namespace kronlvm
